//! Per-sample feature cache keyed by a content hash of everything the
//! probe depends on. A killed `extract` keeps every finished sample.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gds_core::corpus::TokenSequence;
use gds_core::features::{extract, read_feature_bin, write_feature_bin, FeatureVector};
use gds_core::lora::{probe_gradients, LoraAdapterSet, LoraConfig};
use gds_core::tensor_io::write_atomic;
use gds_core::tinylm::ModelParams;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub struct FeatureCache {
    dir: PathBuf,
    /// Hash of checkpoint, adapter config and adapter seed.
    probe_digest: String,
}

impl FeatureCache {
    pub fn new(dir: PathBuf, checkpoint_sha256: &str, lora: &LoraConfig, lora_seed: u64) -> Result<Self> {
        let mut h = Sha256::new();
        h.update(checkpoint_sha256.as_bytes());
        h.update(serde_json::to_vec(lora)?);
        h.update(lora_seed.to_le_bytes());
        Ok(Self { dir, probe_digest: hex::encode(h.finalize()) })
    }

    fn key(&self, s: &TokenSequence) -> String {
        let mut h = Sha256::new();
        h.update(self.probe_digest.as_bytes());
        h.update(s.source_id.as_bytes());
        h.update([s.label.as_u8()]);
        for id in &s.ids {
            h.update(id.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.bin"))
    }

    /// A corrupt or unreadable entry counts as a miss.
    fn load(&self, key: &str) -> Option<FeatureVector> {
        let f = std::fs::File::open(self.path(key)).ok()?;
        match read_feature_bin(std::io::BufReader::new(f)) {
            Ok(mut v) if v.len() == 1 => v.pop(),
            _ => {
                log::warn!("ignoring unreadable cache entry {key}");
                None
            }
        }
    }

    fn store(&self, key: &str, v: &FeatureVector) -> Result<()> {
        let mut buf = Vec::new();
        write_feature_bin(&mut buf, std::slice::from_ref(v))?;
        write_atomic(&self.path(key), &buf)?;
        Ok(())
    }

    /// Features for every sample in order, probing only cache misses
    /// (or everything with `force`). Returns the vectors and the number probed.
    pub fn features(
        &self,
        params: &ModelParams,
        adapters: &LoraAdapterSet,
        samples: &[TokenSequence],
        force: bool,
    ) -> Result<(Vec<FeatureVector>, usize)> {
        std::fs::create_dir_all(&self.dir).with_context(|| format!("creating {}", self.dir.display()))?;
        let results: Vec<Result<(FeatureVector, bool)>> = samples
            .par_iter()
            .map(|s| {
                let key = self.key(s);
                if !force {
                    if let Some(v) = self.load(&key) {
                        return Ok((v, false));
                    }
                }
                let v = extract(&probe_gradients(params, adapters, s)?, &s.source_id, s.label)?;
                self.store(&key, &v)?;
                Ok((v, true))
            })
            .collect();
        let mut out = Vec::with_capacity(samples.len());
        let mut probed = 0;
        for r in results {
            let (v, fresh) = r?;
            probed += fresh as usize;
            out.push(v);
        }
        // entries read back separately carry their own layout handles
        if let Some(first) = out.first().map(|v| v.layout.clone()) {
            for v in &mut out {
                anyhow::ensure!(v.layout == first, "cached vectors disagree on layout");
                v.layout = first.clone();
            }
        }
        Ok((out, probed))
    }
}
