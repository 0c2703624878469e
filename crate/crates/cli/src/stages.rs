use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gds_core::baselines::write_score_csv;
use gds_core::config::{RunConfig, Seeds};
use gds_core::corpus::write_jsonl;
use gds_core::detector::{fit, Detector};
use gds_core::dynamics::write_dynamics_csv;
use gds_core::error::StageContext;
use gds_core::eval::experiment::{
    ablation_csv, assemble_report, detect, dynamics_stage, pretrain, prepare_corpus, probe_adapters, run_ablations,
    score_baselines, to_json_bytes, write_methods, AblationRow, PreparedCorpus,
};
use gds_core::eval::{roc_summary, RocSummary, ScoredSet};
use gds_core::features::{read_feature_bin, write_feature_bin, write_feature_csv, FeatureVector};
use gds_core::synth::{generate, SynthConfig};
use gds_core::tensor_io::{load_checkpoint, save_checkpoint, write_atomic};
use gds_core::tinylm::ModelParams;
use serde::{Deserialize, Serialize};

use crate::cache::{file_sha256, FeatureCache};
use crate::Common;

/// Bad config, missing inputs or missing prerequisite artifacts.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Serialize, Deserialize, PartialEq)]
struct Echo {
    stage: String,
    config: RunConfig,
    seeds: Seeds,
}

#[derive(Serialize, Deserialize)]
struct ExtractManifest {
    checkpoint_sha256: String,
    n_probe_train: usize,
    n_probe_eval: usize,
}

pub struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    force: bool,
}

impl Ctx {
    /// Resolves and fully validates the config; nothing is written here.
    pub fn new(common: &Common) -> Result<Self> {
        let mut cfg =
            RunConfig::load(common.config.as_deref(), &common.overrides).map_err(|e| usage(e.to_string()))?;
        if let Some(root) = &common.output_root {
            if cfg.output_dir.is_relative() {
                cfg.output_dir = root.join(&cfg.output_dir);
            }
        }
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        cfg.check_paths().map_err(|e| usage(e.to_string()))?;
        Ok(Self { out: cfg.output_dir.clone(), cfg, force: common.force })
    }

    fn dir(&self, stage: &str) -> PathBuf {
        self.out.join(stage)
    }

    fn echo_bytes(&self, stage: &str) -> Result<Vec<u8>> {
        Ok(to_json_bytes(&Echo { stage: stage.into(), config: self.cfg.clone(), seeds: self.cfg.seeds() })?)
    }

    /// True when every output exists and was produced by this exact config.
    fn up_to_date(&self, stage: &str, outputs: &[&str]) -> Result<bool> {
        if self.force {
            return Ok(false);
        }
        let dir = self.dir(stage);
        let echo = std::fs::read(dir.join("config.json")).ok();
        let fresh = echo == Some(self.echo_bytes(stage)?) && outputs.iter().all(|o| dir.join(o).is_file());
        if fresh {
            log::info!("{stage}: outputs in {} are current; pass --force to recompute", dir.display());
        }
        Ok(fresh)
    }

    /// Written last, so an interrupted stage is never mistaken for a finished one.
    fn write_echo(&self, stage: &str) -> Result<()> {
        write_atomic(&self.dir(stage).join("config.json"), &self.echo_bytes(stage)?)?;
        Ok(())
    }

    fn clear_echo(&self, stage: &str) {
        let _ = std::fs::remove_file(self.dir(stage).join("config.json"));
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.dir("pretrain").join("checkpoint.bin")
    }

    fn require(&self, path: &Path, producer: &str) -> Result<()> {
        if !path.is_file() {
            return Err(usage(format!("{} is missing; run `gds {producer}` first", path.display())));
        }
        Ok(())
    }

    fn load_params(&self) -> Result<ModelParams> {
        let path = self.checkpoint_path();
        self.require(&path, "pretrain")?;
        let params = load_checkpoint(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        if params.config != self.cfg.model_config() {
            bail!("checkpoint {} was trained with a different model config; rerun `gds pretrain`", path.display());
        }
        Ok(params)
    }

    fn corpus(&self) -> Result<PreparedCorpus> {
        Ok(prepare_corpus(&self.cfg).stage("corpus")?)
    }

    pub fn pretrain(&self) -> Result<()> {
        let stage = "pretrain";
        if self.up_to_date(stage, &["checkpoint.bin", "losses.csv"])? {
            return Ok(());
        }
        let corpus = self.corpus()?;
        log::info!("pretrain: {} member samples, {} epochs", corpus.pretrain.len(), self.cfg.pretrain_epochs);
        let outcome = pretrain(&self.cfg, &corpus).stage(stage)?;
        self.clear_echo(stage);
        let dir = self.dir(stage);
        save_checkpoint(&dir.join("checkpoint.bin"), &outcome.params)?;
        write_atomic(&dir.join("losses.csv"), &losses_csv(&outcome.epoch_losses))?;
        self.write_echo(stage)?;
        log::info!("pretrain: final loss {:.4}", outcome.epoch_losses.last().copied().unwrap_or(f64::NAN));
        Ok(())
    }

    pub fn extract(&self) -> Result<()> {
        let stage = "extract";
        let params = self.load_params()?;
        let ckpt_sha = file_sha256(&self.checkpoint_path())?;
        let outputs = ["features_probe_train.bin", "features_probe_eval.bin", "manifest.json"];
        if self.up_to_date(stage, &outputs)? && self.manifest()?.checkpoint_sha256 == ckpt_sha {
            return Ok(());
        }
        let corpus = self.corpus()?;
        let adapters = probe_adapters(&self.cfg, &params).stage(stage)?;
        let dir = self.dir(stage);
        let cache = FeatureCache::new(dir.join("cache"), &ckpt_sha, &self.cfg.lora_config(), self.cfg.seeds().lora)?;
        self.clear_echo(stage);
        let mut counts = Vec::new();
        for (name, samples) in [("probe_train", &corpus.probe_train), ("probe_eval", &corpus.probe_eval)] {
            let (vectors, probed) = cache.features(&params, &adapters, samples, self.force)?;
            log::info!("extract: {name}: {} vectors, {probed} probed, {} from cache", vectors.len(), vectors.len() - probed);
            let mut bin = Vec::new();
            write_feature_bin(&mut bin, &vectors)?;
            write_atomic(&dir.join(format!("features_{name}.bin")), &bin)?;
            let mut csv = Vec::new();
            write_feature_csv(&mut csv, &vectors)?;
            write_atomic(&dir.join(format!("features_{name}.csv")), &csv)?;
            counts.push(vectors.len());
        }
        let manifest = ExtractManifest { checkpoint_sha256: ckpt_sha, n_probe_train: counts[0], n_probe_eval: counts[1] };
        write_atomic(&dir.join("manifest.json"), &to_json_bytes(&manifest)?)?;
        self.write_echo(stage)
    }

    fn manifest(&self) -> Result<ExtractManifest> {
        let path = self.dir("extract").join("manifest.json");
        self.require(&path, "extract")?;
        Ok(serde_json::from_slice(&std::fs::read(&path)?).with_context(|| format!("parsing {}", path.display()))?)
    }

    /// Features from `extract`, refusing ones probed from another checkpoint.
    fn load_features(&self) -> Result<(Vec<FeatureVector>, Vec<FeatureVector>)> {
        let manifest = self.manifest()?;
        let ckpt = self.checkpoint_path();
        self.require(&ckpt, "pretrain")?;
        if manifest.checkpoint_sha256 != file_sha256(&ckpt)? {
            return Err(usage("cached features were probed from a different checkpoint; rerun `gds extract`"));
        }
        let read = |name: &str| -> Result<Vec<FeatureVector>> {
            let path = self.dir("extract").join(format!("features_{name}.bin"));
            let f = std::fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
            Ok(read_feature_bin(std::io::BufReader::new(f)).with_context(|| format!("reading {}", path.display()))?)
        };
        Ok((read("probe_train")?, read("probe_eval")?))
    }

    pub fn detect(&self) -> Result<()> {
        let stage = "detect";
        let params = self.load_params()?;
        let (train, eval) = self.load_features()?;
        if self.up_to_date(stage, &["report.json", "detector.json"])? {
            return Ok(());
        }
        let corpus = self.corpus()?;
        let losses = read_losses(&self.dir("pretrain").join("losses.csv"))?;
        let detection = detect(&self.cfg, &params, &corpus, &train, &eval).stage(stage)?;
        for (name, s) in &detection.report.methods {
            log::info!("detect: {name:>9} AUROC {:.4}  TPR@FPR<={} {:.4}", s.auroc, self.cfg.fpr_cap, s.tpr_at_5fpr);
        }
        let methods = detection.report.methods.clone();
        let report = assemble_report(&self.cfg, corpus.pretrain.len(), losses, detection.report, &train, &eval, None)?;
        self.clear_echo(stage);
        let dir = self.dir(stage);
        detection.detector.save(&dir.join("detector.json"))?;
        let mut csv = Vec::new();
        write_score_csv(&mut csv, &detection.baseline_eval)?;
        write_atomic(&dir.join("baseline_scores.csv"), &csv)?;
        write_methods(&dir, "report", &report, &methods)?;
        self.write_echo(stage)
    }

    pub fn ablate(&self) -> Result<()> {
        let stage = "ablate";
        let (train, eval) = self.load_features()?;
        if self.up_to_date(stage, &["ablations.json", "ablations.csv"])? {
            return Ok(());
        }
        let (full_det, _) = fit(&train, &self.cfg.detector_config()).stage(stage)?;
        let full = gds_eval(&full_det, &eval, self.cfg.fpr_cap)?;
        let rows = run_ablations(&self.cfg, &train, &eval).stage(stage)?;
        log::info!("ablate: full AUROC {:.4}", full.auroc);
        for r in &rows {
            log::info!("ablate: -{:<13} {:<12} AUROC {:.4}", r.name, r.kind, r.auroc);
        }
        #[derive(Serialize)]
        struct Ablations<'a> {
            full: &'a RocSummary,
            variants: &'a [AblationRow],
        }
        self.clear_echo(stage);
        let dir = self.dir(stage);
        write_atomic(&dir.join("ablations.csv"), &ablation_csv(&rows))?;
        write_atomic(&dir.join("ablations.json"), &to_json_bytes(&Ablations { full: &full, variants: &rows })?)?;
        self.write_echo(stage)
    }

    pub fn baselines(&self) -> Result<()> {
        let stage = "baselines";
        let params = self.load_params()?;
        if self.up_to_date(stage, &["report.json"])? {
            return Ok(());
        }
        let corpus = self.corpus()?;
        let run = score_baselines(&self.cfg, &params, &corpus).stage(stage)?;
        if run.methods.is_empty() {
            return Err(usage("`methods` names no baseline"));
        }
        for (name, s) in &run.methods {
            log::info!("baselines: {name:>9} AUROC {:.4}", s.auroc);
        }
        self.clear_echo(stage);
        let dir = self.dir(stage);
        for (name, rows) in [("probe_train", &run.train), ("probe_eval", &run.eval)] {
            let mut csv = Vec::new();
            write_score_csv(&mut csv, rows)?;
            write_atomic(&dir.join(format!("scores_{name}.csv")), &csv)?;
        }
        write_methods(&dir, "report", &run.methods, &run.methods)?;
        self.write_echo(stage)
    }

    pub fn dynamics(&self) -> Result<()> {
        let stage = "dynamics";
        let params = self.load_params()?;
        if self.cfg.n_layers < 3 {
            return Err(usage("dynamics groups layers into tertiles and needs n_layers >= 3"));
        }
        if self.up_to_date(stage, &["dynamics.csv", "losses.csv"])? {
            return Ok(());
        }
        let corpus = self.corpus()?;
        let outcome = dynamics_stage(&self.cfg, &params, &corpus)?;
        self.clear_echo(stage);
        let dir = self.dir(stage);
        let mut csv = Vec::new();
        write_dynamics_csv(&mut csv, &outcome.snapshots)?;
        write_atomic(&dir.join("dynamics.csv"), &csv)?;
        write_atomic(&dir.join("losses.csv"), &losses_csv(&outcome.epoch_losses))?;
        if let (Some(name), false) = (&self.cfg.dynamics_heatmap, outcome.heatmaps.is_empty()) {
            gds_core::dynamics::write_heatmaps(&dir.join("heatmaps"), name, 2, &outcome.heatmaps)?;
        }
        log::info!("dynamics: {} snapshots", outcome.snapshots.len());
        self.write_echo(stage)
    }
}

fn gds_eval(det: &Detector, eval: &[FeatureVector], fpr_cap: f64) -> Result<RocSummary> {
    let set = ScoredSet::new(det.predict_batch(eval)?, eval.iter().map(|v| v.label).collect(), true)?;
    Ok(roc_summary(&set, fpr_cap))
}

fn losses_csv(losses: &[f64]) -> Vec<u8> {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{},{l}\n", i + 1));
    }
    s.into_bytes()
}

fn read_losses(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .skip(1)
        .map(|l| {
            let v = l.split(',').nth(1).unwrap_or_default();
            v.parse::<f64>().with_context(|| format!("{}: bad loss row {l:?}", path.display()))
        })
        .collect()
}

pub fn synth_corpus(out: &Path, seed: u64, pretrain: usize, probe: usize, non: usize) -> Result<()> {
    let cfg = SynthConfig {
        n_pretrain_members: pretrain,
        n_probe_members: probe,
        n_nonmembers: non,
        seed,
        ..Default::default()
    };
    let docs = generate(&cfg).map_err(|e| usage(e.to_string()))?;
    write_jsonl(out, &docs)?;
    log::info!("synth-corpus: wrote {} documents to {}", docs.len(), out.display());
    Ok(())
}
