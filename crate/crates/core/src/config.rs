//! Flat run configuration shared by every pipeline stage.

use std::path::{Path, PathBuf};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::baselines::{Baseline, DEFAULT_K_PERCENT};
use crate::detector::DetectorConfig;
use crate::dynamics::DynamicsConfig;
use crate::error::{GdsError, Result};
use crate::eval::divergence::DEFAULT_TOP_K;
use crate::eval::metrics::DEFAULT_FPR_CAP;
use crate::lora::LoraConfig;
use crate::rng;
use crate::tinylm::{ModelConfig, SubModule, TrainConfig};

/// Every key is optional in the file; absent keys take these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus_path: PathBuf,
    /// Optional second corpus whose probe samples replace the evaluation split.
    pub eval_corpus_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,

    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub rmsnorm_eps: f64,

    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch_size: usize,

    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
    pub lora_init_std: f64,
    pub lora_targets: Vec<String>,

    pub probe_train_fraction: f64,
    /// Pool all probe samples and re-split them; otherwise keep file splits.
    pub resplit_probe: bool,

    pub detector_hidden: Vec<usize>,
    pub detector_lr: f64,
    pub detector_max_epochs: usize,
    pub detector_patience: usize,
    pub detector_val_fraction: f64,
    pub detector_batch_size: usize,

    pub methods: Vec<String>,
    pub min_k_percent: f64,
    pub fpr_cap: f64,
    pub top_k_divergence: usize,

    pub dynamics_epochs: usize,
    pub dynamics_lr: f64,
    pub dynamics_batch_size: usize,
    /// `"{layer}.{sub_module}.{A|B}"`, e.g. `"0.q.B"`.
    pub dynamics_heatmap: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let lora = LoraConfig::default();
        let det = DetectorConfig::default();
        let dyn_cfg = DynamicsConfig::default();
        Self {
            corpus_path: PathBuf::from("corpus.jsonl"),
            eval_corpus_path: None,
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
            d_model: model.d_model,
            n_heads: model.n_heads,
            n_layers: model.n_layers,
            d_ff: model.d_ff,
            max_seq_len: model.max_seq_len,
            rmsnorm_eps: model.rmsnorm_eps,
            pretrain_epochs: 60,
            pretrain_lr: 3e-3,
            pretrain_batch_size: 8,
            lora_rank: lora.rank,
            lora_alpha: lora.alpha,
            lora_dropout: lora.dropout,
            lora_init_std: lora.init_std,
            lora_targets: lora.targets,
            probe_train_fraction: 0.3,
            resplit_probe: true,
            detector_hidden: det.hidden,
            detector_lr: det.lr,
            detector_max_epochs: det.max_epochs,
            detector_patience: det.patience,
            detector_val_fraction: det.val_fraction,
            detector_batch_size: det.batch_size,
            methods: std::iter::once("gds")
                .chain(Baseline::ALL.iter().map(|b| b.as_str()))
                .map(String::from)
                .collect(),
            min_k_percent: DEFAULT_K_PERCENT,
            fpr_cap: DEFAULT_FPR_CAP,
            top_k_divergence: DEFAULT_TOP_K,
            dynamics_epochs: dyn_cfg.epochs,
            dynamics_lr: dyn_cfg.lr,
            dynamics_batch_size: dyn_cfg.batch_size,
            dynamics_heatmap: None,
        }
    }
}

/// Per-stage seeds derived from the global seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub global: u64,
    pub model_init: u64,
    pub pretrain: u64,
    pub lora: u64,
    pub probe_split: u64,
    pub detector: u64,
    pub dynamics: u64,
}

impl Seeds {
    pub fn derive(global: u64) -> Self {
        let s = |name: &str| rng::stream(global, name).next_u64();
        Self {
            global,
            model_init: s("seed.model_init"),
            pretrain: s("seed.pretrain"),
            lora: s("seed.lora"),
            probe_split: s("seed.probe_split"),
            detector: s("seed.detector"),
            dynamics: s("seed.dynamics"),
        }
    }
}

/// A scoring method named in `methods`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Gds,
    Baseline(Baseline),
}

impl Method {
    pub fn parse(s: &str) -> Option<Self> {
        if s == "gds" {
            Some(Method::Gds)
        } else {
            Baseline::parse(s).map(Method::Baseline)
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Gds => "gds",
            Method::Baseline(b) => b.as_str(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| GdsError::invalid(format!("config: {e}")))
    }

    /// Read a config file and apply `key=value` overrides, where each value
    /// is parsed as a TOML value (bare words fall back to strings).
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| GdsError::io(p, e))?;
                text.parse().map_err(|e| GdsError::invalid(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| GdsError::invalid(format!("override {o:?} is not key=value")))?;
            let value = format!("v = {v}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(v.to_string()));
            table.insert(k.trim().to_string(), value);
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| GdsError::invalid(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::derive(self.seed)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: crate::corpus::Vocab::byte_level().vocab_size(),
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            rmsnorm_eps: self.rmsnorm_eps,
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.pretrain_epochs,
            lr: self.pretrain_lr,
            batch_size: self.pretrain_batch_size,
            seed: self.seeds().pretrain,
        }
    }

    pub fn lora_config(&self) -> LoraConfig {
        LoraConfig {
            rank: self.lora_rank,
            alpha: self.lora_alpha,
            dropout: self.lora_dropout,
            targets: self.lora_targets.clone(),
            init_std: self.lora_init_std,
        }
    }

    pub fn detector_config(&self) -> DetectorConfig {
        DetectorConfig {
            hidden: self.detector_hidden.clone(),
            lr: self.detector_lr,
            max_epochs: self.detector_max_epochs,
            patience: self.detector_patience,
            val_fraction: self.detector_val_fraction,
            batch_size: self.detector_batch_size,
            seed: self.seeds().detector,
        }
    }

    pub fn dynamics_config(&self) -> DynamicsConfig {
        DynamicsConfig {
            epochs: self.dynamics_epochs,
            lr: self.dynamics_lr,
            batch_size: self.dynamics_batch_size,
            seed: self.seeds().dynamics,
        }
    }

    pub fn parsed_methods(&self) -> Result<Vec<Method>> {
        self.methods
            .iter()
            .map(|m| Method::parse(m).ok_or_else(|| GdsError::invalid(format!("unknown method {m:?}"))))
            .collect()
    }

    pub fn parsed_heatmap(&self) -> Result<Option<(usize, SubModule, crate::dynamics::AdapterPart)>> {
        let Some(spec) = &self.dynamics_heatmap else {
            return Ok(None);
        };
        let bad = || GdsError::invalid(format!("dynamics_heatmap {spec:?} is not layer.sub_module.A|B"));
        let mut parts = spec.split('.');
        let layer: usize = parts.next().and_then(|l| l.parse().ok()).ok_or_else(bad)?;
        let sub = parts.next().and_then(SubModule::parse).ok_or_else(bad)?;
        let part = match parts.next() {
            Some("A") => crate::dynamics::AdapterPart::A,
            Some("B") => crate::dynamics::AdapterPart::B,
            _ => return Err(bad()),
        };
        if parts.next().is_some() || layer >= self.n_layers {
            return Err(bad());
        }
        Ok(Some((layer, sub, part)))
    }

    /// Checks values only; see [`RunConfig::check_paths`] for the filesystem.
    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.lora_config().validate()?;
        self.detector_config().validate()?;
        self.parsed_methods()?;
        self.parsed_heatmap()?;
        let lora = self.lora_config();
        let probe = crate::tinylm::ModelParams::zeros(&crate::tinylm::ModelConfig {
            vocab_size: 1,
            d_model: 1,
            n_heads: 1,
            d_ff: 1,
            max_seq_len: 1,
            ..self.model_config()
        });
        crate::lora::attach(&probe, &lora, 0)?;
        if self.pretrain_epochs == 0 || self.pretrain_batch_size == 0 {
            return Err(GdsError::invalid("pretrain_epochs and pretrain_batch_size must be >= 1"));
        }
        if !(self.probe_train_fraction > 0.0 && self.probe_train_fraction < 1.0) {
            return Err(GdsError::invalid("probe_train_fraction must lie in (0, 1)"));
        }
        if !(self.min_k_percent > 0.0 && self.min_k_percent <= 100.0) {
            return Err(GdsError::invalid("min_k_percent must lie in (0, 100]"));
        }
        if !(0.0..=1.0).contains(&self.fpr_cap) {
            return Err(GdsError::invalid("fpr_cap must lie in [0, 1]"));
        }
        if self.top_k_divergence == 0 {
            return Err(GdsError::invalid("top_k_divergence must be >= 1"));
        }
        if self.dynamics_epochs < 2 || self.dynamics_batch_size == 0 {
            return Err(GdsError::invalid("dynamics_epochs must be >= 2 and dynamics_batch_size >= 1"));
        }
        Ok(())
    }

    pub fn check_paths(&self) -> Result<()> {
        for p in std::iter::once(&self.corpus_path).chain(self.eval_corpus_path.as_ref()) {
            if !p.is_file() {
                return Err(GdsError::invalid(format!("corpus file {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}
