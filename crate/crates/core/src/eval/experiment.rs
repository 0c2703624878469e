//! End-to-end runner: corpus preparation, pretraining, probing, detector
//! fit, baseline scoring, diagnostics and ablations.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{score_all, Baseline, BaselineScores};
use crate::config::{Method, RunConfig};
use crate::corpus::{load_jsonl, split_probe_set, tokenize_all, Label, Split, TokenSequence, Vocab};
use crate::detector::{fit, Detector, TrainReport};
use crate::dynamics::{run_dynamics, DynamicsOutcome};
use crate::error::{GdsError, Result, StageContext};
use crate::eval::divergence::{aggregate_feature, feature_divergence, top_k_counts, DivergenceCounts, FeatureDivergence};
use crate::eval::metrics::{auroc, mann_whitney, roc_summary, RocSummary, ScoredSet};
use crate::features::{ablate_features, extract, FeatureCategory, FeatureMask, FeatureName, FeatureVector};
use crate::lora::{attach, probe_gradients, LoraAdapterSet};
use crate::tensor_io::write_atomic;
use crate::tinylm::{train, ModuleGroup, ModelParams, SubModule, TrainOutcome};

/// Number of divergence rows kept in the report.
pub const REPORT_TOP_DIVERGENT: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCorpus {
    /// Every member sample; non-members never appear here.
    pub pretrain: Vec<TokenSequence>,
    pub probe_train: Vec<TokenSequence>,
    pub probe_eval: Vec<TokenSequence>,
}

impl PreparedCorpus {
    pub fn probe_all(&self) -> Vec<TokenSequence> {
        self.probe_train.iter().chain(&self.probe_eval).cloned().collect()
    }

    pub fn nonmembers(&self) -> Vec<TokenSequence> {
        self.probe_all().into_iter().filter(|s| !s.label.is_member()).collect()
    }
}

/// Members of the probe pool are added to the pretraining set. With
/// `eval_corpus_path`, the main corpus's probe samples all train the
/// detector and the second corpus's probe samples form the evaluation set.
pub fn prepare_corpus(cfg: &RunConfig) -> Result<PreparedCorpus> {
    let vocab = Vocab::byte_level();
    let load = |path: &Path, prefix: &str| -> Result<Vec<TokenSequence>> {
        let raw = load_jsonl(path)?;
        let mut seqs = tokenize_all(&raw, &vocab, cfg.max_seq_len)?;
        for s in &mut seqs {
            s.source_id.insert_str(0, prefix);
        }
        Ok(seqs)
    };
    let main = load(&cfg.corpus_path, "")?;
    let extra = match &cfg.eval_corpus_path {
        Some(p) => load(p, "eval/")?,
        None => Vec::new(),
    };
    let is_probe = |s: &TokenSequence| s.split != Split::Pretrain;
    let pretrain: Vec<TokenSequence> = main
        .iter()
        .chain(&extra)
        .filter(|s| s.label.is_member())
        .cloned()
        .collect();
    if main.iter().chain(&extra).any(|s| s.split == Split::Pretrain && !s.label.is_member()) {
        return Err(GdsError::invalid("a pretrain-split sample is labelled non-member"));
    }
    let probe: Vec<TokenSequence> = main.iter().filter(|s| is_probe(s)).cloned().collect();
    let (probe_train, probe_eval) = if cfg.eval_corpus_path.is_some() {
        let relabel = |mut v: Vec<TokenSequence>, split| {
            v.iter_mut().for_each(|s| s.split = split);
            v
        };
        let eval: Vec<TokenSequence> = extra.into_iter().filter(|s| is_probe(s)).collect();
        (relabel(probe, Split::ProbeTrain), relabel(eval, Split::ProbeEval))
    } else if cfg.resplit_probe {
        split_probe_set(&probe, cfg.probe_train_fraction, cfg.seeds().probe_split)?
    } else {
        let (t, e): (Vec<_>, Vec<_>) = probe.into_iter().partition(|s| s.split == Split::ProbeTrain);
        (t, e)
    };
    for (name, part) in [("probe_train", &probe_train), ("probe_eval", &probe_eval)] {
        let members = part.iter().filter(|s| s.label.is_member()).count();
        if members == 0 || members == part.len() {
            return Err(GdsError::invalid(format!("{name} needs both members and non-members")));
        }
    }
    if let Some(s) = probe_train.iter().chain(&probe_eval).find(|s| s.len() < 2) {
        return Err(GdsError::invalid(format!("probe sample {} has fewer than 2 tokens", s.source_id)));
    }
    Ok(PreparedCorpus { pretrain, probe_train, probe_eval })
}

pub fn pretrain(cfg: &RunConfig, corpus: &PreparedCorpus) -> Result<TrainOutcome> {
    let seeds = cfg.seeds();
    let init = ModelParams::init(&cfg.model_config(), seeds.model_init)?;
    train(&init, &corpus.pretrain, &cfg.pretrain_config())
}

pub fn probe_adapters(cfg: &RunConfig, params: &ModelParams) -> Result<LoraAdapterSet> {
    attach(params, &cfg.lora_config(), cfg.seeds().lora)
}

/// One probe per sample, in input order.
pub fn extract_features(
    params: &ModelParams,
    adapters: &LoraAdapterSet,
    samples: &[TokenSequence],
) -> Result<Vec<FeatureVector>> {
    samples
        .par_iter()
        .map(|s| extract(&probe_gradients(params, adapters, s)?, &s.source_id, s.label))
        .collect()
}

fn scored(scores: Vec<f64>, labels: Vec<Label>, higher_is_member: bool) -> Result<ScoredSet> {
    ScoredSet::new(scores, labels, higher_is_member)
}

/// Orientation that ranks members higher on the probe-train split.
pub fn baseline_orientation(train: &[BaselineScores], b: Baseline) -> Result<bool> {
    let set = scored(train.iter().map(|r| r.get(b)).collect(), train.iter().map(|r| r.label).collect(), true)?;
    Ok(auroc(&set) >= 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDirection {
    pub feature: FeatureName,
    /// Mean over samples of the per-sample mean over matrices.
    pub member_mean: f64,
    pub nonmember_mean: f64,
    /// One-sided rank-test p-values, member versus non-member.
    pub p_member_less: f64,
    pub p_member_greater: f64,
}

pub fn feature_directions(vectors: &[FeatureVector]) -> Result<Vec<FeatureDirection>> {
    FeatureName::ALL
        .into_iter()
        .map(|name| {
            let agg = aggregate_feature(vectors, name);
            let (mut m, mut n) = (Vec::new(), Vec::new());
            for (x, v) in agg.iter().zip(vectors) {
                if v.label.is_member() { m.push(*x) } else { n.push(*x) }
            }
            let test = mann_whitney(&m, &n)?;
            let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
            Ok(FeatureDirection {
                feature: name,
                member_mean: mean(&m),
                nonmember_mean: mean(&n),
                p_member_less: test.p_less,
                p_member_greater: test.p_greater,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    /// How a dimension counts as discriminative in `counts`.
    pub rule: String,
    pub top: Vec<FeatureDivergence>,
    pub counts: DivergenceCounts,
}

pub fn divergence_report(vectors: &[FeatureVector], top_k: usize, n_layers: usize) -> Result<DivergenceReport> {
    let ranked = feature_divergence(vectors)?;
    Ok(DivergenceReport {
        rule: format!("top {top_k} dimensions by two-sample KS statistic"),
        counts: top_k_counts(&ranked, top_k, n_layers),
        top: ranked.into_iter().take(REPORT_TOP_DIVERGENT).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AblationVariant {
    /// `feature`, `sub_module`, `category` or `module_group`.
    pub kind: &'static str,
    pub name: String,
    pub mask: FeatureMask,
}

/// Every single feature, sub-module, category and module group removed in turn.
pub fn ablation_variants() -> Vec<AblationVariant> {
    let mut out = Vec::new();
    for f in FeatureName::ALL {
        out.push(AblationVariant { kind: "feature", name: f.as_str().into(), mask: FeatureMask::Features(vec![f]) });
    }
    for s in SubModule::ALL {
        out.push(AblationVariant { kind: "sub_module", name: s.as_str().into(), mask: FeatureMask::SubModules(vec![s]) });
    }
    for c in FeatureCategory::ALL {
        out.push(AblationVariant { kind: "category", name: c.as_str().into(), mask: FeatureMask::Features(c.members()) });
    }
    for g in ModuleGroup::ALL {
        out.push(AblationVariant { kind: "module_group", name: g.as_str().into(), mask: FeatureMask::Groups(vec![g]) });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub kind: String,
    pub name: String,
    pub n_features: usize,
    pub auroc: f64,
    pub tpr_at_5fpr: f64,
}

fn gds_summary(det: &Detector, eval: &[FeatureVector], fpr_cap: f64) -> Result<RocSummary> {
    let scores = det.predict_batch(eval)?;
    Ok(roc_summary(&scored(scores, eval.iter().map(|v| v.label).collect(), true)?, fpr_cap))
}

pub fn run_ablations(cfg: &RunConfig, train: &[FeatureVector], eval: &[FeatureVector]) -> Result<Vec<AblationRow>> {
    let det_cfg = cfg.detector_config();
    ablation_variants()
        .into_iter()
        .map(|v| {
            let tr = ablate_features(train, &v.mask)?;
            let ev = ablate_features(eval, &v.mask)?;
            let (det, _) = fit(&tr, &det_cfg)?;
            let s = gds_summary(&det, &ev, cfg.fpr_cap)?;
            Ok(AblationRow {
                kind: v.kind.into(),
                name: v.name,
                n_features: tr[0].values.len(),
                auroc: s.auroc,
                tpr_at_5fpr: s.tpr_at_5fpr,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub methods: BTreeMap<String, RocSummary>,
    pub train: Vec<BaselineScores>,
    pub eval: Vec<BaselineScores>,
}

/// Every configured baseline, oriented on probe-train and scored on probe-eval.
pub fn score_baselines(cfg: &RunConfig, params: &ModelParams, corpus: &PreparedCorpus) -> Result<BaselineRun> {
    let baselines: Vec<Baseline> = cfg
        .parsed_methods()?
        .into_iter()
        .filter_map(|m| match m {
            Method::Baseline(b) => Some(b),
            Method::Gds => None,
        })
        .collect();
    let mut run = BaselineRun { methods: BTreeMap::new(), train: Vec::new(), eval: Vec::new() };
    if baselines.is_empty() {
        return Ok(run);
    }
    let vocab = Vocab::byte_level();
    run.train = score_all(params, &corpus.probe_train, &vocab, cfg.min_k_percent).stage("baselines")?;
    run.eval = score_all(params, &corpus.probe_eval, &vocab, cfg.min_k_percent).stage("baselines")?;
    for b in baselines {
        let orient = baseline_orientation(&run.train, b)?;
        let set = scored(
            run.eval.iter().map(|r| r.get(b)).collect(),
            run.eval.iter().map(|r| r.label).collect(),
            orient,
        )?;
        run.methods.insert(b.as_str().to_string(), roc_summary(&set, cfg.fpr_cap));
    }
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub n_probe_train: usize,
    pub n_probe_eval: usize,
    pub methods: BTreeMap<String, RocSummary>,
    pub detector: TrainReport,
}

#[derive(Debug, Clone)]
pub struct Detection {
    pub report: DetectionReport,
    pub detector: Detector,
    pub baseline_eval: Vec<BaselineScores>,
}

/// Fit the detector on probe-train features and score every configured
/// method on the evaluation split.
pub fn detect(
    cfg: &RunConfig,
    params: &ModelParams,
    corpus: &PreparedCorpus,
    train_feats: &[FeatureVector],
    eval_feats: &[FeatureVector],
) -> Result<Detection> {
    let (detector, train_report) = fit(train_feats, &cfg.detector_config()).stage("detector")?;
    let mut methods = BTreeMap::new();
    let wanted = cfg.parsed_methods()?;
    if wanted.contains(&Method::Gds) {
        methods.insert("gds".to_string(), gds_summary(&detector, eval_feats, cfg.fpr_cap)?);
    }
    let baselines = score_baselines(cfg, params, corpus)?;
    methods.extend(baselines.methods);
    let baseline_eval = baselines.eval;
    Ok(Detection {
        report: DetectionReport {
            n_probe_train: train_feats.len(),
            n_probe_eval: eval_feats.len(),
            methods,
            detector: train_report,
        },
        detector,
        baseline_eval,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub n_pretrain: usize,
    pub pretrain_losses: Vec<f64>,
    #[serde(flatten)]
    pub detection: DetectionReport,
    /// Computed over every probe sample; nothing here is fitted.
    pub divergence: DivergenceReport,
    pub feature_directions: Vec<FeatureDirection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablations: Option<Vec<AblationRow>>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: ExperimentReport,
    pub params: ModelParams,
    pub detector: Detector,
    pub train_features: Vec<FeatureVector>,
    pub eval_features: Vec<FeatureVector>,
}

pub fn run_experiment(cfg: &RunConfig, with_ablations: bool) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let corpus = prepare_corpus(cfg).stage("corpus")?;
    let trained = pretrain(cfg, &corpus).stage("pretrain")?;
    let adapters = probe_adapters(cfg, &trained.params).stage("probe")?;
    let train_features = extract_features(&trained.params, &adapters, &corpus.probe_train).stage("extract")?;
    let eval_features = extract_features(&trained.params, &adapters, &corpus.probe_eval).stage("extract")?;
    let detection = detect(cfg, &trained.params, &corpus, &train_features, &eval_features)?;
    let ablations = if with_ablations {
        Some(run_ablations(cfg, &train_features, &eval_features).stage("ablate")?)
    } else {
        None
    };
    let report = assemble_report(
        cfg,
        corpus.pretrain.len(),
        trained.epoch_losses,
        detection.report,
        &train_features,
        &eval_features,
        ablations,
    )?;
    Ok(ExperimentOutput {
        report,
        params: trained.params,
        detector: detection.detector,
        train_features,
        eval_features,
    })
}

/// Adds the label diagnostics, computed over both probe splits.
pub fn assemble_report(
    cfg: &RunConfig,
    n_pretrain: usize,
    pretrain_losses: Vec<f64>,
    detection: DetectionReport,
    train_features: &[FeatureVector],
    eval_features: &[FeatureVector],
    ablations: Option<Vec<AblationRow>>,
) -> Result<ExperimentReport> {
    let all: Vec<FeatureVector> = train_features.iter().chain(eval_features).cloned().collect();
    Ok(ExperimentReport {
        n_pretrain,
        pretrain_losses,
        detection,
        divergence: divergence_report(&all, cfg.top_k_divergence, cfg.n_layers).stage("divergence")?,
        feature_directions: feature_directions(&all).stage("divergence")?,
        ablations,
    })
}

/// LoRA fine-tuning on the non-member probe samples of `corpus`.
pub fn dynamics_stage(cfg: &RunConfig, params: &ModelParams, corpus: &PreparedCorpus) -> Result<DynamicsOutcome> {
    let adapters = probe_adapters(cfg, params)?;
    run_dynamics(params, &adapters, &corpus.nonmembers(), &cfg.dynamics_config(), cfg.parsed_heatmap()?)
        .stage("dynamics")
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn roc_csv(curve: &[(f64, f64)]) -> Vec<u8> {
    let mut out = String::from("fpr,tpr\n");
    for (f, t) in curve {
        out.push_str(&format!("{f:e},{t:e}\n"));
    }
    out.into_bytes()
}

/// `{stem}.json` plus `roc_{method}.csv` per method.
pub fn write_methods(dir: &Path, stem: &str, report: &impl Serialize, methods: &BTreeMap<String, RocSummary>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| GdsError::io(dir, e))?;
    for (name, s) in methods {
        write_atomic(&dir.join(format!("roc_{name}.csv")), &roc_csv(&s.curve))?;
    }
    write_atomic(&dir.join(format!("{stem}.json")), &to_json_bytes(report)?)
}

pub fn ablation_csv(rows: &[AblationRow]) -> Vec<u8> {
    let mut out = String::from("kind,name,n_features,auroc,tpr_at_5fpr\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.kind, r.name, r.n_features, r.auroc, r.tpr_at_5fpr));
    }
    out.into_bytes()
}
