//! Rank-r adapters on the block projections, used as gradient probes.
//!
//! An adapter adds `scaling * (x A^T) B^T` to a projection's output, with
//! `A: r x in` Gaussian and `B: out x r` zero at creation. Because `B = 0`,
//! one backward pass yields `dL/dA = 0` exactly, so only the `B` gradients
//! carry information.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::error::{GdsError, Result};
use crate::rng;
use crate::tensor_io::{self, NamedTensor};
use crate::tinylm::{forward_ids, ModelParams, SubModule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Either sub-module names (`"q"`, applied to every layer) or full
    /// paths such as `"layers.0.attn.q"`.
    pub targets: Vec<String>,
    pub init_std: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 32.0,
            dropout: 0.0,
            targets: SubModule::ALL.iter().map(|s| s.as_str().to_string()).collect(),
            init_std: 0.02,
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(GdsError::invalid("LoRA rank must be >= 1"));
        }
        if self.dropout != 0.0 {
            return Err(GdsError::invalid("LoRA probes run without dropout; set dropout = 0"));
        }
        if !(self.alpha.is_finite() && self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(GdsError::invalid("LoRA alpha and init_std must be finite"));
        }
        Ok(())
    }

    fn resolve(&self, n_layers: usize) -> Result<Vec<(usize, SubModule)>> {
        let mut keys = Vec::new();
        for t in &self.targets {
            if let Some(sub) = SubModule::parse(t) {
                keys.extend((0..n_layers).map(|l| (l, sub)));
            } else {
                match SubModule::parse_path(t) {
                    Some((l, sub)) if l < n_layers => keys.push((l, sub)),
                    _ => return Err(GdsError::UnknownPath(t.clone())),
                }
            }
        }
        keys.sort();
        keys.dedup();
        Ok(keys)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// `r x in`
    pub a: Array2<f64>,
    /// `out x r`
    pub b: Array2<f64>,
    pub scaling: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

impl AdapterGrad {
    pub fn zeros_like(ad: &LoraAdapter) -> Self {
        Self {
            a: Array2::zeros(ad.a.raw_dim()),
            b: Array2::zeros(ad.b.raw_dim()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapterSet {
    config: LoraConfig,
    adapters: BTreeMap<(usize, SubModule), LoraAdapter>,
}

impl LoraAdapterSet {
    pub fn config(&self) -> &LoraConfig {
        &self.config
    }

    pub fn get(&self, layer: usize, sub: SubModule) -> Option<&LoraAdapter> {
        self.adapters.get(&(layer, sub))
    }

    /// Adapters in `(layer, sub-module)` order.
    pub fn iter(&self) -> impl Iterator<Item = (&(usize, SubModule), &LoraAdapter)> {
        self.adapters.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&(usize, SubModule), &mut LoraAdapter)> {
        self.adapters.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }
}

/// One adapter per resolved target; `A ~ N(0, init_std)`, `B = 0`.
pub fn attach(params: &ModelParams, cfg: &LoraConfig, seed: u64) -> Result<LoraAdapterSet> {
    cfg.validate()?;
    let keys = cfg.resolve(params.config.n_layers)?;
    let normal = Normal::new(0.0, cfg.init_std).map_err(|e| GdsError::invalid(e.to_string()))?;
    let mut rng = rng::stream(seed, "lora.attach");
    let adapters = keys
        .into_iter()
        .map(|(layer, sub)| {
            let (out_dim, in_dim) = sub.shape(&params.config);
            let a = Array2::from_shape_simple_fn((cfg.rank, in_dim), || normal.sample(&mut rng));
            let b = Array2::zeros((out_dim, cfg.rank));
            ((layer, sub), LoraAdapter { a, b, scaling: cfg.scaling() })
        })
        .collect();
    Ok(LoraAdapterSet {
        config: cfg.clone(),
        adapters,
    })
}

/// Loss and gradients of every adapter's `A` and `B` for one sequence.
/// Base weights receive no gradient.
pub fn adapter_gradients(
    params: &ModelParams,
    adapters: &LoraAdapterSet,
    ids: &[u32],
) -> Result<(f64, BTreeMap<(usize, SubModule), AdapterGrad>)> {
    let trace = forward_ids(params, ids, Some(adapters))?;
    let (_, grads) = crate::tinylm::model_backward_impl(params, Some(adapters), &trace, 1.0, false, true)?;
    Ok((trace.loss(), grads.expect("adapter gradients requested")))
}

/// `dL/dB` for one adapter, in its natural `out_dim x rank` shape.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMatrix {
    pub values: Array2<f64>,
    pub layer: usize,
    pub sub_module: SubModule,
}

impl GradientMatrix {
    pub fn new(values: Array2<f64>, layer: usize, sub_module: SubModule) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(GdsError::invalid("gradient matrix must be at least 1x1"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GdsError::NonFinite {
                context: format!("gradient matrix {}", sub_module.path(layer)),
            });
        }
        Ok(Self { values, layer, sub_module })
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }
}

/// One forward/backward pass on a single sample with frozen weights and
/// untouched adapters; returns the `B` gradients in `(layer, sub-module)` order.
pub fn probe_gradients(
    params: &ModelParams,
    adapters: &LoraAdapterSet,
    sample: &TokenSequence,
) -> Result<Vec<GradientMatrix>> {
    if sample.len() < 2 {
        return Err(GdsError::invalid(format!(
            "sample {} has {} tokens; probing needs at least 2",
            sample.source_id,
            sample.len()
        )));
    }
    let (_, grads) = adapter_gradients(params, adapters, &sample.ids)?;
    grads
        .into_iter()
        .map(|((layer, sub), g)| GradientMatrix::new(g.b, layer, sub))
        .collect()
}

/// Debug dump: one `{layer}.{sub_module}.grad` container per matrix.
pub fn write_gradient_dump(dir: &Path, grads: &[GradientMatrix]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| GdsError::io(dir, e))?;
    for g in grads {
        let path = dir.join(format!("{}.{}.grad", g.layer, g.sub_module));
        let tensor = NamedTensor::from_array(&g.sub_module.path(g.layer), g.values.view().into_dyn());
        let meta = serde_json::json!({ "kind": "lora_b_gradient", "layer": g.layer, "sub_module": g.sub_module });
        tensor_io::write_container(&path, &meta, &[tensor])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::ModelConfig;

    fn model() -> ModelParams {
        let cfg = ModelConfig {
            vocab_size: 30,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 12,
            max_seq_len: 16,
            rmsnorm_eps: 1e-6,
        };
        ModelParams::init(&cfg, 11).unwrap()
    }

    fn lora(rank: usize) -> LoraConfig {
        LoraConfig { rank, ..Default::default() }
    }

    #[test]
    fn attach_counts_and_zero_b() {
        let p = model();
        let set = attach(&p, &lora(4), 1).unwrap();
        assert_eq!(set.len(), 14);
        assert!(set.iter().all(|(_, a)| a.b.iter().all(|&x| x == 0.0)));
        assert_eq!(set, attach(&p, &lora(4), 1).unwrap());
        assert_ne!(set, attach(&p, &lora(4), 2).unwrap());
        assert_eq!(set.get(0, SubModule::Up).unwrap().a.dim(), (4, 8));
        assert_eq!(set.get(1, SubModule::Down).unwrap().a.dim(), (4, 12));
    }

    #[test]
    fn attach_rejects_unknown_targets() {
        let p = model();
        let cfg = LoraConfig { targets: vec!["layers.5.attn.q".into()], ..lora(2) };
        match attach(&p, &cfg, 0) {
            Err(GdsError::UnknownPath(path)) => assert_eq!(path, "layers.5.attn.q"),
            other => panic!("{other:?}"),
        }
        let cfg = LoraConfig { targets: vec!["lm_head".into()], ..lora(2) };
        assert!(matches!(attach(&p, &cfg, 0), Err(GdsError::UnknownPath(_))));
        let cfg = LoraConfig { dropout: 0.1, ..lora(2) };
        assert!(attach(&p, &cfg, 0).is_err());
        let cfg = LoraConfig { targets: vec!["layers.1.ffn.down".into(), "q".into()], ..lora(2) };
        assert_eq!(attach(&p, &cfg, 0).unwrap().len(), 3);
    }

    #[test]
    fn zero_adapters_leave_loss_unchanged() {
        let p = model();
        let set = attach(&p, &lora(4), 1).unwrap();
        let ids = [1, 5, 9, 2, 7, 7];
        let base = forward_ids(&p, &ids, None).unwrap().loss();
        let adapted = forward_ids(&p, &ids, Some(&set)).unwrap().loss();
        assert_eq!(base.to_bits(), adapted.to_bits());
    }

    #[test]
    fn shape_law_and_purity() {
        let p = model();
        let set = attach(&p, &lora(4), 1).unwrap();
        let seq = TokenSequence {
            ids: vec![3, 1, 4, 1, 5, 9, 2, 6],
            label: crate::corpus::Label::Member,
            split: crate::corpus::Split::ProbeEval,
            source_id: "x".into(),
        };
        let before = (p.clone(), set.clone());
        let g1 = probe_gradients(&p, &set, &seq).unwrap();
        let g2 = probe_gradients(&p, &set, &seq).unwrap();
        assert_eq!(g1, g2);
        assert_eq!((p, set), before);
        assert_eq!(g1.len(), 14);
        for g in &g1 {
            let expected_rows = match g.sub_module {
                SubModule::Gate | SubModule::Up => 12,
                _ => 8,
            };
            assert_eq!((g.rows(), g.cols()), (expected_rows, 4));
        }
        let short = TokenSequence { ids: vec![3], ..seq };
        assert!(probe_gradients(&before.0, &before.1, &short).is_err());
    }
}
