//! A small LLaMA-shaped causal transformer with hand-written backprop.
//!
//! Blocks are pre-norm: RMSNorm, multi-head causal attention, RMSNorm,
//! SiLU-gated feed-forward. No biases. Positions are learned absolute
//! embeddings and the output head is a separate matrix.

mod model;
mod train;

use std::fmt;

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GdsError, Result};
use crate::rng;

pub use model::{backward, backward_scaled, forward, forward_ids, ForwardTrace, GradientSet};
pub(crate) use model::backward_impl as model_backward_impl;
pub use train::{train, TrainConfig, TrainOutcome};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub rmsnorm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 257,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 128,
            max_seq_len: 128,
            rmsnorm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(GdsError::invalid(format!("model dimension {name} must be >= 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(GdsError::invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.rmsnorm_eps > 0.0) {
            return Err(GdsError::invalid("rmsnorm_eps must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// The seven projections of a block, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubModule {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModuleGroup {
    #[serde(rename = "ATT")]
    Attention,
    #[serde(rename = "FFN")]
    Ffn,
}

impl ModuleGroup {
    pub const ALL: [ModuleGroup; 2] = [ModuleGroup::Attention, ModuleGroup::Ffn];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleGroup::Attention => "ATT",
            ModuleGroup::Ffn => "FFN",
        }
    }

    pub fn members(self) -> &'static [SubModule] {
        match self {
            ModuleGroup::Attention => &SubModule::ALL[..4],
            ModuleGroup::Ffn => &SubModule::ALL[4..],
        }
    }
}

impl fmt::Display for ModuleGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Depth tertile of a layer, by the position of the layer's midpoint:
/// layer `i` of `n` falls in tertile `floor(3(i + 1/2)/n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerGroup {
    Low,
    Middle,
    High,
}

impl LayerGroup {
    pub const ALL: [LayerGroup; 3] = [LayerGroup::Low, LayerGroup::Middle, LayerGroup::High];

    pub fn of(layer: usize, n_layers: usize) -> Self {
        match (6 * layer + 3) / (2 * n_layers.max(1)) {
            0 => LayerGroup::Low,
            1 => LayerGroup::Middle,
            _ => LayerGroup::High,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LayerGroup::Low => "low",
            LayerGroup::Middle => "middle",
            LayerGroup::High => "high",
        }
    }

    pub fn layers(self, n_layers: usize) -> Vec<usize> {
        (0..n_layers).filter(|&l| Self::of(l, n_layers) == self).collect()
    }
}

impl fmt::Display for LayerGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl SubModule {
    pub const ALL: [SubModule; 7] = [
        SubModule::Q,
        SubModule::K,
        SubModule::V,
        SubModule::O,
        SubModule::Gate,
        SubModule::Up,
        SubModule::Down,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SubModule::Q => "q",
            SubModule::K => "k",
            SubModule::V => "v",
            SubModule::O => "o",
            SubModule::Gate => "gate",
            SubModule::Up => "up",
            SubModule::Down => "down",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn group(self) -> ModuleGroup {
        match self {
            SubModule::Q | SubModule::K | SubModule::V | SubModule::O => ModuleGroup::Attention,
            _ => ModuleGroup::Ffn,
        }
    }

    /// `(out_dim, in_dim)` of the weight matrix.
    pub fn shape(self, cfg: &ModelConfig) -> (usize, usize) {
        match self {
            SubModule::Q | SubModule::K | SubModule::V | SubModule::O => (cfg.d_model, cfg.d_model),
            SubModule::Gate | SubModule::Up => (cfg.d_ff, cfg.d_model),
            SubModule::Down => (cfg.d_model, cfg.d_ff),
        }
    }

    pub fn path(self, layer: usize) -> String {
        format!("layers.{layer}.{}.{}", self.group_path(), self.as_str())
    }

    fn group_path(self) -> &'static str {
        match self.group() {
            ModuleGroup::Attention => "attn",
            ModuleGroup::Ffn => "ffn",
        }
    }

    /// Parse `layers.{i}.{attn|ffn}.{name}`.
    pub fn parse_path(path: &str) -> Option<(usize, SubModule)> {
        let mut parts = path.split('.');
        if parts.next()? != "layers" {
            return None;
        }
        let layer = parts.next()?.parse().ok()?;
        let group = parts.next()?;
        let sub = SubModule::parse(parts.next()?)?;
        if parts.next().is_some() || group != sub.group_path() {
            return None;
        }
        Some((layer, sub))
    }
}

impl fmt::Display for SubModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Array1<f64>,
    /// Projections in `SubModule::ALL` order, each `out x in`.
    pub proj: [Array2<f64>; 7],
    pub ffn_norm: Array1<f64>,
}

impl LayerParams {
    pub fn weight(&self, sub: SubModule) -> &Array2<f64> {
        &self.proj[sub.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub final_norm: Array1<f64>,
    /// `vocab_size x d_model`
    pub head: Array2<f64>,
}

impl ModelParams {
    /// Gaussian(0, 0.02) matrices, unit norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "tinylm.init");
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut gauss = |r: usize, c: usize| Array2::from_shape_simple_fn((r, c), || normal.sample(&mut rng));
        let d = config.d_model;
        let tok_emb = gauss(config.vocab_size, d);
        let pos_emb = gauss(config.max_seq_len, d);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm: Array1::ones(d),
                proj: SubModule::ALL.map(|s| {
                    let (o, i) = s.shape(config);
                    gauss(o, i)
                }),
                ffn_norm: Array1::ones(d),
            })
            .collect();
        let head = gauss(config.vocab_size, d);
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            final_norm: Array1::ones(d),
            head,
        })
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        Self {
            config: config.clone(),
            tok_emb: Array2::zeros((config.vocab_size, d)),
            pos_emb: Array2::zeros((config.max_seq_len, d)),
            layers: (0..config.n_layers)
                .map(|_| LayerParams {
                    attn_norm: Array1::zeros(d),
                    proj: SubModule::ALL.map(|s| Array2::zeros(s.shape(config))),
                    ffn_norm: Array1::zeros(d),
                })
                .collect(),
            final_norm: Array1::zeros(d),
            head: Array2::zeros((config.vocab_size, d)),
        }
    }

    pub fn projection(&self, layer: usize, sub: SubModule) -> Option<&Array2<f64>> {
        self.layers.get(layer).map(|l| &l.proj[sub.index()])
    }

    /// Every tensor with its path, in a fixed order.
    pub fn named(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.view().into_dyn()),
            ("pos_emb".to_string(), self.pos_emb.view().into_dyn()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), l.attn_norm.view().into_dyn()));
            for s in SubModule::ALL {
                out.push((s.path(i), l.proj[s.index()].view().into_dyn()));
            }
            out.push((format!("layers.{i}.ffn_norm"), l.ffn_norm.view().into_dyn()));
        }
        out.push(("final_norm".to_string(), self.final_norm.view().into_dyn()));
        out.push(("head".to_string(), self.head.view().into_dyn()));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.view_mut().into_dyn()),
            ("pos_emb".to_string(), self.pos_emb.view_mut().into_dyn()),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), l.attn_norm.view_mut().into_dyn()));
            for (s, w) in SubModule::ALL.iter().zip(l.proj.iter_mut()) {
                out.push((s.path(i), w.view_mut().into_dyn()));
            }
            out.push((format!("layers.{i}.ffn_norm"), l.ffn_norm.view_mut().into_dyn()));
        }
        out.push(("final_norm".to_string(), self.final_norm.view_mut().into_dyn()));
        out.push(("head".to_string(), self.head.view_mut().into_dyn()));
        out
    }

    pub fn get(&self, path: &str) -> Result<ArrayViewD<'_, f64>> {
        self.named()
            .into_iter()
            .find(|(p, _)| p == path)
            .map(|(_, v)| v)
            .ok_or_else(|| GdsError::UnknownPath(path.to_string()))
    }

    pub fn n_params(&self) -> usize {
        self.named().iter().map(|(_, v)| v.len()).sum()
    }

    /// Name of the first non-finite tensor, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        self.named()
            .into_iter()
            .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
            .map(|(p, _)| p)
    }

    /// Flat `&mut [f64]` views for optimizers, in `named()` order.
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.tok_emb.as_slice_mut().expect("standard layout"),
            self.pos_emb.as_slice_mut().expect("standard layout"),
        ];
        for l in &mut self.layers {
            out.push(l.attn_norm.as_slice_mut().expect("standard layout"));
            for w in l.proj.iter_mut() {
                out.push(w.as_slice_mut().expect("standard layout"));
            }
            out.push(l.ffn_norm.as_slice_mut().expect("standard layout"));
        }
        out.push(self.final_norm.as_slice_mut().expect("standard layout"));
        out.push(self.head.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            self.tok_emb.as_slice().expect("standard layout"),
            self.pos_emb.as_slice().expect("standard layout"),
        ];
        for l in &self.layers {
            out.push(l.attn_norm.as_slice().expect("standard layout"));
            for w in &l.proj {
                out.push(w.as_slice().expect("standard layout"));
            }
            out.push(l.ffn_norm.as_slice().expect("standard layout"));
        }
        out.push(self.final_norm.as_slice().expect("standard layout"));
        out.push(self.head.as_slice().expect("standard layout"));
        out
    }
}
