//! Membership classifier over feature vectors: z-score standardization
//! followed by a ReLU MLP with a logistic output, trained with Adam on
//! binary cross-entropy and early-stopped on a held-out slice.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{GdsError, Result};
use crate::eval::metrics::{auroc, ScoredSet};
use crate::features::{FeatureKey, FeatureLayout, FeatureVector};
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::tensor_io::write_atomic;

pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population mean and std per column; std floored at [`STD_FLOOR`].
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| GdsError::invalid("cannot standardize zero rows"))?;
        let d = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            if r.len() != d {
                return Err(GdsError::invalid("rows differ in length"));
            }
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }
}

/// Fully connected layers; `weights[l]` is `sizes[l+1] x sizes[l]` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub hidden_activation: String,
    pub output_activation: String,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of a logit, computed without forming the probability.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()
}

impl MlpModel {
    /// Uniform `±1/sqrt(fan_in)` init for weights and biases.
    pub fn init(d_in: usize, hidden: &[usize], seed: u64) -> Self {
        let mut sizes = vec![d_in];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut rng = rng::stream(seed, "detector.init");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            weights.push((0..w[0] * w[1]).map(|_| rng.random_range(-bound..bound)).collect());
            biases.push((0..w[1]).map(|_| rng.random_range(-bound..bound)).collect());
        }
        Self {
            sizes,
            weights,
            biases,
            hidden_activation: "relu".into(),
            output_activation: "sigmoid".into(),
        }
    }

    pub fn zeros(d_in: usize, hidden: &[usize]) -> Self {
        let mut m = Self::init(d_in, hidden, 0);
        m.weights.iter_mut().flatten().for_each(|w| *w = 0.0);
        m.biases.iter_mut().flatten().for_each(|b| *b = 0.0);
        m
    }

    pub fn d_in(&self) -> usize {
        self.sizes[0]
    }

    fn n_layers(&self) -> usize {
        self.weights.len()
    }

    /// Pre-activations of every layer; the last one holds the logit.
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        for l in 0..self.n_layers() {
            let (d_in, d_out) = (self.sizes[l], self.sizes[l + 1]);
            let input = acts.last().expect("input present");
            let relu = l > 0;
            let mut out = self.biases[l].clone();
            for (o, row) in out.iter_mut().zip(self.weights[l].chunks_exact(d_in)) {
                *o += row
                    .iter()
                    .zip(input)
                    .map(|(w, a)| w * if relu { a.max(0.0) } else { *a })
                    .sum::<f64>();
            }
            debug_assert_eq!(out.len(), d_out);
            acts.push(out);
        }
        acts
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        self.activations(x).last().expect("output layer")[0]
    }

    /// Mean BCE over a batch and its gradient, laid out like `weights` and
    /// `biases`.
    pub fn loss_and_grad(&self, xs: &[Vec<f64>], ys: &[f64]) -> (f64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let n = xs.len() as f64;
        let mut gw: Vec<Vec<f64>> = self.weights.iter().map(|w| vec![0.0; w.len()]).collect();
        let mut gb: Vec<Vec<f64>> = self.biases.iter().map(|b| vec![0.0; b.len()]).collect();
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let acts = self.activations(x);
            let z = acts[self.n_layers()][0];
            loss += bce_with_logit(z, y);
            let mut delta = vec![(sigmoid(z) - y) / n];
            for l in (0..self.n_layers()).rev() {
                let d_in = self.sizes[l];
                let input = &acts[l];
                let relu = l > 0;
                for (o, d) in delta.iter().enumerate() {
                    gb[l][o] += d;
                    let row = &mut gw[l][o * d_in..(o + 1) * d_in];
                    for (g, a) in row.iter_mut().zip(input) {
                        *g += d * if relu { a.max(0.0) } else { *a };
                    }
                }
                if l == 0 {
                    break;
                }
                let mut next = vec![0.0; d_in];
                for (o, d) in delta.iter().enumerate() {
                    let row = &self.weights[l][o * d_in..(o + 1) * d_in];
                    for (nx, w) in next.iter_mut().zip(row) {
                        *nx += d * w;
                    }
                }
                for (nx, a) in next.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *nx = 0.0;
                    }
                }
                delta = next;
            }
        }
        (loss / n, gw, gb)
    }

    pub fn mean_loss(&self, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
        xs.iter().zip(ys).map(|(x, &y)| bce_with_logit(self.logit(x), y)).sum::<f64>() / xs.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 64],
            lr: 1e-3,
            max_epochs: 500,
            patience: 10,
            val_fraction: 0.1,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction <= 0.5) {
            return Err(GdsError::invalid("detector val_fraction must lie in (0, 0.5]"));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(GdsError::invalid("detector max_epochs and batch_size must be >= 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(GdsError::invalid("detector lr must be finite and non-negative"));
        }
        if self.hidden.contains(&0) {
            return Err(GdsError::invalid("hidden layer sizes must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// 1-based epoch whose weights were kept.
    pub stopping_epoch: usize,
    pub val_auroc: f64,
}

/// Stratified hold-out: `round(val_fraction * n_label)` per label, at least
/// one, leaving at least one of each label for training.
fn carve_validation(labels: &[Label], val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rng = rng::stream(seed, "detector.val_split");
    let mut train = Vec::new();
    let mut val = Vec::new();
    for label in [Label::Member, Label::NonMember] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        if idx.len() < 2 {
            return Err(GdsError::invalid(format!(
                "detector training needs at least 2 samples labelled {}, found {}",
                label.as_u8(),
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let k = ((val_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        val.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Fit on raw rows. Returns the model, the standardizer fitted on the
/// training part, and the training history.
pub fn train_mlp(
    rows: &[Vec<f64>],
    labels: &[Label],
    cfg: &DetectorConfig,
) -> Result<(MlpModel, Standardizer, TrainReport)> {
    cfg.validate()?;
    if rows.len() != labels.len() {
        return Err(GdsError::invalid("rows and labels differ in length"));
    }
    let (train_idx, val_idx) = carve_validation(labels, cfg.val_fraction, cfg.seed)?;
    let train_raw: Vec<Vec<f64>> = train_idx.iter().map(|&i| rows[i].clone()).collect();
    let standardizer = Standardizer::fit(&train_raw)?;
    let prep = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<f64>) {
        idx.iter()
            .map(|&i| (standardizer.transform(&rows[i]), labels[i].as_u8() as f64))
            .unzip()
    };
    let (xt, yt) = prep(&train_idx);
    let (xv, yv) = prep(&val_idx);

    let mut model = MlpModel::init(standardizer.dim(), &cfg.hidden, cfg.seed);
    let mut adam = Adam::new(
        AdamConfig { lr: cfg.lr, ..Default::default() },
        model.weights.iter().chain(&model.biases).map(|b| b.len()),
    );
    let mut best = (f64::INFINITY, model.clone(), 0usize);
    let mut since_best = 0;
    let (mut train_hist, mut val_hist) = (Vec::new(), Vec::new());
    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..xt.len()).collect();
        order.shuffle(&mut rng::epoch_stream(cfg.seed, "detector.fit", epoch));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let bx: Vec<Vec<f64>> = batch.iter().map(|&i| xt[i].clone()).collect();
            let by: Vec<f64> = batch.iter().map(|&i| yt[i]).collect();
            let (loss, gw, gb) = model.loss_and_grad(&bx, &by);
            if !loss.is_finite() {
                return Err(GdsError::NonFinite { context: format!("detector loss at epoch {}", epoch + 1) });
            }
            epoch_loss += loss * batch.len() as f64;
            let params: Vec<&mut [f64]> = model
                .weights
                .iter_mut()
                .chain(model.biases.iter_mut())
                .map(|v| v.as_mut_slice())
                .collect();
            let grads: Vec<&[f64]> = gw.iter().chain(&gb).map(|v| v.as_slice()).collect();
            adam.step(params, grads);
        }
        train_hist.push(epoch_loss / xt.len() as f64);
        let val_loss = model.mean_loss(&xv, &yv);
        if !val_loss.is_finite() {
            return Err(GdsError::NonFinite { context: format!("detector validation loss at epoch {}", epoch + 1) });
        }
        val_hist.push(val_loss);
        if val_loss < best.0 {
            best = (val_loss, model.clone(), epoch + 1);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let model = best.1;
    let val_scores: Vec<f64> = xv.iter().map(|x| model.logit(x)).collect();
    let val_labels: Vec<Label> = val_idx.iter().map(|&i| labels[i]).collect();
    let val_auroc = auroc(&ScoredSet::new(val_scores, val_labels, true)?);
    let report = TrainReport {
        epochs_run: train_hist.len(),
        train_loss: train_hist,
        val_loss: val_hist,
        stopping_epoch: best.2,
        val_auroc,
    };
    Ok((model, standardizer, report))
}

/// A fitted classifier bound to the feature layout it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub model: MlpModel,
    pub standardizer: Standardizer,
    pub layout: Arc<FeatureLayout>,
}

pub fn fit(vectors: &[FeatureVector], cfg: &DetectorConfig) -> Result<(Detector, TrainReport)> {
    let layout = vectors
        .first()
        .ok_or_else(|| GdsError::invalid("no training vectors"))?
        .layout
        .clone();
    if vectors.iter().any(|v| v.layout != layout) {
        return Err(GdsError::invalid("training vectors have different layouts"));
    }
    let rows: Vec<Vec<f64>> = vectors.iter().map(|v| v.values.clone()).collect();
    let labels: Vec<Label> = vectors.iter().map(|v| v.label).collect();
    let (model, standardizer, report) = train_mlp(&rows, &labels, cfg)?;
    Ok((Detector { model, standardizer, layout }, report))
}

impl Detector {
    pub fn predict_row(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.model.d_in() {
            return Err(GdsError::invalid(format!(
                "feature vector has {} dimensions, detector expects {}",
                x.len(),
                self.model.d_in()
            )));
        }
        Ok(sigmoid(self.model.logit(&self.standardizer.transform(x))))
    }

    /// Membership probability. The vector's layout must match the one
    /// the detector was trained on.
    pub fn predict(&self, v: &FeatureVector) -> Result<f64> {
        if v.layout.keys() != self.layout.keys() {
            return Err(GdsError::invalid(format!(
                "feature layout of {} differs from the detector's",
                v.source_id
            )));
        }
        self.predict_row(&v.values)
    }

    pub fn predict_batch(&self, vs: &[FeatureVector]) -> Result<Vec<f64>> {
        vs.par_iter().map(|v| self.predict(v)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile {
            kind: MODEL_KIND.into(),
            model: self.model.clone(),
            standardizer: self.standardizer.clone(),
            layout: self.layout.keys().to_vec(),
        };
        write_atomic(path, &serde_json::to_vec(&file)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| GdsError::io(path, e))?;
        let bad = |message: String| GdsError::Format { path: path.to_path_buf(), message };
        let file: ModelFile = serde_json::from_slice(&bytes).map_err(|e| bad(e.to_string()))?;
        if file.kind != MODEL_KIND {
            return Err(bad(format!("expected kind {MODEL_KIND}, found {}", file.kind)));
        }
        let m = &file.model;
        let shapes_ok = m.sizes.len() == m.weights.len() + 1
            && m.biases.len() == m.weights.len()
            && m.sizes.windows(2).zip(&m.weights).all(|(s, w)| w.len() == s[0] * s[1])
            && m.sizes[1..].iter().zip(&m.biases).all(|(s, b)| b.len() == *s)
            && m.sizes.last() == Some(&1)
            && m.sizes[0] == file.layout.len()
            && file.standardizer.dim() == m.sizes[0]
            && file.standardizer.std.len() == m.sizes[0];
        if !shapes_ok {
            return Err(bad("inconsistent layer sizes".into()));
        }
        if m.hidden_activation != "relu" || m.output_activation != "sigmoid" {
            return Err(bad("unsupported activation".into()));
        }
        Ok(Self {
            model: file.model,
            standardizer: file.standardizer,
            layout: Arc::new(FeatureLayout::from_keys(file.layout)?),
        })
    }
}

const MODEL_KIND: &str = "gds_detector";

#[derive(Serialize, Deserialize)]
struct ModelFile {
    kind: String,
    model: MlpModel,
    standardizer: Standardizer,
    layout: Vec<FeatureKey>,
}
