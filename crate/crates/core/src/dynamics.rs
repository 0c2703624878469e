//! Epoch-wise statistics of LoRA parameter updates during fine-tuning.
//!
//! Adapters are trained (both `A` and `B`), a checkpoint is taken after
//! every epoch, and each consecutive pair of checkpoints gives one
//! [`UpdateDelta`]. Matrices are grouped by module group (ATT/FFN) and layer
//! tertile, and four numbers are reported per group: mean update magnitude,
//! eccentricity of the largest updates, sparsity, and top-10% mass share.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::error::{GdsError, Result};
use crate::features::{top10_flat, top10_index_set, SPARSITY_THRESHOLD};
use crate::lora::{adapter_gradients, AdapterGrad, LoraAdapterSet};
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::tensor_io::{self, NamedTensor};
use crate::tinylm::{LayerGroup, ModelParams, ModuleGroup, SubModule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AdapterPart {
    A,
    B,
}

impl AdapterPart {
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterPart::A => "A",
            AdapterPart::B => "B",
        }
    }
}

/// `params_after - params_before` for every adapter matrix over one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDelta {
    pub epoch: usize,
    pub matrices: BTreeMap<(usize, SubModule, AdapterPart), Array2<f64>>,
}

impl UpdateDelta {
    pub fn between(before: &LoraAdapterSet, after: &LoraAdapterSet, epoch: usize) -> Result<Self> {
        let mut matrices = BTreeMap::new();
        for (&(layer, sub), a1) in after.iter() {
            let a0 = before
                .get(layer, sub)
                .ok_or_else(|| GdsError::UnknownPath(sub.path(layer)))?;
            matrices.insert((layer, sub, AdapterPart::A), &a1.a - &a0.a);
            matrices.insert((layer, sub, AdapterPart::B), &a1.b - &a0.b);
        }
        Ok(Self { epoch, matrices })
    }

    /// Matrices of one group key, in key order.
    pub fn group(&self, key: GroupKey, n_layers: usize) -> Vec<&Array2<f64>> {
        self.matrices
            .iter()
            .filter(|((layer, sub, _), _)| {
                sub.group() == key.module_group && LayerGroup::of(*layer, n_layers) == key.layer_group
            })
            .map(|(_, m)| m)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub module_group: ModuleGroup,
    pub layer_group: LayerGroup,
}

impl GroupKey {
    pub fn all() -> Vec<GroupKey> {
        ModuleGroup::ALL
            .into_iter()
            .flat_map(|module_group| {
                LayerGroup::ALL.into_iter().map(move |layer_group| GroupKey { module_group, layer_group })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsSnapshot {
    /// Later epoch of the pair (1-based), so the first snapshot is epoch 2.
    pub epoch: usize,
    pub key: GroupKey,
    pub delta_theta: f64,
    pub eccentricity: f64,
    pub sparsity: f64,
    pub top10_ratio: f64,
}

fn non_empty(group: &[&Array2<f64>]) -> Result<()> {
    if group.is_empty() || group.iter().any(|m| m.is_empty()) {
        return Err(GdsError::invalid("dynamics group is empty"));
    }
    Ok(())
}

/// Mean absolute entry over every matrix in the group.
pub fn update_magnitude(group: &[&Array2<f64>]) -> Result<f64> {
    non_empty(group)?;
    let n: usize = group.iter().map(|m| m.len()).sum();
    Ok(group.iter().flat_map(|m| m.iter()).map(|x| x.abs()).sum::<f64>() / n as f64)
}

fn norm_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.5
    } else {
        i as f64 / (n - 1) as f64
    }
}

/// Per matrix, the mean distance of the top-10% entries' normalized
/// `(row, col)` positions from the centre `(1/2, 1/2)`; averaged over the
/// group and divided by the centre-to-corner distance. An all-zero matrix
/// contributes 0.
pub fn eccentricity(group: &[&Array2<f64>]) -> Result<f64> {
    non_empty(group)?;
    let max_dist = 0.5f64.sqrt();
    let total: f64 = group
        .iter()
        .map(|m| {
            if m.iter().all(|x| *x == 0.0) {
                return 0.0;
            }
            let (r, h) = m.dim();
            let top = top10_index_set(m);
            top.iter()
                .map(|&(i, j)| (norm_coord(i, r) - 0.5).hypot(norm_coord(j, h) - 0.5))
                .sum::<f64>()
                / top.len() as f64
        })
        .sum();
    Ok(total / group.len() as f64 / max_dist)
}

/// Fraction of entries with `|delta| < 1e-6`.
pub fn sparsity_s(group: &[&Array2<f64>]) -> Result<f64> {
    non_empty(group)?;
    let n: usize = group.iter().map(|m| m.len()).sum();
    let small = group.iter().flat_map(|m| m.iter()).filter(|x| x.abs() < SPARSITY_THRESHOLD).count();
    Ok(small as f64 / n as f64)
}

/// Share of L1 mass in the top-10% entries of the concatenated group.
pub fn top10_t(group: &[&Array2<f64>]) -> Result<f64> {
    non_empty(group)?;
    let flat: Vec<f64> = group.iter().flat_map(|m| m.iter().copied()).collect();
    let total: f64 = flat.iter().map(|x| x.abs()).sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok(top10_flat(&flat).into_iter().map(|i| flat[i].abs()).sum::<f64>() / total)
}

pub fn snapshots(delta: &UpdateDelta, n_layers: usize) -> Result<Vec<DynamicsSnapshot>> {
    GroupKey::all()
        .into_par_iter()
        .map(|key| {
            let g = delta.group(key, n_layers);
            Ok(DynamicsSnapshot {
                epoch: delta.epoch,
                key,
                delta_theta: update_magnitude(&g)?,
                eccentricity: eccentricity(&g)?,
                sparsity: sparsity_s(&g)?,
                top10_ratio: top10_t(&g)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self { epochs: 7, lr: 1e-3, batch_size: 8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsOutcome {
    pub snapshots: Vec<DynamicsSnapshot>,
    pub epoch_losses: Vec<f64>,
    /// `|delta|` of the requested matrix for every epoch transition.
    pub heatmaps: Vec<Array2<f64>>,
}

/// LoRA fine-tuning with frozen base weights. Unlike probing, the adapters
/// are updated here.
pub fn run_dynamics(
    params: &ModelParams,
    adapters: &LoraAdapterSet,
    corpus: &[TokenSequence],
    cfg: &DynamicsConfig,
    heatmap: Option<(usize, SubModule, AdapterPart)>,
) -> Result<DynamicsOutcome> {
    if cfg.epochs < 2 {
        return Err(GdsError::invalid("dynamics needs at least 2 epochs"));
    }
    if cfg.batch_size == 0 || corpus.is_empty() {
        return Err(GdsError::invalid("dynamics needs a non-empty corpus and batch_size >= 1"));
    }
    let n_layers = params.config.n_layers;
    if n_layers < 3 {
        return Err(GdsError::invalid(format!(
            "dynamics groups layers into tertiles and needs at least 3 layers, model has {n_layers}"
        )));
    }
    if let Some((layer, sub, _)) = heatmap {
        if adapters.get(layer, sub).is_none() {
            return Err(GdsError::UnknownPath(sub.path(layer)));
        }
    }
    let mut current = adapters.clone();
    let keys: Vec<(usize, SubModule)> = current.iter().map(|(k, _)| *k).collect();
    let mut adam = Adam::new(
        AdamConfig { lr: cfg.lr, ..Default::default() },
        current.iter().flat_map(|(_, a)| [a.a.len(), a.b.len()]),
    );
    let mut previous: Option<LoraAdapterSet> = None;
    let mut out = DynamicsOutcome { snapshots: Vec::new(), epoch_losses: Vec::new(), heatmaps: Vec::new() };
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng::epoch_stream(cfg.seed, "dynamics.train", epoch));
        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let per_sample: Vec<(f64, BTreeMap<(usize, SubModule), AdapterGrad>)> = batch
                .par_iter()
                .map(|&i| adapter_gradients(params, &current, &corpus[i].ids))
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut sum: BTreeMap<(usize, SubModule), AdapterGrad> =
                current.iter().map(|(k, a)| (*k, AdapterGrad::zeros_like(a))).collect();
            for (loss, grads) in &per_sample {
                loss_sum += loss;
                for (k, g) in grads {
                    let acc = sum.get_mut(k).expect("same adapter keys");
                    acc.a.scaled_add(scale, &g.a);
                    acc.b.scaled_add(scale, &g.b);
                }
            }
            if !loss_sum.is_finite() {
                return Err(GdsError::NonFinite {
                    context: format!("dynamics loss at epoch {} step {}", epoch + 1, step + 1),
                });
            }
            let grads: Vec<&[f64]> = keys
                .iter()
                .flat_map(|k| {
                    let g = &sum[k];
                    [g.a.as_slice().expect("contiguous"), g.b.as_slice().expect("contiguous")]
                })
                .collect();
            let slots: Vec<&mut [f64]> = current
                .iter_mut()
                .flat_map(|(_, a)| [a.a.as_slice_mut().expect("contiguous"), a.b.as_slice_mut().expect("contiguous")])
                .collect();
            adam.step(slots, grads);
        }
        out.epoch_losses.push(loss_sum / corpus.len() as f64);
        if let Some(prev) = &previous {
            let delta = UpdateDelta::between(prev, &current, epoch + 1)?;
            out.snapshots.extend(snapshots(&delta, n_layers)?);
            if let Some(key) = heatmap {
                out.heatmaps.push(delta.matrices[&key].mapv(f64::abs));
            }
        }
        previous = Some(current.clone());
    }
    Ok(out)
}

pub fn write_dynamics_csv<W: Write>(mut w: W, snaps: &[DynamicsSnapshot]) -> std::io::Result<()> {
    writeln!(w, "epoch,module_group,layer_group,delta_theta,E,S,T10")?;
    for s in snaps {
        writeln!(
            w,
            "{},{},{},{:e},{:e},{:e},{:e}",
            s.epoch,
            s.key.module_group,
            s.key.layer_group,
            s.delta_theta,
            s.eccentricity,
            s.sparsity,
            s.top10_ratio
        )?;
    }
    Ok(())
}

/// One container per epoch transition holding the `|delta|` matrix.
pub fn write_heatmaps(dir: &Path, name: &str, first_epoch: usize, maps: &[Array2<f64>]) -> Result<()> {
    for (i, m) in maps.iter().enumerate() {
        let epoch = first_epoch + i;
        let meta = serde_json::json!({ "kind": "update_heatmap", "matrix": name, "epoch": epoch });
        let t = NamedTensor::from_array(name, m.view().into_dyn());
        tensor_io::write_container(&dir.join(format!("heatmap.epoch{epoch}.bin")), &meta, &[t])?;
    }
    Ok(())
}
