//! Per-dimension class separation of feature vectors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{GdsError, Result};
use crate::eval::metrics::ks_statistic;
use crate::features::{FeatureName, FeatureVector};
use crate::tinylm::{LayerGroup, SubModule};

pub const DEFAULT_TOP_K: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDivergence {
    pub layer: usize,
    pub sub_module: SubModule,
    pub feature: FeatureName,
    pub member_mean: f64,
    pub nonmember_mean: f64,
    pub ks: f64,
    /// 1-based position after sorting by `ks` descending.
    pub rank: usize,
}

/// KS statistic and class means for every dimension, most separated first.
/// Equal statistics keep vector order.
pub fn feature_divergence(vectors: &[FeatureVector]) -> Result<Vec<FeatureDivergence>> {
    let first = vectors.first().ok_or_else(|| GdsError::invalid("no feature vectors"))?;
    let layout = first.layout.clone();
    if vectors.iter().any(|v| v.layout != layout) {
        return Err(GdsError::invalid("feature vectors have different layouts"));
    }
    let (members, others): (Vec<&FeatureVector>, Vec<&FeatureVector>) =
        vectors.iter().partition(|v| v.label.is_member());
    if members.is_empty() || others.is_empty() {
        return Err(GdsError::invalid("divergence needs both classes"));
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let mut out: Vec<FeatureDivergence> = layout
        .keys()
        .iter()
        .enumerate()
        .map(|(d, key)| {
            let a: Vec<f64> = members.iter().map(|v| v.values[d]).collect();
            let b: Vec<f64> = others.iter().map(|v| v.values[d]).collect();
            FeatureDivergence {
                layer: key.layer,
                sub_module: key.sub_module,
                feature: key.feature,
                member_mean: mean(&a),
                nonmember_mean: mean(&b),
                ks: ks_statistic(&a, &b),
                rank: 0,
            }
        })
        .collect();
    out.sort_by(|x, y| y.ks.total_cmp(&x.ks));
    for (i, d) in out.iter_mut().enumerate() {
        d.rank = i + 1;
    }
    Ok(out)
}

/// How often each layer tertile, sub-module and feature name appears among
/// the `top_k` most separated dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceCounts {
    pub top_k: usize,
    pub by_layer_group: BTreeMap<String, usize>,
    pub by_sub_module: BTreeMap<String, usize>,
    pub by_feature: BTreeMap<String, usize>,
}

pub fn top_k_counts(ranked: &[FeatureDivergence], top_k: usize, n_layers: usize) -> DivergenceCounts {
    let mut counts = DivergenceCounts {
        top_k,
        by_layer_group: LayerGroup::ALL.iter().map(|g| (g.as_str().to_string(), 0)).collect(),
        by_sub_module: SubModule::ALL.iter().map(|s| (s.as_str().to_string(), 0)).collect(),
        by_feature: FeatureName::ALL.iter().map(|f| (f.as_str().to_string(), 0)).collect(),
    };
    for d in ranked.iter().take(top_k) {
        *counts
            .by_layer_group
            .get_mut(LayerGroup::of(d.layer, n_layers).as_str())
            .expect("all groups seeded") += 1;
        *counts.by_sub_module.get_mut(d.sub_module.as_str()).expect("seeded") += 1;
        *counts.by_feature.get_mut(d.feature.as_str()).expect("seeded") += 1;
    }
    counts
}

/// Per-sample mean of one feature over all matrices.
pub fn aggregate_feature(vectors: &[FeatureVector], name: FeatureName) -> Vec<f64> {
    vectors
        .iter()
        .map(|v| {
            let xs = v.feature_values(name);
            xs.iter().sum::<f64>() / xs.len() as f64
        })
        .collect()
}
