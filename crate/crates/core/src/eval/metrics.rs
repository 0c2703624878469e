//! Detection metrics and two-sample statistics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::corpus::Label;
use crate::error::{GdsError, Result};

pub const DEFAULT_FPR_CAP: f64 = 0.05;

/// Scores with labels. `higher_is_member` says which end of the scale
/// indicates membership; metrics see the scores negated when it is false.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<Label>,
    higher_is_member: bool,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<Label>, higher_is_member: bool) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(GdsError::invalid(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(GdsError::NonFinite { context: format!("score {i}") });
        }
        for label in [Label::Member, Label::NonMember] {
            if !labels.contains(&label) {
                return Err(GdsError::invalid(format!(
                    "scored set has no samples labelled {}",
                    label.as_u8()
                )));
            }
        }
        Ok(Self { scores, labels, higher_is_member })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn higher_is_member(&self) -> bool {
        self.higher_is_member
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    /// Scores on the "higher means member" scale.
    pub fn oriented_scores(&self) -> Vec<f64> {
        if self.higher_is_member {
            self.scores.clone()
        } else {
            self.scores.iter().map(|s| -s).collect()
        }
    }

    pub fn with_orientation(mut self, higher_is_member: bool) -> Self {
        self.higher_is_member = higher_is_member;
        self
    }

    pub fn with_flipped_labels(mut self) -> Self {
        for l in &mut self.labels {
            *l = if l.is_member() { Label::NonMember } else { Label::Member };
        }
        self
    }

    fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|l| l.is_member()).count();
        (pos, self.labels.len() - pos)
    }
}

/// 1-based ranks with ties given their average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j share ranks i+1..=j+1
        let r = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Rank-sum AUROC with midranks.
pub fn auroc(set: &ScoredSet) -> f64 {
    let ranks = midranks(&set.oriented_scores());
    let (pos, neg) = set.class_counts();
    let rank_sum: f64 = ranks
        .iter()
        .zip(&set.labels)
        .filter(|(_, l)| l.is_member())
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    u / (pos as f64 * neg as f64)
}

/// Empirical ROC: one point per distinct threshold, from `(0, 0)` to `(1, 1)`.
pub fn roc_curve(set: &ScoredSet) -> Vec<(f64, f64)> {
    let scores = set.oriented_scores();
    let (pos, neg) = set.class_counts();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if set.labels[order[i]].is_member() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    points
}

/// Largest TPR over thresholds whose empirical FPR is at most `fpr_cap`.
pub fn tpr_at_fpr(set: &ScoredSet, fpr_cap: f64) -> f64 {
    roc_curve(set)
        .into_iter()
        .filter(|&(fpr, _)| fpr <= fpr_cap)
        .map(|(_, tpr)| tpr)
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocSummary {
    pub auroc: f64,
    pub tpr_at_5fpr: f64,
    pub higher_is_member: bool,
    #[serde(skip)]
    pub curve: Vec<(f64, f64)>,
}

pub fn roc_summary(set: &ScoredSet, fpr_cap: f64) -> RocSummary {
    RocSummary {
        auroc: auroc(set),
        tpr_at_5fpr: tpr_at_fpr(set, fpr_cap),
        higher_is_member: set.higher_is_member(),
        curve: roc_curve(set),
    }
}

/// Two-sample Kolmogorov-Smirnov statistic `sup |F_a - F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0f64;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Mann-Whitney U test of `a` against `b` under the normal approximation
/// with tie correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankTest {
    /// `U` for sample `a`: pairs where `a` exceeds `b`, ties counted 1/2.
    pub u: f64,
    pub z: f64,
    /// One-sided p-value for "`a` tends to be smaller than `b`".
    pub p_less: f64,
    /// One-sided p-value for "`a` tends to be larger than `b`".
    pub p_greater: f64,
}

pub fn mann_whitney(a: &[f64], b: &[f64]) -> Result<RankTest> {
    if a.is_empty() || b.is_empty() {
        return Err(GdsError::invalid("rank test needs two non-empty samples"));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let n = n1 + n2;
    let r1: f64 = ranks[..a.len()].iter().sum();
    let u = r1 - n1 * (n1 + 1.0) / 2.0;
    let mean = n1 * n2 / 2.0;
    // tie correction: sum over tie groups of t^3 - t
    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let mut ties = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    let var = n1 * n2 / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    if var <= 0.0 {
        return Ok(RankTest { u, z: 0.0, p_less: 1.0, p_greater: 1.0 });
    }
    let z = (u - mean) / var.sqrt();
    Ok(RankTest {
        u,
        z,
        p_less: std_normal.cdf(z),
        p_greater: std_normal.sf(z),
    })
}
