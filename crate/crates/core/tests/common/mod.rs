//! Oracles and random inputs shared by the test targets.
#![allow(dead_code)]

use gds_core::corpus::{Label, Split, TokenSequence};
use gds_core::tinylm::{ModelConfig, ModelParams};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Naive {
    pub abs_mean: f64,
    pub row_mean_max: f64,
    pub ten_p: f64,
    pub sparsity: f64,
    pub std: f64,
    pub row_mean_std: f64,
    pub row_ecc: f64,
    pub col_ecc: f64,
}

impl Naive {
    /// Values in feature-vector order.
    pub fn ordered(&self) -> [f64; 8] {
        [
            self.abs_mean,
            self.row_mean_max,
            self.ten_p,
            self.sparsity,
            self.std,
            self.row_mean_std,
            self.row_ecc,
            self.col_ecc,
        ]
    }
}

pub fn naive(g: &Array2<f64>) -> Naive {
    let (r, h) = g.dim();
    let n = r * h;
    let mut sum = 0.0;
    let mut small = 0;
    for i in 0..r {
        for j in 0..h {
            sum += g[[i, j]].abs();
            if g[[i, j]].abs() < 1e-6 {
                small += 1;
            }
        }
    }
    let abs_mean = sum / n as f64;
    let mut var = 0.0;
    for i in 0..r {
        for j in 0..h {
            var += (g[[i, j]].abs() - abs_mean) * (g[[i, j]].abs() - abs_mean);
        }
    }
    let mut row_means = vec![0.0; r];
    for i in 0..r {
        for j in 0..h {
            row_means[i] += g[[i, j]].abs();
        }
        row_means[i] /= h as f64;
    }
    let mut row_mean_max = row_means[0];
    let mut rm_sum = 0.0;
    for m in &row_means {
        if *m > row_mean_max {
            row_mean_max = *m;
        }
        rm_sum += m;
    }
    let rm_mu = rm_sum / r as f64;
    let mut rm_var = 0.0;
    for m in &row_means {
        rm_var += (m - rm_mu) * (m - rm_mu);
    }

    // selection by repeated arg-max; earlier (i, j) wins ties
    let k = (n + 9) / 10;
    let mut taken = vec![false; n];
    let mut top = Vec::new();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for f in 0..n {
            if taken[f] {
                continue;
            }
            let v = g[[f / h, f % h]].abs();
            if best.is_none() || v > g[[best.unwrap() / h, best.unwrap() % h]].abs() {
                best = Some(f);
            }
        }
        taken[best.unwrap()] = true;
        top.push((best.unwrap() / h + 1, best.unwrap() % h + 1));
    }
    let mut top_mass = 0.0;
    let mut re = 0.0;
    let mut ce = 0.0;
    for &(i, j) in &top {
        top_mass += g[[i - 1, j - 1]].abs();
        if r > 1 {
            re += (2.0 * i as f64 - (r as f64 + 1.0)).abs() / (r as f64 - 1.0);
        }
        if h > 1 {
            ce += (2.0 * j as f64 - (h as f64 + 1.0)).abs() / (h as f64 - 1.0);
        }
    }
    let zero = sum == 0.0;
    Naive {
        abs_mean,
        row_mean_max,
        ten_p: if zero { 0.0 } else { top_mass / sum },
        sparsity: small as f64 / n as f64,
        std: (var / n as f64).sqrt(),
        row_mean_std: (rm_var / r as f64).sqrt(),
        row_ecc: if zero { 0.0 } else { re / k as f64 },
        col_ecc: if zero { 0.0 } else { ce / k as f64 },
    }
}

/// 200 matrices from 1x1 to 64x64: zero, constant, single-spike, tied and
/// near-threshold cases.
pub fn feature_corpus() -> Vec<Array2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = vec![
        Array2::zeros((1, 1)),
        Array2::from_elem((1, 1), -3.0),
        Array2::zeros((64, 64)),
        Array2::from_elem((7, 5), 0.25),
        Array2::from_elem((64, 16), -1e-7),
    ];
    while out.len() < 200 {
        let r = rng.random_range(1..=64);
        let h = rng.random_range(1..=64);
        let g = match out.len() % 5 {
            0 => {
                let mut g = Array2::zeros((r, h));
                g[[rng.random_range(0..r), rng.random_range(0..h)]] = rng.random_range(-5.0..5.0);
                g
            }
            1 => Array2::from_elem((r, h), rng.random_range(-1.0..1.0)),
            // coarse grid so that ties in magnitude are common
            2 => Array2::from_shape_simple_fn((r, h), || rng.random_range(-3i32..=3) as f64 * 0.5),
            3 => Array2::from_shape_simple_fn((r, h), || {
                if rng.random_bool(0.5) {
                    0.0
                } else {
                    rng.random_range(-1e-3..1e-3)
                }
            }),
            _ => Array2::from_shape_simple_fn((r, h), || rng.random_range(-1.0..1.0)),
        };
        out.push(g);
    }
    out
}

/// Pairwise count: member above non-member scores 1, ties 1/2.
pub fn pairwise_auroc(scores: &[f64], labels: &[Label]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i].is_member() && !labels[j].is_member() {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Every observed score plus +inf as a "score >= t" threshold.
pub fn scan_tpr(scores: &[f64], labels: &[Label], cap: f64) -> f64 {
    let n_pos = labels.iter().filter(|l| l.is_member()).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let mut best = 0.0f64;
    let mut thresholds = scores.to_vec();
    thresholds.push(f64::INFINITY);
    for t in thresholds {
        let mut tp = 0.0;
        let mut fp = 0.0;
        for (s, l) in scores.iter().zip(labels) {
            if *s >= t {
                if l.is_member() {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        if fp / n_neg <= cap {
            best = best.max(tp / n_pos);
        }
    }
    best
}

pub fn random_scored_set(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<Label>) {
    loop {
        // a coarse grid injects ties
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..12) as f64) * 0.25).collect();
        let labels: Vec<Label> =
            (0..n).map(|_| if rng.random_bool(0.5) { Label::Member } else { Label::NonMember }).collect();
        if labels.iter().any(|l| l.is_member()) && labels.iter().any(|l| !l.is_member()) {
            return (scores, labels);
        }
    }
}

/// Two layers, d = 16.
pub fn d16() -> ModelConfig {
    ModelConfig {
        vocab_size: 40,
        d_model: 16,
        n_heads: 4,
        n_layers: 2,
        d_ff: 24,
        max_seq_len: 16,
        rmsnorm_eps: 1e-6,
    }
}

/// Larger-than-init weights so that every path contributes visibly.
pub fn random_model(seed: u64) -> ModelParams {
    let mut p = ModelParams::init(&d16(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for (name, mut t) in p.named_mut() {
        let norm = name.ends_with("norm");
        t.iter_mut().for_each(|x| {
            *x = if norm { 1.0 + rng.random_range(-0.3..0.3) } else { rng.random_range(-0.4..0.4) }
        });
    }
    p
}

pub fn random_ids(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
}

pub fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let n_heads = rng.random_range(1..=4);
    ModelConfig {
        vocab_size: rng.random_range(20..60),
        d_model: n_heads * rng.random_range(2..6),
        n_heads,
        n_layers: rng.random_range(1..=3),
        d_ff: rng.random_range(4..24),
        max_seq_len: 24,
        rmsnorm_eps: 1e-6,
    }
}

pub fn perturbed(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31));
    for (name, mut t) in p.named_mut() {
        if !name.ends_with("norm") {
            t.iter_mut().for_each(|x| *x += rng.random_range(-0.2..0.2));
        }
    }
    p
}

pub fn random_sample(rng: &mut ChaCha8Rng, vocab: usize) -> TokenSequence {
    let len = rng.random_range(4..20);
    TokenSequence {
        ids: (0..len).map(|_| rng.random_range(0..vocab as u32)).collect(),
        label: Label::Member,
        split: Split::ProbeEval,
        source_id: "s".into(),
    }
}
