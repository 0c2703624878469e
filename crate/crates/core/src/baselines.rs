//! Likelihood-based reference detectors: perplexity, zlib-normalized loss,
//! Min-k% and Min-k%++.
//!
//! Natural orientation: lower `ppl` and `zlib`, higher `min_k` and
//! `min_k_pp` suggest membership. Evaluation re-orients scores anyway.

use std::io::Write;

use flate2::write::ZlibEncoder;
use flate2::Compression;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Label, TokenSequence, Vocab};
use crate::error::{GdsError, Result};
use crate::tinylm::{forward_ids, ModelParams};

pub const DEFAULT_K_PERCENT: f64 = 20.0;

/// Per-position log-likelihoods of the observed next token and, optionally,
/// the mean and std of `log p(v)` under the model's own next-token
/// distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLogLik {
    pub log_probs: Vec<f64>,
    pub stats: Option<(Vec<f64>, Vec<f64>)>,
}

impl TokenLogLik {
    pub fn compute(params: &ModelParams, ids: &[u32], with_stats: bool) -> Result<Self> {
        let trace = forward_ids(params, ids, None)?;
        let log_probs = trace.target_log_probs();
        let stats = with_stats.then(|| {
            let lp = trace.log_probs();
            (0..ids.len() - 1)
                .map(|t| {
                    let row = lp.row(t);
                    let mu: f64 = row.iter().map(|l| l.exp() * l).sum();
                    // a flat distribution would otherwise leave rounding noise in sigma
                    if row.iter().all(|l| *l == row[0]) {
                        return (mu, 0.0);
                    }
                    let var: f64 = row.iter().map(|l| l.exp() * (l - mu).powi(2)).sum();
                    (mu, var.max(0.0).sqrt())
                })
                .unzip()
        });
        Ok(Self { log_probs, stats })
    }

    pub fn mean(&self) -> f64 {
        self.log_probs.iter().sum::<f64>() / self.log_probs.len() as f64
    }
}

fn check_k(k_percent: f64) -> Result<()> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(GdsError::invalid(format!("k_percent must lie in (0, 100], got {k_percent}")));
    }
    Ok(())
}

/// Mean of the `floor(k% * n)` smallest values (at least one).
pub fn bottom_k_mean(values: &[f64], k_percent: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = ((k_percent / 100.0 * v.len() as f64).floor() as usize).clamp(1, v.len());
    v[..n].iter().sum::<f64>() / n as f64
}

pub fn zlib_len(bytes: &[u8]) -> Result<usize> {
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::default());
    enc.write_all(bytes).map_err(|e| GdsError::invalid(e.to_string()))?;
    let out = enc.finish().map_err(|e| GdsError::invalid(e.to_string()))?;
    if out.is_empty() {
        return Err(GdsError::invalid("zlib produced no output"));
    }
    Ok(out.len())
}

pub fn ppl_score(params: &ModelParams, sample: &TokenSequence) -> Result<f64> {
    Ok((-TokenLogLik::compute(params, &sample.ids, false)?.mean()).exp())
}

/// Token-mean loss over the zlib-compressed length of the sample's bytes.
pub fn zlib_score(params: &ModelParams, sample: &TokenSequence, vocab: &Vocab) -> Result<f64> {
    let loss = -TokenLogLik::compute(params, &sample.ids, false)?.mean();
    Ok(loss / zlib_len(&vocab.decode_bytes(&sample.ids))? as f64)
}

pub fn min_k_score(params: &ModelParams, sample: &TokenSequence, k_percent: f64) -> Result<f64> {
    check_k(k_percent)?;
    Ok(bottom_k_mean(&TokenLogLik::compute(params, &sample.ids, false)?.log_probs, k_percent))
}

/// `(log p - mu) / sigma` per position; zero-variance positions score 0.
pub fn normalized_token_scores(ll: &TokenLogLik) -> Vec<f64> {
    let (mu, sigma) = ll.stats.as_ref().expect("token statistics requested");
    ll.log_probs
        .iter()
        .zip(mu.iter().zip(sigma))
        .map(|(lp, (m, s))| if *s > 0.0 { (lp - m) / s } else { 0.0 })
        .collect()
}

pub fn min_k_pp_score(params: &ModelParams, sample: &TokenSequence, k_percent: f64) -> Result<f64> {
    check_k(k_percent)?;
    let ll = TokenLogLik::compute(params, &sample.ids, true)?;
    Ok(bottom_k_mean(&normalized_token_scores(&ll), k_percent))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Ppl,
    Zlib,
    MinK,
    MinKPp,
}

impl Baseline {
    pub const ALL: [Baseline; 4] = [Baseline::Ppl, Baseline::Zlib, Baseline::MinK, Baseline::MinKPp];

    pub fn as_str(self) -> &'static str {
        match self {
            Baseline::Ppl => "ppl",
            Baseline::Zlib => "zlib",
            Baseline::MinK => "min_k",
            Baseline::MinKPp => "min_k_pp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.as_str() == s)
    }
}

/// One row of the score table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineScores {
    pub source_id: String,
    pub label: Label,
    pub ppl: f64,
    pub zlib: f64,
    pub min_k: f64,
    pub min_k_pp: f64,
}

impl BaselineScores {
    pub fn get(&self, b: Baseline) -> f64 {
        match b {
            Baseline::Ppl => self.ppl,
            Baseline::Zlib => self.zlib,
            Baseline::MinK => self.min_k,
            Baseline::MinKPp => self.min_k_pp,
        }
    }
}

/// All four scores from a single forward pass per sample.
pub fn score_sample(
    params: &ModelParams,
    sample: &TokenSequence,
    vocab: &Vocab,
    k_percent: f64,
) -> Result<BaselineScores> {
    check_k(k_percent)?;
    let ll = TokenLogLik::compute(params, &sample.ids, true)?;
    let mean = ll.mean();
    Ok(BaselineScores {
        source_id: sample.source_id.clone(),
        label: sample.label,
        ppl: (-mean).exp(),
        zlib: -mean / zlib_len(&vocab.decode_bytes(&sample.ids))? as f64,
        min_k: bottom_k_mean(&ll.log_probs, k_percent),
        min_k_pp: bottom_k_mean(&normalized_token_scores(&ll), k_percent),
    })
}

pub fn score_all(
    params: &ModelParams,
    samples: &[TokenSequence],
    vocab: &Vocab,
    k_percent: f64,
) -> Result<Vec<BaselineScores>> {
    samples
        .par_iter()
        .map(|s| score_sample(params, s, vocab, k_percent))
        .collect()
}

pub fn write_score_csv<W: Write>(mut w: W, rows: &[BaselineScores]) -> std::io::Result<()> {
    writeln!(w, "source_id,label,ppl,zlib,min_k,min_k_pp")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:e},{:e},{:e},{:e}",
            r.source_id,
            r.label.as_u8(),
            r.ppl,
            r.zlib,
            r.min_k,
            r.min_k_pp
        )?;
    }
    Ok(())
}
