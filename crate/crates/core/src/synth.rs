//! Synthetic corpus: short documents built from sentence frames and a
//! pseudo-word lexicon. Members and non-members come from the same
//! generator and differ only in which random draws they received.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Label, RawSample, Split};
use crate::error::{GdsError, Result};
use crate::rng;

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ren", "to", "sa", "vel", "du", "ni", "ore", "pa", "ki", "su", "ma", "te", "gal", "ri",
    "no", "bel", "fa", "zu", "har", "lin", "po", "ve", "qua", "sol", "mer", "ta", "dri",
];

const FRAMES: &[&str] = &[
    "the {adj} {noun} {verb} the {noun}.",
    "{name} {verb} {num} {noun}s near {place}.",
    "in {place}, {name} {verb} a {adj} {noun}.",
    "{name} and {name} kept the {noun} by {place}.",
    "every {noun} in {place} is {adj}.",
    "{name} said the {noun} was {adj} and {adj}.",
];

const NUMBERS: &[&str] = &["two", "three", "four", "five", "six", "seven", "nine", "ten"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Members used only for pretraining.
    pub n_pretrain_members: usize,
    /// Members that are also probed.
    pub n_probe_members: usize,
    pub n_nonmembers: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    /// Entries per word class in the shared lexicon.
    pub lexicon_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_pretrain_members: 300,
            n_probe_members: 200,
            n_nonmembers: 200,
            min_sentences: 2,
            max_sentences: 3,
            lexicon_size: 24,
            seed: 0,
        }
    }
}

struct Lexicon {
    names: Vec<String>,
    nouns: Vec<String>,
    verbs: Vec<String>,
    adjs: Vec<String>,
    places: Vec<String>,
}

fn pseudo_word<R: Rng>(rng: &mut R, syllables: usize) -> String {
    (0..syllables).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect()
}

impl Lexicon {
    /// Depends only on the seed, not on corpus sizes.
    fn new(size: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "synth.lexicon");
        let mut class = |n_syl: usize, suffix: &str| -> Vec<String> {
            let mut out = Vec::new();
            while out.len() < size {
                let w = format!("{}{suffix}", pseudo_word(&mut rng, n_syl));
                if !out.contains(&w) {
                    out.push(w);
                }
            }
            out
        };
        let names = class(2, "")
            .into_iter()
            .map(|w| {
                let mut c = w.chars();
                c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
            })
            .collect();
        Self {
            names,
            nouns: class(2, ""),
            verbs: class(2, "ed"),
            adjs: class(2, "ic"),
            places: class(3, ""),
        }
    }

    fn sentence<R: Rng>(&self, rng: &mut R) -> String {
        let frame = FRAMES.choose(rng).expect("non-empty");
        let mut out = String::new();
        let mut rest = *frame;
        while let Some(start) = rest.find('{') {
            out.push_str(&rest[..start]);
            let end = rest[start..].find('}').expect("closed slot") + start;
            let pool: &[String] = match &rest[start + 1..end] {
                "name" => &self.names,
                "noun" => &self.nouns,
                "verb" => &self.verbs,
                "adj" => &self.adjs,
                "place" => &self.places,
                _ => &[],
            };
            if pool.is_empty() {
                out.push_str(NUMBERS.choose(rng).expect("non-empty"));
            } else {
                out.push_str(pool.choose(rng).expect("non-empty"));
            }
            rest = &rest[end + 1..];
        }
        out.push_str(rest);
        out
    }
}

/// Pretrain-only members first, then probe members, then non-members.
/// Probe samples are marked `probe_eval`; the pipeline re-splits them.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<RawSample>> {
    if cfg.min_sentences == 0 || cfg.max_sentences < cfg.min_sentences || cfg.lexicon_size < 2 {
        return Err(GdsError::invalid("synth: need 1 <= min_sentences <= max_sentences and lexicon_size >= 2"));
    }
    let lex = Lexicon::new(cfg.lexicon_size, cfg.seed);
    let mut rng = rng::stream(cfg.seed, "synth.documents");
    let mut seen = std::collections::HashSet::new();
    let mut doc = |rng: &mut rng::Rng| loop {
        let n = rng.random_range(cfg.min_sentences..=cfg.max_sentences);
        let text = (0..n).map(|_| lex.sentence(rng)).collect::<Vec<_>>().join(" ");
        // duplicates across classes would make membership ill-defined
        if seen.insert(text.clone()) {
            return text;
        }
    };
    let mut out = Vec::new();
    for _ in 0..cfg.n_pretrain_members {
        out.push(RawSample::new(doc(&mut rng), Label::Member, Split::Pretrain)?);
    }
    for _ in 0..cfg.n_probe_members {
        out.push(RawSample::new(doc(&mut rng), Label::Member, Split::ProbeEval)?);
    }
    for _ in 0..cfg.n_nonmembers {
        out.push(RawSample::new(doc(&mut rng), Label::NonMember, Split::ProbeEval)?);
    }
    Ok(out)
}
