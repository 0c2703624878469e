//! Text ingestion, byte-level tokenization and probe-set splitting.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GdsError, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    NonMember,
    Member,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::NonMember => 0,
            Label::Member => 1,
        }
    }

    pub fn is_member(self) -> bool {
        self == Label::Member
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, Self::Error> {
        match v {
            0 => Ok(Label::NonMember),
            1 => Ok(Label::Member),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l.as_u8()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Pretrain,
    ProbeTrain,
    ProbeEval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::ProbeTrain => "probe_train",
            Split::ProbeEval => "probe_eval",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One line of a corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSample {
    pub text: String,
    pub label: Label,
    pub split: Split,
}

impl RawSample {
    pub fn new(text: impl Into<String>, label: Label, split: Split) -> Result<Self> {
        let text = text.into();
        if text.is_empty() {
            return Err(GdsError::invalid("sample text must be non-empty"));
        }
        Ok(Self { text, label, split })
    }

    /// Stable key: line position plus a short content digest.
    pub fn source_id(&self, index: usize) -> String {
        let digest = Sha256::digest(self.text.as_bytes());
        format!("{index:06}-{}", hex::encode(&digest[..4]))
    }
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<RawSample>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| GdsError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| GdsError::io(path, e))?;
        let parse_err = |message: String| GdsError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let sample: RawSample =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if sample.text.is_empty() {
            return Err(parse_err("empty text".into()));
        }
        out.push(sample);
    }
    Ok(out)
}

pub fn write_jsonl(path: impl AsRef<Path>, samples: &[RawSample]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut buf, s)?;
        buf.push(b'\n');
    }
    std::fs::write(path, buf).map_err(|e| GdsError::io(path, e))
}

/// Byte-level vocabulary: special tokens occupy the lowest ids, bytes follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    n_special: u32,
}

impl Vocab {
    pub const BOS: u32 = 0;

    /// 256 bytes plus a BOS token.
    pub fn byte_level() -> Self {
        Self { n_special: 1 }
    }

    pub fn with_special_tokens(n_special: u32) -> Self {
        Self { n_special }
    }

    pub fn n_special(&self) -> u32 {
        self.n_special
    }

    pub fn vocab_size(&self) -> usize {
        256 + self.n_special as usize
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(|b| u32::from(b) + self.n_special).collect()
    }

    /// Specials are dropped; out-of-range ids are ignored.
    pub fn decode_bytes(&self, ids: &[u32]) -> Vec<u8> {
        ids.iter()
            .filter_map(|&id| id.checked_sub(self.n_special))
            .filter_map(|b| u8::try_from(b).ok())
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        String::from_utf8_lossy(&self.decode_bytes(ids)).into_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub label: Label,
    pub split: Split,
    pub source_id: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn tokenize(
    sample: &RawSample,
    source_id: impl Into<String>,
    vocab: &Vocab,
    max_seq_len: usize,
) -> Result<TokenSequence> {
    if max_seq_len == 0 {
        return Err(GdsError::invalid("max_seq_len must be at least 1"));
    }
    let mut ids = vocab.encode(&sample.text);
    ids.truncate(max_seq_len);
    Ok(TokenSequence {
        ids,
        label: sample.label,
        split: sample.split,
        source_id: source_id.into(),
    })
}

/// Tokenize a whole corpus, assigning source ids from file position.
pub fn tokenize_all(
    samples: &[RawSample],
    vocab: &Vocab,
    max_seq_len: usize,
) -> Result<Vec<TokenSequence>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| tokenize(s, s.source_id(i), vocab, max_seq_len))
        .collect()
}

/// Stratified, seeded partition into (train, eval). Each label contributes
/// `round(fraction * n_label)` samples to train, clamped so both parts keep
/// at least one sample of each label. Output order follows input order.
pub fn split_probe_set(
    samples: &[TokenSequence],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<TokenSequence>, Vec<TokenSequence>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(GdsError::invalid(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut in_train = vec![false; samples.len()];
    let mut rng = rng::stream(seed, "split_probe_set");
    for label in [Label::Member, Label::NonMember] {
        let mut idx: Vec<usize> = (0..samples.len())
            .filter(|&i| samples[i].label == label)
            .collect();
        if idx.len() < 2 {
            return Err(GdsError::invalid(format!(
                "need at least 2 samples labelled {}, found {}",
                label.as_u8(),
                idx.len()
            )));
        }
        let n_train = ((train_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        idx.shuffle(&mut rng);
        for &i in &idx[..n_train] {
            in_train[i] = true;
        }
    }
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (s, t) in samples.iter().zip(in_train) {
        if t {
            let mut s = s.clone();
            s.split = Split::ProbeTrain;
            train.push(s);
        } else {
            let mut s = s.clone();
            s.split = Split::ProbeEval;
            eval.push(s);
        }
    }
    Ok((train, eval))
}

/// CSV `source_id,label,split` for a set of sequences.
pub fn write_split_csv<W: Write>(mut w: W, seqs: &[TokenSequence]) -> std::io::Result<()> {
    writeln!(w, "source_id,label,split")?;
    for s in seqs {
        writeln!(w, "{},{},{}", s.source_id, s.label.as_u8(), s.split)?;
    }
    Ok(())
}
