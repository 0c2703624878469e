//! Eight statistics of a gradient matrix and the per-sample feature vector.
//!
//! For an `r x h` matrix `G` (rows x columns):
//!
//! | feature        | value                                                      |
//! |----------------|------------------------------------------------------------|
//! | `Abs_Mean`     | mean of `|G_ij|`                                           |
//! | `Row_Mean_Max` | max over rows of the row mean of `|G_ij|`                  |
//! | `TenP_Ratio`   | L1 mass of the top-10% entries over `‖G‖₁`                |
//! | `Sparsity`     | fraction of entries with `|G_ij| < 1e-6`                   |
//! | `Std`          | population std of `|G_ij|`                                 |
//! | `Row_Mean_Std` | population std of the row means of `|G_ij|`                |
//! | `Row_Ecc`      | mean of `|2i-(r+1)|/(r-1)` over the top-10% set (1-based)  |
//! | `Col_Ecc`      | mean of `|2j-(h+1)|/(h-1)` over the top-10% set (1-based)  |
//!
//! The top-10% set holds `ceil(r*h/10)` entries, largest `|G_ij|` first,
//! ties broken by ascending `(i, j)`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Read, Write};
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{GdsError, Result};
use crate::lora::GradientMatrix;
use crate::tinylm::{ModuleGroup, SubModule};

pub const SPARSITY_THRESHOLD: f64 = 1e-6;

/// Feature order inside each matrix's block of the vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureName {
    #[serde(rename = "Abs_Mean")]
    AbsMean,
    #[serde(rename = "Row_Mean_Max")]
    RowMeanMax,
    #[serde(rename = "TenP_Ratio")]
    TenPRatio,
    #[serde(rename = "Sparsity")]
    Sparsity,
    #[serde(rename = "Std")]
    Std,
    #[serde(rename = "Row_Mean_Std")]
    RowMeanStd,
    #[serde(rename = "Row_Ecc")]
    RowEcc,
    #[serde(rename = "Col_Ecc")]
    ColEcc,
}

/// The three groups removed together in category ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureCategory {
    Magnitude,
    Concentration,
    Position,
}

impl FeatureCategory {
    pub const ALL: [FeatureCategory; 3] = [
        FeatureCategory::Magnitude,
        FeatureCategory::Concentration,
        FeatureCategory::Position,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureCategory::Magnitude => "Magnitude",
            FeatureCategory::Concentration => "Concentration",
            FeatureCategory::Position => "Position",
        }
    }

    pub fn members(self) -> Vec<FeatureName> {
        FeatureName::ALL.into_iter().filter(|f| f.category() == self).collect()
    }
}

impl FeatureName {
    pub const ALL: [FeatureName; 8] = [
        FeatureName::AbsMean,
        FeatureName::RowMeanMax,
        FeatureName::TenPRatio,
        FeatureName::Sparsity,
        FeatureName::Std,
        FeatureName::RowMeanStd,
        FeatureName::RowEcc,
        FeatureName::ColEcc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureName::AbsMean => "Abs_Mean",
            FeatureName::RowMeanMax => "Row_Mean_Max",
            FeatureName::TenPRatio => "TenP_Ratio",
            FeatureName::Sparsity => "Sparsity",
            FeatureName::Std => "Std",
            FeatureName::RowMeanStd => "Row_Mean_Std",
            FeatureName::RowEcc => "Row_Ecc",
            FeatureName::ColEcc => "Col_Ecc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s == "10p_Ratio" {
            return Some(FeatureName::TenPRatio);
        }
        Self::ALL.into_iter().find(|f| f.as_str() == s)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn category(self) -> FeatureCategory {
        match self {
            FeatureName::AbsMean | FeatureName::RowMeanMax => FeatureCategory::Magnitude,
            FeatureName::RowEcc | FeatureName::ColEcc => FeatureCategory::Position,
            _ => FeatureCategory::Concentration,
        }
    }
}

impl fmt::Display for FeatureName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn row_abs_means(g: &ArrayView2<f64>) -> Vec<f64> {
    let h = g.ncols() as f64;
    g.rows().into_iter().map(|row| row.iter().map(|v| v.abs()).sum::<f64>() / h).collect()
}

pub fn abs_mean(g: &Array2<f64>) -> f64 {
    g.iter().map(|v| v.abs()).sum::<f64>() / g.len() as f64
}

pub fn row_mean_max(g: &Array2<f64>) -> f64 {
    row_abs_means(&g.view()).into_iter().fold(f64::NEG_INFINITY, f64::max)
}

/// Size of the top-10% set: `ceil(n / 10)`, at least 1.
pub fn top10_count(n: usize) -> usize {
    n.div_ceil(10).max(1)
}

/// Flat indices of the `top10_count(len)` largest magnitudes; ties go to
/// the smaller index (row-major order equals ascending `(i, j)`).
pub(crate) fn top10_flat(values: &[f64]) -> Vec<usize> {
    let k = top10_count(values.len()).min(values.len());
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let cmp = |a: &usize, b: &usize| {
        values[*b]
            .abs()
            .total_cmp(&values[*a].abs())
            .then(a.cmp(b))
    };
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// Zero-based `(i, j)` positions of the top-10% entries.
pub fn top10_index_set(g: &Array2<f64>) -> Vec<(usize, usize)> {
    let h = g.ncols();
    let flat: Vec<f64> = g.iter().copied().collect();
    top10_flat(&flat).into_iter().map(|f| (f / h, f % h)).collect()
}

/// Normalized offset of a zero-based index from the centre of `0..n`.
fn offset(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        (2.0 * i as f64 - (n as f64 - 1.0)).abs() / (n as f64 - 1.0)
    }
}

/// Mean row offset of the top-10% set; 0 for an all-zero matrix, which has
/// no dominant entries.
pub fn row_ecc(g: &Array2<f64>) -> f64 {
    if g.iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    let s = top10_index_set(g);
    s.iter().map(|&(i, _)| offset(i, g.nrows())).sum::<f64>() / s.len() as f64
}

pub fn col_ecc(g: &Array2<f64>) -> f64 {
    if g.iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    let s = top10_index_set(g);
    s.iter().map(|&(_, j)| offset(j, g.ncols())).sum::<f64>() / s.len() as f64
}

pub fn ten_p_ratio(g: &Array2<f64>) -> f64 {
    let total: f64 = g.iter().map(|v| v.abs()).sum();
    if total == 0.0 {
        return 0.0;
    }
    top10_index_set(g).iter().map(|&ij| g[ij].abs()).sum::<f64>() / total
}

pub fn sparsity(g: &Array2<f64>) -> f64 {
    g.iter().filter(|v| v.abs() < SPARSITY_THRESHOLD).count() as f64 / g.len() as f64
}

pub fn std(g: &Array2<f64>) -> f64 {
    let mean = abs_mean(g);
    (g.iter().map(|v| (v.abs() - mean).powi(2)).sum::<f64>() / g.len() as f64).sqrt()
}

pub fn row_mean_std(g: &Array2<f64>) -> f64 {
    let rows = row_abs_means(&g.view());
    let mu = rows.iter().sum::<f64>() / rows.len() as f64;
    (rows.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / rows.len() as f64).sqrt()
}

/// All eight statistics in [`FeatureName::ALL`] order, sharing one top-10% pass.
pub fn matrix_features(g: &Array2<f64>) -> [f64; 8] {
    let (r, h) = g.dim();
    let n = (r * h) as f64;
    let total: f64 = g.iter().map(|v| v.abs()).sum();
    let mean = total / n;
    let rows = row_abs_means(&g.view());
    let mu_rows = rows.iter().sum::<f64>() / r as f64;
    let top = top10_index_set(g);
    let k = top.len() as f64;

    let mut out = [0.0; 8];
    out[FeatureName::AbsMean.index()] = mean;
    out[FeatureName::RowMeanMax.index()] = rows.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    out[FeatureName::TenPRatio.index()] = if total == 0.0 {
        0.0
    } else {
        top.iter().map(|&ij| g[ij].abs()).sum::<f64>() / total
    };
    out[FeatureName::Sparsity.index()] =
        g.iter().filter(|v| v.abs() < SPARSITY_THRESHOLD).count() as f64 / n;
    out[FeatureName::Std.index()] =
        (g.iter().map(|v| (v.abs() - mean).powi(2)).sum::<f64>() / n).sqrt();
    out[FeatureName::RowMeanStd.index()] =
        (rows.iter().map(|m| (m - mu_rows).powi(2)).sum::<f64>() / r as f64).sqrt();
    if total > 0.0 {
        out[FeatureName::RowEcc.index()] = top.iter().map(|&(i, _)| offset(i, r)).sum::<f64>() / k;
        out[FeatureName::ColEcc.index()] = top.iter().map(|&(_, j)| offset(j, h)).sum::<f64>() / k;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FeatureKey {
    pub layer: usize,
    pub sub_module: SubModule,
    pub feature: FeatureName,
}

/// Position of every `(layer, sub-module, feature)` in a flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureLayout {
    keys: Vec<FeatureKey>,
}

impl FeatureLayout {
    /// Layer-major, then sub-module, then feature.
    pub fn full(n_layers: usize) -> Self {
        let keys = (0..n_layers)
            .flat_map(|layer| {
                SubModule::ALL.into_iter().flat_map(move |sub_module| {
                    FeatureName::ALL.into_iter().map(move |feature| FeatureKey {
                        layer,
                        sub_module,
                        feature,
                    })
                })
            })
            .collect();
        Self { keys }
    }

    pub fn from_keys(keys: Vec<FeatureKey>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = keys.iter().find(|k| !seen.insert(**k)) {
            return Err(GdsError::invalid(format!("duplicate feature key {dup:?}")));
        }
        Ok(Self { keys })
    }

    pub fn keys(&self) -> &[FeatureKey] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn index_of(&self, key: &FeatureKey) -> Option<usize> {
        self.keys.iter().position(|k| k == key)
    }

    pub fn n_layers(&self) -> usize {
        self.keys.iter().map(|k| k.layer + 1).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub layout: Arc<FeatureLayout>,
    pub source_id: String,
    pub label: Label,
}

impl FeatureVector {
    pub fn get(&self, key: &FeatureKey) -> Option<f64> {
        self.layout.index_of(key).map(|i| self.values[i])
    }

    /// Values of one feature across every matrix.
    pub fn feature_values(&self, name: FeatureName) -> Vec<f64> {
        self.layout
            .keys()
            .iter()
            .zip(&self.values)
            .filter(|(k, _)| k.feature == name)
            .map(|(_, v)| *v)
            .collect()
    }
}

/// Assemble the `l x 7 x 8` vector from one sample's gradient matrices.
pub fn extract(grads: &[GradientMatrix], source_id: &str, label: Label) -> Result<FeatureVector> {
    let mut by_key: BTreeMap<(usize, SubModule), &GradientMatrix> = BTreeMap::new();
    for g in grads {
        if by_key.insert((g.layer, g.sub_module), g).is_some() {
            return Err(GdsError::invalid(format!(
                "duplicate gradient matrix for {}",
                g.sub_module.path(g.layer)
            )));
        }
    }
    let n_layers = by_key.keys().map(|(l, _)| l + 1).max().unwrap_or(0);
    if n_layers == 0 {
        return Err(GdsError::invalid("no gradient matrices"));
    }
    let mut values = Vec::with_capacity(n_layers * 7 * 8);
    for layer in 0..n_layers {
        for sub in SubModule::ALL {
            let g = by_key
                .get(&(layer, sub))
                .ok_or_else(|| GdsError::invalid(format!("missing gradient matrix {}", sub.path(layer))))?;
            values.extend_from_slice(&matrix_features(&g.values));
        }
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(GdsError::NonFinite {
            context: format!("features of {source_id}"),
        });
    }
    Ok(FeatureVector {
        values,
        layout: Arc::new(FeatureLayout::full(n_layers)),
        source_id: source_id.to_string(),
        label,
    })
}

/// Dimensions selected for removal in an ablation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FeatureMask {
    Features(Vec<FeatureName>),
    SubModules(Vec<SubModule>),
    Groups(Vec<ModuleGroup>),
}

impl FeatureMask {
    pub fn removes(&self, key: &FeatureKey) -> bool {
        match self {
            FeatureMask::Features(f) => f.contains(&key.feature),
            FeatureMask::SubModules(s) => s.contains(&key.sub_module),
            FeatureMask::Groups(g) => g.contains(&key.sub_module.group()),
        }
    }
}

/// Drop masked dimensions from every vector, keeping a consistent layout.
pub fn ablate_features(vectors: &[FeatureVector], mask: &FeatureMask) -> Result<Vec<FeatureVector>> {
    let Some(first) = vectors.first() else {
        return Ok(Vec::new());
    };
    let layout = first.layout.clone();
    if vectors.iter().any(|v| v.layout != layout) {
        return Err(GdsError::invalid("feature vectors disagree on layout"));
    }
    let keep: Vec<usize> = (0..layout.len()).filter(|&i| !mask.removes(&layout.keys()[i])).collect();
    if keep.is_empty() {
        return Err(GdsError::invalid("ablation mask removes every dimension"));
    }
    let new_layout = Arc::new(FeatureLayout {
        keys: keep.iter().map(|&i| layout.keys()[i]).collect(),
    });
    Ok(vectors
        .iter()
        .map(|v| FeatureVector {
            values: keep.iter().map(|&i| v.values[i]).collect(),
            layout: new_layout.clone(),
            source_id: v.source_id.clone(),
            label: v.label,
        })
        .collect())
}

const CSV_HEADER: &str = "source_id,label,layer,sub_module,feature_name,value";

/// Long-format cache: one row per `(sample, layer, sub-module, feature)`.
pub fn write_feature_csv<W: Write>(mut w: W, vectors: &[FeatureVector]) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for v in vectors {
        for (k, x) in v.layout.keys().iter().zip(&v.values) {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                v.source_id,
                v.label.as_u8(),
                k.layer,
                k.sub_module,
                k.feature,
                x
            )?;
        }
    }
    Ok(())
}

pub fn read_feature_csv<R: BufRead>(r: R) -> Result<Vec<FeatureVector>> {
    let bad = |line: usize, msg: String| GdsError::invalid(format!("feature csv line {line}: {msg}"));
    let mut lines = r.lines();
    match lines.next() {
        Some(Ok(h)) if h == CSV_HEADER => {}
        _ => return Err(bad(1, "missing header".into())),
    }
    let mut rows: Vec<(String, Label, Vec<FeatureKey>, Vec<f64>)> = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line.map_err(|e| bad(line_no, e.to_string()))?;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(line_no, format!("expected 6 fields, found {}", f.len())));
        }
        let label = f[1]
            .parse::<u8>()
            .ok()
            .and_then(|l| Label::try_from(l).ok())
            .ok_or_else(|| bad(line_no, "bad label".into()))?;
        let key = FeatureKey {
            layer: f[2].parse().map_err(|_| bad(line_no, "bad layer".into()))?,
            sub_module: SubModule::parse(f[3]).ok_or_else(|| bad(line_no, "bad sub_module".into()))?,
            feature: FeatureName::parse(f[4]).ok_or_else(|| bad(line_no, "bad feature_name".into()))?,
        };
        let value: f64 = f[5].parse().map_err(|_| bad(line_no, "bad value".into()))?;
        match rows.last_mut() {
            Some(row) if row.0 == f[0] => {
                row.2.push(key);
                row.3.push(value);
            }
            _ => rows.push((f[0].to_string(), label, vec![key], vec![value])),
        }
    }
    collect_rows(rows)
}

fn collect_rows(rows: Vec<(String, Label, Vec<FeatureKey>, Vec<f64>)>) -> Result<Vec<FeatureVector>> {
    let mut shared: Option<Arc<FeatureLayout>> = None;
    rows.into_iter()
        .map(|(source_id, label, keys, values)| {
            let layout = match &shared {
                Some(l) if l.keys == keys => l.clone(),
                _ => {
                    let l = Arc::new(FeatureLayout::from_keys(keys)?);
                    shared = Some(l.clone());
                    l
                }
            };
            Ok(FeatureVector {
                values,
                layout,
                source_id,
                label,
            })
        })
        .collect()
}

const BIN_MAGIC: &[u8; 8] = b"GDSFEAT1";

/// Compact cache: magic, layout, then `(source_id, label, values)` rows.
pub fn write_feature_bin<W: Write>(mut w: W, vectors: &[FeatureVector]) -> std::io::Result<()> {
    w.write_all(BIN_MAGIC)?;
    let layout = vectors.first().map(|v| v.layout.keys().to_vec()).unwrap_or_default();
    w.write_all(&(layout.len() as u32).to_le_bytes())?;
    for k in &layout {
        w.write_all(&(k.layer as u32).to_le_bytes())?;
        w.write_all(&[k.sub_module.index() as u8, k.feature.index() as u8])?;
    }
    w.write_all(&(vectors.len() as u64).to_le_bytes())?;
    for v in vectors {
        assert_eq!(v.layout.keys(), &layout[..], "mixed layouts in one cache");
        let id = v.source_id.as_bytes();
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&[v.label.as_u8()])?;
        for x in &v.values {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_feature_bin<R: Read>(mut r: R) -> Result<Vec<FeatureVector>> {
    let bad = |msg: &str| GdsError::invalid(format!("feature cache: {msg}"));
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| bad(&e.to_string()))?;
    let mut cur = bytes.as_slice();
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(bad("truncated"));
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    if take(8)? != BIN_MAGIC {
        return Err(bad("bad magic"));
    }
    let n_keys = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let mut keys = Vec::with_capacity(n_keys);
    for _ in 0..n_keys {
        let layer = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let ids = take(2)?;
        let sub_module = *SubModule::ALL.get(ids[0] as usize).ok_or_else(|| bad("bad sub_module"))?;
        let feature = *FeatureName::ALL.get(ids[1] as usize).ok_or_else(|| bad("bad feature"))?;
        keys.push(FeatureKey { layer, sub_module, feature });
    }
    let layout = Arc::new(FeatureLayout::from_keys(keys)?);
    let n_rows = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let mut out = Vec::with_capacity(n_rows);
    for _ in 0..n_rows {
        let id_len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let source_id = String::from_utf8(take(id_len)?.to_vec()).map_err(|_| bad("source_id not utf-8"))?;
        let label = Label::try_from(take(1)?[0]).map_err(|e| bad(&e))?;
        let values = take(8 * n_keys)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push(FeatureVector {
            values,
            layout: layout.clone(),
            source_id,
            label,
        });
    }
    if !cur.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}
