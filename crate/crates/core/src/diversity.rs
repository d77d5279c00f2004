//! Harmonic diversity entropy scoring of sample sets.
//!
//! A sample set is scored on two axes:
//!
//! * feature entropy: every embedding dimension is histogrammed into `k`
//!   equal-width bins over its observed range and the Shannon entropy of the
//!   bin frequencies is averaged over dimensions;
//! * label entropy: Shannon entropy of the class frequencies of all boxes.
//!
//! The set's score is the harmonic mean of the two (zero whenever either is
//! zero), and scores are min-max normalized across all sets being compared.
//! All entropies are in nats.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bin count used when the caller does not choose one.
pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Error)]
pub enum DiversityError {
    #[error("bin count must be at least 1")]
    InvalidBinCount,
    #[error("feature set is empty")]
    EmptyFeatureSet,
    #[error("non-finite feature value in vector {index}")]
    NonFiniteFeature { index: usize },
    #[error("dimension mismatch: expected {expected}, found {found}{}", .id.as_ref().map(|i| format!(" for `{i}`")).unwrap_or_default())]
    DimensionMismatch {
        expected: usize,
        found: usize,
        id: Option<String>,
    },
    #[error("label set is empty")]
    EmptyLabelSet,
    #[error("entropy must be nonnegative, got F = {feature}, L = {label}")]
    NegativeEntropy { feature: f64, label: f64 },
    #[error("duplicate embedding id `{0}`")]
    DuplicateId(String),
    #[error("malformed embedding file at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for FeatureVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

/// Nonempty collection of same-dimension, finite embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    vectors: Vec<FeatureVector>,
    dim: usize,
}

impl FeatureSet {
    pub fn new(vectors: Vec<FeatureVector>) -> Result<Self, DiversityError> {
        let dim = vectors.first().ok_or(DiversityError::EmptyFeatureSet)?.dim();
        if dim == 0 {
            return Err(DiversityError::DimensionMismatch { expected: 1, found: 0, id: None });
        }
        for (index, v) in vectors.iter().enumerate() {
            if v.dim() != dim {
                return Err(DiversityError::DimensionMismatch { expected: dim, found: v.dim(), id: None });
            }
            if v.values().iter().any(|x| !x.is_finite()) {
                return Err(DiversityError::NonFiniteFeature { index });
            }
        }
        Ok(Self { vectors, dim })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vectors(&self) -> &[FeatureVector] {
        &self.vectors
    }
}

/// Class names of every ground-truth box in a sample set.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSet(Vec<String>);

impl LabelSet {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Self {
        Self(labels.into_iter().map(Into::into).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.0
    }

    pub fn push(&mut self, label: impl Into<String>) {
        self.0.push(label.into());
    }
}

/// Equal-width histogram of one feature dimension.
///
/// When every value is identical the histogram has a single bin whose two
/// edges coincide.
#[derive(Debug, Clone, PartialEq)]
pub struct BinHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl BinHistogram {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn entropy(&self) -> f64 {
        entropy_of_counts(&self.counts)
    }

    fn build(values: &[f64], k: usize) -> Self {
        let (min, max) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if min == max {
            return Self { edges: vec![min, max], counts: vec![values.len()] };
        }
        let width = (max - min) / k as f64;
        let mut edges: Vec<f64> = (0..=k).map(|i| min + width * i as f64).collect();
        edges[k] = max;
        let mut counts = vec![0usize; k];
        for &v in values {
            counts[bin_index(&edges, v, min, width)] += 1;
        }
        Self { edges, counts }
    }
}

// Bins are half-open `[e_i, e_{i+1})` except the last, which includes `max`.
fn bin_index(edges: &[f64], v: f64, min: f64, width: f64) -> usize {
    let k = edges.len() - 1;
    let mut idx = (((v - min) / width).floor() as usize).min(k - 1);
    while idx + 1 < k && v >= edges[idx + 1] {
        idx += 1;
    }
    while idx > 0 && v < edges[idx] {
        idx -= 1;
    }
    idx
}

/// Shannon entropy (nats) of a frequency table; empty cells contribute 0.
fn entropy_of_counts(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    // a single occupied bin gives -1 * ln 1 = -0.0
    h.max(0.0)
}

/// Per-dimension histograms of `set` with `k` bins each.
pub fn bin_features(set: &FeatureSet, k: usize) -> Result<Vec<BinHistogram>, DiversityError> {
    if k == 0 {
        return Err(DiversityError::InvalidBinCount);
    }
    let mut column = Vec::with_capacity(set.len());
    Ok((0..set.dim())
        .map(|d| {
            column.clear();
            column.extend(set.vectors().iter().map(|v| v.values()[d]));
            BinHistogram::build(&column, k)
        })
        .collect())
}

/// Binned feature entropy, averaged over dimensions. Lies in `[0, ln k]`.
pub fn feature_entropy(set: &FeatureSet, k: usize) -> Result<f64, DiversityError> {
    let hists = bin_features(set, k)?;
    let sum: f64 = hists.iter().map(BinHistogram::entropy).sum();
    Ok(sum / hists.len() as f64)
}

/// Entropy of the label distribution. Lies in `[0, ln c]` for `c` distinct labels.
pub fn label_entropy(labels: &LabelSet) -> Result<f64, DiversityError> {
    if labels.is_empty() {
        return Err(DiversityError::EmptyLabelSet);
    }
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels.labels() {
        *freq.entry(l.as_str()).or_default() += 1;
    }
    let counts: Vec<usize> = freq.into_values().collect();
    Ok(entropy_of_counts(&counts))
}

/// Harmonic mean `2FL / (F + L)`, defined as 0 when either entropy is 0.
pub fn harmonic_diversity(feature: f64, label: f64) -> Result<f64, DiversityError> {
    if feature < 0.0 || label < 0.0 || feature.is_nan() || label.is_nan() {
        return Err(DiversityError::NegativeEntropy { feature, label });
    }
    if feature == 0.0 || label == 0.0 {
        return Ok(0.0);
    }
    let h = 2.0 * feature * label / (feature + label);
    // rounding can push the quotient one ulp outside [min, max]
    Ok(h.clamp(feature.min(label), feature.max(label)))
}

/// Min-max normalization onto `[0, 1]`. A constant list maps to all zeros.
pub fn normalize_scores(raw: &[f64]) -> Vec<f64> {
    let Some(&first) = raw.first() else {
        return Vec::new();
    };
    let (min, max) = raw.iter().fold((first, first), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if max == min {
        return vec![0.0; raw.len()];
    }
    let span = max - min;
    raw.iter().map(|&h| ((h - min) / span).clamp(0.0, 1.0)).collect()
}

/// Entropies and scores of one sample set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HadesScore {
    pub feature_entropy: f64,
    pub label_entropy: f64,
    pub harmonic: f64,
    /// `None` until the score has been normalized against its peers.
    pub normalized: Option<f64>,
}

impl HadesScore {
    /// Scores one set without normalization. An empty label set scores 0.
    pub fn compute(features: &FeatureSet, labels: &LabelSet, k: usize) -> Result<Self, DiversityError> {
        let f = feature_entropy(features, k)?;
        let l = if labels.is_empty() { 0.0 } else { label_entropy(labels)? };
        Ok(Self { feature_entropy: f, label_entropy: l, harmonic: harmonic_diversity(f, l)?, normalized: None })
    }
}

/// Scores every set, then normalizes the harmonic scores across the list.
pub fn score_sample_sets(sets: &[(FeatureSet, LabelSet)], k: usize) -> Result<Vec<HadesScore>, DiversityError> {
    let mut scores = sets
        .iter()
        .map(|(f, l)| HadesScore::compute(f, l, k))
        .collect::<Result<Vec<_>, _>>()?;
    let raw: Vec<f64> = scores.iter().map(|s| s.harmonic).collect();
    for (s, n) in scores.iter_mut().zip(normalize_scores(&raw)) {
        s.normalized = Some(n);
    }
    Ok(scores)
}

/// Sample id to embedding, in id order.
pub type EmbeddingTable = BTreeMap<String, FeatureVector>;

/// Parses the embedding text format: a `dim <d>` header, then one
/// `<sample_id> v1 .. vd` row per sample.
pub fn parse_embeddings(text: &str) -> Result<EmbeddingTable, DiversityError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| DiversityError::Malformed { line: 1, reason: "missing `dim <d>` header".into() })?;
    let dim = match header.split_whitespace().collect::<Vec<_>>().as_slice() {
        ["dim", d] => d.parse::<usize>().ok().filter(|&d| d >= 1),
        _ => None,
    }
    .ok_or_else(|| DiversityError::Malformed { line: 1, reason: format!("bad header `{header}`") })?;

    let mut table = EmbeddingTable::new();
    for (idx, line) in lines {
        let mut fields = line.split_whitespace();
        let id = fields.next().unwrap_or_default().to_string();
        let values = fields
            .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| DiversityError::Malformed {
                line: idx + 1,
                reason: format!("non-numeric value in row `{id}`"),
            })?;
        if values.len() != dim {
            return Err(DiversityError::DimensionMismatch { expected: dim, found: values.len(), id: Some(id) });
        }
        if table.contains_key(&id) {
            return Err(DiversityError::DuplicateId(id));
        }
        table.insert(id, FeatureVector(values));
    }
    Ok(table)
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable, DiversityError> {
    let text = fs::read_to_string(path)
        .map_err(|source| DiversityError::Io { path: path.display().to_string(), source })?;
    parse_embeddings(&text)
}

/// Writes the embedding text format. Every vector must share one dimension.
pub fn serialize_embeddings(table: &EmbeddingTable) -> Result<String, DiversityError> {
    let dim = table.values().next().map_or(1, FeatureVector::dim);
    let mut out = format!("dim {dim}\n");
    for (id, v) in table {
        if v.dim() != dim {
            return Err(DiversityError::DimensionMismatch { expected: dim, found: v.dim(), id: Some(id.clone()) });
        }
        out.push_str(id);
        for x in v.values() {
            out.push(' ');
            out.push_str(&x.to_string());
        }
        out.push('\n');
    }
    Ok(out)
}
