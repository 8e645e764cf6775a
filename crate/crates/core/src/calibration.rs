//! Mean-centring calibration and the centred cosine similarity.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_from;
use crate::store::{decode_payload, encode_payload, EmbeddingMatrix, StoreError};

/// Norm below which a centred embedding is treated as degenerate.
pub const ZERO_NORM_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("calibration population of {0} is too small (need at least 2)")]
    PopulationTooSmall(usize),
    #[error("unknown utterance id {0:?}")]
    UnknownId(String),
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("embedding has zero norm after centring")]
    ZeroNorm,
    #[error("need at least 2 rows, found {0}")]
    TooFewRows(usize),
    #[error("need at least one pair")]
    NoPairs,
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationMode {
    #[default]
    Centered,
    Raw,
}

impl std::fmt::Display for CalibrationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CalibrationMode::Centered => "centered",
            CalibrationMode::Raw => "raw",
        })
    }
}

impl std::str::FromStr for CalibrationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "centered" => Ok(CalibrationMode::Centered),
            "raw" => Ok(CalibrationMode::Raw),
            other => Err(format!("unknown calibration mode {other:?}")),
        }
    }
}

/// Mean embedding of one dataset partition for one (model, layer).
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationVector {
    pub model_id: String,
    pub layer_id: u32,
    pub dataset_id: String,
    pub mu: Vec<f64>,
    pub population: usize,
}

impl CalibrationVector {
    pub fn with_dataset(mut self, dataset_id: impl Into<String>) -> Self {
        self.dataset_id = dataset_id.into();
        self
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `<root>/<model>/<dataset>/L<layer>.mu`
    pub fn path_under(&self, root: &Path) -> PathBuf {
        root.join(&self.model_id)
            .join(&self.dataset_id)
            .join(format!("L{}.mu", self.layer_id))
    }

    /// Persists mu as a single-row `.aemb` payload (rounded to f32).
    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), CalibrationError> {
        let path = path.as_ref();
        let io = |source| StoreError::Io {
            path: path.display().to_string(),
            source,
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io)?;
        }
        let row: Vec<f32> = self.mu.iter().map(|&v| v as f32).collect();
        fs::write(path, encode_payload(row.len(), &row)).map_err(io)?;
        Ok(())
    }

    pub fn read(
        path: impl AsRef<Path>,
        model_id: &str,
        layer_id: u32,
        dataset_id: &str,
    ) -> Result<Self, CalibrationError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| StoreError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let (dim, values) = decode_payload(&bytes, &path.display().to_string())?;
        if values.len() != dim {
            return Err(StoreError::Shape(format!("calibration file holds {} rows", values.len() / dim)).into());
        }
        Ok(Self {
            model_id: model_id.to_string(),
            layer_id,
            dataset_id: dataset_id.to_string(),
            mu: values.into_iter().map(f64::from).collect(),
            // Not recorded in the file format.
            population: 0,
        })
    }
}

/// Mean of the rows named by `subset`, accumulated in f64.
pub fn compute_mu<I, S>(matrix: &EmbeddingMatrix, subset: I) -> Result<CalibrationVector, CalibrationError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut acc = vec![0.0f64; matrix.dim()];
    let mut n = 0usize;
    for id in subset {
        let id = id.as_ref();
        let row = matrix
            .lookup(id)
            .map_err(|_| CalibrationError::UnknownId(id.to_string()))?;
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += f64::from(v);
        }
        n += 1;
    }
    if n < 2 {
        return Err(CalibrationError::PopulationTooSmall(n));
    }
    let inv = n as f64;
    Ok(CalibrationVector {
        model_id: matrix.model_id.clone(),
        layer_id: matrix.layer_id,
        dataset_id: String::new(),
        mu: acc.into_iter().map(|s| s / inv).collect(),
        population: n,
    })
}

/// A similarity value clamped to [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct SimilarityScore(f64);

impl SimilarityScore {
    pub fn new(value: f64) -> Self {
        SimilarityScore(value.clamp(-1.0, 1.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

fn centred_cosine(a: &[f32], b: &[f32], mu: Option<&[f64]>) -> Result<SimilarityScore, CalibrationError> {
    if a.len() != b.len() {
        return Err(CalibrationError::DimMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if let Some(mu) = mu {
        if mu.len() != a.len() {
            return Err(CalibrationError::DimMismatch {
                left: a.len(),
                right: mu.len(),
            });
        }
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for d in 0..a.len() {
        let m = mu.map_or(0.0, |m| m[d]);
        let x = f64::from(a[d]) - m;
        let y = f64::from(b[d]) - m;
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na.sqrt() <= ZERO_NORM_EPS || nb.sqrt() <= ZERO_NORM_EPS {
        return Err(CalibrationError::ZeroNorm);
    }
    Ok(SimilarityScore::new(dot / (na * nb).sqrt()))
}

/// Cosine similarity of two embeddings after subtracting `mu`.
pub fn emo_sim(e_i: &[f32], e_j: &[f32], mu: &CalibrationVector) -> Result<SimilarityScore, CalibrationError> {
    centred_cosine(e_i, e_j, Some(&mu.mu))
}

/// Uncalibrated cosine similarity.
pub fn cosine(e_i: &[f32], e_j: &[f32]) -> Result<SimilarityScore, CalibrationError> {
    centred_cosine(e_i, e_j, None)
}

/// Similarity over one matrix, centred or raw.
#[derive(Debug, Clone)]
pub struct SimilaritySpace<'a> {
    matrix: &'a EmbeddingMatrix,
    mu: Option<CalibrationVector>,
}

impl<'a> SimilaritySpace<'a> {
    pub fn centered(matrix: &'a EmbeddingMatrix, mu: CalibrationVector) -> Self {
        Self { matrix, mu: Some(mu) }
    }

    pub fn raw(matrix: &'a EmbeddingMatrix) -> Self {
        Self { matrix, mu: None }
    }

    pub fn matrix(&self) -> &EmbeddingMatrix {
        self.matrix
    }

    pub fn calibration(&self) -> Option<&CalibrationVector> {
        self.mu.as_ref()
    }

    pub fn mode(&self) -> CalibrationMode {
        if self.mu.is_some() {
            CalibrationMode::Centered
        } else {
            CalibrationMode::Raw
        }
    }

    pub fn similarity_of(&self, a: &str, b: &str) -> Result<SimilarityScore, CalibrationError> {
        let lookup = |id: &str| {
            self.matrix
                .lookup(id)
                .map_err(|_| CalibrationError::UnknownId(id.to_string()))
        };
        centred_cosine(lookup(a)?, lookup(b)?, self.mu.as_ref().map(|m| m.mu.as_slice()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub min: f64,
    pub p5: f64,
    pub median: f64,
    pub p95: f64,
    pub max: f64,
    pub mean: f64,
    pub n: usize,
}

impl DistributionSummary {
    /// Linear-interpolation percentiles over `values`.
    pub fn from_values(values: &mut [f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        values.sort_by(f64::total_cmp);
        let n = values.len();
        let pct = |q: f64| {
            let pos = q * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
        };
        Some(Self {
            min: values[0],
            p5: pct(0.05),
            median: pct(0.5),
            p95: pct(0.95),
            max: values[n - 1],
            mean: values.iter().sum::<f64>() / n as f64,
            n,
        })
    }
}

/// Maps a linear index in `0..n(n-1)/2` to the pair `(i, j)`, `i < j`.
fn decode_pair(k: u64, n: u64) -> (usize, usize) {
    // Pairs starting before row i: i(2n - i - 1)/2.
    let before = |i: u64| i * (2 * n - i - 1) / 2;
    let (mut lo, mut hi) = (0u64, n - 1);
    while lo + 1 < hi {
        let mid = (lo + hi) / 2;
        if before(mid) <= k {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let i = lo;
    let j = i + 1 + (k - before(i));
    (i as usize, j as usize)
}

/// Similarity distribution over distinct random row pairs.
///
/// Draws `min(n_pairs, rows(rows-1)/2)` distinct unordered pairs from the
/// seeded generator and summarises raw cosine (no `mu`) or centred similarity.
pub fn anisotropy_report(
    matrix: &EmbeddingMatrix,
    n_pairs: usize,
    seed: u64,
    mu: Option<&CalibrationVector>,
) -> Result<DistributionSummary, CalibrationError> {
    let rows = matrix.rows();
    if rows < 2 {
        return Err(CalibrationError::TooFewRows(rows));
    }
    if n_pairs == 0 {
        return Err(CalibrationError::NoPairs);
    }
    let total = (rows as u64) * (rows as u64 - 1) / 2;
    let take = (n_pairs as u64).min(total) as usize;
    let mut rng = rng_from(seed);
    let mut picks: Vec<u64> = index::sample(&mut rng, total as usize, take)
        .into_iter()
        .map(|k| k as u64)
        .collect();
    picks.sort_unstable();
    let mut sims = picks
        .into_iter()
        .map(|k| {
            let (i, j) = decode_pair(k, rows as u64);
            centred_cosine(matrix.row(i), matrix.row(j), mu.map(|m| m.mu.as_slice())).map(SimilarityScore::value)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DistributionSummary::from_values(&mut sims).expect("at least one pair"))
}
