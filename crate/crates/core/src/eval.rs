//! Triplet accuracy, monotonicity, run aggregation and layer sweeps.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{compute_mu, CalibrationError, CalibrationMode, SimilaritySpace};
use crate::corpus::CorpusManifest;
use crate::sampler::{
    instances_digest, sample_categorical, sample_monotonic_pairs, sample_shift, PairInstance, PairSpec, SamplerError,
    ScenarioSpec, ShiftSpec, TripletInstance,
};
use crate::stats::{spearman_rho, StatsError};
use crate::store::EmbeddingMatrix;

/// Tolerance for the stored-vs-recomputed aggregate check.
pub const AGGREGATE_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("need at least 2 runs to aggregate, found {0}")]
    TooFewRuns(usize),
    #[error("no instances to evaluate")]
    NoInstances,
    #[error("layer L{0} is not available")]
    MissingLayer(u32),
    #[error("no layers requested")]
    NoLayers,
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

/// Pairwise similarity over utterance ids.
pub trait Similarity: Sync {
    fn similarity(&self, a: &str, b: &str) -> Result<f64, EvalError>;
}

impl Similarity for SimilaritySpace<'_> {
    fn similarity(&self, a: &str, b: &str) -> Result<f64, EvalError> {
        Ok(self.similarity_of(a, b)?.value())
    }
}

impl<F> Similarity for F
where
    F: Fn(&str, &str) -> f64 + Sync,
{
    fn similarity(&self, a: &str, b: &str) -> Result<f64, EvalError> {
        Ok(self(a, b))
    }
}

/// Fraction of triplets with sim(ref, pos) > sim(ref, neg). Ties are wrong.
pub fn triplet_accuracy(instances: &[TripletInstance], sim: &dyn Similarity) -> Result<f64, EvalError> {
    if instances.is_empty() {
        return Err(EvalError::NoInstances);
    }
    let correct = instances
        .par_iter()
        .map(|t| Ok(sim.similarity(&t.ref_id, &t.pos_id)? > sim.similarity(&t.ref_id, &t.neg_id)?))
        .try_fold(
            || 0usize,
            |acc, hit: Result<bool, EvalError>| hit.map(|h| acc + usize::from(h)),
        )
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(correct as f64 / instances.len() as f64)
}

/// Signed Spearman rho between pair similarity and score difference.
/// A metric that tracks the dimension gives a negative value.
pub fn monotonicity(pairs: &[PairInstance], sim: &dyn Similarity) -> Result<f64, EvalError> {
    let sims = pairs
        .par_iter()
        .map(|p| sim.similarity(&p.i_id, &p.j_id))
        .collect::<Result<Vec<f64>, _>>()?;
    let diffs: Vec<f64> = pairs.iter().map(|p| p.score_diff.as_f64()).collect();
    Ok(spearman_rho(&sims, &diffs)?)
}

/// Mean and sample standard deviation (n - 1 denominator).
pub fn aggregate_runs(values: &[f64]) -> Result<(f64, f64), EvalError> {
    if values.len() < 2 {
        return Err(EvalError::TooFewRuns(values.len()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    Ok((mean, (ss / (n - 1.0)).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Categorical,
    Shift,
    Monotonicity,
    HumanAlignment,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Categorical => "categorical",
            TaskKind::Shift => "shift",
            TaskKind::Monotonicity => "monotonicity",
            TaskKind::HumanAlignment => "human_alignment",
        }
    }

    /// Whether results are fractions rendered as percentages.
    pub fn is_accuracy(self) -> bool {
        self != TaskKind::Monotonicity
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "categorical" => Ok(TaskKind::Categorical),
            "shift" => Ok(TaskKind::Shift),
            "monotonicity" => Ok(TaskKind::Monotonicity),
            "human_alignment" => Ok(TaskKind::HumanAlignment),
            other => Err(format!("unknown task {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task: TaskKind,
    /// Scenario or dimension tag.
    pub tag: String,
    pub dataset_id: String,
    pub model_id: String,
    pub layer_id: u32,
    pub per_run_values: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    pub n_runs: usize,
    pub seed: u64,
    pub mu_population: usize,
    pub calibration: CalibrationMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// Identifies where a result came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResultMeta {
    pub dataset_id: String,
    pub model_id: String,
    pub layer_id: u32,
    pub seed: u64,
    pub mu_population: usize,
    pub calibration: CalibrationMode,
}

impl EvalResult {
    /// Aggregates per-run values; needs at least two runs.
    pub fn from_runs(
        task: TaskKind,
        tag: impl Into<String>,
        meta: ResultMeta,
        per_run_values: Vec<f64>,
    ) -> Result<Self, EvalError> {
        let (mean, sd) = aggregate_runs(&per_run_values)?;
        Ok(Self::build(task, tag.into(), meta, per_run_values, mean, sd))
    }

    /// A one-shot measurement (no spread), such as human alignment.
    pub fn single(task: TaskKind, tag: impl Into<String>, meta: ResultMeta, value: f64) -> Self {
        Self::build(task, tag.into(), meta, vec![value], value, 0.0)
    }

    fn build(task: TaskKind, tag: String, meta: ResultMeta, per_run_values: Vec<f64>, mean: f64, sd: f64) -> Self {
        Self {
            task,
            tag,
            dataset_id: meta.dataset_id,
            model_id: meta.model_id,
            layer_id: meta.layer_id,
            n_runs: per_run_values.len(),
            per_run_values,
            mean,
            sd,
            seed: meta.seed,
            mu_population: meta.mu_population,
            calibration: meta.calibration,
            p_value: None,
            instance_digest: None,
            config_hash: None,
        }
    }

    /// Recomputes the aggregate from `per_run_values` and compares.
    pub fn check(&self) -> Result<(), EvalError> {
        if self.n_runs != self.per_run_values.len() {
            return Err(EvalError::Invariant(format!(
                "n_runs {} but {} values",
                self.n_runs,
                self.per_run_values.len()
            )));
        }
        let (mean, sd) = match self.per_run_values.as_slice() {
            [v] => (*v, 0.0),
            values => aggregate_runs(values)?,
        };
        if (mean - self.mean).abs() > AGGREGATE_TOL || (sd - self.sd).abs() > AGGREGATE_TOL {
            return Err(EvalError::Invariant(format!(
                "stored {}±{} but values give {mean}±{sd}",
                self.mean, self.sd
            )));
        }
        Ok(())
    }
}

/// Where the centring mean is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MuScope {
    /// Every record of the filtered dataset partition.
    #[default]
    Partition,
    /// Only the utterances that occur in the sampled instances.
    Sampled,
}

impl std::fmt::Display for MuScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MuScope::Partition => "partition",
            MuScope::Sampled => "sampled",
        })
    }
}

impl std::str::FromStr for MuScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "partition" => Ok(MuScope::Partition),
            "sampled" => Ok(MuScope::Sampled),
            other => Err(format!("unknown mu scope {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalTask {
    Categorical(ScenarioSpec),
    Shift(ShiftSpec),
    Monotonicity(PairSpec),
}

impl EvalTask {
    pub fn kind(&self) -> TaskKind {
        match self {
            EvalTask::Categorical(_) => TaskKind::Categorical,
            EvalTask::Shift(_) => TaskKind::Shift,
            EvalTask::Monotonicity(_) => TaskKind::Monotonicity,
        }
    }

    pub fn tag(&self) -> String {
        match self {
            EvalTask::Categorical(s) => s.kind.as_str().to_string(),
            EvalTask::Shift(s) => s.dimension.as_str().to_string(),
            EvalTask::Monotonicity(s) => s.dimension.as_str().to_string(),
        }
    }

    pub fn sample(&self, manifest: &CorpusManifest, seed: u64, runs: u32) -> Result<Instances, EvalError> {
        Ok(match self {
            EvalTask::Categorical(s) => Instances::Triplets(sample_categorical(manifest, s, seed, runs)?),
            EvalTask::Shift(s) => Instances::Triplets(sample_shift(manifest, s, seed, runs)?),
            EvalTask::Monotonicity(s) => Instances::Pairs(sample_monotonic_pairs(manifest, s, seed, runs)?),
        })
    }
}

/// Sampled instances, one list per run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Instances {
    Triplets(Vec<Vec<TripletInstance>>),
    Pairs(Vec<Vec<PairInstance>>),
}

impl Instances {
    pub fn runs(&self) -> usize {
        match self {
            Instances::Triplets(r) => r.len(),
            Instances::Pairs(r) => r.len(),
        }
    }

    /// SHA-256 of the persisted instance file.
    pub fn digest(&self) -> String {
        match self {
            Instances::Triplets(r) => instances_digest(&r.concat()),
            Instances::Pairs(r) => instances_digest(&r.concat()),
        }
    }

    /// Persisted JSONL bytes.
    pub fn encode(&self) -> Vec<u8> {
        match self {
            Instances::Triplets(r) => crate::sampler::encode_lines(&r.concat()),
            Instances::Pairs(r) => crate::sampler::encode_lines(&r.concat()),
        }
    }

    /// Reads instances persisted by [`Instances::encode`], regrouped by run.
    pub fn decode(kind: TaskKind, reader: impl std::io::BufRead) -> Result<Self, EvalError> {
        fn group<T>(items: Vec<T>, run: impl Fn(&T) -> u32) -> Result<Vec<Vec<T>>, EvalError> {
            let mut runs: Vec<Vec<T>> = Vec::new();
            for item in items {
                let r = run(&item) as usize;
                if r >= runs.len() {
                    runs.resize_with(r + 1, Vec::new);
                }
                runs[r].push(item);
            }
            if runs.is_empty() || runs.iter().any(Vec::is_empty) {
                return Err(EvalError::NoInstances);
            }
            Ok(runs)
        }
        Ok(match kind {
            TaskKind::Categorical | TaskKind::Shift => {
                Instances::Triplets(group(crate::sampler::decode_lines(reader)?, |t: &TripletInstance| {
                    t.run_index
                })?)
            }
            TaskKind::Monotonicity => {
                Instances::Pairs(group(crate::sampler::decode_lines(reader)?, |p: &PairInstance| {
                    p.run_index
                })?)
            }
            TaskKind::HumanAlignment => return Err(EvalError::NoInstances),
        })
    }

    /// Every utterance id referenced, sorted.
    pub fn ids(&self) -> BTreeSet<&str> {
        let mut ids = BTreeSet::new();
        match self {
            Instances::Triplets(runs) => {
                for t in runs.iter().flatten() {
                    ids.extend([t.ref_id.as_str(), t.pos_id.as_str(), t.neg_id.as_str()]);
                }
            }
            Instances::Pairs(runs) => {
                for p in runs.iter().flatten() {
                    ids.extend([p.i_id.as_str(), p.j_id.as_str()]);
                }
            }
        }
        ids
    }

    /// One metric value per run, in run order.
    pub fn evaluate(&self, sim: &dyn Similarity) -> Result<Vec<f64>, EvalError> {
        match self {
            Instances::Triplets(runs) => runs.iter().map(|r| triplet_accuracy(r, sim)).collect(),
            Instances::Pairs(runs) => runs.iter().map(|r| monotonicity(r, sim)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalSetup {
    pub seed: u64,
    pub runs: u32,
    pub calibration: CalibrationMode,
    pub mu_scope: MuScope,
}

impl Default for EvalSetup {
    fn default() -> Self {
        Self {
            seed: 0,
            runs: crate::sampler::DEFAULT_RUNS,
            calibration: CalibrationMode::Centered,
            mu_scope: MuScope::Partition,
        }
    }
}

/// Builds the similarity space for one matrix under the setup's policy.
pub fn similarity_space<'a>(
    matrix: &'a EmbeddingMatrix,
    manifest: &CorpusManifest,
    instances: &Instances,
    setup: &EvalSetup,
) -> Result<SimilaritySpace<'a>, EvalError> {
    Ok(match setup.calibration {
        CalibrationMode::Raw => SimilaritySpace::raw(matrix),
        CalibrationMode::Centered => {
            let mu = match setup.mu_scope {
                MuScope::Partition => compute_mu(matrix, manifest.ids())?,
                MuScope::Sampled => compute_mu(matrix, instances.ids())?,
            };
            SimilaritySpace::centered(matrix, mu.with_dataset(&manifest.dataset_id))
        }
    })
}

/// Evaluates already-sampled instances against one matrix.
pub fn evaluate_instances(
    task: &EvalTask,
    instances: &Instances,
    manifest: &CorpusManifest,
    matrix: &EmbeddingMatrix,
    setup: &EvalSetup,
) -> Result<EvalResult, EvalError> {
    let space = similarity_space(matrix, manifest, instances, setup)?;
    let values = instances.evaluate(&space)?;
    let meta = ResultMeta {
        dataset_id: manifest.dataset_id.clone(),
        model_id: matrix.model_id.clone(),
        layer_id: matrix.layer_id,
        seed: setup.seed,
        mu_population: space.calibration().map_or(0, |c| c.population),
        calibration: setup.calibration,
    };
    let mut result = if values.len() == 1 {
        EvalResult::single(task.kind(), task.tag(), meta, values[0])
    } else {
        EvalResult::from_runs(task.kind(), task.tag(), meta, values)?
    };
    result.instance_digest = Some(instances.digest());
    Ok(result)
}

/// Samples and evaluates one task on one matrix.
pub fn evaluate(
    task: &EvalTask,
    manifest: &CorpusManifest,
    matrix: &EmbeddingMatrix,
    setup: &EvalSetup,
) -> Result<(EvalResult, Instances), EvalError> {
    let instances = task.sample(manifest, setup.seed, setup.runs)?;
    let result = evaluate_instances(task, &instances, manifest, matrix, setup)?;
    Ok((result, instances))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCurve {
    pub task: TaskKind,
    pub tag: String,
    pub points: Vec<(u32, EvalResult)>,
}

impl LayerCurve {
    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|(_, r)| r.mean).collect()
    }
}

/// Evaluates the same instance sets at every requested layer.
///
/// Instances are sampled once; the centring mean is recomputed per layer.
/// Output points are in ascending layer order.
pub fn layer_sweep(
    task: &EvalTask,
    layers: &[u32],
    manifest: &CorpusManifest,
    matrices: &[EmbeddingMatrix],
    setup: &EvalSetup,
) -> Result<LayerCurve, EvalError> {
    if layers.is_empty() {
        return Err(EvalError::NoLayers);
    }
    let wanted: BTreeSet<u32> = layers.iter().copied().collect();
    let mut selected = Vec::with_capacity(wanted.len());
    for &layer in &wanted {
        let m = matrices
            .iter()
            .find(|m| m.layer_id == layer)
            .ok_or(EvalError::MissingLayer(layer))?;
        selected.push(m);
    }
    let instances = task.sample(manifest, setup.seed, setup.runs)?;
    let points = selected
        .par_iter()
        .map(|m| Ok((m.layer_id, evaluate_instances(task, &instances, manifest, m, setup)?)))
        .collect::<Result<Vec<_>, EvalError>>()?;
    if points.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(EvalError::Invariant("layer ids not strictly increasing".into()));
    }
    Ok(LayerCurve {
        task: task.kind(),
        tag: task.tag(),
        points,
    })
}
