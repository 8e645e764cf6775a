//! End-to-end runs: sample, evaluate and aggregate per (dataset, model,
//! layer, task), then write results and tables.
//!
//! Outputs under `out/`:
//! - `results.jsonl`: one `EvalResult` per line
//! - `table_<task>.tsv` / `table_<task>.txt`
//! - `exclusions.jsonl`, `failures.jsonl`
//! - `instances/<dataset>/<model>/L<layer>/<task>_<tag>.jsonl`
//!
//! Nothing time-dependent is written, so reruns are byte-identical.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::CalibrationMode;
use crate::config::{ConfigError, HarnessConfig};
use crate::corpus::{filter_zero_shot, load_manifest, CorpusManifest, ZeroShot};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalResult, EvalSetup, EvalTask, MuScope, TaskKind};
use crate::report::{render_table, ExcludedCell, Layout};
use crate::sampler::{Dimension, PairSpec, ScenarioKind, ScenarioSpec, ShiftSpec, DEFAULT_RUNS};
use crate::store::{load_layer, resolve_layer, LayerSelector};

fn default_runs() -> u32 {
    DEFAULT_RUNS
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSelection {
    pub id: String,
    #[serde(default = "last_layer")]
    pub layer: LayerSelector,
}

fn last_layer() -> LayerSelector {
    LayerSelector::Last
}

/// A task selector such as `categorical:speaker_distractor`, `categorical`
/// (all four scenarios), `shift:arousal` or `monotonicity:valence`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TaskSelector {
    Categorical(Option<ScenarioKind>),
    Shift(Dimension),
    Monotonicity(Dimension),
}

impl fmt::Display for TaskSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskSelector::Categorical(None) => f.write_str("categorical"),
            TaskSelector::Categorical(Some(k)) => write!(f, "categorical:{k}"),
            TaskSelector::Shift(d) => write!(f, "shift:{d}"),
            TaskSelector::Monotonicity(d) => write!(f, "monotonicity:{d}"),
        }
    }
}

impl std::str::FromStr for TaskSelector {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (head, tail) = match s.split_once(':') {
            Some((h, t)) => (h, Some(t)),
            None => (s, None),
        };
        match (head, tail) {
            ("categorical", None) => Ok(TaskSelector::Categorical(None)),
            ("categorical", Some(k)) => Ok(TaskSelector::Categorical(Some(k.parse()?))),
            ("shift", Some(d)) => Ok(TaskSelector::Shift(d.parse()?)),
            ("monotonicity", Some(d)) => Ok(TaskSelector::Monotonicity(d.parse()?)),
            _ => Err(format!("unknown task {s:?}")),
        }
    }
}

impl TryFrom<String> for TaskSelector {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<TaskSelector> for String {
    fn from(t: TaskSelector) -> String {
        t.to_string()
    }
}

impl TaskSelector {
    /// Expands to concrete tasks. `instances` overrides per-run counts,
    /// except that speaker-linguistic match keeps its smaller default.
    pub fn expand(self, instances: Option<usize>) -> Vec<EvalTask> {
        let scenario = |k: ScenarioKind| {
            let n = match (k, instances) {
                (ScenarioKind::SpeakerLinguisticMatch, Some(n)) => n.min(k.default_instances()),
                (_, Some(n)) => n,
                (_, None) => k.default_instances(),
            };
            EvalTask::Categorical(ScenarioSpec::with_instances(k, n))
        };
        match self {
            TaskSelector::Categorical(None) => ScenarioKind::ALL.into_iter().map(scenario).collect(),
            TaskSelector::Categorical(Some(k)) => vec![scenario(k)],
            TaskSelector::Shift(d) => {
                let mut spec = ShiftSpec::new(d);
                if let Some(n) = instances {
                    spec.instances_per_run = n;
                }
                vec![EvalTask::Shift(spec)]
            }
            TaskSelector::Monotonicity(d) => {
                let mut spec = PairSpec::new(d);
                if let Some(n) = instances {
                    spec.pairs_per_run = n;
                }
                vec![EvalTask::Monotonicity(spec)]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifests: Vec<PathBuf>,
    pub embeddings_dir: PathBuf,
    pub models: Vec<ModelSelection>,
    pub tasks: Vec<TaskSelector>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_runs")]
    pub runs: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instances: Option<usize>,
    #[serde(default)]
    pub calibration: CalibrationMode,
    #[serde(default)]
    pub mu_scope: MuScope,
    /// Label map and zero-shot table; the bundled default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub harness_config: Option<PathBuf>,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(ConfigError::Parse(e.to_string())))
    }

    /// Loads a run config; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::parse(&text)?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.manifests.iter_mut().for_each(fix);
        fix(&mut self.embeddings_dir);
        fix(&mut self.out);
        if let Some(p) = self.harness_config.as_mut() {
            fix(p);
        }
    }

    /// Checks that every referenced input exists.
    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Error::Config(ConfigError::Invalid(m));
        if self.manifests.is_empty() || self.models.is_empty() || self.tasks.is_empty() {
            return Err(invalid("manifests, models and tasks must be non-empty".into()));
        }
        if self.runs == 0 {
            return Err(invalid("runs must be positive".into()));
        }
        let inputs = self
            .manifests
            .iter()
            .chain([&self.embeddings_dir])
            .chain(self.harness_config.as_ref());
        for p in inputs {
            if !p.exists() {
                return Err(invalid(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Short SHA-256 of the canonical serialized config.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("run config serializes");
        Sha256::digest(canonical)
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn setup(&self) -> EvalSetup {
        EvalSetup {
            seed: self.seed,
            runs: self.runs,
            calibration: self.calibration,
            mu_scope: self.mu_scope,
        }
    }

    pub fn expanded_tasks(&self) -> Vec<EvalTask> {
        self.tasks.iter().flat_map(|t| t.expand(self.instances)).collect()
    }
}

/// A job that failed, with its coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobFailure {
    pub dataset_id: String,
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_id: Option<u32>,
    pub task: String,
    pub error: String,
    /// Exit-code class of the underlying error.
    pub internal: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub results: Vec<EvalResult>,
    pub excluded: Vec<ExcludedCell>,
    pub failures: Vec<JobFailure>,
    pub out_dir: PathBuf,
}

fn task_label(task: &EvalTask) -> String {
    format!("{}_{}", task.kind(), task.tag())
}

struct JobOutput {
    results: Vec<(EvalResult, PathBuf, Vec<u8>)>,
    excluded: Vec<ExcludedCell>,
    failures: Vec<JobFailure>,
}

fn run_job(
    cfg: &RunConfig,
    harness: &HarnessConfig,
    manifest: &CorpusManifest,
    model: &ModelSelection,
    tasks: &[EvalTask],
    hash: &str,
) -> JobOutput {
    let mut out = JobOutput {
        results: Vec::new(),
        excluded: Vec::new(),
        failures: Vec::new(),
    };
    let fail = |layer: Option<u32>, task: &str, e: Error| JobFailure {
        dataset_id: manifest.dataset_id.clone(),
        model_id: model.id.clone(),
        layer_id: layer,
        task: task.to_string(),
        internal: e.class() == crate::error::ErrorClass::Internal,
        error: e.to_string(),
    };
    let admitted = match filter_zero_shot(manifest.clone(), &model.id, &harness.zero_shot) {
        Ok(ZeroShot::Admitted(m)) => m,
        Ok(ZeroShot::Excluded { .. }) => {
            for t in tasks {
                out.excluded.push(ExcludedCell {
                    dataset_id: manifest.dataset_id.clone(),
                    model_id: model.id.clone(),
                    tag: t.tag(),
                });
            }
            return out;
        }
        Err(e) => {
            out.failures.push(fail(None, "*", e.into()));
            return out;
        }
    };
    let matrix = match resolve_layer(&cfg.embeddings_dir, &model.id, model.layer)
        .and_then(|l| load_layer(&cfg.embeddings_dir, &model.id, l))
    {
        Ok(m) => m,
        Err(e) => {
            out.failures.push(fail(None, "*", e.into()));
            return out;
        }
    };
    let setup = cfg.setup();
    for task in tasks {
        match evaluate(task, &admitted, &matrix, &setup) {
            Ok((mut result, instances)) => {
                result.config_hash = Some(hash.to_string());
                let path = PathBuf::from("instances")
                    .join(&admitted.dataset_id)
                    .join(&model.id)
                    .join(format!("L{}", matrix.layer_id))
                    .join(format!("{}.jsonl", task_label(task)));
                out.results.push((result, path, instances.encode()));
            }
            Err(e) => out
                .failures
                .push(fail(Some(matrix.layer_id), &task_label(task), e.into())),
        }
    }
    out
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    crate::sampler::encode_lines(items)
}

/// Runs every (dataset, model, task) job and writes the outputs. Job
/// failures are collected rather than aborting the run.
pub fn run(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let harness = match &cfg.harness_config {
        Some(p) => HarnessConfig::load(p)?,
        None => HarnessConfig::default(),
    };
    let manifests = cfg
        .manifests
        .iter()
        .map(|p| load_manifest(p, &harness.labels))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let tasks = cfg.expanded_tasks();
    let hash = cfg.hash();
    let jobs: Vec<(&CorpusManifest, &ModelSelection)> = manifests
        .iter()
        .flat_map(|m| cfg.models.iter().map(move |model| (m, model)))
        .collect();
    let outputs: Vec<JobOutput> = jobs
        .par_iter()
        .map(|(m, model)| run_job(cfg, &harness, m, model, &tasks, &hash))
        .collect();

    let mut summary = RunSummary {
        out_dir: cfg.out.clone(),
        ..RunSummary::default()
    };
    for o in outputs {
        for (result, rel, bytes) in o.results {
            write(&cfg.out.join(rel), &bytes)?;
            summary.results.push(result);
        }
        summary.excluded.extend(o.excluded);
        summary.failures.extend(o.failures);
    }
    write(&cfg.out.join("results.jsonl"), &jsonl(&summary.results))?;
    write(&cfg.out.join("exclusions.jsonl"), &jsonl(&summary.excluded))?;
    write(&cfg.out.join("failures.jsonl"), &jsonl(&summary.failures))?;
    for kind in [TaskKind::Categorical, TaskKind::Shift, TaskKind::Monotonicity] {
        let results: Vec<EvalResult> = summary.results.iter().filter(|r| r.task == kind).cloned().collect();
        let tags: Vec<String> = tasks.iter().filter(|t| t.kind() == kind).map(EvalTask::tag).collect();
        if tags.is_empty() {
            continue;
        }
        let excluded: Vec<ExcludedCell> = summary
            .excluded
            .iter()
            .filter(|e| tags.contains(&e.tag))
            .cloned()
            .collect();
        let rendered = render_table(&results, &excluded, Layout::Models)?;
        write(&cfg.out.join(format!("table_{kind}.tsv")), rendered.tsv.as_bytes())?;
        write(&cfg.out.join(format!("table_{kind}.txt")), rendered.text.as_bytes())?;
    }
    Ok(summary)
}
