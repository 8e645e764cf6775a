//! Subcommand implementations.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use emosim_core::alignment::{balance_by_source, kappa_from_votes, read_pool, ConsensusReport};
use emosim_core::annotation::read_votes;
use emosim_core::corpus::CorpusManifest;
use emosim_core::eval::{evaluate_instances, EvalSetup, Instances, ResultMeta};
use emosim_core::pipeline::{self, ModelSelection, RunConfig};
use emosim_core::report::{curve_tsv, parse_tsv, render_table, render_text, ExcludedCell, Layout};
use emosim_core::sampler::{decode_lines, encode_lines, InstanceTag, SamplerError};
use emosim_core::store::{available_layers, load_layer, resolve_layer, StoreError};
use emosim_core::{
    alignment_accuracy, anisotropy_report, compute_mu, consensus_filter, filter_zero_shot, layer_sweep, load_manifest,
    CalibrationMode, EmbeddingMatrix, Error, EvalResult, EvalTask, HarnessConfig, LayerSelector, Result,
    SimilaritySpace, TaskKind, ZeroShot,
};
use serde::Serialize;

use crate::{
    usage, AlignArgs, CalibrateArgs, Command, EvalArgs, IngestArgs, LayoutArg, ManifestArgs, ProbeArgs, ReportArgs,
    RunArgs, SampleArgs, SamplingArgs, TaskArgs,
};

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Ingest(a) => ingest(&a),
        Command::Calibrate(a) => calibrate(&a),
        Command::Sample(a) => sample(&a),
        Command::Eval(a) => eval(&a),
        Command::ProbeLayers(a) => probe_layers(&a),
        Command::AlignHuman(a) => align_human(&a),
        Command::Serve(a) => crate::server::serve(&a),
        Command::Report(a) => report(&a),
        Command::Run(a) => run(&a),
    }
}

fn harness(path: &Option<PathBuf>) -> Result<HarnessConfig> {
    Ok(match path {
        Some(p) => HarnessConfig::load(p)?,
        None => HarnessConfig::default(),
    })
}

fn manifest(args: &ManifestArgs) -> Result<(HarnessConfig, CorpusManifest)> {
    let h = harness(&args.harness_config)?;
    let m = load_manifest(&args.manifest, &h.labels)?;
    Ok((h, m))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("report serializes");
    out.push(b'\n');
    out
}

/// `all`, `last`, or a comma list of indices.
fn layer_list(spec: &str, root: &Path, model: &str) -> Result<Vec<u32>> {
    if spec.trim().eq_ignore_ascii_case("all") {
        return Ok(available_layers(root, model)?);
    }
    let mut layers = BTreeSet::new();
    for part in spec.split(',') {
        let sel: LayerSelector = part.parse().map_err(usage)?;
        layers.insert(resolve_layer(root, model, sel)?);
    }
    Ok(layers.into_iter().collect())
}

fn tasks(task: &TaskArgs, sampling: &SamplingArgs) -> Result<Vec<EvalTask>> {
    let mut tasks = task.selector()?.expand(sampling.instances);
    if task.fix_emotion {
        for t in &mut tasks {
            match t {
                EvalTask::Shift(s) => s.fix_emotion = true,
                EvalTask::Monotonicity(s) => s.fix_emotion = true,
                EvalTask::Categorical(_) => return Err(usage("--fix-emotion applies to shift and monotonicity")),
            }
        }
    }
    Ok(tasks)
}

fn instance_file(task: &EvalTask) -> String {
    format!("{}_{}.jsonl", task.kind(), task.tag())
}

/// The run config equivalent to a single-model command, for hashing.
#[allow(clippy::too_many_arguments)]
fn config_hash(
    data: &ManifestArgs,
    task: &TaskArgs,
    sampling: &SamplingArgs,
    calibration: &crate::CalibrationArgs,
    embeddings_dir: &Path,
    model: &str,
    layer: LayerSelector,
    out: &Path,
) -> Result<String> {
    let cfg = RunConfig {
        manifests: vec![data.manifest.clone()],
        embeddings_dir: embeddings_dir.to_path_buf(),
        models: vec![ModelSelection {
            id: model.to_string(),
            layer,
        }],
        tasks: vec![task.selector()?],
        seed: sampling.seed,
        runs: sampling.runs,
        instances: sampling.instances,
        calibration: calibration.calibration,
        mu_scope: calibration.mu_scope,
        harness_config: data.harness_config.clone(),
        out: out.to_path_buf(),
    };
    Ok(cfg.hash())
}

/// Writes results plus one table per task kind; returns the text tables.
fn write_results(out: &Path, results: &[EvalResult], excluded: &[ExcludedCell], layout: Layout) -> Result<String> {
    write(&out.join("results.jsonl"), &encode_lines(results))?;
    write(&out.join("exclusions.jsonl"), &encode_lines(excluded))?;
    let mut text = String::new();
    let kinds: BTreeSet<TaskKind> = results.iter().map(|r| r.task).collect();
    for kind in kinds {
        let subset: Vec<EvalResult> = results.iter().filter(|r| r.task == kind).cloned().collect();
        let tags: BTreeSet<&str> = subset.iter().map(|r| r.tag.as_str()).collect();
        let cells: Vec<ExcludedCell> = excluded
            .iter()
            .filter(|e| tags.contains(e.tag.as_str()))
            .cloned()
            .collect();
        let rendered = render_table(&subset, &cells, layout)?;
        write(&out.join(format!("table_{kind}.tsv")), rendered.tsv.as_bytes())?;
        write(&out.join(format!("table_{kind}.txt")), rendered.text.as_bytes())?;
        text.push_str(&rendered.text);
    }
    Ok(text)
}

/// Exclusion cells for a refused (model, dataset) pairing.
fn excluded_cells(manifest: &CorpusManifest, model: &str, tasks: &[EvalTask]) -> Vec<ExcludedCell> {
    tasks
        .iter()
        .map(|t| ExcludedCell {
            dataset_id: manifest.dataset_id.clone(),
            model_id: model.to_string(),
            tag: t.tag(),
        })
        .collect()
}

fn write_exclusion(out: &Path, manifest: &CorpusManifest, model: &str, tasks: &[EvalTask]) -> Result<()> {
    let cells = excluded_cells(manifest, model, tasks);
    write(&out.join("results.jsonl"), b"")?;
    write(&out.join("exclusions.jsonl"), &encode_lines(&cells))?;
    eprintln!(
        "{model} saw {} during pre-training; nothing evaluated",
        manifest.dataset_id
    );
    Ok(())
}

#[derive(Serialize)]
struct LayerCoverage {
    layer_id: u32,
    dim: usize,
    rows: usize,
    missing: usize,
}

#[derive(Serialize)]
struct IngestSummary {
    dataset_id: String,
    records: usize,
    raw_records: usize,
    dropped: usize,
    emotions: [usize; 4],
    valence_scored: usize,
    arousal_scored: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    coverage: Vec<LayerCoverage>,
}

fn ingest(args: &IngestArgs) -> Result<()> {
    let (_, m) = manifest(&args.data)?;
    let mut summary = IngestSummary {
        dataset_id: m.dataset_id.clone(),
        records: m.len(),
        raw_records: m.raw_count(),
        dropped: m.dropped,
        emotions: m.emotion_counts(),
        valence_scored: m.records.iter().filter(|r| r.valence.is_some()).count(),
        arousal_scored: m.records.iter().filter(|r| r.arousal.is_some()).count(),
        coverage: Vec::new(),
    };
    let mut first_missing = None;
    if let (Some(root), Some(model)) = (&args.embeddings_dir, &args.model) {
        for layer in layer_list(args.layers.as_deref().unwrap_or("all"), root, model)? {
            let matrix = load_layer(root, model, layer)?;
            let missing: Vec<&str> = m.ids().filter(|id| !matrix.contains(id)).collect();
            if first_missing.is_none() {
                first_missing = missing.first().map(|s| s.to_string());
            }
            summary.coverage.push(LayerCoverage {
                layer_id: layer,
                dim: matrix.dim(),
                rows: matrix.rows(),
                missing: missing.len(),
            });
        }
    }
    print!("{}", String::from_utf8(json(&summary)).expect("utf-8"));
    match first_missing {
        Some(id) => Err(StoreError::UnknownId(id).into()),
        None => Ok(()),
    }
}

#[derive(Serialize)]
struct AnisotropyLine {
    model_id: String,
    layer_id: u32,
    dataset_id: String,
    population: usize,
    mu_path: String,
    raw: emosim_core::DistributionSummary,
    centered: emosim_core::DistributionSummary,
}

fn calibrate(args: &CalibrateArgs) -> Result<()> {
    let (_, m) = manifest(&args.data)?;
    let mut lines = Vec::new();
    for layer in layer_list(&args.layers, &args.embeddings_dir, &args.model)? {
        let full = load_layer(&args.embeddings_dir, &args.model, layer)?;
        // restrict to this partition so the pair sample stays in-dataset
        let rows = m
            .ids()
            .map(|id| Ok((id.to_string(), full.lookup(id)?.to_vec())))
            .collect::<std::result::Result<Vec<_>, StoreError>>()?;
        let matrix = EmbeddingMatrix::from_rows(&args.model, layer, rows)?;
        let mu = compute_mu(&matrix, m.ids())?.with_dataset(&m.dataset_id);
        let path = mu.path_under(&args.out);
        mu.write(&path)?;
        let raw = anisotropy_report(&matrix, args.pairs, args.seed, None)?;
        let centered = anisotropy_report(&matrix, args.pairs, args.seed, Some(&mu))?;
        println!(
            "L{layer}: raw median {:.3} (p5 {:.3}), centered median {:.3} (p5 {:.3}); mu over {} -> {}",
            raw.median,
            raw.p5,
            centered.median,
            centered.p5,
            mu.population,
            path.display()
        );
        lines.push(AnisotropyLine {
            model_id: args.model.clone(),
            layer_id: layer,
            dataset_id: m.dataset_id.clone(),
            population: mu.population,
            mu_path: path.display().to_string(),
            raw,
            centered,
        });
    }
    write(
        &args.out.join(&args.model).join(&m.dataset_id).join("anisotropy.jsonl"),
        &encode_lines(&lines),
    )
}

fn sample(args: &SampleArgs) -> Result<()> {
    let (_, m) = manifest(&args.data)?;
    // draw everything first so a refused task leaves no partial output
    let drawn = tasks(&args.task, &args.sampling)?
        .into_iter()
        .map(|t| Ok((t.sample(&m, args.sampling.seed, args.sampling.runs)?, t)))
        .collect::<Result<Vec<_>>>()?;
    for (instances, task) in drawn {
        let path = args.out.join(instance_file(&task));
        write(&path, &instances.encode())?;
        println!(
            "{} ({} runs, sha256 {})",
            path.display(),
            instances.runs(),
            instances.digest()
        );
    }
    Ok(())
}

/// Checks that replayed instances belong to `task`.
fn check_replay(task: &EvalTask, instances: &Instances) -> Result<()> {
    let expected = match task {
        EvalTask::Categorical(s) => Some(InstanceTag::Categorical(s.kind)),
        EvalTask::Shift(s) => Some(InstanceTag::Shift(s.dimension)),
        EvalTask::Monotonicity(_) => None,
    };
    let ok = match (instances, task) {
        (Instances::Triplets(runs), _) => runs.iter().flatten().all(|t| Some(t.scenario) == expected),
        (Instances::Pairs(runs), EvalTask::Monotonicity(s)) => {
            runs.iter().flatten().all(|p| p.dimension == s.dimension)
        }
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(SamplerError::InvalidSpec(format!(
            "instance file does not hold {} {} instances",
            task.kind(),
            task.tag()
        ))
        .into())
    }
}

fn eval(args: &EvalArgs) -> Result<()> {
    let (h, m) = manifest(&args.data)?;
    let tasks = tasks(&args.task, &args.sampling)?;
    if args.from.is_some() && tasks.len() != 1 {
        return Err(usage("--from needs a single task; pass --scenario"));
    }
    let m = match filter_zero_shot(m, &args.model, &h.zero_shot)? {
        ZeroShot::Admitted(m) => m,
        ZeroShot::Excluded { dataset_id, .. } => {
            let m = load_manifest(&args.data.manifest, &h.labels)?;
            debug_assert_eq!(m.dataset_id, dataset_id);
            return write_exclusion(&args.out, &m, &args.model, &tasks);
        }
    };
    let layer = resolve_layer(&args.embeddings_dir, &args.model, args.layers)?;
    let matrix = load_layer(&args.embeddings_dir, &args.model, layer)?;
    let setup = EvalSetup {
        seed: args.sampling.seed,
        runs: args.sampling.runs,
        calibration: args.calibration.calibration,
        mu_scope: args.calibration.mu_scope,
    };
    let hash = config_hash(
        &args.data,
        &args.task,
        &args.sampling,
        &args.calibration,
        &args.embeddings_dir,
        &args.model,
        args.layers,
        &args.out,
    )?;
    let mut evaluated = Vec::new();
    for task in &tasks {
        let instances = match &args.from {
            Some(path) => {
                let inst = Instances::decode(task.kind(), read(path)?.as_slice())?;
                check_replay(task, &inst)?;
                inst
            }
            None => task.sample(&m, setup.seed, setup.runs)?,
        };
        let mut result = evaluate_instances(task, &instances, &m, &matrix, &setup)?;
        result.config_hash = Some(hash.clone());
        evaluated.push((task, instances, result));
    }
    let mut results = Vec::new();
    for (task, instances, result) in evaluated {
        write(
            &args.out.join("instances").join(instance_file(task)),
            &instances.encode(),
        )?;
        results.push(result);
    }
    print!("{}", write_results(&args.out, &results, &[], Layout::Models)?);
    Ok(())
}

fn probe_layers(args: &ProbeArgs) -> Result<()> {
    let (h, m) = manifest(&args.data)?;
    let tasks = tasks(&args.task, &args.sampling)?;
    let m = match filter_zero_shot(m, &args.model, &h.zero_shot)? {
        ZeroShot::Admitted(m) => m,
        ZeroShot::Excluded { .. } => {
            let m = load_manifest(&args.data.manifest, &h.labels)?;
            return write_exclusion(&args.out, &m, &args.model, &tasks);
        }
    };
    let layers = layer_list(&args.layers, &args.embeddings_dir, &args.model)?;
    let matrices = layers
        .iter()
        .map(|&l| load_layer(&args.embeddings_dir, &args.model, l))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let setup = EvalSetup {
        seed: args.sampling.seed,
        runs: args.sampling.runs,
        calibration: args.calibration.calibration,
        mu_scope: args.calibration.mu_scope,
    };
    let hash = config_hash(
        &args.data,
        &args.task,
        &args.sampling,
        &args.calibration,
        &args.embeddings_dir,
        &args.model,
        LayerSelector::Last,
        &args.out,
    )?;
    let mut results = Vec::new();
    for task in &tasks {
        let mut curve = layer_sweep(task, &layers, &m, &matrices, &setup)?;
        for (_, r) in &mut curve.points {
            r.config_hash = Some(hash.clone());
        }
        write(
            &args.out.join(format!("curve_{}_{}.tsv", task.kind(), task.tag())),
            curve_tsv(&curve).as_bytes(),
        )?;
        results.extend(curve.points.into_iter().map(|(_, r)| r));
    }
    print!("{}", write_results(&args.out, &results, &[], Layout::Layers)?);
    Ok(())
}

#[derive(Serialize)]
struct AlignmentSummary<'a> {
    n_raters: usize,
    threshold: String,
    kappa: Option<f64>,
    retained: usize,
    evaluated: usize,
    tie_consensus: &'a [String],
    below_threshold: &'a [String],
    incomplete: &'a [(String, u32)],
    outcome: emosim_core::AlignmentOutcome,
}

fn align_human(args: &AlignArgs) -> Result<()> {
    let pool = read_pool(&args.pool)?;
    let votes = read_votes(&args.votes)?;
    let report: ConsensusReport = consensus_filter(&pool, &votes, args.raters, args.threshold)?;
    let kappa = kappa_from_votes(&pool, &votes, args.raters).ok();
    let consensus = match args.per_source {
        Some(k) => balance_by_source(&report.retained, k, args.seed)?,
        None => report.retained.clone(),
    };
    let layer = resolve_layer(&args.embeddings_dir, &args.model, args.layers)?;
    let matrix = load_layer(&args.embeddings_dir, &args.model, layer)?;
    let referenced: BTreeSet<&str> = pool
        .iter()
        .flat_map(|t| [t.ref_id.as_str(), t.candidate_a_id.as_str(), t.candidate_b_id.as_str()])
        .collect();
    let space = match args.calibration {
        CalibrationMode::Raw => SimilaritySpace::raw(&matrix),
        CalibrationMode::Centered => {
            SimilaritySpace::centered(&matrix, compute_mu(&matrix, referenced.iter().copied())?)
        }
    };
    let outcome = alignment_accuracy(&consensus, &space)?;
    let sources: BTreeSet<&str> = consensus.iter().map(|c| c.triplet.source_dataset.as_str()).collect();
    let meta = ResultMeta {
        dataset_id: sources.into_iter().collect::<Vec<_>>().join("+"),
        model_id: args.model.clone(),
        layer_id: layer,
        seed: args.seed,
        mu_population: space.calibration().map_or(0, |c| c.population),
        calibration: args.calibration,
    };
    let mut result = EvalResult::single(TaskKind::HumanAlignment, "consensus", meta, outcome.accuracy);
    result.p_value = Some(outcome.p_value);

    write(&args.out.join("consensus.jsonl"), &encode_lines(&consensus))?;
    let summary = AlignmentSummary {
        n_raters: args.raters,
        threshold: args.threshold.to_string(),
        kappa,
        retained: report.retained.len(),
        evaluated: consensus.len(),
        tie_consensus: &report.tie_consensus,
        below_threshold: &report.below_threshold,
        incomplete: &report.incomplete,
        outcome,
    };
    write(&args.out.join("alignment.json"), &json(&summary))?;
    print!("{}", write_results(&args.out, &[result], &[], Layout::Models)?);
    match kappa {
        Some(k) => println!("fleiss kappa: {k:.4}"),
        None => println!("fleiss kappa: undefined"),
    }
    Ok(())
}

fn report(args: &ReportArgs) -> Result<()> {
    if let Some(tsv) = &args.tsv {
        let text = String::from_utf8(read(tsv)?).map_err(|e| usage(format!("{}: {e}", tsv.display())))?;
        print!("{}", render_text(&parse_tsv(&text)?));
        return Ok(());
    }
    let mut results: Vec<EvalResult> = Vec::new();
    for p in &args.results {
        results.extend(decode_lines::<EvalResult>(read(p)?.as_slice())?);
    }
    for r in &results {
        r.check()?;
    }
    let mut excluded: Vec<ExcludedCell> = Vec::new();
    for p in &args.exclusions {
        excluded.extend(decode_lines::<ExcludedCell>(read(p)?.as_slice())?);
    }
    let layout = match args.layout {
        LayoutArg::Models => Layout::Models,
        LayoutArg::Layers => Layout::Layers,
    };
    let out = args.out.as_ref().ok_or_else(|| usage("--out is required"))?;
    print!("{}", write_results(out, &results, &excluded, layout)?);
    Ok(())
}

fn run(args: &RunArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let summary = pipeline::run(&cfg)?;
    for kind in [TaskKind::Categorical, TaskKind::Shift, TaskKind::Monotonicity] {
        if let Ok(text) = fs::read_to_string(summary.out_dir.join(format!("table_{kind}.txt"))) {
            print!("{text}");
        }
    }
    for f in &summary.failures {
        let layer = f.layer_id.map(|l| format!("L{l}")).unwrap_or_else(|| "-".into());
        eprintln!(
            "failed {} / {} / {layer} / {}: {}",
            f.dataset_id, f.model_id, f.task, f.error
        );
    }
    if summary.failures.iter().any(|f| f.internal) {
        return Err(Error::Invariant(format!("{} job(s) failed", summary.failures.len())));
    }
    if !summary.failures.is_empty() {
        return Err(Error::JobsFailed(summary.failures.len()));
    }
    Ok(())
}
