//! Acceptance gate. Each test checks one criterion at its stated tolerance
//! and prints a single PASS/FAIL line.

mod common;

use std::collections::HashSet;
use std::time::Instant;

use common::{crossed_manifest, gaussian, planted_matrix, random_matrix, report, rng, scored_manifest};
use emosim_core::alignment::{tally, Candidate};
use emosim_core::annotation::{encode_log, read_votes, LogEntry, PresentationRecord};
use emosim_core::eval::{evaluate, evaluate_instances, EvalSetup, EvalTask};
use emosim_core::sampler::{validate_pair, validate_shift, CellShortfall, SamplerError, DEFAULT_MARGIN};
use emosim_core::stats::average_ranks;
use emosim_core::*;
use rand::Rng;

fn check(name: &str, pass: bool, detail: String) {
    report(name, pass, &detail);
    assert!(pass, "{name}: {detail}");
}

// ---------------------------------------------------------------------------

#[test]
fn binomial_p_values_at_n_400() {
    let start = Instant::now();
    let within = |k: u64, target: f64, tol: f64| {
        let p = binomial_two_sided(k, 400).unwrap();
        ((p - target).abs() <= tol, format!("k={k} p={p:.4e}"))
    };
    let factor = |k: u64, target: f64| {
        let p = binomial_two_sided(k, 400).unwrap();
        (p >= target / 2.0 && p <= target * 2.0, format!("k={k} p={p:.4e}"))
    };
    let below = |k: u64, bound: f64| {
        let p = binomial_two_sided(k, 400).unwrap();
        (p < bound, format!("k={k} p={p:.4e}"))
    };
    let checks = [
        within(180, 0.051, 0.002),
        below(260, 1e-6),
        within(209, 0.395, 0.01),
        factor(246, 5e-6),
        within(189, 0.294, 0.01),
        factor(235, 5.4e-4),
        within(178, 0.031, 0.002),
    ];
    let elapsed = start.elapsed();
    let pass = checks.iter().all(|(ok, _)| *ok) && elapsed.as_secs_f64() < 1.0;
    let detail = checks.iter().map(|(_, d)| d.as_str()).collect::<Vec<_>>().join(", ");
    check("binomial p-values (n=400)", pass, format!("{detail}; {elapsed:?}"));
}

// ---------------------------------------------------------------------------

#[test]
fn anisotropy_removed_by_centering() {
    let start = Instant::now();
    let dim = 64;
    let mut r = rng(2024);
    // noise norm is about sqrt(dim); the shared mean is ten times that
    let direction = gaussian(&mut r, dim, 1.0);
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mean: Vec<f64> = direction
        .iter()
        .map(|v| v / norm * 10.0 * (dim as f64).sqrt())
        .collect();
    let rows: Vec<(String, Vec<f32>)> = (0..500)
        .map(|i| {
            let noise = gaussian(&mut r, dim, 1.0);
            (
                format!("p{i}"),
                mean.iter().zip(&noise).map(|(m, n)| (m + n) as f32).collect(),
            )
        })
        .collect();
    let m = EmbeddingMatrix::from_rows("cone", 0, rows).unwrap();
    let raw = anisotropy_report(&m, 1000, 7, None).unwrap();
    let mu = compute_mu(&m, m.sorted_index().into_iter().map(|(id, _)| id)).unwrap();
    let centred = anisotropy_report(&m, 1000, 7, Some(&mu)).unwrap();
    let elapsed = start.elapsed();
    let pass = raw.n == 1000 && raw.min >= 0.9 && centred.p5 < 0.0 && elapsed.as_secs_f64() < 5.0;
    check(
        "anisotropy calibration",
        pass,
        format!(
            "raw min={:.4} median={:.4}; centred p5={:.4} median={:.4}; {elapsed:?}",
            raw.min, raw.median, centred.p5, centred.median
        ),
    );
}

// ---------------------------------------------------------------------------

fn scenario_accuracies(matrix: &EmbeddingMatrix, manifest: &CorpusManifest) -> Vec<(ScenarioKind, f64)> {
    let setup = EvalSetup {
        seed: 99,
        runs: 5,
        ..EvalSetup::default()
    };
    ScenarioKind::ALL
        .into_iter()
        .map(|k| {
            // the full 1000 per run for every scenario
            let task = EvalTask::Categorical(ScenarioSpec::with_instances(k, 1000));
            let (result, instances) = evaluate(&task, manifest, matrix, &setup).unwrap();
            assert_eq!(instances.runs(), 5);
            result.check().unwrap();
            (k, result.mean)
        })
        .collect()
}

#[test]
fn planted_structure_reproduces_distractor_collapse() {
    let start = Instant::now();
    let manifest = crossed_manifest(10, 10, 3);
    let emotion_dominant = planted_matrix(&manifest, (1.0, 0.1, 0.1), 0.1, 64, 5);
    let nuisance_dominant = planted_matrix(&manifest, (0.05, 1.0, 1.0), 0.1, 64, 6);

    let a = scenario_accuracies(&emotion_dominant, &manifest);
    let b = scenario_accuracies(&nuisance_dominant, &manifest);
    let acc = |v: &[(ScenarioKind, f64)], k| v.iter().find(|(x, _)| *x == k).unwrap().1;
    let pass_a = a.iter().all(|(_, v)| *v >= 0.95);
    let pass_b = acc(&b, ScenarioKind::SpeakerDistractor) < 0.45
        && acc(&b, ScenarioKind::LinguisticDistractor) < 0.45
        && (acc(&b, ScenarioKind::Unconstrained) - 0.5).abs() <= 0.05;
    let elapsed = start.elapsed();
    let fmt = |v: &[(ScenarioKind, f64)]| {
        v.iter()
            .map(|(k, x)| format!("{k}={:.2}%", x * 100.0))
            .collect::<Vec<_>>()
            .join(" ")
    };
    check(
        "planted structure",
        pass_a && pass_b && elapsed.as_secs_f64() < 60.0,
        format!(
            "emotion-dominant [{}]; nuisance-dominant [{}]; {elapsed:?}",
            fmt(&a),
            fmt(&b)
        ),
    );
}

// ---------------------------------------------------------------------------

fn rank_oracle(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&x| {
            let below = xs.iter().filter(|&&y| y < x).count() as f64;
            let equal = xs.iter().filter(|&&y| y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn spearman_oracle(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let (rx, ry) = (rank_oracle(xs), rank_oracle(ys));
    let n = xs.len() as f64;
    let centre = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for i in 0..xs.len() {
        num += (rx[i] - centre) * (ry[i] - centre);
        dx += (rx[i] - centre).powi(2);
        dy += (ry[i] - centre).powi(2);
    }
    if dx == 0.0 || dy == 0.0 {
        None
    } else {
        Some(num / (dx * dy).sqrt())
    }
}

fn kappa_oracle(table: &[Vec<u32>]) -> Option<f64> {
    let big_n = table.len() as f64;
    let n = table[0].iter().sum::<u32>() as f64;
    let k = table[0].len();
    let p_i: Vec<f64> = table
        .iter()
        .map(|row| {
            let s: f64 = row.iter().map(|&c| (c * c) as f64).sum();
            (s - n) / (n * (n - 1.0))
        })
        .collect();
    let p_bar = p_i.iter().sum::<f64>() / big_n;
    let p_j: Vec<f64> = (0..k)
        .map(|j| table.iter().map(|row| row[j] as f64).sum::<f64>() / (big_n * n))
        .collect();
    let p_e: f64 = p_j.iter().map(|p| p * p).sum();
    if p_e == 1.0 {
        None
    } else {
        Some((p_bar - p_e) / (1.0 - p_e))
    }
}

/// Exact two-sided p by enumerating all 2^n outcomes.
fn binomial_enumeration(k: u64, n: u64) -> f64 {
    let mut counts = vec![0u64; n as usize + 1];
    for outcome in 0u64..(1 << n) {
        counts[outcome.count_ones() as usize] += 1;
    }
    let at_k = counts[k as usize];
    let mass: u64 = counts.iter().filter(|&&c| c <= at_k).sum();
    mass as f64 / (1u64 << n) as f64
}

fn centred_cosine_oracle(a: &[f32], b: &[f32], mu: &[f64]) -> f64 {
    let x: Vec<f64> = a.iter().zip(mu).map(|(v, m)| f64::from(*v) - m).collect();
    let y: Vec<f64> = b.iter().zip(mu).map(|(v, m)| f64::from(*v) - m).collect();
    let dot: f64 = x.iter().zip(&y).map(|(p, q)| p * q).sum();
    let nx: f64 = x.iter().map(|v| v * v).sum();
    let ny: f64 = y.iter().map(|v| v * v).sum();
    (dot / (nx * ny).sqrt()).clamp(-1.0, 1.0)
}

#[test]
fn oracle_equivalence_suites() {
    let mut r = rng(31);

    // spearman: 10^4 cases, n <= 12, ties from small value alphabets
    let mut spearman_max = 0.0f64;
    let mut spearman_ok = true;
    for _ in 0..10_000 {
        let n = r.random_range(3..=12);
        let alphabet = r.random_range(2..=15);
        let xs: Vec<f64> = (0..n).map(|_| r.random_range(0..alphabet) as f64).collect();
        let ys: Vec<f64> = (0..n).map(|_| r.random_range(0..alphabet) as f64 * 0.5).collect();
        match (spearman_rho(&xs, &ys), spearman_oracle(&xs, &ys)) {
            (Ok(a), Some(b)) => spearman_max = spearman_max.max((a - b).abs()),
            (Err(_), None) => {}
            _ => spearman_ok = false,
        }
        if average_ranks(&xs) != rank_oracle(&xs) {
            spearman_ok = false;
        }
    }
    spearman_ok &= spearman_max <= 1e-12;

    // kappa: 10^4 tables, N <= 6, n <= 5, k = 3
    let mut kappa_max = 0.0f64;
    let mut kappa_ok = true;
    for _ in 0..10_000 {
        let subjects = r.random_range(1..=6);
        let raters = r.random_range(2..=5u32);
        let table: Vec<Vec<u32>> = (0..subjects)
            .map(|_| {
                let mut row = vec![0u32; 3];
                for _ in 0..raters {
                    row[r.random_range(0..3)] += 1;
                }
                row
            })
            .collect();
        match (fleiss_kappa(&table), kappa_oracle(&table)) {
            (Ok(a), Some(b)) => kappa_max = kappa_max.max((a - b).abs()),
            (Err(_), None) => {}
            _ => kappa_ok = false,
        }
    }
    kappa_ok &= kappa_max <= 1e-12;

    // binomial: every (k, n) with n <= 20, exact
    let mut binomial_ok = true;
    for n in 1..=20u64 {
        for k in 0..=n {
            let p = binomial_two_sided(k, n).unwrap();
            binomial_ok &= p == binomial_enumeration(k, n) && p == binomial_two_sided(n - k, n).unwrap();
        }
    }

    // triplet accuracy: 10^3 random instance sets against a recount
    let mut accuracy_ok = true;
    for _ in 0..1000 {
        let rows = r.random_range(4..=20);
        let dim = r.random_range(2..=8);
        let mut vecs: Vec<(String, Vec<f32>)> = (0..rows)
            .map(|i| {
                (
                    format!("x{i}"),
                    gaussian(&mut r, dim, 1.0).into_iter().map(|v| v as f32).collect(),
                )
            })
            .collect();
        // plant exact duplicates so ties occur
        let dup = vecs[0].1.clone();
        vecs[1].1 = dup;
        let m = EmbeddingMatrix::from_rows("m", 0, vecs).unwrap();
        let ids: Vec<String> = (0..rows).map(|i| format!("x{i}")).collect();
        let mu = compute_mu(&m, &ids).unwrap();
        let space = SimilaritySpace::centered(&m, mu.clone());
        let instances: Vec<TripletInstance> = (0..r.random_range(1..=50))
            .map(|_| TripletInstance {
                scenario: InstanceTag::Categorical(ScenarioKind::Unconstrained),
                run_index: 0,
                ref_id: ids[r.random_range(0..rows)].clone(),
                pos_id: ids[r.random_range(0..rows)].clone(),
                neg_id: ids[r.random_range(0..rows)].clone(),
            })
            .collect();
        let got = triplet_accuracy(&instances, &space);
        let row = |id: &str| m.lookup(id).unwrap();
        let mut correct = 0usize;
        let mut degenerate = false;
        for t in &instances {
            let sp = centred_cosine_oracle(row(&t.ref_id), row(&t.pos_id), &mu.mu);
            let sn = centred_cosine_oracle(row(&t.ref_id), row(&t.neg_id), &mu.mu);
            degenerate |= !sp.is_finite() || !sn.is_finite();
            if sp > sn {
                correct += 1;
            }
        }
        let expected = correct as f64 / instances.len() as f64;
        match got {
            Ok(v) => accuracy_ok &= !degenerate && v == expected,
            Err(_) => accuracy_ok &= degenerate,
        }
    }

    check(
        "oracle equivalence",
        spearman_ok && kappa_ok && binomial_ok && accuracy_ok,
        format!(
            "spearman max diff {spearman_max:.1e} ({}), kappa max diff {kappa_max:.1e} ({}), binomial n<=20 exact ({}), accuracy recount x1000 ({})",
            spearman_ok, kappa_ok, binomial_ok, accuracy_ok
        ),
    );
}

// ---------------------------------------------------------------------------

/// Random small manifest: uneven speakers, texts and emotions.
fn random_manifest(r: &mut rand_chacha::ChaCha8Rng, size: usize) -> CorpusManifest {
    let speakers = r.random_range(2..=5);
    let texts = r.random_range(2..=5);
    let records = (0..size)
        .map(|i| {
            let mut rec = common::record(
                format!("u{i}"),
                format!("s{}", r.random_range(0..speakers)),
                format!("t{}", r.random_range(0..texts)),
                EmotionLabel::ALL[r.random_range(0..4)],
            );
            if r.random_bool(0.8) {
                rec.valence = Score::from_hundredths(100 + 100 * r.random_range(0..5u16));
                rec.arousal = Score::from_hundredths(100 + 100 * r.random_range(0..3u16));
            }
            rec
        })
        .collect();
    CorpusManifest::from_records("SYN", records).unwrap()
}

/// Brute-force count of valid ordered tuples per reference emotion.
fn tuple_counts(manifest: &CorpusManifest, kind: ScenarioKind) -> [u64; 4] {
    let mut counts = [0u64; 4];
    let ids: Vec<&str> = manifest.ids().collect();
    for r in &ids {
        for p in &ids {
            for n in &ids {
                let t = TripletInstance {
                    scenario: InstanceTag::Categorical(kind),
                    run_index: 0,
                    ref_id: r.to_string(),
                    pos_id: p.to_string(),
                    neg_id: n.to_string(),
                };
                if validate_instance(&t, manifest).unwrap().passed() {
                    counts[manifest.get(r).unwrap().emotion.index()] += 1;
                }
            }
        }
    }
    counts
}

#[test]
fn sampler_soundness() {
    let mut r = rng(77);
    let mut emitted = 0usize;
    let mut refused = 0usize;
    let mut failures: Vec<String> = Vec::new();
    let dir = tempfile::tempdir().unwrap();

    for case in 0..40u64 {
        let size = r.random_range(12..=36);
        let manifest = random_manifest(&mut r, size);
        for kind in ScenarioKind::ALL {
            let counts = tuple_counts(&manifest, kind);
            let quota = r.random_range(1..=12);
            let spec = ScenarioSpec::with_instances(kind, quota * 4);
            match sample_categorical(&manifest, &spec, case, 3) {
                Ok(runs) => {
                    if counts.iter().any(|&c| c < quota as u64) {
                        failures.push(format!("case {case} {kind}: accepted infeasible quota"));
                    }
                    for (run, instances) in runs.iter().enumerate() {
                        let mut per_emotion = [0usize; 4];
                        let unique: HashSet<_> = instances.iter().map(|t| (&t.ref_id, &t.pos_id, &t.neg_id)).collect();
                        if unique.len() != instances.len() {
                            failures.push(format!("case {case} {kind} run {run}: duplicate tuple"));
                        }
                        for t in instances {
                            emitted += 1;
                            let rep = validate_instance(t, &manifest).unwrap();
                            if !rep.passed() {
                                failures.push(format!("case {case} {kind}: {:?}", rep.failures()));
                            }
                            per_emotion[manifest.get(&t.ref_id).unwrap().emotion.index()] += 1;
                        }
                        if per_emotion != spec.quotas {
                            failures.push(format!("case {case} {kind} run {run}: quotas {per_emotion:?}"));
                        }
                    }
                    // byte-identical files from identical (manifest, seed)
                    let again = sample_categorical(&manifest, &spec, case, 3).unwrap();
                    let (pa, pb) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
                    emosim_core::sampler::write_instances(&pa, &runs.concat()).unwrap();
                    emosim_core::sampler::write_instances(&pb, &again.concat()).unwrap();
                    if std::fs::read(&pa).unwrap() != std::fs::read(&pb).unwrap() {
                        failures.push(format!("case {case} {kind}: non-deterministic output"));
                    }
                }
                Err(SamplerError::Infeasible(cells)) => {
                    refused += 1;
                    let expected: Vec<CellShortfall> = EmotionLabel::ALL
                        .into_iter()
                        .filter(|e| counts[e.index()] < quota as u64)
                        .map(|e| CellShortfall {
                            scenario: kind.as_str().to_string(),
                            emotion: Some(e),
                            required: quota,
                            available: counts[e.index()],
                        })
                        .collect();
                    if cells != expected {
                        failures.push(format!("case {case} {kind}: diagnostics {cells:?} vs {expected:?}"));
                    }
                }
                Err(e) => failures.push(format!("case {case} {kind}: {e}")),
            }
        }

        // dimensional samplers on the same manifests
        for dim in [Dimension::Valence, Dimension::Arousal] {
            let spec = ShiftSpec {
                instances_per_run: 8,
                ..ShiftSpec::new(dim)
            };
            if let Ok(runs) = sample_shift(&manifest, &spec, case, 2) {
                for t in runs.iter().flatten() {
                    emitted += 1;
                    let rep = validate_shift(t, &manifest, &spec).unwrap();
                    if !rep.passed() || spec.margin != DEFAULT_MARGIN {
                        failures.push(format!("case {case} shift {dim}: {:?}", rep.failures()));
                    }
                }
            } else {
                refused += 1;
            }
            let pair_spec = PairSpec {
                pairs_per_run: 8,
                ..PairSpec::new(dim)
            };
            if let Ok(runs) = sample_monotonic_pairs(&manifest, &pair_spec, case, 2) {
                for run in &runs {
                    let unique: HashSet<_> = run.iter().map(|p| (&p.i_id, &p.j_id)).collect();
                    if unique.len() != run.len() {
                        failures.push(format!("case {case} pairs {dim}: duplicate pair"));
                    }
                    for p in run {
                        emitted += 1;
                        let rep = validate_pair(p, &manifest, &pair_spec).unwrap();
                        if !rep.passed() {
                            failures.push(format!("case {case} pairs {dim}: {:?}", rep.failures()));
                        }
                    }
                }
            } else {
                refused += 1;
            }
        }
    }
    check(
        "sampler soundness",
        failures.is_empty() && emitted > 0 && refused > 0,
        format!(
            "{emitted} instances validated, {refused} requests refused, {} problems{}",
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    );
}

// ---------------------------------------------------------------------------

#[test]
fn dimensional_sensitivity_extremes() {
    let manifest = scored_manifest(4000, 12);
    let runs = 5;
    let mut pass = true;
    let mut details = Vec::new();

    for dim in [Dimension::Valence, Dimension::Arousal] {
        let score = |id: &str| dim.score(manifest.get(id).unwrap()).unwrap().as_f64();
        let planted = move |a: &str, b: &str| 1.0 - (score(a) - score(b)).abs() / 4.0;

        let pairs = sample_monotonic_pairs(&manifest, &PairSpec::new(dim), 3, runs).unwrap();
        let rhos: Vec<f64> = pairs.iter().map(|p| monotonicity(p, &planted).unwrap()).collect();
        let shift = sample_shift(&manifest, &ShiftSpec::new(dim), 4, runs).unwrap();
        let shift_acc: Vec<f64> = shift.iter().map(|t| triplet_accuracy(t, &planted).unwrap()).collect();
        let planted_ok = rhos.iter().all(|r| (r + 1.0).abs() <= 1e-9) && shift_acc.iter().all(|&a| a == 1.0);
        pass &= planted_ok;

        let matrix = random_matrix(&manifest, 32, 100 + dim as u64, 0);
        let mu = compute_mu(&matrix, manifest.ids()).unwrap();
        let space = SimilaritySpace::centered(&matrix, mu);
        let null_rhos: Vec<f64> = pairs.iter().map(|p| monotonicity(p, &space).unwrap()).collect();
        let null_acc: Vec<f64> = shift.iter().map(|t| triplet_accuracy(t, &space).unwrap()).collect();
        let (rho_mean, _) = aggregate_runs(&null_rhos).unwrap();
        let (acc_mean, _) = aggregate_runs(&null_acc).unwrap();
        let null_ok = rho_mean.abs() < 0.1 && (acc_mean - 0.5).abs() <= 0.04;
        pass &= null_ok;
        details.push(format!(
            "{dim}: planted rho={:.12} shift={:.2}%, affect-free rho={rho_mean:+.3} shift={:.2}%",
            rhos.iter().sum::<f64>() / rhos.len() as f64,
            shift_acc.iter().sum::<f64>() / shift_acc.len() as f64 * 100.0,
            acc_mean * 100.0
        ));
    }
    check("dimensional sensitivity", pass, details.join("; "));
}

// ---------------------------------------------------------------------------

#[test]
fn layer_sweep_coherence() {
    let manifest = crossed_manifest(6, 6, 2);
    let dir = tempfile::tempdir().unwrap();
    let l0 = random_matrix(&manifest, 32, 1, 0);
    let mut l1 = planted_matrix(&manifest, (1.0, 0.2, 0.2), 0.3, 32, 2);
    l1.layer_id = 1;
    let root = dir.path();
    emosim_core::store::write_matrix(&l0, emosim_core::store::layer_path(root, "enc", 0)).unwrap();
    emosim_core::store::write_matrix(&l1, emosim_core::store::layer_path(root, "enc", 1)).unwrap();
    let loaded: Vec<EmbeddingMatrix> = [1, 0]
        .into_iter()
        .map(|l| emosim_core::store::load_layer(root, "enc", l).unwrap())
        .collect();

    let task = EvalTask::Categorical(ScenarioSpec::with_instances(ScenarioKind::Unconstrained, 400));
    let setup = EvalSetup {
        seed: 5,
        runs: 5,
        ..EvalSetup::default()
    };
    let curve = layer_sweep(&task, &[1, 0], &manifest, &loaded, &setup).unwrap();
    let values = curve.values();
    let layers: Vec<u32> = curve.points.iter().map(|(l, _)| *l).collect();
    let increasing = layers == [0, 1] && values.windows(2).all(|w| w[0] < w[1]);

    let same: Vec<EmbeddingMatrix> = (0..3)
        .map(|l| {
            let mut m = l1.clone();
            m.layer_id = l;
            m
        })
        .collect();
    let flat_curve = layer_sweep(&task, &[0, 1, 2], &manifest, &same, &setup).unwrap();
    let flat = flat_curve.values().windows(2).all(|w| w[0] == w[1]);

    let digests: HashSet<&str> = curve
        .points
        .iter()
        .chain(&flat_curve.points)
        .map(|(_, r)| r.instance_digest.as_deref().unwrap())
        .collect();
    let independent = task.sample(&manifest, setup.seed, setup.runs).unwrap();
    let reused = digests.len() == 1 && digests.contains(independent.digest().as_str());
    let per_layer = evaluate_instances(&task, &independent, &manifest, &loaded[0], &setup).unwrap();
    let consistent = per_layer.mean == values[1];

    let missing = matches!(
        layer_sweep(&task, &[0, 4], &manifest, &loaded, &setup),
        Err(emosim_core::eval::EvalError::MissingLayer(4))
    );
    check(
        "layer sweep coherence",
        increasing && flat && reused && consistent && missing,
        format!(
            "L0={:.2}% L1={:.2}%, identical layers flat={flat}, one instance digest across layers={reused}",
            values[0] * 100.0,
            values[1] * 100.0
        ),
    );
}

// ---------------------------------------------------------------------------

/// Twenty hand-written vote patterns over five raters (A, B, T = tie).
const FIXTURE: [&str; 20] = [
    "AAAAA", "AAAAB", "AAAAT", "AAABT", "AABBT", "BBBBB", "BBBBA", "BBBBT", "BBBAA", "TTTTA", "TTTTT", "ABTAB",
    "AAATT", "BBTTT", "ABABA", "BBBTB", "TAAAA", "BABBB", "ATBTA", "BBABB",
];
/// Triplets with at least four matching A or B votes.
const EXPECTED_RETAINED: [(usize, Candidate); 10] = [
    (0, Candidate::A),
    (1, Candidate::A),
    (2, Candidate::A),
    (5, Candidate::B),
    (6, Candidate::B),
    (7, Candidate::B),
    (15, Candidate::B),
    (16, Candidate::A),
    (17, Candidate::B),
    (19, Candidate::B),
];

#[test]
fn human_alignment_offline() {
    let pool: Vec<PreferenceTriplet> = (0..20)
        .map(|i| PreferenceTriplet {
            triplet_id: format!("T{i:02}"),
            ref_id: format!("ref{i}"),
            candidate_a_id: format!("a{i}"),
            candidate_b_id: format!("b{i}"),
            source_dataset: if i < 10 { "S1".into() } else { "S2".into() },
        })
        .collect();
    // write the fixture in the annotation log format, then read it back
    let mut entries = Vec::new();
    for (i, pattern) in FIXTURE.iter().enumerate() {
        for (rater, c) in pattern.chars().enumerate() {
            let rater_id = format!("r{rater}");
            let triplet_id = format!("T{i:02}");
            entries.push(LogEntry::Presentation(PresentationRecord {
                triplet_id: triplet_id.clone(),
                rater_id: rater_id.clone(),
                left_slot: Candidate::A,
                right_slot: Candidate::B,
                issued_at: 0,
            }));
            let choice = match c {
                'A' => Choice::A,
                'B' => Choice::B,
                _ => Choice::Tie,
            };
            entries.push(LogEntry::Vote(VoteRecord {
                triplet_id,
                rater_id,
                choice,
                timestamp: 1,
            }));
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("votes.jsonl");
    std::fs::write(&log, encode_log(&entries)).unwrap();
    let votes = read_votes(&log).unwrap();

    let report = emosim_core::alignment::consensus_filter(&pool, &votes, 5, Threshold::default()).unwrap();
    let retained: Vec<(usize, Candidate)> = report
        .retained
        .iter()
        .map(|c| (c.triplet.triplet_id[1..].parse().unwrap(), c.h))
        .collect();
    let consensus_ok = retained == EXPECTED_RETAINED && report.incomplete.is_empty();

    let table: Vec<Vec<u32>> = tally(&pool, &votes).unwrap().values().map(|c| c.to_vec()).collect();
    let kappa = fleiss_kappa(&table).unwrap();
    let oracle = {
        // direct formula over the hand-written patterns
        let n = 5.0;
        let rows: Vec<[f64; 3]> = FIXTURE
            .iter()
            .map(|p| {
                let count = |ch| p.chars().filter(|&c| c == ch).count() as f64;
                [count('A'), count('B'), count('T')]
            })
            .collect();
        let p_bar = rows
            .iter()
            .map(|r| (r.iter().map(|c| c * c).sum::<f64>() - n) / (n * (n - 1.0)))
            .sum::<f64>()
            / 20.0;
        let p_e: f64 = (0..3)
            .map(|j| (rows.iter().map(|r| r[j]).sum::<f64>() / 100.0).powi(2))
            .sum();
        (p_bar - p_e) / (1.0 - p_e)
    };
    let kappa_ok = (kappa - oracle).abs() <= 1e-12;

    // planted metric: the human-preferred candidate duplicates the reference
    let mut r = rng(8);
    let mut rows = Vec::new();
    for c in &report.retained {
        let t = &c.triplet;
        let v: Vec<f32> = gaussian(&mut r, 16, 1.0).into_iter().map(|x| x as f32).collect();
        let w: Vec<f32> = gaussian(&mut r, 16, 1.0).into_iter().map(|x| x as f32).collect();
        let (same, other) = match c.h {
            Candidate::A => (&t.candidate_a_id, &t.candidate_b_id),
            Candidate::B => (&t.candidate_b_id, &t.candidate_a_id),
        };
        rows.push((t.ref_id.clone(), v.clone()));
        rows.push((same.clone(), v));
        rows.push((other.clone(), w));
    }
    let m = EmbeddingMatrix::from_rows("planted", 0, rows).unwrap();
    let mu = compute_mu(&m, m.sorted_index().into_iter().map(|(id, _)| id)).unwrap();
    let space = SimilaritySpace::centered(&m, mu);
    let aligned = alignment_accuracy(&report.retained, &space).unwrap();
    let inverted: Vec<ConsensusTriplet> = report
        .retained
        .iter()
        .map(|c| ConsensusTriplet {
            h: c.h.other(),
            ..c.clone()
        })
        .collect();
    let misaligned = alignment_accuracy(&inverted, &space).unwrap();

    check(
        "human alignment offline",
        consensus_ok && kappa_ok && aligned.accuracy == 1.0 && misaligned.accuracy == 0.0,
        format!(
            "retained {}/20 as expected={consensus_ok}, kappa={kappa:.6} oracle={oracle:.6}, accuracy planted={} inverted={}",
            report.retained.len(),
            aligned.accuracy,
            misaligned.accuracy
        ),
    );
}
