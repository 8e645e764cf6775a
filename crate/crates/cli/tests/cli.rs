use std::fs;
use std::path::{Path, PathBuf};

use emosim_cli::main_with;
use emosim_core::alignment::Candidate;
use emosim_core::annotation::{encode_log, LogEntry, PresentationRecord};
use emosim_core::store::layer_path;
use emosim_core::{write_matrix, Choice, EmbeddingMatrix, EvalResult, PreferenceTriplet, VoteRecord};

const EMOTIONS: [&str; 4] = ["neutral", "happy", "sad", "angry"];

/// xorshift, enough to make embeddings look unstructured.
fn noise(state: &mut u64) -> f32 {
    *state ^= *state << 13;
    *state ^= *state >> 7;
    *state ^= *state << 17;
    (*state % 2001) as f32 / 1000.0 - 1.0
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let mut lines = Vec::new();
        let mut ids = Vec::new();
        let mut n = 0;
        for (e, emotion) in EMOTIONS.iter().enumerate() {
            for s in 0..4 {
                for t in 0..4 {
                    for k in 0..2 {
                        let id = format!("u{n:03}");
                        n += 1;
                        let valence = 1.0 + ((e + s + k) % 5) as f64;
                        let arousal = 1.0 + ((e * 2 + t) % 5) as f64;
                        lines.push(format!(
                            r#"{{"id":"{id}","dataset_id":"CREMA-D","speaker_id":"s{s}","linguistic_id":"t{t}","emotion_raw":"{emotion}","valence":{valence},"arousal":{arousal}}}"#
                        ));
                        ids.push((id, e));
                    }
                }
            }
        }
        fs::write(root.join("crema.jsonl"), lines.join("\n") + "\n").unwrap();

        let emb = root.join("emb");
        let mut state = 0x9e3779b97f4a7c15u64;
        for model in ["hubert", "e2v+base"] {
            for layer in 0..3u32 {
                // later layers carry more emotion signal
                let signal = layer as f32;
                let rows: Vec<(String, Vec<f32>)> = ids
                    .iter()
                    .map(|(id, e)| {
                        let v = (0..8)
                            .map(|d| noise(&mut state) + if d == *e { signal } else { 0.0 })
                            .collect();
                        (id.clone(), v)
                    })
                    .collect();
                let m = EmbeddingMatrix::from_rows(model, layer, rows).unwrap();
                write_matrix(&m, layer_path(&emb, model, layer)).unwrap();
            }
        }
        Fixture { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> String {
        self.root.join(rel).display().to_string()
    }

    fn run(&self, args: &[&str]) -> i32 {
        main_with(std::iter::once("emosim").chain(args.iter().copied()))
    }
}

fn read_results(path: &Path) -> Vec<EvalResult> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn usage_errors_exit_1() {
    let f = Fixture::new();
    assert_eq!(f.run(&["frobnicate"]), 1);
    assert_eq!(f.run(&["--help"]), 0);
    let manifest = f.path("crema.jsonl");
    // shift without a dimension
    assert_eq!(
        f.run(&["sample", "shift", "--manifest", &manifest, "--out", &f.path("s")]),
        1
    );
    assert_eq!(
        f.run(&[
            "sample",
            "categorical",
            "--dimension",
            "valence",
            "--manifest",
            &manifest,
            "--out",
            &f.path("s")
        ]),
        1
    );
    fs::write(f.root.join("bad.toml"), "nonsense = true").unwrap();
    assert_eq!(f.run(&["run", "--config", &f.path("bad.toml")]), 1);
}

#[test]
fn ingest_reports_coverage() {
    let f = Fixture::new();
    let manifest = f.path("crema.jsonl");
    let emb = f.path("emb");
    assert_eq!(f.run(&["ingest", "--manifest", &manifest]), 0);
    assert_eq!(
        f.run(&[
            "ingest",
            "--manifest",
            &manifest,
            "--embeddings-dir",
            &emb,
            "--model",
            "hubert"
        ]),
        0
    );
    // a manifest naming an utterance the store lacks
    let mut text = fs::read_to_string(&manifest).unwrap();
    text.push_str(
        r#"{"id":"ghost","dataset_id":"CREMA-D","speaker_id":"s0","linguistic_id":"t0","emotion_raw":"sad"}"#,
    );
    fs::write(f.root.join("ghost.jsonl"), text).unwrap();
    let ghost = f.path("ghost.jsonl");
    assert_eq!(
        f.run(&[
            "ingest",
            "--manifest",
            &ghost,
            "--embeddings-dir",
            &emb,
            "--model",
            "hubert"
        ]),
        2
    );
    assert_eq!(f.run(&["ingest", "--manifest", &f.path("missing.jsonl")]), 2);
}

#[test]
fn calibrate_writes_mu_per_layer() {
    let f = Fixture::new();
    let out = f.path("cal");
    let code = f.run(&[
        "calibrate",
        "--manifest",
        &f.path("crema.jsonl"),
        "--embeddings-dir",
        &f.path("emb"),
        "--model",
        "hubert",
        "--layers",
        "all",
        "--pairs",
        "200",
        "--out",
        &out,
    ]);
    assert_eq!(code, 0);
    for l in 0..3 {
        assert!(f.root.join(format!("cal/hubert/CREMA-D/L{l}.mu")).exists());
    }
    let lines = fs::read_to_string(f.root.join("cal/hubert/CREMA-D/anisotropy.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 3);
}

#[test]
fn sample_then_replay_matches_direct_eval() {
    let f = Fixture::new();
    let manifest = f.path("crema.jsonl");
    let emb = f.path("emb");
    let common = ["--runs", "3", "--instances", "40", "--seed", "9"];

    let mut args = vec![
        "sample",
        "categorical",
        "--scenario",
        "speaker_distractor",
        "--manifest",
        &manifest,
    ];
    args.extend(common);
    let out = f.path("samples");
    args.extend(["--out", &out]);
    assert_eq!(f.run(&args), 0);
    let sampled = f.root.join("samples/categorical_speaker_distractor.jsonl");
    assert_eq!(fs::read_to_string(&sampled).unwrap().lines().count(), 120);

    let direct_out = f.path("direct");
    let mut direct = vec![
        "eval",
        "categorical",
        "--scenario",
        "speaker_distractor",
        "--manifest",
        &manifest,
        "--embeddings-dir",
        &emb,
        "--model",
        "hubert",
        "--layers",
        "2",
    ];
    direct.extend(common);
    direct.extend(["--out", &direct_out]);
    assert_eq!(f.run(&direct), 0);

    let sampled_str = sampled.display().to_string();
    let replay_out = f.path("replay");
    let mut replay = direct.clone();
    replay.truncate(replay.len() - 2);
    replay.extend(["--from", &sampled_str, "--out", &replay_out]);
    assert_eq!(f.run(&replay), 0);

    let a = read_results(&f.root.join("direct/results.jsonl"));
    let b = read_results(&f.root.join("replay/results.jsonl"));
    assert_eq!(a.len(), 1);
    assert_eq!(a[0].per_run_values, b[0].per_run_values);
    assert_eq!(a[0].instance_digest, b[0].instance_digest);
    assert_eq!(a[0].layer_id, 2);
    assert_eq!(a[0].n_runs, 3);

    // replaying instances of another scenario is a data error
    let mut wrong = replay.clone();
    let pos = wrong.iter().position(|a| *a == "speaker_distractor").unwrap();
    wrong[pos] = "unconstrained";
    assert_eq!(f.run(&wrong), 2);
}

#[test]
fn infeasible_sampling_exits_2() {
    let f = Fixture::new();
    let code = f.run(&[
        "sample",
        "categorical",
        "--scenario",
        "linguistic_distractor",
        "--manifest",
        &f.path("crema.jsonl"),
        "--instances",
        "100000",
        "--out",
        &f.path("s"),
    ]);
    assert_eq!(code, 2);
    // the other scenarios are feasible, but nothing is written
    let code = f.run(&[
        "sample",
        "categorical",
        "--manifest",
        &f.path("crema.jsonl"),
        "--instances",
        "5000",
        "--out",
        &f.path("all"),
    ]);
    assert_eq!(code, 2);
    assert!(!f.root.join("all").exists());
}

#[test]
fn excluded_pair_is_recorded_not_evaluated() {
    let f = Fixture::new();
    let out = f.path("excluded");
    let code = f.run(&[
        "eval",
        "categorical",
        "--scenario",
        "unconstrained",
        "--manifest",
        &f.path("crema.jsonl"),
        "--embeddings-dir",
        &f.path("emb"),
        "--model",
        "e2v+base",
        "--out",
        &out,
    ]);
    assert_eq!(code, 0);
    assert_eq!(fs::read_to_string(f.root.join("excluded/results.jsonl")).unwrap(), "");
    let excluded = fs::read_to_string(f.root.join("excluded/exclusions.jsonl")).unwrap();
    assert!(excluded.contains(r#""model_id":"e2v+base""#) && excluded.contains("unconstrained"));
    let report_out = f.path("excluded/report");
    let code = f.run(&[
        "report",
        "--results",
        &f.path("excluded/results.jsonl"),
        "--exclusions",
        &f.path("excluded/exclusions.jsonl"),
        "--out",
        &report_out,
    ]);
    assert_eq!(code, 0);
}

#[test]
fn probe_layers_and_report_round_trip() {
    let f = Fixture::new();
    let out = f.path("probe");
    let code = f.run(&[
        "probe-layers",
        "monotonicity",
        "--dimension",
        "arousal",
        "--manifest",
        &f.path("crema.jsonl"),
        "--embeddings-dir",
        &f.path("emb"),
        "--model",
        "hubert",
        "--runs",
        "2",
        "--instances",
        "60",
        "--out",
        &out,
    ]);
    assert_eq!(code, 0);
    let results = read_results(&f.root.join("probe/results.jsonl"));
    assert_eq!(results.iter().map(|r| r.layer_id).collect::<Vec<_>>(), [0, 1, 2]);
    assert!(results.windows(2).all(|w| w[0].instance_digest == w[1].instance_digest));
    let curve = fs::read_to_string(f.root.join("probe/curve_monotonicity_arousal.tsv")).unwrap();
    assert_eq!(curve.lines().count(), 4);

    let text = fs::read_to_string(f.root.join("probe/table_monotonicity.txt")).unwrap();
    assert!(text.contains("L0") && text.contains("L2"));
    let again = f.path("probe/again");
    let code = f.run(&[
        "report",
        "--results",
        &f.path("probe/results.jsonl"),
        "--layout",
        "layers",
        "--out",
        &again,
    ]);
    assert_eq!(code, 0);
    assert_eq!(
        fs::read_to_string(f.root.join("probe/again/table_monotonicity.txt")).unwrap(),
        text
    );
    assert_eq!(f.run(&["report", "--tsv", &f.path("probe/table_monotonicity.tsv")]), 0);
}

#[test]
fn align_human_from_annotation_log() {
    let f = Fixture::new();
    // reference and candidate A share an emotion; B differs
    let pool: Vec<PreferenceTriplet> = (0..6)
        .map(|i| PreferenceTriplet {
            triplet_id: format!("T{i}"),
            ref_id: format!("u{:03}", i * 2),
            candidate_a_id: format!("u{:03}", i * 2 + 1),
            candidate_b_id: format!("u{:03}", 64 + i),
            source_dataset: "CREMA-D".into(),
        })
        .collect();
    let pool_text: String = pool.iter().map(|t| serde_json::to_string(t).unwrap() + "\n").collect();
    fs::write(f.root.join("pool.jsonl"), pool_text).unwrap();
    let mut entries = Vec::new();
    for t in &pool {
        for r in 0..5 {
            let rater_id = format!("r{r}");
            entries.push(LogEntry::Presentation(PresentationRecord {
                triplet_id: t.triplet_id.clone(),
                rater_id: rater_id.clone(),
                left_slot: Candidate::B,
                right_slot: Candidate::A,
                issued_at: 0,
            }));
            entries.push(LogEntry::Vote(VoteRecord {
                triplet_id: t.triplet_id.clone(),
                rater_id,
                choice: if r == 4 && t.triplet_id == "T0" {
                    Choice::Tie
                } else {
                    Choice::A
                },
                timestamp: 1,
            }));
        }
    }
    fs::write(f.root.join("votes.jsonl"), encode_log(&entries)).unwrap();
    let out = f.path("align");
    let code = f.run(&[
        "align-human",
        "--pool",
        &f.path("pool.jsonl"),
        "--votes",
        &f.path("votes.jsonl"),
        "--embeddings-dir",
        &f.path("emb"),
        "--model",
        "hubert",
        "--out",
        &out,
    ]);
    assert_eq!(code, 0);
    let results = read_results(&f.root.join("align/results.jsonl"));
    assert_eq!(results.len(), 1);
    assert!(results[0].p_value.is_some());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.root.join("align/alignment.json")).unwrap()).unwrap();
    assert_eq!(summary["retained"], 6);
    assert_eq!(summary["outcome"]["n"], 6);
    assert!(f.root.join("align/table_human_alignment.txt").exists());
}

#[test]
fn run_config_end_to_end() {
    let f = Fixture::new();
    fs::write(
        f.root.join("run.toml"),
        r#"
manifests = ["crema.jsonl"]
embeddings_dir = "emb"
tasks = ["categorical:unconstrained", "shift:valence"]
runs = 2
instances = 30
out = "out"

[[models]]
id = "hubert"

[[models]]
id = "e2v+base"
"#,
    )
    .unwrap();
    assert_eq!(f.run(&["run", "--config", &f.path("run.toml")]), 0);
    let text = fs::read_to_string(f.root.join("out/table_categorical.txt")).unwrap();
    let row = text.lines().find(|l| l.starts_with("CREMA-D unconstrained")).unwrap();
    assert!(row.trim_end().ends_with('-'), "{row}");
    assert!(f.root.join("out/table_shift.tsv").exists());

    // a model with no embeddings fails its job with a data error
    let cfg = fs::read_to_string(f.root.join("run.toml"))
        .unwrap()
        .replace("e2v+base", "tera");
    fs::write(f.root.join("run.toml"), cfg).unwrap();
    assert_eq!(f.run(&["run", "--config", &f.path("run.toml")]), 2);
    assert!(fs::read_to_string(f.root.join("out/failures.jsonl"))
        .unwrap()
        .contains("tera"));
}
