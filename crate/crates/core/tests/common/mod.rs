//! Synthetic corpora and embeddings shared by the integration tests.
#![allow(dead_code)]

use std::io::Write;

use emosim_core::corpus::CorpusManifest;
use emosim_core::{EmbeddingMatrix, EmotionLabel, Score, UtteranceRecord};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    emosim_core::seed::rng_from(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

pub fn record(id: String, speaker: String, text: String, emotion: EmotionLabel) -> UtteranceRecord {
    UtteranceRecord {
        id,
        dataset_id: "SYN".into(),
        speaker_id: speaker,
        linguistic_id: text,
        emotion,
        valence: None,
        arousal: None,
        audio_path: None,
        duration_s: None,
    }
}

/// Every emotion x speaker x text cell filled with `takes` utterances.
pub fn crossed_manifest(speakers: usize, texts: usize, takes: usize) -> CorpusManifest {
    let mut records = Vec::new();
    for e in EmotionLabel::ALL {
        for s in 0..speakers {
            for t in 0..texts {
                for k in 0..takes {
                    records.push(record(
                        format!("{e}_s{s}_t{t}_k{k}"),
                        format!("s{s}"),
                        format!("t{t}"),
                        e,
                    ));
                }
            }
        }
    }
    CorpusManifest::from_records("SYN", records).unwrap()
}

/// Rows are `alpha * emotion + beta * speaker + gamma * text + noise`, each
/// centroid a standard Gaussian vector.
pub fn planted_matrix(
    manifest: &CorpusManifest,
    weights: (f64, f64, f64),
    noise: f64,
    dim: usize,
    seed: u64,
) -> EmbeddingMatrix {
    let (alpha, beta, gamma) = weights;
    let mut rng = rng(seed);
    let mut centroids = std::collections::HashMap::new();
    let mut centroid =
        |key: String, rng: &mut ChaCha8Rng| centroids.entry(key).or_insert_with(|| gaussian(rng, dim, 1.0)).clone();
    let rows: Vec<(String, Vec<f32>)> = manifest
        .records
        .iter()
        .map(|r| {
            let e = centroid(format!("e:{}", r.emotion), &mut rng);
            let s = centroid(format!("s:{}", r.speaker_id), &mut rng);
            let t = centroid(format!("t:{}", r.linguistic_id), &mut rng);
            let n = gaussian(&mut rng, dim, noise);
            let row = (0..dim)
                .map(|d| (alpha * e[d] + beta * s[d] + gamma * t[d] + n[d]) as f32)
                .collect();
            (r.id.clone(), row)
        })
        .collect();
    EmbeddingMatrix::from_rows("planted", 0, rows).unwrap()
}

/// Independent Gaussian rows carrying no structure at all.
pub fn random_matrix(manifest: &CorpusManifest, dim: usize, seed: u64, layer: u32) -> EmbeddingMatrix {
    let mut rng = rng(seed);
    let rows: Vec<(String, Vec<f32>)> = manifest
        .records
        .iter()
        .map(|r| {
            (
                r.id.clone(),
                gaussian(&mut rng, dim, 1.0).into_iter().map(|v| v as f32).collect(),
            )
        })
        .collect();
    EmbeddingMatrix::from_rows("random", layer, rows).unwrap()
}

/// Records with valence and arousal on coarse grids, emotions cycling.
pub fn scored_manifest(n: usize, seed: u64) -> CorpusManifest {
    let mut rng = rng(seed);
    let records = (0..n)
        .map(|i| {
            let mut r = record(
                format!("u{i:05}"),
                format!("s{}", rng.random_range(0..20)),
                format!("t{}", rng.random_range(0..50)),
                EmotionLabel::ALL[i % 4],
            );
            r.valence = Score::from_hundredths(100 + 50 * rng.random_range(0..9u16));
            r.arousal = Score::from_hundredths(100 + 100 * rng.random_range(0..5u16));
            r
        })
        .collect();
    CorpusManifest::from_records("SYN", records).unwrap()
}

/// Prints one criterion line past the test harness's output capture.
pub fn report(name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "[{status}] {name}: {detail}").unwrap();
}
