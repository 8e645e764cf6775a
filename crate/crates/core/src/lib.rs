//! Validation harness for embedding-based emotion similarity metrics.
//!
//! The crate covers the whole offline pipeline: corpus manifests and label
//! unification, the `.aemb` embedding store, mean-centred cosine similarity,
//! constraint-governed triplet and pair sampling, the statistics used to score
//! a metric (triplet accuracy, Spearman's rho, exact binomial test, Fleiss'
//! kappa), the annotation service state machine, and report rendering.

pub mod alignment;
pub mod annotation;
pub mod calibration;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod report;
pub mod sampler;
pub mod seed;
pub mod stats;
pub mod store;

pub use alignment::{
    alignment_accuracy, consensus_filter, fleiss_kappa, AlignmentOutcome, Choice, ConsensusTriplet, PreferenceTriplet,
    Threshold, VoteRecord,
};
pub use calibration::{
    anisotropy_report, compute_mu, cosine, emo_sim, CalibrationMode, CalibrationVector, DistributionSummary,
    SimilarityScore, SimilaritySpace,
};
pub use config::HarnessConfig;
pub use corpus::{
    filter_zero_shot, load_manifest, map_label, CorpusManifest, EmotionLabel, LabelMap, Score, ScoreDelta,
    UtteranceRecord, ZeroShot,
};
pub use error::{Error, ErrorClass, Result};
pub use eval::{
    aggregate_runs, layer_sweep, monotonicity, triplet_accuracy, EvalResult, EvalTask, LayerCurve, Similarity, TaskKind,
};
pub use sampler::{
    sample_categorical, sample_monotonic_pairs, sample_shift, validate_instance, Dimension, InstanceTag, PairInstance,
    PairSpec, ScenarioKind, ScenarioSpec, ShiftSpec, TripletInstance,
};
pub use stats::{binomial_two_sided, spearman_rho};
pub use store::{mean_pool, read_matrix, write_matrix, EmbeddingMatrix, FrameMatrix, LayerSelector};
