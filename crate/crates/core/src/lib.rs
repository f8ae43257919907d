//! Incremental-shift OOD benchmark toolkit.
//!
//! Pipeline: embeddings ([`embed_store`]) are decomposed into semantic and covariate
//! halves ([`laid`]), test samples get shift degrees from k-NN distances to the ID set
//! and are binned into a level grid ([`shift`]), post-hoc detectors score classifier
//! outputs ([`scorers`]) and [`bench`] evaluates every grid cell with [`metrics`].
//! [`synis`] builds the synthetic style-prompt collection.

pub mod bench;
pub mod embed_store;
pub mod error;
pub mod knn;
pub mod laid;
pub mod matrix;
pub mod metrics;
pub mod scorers;
pub mod shift;
pub mod synis;

pub use bench::{
    emit_report, run_benchmark, run_benchmark_inputs, run_eval_config, BenchmarkConfig, BenchmarkInputs,
    EvaluationReport, RunSettings, ScorerEntry,
};
pub use embed_store::{
    normalize_store, read_store, write_store, ClassifierOutputs, EmbeddingRecord, EmbeddingStore, Modality,
};
pub use error::{Error, Result};
pub use knn::{kth_nn_distance, KnnIndex, Metric};
pub use laid::{
    build_triplet_corpus, train_decomposition, zero_shot_eval, DecompositionMatrix, FeaturePart, TextTriplet,
    TrainConfig, TripletCorpusSpec,
};
pub use matrix::Matrix;
pub use metrics::{aupr, auroc, fpr_at_tpr, level_correlation, level_sensitivity, Axis, DetectionMetric, LevelSeries};
pub use scorers::{FittedScorer, ScoreVector, ScorerSpec};
pub use shift::{
    derive_intervals, divide_dataset, measure_shifts, IntervalPolicy, IntervalSet, ShiftDegrees, SubsetIndex,
};
pub use synis::{export_generation_manifest, render_prompts, PromptRecord, StyleTemplate};
