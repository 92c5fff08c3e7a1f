//! MIDGN — multi-view intent-disentangling graph network for bundle
//! recommendation.
//!
//! The model slices user and bundle embeddings into intent chunks, runs
//! neighbor-routing disentangling layers over the user-item graph (global
//! view) and the bundle-item graph (local view), exchanges the two views over
//! the user-bundle graph, aligns per-intent chunks across views with an
//! InfoNCE objective, and trains with BPR under alternating optimization.
//!
//! Everything is framework-free: sparse kernels, hand-derived backward
//! passes and the optimizer live in this crate.

pub mod contrast;
pub mod crossview;
pub mod data;
pub mod disentangle;
pub mod error;
pub mod eval;
pub mod graph;
pub mod mat;
pub mod model;
pub mod params;
pub mod synth;

pub use contrast::{info_nce_loss, ContrastBatch};
pub use crossview::{cross_propagate, CrossViewState};
pub use data::{
    load_interactions, sample_triples, split_interactions, validate_stats, write_interactions,
    InteractionMatrix, SplitDataset, StatsReport, TrainingTriple,
};
pub use disentangle::{
    disentangle_layer, disentangle_stack, dump_confidence_tsv, init_confidence,
    normalize_confidence, plain_propagate, route_iteration, ChunkedNodeState, IntentConfidence,
};
pub use error::{Error, Result};
pub use eval::{evaluate, evaluate_split, ndcg_at_k, recall_at_k, RankingReport};
pub use graph::{BipartiteGraph, EdgeIndex, Side};
pub use mat::Mat;
pub use model::{
    backward, batches_per_epoch, bpr_loss, contrast_objective, full_forward, predict_all,
    run_training, score_pair, score_pairs, Alternation, EpochMetrics, EpochRecord, ForwardOutputs,
    ModelConfig, ModelGraphs, OutputGrads, TrainOptions, TrainOutcome, Trainer,
};
pub use params::{
    adam_step, finite_difference_check, init_parameters, load_checkpoint, save_checkpoint,
    FdReport, GradientBuffer, InitScheme, OptimizerConfig, ParamCoord, ParameterStore,
};
pub use synth::{generate_synthetic, intent_alignment, GroundTruth, SynthConfig, SyntheticDataset};
