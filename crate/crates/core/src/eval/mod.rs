//! Frame scoring, micro-AUC, run configuration and experiment runners.

mod auc;
mod config;
mod experiments;
mod scores;

pub use auc::{micro_auc, roc_curve, RocPoint};
pub use config::{BenchmarkConfig, ExperimentConfig, Paths, ZeroTrainConfig};
pub use experiments::{
    benchmark_datasets, evaluate, graph_for, load_role, param_audit, roc, run_contamination,
    run_noise_robustness, run_zero_training, segment_tracks, synth_benchmark, train,
    write_benchmark, write_rows, BenchmarkTracks, ContaminationRow, Datasets, EpochLoss,
    Evaluation, NoiseRow, TrainOutcome, ZeroTrainRow,
};
pub use scores::{
    frame_scores, score_segments, write_frame_scores, write_score_table, Aggregation, FrameScores,
    ScoreRow, ScoreTable, ScoringConfig,
};
