//! Ranking metrics, evaluation over held-out events and experiment drivers.

pub mod config;
pub mod evaluate;
pub mod experiment;
pub mod explain;
pub mod gradcheck;
pub mod metrics;

pub use config::{
    cached_index, dataset_records, load_data, model_with_params, write_prepared, DataConfig, EvalConfig, RunConfig,
    CACHE_ENV,
};
pub use evaluate::{evaluate, evaluation_inputs, rank_training, rank_users, Target};
pub use experiment::{
    build_model, paired_t_test, run_ablation_suite, simulated_dataset, train_and_test, AblationReport, AblationRow,
};
pub use explain::{export_attention, write_attention, AttentionRecord};
pub use gradcheck::{gradcheck_suite, toy_batch, toy_instance, toy_model, ModuleCheck};
pub use metrics::{metrics_at_k, rank_ground_truth, MetricValues, MetricsReport, RankingResult};
