//! Experiment orchestration: configuration, synthetic multi-site data,
//! site-held-out federated runs and report files.

mod config;
mod data;
mod metrics;
mod run;
mod train;

pub use config::{desk_model, parse_seeds, ExperimentConfig, OodSource, SEED_ENV};
pub use data::{build_site_datasets, features, mix_seed, partition_non_iid, Clip, SiteDatasets};
pub use metrics::{accuracy, macro_f1, ovr_auc, predictions, roc_curve, RocPoint};
pub use run::{
    emit_reports, held_out_site, run_experiment, run_fold, Abstention, ExperimentReport,
    FinalMetrics, FoldResult, RoundRow, SnrMetrics,
};
pub use train::{predict, CryObjective, TrainSpec};

#[cfg(test)]
mod tests;
