//! Configuration-driven Monte-Carlo harness: empirical iterates, mean path,
//! bands, coverage and support metrics, CSV/JSON reports.

pub mod config;
pub mod report;
pub mod run;

pub use config::{Algorithm, ExperimentConfig, KernelKind, Problem};
pub use report::{emit_report, format_sig, MetricRow, RdaBiasEntry, Report, Summary};
pub use run::{
    excess_risk_of_average, run_band_only, run_experiment, run_lr_experiment, run_pca_experiment, run_rda_bias_check,
    step_index, support_proportions,
};
