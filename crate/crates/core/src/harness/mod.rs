//! Config-driven experiment runs, comparison tables and charts.

pub mod compare;
pub mod config;
pub mod plot;
pub mod run;

pub use compare::{check_compatible, comparison_table};
pub use config::{DatasetSource, ExperimentConfig, FusionKind, ModelConfig, SEED_ENV};
pub use plot::{plot_csv, read_curves, render_svg};
pub use run::{metrics_csv, run_experiment, run_seed, RunManifest, SeedResult, MANIFEST_FILE};
