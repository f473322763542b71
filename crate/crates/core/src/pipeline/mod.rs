//! End-to-end translation, experiment configuration, persistence and the
//! evaluation tables.

pub mod arrays;
pub mod config;
pub mod report;
pub mod run;
pub mod stages;

pub use config::ExperimentConfig;
pub use run::{
    run_ablation, run_cfg_sweep, sts_translate, AblationConfig, Evaluator, IdentityCodec, LatentCodec, MetricsRow,
    StsModels, Translation,
};
pub use stages::Workspace;
