//! Experiment configuration, the end-to-end pipeline, diagnostics, and
//! report serialization.

pub mod config;
pub mod diagnostics;
pub mod report;
pub mod run;

pub use config::ExperimentConfig;
pub use diagnostics::{cos_sim_diagnostic, project_trajectories_2d, CosSimDiagnostic, Projection2D};
pub use report::{Metric, RunReport, Verdict};
pub use run::{eval_generated_weights, infer_weights, run_pipeline, PipelineOutput};
