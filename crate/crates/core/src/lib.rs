//! Covariate-adjusted estimation of treatment effects in cross-over trials
//! with repeated measures within each period.

pub mod block;
pub mod cli;
pub mod configuration;
pub mod data;
pub mod error;
pub mod estimate;
pub mod hypothesis;
pub mod model;
pub mod report;
pub mod rng;
pub mod sim;

#[cfg(test)]
mod testutil;

pub use block::{BlockExchangeableMatrix, BlockInverse};
pub use data::{ingest_csv, CsvSchema, DroppedSubject, IngestReport, TrialDataset};
pub use configuration::{run_configuration, Configuration, ConfigurationRun};
pub use error::{Error, Result};
pub use model::{fit_wls, CovarianceStructure, FittedWorkingModel, MeanStructure, ModelSpec};
pub use estimate::{joint_effect, mu1, mu2, mu3, EffectEstimate, EstimatorKind, JointEffect};
pub use hypothesis::{iu_test, positive_control_test, TestConfig, TestKind, TestResult};
pub use sim::{fit_generator, run_study, simulate_trial, GeneratorModel, SimulationConfig, SimulationReport};
pub use report::{analyze, AnalysisOptions, AnalysisReport, Style};
