//! Desk-scale synthetic multi-task experiments.

pub mod experiments;
pub mod report;
pub mod tasks;
pub mod train;

pub use experiments::*;
pub use report::{ExperimentReport, RoutingStats, SeedLosses, VariantResult};
pub use tasks::{gen_tasks, SyntheticTask, TaskSpec, TaskSuite};
pub use train::{evaluate, train, LossCurves, TrainSettings, Trained, Variant, VariantKind};
