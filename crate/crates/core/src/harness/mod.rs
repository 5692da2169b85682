//! Run orchestration: configuration, on-disk layout, pipeline commands,
//! multi-seed experiments and report aggregation.

pub mod commands;
pub mod config;
pub mod experiments;
pub mod layout;
pub mod report;

pub use commands::CommandSummary;
pub use config::RunConfig;
pub use report::{build_report, ExperimentReport};
