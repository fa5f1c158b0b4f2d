//! File formats, the replication harness and table presets on top of
//! `netsim_core`. The `netsim` binary wraps these for the command line.

pub mod experiment;
pub mod files;
pub mod report;
pub mod tables;

pub use experiment::{run_experiment, CellSummary, ExperimentConfig, ExperimentReport, Load, RepRow};
pub use files::{load_network, parse_network, resolve_policy, two_station_three_buffer};
