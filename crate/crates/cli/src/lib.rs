//! Scenario runner for the phenoauth stack: enroll groups, run sessions,
//! play attack games and benchmark primitives from one TOML config.

pub mod commands;
pub mod config;

pub use commands::{cmd_attack, cmd_auth, cmd_bench, cmd_enroll, AuthArgs, Outcome, Suite};
pub use config::{ScenarioConfig, TransportKind};
