//! Standard-library companion to `fedgate-core`: TOML experiment configs,
//! CSV dataset import, a threaded round executor, and the report writers
//! behind the `fedgate` binary.

pub mod config;
pub mod import;
pub mod output;
pub mod runner;
