//! Command-line front end: experiment configs, the per-seed pipeline,
//! manifests and SVG figures.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod svg;

pub use commands::RunOptions;
pub use config::{ConfigError, ExperimentConfig};

/// Process exit status for a failed command: 2 for configuration errors,
/// 3 for numeric failures, 4 for I/O and file-format failures, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<relufair::Error>() {
            if e.is_numeric() {
                return 3;
            }
            if e.is_io() || matches!(e, relufair::Error::Format { .. } | relufair::Error::Csv { .. }) {
                return 4;
            }
            return 1;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 4;
        }
    }
    1
}
