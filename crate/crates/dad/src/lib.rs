//! Configuration files, datasets on disk, checkpoints and the drivers behind
//! the `dad` command-line tool. The model itself lives in `dad-core`.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod dataset;
mod error;
pub mod run;

pub use error::{Error, Result};

/// Text table of the analytical receptive fields.
pub fn rf_report(branch_channels: usize) -> String {
    let mut out = format!("{:<18} {:<12} {:>6}\n", "module", "path", "rf");
    for row in dad_core::blocks::receptive_field_table(branch_channels) {
        out.push_str(&format!("{:<18} {:<12} {:>6}\n", row.module, row.path, row.receptive_field));
    }
    out
}
