//! Orchestration library behind the `p3ovd` binary: resolved configuration,
//! artifact layout, the six pipeline stages and threshold sweeps.

pub mod config;
pub mod manifest;
pub mod stages;
pub mod sweep;

use anyhow::Result;
use std::path::PathBuf;

/// Resolve the artifact root: `--out-dir` beats `P3OVD_HOME` beats the
/// default `./p3ovd-artifacts`.
pub fn resolve_root(out_dir: Option<PathBuf>) -> PathBuf {
    out_dir
        .or_else(|| std::env::var_os("P3OVD_HOME").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("p3ovd-artifacts"))
}

/// Map an error chain to the documented exit codes: 2 for configuration and
/// usage problems, 3 for missing or malformed inputs, 1 otherwise.
pub fn exit_code_for(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<p3ovd::Error>() {
            return match e {
                p3ovd::Error::Config(_) | p3ovd::Error::Layout { .. } => 2,
                p3ovd::Error::Input(_) | p3ovd::Error::Codec { .. } => 3,
                p3ovd::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 3,
                _ => 1,
            };
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return 3;
            }
        }
    }
    1
}

/// Evenly spaced sweep grid, inclusive of both ends.
pub fn sweep_grid(from: f64, to: f64, steps: usize) -> Result<Vec<f64>> {
    anyhow::ensure!(steps >= 1, "sweep needs at least one step");
    if steps == 1 {
        return Ok(vec![from]);
    }
    Ok((0..steps)
        .map(|i| from + (to - from) * i as f64 / (steps - 1) as f64)
        .collect())
}
