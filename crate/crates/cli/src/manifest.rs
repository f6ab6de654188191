use crate::{to_json, write_file, CliError, Common};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::Path;
use std::time::Instant;

/// Written next to the outputs of every run as `<stem>.manifest.json`.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub subcommand: String,
    pub params: serde_json::Value,
    pub seed: Option<u64>,
    pub threads: usize,
    pub version: String,
    pub config_hash: Option<String>,
    pub outputs: Vec<String>,
    pub checks: serde_json::Value,
    pub wall_time_s: f64,
}

impl Manifest {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        subcommand: &str,
        params: serde_json::Value,
        common: &Common,
        seed: Option<u64>,
        config_hash: Option<String>,
        outputs: Vec<String>,
        checks: serde_json::Value,
        start: Instant,
    ) -> Self {
        Self {
            subcommand: subcommand.into(),
            params,
            seed: seed.or(common.seed),
            threads: common.threads,
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash,
            outputs,
            checks,
            wall_time_s: start.elapsed().as_secs_f64(),
        }
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<(), CliError> {
        let mut ignored = Vec::new();
        write_file(dir, &format!("{stem}.manifest.json"), &to_json(self), &mut ignored)
    }
}

pub fn config_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
