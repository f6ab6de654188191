//! `xi4`: command-line front end for the xi4-core library.
//!
//! Exit codes: 0 success, 2 usage or precondition error, 3 numeric failure,
//! 4 a verification suite reported a failed check.

mod manifest;
mod suite;

use clap::{Args, Parser, Subcommand, ValueEnum};
use manifest::{config_hash, Manifest};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;
use xi4_core::error::Error;
use xi4_core::green::{ball_green, infinite_green, torus_green};
use xi4_core::lattice::{Point, Torus};
use xi4_core::mc::{phi4_run_threads, wsaw_run_threads, Phi4Config, WalkConfig};

pub const OUT_DIR_ENV: &str = "XI4_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "xi4", version, about = "Free-field, flow and Monte Carlo tools for the 4-d |φ|⁴ model")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct Common {
    /// Random seed (overrides the seed in an mc config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Output directory [default: $XI4_OUT_DIR or ./xi4-out].
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
}

impl Common {
    fn out_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("xi4-out"))
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Tabulate the free two-point function.
    Green(GreenArgs),
    /// Run a named verification suite.
    Suite(suite::SuiteArgs),
    /// Monte Carlo from a config file.
    Mc(McArgs),
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "lowercase")]
enum GreenMode {
    Torus,
    Infinite,
}

#[derive(Args, Debug, Serialize)]
struct GreenArgs {
    #[arg(long, value_enum)]
    mode: GreenMode,
    #[arg(long = "L", default_value_t = 2)]
    l: usize,
    #[arg(long = "N", default_value_t = 3)]
    n: usize,
    #[arg(long)]
    m2: f64,
    /// Point as a,b,c,d (repeatable; infinite mode).
    #[arg(long = "x", value_parser = parse_point)]
    xs: Vec<Point>,
    /// Tabulate the ball |x| ≤ radius (infinite mode).
    #[arg(long)]
    radius: Option<f64>,
    /// Output file stem.
    #[arg(long, default_value = "green")]
    out: String,
}

#[derive(Args, Debug, Serialize)]
struct McArgs {
    /// TOML config with `model = "phi4" | "wsaw"` and a matching section.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "mc")]
    out: String,
}

#[derive(Debug, Deserialize, Serialize, Clone, Copy, PartialEq)]
#[serde(rename_all = "lowercase")]
enum Model {
    Phi4,
    Wsaw,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct McFile {
    model: Model,
    phi4: Option<Phi4Config>,
    wsaw: Option<WalkConfig>,
}

fn parse_point(s: &str) -> Result<Point, String> {
    let v: Vec<i64> = s
        .split(',')
        .map(|c| c.trim().parse::<i64>().map_err(|e| format!("bad coordinate '{c}': {e}")))
        .collect::<Result<_, _>>()?;
    <[i64; 4]>::try_from(v).map_err(|v| format!("need 4 coordinates, got {}", v.len()))
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numeric(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) | CliError::Io(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_)
            | Error::Precondition(_)
            | Error::CapExceeded { .. }
            | Error::TailCertificate { .. }
            | Error::DegreeBudget { .. } => CliError::Usage(e.to_string()),
            Error::Quadrature { .. } | Error::FlowBlowDown { .. } | Error::Numeric(_) => {
                CliError::Numeric(e.to_string())
            }
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub fn write_file(dir: &Path, name: &str, contents: &str, outputs: &mut Vec<String>) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), contents)?;
    outputs.push(name.to_string());
    Ok(())
}

pub fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serialisable");
    s.push('\n');
    s
}

fn cmd_green(common: &Common, a: &GreenArgs) -> Result<u8, CliError> {
    let start = Instant::now();
    let dir = common.out_dir();
    let mut outputs = Vec::new();
    let checks = match a.mode {
        GreenMode::Torus => {
            let t = Torus::new(a.l, a.n)?;
            let table = torus_green(&t, a.m2)?;
            write_file(&dir, &format!("{}.csv", a.out), &table.to_csv(), &mut outputs)?;
            let sum = table.sum();
            serde_json::json!({ "sum": sum, "expected_sum": 1.0 / a.m2, "m2_times_sum_minus_1": a.m2 * sum - 1.0 })
        }
        GreenMode::Infinite => {
            if let Some(r) = a.radius {
                let table = ball_green(r, a.m2)?;
                write_file(&dir, &format!("{}.csv", a.out), &table.to_csv(), &mut outputs)?;
                serde_json::json!({ "orbits": table.entries().len() })
            } else if !a.xs.is_empty() {
                let vals = a
                    .xs
                    .iter()
                    .map(|x| {
                        let g = infinite_green(x, a.m2)?;
                        Ok(serde_json::json!({ "x": x, "value": g.value, "err": g.err }))
                    })
                    .collect::<Result<Vec<_>, Error>>()?;
                let doc = serde_json::json!({ "m2": a.m2, "points": vals });
                write_file(&dir, &format!("{}.json", a.out), &to_json(&doc), &mut outputs)?;
                serde_json::json!({ "points": a.xs.len() })
            } else {
                return Err(CliError::Usage("infinite mode needs --x or --radius".into()));
            }
        }
    };
    Manifest::new("green", serde_json::to_value(a).unwrap(), common, None, None, outputs, checks, start)
        .write(&dir, &a.out)?;
    Ok(0)
}

fn cmd_mc(common: &Common, a: &McArgs) -> Result<u8, CliError> {
    let start = Instant::now();
    let text = std::fs::read_to_string(&a.config)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", a.config.display())))?;
    let file: McFile =
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config schema error: {e}")))?;
    let hash = config_hash(text.as_bytes());
    let dir = common.out_dir();
    let mut outputs = Vec::new();
    let (est, params, seed) = match file.model {
        Model::Phi4 => {
            let mut cfg = file.phi4.unwrap_or_default();
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            (phi4_run_threads(&cfg, common.threads)?, serde_json::to_value(cfg).unwrap(), cfg.seed)
        }
        Model::Wsaw => {
            let mut cfg = file.wsaw.clone().unwrap_or_default();
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let seed = cfg.seed;
            (wsaw_run_threads(&cfg, common.threads)?, serde_json::to_value(&cfg).unwrap(), seed)
        }
    };
    let doc = serde_json::json!({ "config_hash": hash, "seed": seed, "estimate": est });
    write_file(&dir, &format!("{}.json", a.out), &to_json(&doc), &mut outputs)?;
    let csv = format!("# config_hash={hash} seed={seed}\n{}", est.to_csv());
    write_file(&dir, &format!("{}.csv", a.out), &csv, &mut outputs)?;
    let checks = serde_json::json!({ "chi": est.chi, "chi_se": est.chi_se, "rhat": est.rhat, "ess": est.ess });
    let params = serde_json::json!({ "model": file.model, "config": params, "config_path": a.config });
    Manifest::new("mc", params, common, Some(seed), Some(hash), outputs, checks, start).write(&dir, &a.out)?;
    if est.rhat.is_some_and(|r| r > 1.1) {
        eprintln!("warning: R̂ = {:.3} > 1.1, chains have not mixed", est.rhat.unwrap());
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Command::Green(a) => cmd_green(&cli.common, a),
        Command::Suite(a) => suite::run(&cli.common, a),
        Command::Mc(a) => cmd_mc(&cli.common, a),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("xi4: {e}");
            ExitCode::from(e.code())
        }
    }
}
