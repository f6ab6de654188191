use crate::manifest::Manifest;
use crate::{to_json, write_file, CliError, Common};
use clap::{Args, ValueEnum};
use serde::Serialize;
use std::time::Instant;
use xi4_core::asymptotics::dominance_check;
use xi4_core::frd::{check_cbd, decompose, Domain};
use xi4_core::green::{infinite_green, torus_green, TableData};
use xi4_core::lattice::{self, Torus};
use xi4_core::mc::{phi4_run_threads, wsaw_run_threads, Phi4Config, WalkConfig};
use xi4_core::moments::{free_moment_sum, RadiusPolicy};
use xi4_core::norms::{check_mart, Field, FieldLaw};
use xi4_core::rgflow::{beta_bar, extract_log_exponent, mass_scale_sum, step_flow};

#[derive(ValueEnum, Debug, Clone, Copy, Serialize, PartialEq)]
#[serde(rename_all = "kebab-case")]
pub enum SuiteName {
    Cbd,
    Mart,
    MassSum,
    Moments,
    Dominance,
    Exponent,
    McRegression,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Auto,
    Full,
}

/// Options not used by the chosen suite are ignored.
#[derive(Args, Debug, Serialize)]
pub struct SuiteArgs {
    #[arg(value_enum)]
    pub name: SuiteName,
    #[arg(long = "L")]
    pub l: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub s: Option<f64>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long)]
    pub m: Option<f64>,
    #[arg(long)]
    pub m2: Option<f64>,
    #[arg(long)]
    pub g0: Option<f64>,
    /// Mass scale; accepts forms like 1e6.
    #[arg(long)]
    pub jm: Option<f64>,
    #[arg(long)]
    pub jmax: Option<usize>,
    #[arg(long)]
    pub ell0: Option<f64>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub ms: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    pub policy: Option<Policy>,
}

pub fn run(common: &Common, a: &SuiteArgs) -> Result<u8, CliError> {
    let start = Instant::now();
    let (pass, report) = match a.name {
        SuiteName::Cbd => cbd(a)?,
        SuiteName::Mart => mart(a)?,
        SuiteName::MassSum => mass_sum(a)?,
        SuiteName::Moments => moments(a)?,
        SuiteName::Dominance => dominance(a)?,
        SuiteName::Exponent => exponent(a)?,
        SuiteName::McRegression => mc_regression(common, a)?,
    };
    let name = serde_json::to_value(a.name).unwrap();
    let stem = format!("suite-{}", name.as_str().unwrap());
    let dir = common.out_dir();
    let mut outputs = Vec::new();
    let doc = serde_json::json!({ "suite": name, "pass": pass, "report": report });
    write_file(&dir, &format!("{stem}.json"), &to_json(&doc), &mut outputs)?;
    Manifest::new(
        "suite",
        serde_json::to_value(a).unwrap(),
        common,
        None,
        None,
        outputs,
        serde_json::json!({ "pass": pass }),
        start,
    )
    .write(&dir, &stem)?;
    println!("{}: {}", name.as_str().unwrap(), if pass { "PASS" } else { "FAIL" });
    Ok(if pass { 0 } else { 4 })
}

type Outcome = Result<(bool, serde_json::Value), CliError>;

fn json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap()
}

fn cbd(a: &SuiteArgs) -> Outcome {
    let l = a.l.unwrap_or(2);
    let d = decompose(a.m2.unwrap_or(1e-2), l, a.jmax.unwrap_or(6), Domain::Ball { radius: 1.0 })?;
    let s = a.s.unwrap_or(0.0);
    let ell0 = match a.ell0 {
        Some(v) => v,
        None => check_cbd(&d, 1.0, s, 1.0)?.minimal_ell0 * 1.001,
    };
    let r = check_cbd(&d, ell0, s, 1.0)?;
    Ok((r.pass, json(&r)))
}

fn mart(a: &SuiteArgs) -> Outcome {
    let l = a.l.unwrap_or(4);
    let (q, s) = (a.q.unwrap_or(4.0), a.s.unwrap_or(2.0));
    let j_m = a.jm.map(|v| v as usize).unwrap_or(1);
    let t = Torus::new(l, 1)?;
    let laws = [FieldLaw::IidGaussian, FieldLaw::Smoothed, FieldLaw::PlaneWave, FieldLaw::MaxFrequency];
    let seed = 2024;
    let fields: Vec<Field> = (0..a.samples.unwrap_or(200) as u64)
        .map(|i| Field::sample(t, 1, laws[(i % 4) as usize], seed, i))
        .collect();
    let reports = (j_m..=j_m + 2)
        .map(|j| check_mart(q, s, l, j, j_m, &fields))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((reports.iter().all(|r| r.pass), json(&reports)))
}

fn mass_sum(a: &SuiteArgs) -> Outcome {
    let p = a.p.unwrap_or(1.0);
    let (s, l, n, g0) = (a.s.unwrap_or(3.0), a.l.unwrap_or(2), a.n.unwrap_or(1), a.g0.unwrap_or(0.1));
    let ms = a.ms.clone().unwrap_or_else(|| vec![1e-2, 1e-3, 1e-4]);
    let mut rows = Vec::new();
    for &m in &ms {
        let j_m = lattice::mass_scale(m * m, l)?;
        let f = step_flow(g0, n, l, j_m, j_m + 5)?;
        rows.push(mass_scale_sum(p + 2.0, 1.0, s, l, m * m, &f)?);
    }
    let hi = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let lo = rows.iter().map(|r| r.ratio).fold(f64::INFINITY, f64::min);
    let spread = hi / lo;
    Ok((spread <= 10.0, serde_json::json!({ "rows": rows, "spread": spread, "limit": 10.0 })))
}

fn moments(a: &SuiteArgs) -> Outcome {
    let p = a.p.unwrap_or(2.0);
    let m = a.m.unwrap_or(0.1);
    let policy = match a.policy.unwrap_or(Policy::Full) {
        Policy::Auto => RadiusPolicy::Auto,
        Policy::Full => RadiusPolicy::Full,
    };
    let r = free_moment_sum(p, m * m, policy)?;
    let dev = r.ratio - 1.0;
    Ok((
        dev.abs() <= 3.0 * m,
        serde_json::json!({ "result": r, "deviation": dev, "limit": 3.0 * m }),
    ))
}

fn dominance(a: &SuiteArgs) -> Outcome {
    let (l, n) = (a.l.unwrap_or(2), a.n.unwrap_or(1));
    let g0 = a.g0.unwrap_or(0.5 / beta_bar(n, l));
    let ms = a.ms.clone().unwrap_or_else(|| vec![1e-2, 1e-3, 1e-4]);
    let r = dominance_check(a.p.unwrap_or(2.0), &ms, a.s.unwrap_or(3.0), l, n, g0)?;
    Ok((r.pass, json(&r)))
}

fn exponent(a: &SuiteArgs) -> Outcome {
    let n = a.n.unwrap_or(1);
    let jm = a.jm.unwrap_or(1e6);
    if !(1.0..=1e8).contains(&jm) {
        return Err(CliError::Usage(format!("--jm must lie in [1, 1e8], got {jm}")));
    }
    let jm = jm as usize;
    let f = step_flow(a.g0.unwrap_or(0.1), n, a.l.unwrap_or(2), jm, jm)?;
    let r = extract_log_exponent(&f, jm)?;
    Ok((r.rel_err <= 0.02, json(&r)))
}

fn mc_regression(common: &Common, a: &SuiteArgs) -> Outcome {
    let seed = common.seed.unwrap_or(1);
    let torus = Torus::with_side(4)?;
    let free = torus_green(&torus, 0.5)?;
    let TableData::Torus { values: gv, .. } = &free.data else { unreachable!() };
    let cfg = Phi4Config {
        seed,
        sweeps: a.samples.unwrap_or(20_000),
        ..Default::default()
    };
    let phi = phi4_run_threads(&cfg, common.threads)?;
    let chi_free: f64 = gv.iter().sum();
    let chi_z = (phi.chi - chi_free) / phi.chi_se;
    let mut worst_phi = chi_z.abs();
    for (rep, mean, se) in phi.orbit_means() {
        let x = rep.map(|c| c as i64);
        if lattice::norm(&x) <= 3.0 {
            worst_phi = worst_phi.max((mean - gv[torus.index_of(&x)]).abs() / se);
        }
    }
    let wcfg = WalkConfig {
        seed,
        ..Default::default()
    };
    let walk = wsaw_run_threads(&wcfg, common.threads)?;
    let mut worst_walk = 0.0f64;
    for (rep, mean, se) in walk.orbit_means() {
        let x = rep.map(|c| c as i64);
        if lattice::norm(&x) <= 3.0 {
            worst_walk = worst_walk.max((mean - infinite_green(&x, 0.5)?.value).abs() / se);
        }
    }
    let pass = worst_phi <= 3.0 && worst_walk <= 3.0;
    Ok((
        pass,
        serde_json::json!({
            "phi4": { "chi": phi.chi, "chi_se": phi.chi_se, "chi_free": chi_free, "worst_z": worst_phi,
                      "rhat": phi.rhat, "acceptance": phi.acceptance },
            "wsaw": { "chi": walk.chi, "worst_z": worst_walk },
            "limit_z": 3.0,
        }),
    ))
}
