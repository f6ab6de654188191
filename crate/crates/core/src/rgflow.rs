//! The coupling recursion ḡ_{j+1} = ḡ_j − β_j ḡ_j², the β_j from a
//! covariance decomposition, mass-scale sums and the logarithmic exponent.

use crate::error::{Error, Result};
use crate::frd::CovarianceDecomposition;
use crate::lattice;
use crate::numerics::NeumaierSum;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowSequence {
    pub n: usize,
    pub g0: f64,
    /// β_j for j = 0..J−1.
    pub beta: Vec<f64>,
    /// ḡ_j for j = 0..J.
    pub g: Vec<f64>,
    pub j_m: Option<usize>,
}

impl FlowSequence {
    /// ḡ_j, held at its last value past the end of the run (the plateau
    /// beyond the mass scale).
    pub fn g_at(&self, j: usize) -> f64 {
        self.g[j.min(self.g.len() - 1)]
    }

    pub fn len(&self) -> usize {
        self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("j,beta,gbar\n");
        for (j, g) in self.g.iter().enumerate() {
            let b = self.beta.get(j).copied().unwrap_or(f64::NAN);
            s.push_str(&format!("{j},{b:.17e},{g:.17e}\n"));
        }
        s
    }
}

/// β_j = (n+8) Σ_x (w_{j+1;0x}² − w_{j;0x}²), w_j = C_1 + … + C_j, w_0 = 0,
/// for j = 0..j_max−2, i.e. over the finite-range slices only. The remainder
/// slice is left out: the truncated polynomial slices overshoot G at high
/// frequency, so Σ G² − Σ w_{j_max−1}² can be negative.
pub fn beta_from_decomposition(decomp: &CovarianceDecomposition, n: usize) -> Result<Vec<f64>> {
    if decomp.slices.len() < 2 {
        return Err(Error::InvalidArgument("need at least two finite-range slices".into()));
    }
    let mut w2 = vec![0.0];
    w2.extend(decomp.partial_sum_l2());
    let pre = n as f64 + 8.0;
    Ok(w2.windows(2).map(|p| pre * (p[1] - p[0])).collect())
}

/// β̄ = (n+8) log L / (8π²), the massless per-scale bubble.
pub fn beta_bar(n: usize, l: usize) -> f64 {
    (n as f64 + 8.0) * (l as f64).ln() / (8.0 * PI * PI)
}

/// β_j = β̄ for j ≤ j_m and 0 beyond, for j = 0..len−1.
pub fn step_profile(beta: f64, j_m: usize, len: usize) -> Vec<f64> {
    (0..len).map(|j| if j <= j_m { beta } else { 0.0 }).collect()
}

pub fn run_flow(g0: f64, beta: &[f64], j_end: usize, n: usize) -> Result<FlowSequence> {
    if !(g0 > 0.0) || !g0.is_finite() {
        return Err(Error::InvalidArgument(format!("g0 must be positive, got {g0}")));
    }
    if beta.len() < j_end {
        return Err(Error::InvalidArgument(format!(
            "β covers {} scales, flow needs {j_end}",
            beta.len()
        )));
    }
    let bmax = beta[..j_end].iter().fold(0.0f64, |a, &b| a.max(b));
    if beta[..j_end].iter().any(|b| !(*b >= 0.0)) {
        return Err(Error::InvalidArgument("β must be nonnegative".into()));
    }
    if g0 * bmax >= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "g0 · max β = {} must be below 1",
            g0 * bmax
        )));
    }
    let mut g = Vec::with_capacity(j_end + 1);
    g.push(g0);
    for (j, &b) in beta[..j_end].iter().enumerate() {
        let cur = g[j];
        let next = cur - b * cur * cur;
        if !(next > 0.0) {
            return Err(Error::FlowBlowDown { scale: j + 1, value: next });
        }
        g.push(next);
    }
    Ok(FlowSequence {
        n,
        g0,
        beta: beta[..j_end].to_vec(),
        g,
        j_m: None,
    })
}

/// Step-profile flow with β̄ up to the mass scale, run to j_end.
pub fn step_flow(g0: f64, n: usize, l: usize, j_m: usize, j_end: usize) -> Result<FlowSequence> {
    let beta = step_profile(beta_bar(n, l), j_m, j_end);
    let mut f = run_flow(g0, &beta, j_end, n)?;
    f.j_m = Some(j_m);
    Ok(f)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MassSumReport {
    pub a: f64,
    pub b: f64,
    pub s: f64,
    pub l: usize,
    pub m2: f64,
    pub j_m: usize,
    pub sum: f64,
    /// Part of `sum` past the end of the flow, from the plateau value.
    pub tail: f64,
    pub bound: f64,
    pub ratio: f64,
}

/// Σ_{j≥1} L^{aj − 2s(j − j_m)_+} ḡ_j^b against m^{-a} ḡ_{j_m}^b. Past the end
/// J of the flow ḡ_j ≤ ḡ_J, so the geometric tail with ḡ_J is an upper bound
/// (and exact on the plateau).
pub fn mass_scale_sum(a: f64, b: f64, s: f64, l: usize, m2: f64, flow: &FlowSequence) -> Result<MassSumReport> {
    if !(a > 0.0) || !(b >= 0.0) {
        return Err(Error::InvalidArgument("need a > 0 and b ≥ 0".into()));
    }
    if !(2.0 * s > a) {
        return Err(Error::InvalidArgument(format!(
            "need 2s > a for a convergent tail, got s = {s}, a = {a}"
        )));
    }
    let j_m = lattice::mass_scale(m2, l)?;
    let last = flow.len() - 1;
    if last <= j_m {
        return Err(Error::InvalidArgument("flow must extend past the mass scale".into()));
    }
    let ln_l = (l as f64).ln();
    let term = |j: usize, g: f64| {
        let e = a * j as f64 - 2.0 * s * (j as f64 - j_m as f64).max(0.0);
        (e * ln_l).exp() * g.powf(b)
    };
    let mut acc = NeumaierSum::new();
    for j in 1..=last {
        acc.add(term(j, flow.g[j]));
    }
    let r = (l as f64).powf(a - 2.0 * s);
    let tail = term(last + 1, flow.g[last]) / (1.0 - r);
    acc.add(tail);
    let sum = acc.value();
    let bound = m2.powf(-a / 2.0) * flow.g[j_m].powf(b);
    Ok(MassSumReport {
        a,
        b,
        s,
        l,
        m2,
        j_m,
        sum,
        tail,
        bound,
        ratio: sum / bound,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExponentReport {
    pub n: usize,
    pub j_m: usize,
    pub gamma_hat: f64,
    pub target: f64,
    pub rel_err: f64,
}

/// γ̂ = log Π_{j<j_m}(1 + ((n+2)/(n+8)) β_j ḡ_j) / log(ḡ_0/ḡ_{j_m}).
pub fn extract_log_exponent(flow: &FlowSequence, j_m: usize) -> Result<ExponentReport> {
    if j_m == 0 || j_m >= flow.len() || flow.beta.len() < j_m {
        return Err(Error::InvalidArgument(format!(
            "flow of length {} cannot reach j_m = {j_m}",
            flow.len()
        )));
    }
    let n = flow.n as f64;
    let c = (n + 2.0) / (n + 8.0);
    let mut num = NeumaierSum::new();
    for j in 0..j_m {
        num.add((c * flow.beta[j] * flow.g[j]).ln_1p());
    }
    let den = (flow.g[0] / flow.g[j_m]).ln();
    if !(den > 0.0) {
        return Err(Error::Numeric("ḡ did not decrease up to j_m".into()));
    }
    let gamma_hat = num.value() / den;
    Ok(ExponentReport {
        n: flow.n,
        j_m,
        gamma_hat,
        target: c,
        rel_err: (gamma_hat - c).abs() / c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frd::{decompose, Domain};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn one_step() {
        let f = run_flow(0.1, &[1.0; 3], 3, 0).unwrap();
        assert_relative_eq!(f.g[1], 0.09, max_relative = 1e-15);
    }

    #[test]
    fn inverse_j_asymptotics() {
        let j = 100_000;
        let f = run_flow(0.1, &vec![1.0; j], j, 0).unwrap();
        let v = j as f64 * f.g[j];
        assert!((v - 1.0).abs() < 0.01, "{v}");
    }

    #[test]
    fn plateau_beyond_mass_scale() {
        let f = step_flow(0.1, 1, 2, 5, 20).unwrap();
        for j in 7..=20 {
            assert_eq!(f.g[j], f.g[6]);
        }
    }

    #[test]
    fn blow_down_and_bad_input() {
        assert!(run_flow(0.1, &[20.0], 1, 0).is_err());
        assert!(run_flow(-1.0, &[1.0], 1, 0).is_err());
        assert!(run_flow(0.1, &[1.0], 2, 0).is_err());
        assert!(run_flow(0.5, &[2.0], 1, 0).is_err());
    }

    #[test]
    fn geometric_sum_closed_form() {
        let f = step_flow(0.05, 0, 2, 6, 30).unwrap();
        let (a, s, l) = (3.0, 2.0, 2usize);
        let m2 = 1e-4;
        let r = mass_scale_sum(a, 0.0, s, l, m2, &f).unwrap();
        let j_m = 6;
        let lf = l as f64;
        let below: f64 = (1..=j_m).map(|j| lf.powf(a * j as f64)).sum();
        let above = lf.powf(a * j_m as f64) * lf.powf(a - 2.0 * s) / (1.0 - lf.powf(a - 2.0 * s));
        assert_relative_eq!(r.sum, below + above, max_relative = 1e-12);
        assert!(mass_scale_sum(4.0, 1.0, 2.0, 2, m2, &f).is_err());
    }

    #[test]
    fn lemma_ratio_bounded() {
        for a in [3.0, 4.0] {
            let mut ratios = Vec::new();
            for m in [1e-2f64, 1e-3, 1e-4] {
                let j_m = lattice::mass_scale(m * m, 2).unwrap();
                let f = step_flow(0.1, 0, 2, j_m, j_m + 5).unwrap();
                ratios.push(mass_scale_sum(a, 1.0, 3.0, 2, m * m, &f).unwrap().ratio);
            }
            let hi = ratios.iter().cloned().fold(0.0, f64::max);
            let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(hi / lo < 10.0);
        }
    }

    #[test]
    fn exponent_extraction_converges() {
        for n in [0usize, 1] {
            let target = (n as f64 + 2.0) / (n as f64 + 8.0);
            let err = |jm: usize| {
                let f = step_flow(0.1, n, 2, jm, jm).unwrap();
                (extract_log_exponent(&f, jm).unwrap().gamma_hat - target).abs()
            };
            assert!(err(1_000_000) < err(1000));
            assert!(err(1_000_000) < 0.02 * target);
        }
    }

    #[test]
    fn beta_profile_from_decomposition() {
        let d = decompose(0.01, 2, 9, Domain::Ball { radius: 0.0 }).unwrap();
        let b0 = beta_from_decomposition(&d, 0).unwrap();
        let b1 = beta_from_decomposition(&d, 1).unwrap();
        for (x, y) in b0.iter().zip(&b1) {
            assert_relative_eq!(y / x, 9.0 / 8.0, max_relative = 1e-12);
            assert!(*x >= 0.0);
        }
        let j_m = lattice::mass_scale(0.01, 2).unwrap();
        assert_eq!(b0.len(), 8);
        assert!(b0[j_m + 4] / b0[j_m] <= 0.1);
    }

    #[test]
    fn beta_massless_limit() {
        let a = beta_from_decomposition(&decompose(1e-6, 2, 8, Domain::Ball { radius: 0.0 }).unwrap(), 0).unwrap();
        let b = beta_from_decomposition(&decompose(1e-8, 2, 8, Domain::Ball { radius: 0.0 }).unwrap(), 0).unwrap();
        for j in 1..=5 {
            assert!((a[j] / b[j] - 1.0).abs() < 0.1);
        }
    }

    proptest! {
        #[test]
        fn monotone_and_ratio_bound(g0 in 0.001f64..0.5, beta in 0.0f64..1.5) {
            prop_assume!(2.0 * g0 * beta <= 1.0);
            let f = run_flow(g0, &vec![beta; 200], 200, 0).unwrap();
            for j in 0..200 {
                prop_assert!(f.g[j + 1] > 0.0 && f.g[j + 1] <= f.g[j]);
                prop_assert!(f.g[j] / f.g[j + 1] <= 1.0 + 2.0 * beta * f.g[j] + 1e-15);
            }
        }
    }
}
