//! Predicted susceptibility and correlation-length asymptotics, the
//! remainder bound for the two-point function and a numerical form of the
//! argument that the free moment dominates the error terms.

use crate::error::{Error, Result};
use crate::green;
use crate::lattice::{self, Point};
use crate::moments::{self, RadiusPolicy};
use crate::numerics::{self, NeumaierSum};
use crate::rgflow::{self, FlowSequence};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AsymptoticParams {
    pub n: usize,
    pub g: f64,
    /// A_{g,n}; not determined by the theory, fitted or defaulted to 1.
    pub amplitude: f64,
    pub z0c: f64,
    pub s: f64,
    pub l: usize,
    /// Drop the logarithm to recover the free (g = 0) form.
    pub log_correction: bool,
}

impl Default for AsymptoticParams {
    fn default() -> Self {
        Self {
            n: 1,
            g: 0.1,
            amplitude: 1.0,
            z0c: 0.0,
            s: 3.0,
            l: 2,
            log_correction: true,
        }
    }
}

impl AsymptoticParams {
    pub fn a_tilde(&self) -> f64 {
        self.amplitude / (1.0 + self.z0c)
    }

    /// (n+2)/(n+8), or 0 without the log correction.
    pub fn exponent(&self) -> f64 {
        if self.log_correction {
            log_exponent(self.n)
        } else {
            0.0
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.amplitude > 0.0) || !(1.0 + self.z0c > 0.0) {
            return Err(Error::InvalidArgument("need A > 0 and 1 + z0c > 0".into()));
        }
        Ok(())
    }
}

pub fn log_exponent(n: usize) -> f64 {
    (n as f64 + 2.0) / (n as f64 + 8.0)
}

fn log_inv(eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < (-1.0f64).exp()) {
        return Err(Error::InvalidArgument(format!(
            "ε must lie in (0, 1/e), got {eps}"
        )));
    }
    Ok(-eps.ln())
}

/// χ ~ A ε^{-1} (log ε^{-1})^{(n+2)/(n+8)}.
pub fn chi_asymptote(eps: f64, params: &AsymptoticParams) -> Result<f64> {
    params.validate()?;
    let lg = log_inv(eps)?;
    Ok(params.amplitude / eps * lg.powf(params.exponent()))
}

/// m² ~ Ã^{-1} ε (log ε^{-1})^{-(n+2)/(n+8)}.
pub fn mass_from_eps(eps: f64, params: &AsymptoticParams) -> Result<f64> {
    params.validate()?;
    let lg = log_inv(eps)?;
    Ok(eps * lg.powf(-params.exponent()) / params.a_tilde())
}

/// ξ_p ~ c_p Ã^{1/2} ε^{-1/2} (log ε^{-1})^{(n+2)/(2(n+8))}.
pub fn xi_p_prediction(eps: f64, p: f64, params: &AsymptoticParams) -> Result<f64> {
    params.validate()?;
    let lg = log_inv(eps)?;
    let cp = moments::cp_constant(p)?.c_p;
    Ok(cp * params.a_tilde().sqrt() * eps.powf(-0.5) * lg.powf(0.5 * params.exponent()))
}

/// ν_c ≈ −a g with a = (n+2)(−Δ)^{-1}_{00}.
pub fn nu_c_first_order(g: f64, n: usize) -> Result<f64> {
    Ok(-green::a_coefficient(n)? * g)
}

/// C ḡ_{j_x} |x|^{-2} min{1, (m|x|)^{-2s}}.
pub fn remainder_bound(x: &Point, m2: f64, s: f64, l: usize, flow: &FlowSequence, c: f64) -> Result<f64> {
    let jx = lattice::coalescence_scale(x, l)?;
    let r = lattice::norm(x);
    Ok(c * remainder_radial(r, jx, m2, s, flow))
}

fn remainder_radial(r: f64, jx: usize, m2: f64, s: f64, flow: &FlowSequence) -> f64 {
    let mr = m2.sqrt() * r;
    let decay = if mr <= 1.0 { 1.0 } else { mr.powf(-2.0 * s) };
    flow.g_at(jx) * decay / (r * r)
}

/// ḡ_{j_x} L^{-2j_x − 2s(j_x − j_m)_+}, the same bound written by scale.
pub fn remainder_bound_scales(jx: usize, jm: usize, s: f64, l: usize, flow: &FlowSequence) -> f64 {
    let e = -2.0 * jx as f64 - 2.0 * s * (jx as f64 - jm as f64).max(0.0);
    flow.g_at(jx) * (l as f64).powf(e)
}

/// Number of representations of n as a sum of four squares, for n ≤ n_max:
/// r_4(n) = 8 Σ_{d | n, 4 ∤ d} d.
pub fn r4_table(n_max: usize) -> Vec<u64> {
    let mut sig = vec![0u64; n_max + 1];
    for d in 1..=n_max {
        if d % 4 == 0 {
            continue;
        }
        let mut k = d;
        while k <= n_max {
            sig[k] += d as u64;
            k += d;
        }
    }
    let mut out: Vec<u64> = sig.into_iter().map(|v| 8 * v).collect();
    out[0] = 1;
    out
}

/// Radius up to which shell sums run over lattice points; beyond it they are
/// replaced by radial integrals.
pub const LATTICE_RADIUS: usize = 2000;
/// Radius up to which G_x(0,0) is evaluated by quadrature; beyond it the
/// asymptote 1/(4π²|x|²) is used.
pub const EXACT_GREEN_RADIUS: f64 = 10.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DominanceRow {
    pub m: f64,
    pub j_m: usize,
    pub g_jm: f64,
    /// c_p^p m^{-p}
    pub main: f64,
    pub below_mass: f64,
    pub above_mass: f64,
    pub remainder: f64,
    pub ratios: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DominanceReport {
    pub p: f64,
    pub s: f64,
    pub l: usize,
    pub n: usize,
    pub g0: f64,
    pub rows: Vec<DominanceRow>,
    /// Each ratio decreases along the (decreasing) m grid.
    pub decreasing: [bool; 3],
    /// Slope of log(remainder ratio) against log log m^{-1}.
    pub remainder_slope: f64,
    pub pass: bool,
}

struct RadialTables {
    r4: Vec<u64>,
    /// Σ over orbits of |x| ≤ EXACT_GREEN_RADIUS: (|x|², multiplicity, G_x(0,0)).
    exact: Vec<(u64, f64, f64)>,
}

fn radial_tables() -> Result<RadialTables> {
    let r4 = r4_table(LATTICE_RADIUS * LATTICE_RADIUS);
    let reps = green::ball_reps(EXACT_GREEN_RADIUS);
    let vals = green::infinite_green_many(&reps, 0.0)?;
    let exact = reps
        .iter()
        .zip(vals)
        .filter(|(a, _)| a.iter().any(|&c| c != 0))
        .map(|(a, g)| {
            let r2: u64 = a.iter().map(|&c| (c as u64) * (c as u64)).sum();
            (r2, lattice::orbit_size(a) as f64, g.value)
        })
        .collect();
    Ok(RadialTables { r4, exact })
}

/// Σ_{x ≠ 0} f(|x|, j_x) over the lattice to LATTICE_RADIUS, then
/// 2π² ∫ r³ f dr beyond with f integrated piecewise between scale
/// boundaries L^j/2 by `integral(lo, hi, j)`; from scale `j_flat` on the
/// integrand no longer changes with j and the last piece runs to r_max.
fn shell_sum<F, I>(tab: &RadialTables, l: usize, r_max: f64, j_flat: usize, f: F, integral: I) -> f64
where
    F: Fn(f64, usize) -> f64,
    I: Fn(f64, f64, usize) -> f64,
{
    let mut acc = NeumaierSum::new();
    let n_lat = ((LATTICE_RADIUS * LATTICE_RADIUS) as f64).min(r_max * r_max).floor() as usize;
    for n in 1..=n_lat {
        let c = tab.r4[n];
        if c == 0 {
            continue;
        }
        let jx = lattice::coalescence_scale_r2(n as u128, l);
        acc.add(c as f64 * f((n as f64).sqrt(), jx));
    }
    let mut lo = LATTICE_RADIUS as f64;
    if r_max > lo {
        // continuum: the lattice sum counts points with |x|² ≤ R², so start
        // the integral at the midpoint of the next shell of squares
        lo = ((LATTICE_RADIUS * LATTICE_RADIUS) as f64 + 0.5).sqrt();
        let lf = l as f64;
        let mut j = lattice::coalescence_scale_r2((LATTICE_RADIUS * LATTICE_RADIUS) as u128, l);
        while lo < r_max {
            let edge = if j >= j_flat { f64::INFINITY } else { lf.powi(j as i32 + 1) / 2.0 };
            let hi = edge.min(r_max);
            if hi > lo {
                acc.add(2.0 * PI * PI * integral(lo, hi, j));
            }
            lo = lo.max(hi);
            j += 1;
        }
    }
    acc.value()
}

/// ∫_a^b r^k dr, with b = ∞ allowed for k < −1.
fn power_integral(a: f64, b: f64, k: f64) -> f64 {
    if (k + 1.0).abs() < 1e-12 {
        return (b / a).ln();
    }
    if b.is_infinite() {
        return -a.powf(k + 1.0) / (k + 1.0);
    }
    (b.powf(k + 1.0) - a.powf(k + 1.0)) / (k + 1.0)
}

/// The three error-to-main ratios of the dominance argument on an m grid.
///
/// With C = 1 throughout:
/// below the mass scale, m² Σ_{L/2 ≤ |x| ≤ L/(2m)} ḡ_{j_x} |x|^p G_x(0,0);
/// above it, ḡ_{j_m+1} m² Σ_x |x|^p G_x(0,m²);
/// the remainder, m² Σ_{x≠0} |x|^p ḡ_{j_x} |x|^{-2} min{1, (m|x|)^{-2s}}.
/// Each is divided by c_p^p m^{-p}. The flow is the step profile with β̄ up
/// to j_m, started from g0.
pub fn dominance_check(p: f64, ms: &[f64], s: f64, l: usize, n: usize, g0: f64) -> Result<DominanceReport> {
    if !(2.0 * s > p + 2.0) {
        return Err(Error::InvalidArgument(format!(
            "need s > (p+2)/2 = {}, got {s}",
            (p + 2.0) / 2.0
        )));
    }
    if ms.len() < 2 {
        return Err(Error::InvalidArgument("need at least two masses".into()));
    }
    let tab = radial_tables()?;
    let cpp = moments::cp_power_closed(p);
    let mut rows = Vec::new();
    for &m in ms {
        let m2 = m * m;
        let jm = lattice::mass_scale(m2, l)?;
        let flow = rgflow::step_flow(g0, n, l, jm, jm + 2)?;
        let main = cpp * m.powf(-p);

        // below the mass scale
        let r_cut = l as f64 / (2.0 * m);
        let r_min = l as f64 / 2.0;
        let mut below = NeumaierSum::new();
        for &(r2, w, g) in &tab.exact {
            let r = (r2 as f64).sqrt();
            if r >= r_min && r <= r_cut {
                let jx = lattice::coalescence_scale_r2(r2 as u128, l);
                below.add(w * flow.g_at(jx) * r.powf(p) * g);
            }
        }
        let asym = |r: f64, jx: usize| {
            if r <= EXACT_GREEN_RADIUS || r < r_min || r > r_cut {
                0.0
            } else {
                flow.g_at(jx) * r.powf(p - 2.0) / (4.0 * PI * PI)
            }
        };
        let asym_int = |a: f64, b: f64, j: usize| flow.g_at(j) * power_integral(a, b, p + 1.0) / (4.0 * PI * PI);
        below.add(shell_sum(&tab, l, r_cut, flow.len(), asym, asym_int));
        let below = m2 * below.value();

        // above the mass scale
        let free = moments::free_moment_sum(p, m2, RadiusPolicy::Full)?.sum;
        let above = flow.g_at(jm + 1) * m2 * free;

        // remainder
        let rem_f = |r: f64, jx: usize| r.powf(p) * remainder_radial(r, jx, m2, s, &flow);
        let rem_int = |a: f64, b: f64, j: usize| {
            // r^{p+1} ḡ_j min{1, (mr)^{-2s}}
            let knee = 1.0 / m;
            let mut v = 0.0;
            if a < knee {
                v += power_integral(a, b.min(knee), p + 1.0);
            }
            if b > knee {
                v += m.powf(-2.0 * s) * power_integral(a.max(knee), b, p + 1.0 - 2.0 * s);
            }
            flow.g_at(j) * v
        };
        let remainder = m2 * shell_sum(&tab, l, f64::INFINITY, flow.len(), rem_f, rem_int);

        rows.push(DominanceRow {
            m,
            j_m: jm,
            g_jm: flow.g_at(jm),
            main,
            below_mass: below,
            above_mass: above,
            remainder,
            ratios: [below / main, above / main, remainder / main],
        });
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[b].m.total_cmp(&rows[a].m));
    let mut decreasing = [true; 3];
    for (k, d) in decreasing.iter_mut().enumerate() {
        *d = order.windows(2).all(|w| rows[w[1]].ratios[k] < rows[w[0]].ratios[k]);
    }
    let ll: Vec<f64> = rows.iter().map(|r| (-r.m.ln()).ln()).collect();
    let lr: Vec<f64> = rows.iter().map(|r| r.ratios[2].ln()).collect();
    let remainder_slope = numerics::linear_slope(&ll, &lr);
    let pass = decreasing.iter().all(|&d| d) && (-1.5..=-0.5).contains(&remainder_slope);
    Ok(DominanceReport {
        p,
        s,
        l,
        n,
        g0,
        rows,
        decreasing,
        remainder_slope,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn flow() -> FlowSequence {
        rgflow::step_flow(0.1, 1, 2, 6, 30).unwrap()
    }

    #[test]
    fn chi_values() {
        let mut p = AsymptoticParams {
            n: 0,
            ..Default::default()
        };
        let e = (-1.0f64).exp();
        assert!(chi_asymptote(e, &p).is_err());
        let just_below = e * (1.0 - 1e-12);
        assert_relative_eq!(chi_asymptote(just_below, &p).unwrap(), 1.0 / just_below, max_relative = 1e-9);
        let v = chi_asymptote(1e-4, &p).unwrap();
        p.amplitude = 2.0;
        assert_relative_eq!(chi_asymptote(1e-4, &p).unwrap(), 2.0 * v, max_relative = 1e-15);
        assert!((log_exponent(1_000_000) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn mass_relation() {
        let p = AsymptoticParams::default();
        for eps in [1e-4, 1e-6, 1e-10] {
            let m2 = mass_from_eps(eps, &p).unwrap();
            let r = chi_asymptote(eps, &p).unwrap() * m2 / (1.0 + p.z0c);
            assert!((r - 1.0).abs() < 1e-2);
        }
        let q = AsymptoticParams {
            amplitude: 2.0,
            ..p
        };
        assert_relative_eq!(
            mass_from_eps(1e-6, &q).unwrap(),
            0.5 * mass_from_eps(1e-6, &p).unwrap(),
            max_relative = 1e-14
        );
        let n0 = AsymptoticParams { n: 0, ..p };
        assert!(mass_from_eps(1e-8, &n0).unwrap() > mass_from_eps(1e-8, &p).unwrap());
    }

    #[test]
    fn xi_prediction_consistency() {
        let par = AsymptoticParams::default();
        for p in [1.0, 2.0, 4.0] {
            let cp = moments::cp_constant(p).unwrap().c_p;
            let eps: Vec<f64> = (4..=10).map(|k| 10f64.powi(-k)).collect();
            for &e in &eps {
                let ratio = xi_p_prediction(e, p, &par).unwrap() * mass_from_eps(e, &par).unwrap().sqrt() / cp;
                assert!((ratio - 1.0).abs() < 1e-2);
            }
            // ε exponent is −1/2 up to the log factor; strip the log and fit
            let ys: Vec<f64> = eps
                .iter()
                .map(|&e| xi_p_prediction(e, p, &par).unwrap() / (-e.ln()).powf(0.5 * par.exponent()))
                .collect();
            assert!((numerics::loglog_slope(&eps, &ys) + 0.5).abs() < 1e-3);
        }
        let free = AsymptoticParams {
            log_correction: false,
            ..par
        };
        assert_relative_eq!(
            xi_p_prediction(1e-6, 2.0, &free).unwrap(),
            8f64.sqrt() * 1e3,
            max_relative = 1e-12
        );
    }

    #[test]
    fn nu_c_sign() {
        let a = nu_c_first_order(0.01, 1).unwrap();
        assert_relative_eq!(a, -0.03 * 0.154933, max_relative = 1e-5);
    }

    #[test]
    fn remainder_shape() {
        let f = flow();
        assert!(remainder_bound(&[0; 4], 1e-4, 3.0, 2, &f, 1.0).is_err());
        let m2 = 1e-4;
        // continuity at m|x| = 1, i.e. |x| = 100
        let x = [100, 0, 0, 0];
        let b = remainder_bound(&x, m2, 3.0, 2, &f, 1.0).unwrap();
        assert_relative_eq!(b, f.g_at(lattice::coalescence_scale(&x, 2).unwrap()) / 1e4, max_relative = 1e-12);
        // s = 0 gives ḡ/|x|² everywhere
        let y = [300, 7, 0, 0];
        let b0 = remainder_bound(&y, m2, 0.0, 2, &f, 1.0).unwrap();
        assert_relative_eq!(b0, f.g_at(lattice::coalescence_scale(&y, 2).unwrap()) / lattice::norm2(&y) as f64, max_relative = 1e-12);
    }

    #[test]
    fn remainder_scale_form() {
        let f = flow();
        let (l, s, m2) = (2usize, 3.0, 1e-4);
        let jm = lattice::mass_scale(m2, l).unwrap();
        let mut ratios = Vec::new();
        for r in [1i64, 3, 7, 20, 64, 150, 400, 1000, 5000] {
            let x = [r, r / 3, 0, 1];
            let jx = lattice::coalescence_scale(&x, l).unwrap();
            ratios.push(remainder_bound(&x, m2, s, l, &f, 1.0).unwrap() / remainder_bound_scales(jx, jm, s, l, &f));
        }
        // |x| L^{-j_x} ∈ [1/2, L/2) and m L^{j_m} ∈ [1/L, 1)
        let lf = l as f64;
        let lo = 4.0 / (lf * lf) * (lf / 2.0).powf(-2.0 * s);
        let hi = 4.0 * (2.0 * lf).powf(2.0 * s);
        assert!(ratios.iter().all(|&r| r >= lo * (1.0 - 1e-12) && r <= hi), "{ratios:?}");
    }

    #[test]
    fn r4_matches_enumeration() {
        let t = r4_table(200);
        let mut c = vec![0u64; 201];
        for a in -15i64..=15 {
            for b in -15i64..=15 {
                for d in -15i64..=15 {
                    for e in -15i64..=15 {
                        let n = (a * a + b * b + d * d + e * e) as usize;
                        if n <= 200 {
                            c[n] += 1;
                        }
                    }
                }
            }
        }
        assert_eq!(t, c);
    }

    #[test]
    fn free_term_dominates() {
        let r = dominance_check(2.0, &[1e-2, 1e-3], 3.0, 2, 1, 0.1).unwrap();
        assert!(r.rows[1].ratios.iter().all(|&v| v < 1.0));
        assert!(r.decreasing.iter().all(|&d| d));
    }

    #[test]
    fn rejects_small_s() {
        assert!(dominance_check(2.0, &[1e-2, 1e-3], 2.0, 2, 1, 0.1).is_err());
    }

    proptest! {
        #[test]
        fn improvement_is_pointwise(a in 1i64..3000, b in 0i64..3000, s in 0.0f64..5.0) {
            let f = flow();
            let x = [a, b, 0, 0];
            let m2 = 1e-4;
            let with = remainder_bound(&x, m2, s, 2, &f, 1.0).unwrap();
            let without = remainder_bound(&x, m2, 0.0, 2, &f, 1.0).unwrap();
            prop_assert!(with <= without * (1.0 + 1e-15));
        }
    }
}
