//! Moments Σ_x |x|^p G_x(0, m²), the continuum constants c_p and the
//! order-p correlation length.

use crate::error::{Error, Result};
use crate::green::TwoPointTable;
use crate::numerics::{self, GaussLegendre, NeumaierSum};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// c_p^p = 2^p Γ((p+4)/2) Γ((p+2)/2).
pub fn cp_power_closed(p: f64) -> f64 {
    (p * 2f64.ln() + numerics::ln_gamma((p + 4.0) / 2.0) + numerics::ln_gamma((p + 2.0) / 2.0)).exp()
}

/// c_p^p = ∫_{R⁴} |x|^p (2π)^{-2} K_1(|x|)/|x| dx = ½ ∫_0^∞ r^{p+2} K_1(r) dr.
pub fn cp_power_quadrature(p: f64) -> Result<(f64, f64)> {
    let f = |r: f64| {
        if r <= 0.0 {
            0.0
        } else {
            0.5 * r.powf(p + 2.0) * numerics::bessel_k(1.0, r)
        }
    };
    // r^{p+2} K_1(r) < 1e-18 of the total beyond r = 60 for p ≤ 8
    let (a, ea) = numerics::integrate_adaptive(f, 0.0, 8.0, 0.0, 1e-13)?;
    let (b, eb) = numerics::integrate_adaptive(f, 8.0, 60.0 + 4.0 * p, 0.0, 1e-13)?;
    Ok((a + b, ea + eb))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CpValue {
    pub p: f64,
    pub closed: f64,
    pub quadrature: f64,
    pub rel_diff: f64,
    /// c_p itself (the p-th root).
    pub c_p: f64,
}

pub fn cp_constant(p: f64) -> Result<CpValue> {
    if !(p > 0.0) || !p.is_finite() {
        return Err(Error::InvalidArgument(format!("c_p needs p > 0, got {p}")));
    }
    let closed = cp_power_closed(p);
    let (quadrature, _) = cp_power_quadrature(p)?;
    Ok(CpValue {
        p,
        closed,
        quadrature,
        rel_diff: (closed - quadrature).abs() / closed,
        c_p: closed.powf(1.0 / p),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RadiusPolicy {
    /// Smallest radius whose tail certificate is below `TAIL_REL_TOL` of the
    /// leading term.
    Auto,
    Fixed(f64),
    /// No truncation: heat-time subordination over all of Z⁴.
    Full,
}

pub const TAIL_REL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TailCertificate {
    pub radius: f64,
    pub theta: f64,
    pub bound: f64,
}

/// Rigorous bound on Σ_{|x|>R} |x|^p G_x(0, m²).
///
/// For 0 ≤ θ < arccosh(1 + m²/2) the tilted sum gives
/// G_x ≤ e^{-θ|x|} / (m² − 2(cosh θ − 1)); comparing each point with its unit
/// cube then gives 2π² ∫_{R−1}^∞ u³ (u+1)^p e^{-θ(u−1)} du over that
/// denominator. θ is optimised on a grid.
pub fn tail_certificate(p: f64, m2: f64, radius: f64) -> Result<TailCertificate> {
    if !(m2 > 0.0) {
        return Err(Error::InvalidArgument("tail certificate needs m² > 0".into()));
    }
    let r0 = (radius - 1.0).max(0.0);
    let theta_max = (1.0 + m2 / 2.0).acosh();
    let mut best = TailCertificate {
        radius,
        theta: 0.0,
        bound: f64::INFINITY,
    };
    for i in 1..50 {
        let theta = theta_max * i as f64 / 50.0;
        let denom = m2 - 2.0 * (theta.cosh() - 1.0);
        // scaled variable w = θ(u − R + 1)
        let f = |w: f64| {
            let u = r0 + w / theta;
            u.powi(3) * (u + 1.0).powf(p) * (-w).exp()
        };
        let (int, _) = numerics::integrate_to_infinity(f, 0.0, 0.0, 1e-9)?;
        let bound = 2.0 * PI * PI * int / theta * (-theta * (r0 - 1.0)).exp() / denom;
        if bound < best.bound {
            best = TailCertificate { radius, theta, bound };
        }
    }
    Ok(best)
}

/// Radius at which the tail certificate drops below `rel_tol` · c_p^p m^{-(p+2)}.
pub fn required_radius(p: f64, m2: f64, rel_tol: f64) -> Result<f64> {
    let target = rel_tol * cp_power_closed(p) * m2.powf(-(p + 2.0) / 2.0);
    let mut r = 4.0 / m2.sqrt();
    for _ in 0..200 {
        if tail_certificate(p, m2, r)?.bound <= target {
            return Ok(r.ceil());
        }
        r *= 1.1;
    }
    Err(Error::Numeric("no radius found for the tail certificate".into()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentResult {
    pub p: f64,
    pub m2: f64,
    pub policy: RadiusPolicy,
    pub sum: f64,
    /// Quadrature error estimate plus the heat-time tail.
    pub err: f64,
    pub radius: Option<f64>,
    /// Certified bound on the part of the sum beyond `radius` (zero for Full).
    pub tail_bound: f64,
    /// sum / (c_p^p m^{-(p+2)}).
    pub ratio: f64,
    /// [sum / χ]^{1/p} with χ = 1/m².
    pub xi_p: f64,
}

fn finish(p: f64, m2: f64, policy: RadiusPolicy, sum: f64, err: f64, radius: Option<f64>, tail: f64) -> MomentResult {
    MomentResult {
        p,
        m2,
        policy,
        sum,
        err,
        radius,
        tail_bound: tail,
        ratio: sum / (cp_power_closed(p) * m2.powf(-(p + 2.0) / 2.0)),
        xi_p: (sum * m2).powf(1.0 / p),
    }
}

fn check_moment_args(p: f64, m2: f64) -> Result<()> {
    if !(p > 0.0) || !p.is_finite() {
        return Err(Error::InvalidArgument(format!("moment order must be positive, got {p}")));
    }
    if !(m2 > 0.0 && m2 < 1.0) {
        return Err(Error::InvalidArgument(format!("need m² in (0, 1), got {m2}")));
    }
    Ok(())
}

pub fn free_moment_sum(p: f64, m2: f64, policy: RadiusPolicy) -> Result<MomentResult> {
    Ok(free_moment_sums(&[p], m2, policy)?.remove(0))
}

/// Several orders at once; ball sums share the heat-time histograms.
pub fn free_moment_sums(ps: &[f64], m2: f64, policy: RadiusPolicy) -> Result<Vec<MomentResult>> {
    for &p in ps {
        check_moment_args(p, m2)?;
    }
    match policy {
        RadiusPolicy::Full => ps
            .iter()
            .map(|&p| {
                let (s, e) = subordinated_sum(p, m2)?;
                Ok(finish(p, m2, policy, s, e, None, 0.0))
            })
            .collect(),
        RadiusPolicy::Auto | RadiusPolicy::Fixed(_) => {
            let mut radius = 0.0f64;
            for &p in ps {
                let need = required_radius(p, m2, TAIL_REL_TOL)?;
                let r = match policy {
                    RadiusPolicy::Fixed(r) => {
                        if r < need {
                            return Err(Error::TailCertificate { radius: r, required: need });
                        }
                        r
                    }
                    _ => need,
                };
                radius = radius.max(r);
            }
            let sums = ball_sums(ps, m2, radius)?;
            ps.iter()
                .zip(sums)
                .map(|(&p, (s, e))| {
                    let tail = tail_certificate(p, m2, radius)?.bound;
                    Ok(finish(p, m2, policy, s, e, Some(radius), tail))
                })
                .collect()
        }
    }
}

fn heat_panels(m2: f64) -> (Vec<(f64, f64)>, f64) {
    let t_end = 60.0 / m2;
    (numerics::geometric_panels(0.05, t_end, 2.0), t_end)
}

/// Σ_{|x|≤R} |x|^p G_x for each p, as ∫ e^{-m²t} Σ_n H_t(n) n^{p/2} dt with
/// H_t the 4-d radial histogram of the heat kernel, built as the
/// autoconvolution of the 2-d one.
fn ball_sums(ps: &[f64], m2: f64, radius: f64) -> Result<Vec<(f64, f64)>> {
    let r = radius.floor() as usize;
    let n_max = (radius * radius).floor() as usize;
    let size = (2 * n_max + 2).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut buf = vec![Complex64::new(0.0, 0.0); size];
    let weights: Vec<Vec<f64>> = ps
        .iter()
        .map(|&p| (0..=n_max).map(|n| (n as f64).powf(p / 2.0)).collect())
        .collect();

    let mut radial = |t: f64| -> Vec<f64> {
        let row = numerics::heat_kernel_row(t, r);
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for x1 in 0..=r {
            let w1 = row[x1] * if x1 == 0 { 1.0 } else { 2.0 };
            let rest = n_max - x1 * x1;
            let lim = (rest as f64).sqrt() as usize;
            let lim = if (lim + 1) * (lim + 1) <= rest { lim + 1 } else { lim };
            for x2 in 0..=lim.min(r) {
                if x2 * x2 > rest {
                    break;
                }
                let w2 = row[x2] * if x2 == 0 { 1.0 } else { 2.0 };
                buf[x1 * x1 + x2 * x2].re += w1 * w2;
            }
        }
        fwd.process(&mut buf);
        for c in buf.iter_mut() {
            *c = *c * *c;
        }
        inv.process(&mut buf);
        let scale = 1.0 / size as f64;
        weights
            .iter()
            .map(|w| {
                let mut s = NeumaierSum::new();
                for n in 1..=n_max {
                    s.add(buf[n].re * scale * w[n]);
                }
                s.value()
            })
            .collect()
    };

    let (panels, t_end) = heat_panels(m2);
    let fine = GaussLegendre::new(12);
    let coarse = GaussLegendre::new(8);
    let mut acc_f: Vec<NeumaierSum> = vec![NeumaierSum::new(); ps.len()];
    let mut acc_c: Vec<NeumaierSum> = vec![NeumaierSum::new(); ps.len()];
    for &(a, b) in &panels {
        if b <= a {
            continue;
        }
        for (rule, acc) in [(&fine, &mut acc_f), (&coarse, &mut acc_c)] {
            for (t, w) in rule.mapped(a, b) {
                let e = w * (-m2 * t).exp();
                for (k, s) in radial(t).into_iter().enumerate() {
                    acc[k].add(e * s);
                }
            }
        }
    }
    Ok(ps
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let f = acc_f[k].value();
            let c = acc_c[k].value();
            // beyond t_end the ball sum is at most R^p
            let t_tail = radius.powf(p) * (-m2 * t_end).exp() / m2;
            (f, (f - c).abs() + t_tail)
        })
        .collect())
}

/// Σ_x |x|^p q_t^{⊗4}(x) over all of Z⁴.
///
/// Even p ∈ {2, 4} use the exact moments of the rate-2 walk. Otherwise
/// |x|^p is written through ∫ (1 − e^{-a|x|²}) a^{-1-p/2} da (0 < p < 2) or
/// its once-subtracted version (2 < p < 4), which factorises into 1-d sums
/// ψ(a) = Σ_k q_t(k) e^{-ak²}.
pub fn heat_moment(p: f64, t: f64) -> Result<f64> {
    let m2 = 8.0 * t;
    let m4 = 8.0 * t + 96.0 * t * t;
    if p == 2.0 {
        return Ok(m2);
    }
    if p == 4.0 {
        return Ok(m4);
    }
    if !(p > 0.0 && p < 4.0) {
        return Err(Error::InvalidArgument(format!(
            "subordination route handles 0 < p ≤ 4, got {p}"
        )));
    }
    if t <= 0.0 {
        return Ok(0.0);
    }
    let s = p / 2.0;
    let kmax = ((2.0 * t).sqrt() * 12.0 + 30.0) as usize;
    let row = numerics::heat_kernel_row(t, kmax);
    // u = 1 − ψ(a) and w = 2ta − u, both summed term by term so that the
    // small-a cancellations never happen in floating point
    let uw = |a: f64| {
        let mut u = NeumaierSum::new();
        let mut w = NeumaierSum::new();
        for (k, &q) in row.iter().enumerate().skip(1) {
            let z = a * (k * k) as f64;
            if z > 745.0 {
                u.add(2.0 * q * (1.0 - (-z).exp()));
                w.add(2.0 * q * (z - 1.0));
                continue;
            }
            u.add(-2.0 * q * (-z).exp_m1());
            let g = if z < 1e-2 {
                z * z * (0.5 - z * (1.0 / 6.0 - z * (1.0 / 24.0 - z * (1.0 / 120.0 - z / 720.0))))
            } else {
                z + (-z).exp_m1()
            };
            w.add(2.0 * q * g);
        }
        (u.value(), w.value())
    };
    let a_lo = 1e-7 / (1.0 + t);
    let a_hi: f64 = 60.0;
    let q0 = row[0];
    let low = s < 1.0;
    let f = |a: f64| {
        let (u, w) = uw(a);
        if low {
            // 1 − ψ⁴
            u * (4.0 - u * (6.0 - u * (4.0 - u)))
        } else {
            // ψ⁴ − 1 + 8ta
            4.0 * w + u * u * (6.0 - u * (4.0 - u))
        }
    };
    let gl = GaussLegendre::new(10);
    let mut mid = NeumaierSum::new();
    let (v0, v1) = (a_lo.ln(), a_hi.ln());
    let panels = (v1 - v0).ceil() as usize;
    let h = (v1 - v0) / panels as f64;
    for i in 0..panels {
        for (v, w) in gl.mapped(v0 + i as f64 * h, v0 + (i + 1) as f64 * h) {
            let a = v.exp();
            mid.add(w * f(a) * a.powf(-s));
        }
    }
    let (left, right, pre) = if low {
        (
            m2 * a_lo.powf(1.0 - s) / (1.0 - s) - 0.5 * m4 * a_lo.powf(2.0 - s) / (2.0 - s),
            (1.0 - q0.powi(4)) * a_hi.powf(-s) / s,
            s / numerics::gamma(1.0 - s),
        )
    } else {
        (
            0.5 * m4 * a_lo.powf(2.0 - s) / (2.0 - s),
            (q0.powi(4) - 1.0) * a_hi.powf(-s) / s + m2 * a_hi.powf(1.0 - s) / (s - 1.0),
            1.0 / numerics::gamma(-s),
        )
    };
    Ok(pre * (left + mid.value() + right))
}

const FULL_MAX_T: f64 = 2.0e6;

fn subordinated_sum(p: f64, m2: f64) -> Result<(f64, f64)> {
    if p == 2.0 {
        return Ok((8.0 / (m2 * m2), 0.0));
    }
    if p == 4.0 {
        // ∫ e^{-m²t}(8t + 96t²) dt
        return Ok((8.0 / (m2 * m2) + 192.0 / (m2 * m2 * m2), 0.0));
    }
    let (panels, t_end) = heat_panels(m2);
    if t_end > FULL_MAX_T {
        return Err(Error::Precondition(format!(
            "untruncated route limited to m² ≥ {:e}; use a radius policy",
            60.0 / FULL_MAX_T
        )));
    }
    let fine = GaussLegendre::new(16);
    let coarse = GaussLegendre::new(10);
    let mut f = NeumaierSum::new();
    let mut c = NeumaierSum::new();
    for &(a, b) in &panels {
        if b <= a {
            continue;
        }
        for (t, w) in fine.mapped(a, b) {
            f.add(w * (-m2 * t).exp() * heat_moment(p, t)?);
        }
        for (t, w) in coarse.mapped(a, b) {
            c.add(w * (-m2 * t).exp() * heat_moment(p, t)?);
        }
    }
    // Jensen: the moment is at most (E|x|⁴)^{p/4}
    let (tail, _) = numerics::integrate_to_infinity(
        |u| {
            let t = t_end + u / m2;
            (-m2 * t).exp() * (8.0 * t + 96.0 * t * t).powf(p / 4.0) / m2
        },
        0.0,
        0.0,
        1e-6,
    )?;
    Ok((f.value(), (f.value() - c.value()).abs() + tail))
}

/// ξ_p = [Σ_x |x|^p G_x / χ]^{1/p}.
pub fn xi_p_from_table(table: &TwoPointTable, chi: f64, p: f64) -> Result<f64> {
    if !(chi > 0.0) {
        return Err(Error::InvalidArgument(format!("χ must be positive, got {chi}")));
    }
    if !(p > 0.0) {
        return Err(Error::InvalidArgument(format!("p must be positive, got {p}")));
    }
    let s: NeumaierSum = table
        .weighted()
        .into_iter()
        .map(|(r, w, v, _)| if r > 0.0 { w * r.powf(p) * v } else { 0.0 })
        .collect();
    Ok((s.value() / chi).powf(1.0 / p))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub p: f64,
    pub m: f64,
    pub ratio: f64,
    pub deviation: f64,
    pub err: f64,
    /// ξ_p √ε with ε = m² at g = 0.
    pub xi_sqrt_eps: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    /// Log-log slope of |ratio − 1| against m per p; `None` when every
    /// deviation is within its error (the ratio is identically 1 for p = 2).
    pub slopes: Vec<(f64, Option<f64>)>,
    /// max |ratio − 1| / m over the grid.
    pub max_dev_over_m: f64,
}

/// Σ|x|^p G / (c_p^p m^{-(p+2)}) → 1 with an O(m) correction.
pub fn convergence_check(ps: &[f64], ms: &[f64], policy: RadiusPolicy) -> Result<ConvergenceReport> {
    let mut rows = Vec::new();
    for &m in ms {
        let res = free_moment_sums(ps, m * m, policy)?;
        for r in res {
            let cp = cp_power_closed(r.p);
            rows.push(ConvergenceRow {
                p: r.p,
                m,
                ratio: r.ratio,
                deviation: (r.ratio - 1.0).abs(),
                err: (r.err + r.tail_bound) / (cp * (m * m).powf(-(r.p + 2.0) / 2.0)),
                xi_sqrt_eps: r.xi_p * m,
            });
        }
    }
    let mut slopes = Vec::new();
    for &p in ps {
        let sel: Vec<&ConvergenceRow> = rows.iter().filter(|r| r.p == p).collect();
        let resolved = sel.iter().all(|r| r.deviation > 10.0 * r.err + 1e-12);
        let slope = if resolved && sel.len() >= 2 {
            let xs: Vec<f64> = sel.iter().map(|r| r.m).collect();
            let ys: Vec<f64> = sel.iter().map(|r| r.deviation).collect();
            Some(numerics::loglog_slope(&xs, &ys))
        } else {
            None
        };
        slopes.push((p, slope));
    }
    let max_dev_over_m = rows.iter().map(|r| r.deviation / r.m).fold(0.0, f64::max);
    Ok(ConvergenceReport {
        rows,
        slopes,
        max_dev_over_m,
    })
}
