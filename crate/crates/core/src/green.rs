//! Lattice Green functions (−Δ + m²)^{-1}_{0x}: spectral inversion on the
//! torus, the heat-kernel integral on Z⁴, and the continuum massive kernel.

use crate::error::{Error, Result};
use crate::lattice::{self, Point, SortedTuples, Torus, DIM};
use crate::numerics::{self, GaussLegendre, NeumaierSum};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    ExactSpectral,
    Quadrature,
    Mc,
}

/// A two-point function x ↦ G_x. Torus tables are dense in row-major order;
/// ball tables store one value per point-group orbit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum TableData {
    Torus {
        torus: Torus,
        values: Vec<f64>,
        errs: Vec<f64>,
    },
    Ball {
        radius: f64,
        reps: Vec<[u32; DIM]>,
        values: Vec<f64>,
        errs: Vec<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwoPointTable {
    pub m2: f64,
    pub provenance: Provenance,
    pub data: TableData,
}

impl TwoPointTable {
    /// Iterate over (point, value, error) with every lattice point listed.
    pub fn entries(&self) -> Vec<(Point, f64, f64)> {
        match &self.data {
            TableData::Torus {
                torus,
                values,
                errs,
            } => (0..torus.volume())
                .map(|i| (torus.embed(i), values[i], errs[i]))
                .collect(),
            TableData::Ball {
                reps,
                values,
                errs,
                ..
            } => {
                let mut out = Vec::new();
                for (k, a) in reps.iter().enumerate() {
                    let x = [a[0] as i64, a[1] as i64, a[2] as i64, a[3] as i64];
                    let mut imgs = lattice::point_group_images(&x);
                    imgs.sort();
                    imgs.dedup();
                    for y in imgs {
                        out.push((y, values[k], errs[k]));
                    }
                }
                out.sort_by_key(|a| a.0);
                out
            }
        }
    }

    /// (|x|, multiplicity, value, err) per stored entry; multiplicities
    /// expand orbits for ball tables.
    pub fn weighted(&self) -> Vec<(f64, f64, f64, f64)> {
        match &self.data {
            TableData::Torus {
                torus,
                values,
                errs,
            } => (0..torus.volume())
                .map(|i| (lattice::norm(&torus.embed(i)), 1.0, values[i], errs[i]))
                .collect(),
            TableData::Ball {
                reps,
                values,
                errs,
                ..
            } => reps
                .iter()
                .enumerate()
                .map(|(k, a)| {
                    let r2: f64 = a.iter().map(|&c| (c as f64) * (c as f64)).sum();
                    (r2.sqrt(), lattice::orbit_size(a) as f64, values[k], errs[k])
                })
                .collect(),
        }
    }

    pub fn value(&self, x: &Point) -> Option<f64> {
        match &self.data {
            TableData::Torus { torus, values, .. } => Some(values[torus.index_of(x)]),
            TableData::Ball {
                radius,
                reps,
                values,
                ..
            } => {
                if lattice::norm(x) > *radius {
                    return None;
                }
                let a = lattice::sorted_abs(x);
                reps.binary_search_by(|r| lattice::colex_rank(r).cmp(&lattice::colex_rank(&a)))
                    .ok()
                    .map(|k| values[k])
            }
        }
    }

    /// Σ_x G_x over the table.
    pub fn sum(&self) -> f64 {
        let mut s = NeumaierSum::new();
        for (_, w, v, _) in self.weighted() {
            s.add(w * v);
        }
        s.value()
    }

    pub fn scaled(&self, c: f64) -> TwoPointTable {
        let mut t = self.clone();
        match &mut t.data {
            TableData::Torus { values, errs, .. } | TableData::Ball { values, errs, .. } => {
                for v in values.iter_mut() {
                    *v *= c;
                }
                for e in errs.iter_mut() {
                    *e *= c.abs();
                }
            }
        }
        t
    }

    /// CSV with columns x1..x4,value,err in row-major centred order.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x1,x2,x3,x4,value,err\n");
        for (x, v, e) in self.entries() {
            s.push_str(&format!(
                "{},{},{},{},{:.17e},{:.3e}\n",
                x[0], x[1], x[2], x[3], v, e
            ));
        }
        s
    }
}

/// λ(k) for the torus Fourier mode k.
pub fn torus_eigenvalue(m: usize, k: &[usize; DIM]) -> f64 {
    k.iter()
        .map(|&ki| 2.0 - 2.0 * (2.0 * PI * ki as f64 / m as f64).cos())
        .sum()
}

/// Real kernel of f(−Δ) on the torus, returned in row-major centred order.
pub fn spectral_kernel<F: Fn(f64) -> f64>(torus: &Torus, f: F) -> Vec<f64> {
    let m = torus.m;
    let vol = torus.volume();
    // data indexed by (k0,k1,k2,k3) with k_i in 0..m
    let mut data: Vec<Complex64> = Vec::with_capacity(vol);
    let cosv: Vec<f64> = (0..m)
        .map(|k| 2.0 - 2.0 * (2.0 * PI * k as f64 / m as f64).cos())
        .collect();
    for k0 in 0..m {
        for k1 in 0..m {
            for k2 in 0..m {
                for k3 in 0..m {
                    let lam = cosv[k0] + cosv[k1] + cosv[k2] + cosv[k3];
                    data.push(Complex64::new(f(lam), 0.0));
                }
            }
        }
    }
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_inverse(m);
    let mut line = vec![Complex64::new(0.0, 0.0); m];
    for axis in 0..DIM {
        let stride = m.pow((DIM - 1 - axis) as u32);
        for base in 0..vol {
            if !(base / stride).is_multiple_of(m) {
                continue;
            }
            for (i, l) in line.iter_mut().enumerate() {
                *l = data[base + i * stride];
            }
            fft.process(&mut line);
            for (i, l) in line.iter().enumerate() {
                data[base + i * stride] = *l;
            }
        }
    }
    let norm = 1.0 / vol as f64;
    let mut out = vec![0.0; vol];
    for (idx, o) in out.iter_mut().enumerate() {
        let x = torus.embed(idx);
        let mut k = 0usize;
        for &c in &x {
            k = k * m + c.rem_euclid(m as i64) as usize;
        }
        *o = data[k].re * norm;
    }
    out
}

/// G on the torus by spectral inversion.
pub fn torus_green(torus: &Torus, m2: f64) -> Result<TwoPointTable> {
    if !(m2 > 0.0) || !m2.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "torus Green function needs m² > 0, got {m2}"
        )));
    }
    let values = spectral_kernel(torus, |lam| 1.0 / (lam + m2));
    let scale = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let err = 16.0 * f64::EPSILON * scale * (torus.volume() as f64).log2().max(1.0);
    let errs = vec![err; values.len()];
    Ok(TwoPointTable {
        m2,
        provenance: Provenance::ExactSpectral,
        data: TableData::Torus {
            torus: *torus,
            values,
            errs,
        },
    })
}

/// E_n(z) = ∫_1^∞ e^{-zu} u^{-n} du for n ≥ 1, z ≥ 0.
pub fn expint_n(n: usize, z: f64) -> f64 {
    assert!(n >= 1);
    if z == 0.0 {
        assert!(n > 1, "E_1(0) diverges");
        return 1.0 / (n as f64 - 1.0);
    }
    let euler = 0.577_215_664_901_532_9;
    let nm1 = n as f64 - 1.0;
    if z > 1.0 {
        // Lentz continued fraction
        let mut b = z + n as f64;
        let mut c = 1.0 / 1e-300;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let a = -(i as f64) * (nm1 + i as f64);
            b += 2.0;
            d = 1.0 / (a * d + b);
            c = b + a / c;
            let del = c * d;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        h * (-z).exp()
    } else {
        let mut ans = if n == 1 { -z.ln() - euler } else { 1.0 / nm1 };
        let mut fact = 1.0;
        for i in 1..10_000 {
            fact *= -z / i as f64;
            let del = if i as f64 != nm1 {
                -fact / (i as f64 - nm1)
            } else {
                let mut psi = -euler;
                for ii in 1..n {
                    psi += 1.0 / ii as f64;
                }
                fact * (-z.ln() + psi)
            };
            ans += del;
            if del.abs() < ans.abs() * 1e-17 {
                break;
            }
        }
        ans
    }
}

const TAIL_ORDER: usize = 10;

/// Coefficients c_k of Π_i e^{-2t}I_{x_i}(2t) = (4πt)^{-2} Σ_k c_k t^{-k} + …
fn hankel_product(x: &[u32; DIM]) -> Vec<f64> {
    let mut prod = vec![0.0; TAIL_ORDER + 1];
    prod[0] = 1.0;
    for &xi in x {
        let a = numerics::hankel_coefficients(xi as f64, TAIL_ORDER);
        let s: Vec<f64> = a
            .iter()
            .enumerate()
            .map(|(k, v)| if k % 2 == 0 { *v } else { -*v } / 2f64.powi(k as i32))
            .collect();
        let mut next = vec![0.0; TAIL_ORDER + 1];
        for (i, p) in prod.iter().enumerate() {
            for (j, q) in s.iter().enumerate() {
                if i + j <= TAIL_ORDER {
                    next[i + j] += p * q;
                }
            }
        }
        prod = next;
    }
    prod
}

/// Heat-kernel quadrature layout shared by every point of a table.
struct HeatQuadrature {
    nodes: Vec<(f64, f64)>,
    t_switch: f64,
    /// J_k = ∫_{T}^∞ e^{-m² t} t^{-2-k} dt
    tail_moments: Vec<f64>,
}

impl HeatQuadrature {
    fn new(m2: f64, max_coord: u32, gl_points: usize) -> Self {
        let nu = max_coord as f64;
        let mut t_switch = 400.0 * (1.0 + nu * nu);
        // with a large mass the integrand is negligible long before the switch
        if m2 > 0.0 {
            let cut = 60.0 / m2;
            if cut < t_switch {
                t_switch = cut.max(1.0);
            }
        }
        let gl = GaussLegendre::new(gl_points);
        let mut nodes = Vec::new();
        for (a, b) in numerics::geometric_panels(0.25, t_switch, 1.6) {
            if b > a {
                nodes.extend(gl.mapped(a, b));
            }
        }
        let tail_moments = (0..=TAIL_ORDER)
            .map(|k| t_switch.powi(-(1 + k as i32)) * expint_n(k + 2, m2 * t_switch))
            .collect();
        Self {
            nodes,
            t_switch,
            tail_moments,
        }
    }

    fn tail(&self, x: &[u32; DIM]) -> f64 {
        let c = hankel_product(x);
        let s: f64 = c.iter().zip(&self.tail_moments).map(|(a, b)| a * b).sum();
        s / (16.0 * PI * PI)
    }
}

/// Values of G_x(m²) on sorted representatives via a shared quadrature.
fn heat_values(reps: &[[u32; DIM]], m2: f64, gl_points: usize) -> Vec<f64> {
    let maxc = reps.iter().map(|a| a[3]).max().unwrap_or(0);
    let q = HeatQuadrature::new(m2, maxc, gl_points);
    let mut acc: Vec<NeumaierSum> = vec![NeumaierSum::new(); reps.len()];
    for &(t, w) in &q.nodes {
        let row = numerics::heat_kernel_row(t, maxc as usize);
        let wt = w * (-m2 * t).exp();
        for (k, a) in reps.iter().enumerate() {
            let v = row[a[0] as usize] * row[a[1] as usize] * row[a[2] as usize] * row[a[3] as usize];
            acc[k].add(wt * v);
        }
    }
    let use_tail = m2 == 0.0 || m2 * q.t_switch < 700.0;
    reps.iter()
        .zip(acc)
        .map(|(a, s)| {
            let mut v = s.value();
            if use_tail {
                v += q.tail(a);
            }
            v
        })
        .collect()
}

/// G_x(0, m²) on Z⁴ with an error estimate from two quadrature resolutions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GreenValue {
    pub value: f64,
    pub err: f64,
}

pub fn infinite_green(x: &Point, m2: f64) -> Result<GreenValue> {
    let v = infinite_green_many(&[lattice::sorted_abs(x)], m2)?;
    Ok(v[0])
}

/// Batch evaluation on sorted representatives.
pub fn infinite_green_many(reps: &[[u32; DIM]], m2: f64) -> Result<Vec<GreenValue>> {
    if !(m2 >= 0.0) || !m2.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "infinite-volume Green function needs m² ≥ 0, got {m2}"
        )));
    }
    let coarse = heat_values(reps, m2, 20);
    let fine = heat_values(reps, m2, 32);
    let mut out = Vec::with_capacity(reps.len());
    for (c, f) in coarse.iter().zip(&fine) {
        let err = (c - f).abs() + 1e-15 * f.abs();
        if !(err <= 1e-8 * f.abs().max(1e-300)) {
            return Err(Error::Quadrature {
                achieved: err,
                wanted: 1e-8 * f.abs(),
            });
        }
        out.push(GreenValue { value: *f, err });
    }
    Ok(out)
}

/// Orbit representatives of the Euclidean ball |x| ≤ radius.
pub fn ball_reps(radius: f64) -> Vec<[u32; DIM]> {
    let r = radius.floor().max(0.0) as u32;
    let r2max = radius * radius;
    SortedTuples::new(r)
        .filter(|a| a.iter().map(|&c| (c as f64) * (c as f64)).sum::<f64>() <= r2max + 1e-9)
        .collect()
}

/// G on a Z⁴ ball, one quadrature value per orbit.
pub fn ball_green(radius: f64, m2: f64) -> Result<TwoPointTable> {
    let reps = ball_reps(radius);
    let vals = infinite_green_many(&reps, m2)?;
    Ok(TwoPointTable {
        m2,
        provenance: Provenance::Quadrature,
        data: TableData::Ball {
            radius,
            reps,
            values: vals.iter().map(|g| g.value).collect(),
            errs: vals.iter().map(|g| g.err).collect(),
        },
    })
}

/// ((−Δ + m²)G)_x − δ_{0x} from quadrature values.
pub fn defining_residual(x: &Point, m2: f64) -> Result<f64> {
    let mut pts = vec![lattice::sorted_abs(x)];
    for axis in 0..DIM {
        for s in [-1, 1] {
            let mut y = *x;
            y[axis] += s;
            pts.push(lattice::sorted_abs(&y));
        }
    }
    let g = infinite_green_many(&pts, m2)?;
    let mut r = (8.0 + m2) * g[0].value;
    for v in &g[1..] {
        r -= v.value;
    }
    if lattice::norm2(x) == 0 {
        r -= 1.0;
    }
    Ok(r)
}

/// (2π)^{-2} K₁(r)/r, the massive (m = 1) continuum Green function in R⁴.
pub fn continuum_green(r: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "continuum Green function needs r > 0, got {r}"
        )));
    }
    Ok(numerics::bessel_k(1.0, r) / r / (4.0 * PI * PI))
}

/// (−Δ_{Z⁴})^{-1}_{00}.
pub fn massless_green_00() -> Result<GreenValue> {
    infinite_green(&[0; DIM], 0.0)
}

/// a(n) = (n + 2)(−Δ)^{-1}_{00}, the first-order coefficient of ν_c.
pub fn a_coefficient(n: usize) -> Result<f64> {
    Ok((n as f64 + 2.0) * massless_green_00()?.value)
}

/// Σ_x G_x(0,m²)² = ∫ t e^{-m² t} q_t(0)^4 dt.
pub fn green_l2_squared(m2: f64) -> Result<f64> {
    if !(m2 > 0.0) {
        return Err(Error::InvalidArgument(
            "Σ G² diverges at m² = 0 in d = 4".into(),
        ));
    }
    let t_end = 80.0 / m2;
    let gl = GaussLegendre::new(24);
    let mut s = NeumaierSum::new();
    for (a, b) in numerics::geometric_panels(0.25, t_end, 1.5) {
        if b <= a {
            continue;
        }
        for (t, w) in gl.mapped(a, b) {
            let q = numerics::heat_kernel_row(t, 0)[0];
            s.add(w * t * (-m2 * t).exp() * q.powi(4));
        }
    }
    Ok(s.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    #[test]
    fn single_site_torus() {
        let t = Torus::with_side(1).unwrap();
        let g = torus_green(&t, 0.3).unwrap();
        assert_relative_eq!(g.sum(), 1.0 / 0.3, max_relative = 1e-14);
    }

    #[test]
    fn dense_solve_oracle_l2_n1() {
        let t = Torus::new(2, 1).unwrap();
        let vol = t.volume();
        let mut a = DMatrix::<f64>::zeros(vol, vol);
        for s in 0..vol {
            a[(s, s)] += 1.0;
            for axis in 0..DIM {
                for fwd in [true, false] {
                    let n = t.neighbor(s, axis, fwd);
                    a[(s, s)] += 1.0;
                    a[(s, n)] -= 1.0;
                }
            }
        }
        let mut b = nalgebra::DVector::<f64>::zeros(vol);
        let o = t.index_of(&[0; DIM]);
        b[o] = 1.0;
        let sol = a.lu().solve(&b).unwrap();
        let g = torus_green(&t, 1.0).unwrap();
        for s in 0..vol {
            assert_relative_eq!(g.value(&t.embed(s)).unwrap(), sol[s], max_relative = 1e-13);
        }
    }

    #[test]
    fn susceptibility_identity() {
        for (l, n, m2) in [(2, 2, 0.5), (3, 1, 0.5), (2, 3, 0.01)] {
            let t = Torus::new(l, n).unwrap();
            let g = torus_green(&t, m2).unwrap();
            assert!((m2 * g.sum() - 1.0).abs() < 1e-12);
        }
        assert!(torus_green(&Torus::new(2, 2).unwrap(), 0.0).is_err());
    }

    #[test]
    fn torus_point_group_symmetry() {
        let t = Torus::with_side(5).unwrap();
        let g = torus_green(&t, 0.2).unwrap();
        let x = [1, -2, 0, 2];
        let v = g.value(&x).unwrap();
        for y in lattice::point_group_images(&x) {
            assert_relative_eq!(g.value(&y).unwrap(), v, max_relative = 1e-12);
        }
    }

    #[test]
    fn watson_value() {
        // the 4-d simple random walk Green function is 1.23946712...; with
        // −Δ having diagonal 8 this is divided by 8
        let g = massless_green_00().unwrap();
        assert_relative_eq!(g.value, 1.239_467_121_845_1 / 8.0, max_relative = 1e-10);
        assert!(g.err < 1e-10);
        assert!(g.value > 1.0 / 8.0);
        assert_relative_eq!(a_coefficient(0).unwrap(), 2.0 * g.value, max_relative = 1e-14);
        assert_relative_eq!(a_coefficient(1).unwrap(), 3.0 * g.value, max_relative = 1e-14);
    }

    #[test]
    fn heavy_mass_single_term() {
        let g = infinite_green(&[0; DIM], 100.0).unwrap();
        assert!((g.value * 108.0 - 1.0).abs() < 0.01);
    }

    #[test]
    fn defining_equation() {
        for x in [[0, 0, 0, 0], [1, 0, 0, 0], [2, 1, 0, 0]] {
            assert!(defining_residual(&x, 0.25).unwrap().abs() < 1e-10);
        }
        assert!(defining_residual(&[1, 1, 0, 0], 0.0).unwrap().abs() < 1e-10);
    }

    #[test]
    fn torus_matches_infinite_volume_for_large_side() {
        // images at distance ≥ 32 contribute below e^{-32·θ} with θ ≈ m
        let t = Torus::with_side(32).unwrap();
        let m2 = 1.0;
        let g = torus_green(&t, m2).unwrap();
        for x in [[0, 0, 0, 0], [1, 0, 0, 0], [2, 1, 1, 0]] {
            let inf = infinite_green(&x, m2).unwrap().value;
            assert_relative_eq!(g.value(&x).unwrap(), inf, max_relative = 1e-9);
        }
    }

    #[test]
    fn domination_by_massless() {
        let reps = ball_reps(4.0);
        let g0 = infinite_green_many(&reps, 0.0).unwrap();
        let gm = infinite_green_many(&reps, 0.3).unwrap();
        for (a, b) in g0.iter().zip(&gm) {
            assert!(b.value > 0.0 && b.value <= a.value);
        }
    }

    #[test]
    fn ball_table_symmetry_and_lookup() {
        let t = ball_green(3.0, 0.5).unwrap();
        let e = t.entries();
        assert_eq!(e.len() as u64, lattice::ShellIter::new(1, 7).filter(|x| lattice::norm(x) <= 3.0).count() as u64);
        let v = t.value(&[1, -2, 0, 0]).unwrap();
        assert_eq!(t.value(&[0, 0, 2, 1]).unwrap(), v);
        assert!(t.value(&[3, 3, 0, 0]).is_none());
    }

    #[test]
    fn continuum_small_and_large_r() {
        let r = 1e-3;
        assert_relative_eq!(continuum_green(r).unwrap() * r * r * 4.0 * PI * PI, 1.0, max_relative = 1e-5);
        let c1 = continuum_green(30.0).unwrap() * 30f64.exp() * 30f64.powf(1.5);
        let c2 = continuum_green(60.0).unwrap() * 60f64.exp() * 60f64.powf(1.5);
        let limit = (PI / 2.0).sqrt() / (4.0 * PI * PI);
        assert!((c1 / limit - 1.0).abs() < 0.02);
        assert!((c2 / limit - 1.0).abs() < (c1 / limit - 1.0).abs());
        let mut prev = f64::INFINITY;
        for i in 1..=200 {
            let v = continuum_green(0.1 * i as f64).unwrap();
            assert!(v > 0.0 && v < prev);
            prev = v;
        }
        assert!(continuum_green(0.0).is_err());
    }

    #[test]
    fn expint_reference() {
        // E_1(1) = 0.21938393439552029, E_3(0.5) = 0.22146836....
        assert_relative_eq!(expint_n(1, 1.0), 0.219_383_934_395_520_3, max_relative = 1e-13);
        assert_relative_eq!(expint_n(2, 2.0), 0.037_534_261_820_490_75, max_relative = 1e-12);
        assert_relative_eq!(expint_n(4, 0.0), 1.0 / 3.0, max_relative = 1e-15);
    }

    #[test]
    fn bubble_matches_direct_sum() {
        let m2 = 1.0;
        let t = Torus::with_side(24).unwrap();
        let g = torus_green(&t, m2).unwrap();
        let direct: f64 = g.weighted().iter().map(|(_, w, v, _)| w * v * v).sum();
        assert_relative_eq!(green_l2_squared(m2).unwrap(), direct, max_relative = 1e-8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn torus_sum_identity_random(m in 1usize..9, m2 in 0.01f64..10.0) {
            let t = Torus::with_side(m).unwrap();
            let g = torus_green(&t, m2).unwrap();
            prop_assert!((m2 * g.sum() - 1.0).abs() < 1e-12);
        }
    }
}
