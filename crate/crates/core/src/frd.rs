//! Finite-range decomposition (−Δ + m²)^{-1} = Σ_j C_j.
//!
//! Slice j is a polynomial in y = 1 − (−Δ)/8 of degree D_j = ⌊L^j/2⌋ − 1,
//! so C_{j;x} vanishes identically once |x|₁ > D_j. The polynomial is the
//! Chebyshev expansion of ∫ e^{-m²t} e^{-λt} dt over a heat-time window
//! [t_{j-1}, t_j], damped by the Fourier coefficients of a power of the
//! Fejér kernel. The damping kernel is nonnegative, so every slice is
//! positive semidefinite. The last slice carries whatever is left.

use crate::error::{Error, Result};
use crate::green::{self, Provenance, TableData, TwoPointTable};
use crate::lattice::{self, Point, Torus, DIM};
use crate::numerics::{self, GaussLegendre, NeumaierSum};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Largest polynomial degree a finite-range slice may use.
pub const MAX_DEGREE: usize = 255;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrdConfig {
    /// t_j = heat_step · (D_j + 1)².
    pub heat_step: f64,
    /// Power r of the Fejér kernel used as damping window.
    pub fejer_power: usize,
}

impl Default for FrdConfig {
    fn default() -> Self {
        Self {
            heat_step: 0.1,
            fejer_power: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Domain {
    Ball { radius: f64 },
    Torus(Torus),
}

/// Storage for point-group symmetric functions supported on |x|₁ ≤ d.
/// One slot per sorted tuple a1 ≤ a2 ≤ a3 ≤ a4 of absolute coordinates.
#[derive(Debug)]
pub struct SymLayout {
    pub d: usize,
    tuples: Vec<[u16; DIM]>,
    offsets: Vec<u32>,
    by_l1: Vec<u32>,
    l1_end: Vec<usize>,
}

impl SymLayout {
    pub fn new(d: usize) -> Self {
        let w = d + 1;
        let mut offsets = vec![u32::MAX; w * w * w];
        let mut tuples = Vec::new();
        for a4 in 0..=d {
            for a3 in 0..=a4 {
                for a2 in 0..=a3 {
                    let rest = a2 + a3 + a4;
                    if rest > d {
                        continue;
                    }
                    offsets[(a2 * w + a3) * w + a4] = tuples.len() as u32;
                    for a1 in 0..=a2.min(d - rest) {
                        tuples.push([a1 as u16, a2 as u16, a3 as u16, a4 as u16]);
                    }
                }
            }
        }
        let l1 = |t: &[u16; DIM]| t.iter().map(|&c| c as usize).sum::<usize>();
        let mut by_l1: Vec<u32> = (0..tuples.len() as u32).collect();
        by_l1.sort_by_key(|&k| l1(&tuples[k as usize]));
        let mut l1_end = vec![0; d + 1];
        for &k in &by_l1 {
            l1_end[l1(&tuples[k as usize])] += 1;
        }
        for s in 1..=d {
            l1_end[s] += l1_end[s - 1];
        }
        Self {
            d,
            tuples,
            offsets,
            by_l1,
            l1_end,
        }
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn tuple(&self, k: usize) -> [u32; DIM] {
        let t = self.tuples[k];
        [t[0] as u32, t[1] as u32, t[2] as u32, t[3] as u32]
    }

    /// Slot of a sorted tuple, `None` outside the ℓ¹ ball.
    pub fn index(&self, a: &[u32; DIM]) -> Option<usize> {
        let s: u64 = a.iter().map(|&c| c as u64).sum();
        if s > self.d as u64 {
            return None;
        }
        let w = self.d + 1;
        let off = self.offsets[(a[1] as usize * w + a[2] as usize) * w + a[3] as usize];
        Some(off as usize + a[0] as usize)
    }

    fn neighbours(&self) -> Vec<[u32; 8]> {
        let sentinel = self.len() as u32;
        (0..self.len())
            .map(|k| {
                let a = self.tuple(k);
                let mut out = [sentinel; 8];
                for i in 0..DIM {
                    for (s, step) in [(0, 1i64), (1, -1)] {
                        let mut b = a;
                        b[i] = (a[i] as i64 + step).unsigned_abs() as u32;
                        b.sort_unstable();
                        if let Some(idx) = self.index(&b) {
                            out[2 * i + s] = idx as u32;
                        }
                    }
                }
                out
            })
            .collect()
    }
}

/// A symmetric finite-range kernel x ↦ C_x.
#[derive(Debug, Clone)]
pub struct SymKernel {
    pub layout: Arc<SymLayout>,
    pub values: Vec<f64>,
}

impl SymKernel {
    pub fn range(&self) -> usize {
        self.layout.d
    }

    pub fn value_at(&self, x: &Point) -> f64 {
        let a = lattice::sorted_abs(x);
        self.layout.index(&a).map_or(0.0, |k| self.values[k])
    }

    /// (sorted tuple, orbit size, value) for every stored slot.
    pub fn orbits(&self) -> impl Iterator<Item = ([u32; DIM], u64, f64)> + '_ {
        (0..self.layout.len()).map(move |k| {
            let a = self.layout.tuple(k);
            (a, lattice::orbit_size(&a), self.values[k])
        })
    }

    pub fn sum(&self) -> f64 {
        self.orbits().map(|(_, w, v)| w as f64 * v).collect::<NeumaierSum>().value()
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    /// Values on a torus; exact periodisation when the range is below M/2.
    pub fn on_torus(&self, torus: &Torus) -> Result<Vec<f64>> {
        if 2 * self.range() + 1 > torus.m {
            return Err(Error::Precondition(format!(
                "kernel range {} does not fit on a torus of side {}",
                self.range(),
                torus.m
            )));
        }
        Ok((0..torus.volume())
            .map(|i| self.value_at(&torus.embed(i)))
            .collect())
    }

    /// CSV rows a1..a4 (sorted |x_i|), orbit size and value.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("a1,a2,a3,a4,orbit,value\n");
        for (a, w, v) in self.orbits() {
            s.push_str(&format!("{},{},{},{},{},{:.17e}\n", a[0], a[1], a[2], a[3], w, v));
        }
        s
    }
}

/// Fourier coefficients of F_M^r normalised to g_0 = 1, M = ⌊D/r⌋ + 1.
/// Nonzero only for |n| ≤ r(M − 1) ≤ D.
pub fn fejer_window(d: usize, r: usize) -> Vec<f64> {
    let m = d / r.max(1) + 1;
    let base: Vec<f64> = (0..2 * m - 1)
        .map(|i| (m as f64) - (i as f64 - (m as f64 - 1.0)).abs())
        .collect();
    let mut acc = vec![1.0];
    for _ in 0..r {
        let mut next = vec![0.0; acc.len() + base.len() - 1];
        for (i, a) in acc.iter().enumerate() {
            for (k, b) in base.iter().enumerate() {
                next[i + k] += a * b;
            }
        }
        acc = next;
    }
    let centre = (acc.len() - 1) / 2;
    let mut g = vec![0.0; d + 1];
    for (n, gn) in g.iter_mut().enumerate() {
        if centre + n < acc.len() {
            *gn = acc[centre + n] / acc[centre];
        }
    }
    g
}

/// Σ_n c_n T_n(y) by Clenshaw.
pub fn chebyshev_eval(c: &[f64], y: f64) -> f64 {
    let mut b1 = 0.0;
    let mut b2 = 0.0;
    for &ck in c.iter().skip(1).rev() {
        let b0 = 2.0 * y * b1 - b2 + ck;
        b2 = b1;
        b1 = b0;
    }
    c.first().copied().unwrap_or(0.0) + y * b1 - b2
}

pub fn degree(l: usize, j: usize) -> usize {
    (l.pow(j as u32) / 2).saturating_sub(1)
}

/// Heat-time window ends t_0 = 0, t_j = s (D_j + 1)².
pub fn heat_time(cfg: &FrdConfig, l: usize, j: usize) -> f64 {
    if j == 0 {
        0.0
    } else {
        let d = degree(l, j) as f64 + 1.0;
        cfg.heat_step * d * d
    }
}

/// ∫_a^b e^{-m²t} q_{4t}(n) dt for n = 0..=d, with a two-rule error estimate.
fn window_integrals(a: f64, b: f64, m2: f64, d: usize) -> (Vec<f64>, f64) {
    let run = |pts: usize| {
        let gl = GaussLegendre::new(pts);
        let panels: Vec<(f64, f64)> = if a == 0.0 {
            numerics::geometric_panels((0.05f64).min(b), b, 1.5)
        } else {
            let mut v = Vec::new();
            let mut lo = a;
            while lo < b {
                let hi = (lo * 1.5).min(b);
                v.push((lo, hi));
                lo = hi;
            }
            v
        };
        let mut acc = vec![NeumaierSum::new(); d + 1];
        for (lo, hi) in panels {
            if hi <= lo {
                continue;
            }
            for (t, w) in gl.mapped(lo, hi) {
                let row = numerics::heat_kernel_row(4.0 * t, d);
                let wt = w * (-m2 * t).exp();
                for (s, q) in acc.iter_mut().zip(&row) {
                    s.add(wt * q);
                }
            }
        }
        acc.iter().map(|s| s.value()).collect::<Vec<f64>>()
    };
    let coarse = run(16);
    let fine = run(24);
    let err = coarse
        .iter()
        .zip(&fine)
        .fold(0.0f64, |e, (c, f)| e.max((c - f).abs()));
    (fine, err)
}

#[derive(Debug, Clone)]
pub struct Slice {
    pub j: usize,
    pub degree: usize,
    pub window: (f64, f64),
    /// Chebyshev coefficients of Q_j in y = 1 − λ/8.
    pub coefs: Vec<f64>,
    pub kernel: SymKernel,
}

impl Slice {
    /// Q_j(λ).
    pub fn multiplier(&self, lambda: f64) -> f64 {
        chebyshev_eval(&self.coefs, 1.0 - lambda / 8.0)
    }

    /// min of Q_j over a grid of the spectrum [0, 16].
    pub fn min_multiplier(&self) -> f64 {
        (0..=4000)
            .map(|i| self.multiplier(16.0 * i as f64 / 4000.0))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceMeta {
    pub j: usize,
    pub degree: usize,
    pub window: (f64, f64),
    pub c0: f64,
    pub min_multiplier: f64,
    pub coef_err: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecompositionManifest {
    pub l: usize,
    pub m2: f64,
    pub j_max: usize,
    pub config: FrdConfig,
    pub domain: Domain,
    pub slices: Vec<SliceMeta>,
    pub telescoping_residual: f64,
}

#[derive(Debug, Clone)]
pub struct CovarianceDecomposition {
    pub l: usize,
    pub m2: f64,
    pub j_max: usize,
    pub config: FrdConfig,
    pub domain: Domain,
    /// Finite-range slices j = 1..j_max−1.
    pub slices: Vec<Slice>,
    /// C_{j_max}: the remainder, unconstrained in range.
    pub remainder: TwoPointTable,
    pub coef_err: Vec<f64>,
}

/// Build the decomposition with finite-range slices 1..j_max−1 and the
/// remainder in slice j_max.
pub fn decompose(m2: f64, l: usize, j_max: usize, domain: Domain) -> Result<CovarianceDecomposition> {
    decompose_with(m2, l, j_max, domain, FrdConfig::default())
}

pub fn decompose_with(
    m2: f64,
    l: usize,
    j_max: usize,
    domain: Domain,
    config: FrdConfig,
) -> Result<CovarianceDecomposition> {
    if !(m2 > 0.0) || !m2.is_finite() {
        return Err(Error::InvalidArgument(format!("decomposition needs m² > 0, got {m2}")));
    }
    if l < 2 {
        return Err(Error::InvalidArgument(format!("L must exceed 1, got {l}")));
    }
    if j_max < 2 {
        return Err(Error::InvalidArgument(format!("j_max must be at least 2, got {j_max}")));
    }
    if !(config.heat_step > 0.0) || config.fejer_power == 0 {
        return Err(Error::InvalidArgument("heat step and Fejér power must be positive".into()));
    }
    let top = j_max - 1;
    let dmax = (l as u64).checked_pow(top as u32).map(|v| v / 2);
    match dmax {
        Some(v) if v >= 1 && v - 1 <= MAX_DEGREE as u64 => {}
        _ => {
            return Err(Error::DegreeBudget {
                scale: top,
                reason: format!("degree ⌊L^j/2⌋ − 1 exceeds the cap {MAX_DEGREE}"),
            })
        }
    }
    if let Domain::Torus(t) = domain {
        let need = (l as u64).pow(j_max as u32);
        if (t.m as u64) < need {
            return Err(Error::Precondition(format!(
                "torus side {} below L^j_max = {need}",
                t.m
            )));
        }
    }
    if let Domain::Ball { radius } = domain {
        if !(radius >= 0.0) {
            return Err(Error::InvalidArgument("ball radius must be nonnegative".into()));
        }
    }

    let dmax = degree(l, top);
    let layout = Arc::new(SymLayout::new(dmax));
    let nbr = layout.neighbours();
    let len = layout.len();

    let mut coefs = Vec::with_capacity(top);
    let mut coef_err = Vec::with_capacity(top);
    for j in 1..=top {
        let d = degree(l, j);
        let (a, b) = (heat_time(&config, l, j - 1), heat_time(&config, l, j));
        let (ints, err) = window_integrals(a, b, m2, d);
        let g = fejer_window(d, config.fejer_power);
        let c: Vec<f64> = (0..=d)
            .map(|n| g[n] * if n == 0 { 1.0 } else { 2.0 } * ints[n])
            .collect();
        coefs.push(c);
        coef_err.push(err);
    }

    // T_n(y)δ by the three-term recurrence, slot `len` is a permanent zero
    let mut acc = vec![vec![0.0; len]; top];
    let mut prev = vec![0.0; len + 1];
    let mut cur = vec![0.0; len + 1];
    let origin = layout.index(&[0; DIM]).unwrap();
    cur[origin] = 1.0;
    for n in 0..=dmax {
        let live = &layout.by_l1[..layout.l1_end[n]];
        for (j, c) in coefs.iter().enumerate() {
            if n < c.len() {
                let cn = c[n];
                for &k in live {
                    acc[j][k as usize] += cn * cur[k as usize];
                }
            }
        }
        if n == dmax {
            break;
        }
        let reach = &layout.by_l1[..layout.l1_end[n + 1]];
        let factor = if n == 0 { 0.125 } else { 0.25 };
        for &k in reach {
            let k = k as usize;
            let s: f64 = nbr[k].iter().map(|&i| cur[i as usize]).sum();
            let back = if n == 0 { 0.0 } else { prev[k] };
            prev[k] = factor * s - back;
        }
        std::mem::swap(&mut prev, &mut cur);
    }

    let mut slices = Vec::with_capacity(top);
    for (idx, (c, a)) in coefs.into_iter().zip(acc).enumerate() {
        let j = idx + 1;
        let d = degree(l, j);
        let lay = if d == dmax { layout.clone() } else { Arc::new(SymLayout::new(d)) };
        let values = (0..lay.len())
            .map(|k| a[layout.index(&lay.tuple(k)).unwrap()])
            .collect();
        slices.push(Slice {
            j,
            degree: d,
            window: (heat_time(&config, l, j - 1), heat_time(&config, l, j)),
            coefs: c,
            kernel: SymKernel { layout: lay, values },
        });
    }

    let remainder = match domain {
        Domain::Torus(t) => {
            let values = green::spectral_kernel(&t, |lam| {
                1.0 / (lam + m2) - slices.iter().map(|s| s.multiplier(lam)).sum::<f64>()
            });
            let err = 1e-14 / m2;
            TwoPointTable {
                m2,
                provenance: Provenance::ExactSpectral,
                data: TableData::Torus {
                    torus: t,
                    errs: vec![err; values.len()],
                    values,
                },
            }
        }
        Domain::Ball { radius } => {
            let g = green::ball_green(radius, m2)?;
            let TableData::Ball { reps, values, errs, .. } = g.data else {
                unreachable!()
            };
            let values = reps
                .iter()
                .zip(values)
                .map(|(a, v)| {
                    let x = [a[0] as i64, a[1] as i64, a[2] as i64, a[3] as i64];
                    v - slices.iter().map(|s| s.kernel.value_at(&x)).sum::<f64>()
                })
                .collect();
            TwoPointTable {
                m2,
                provenance: Provenance::Quadrature,
                data: TableData::Ball {
                    radius,
                    reps,
                    values,
                    errs,
                },
            }
        }
    };

    Ok(CovarianceDecomposition {
        l,
        m2,
        j_max,
        config,
        domain,
        slices,
        remainder,
        coef_err,
    })
}

impl CovarianceDecomposition {
    pub fn slice(&self, j: usize) -> Option<&Slice> {
        self.slices.get(j.checked_sub(1)?)
    }

    /// C_{j;x}; for j = j_max this reads the remainder table.
    pub fn value(&self, j: usize, x: &Point) -> Option<f64> {
        if j == self.j_max {
            self.remainder.value(x)
        } else {
            self.slice(j).map(|s| s.kernel.value_at(x))
        }
    }

    /// max_x |Σ_j C_{j;x} − G_x| / G_0 against an independently computed G.
    /// On a torus G comes from a fresh spectral inversion, so this also
    /// checks the real-space slices against their multipliers; on a ball
    /// the remainder was defined from the same G and only rounding shows.
    pub fn telescoping_residual(&self) -> Result<f64> {
        match self.domain {
            Domain::Torus(t) => {
                let g = green::torus_green(&t, self.m2)?;
                let TableData::Torus { values: gv, .. } = &g.data else { unreachable!() };
                let TableData::Torus { values: rv, .. } = &self.remainder.data else {
                    unreachable!()
                };
                let mut total = rv.clone();
                for s in &self.slices {
                    for (tot, v) in total.iter_mut().zip(s.kernel.on_torus(&t)?) {
                        *tot += v;
                    }
                }
                let g0 = g.value(&[0; DIM]).unwrap();
                Ok(total
                    .iter()
                    .zip(gv)
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
                    / g0)
            }
            Domain::Ball { radius } => {
                let g = green::ball_green(radius, self.m2)?;
                let g0 = g.value(&[0; DIM]).unwrap();
                let mut worst = 0.0f64;
                for (x, v, _) in g.entries() {
                    let mut s = self.remainder.value(&x).unwrap();
                    for sl in &self.slices {
                        s += sl.kernel.value_at(&x);
                    }
                    worst = worst.max((s - v).abs());
                }
                Ok(worst / g0)
            }
        }
    }

    /// Independent finite-range check: the kernel of Q_j(−Δ) on a torus by
    /// spectral inversion, max |value| over sites with |x| ≥ L^j/2.
    pub fn finite_range_violation(&self, torus: &Torus) -> Vec<(usize, f64)> {
        self.slices
            .iter()
            .map(|s| {
                let vals = green::spectral_kernel(torus, |lam| s.multiplier(lam));
                let cut = (self.l as f64).powi(s.j as i32) / 2.0;
                let worst = vals
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| lattice::norm(&torus.embed(*i)) >= cut)
                    .fold(0.0f64, |m, (_, v)| m.max(v.abs()));
                (s.j, worst)
            })
            .collect()
    }

    /// Σ_x w_j(x)² with w_j = C_1 + … + C_j, for j = 1..j_max−1.
    pub fn partial_sum_l2(&self) -> Vec<f64> {
        let Some(last) = self.slices.last() else { return Vec::new() };
        let big = &last.kernel.layout;
        let mut w = vec![0.0; big.len()];
        let mut out = Vec::with_capacity(self.slices.len());
        for s in &self.slices {
            for (k, v) in s.kernel.values.iter().enumerate() {
                let idx = big.index(&s.kernel.layout.tuple(k)).unwrap();
                w[idx] += v;
            }
            let total: NeumaierSum = (0..big.len())
                .map(|k| lattice::orbit_size(&big.tuple(k)) as f64 * w[k] * w[k])
                .collect();
            out.push(total.value());
        }
        out
    }

    pub fn manifest(&self) -> Result<DecompositionManifest> {
        Ok(DecompositionManifest {
            l: self.l,
            m2: self.m2,
            j_max: self.j_max,
            config: self.config,
            domain: self.domain,
            slices: self
                .slices
                .iter()
                .zip(&self.coef_err)
                .map(|(s, e)| SliceMeta {
                    j: s.j,
                    degree: s.degree,
                    window: s.window,
                    c0: s.kernel.value_at(&[0; DIM]),
                    min_multiplier: s.min_multiplier(),
                    coef_err: *e,
                })
                .collect(),
            telescoping_residual: self.telescoping_residual()?,
        })
    }
}

/// Derivative classes γ up to permutation of axes: counts sorted
/// descending with total order ≤ max_order.
pub fn gradient_classes(max_order: usize) -> Vec<[u8; DIM]> {
    let mut out = Vec::new();
    for order in 0..=max_order {
        for a in (0..=order).rev() {
            for b in (0..=a.min(order - a)).rev() {
                for c in (0..=b.min(order - a - b)).rev() {
                    let d = order - a - b - c;
                    if d <= c {
                        out.push([a as u8, b as u8, c as u8, d as u8]);
                    }
                }
            }
        }
    }
    out
}

pub fn class_order(g: &[u8; DIM]) -> usize {
    g.iter().map(|&c| c as usize).sum()
}

fn binom(n: u8, k: u8) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// sup_z |∇^γ C(z)| with forward differences. By symmetry of C it is
/// enough to take z_i ≥ −⌊γ_i/2⌋ and z sorted within axes sharing γ_i.
pub fn sup_gradient(kernel: &SymKernel, gamma: [u8; DIM]) -> f64 {
    let d = kernel.range() as i64;
    let mut stencil: Vec<(Point, f64)> = Vec::new();
    for e0 in 0..=gamma[0] {
        for e1 in 0..=gamma[1] {
            for e2 in 0..=gamma[2] {
                for e3 in 0..=gamma[3] {
                    let e = [e0, e1, e2, e3];
                    let mut c = 1.0;
                    for i in 0..DIM {
                        c *= binom(gamma[i], e[i]);
                        if (gamma[i] - e[i]) % 2 == 1 {
                            c = -c;
                        }
                    }
                    stencil.push(([e0 as i64, e1 as i64, e2 as i64, e3 as i64], c));
                }
            }
        }
    }
    let g: Vec<i64> = gamma.iter().map(|&c| c as i64).collect();
    // smallest |z_i + ε_i| over the stencil
    let reach = |i: usize, z: i64| -> i64 {
        if z > 0 {
            z
        } else if z >= -g[i] {
            0
        } else {
            -(z + g[i])
        }
    };
    let lo = |i: usize| -(g[i] / 2);
    let mut best = 0.0f64;
    let mut z = [0i64; DIM];
    let eval = |z: &Point| {
        let mut s = 0.0;
        for (e, c) in &stencil {
            let y = [z[0] + e[0], z[1] + e[1], z[2] + e[2], z[3] + e[3]];
            s += c * kernel.value_at(&y);
        }
        s.abs()
    };
    let start = |i: usize, z: &Point| if i > 0 && g[i] == g[i - 1] { z[i - 1] } else { lo(i) };
    z[0] = lo(0);
    while z[0] <= d {
        let r0 = reach(0, z[0]);
        if r0 <= d {
            z[1] = start(1, &z);
            while z[1] <= d {
                let r1 = r0 + reach(1, z[1]);
                if r1 <= d {
                    z[2] = start(2, &z);
                    while z[2] <= d {
                        let r2 = r1 + reach(2, z[2]);
                        if r2 <= d {
                            z[3] = start(3, &z);
                            while z[3] <= d {
                                if r2 + reach(3, z[3]) <= d {
                                    best = best.max(eval(&z));
                                }
                                z[3] += 1;
                            }
                        }
                        z[2] += 1;
                    }
                }
                z[1] += 1;
            }
        }
        z[0] += 1;
    }
    best
}

/// sup |∇^γ C| for every class of order ≤ max_order.
pub fn gradient_sups(kernel: &SymKernel, max_order: usize) -> Vec<([u8; DIM], f64)> {
    gradient_classes(max_order)
        .into_iter()
        .map(|g| (g, sup_gradient(kernel, g)))
        .collect()
}

/// ‖C_j‖_{Φ_j(ℓ)} = ℓ^{-2} sup_{|α|+|β| ≤ p} L^{(|α|+|β|)j} sup|∇^α∇^β C_j|.
pub fn covariance_phi_norm(kernel: &SymKernel, ell: f64, p_phi: usize, l: usize, j: usize) -> f64 {
    phi_norm_from_sups(&gradient_sups(kernel, p_phi), ell, l, j)
}

pub fn phi_norm_from_sups(sups: &[([u8; DIM], f64)], ell: f64, l: usize, j: usize) -> f64 {
    let lj = (l as f64).powi(j as i32);
    sups.iter()
        .map(|(g, s)| lj.powi(class_order(g) as i32) * s)
        .fold(0.0, f64::max)
        / (ell * ell)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassTrend {
    pub class: [u8; DIM],
    /// (j, c_j) for the finite-range slices.
    pub constants: Vec<(usize, f64)>,
    pub stabilises: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingReport {
    pub l: usize,
    pub m2: f64,
    pub k: u32,
    pub max_order: usize,
    pub j_from: usize,
    pub classes: Vec<ClassTrend>,
    pub pass: bool,
}

/// c_j(γ, k) = sup|∇^γ C_j| (1 + m²L^{2(j−1)})^k L^{(j−1)(2+|γ|)} for the
/// finite-range slices j ≥ j_from. A class stabilises when the constant at
/// the last scale does not exceed the largest earlier one.
pub fn check_scaling_estimate(
    decomp: &CovarianceDecomposition,
    k: u32,
    max_order: usize,
    j_from: usize,
) -> ScalingReport {
    let sups: Vec<(usize, Vec<([u8; DIM], f64)>)> = decomp
        .slices
        .iter()
        .filter(|s| s.j >= j_from)
        .map(|s| (s.j, gradient_sups(&s.kernel, max_order)))
        .collect();
    scaling_from_sups(decomp.l, decomp.m2, k, max_order, j_from, &sups)
}

pub fn scaling_from_sups(
    l: usize,
    m2: f64,
    k: u32,
    max_order: usize,
    j_from: usize,
    sups: &[(usize, Vec<([u8; DIM], f64)>)],
) -> ScalingReport {
    let lf = l as f64;
    let mut classes = Vec::new();
    for (ci, g) in gradient_classes(max_order).into_iter().enumerate() {
        let constants: Vec<(usize, f64)> = sups
            .iter()
            .map(|(j, s)| {
                let sc = lf.powi(*j as i32 - 1);
                let c = s[ci].1 * (1.0 + m2 * sc * sc).powi(k as i32) * sc.powi(2 + class_order(&g) as i32);
                (*j, c)
            })
            .collect();
        let stabilises = match constants.split_last() {
            Some((last, rest)) if !rest.is_empty() => {
                last.1 <= rest.iter().map(|c| c.1).fold(0.0, f64::max)
            }
            _ => true,
        };
        classes.push(ClassTrend {
            class: g,
            constants,
            stabilises,
        });
    }
    let pass = classes.iter().all(|c| c.stabilises);
    ScalingReport {
        l,
        m2,
        k,
        max_order,
        j_from,
        classes,
        pass,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CbdRow {
    pub j: usize,
    pub norm: f64,
    pub bound: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CbdReport {
    pub ell0: f64,
    pub s: f64,
    pub frak_c: f64,
    pub j_m: usize,
    pub p_phi: usize,
    pub rows: Vec<CbdRow>,
    pub pass: bool,
    /// Smallest ℓ_0 for which every tested scale passes.
    pub minimal_ell0: f64,
}

/// ‖C_j‖_{Φ_j(ℓ_j)} ≤ min(𝔠, χ_j), χ_j = 2^{-(j−j_m)_+}, on the finite-range
/// slices, with ℓ_j = ℓ_0 L^{-j − s(j−j_m)_+}.
pub fn check_cbd(decomp: &CovarianceDecomposition, ell0: f64, s: f64, frak_c: f64) -> Result<CbdReport> {
    let sups: Vec<(usize, Vec<([u8; DIM], f64)>)> = decomp
        .slices
        .iter()
        .map(|sl| (sl.j, gradient_sups(&sl.kernel, 4)))
        .collect();
    cbd_from_sups(decomp.l, decomp.m2, &sups, ell0, s, frak_c)
}

pub fn cbd_from_sups(
    l: usize,
    m2: f64,
    sups: &[(usize, Vec<([u8; DIM], f64)>)],
    ell0: f64,
    s: f64,
    frak_c: f64,
) -> Result<CbdReport> {
    if !(ell0 > 0.0) || !(s >= 0.0) || !(frak_c > 0.0) {
        return Err(Error::InvalidArgument("need ℓ_0 > 0, s ≥ 0, 𝔠 > 0".into()));
    }
    let j_m = lattice::mass_scale(m2, l)?;
    let mut rows = Vec::new();
    let mut minimal = 0.0f64;
    for (j, sp) in sups {
        let ell = crate::norms::ell(ell0, l, s, *j, j_m);
        let norm = phi_norm_from_sups(sp, ell, l, *j);
        let chi = 0.5f64.powi(j.saturating_sub(j_m) as i32);
        let bound = frak_c.min(chi);
        minimal = minimal.max(ell0 * (norm / bound).sqrt());
        rows.push(CbdRow {
            j: *j,
            norm,
            bound,
            margin: bound / norm,
        });
    }
    let pass = rows.iter().all(|r| r.norm <= r.bound);
    Ok(CbdReport {
        ell0,
        s,
        frak_c,
        j_m,
        p_phi: 4,
        rows,
        pass,
        minimal_ell0: minimal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn dense(kernel: &SymKernel, pad: i64) -> (Vec<f64>, i64) {
        let r = kernel.range() as i64 + pad;
        let w = 2 * r + 1;
        let mut v = vec![0.0; (w * w * w * w) as usize];
        for i in 0..v.len() as i64 {
            let x = [i / (w * w * w) - r, (i / (w * w)) % w - r, (i / w) % w - r, i % w - r];
            v[i as usize] = kernel.value_at(&x);
        }
        (v, r)
    }

    /// Brute force over every multi-index α with |α| ≤ p and every site.
    fn brute_sups(kernel: &SymKernel, p: usize) -> Vec<(usize, f64)> {
        let (base, r) = dense(kernel, p as i64 + 1);
        let w = 2 * r + 1;
        let strides = [w * w * w, w * w, w, 1];
        let mut out = vec![0.0f64; p + 1];
        let mut stack = vec![(base, 0usize, 0usize)];
        // differentiate along axes in nondecreasing order so each α appears once
        while let Some((f, order, min_axis)) = stack.pop() {
            let m = f.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            out[order] = out[order].max(m);
            if order == p {
                continue;
            }
            for ax in min_axis..DIM {
                let s = strides[ax] as usize;
                let mut g = vec![0.0; f.len()];
                for i in 0..f.len() {
                    let coord = (i as i64 / strides[ax]) % w;
                    if coord + 1 < w {
                        g[i] = f[i + s] - f[i];
                    }
                }
                stack.push((g, order + 1, ax));
            }
        }
        out.into_iter().enumerate().collect()
    }

    #[test]
    fn layout_indexes_every_tuple() {
        let lay = SymLayout::new(9);
        for k in 0..lay.len() {
            assert_eq!(lay.index(&lay.tuple(k)), Some(k));
        }
        assert_eq!(lay.index(&[0, 0, 5, 5]), None);
        let brute = lattice::SortedTuples::new(9)
            .filter(|a| a.iter().sum::<u32>() <= 9)
            .count();
        assert_eq!(lay.len(), brute);
    }

    #[test]
    fn fejer_window_shape() {
        let g = fejer_window(15, 5);
        assert_eq!(g[0], 1.0);
        assert_eq!(g.len(), 16);
        assert!(g.windows(2).all(|w| w[1] <= w[0]));
        assert!(g[15] > 0.0);
        // support r(M − 1) with M = ⌊D/r⌋ + 1
        let h = fejer_window(19, 5);
        assert!(h[15] > 0.0 && h[16] == 0.0 && h[19] == 0.0);
        // nonnegative kernel: its cosine series is nonnegative everywhere
        for i in 0..=200 {
            let th = std::f64::consts::PI * i as f64 / 200.0;
            let v: f64 = 1.0 + 2.0 * g.iter().skip(1).enumerate().map(|(n, c)| c * ((n + 1) as f64 * th).cos()).sum::<f64>();
            assert!(v >= -1e-12);
        }
    }

    #[test]
    fn clenshaw_matches_direct() {
        let c = [0.3, -1.2, 0.7, 0.05];
        for y in [-1.0, -0.3, 0.0, 0.5, 1.0] {
            let t: [f64; 4] = [1.0, y, 2.0 * y * y - 1.0, 4.0 * y * y * y - 3.0 * y];
            let d: f64 = c.iter().zip(t).map(|(a, b)| a * b).sum();
            assert_relative_eq!(chebyshev_eval(&c, y), d, epsilon = 1e-14);
        }
    }

    #[test]
    fn telescoping_on_torus() {
        let t = Torus::new(2, 5).unwrap();
        let d = decompose(0.04, 2, 5, Domain::Torus(t)).unwrap();
        assert!(d.telescoping_residual().unwrap() < 1e-10);
        for (_, v) in d.finite_range_violation(&t) {
            assert!(v < 1e-14);
        }
        for s in &d.slices {
            assert!(s.kernel.value_at(&[0; DIM]) > 0.0);
            assert!(s.min_multiplier() > -1e-12);
        }
    }

    #[test]
    fn exact_finite_range_l4() {
        let d = decompose(0.1, 4, 3, Domain::Ball { radius: 4.0 }).unwrap();
        let s = d.slice(2).unwrap();
        assert_eq!(s.degree, 7);
        let mut checked = 0;
        for x in lattice::ShellIter::new(2, 4) {
            if lattice::norm(&x) >= 8.0 {
                assert_eq!(s.kernel.value_at(&x), 0.0);
                checked += 1;
            }
        }
        for x in [[8, 0, 0, 0], [5, 5, 3, 0], [4, 4, 4, 4]] {
            assert_eq!(s.kernel.value_at(&x), 0.0);
            checked += 1;
        }
        assert!(checked > 0);
        assert!(d.telescoping_residual().unwrap() < 1e-12);
    }

    #[test]
    fn slice_sum_is_multiplier_at_zero() {
        let d = decompose(0.3, 2, 4, Domain::Ball { radius: 2.0 }).unwrap();
        for s in &d.slices {
            assert_relative_eq!(s.kernel.sum(), s.multiplier(0.0), max_relative = 1e-11);
        }
    }

    #[test]
    fn symmetric_gradients_match_brute_force() {
        let d = decompose(0.04, 2, 4, Domain::Ball { radius: 1.0 }).unwrap();
        for s in &d.slices {
            let sups = gradient_sups(&s.kernel, 4);
            let brute = brute_sups(&s.kernel, 4);
            for (order, b) in brute {
                let ours = sups
                    .iter()
                    .filter(|(g, _)| class_order(g) == order)
                    .map(|x| x.1)
                    .fold(0.0, f64::max);
                assert_relative_eq!(ours, b, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn phi_norm_brute_force_j1() {
        let d = decompose(0.04, 2, 3, Domain::Ball { radius: 1.0 }).unwrap();
        let k = &d.slice(1).unwrap().kernel;
        // C_1 = c δ, and the largest stencil coefficient of order ≤ 4 is 6
        let c = k.value_at(&[0; DIM]);
        assert_relative_eq!(covariance_phi_norm(k, 1.0, 4, 2, 1), 6.0 * 16.0 * c, max_relative = 1e-14);
        assert_relative_eq!(
            covariance_phi_norm(k, 2.0, 4, 2, 1),
            covariance_phi_norm(k, 1.0, 4, 2, 1) / 4.0,
            max_relative = 1e-14
        );
        let zero = SymKernel { layout: k.layout.clone(), values: vec![0.0; k.values.len()] };
        assert_eq!(covariance_phi_norm(&zero, 1.0, 4, 2, 1), 0.0);
    }

    #[test]
    fn first_difference_bounded_by_twice_sup() {
        let d = decompose(0.01, 2, 5, Domain::Ball { radius: 1.0 }).unwrap();
        for s in &d.slices {
            let g1 = sup_gradient(&s.kernel, [1, 0, 0, 0]);
            assert!(g1 <= 2.0 * s.kernel.sup_abs());
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(decompose(0.0, 2, 4, Domain::Ball { radius: 1.0 }).is_err());
        assert!(decompose(0.1, 2, 1, Domain::Ball { radius: 1.0 }).is_err());
        let small = Torus::new(2, 3).unwrap();
        assert!(matches!(
            decompose(0.1, 2, 5, Domain::Torus(small)),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            decompose(0.1, 2, 12, Domain::Ball { radius: 1.0 }),
            Err(Error::DegreeBudget { scale: 11, .. })
        ));
    }

    #[test]
    fn cbd_scales_with_ell0() {
        let d = decompose(0.25, 2, 5, Domain::Ball { radius: 1.0 }).unwrap();
        let r = check_cbd(&d, 1.0, 0.0, 1.0).unwrap();
        let pass = check_cbd(&d, r.minimal_ell0 * 1.001, 0.0, 1.0).unwrap();
        assert!(pass.pass);
        let fail = check_cbd(&d, r.minimal_ell0 / 10.0, 0.0, 1.0).unwrap();
        assert!(!fail.pass);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn slices_positive_definite(m2 in 1e-4f64..1.0) {
            let d = decompose(m2, 2, 5, Domain::Ball { radius: 0.0 }).unwrap();
            for s in &d.slices {
                prop_assert!(s.min_multiplier() > -1e-12);
                prop_assert!(s.kernel.value_at(&[0; DIM]) > 0.0);
            }
        }
    }
}
