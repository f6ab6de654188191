//! Field norms Φ_j(ℓ), their localised version, the fluctuation-field
//! regulator, and the norm-parameter schedules.

use crate::error::{Error, Result};
use crate::lattice::{Torus, DIM};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

fn pos(x: f64) -> f64 {
    x.max(0.0)
}

/// ℓ_j = ℓ_0 L^{-j − s(j − j_m)_+}.
pub fn ell(ell0: f64, l: usize, s: f64, j: usize, j_m: usize) -> f64 {
    ell0 * (l as f64).powf(-(j as f64) - s * pos(j as f64 - j_m as f64))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormSchedule {
    pub ell0: f64,
    pub k0: f64,
    pub s: f64,
    pub l: usize,
    pub j_m: usize,
    pub j_x: usize,
    /// g̃_j for j = 0, 1, …
    pub g_tilde: Vec<f64>,
}

impl NormSchedule {
    fn ln_l(&self) -> f64 {
        (self.l as f64).ln()
    }

    fn g(&self, j: usize) -> f64 {
        self.g_tilde[j]
    }

    pub fn ln_ell(&self, j: usize) -> f64 {
        self.ell0.ln() - self.ln_l() * (j as f64 + self.s * pos(j as f64 - self.j_m as f64))
    }

    pub fn ln_ell_old(&self, j: usize) -> f64 {
        self.ell0.ln() - self.ln_l() * j as f64
    }

    /// ln ℓ_{σ,j} = −ln ℓ_{j∧j_x} + (j − j_x)_+ ln 2 + ln g̃_j.
    pub fn ln_ell_sigma(&self, j: usize) -> f64 {
        -self.ln_ell(j.min(self.j_x)) + j.saturating_sub(self.j_x) as f64 * 2f64.ln() + self.g(j).ln()
    }

    pub fn ln_ell_sigma_old(&self, j: usize) -> f64 {
        -self.ln_ell_old(j.min(self.j_x)) + j.saturating_sub(self.j_x) as f64 * 2f64.ln() + self.g(j).ln()
    }

    pub fn ell(&self, j: usize) -> f64 {
        self.ln_ell(j).exp()
    }

    pub fn ell_old(&self, j: usize) -> f64 {
        self.ln_ell_old(j).exp()
    }

    pub fn ell_sigma(&self, j: usize) -> f64 {
        self.ln_ell_sigma(j).exp()
    }

    pub fn ell_sigma_old(&self, j: usize) -> f64 {
        self.ln_ell_sigma_old(j).exp()
    }

    /// h_j = k_0 g̃_j^{-1/4} L^{-j}.
    pub fn h(&self, j: usize) -> f64 {
        self.k0 * self.g(j).powf(-0.25) * (self.l as f64).powi(-(j as i32))
    }

    /// h_{σ,j} = (ℓ^old_{j∧j_x})^{-1} 2^{(j−j_x)_+} g̃_j^{1/4}.
    pub fn h_sigma(&self, j: usize) -> f64 {
        (-self.ln_ell_old(j.min(self.j_x)) + j.saturating_sub(self.j_x) as f64 * 2f64.ln()).exp()
            * self.g(j).powf(0.25)
    }

    /// χ_j = 2^{-(j − j_m)_+}.
    pub fn chi(&self, j: usize) -> f64 {
        0.5f64.powi(j.saturating_sub(self.j_m) as i32)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatioRow {
    pub j: usize,
    pub ell_ratio: f64,
    pub ell_ratio_expected: f64,
    pub second_ok: bool,
    pub sigma_ratio: f64,
    pub third_ok: bool,
    /// ln(ℓ_j ℓ_{σ,j}) − ln(ℓ^old_j ℓ^old_{σ,j}).
    pub product_log_gap: f64,
    pub product_identity: bool,
    pub product_step: f64,
    pub h_ge_ell: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatioReport {
    pub rows: Vec<RatioRow>,
    pub second_all: bool,
    pub third_violations: Vec<usize>,
    pub product_identity_failures: Vec<usize>,
    pub product_step_max: f64,
}

/// Constant in the legacy third constraint ℓ_{σ,j+1}/ℓ_{σ,j} ≤ c·L (j < j_x),
/// ≤ c (j ≥ j_x); c = 2 covers the g̃ ratio band.
pub const LEGACY_RATIO_CONSTANT: f64 = 2.0;

/// Ratio table for j = 0..j_end−1 (needs g̃ up to j_end).
pub fn schedule_ratios(sched: &NormSchedule, j_end: usize) -> Result<RatioReport> {
    if sched.g_tilde.len() <= j_end {
        return Err(Error::InvalidArgument(format!(
            "g̃ sequence has {} entries, need {}",
            sched.g_tilde.len(),
            j_end + 1
        )));
    }
    if sched.g_tilde.iter().any(|g| !(*g > 0.0)) {
        return Err(Error::InvalidArgument("g̃ must be positive".into()));
    }
    let lf = sched.l as f64;
    let mut rows = Vec::with_capacity(j_end);
    for j in 0..j_end {
        let ell_ratio = (sched.ln_ell(j + 1) - sched.ln_ell(j)).exp();
        let exp_pow = 1.0 + if j >= sched.j_m { sched.s } else { 0.0 };
        let ell_ratio_expected = lf.powf(-exp_pow);
        let sigma_ratio = (sched.ln_ell_sigma(j + 1) - sched.ln_ell_sigma(j)).exp();
        let cap = if j < sched.j_x { LEGACY_RATIO_CONSTANT * lf } else { LEGACY_RATIO_CONSTANT };
        let new = sched.ln_ell(j) + sched.ln_ell_sigma(j);
        let old = sched.ln_ell_old(j) + sched.ln_ell_sigma_old(j);
        let gap = new - old;
        let step = (sched.ln_ell(j + 1) + sched.ln_ell_sigma(j + 1) - new).exp();
        rows.push(RatioRow {
            j,
            ell_ratio,
            ell_ratio_expected,
            second_ok: ell_ratio <= 2.0 / lf * (1.0 + 1e-12),
            sigma_ratio,
            third_ok: sigma_ratio <= cap * (1.0 + 1e-12),
            product_log_gap: gap,
            product_identity: gap.abs() <= 1e-12 * (1.0 + new.abs()),
            product_step: step,
            h_ge_ell: sched.h(j) >= sched.ell(j),
        });
    }
    Ok(RatioReport {
        second_all: rows.iter().all(|r| r.second_ok),
        third_violations: rows.iter().filter(|r| !r.third_ok).map(|r| r.j).collect(),
        product_identity_failures: rows.iter().filter(|r| !r.product_identity).map(|r| r.j).collect(),
        product_step_max: rows.iter().map(|r| r.product_step).fold(0.0, f64::max),
        rows,
    })
}

/// A field φ: torus → Rⁿ stored site-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Field {
    pub torus: Torus,
    pub ncomp: usize,
    pub values: Vec<f64>,
    pub seed: u64,
    pub law: FieldLaw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldLaw {
    IidGaussian,
    Smoothed,
    PlaneWave,
    MaxFrequency,
    Given,
}

impl Field {
    pub fn new(torus: Torus, ncomp: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != torus.volume() * ncomp {
            return Err(Error::InvalidArgument(format!(
                "field has {} entries, torus with {} components needs {}",
                values.len(),
                ncomp,
                torus.volume() * ncomp
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("field entries must be finite".into()));
        }
        Ok(Self {
            torus,
            ncomp,
            values,
            seed: 0,
            law: FieldLaw::Given,
        })
    }

    /// Deterministic sample; `index` selects an independent stream.
    pub fn sample(torus: Torus, ncomp: usize, law: FieldLaw, seed: u64, index: u64) -> Self {
        let vol = torus.volume();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        let mut values: Vec<f64> = match law {
            FieldLaw::IidGaussian | FieldLaw::Smoothed | FieldLaw::Given => {
                (0..vol * ncomp).map(|_| StandardNormal.sample(&mut rng)).collect()
            }
            FieldLaw::PlaneWave => {
                let k = 2.0 * PI / torus.m as f64;
                let phase: f64 = rand::Rng::gen::<f64>(&mut rng) * 2.0 * PI;
                (0..vol)
                    .flat_map(|i| {
                        let x = torus.embed(i);
                        let v = (k * x[0] as f64 + phase).cos();
                        std::iter::repeat_n(v, ncomp)
                    })
                    .collect()
            }
            FieldLaw::MaxFrequency => (0..vol)
                .flat_map(|i| {
                    let x = torus.embed(i);
                    let v = if x.iter().sum::<i64>().rem_euclid(2) == 0 { 1.0 } else { -1.0 };
                    std::iter::repeat_n(v, ncomp)
                })
                .collect(),
        };
        if law == FieldLaw::Smoothed {
            for _ in 0..3 {
                let mut next = values.clone();
                for i in 0..vol {
                    for c in 0..ncomp {
                        let mut s = 0.0;
                        for axis in 0..DIM {
                            for fwd in [true, false] {
                                s += values[torus.neighbor(i, axis, fwd) * ncomp + c];
                            }
                        }
                        next[i * ncomp + c] = 0.5 * values[i * ncomp + c] + s / 16.0;
                    }
                }
                values = next;
            }
        }
        Self {
            torus,
            ncomp,
            values,
            seed,
            law,
        }
    }

    /// CSV with one row per site: x1..x4 followed by the components.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x1,x2,x3,x4");
        for c in 0..self.ncomp {
            s.push_str(&format!(",phi{c}"));
        }
        s.push('\n');
        for i in 0..self.torus.volume() {
            let x = self.torus.embed(i);
            s.push_str(&format!("{},{},{},{}", x[0], x[1], x[2], x[3]));
            for c in 0..self.ncomp {
                s.push_str(&format!(",{:.17e}", self.values[i * self.ncomp + c]));
            }
            s.push('\n');
        }
        s
    }
}

/// Multi-indices α over the four forward axes with |α|₁ ≤ p, as counts.
pub fn multi_indices(p: usize) -> Vec<[u8; DIM]> {
    let mut out = Vec::new();
    for a in 0..=p {
        for b in 0..=p - a {
            for c in 0..=p - a - b {
                for d in 0..=p - a - b - c {
                    out.push([a as u8, b as u8, c as u8, d as u8]);
                }
            }
        }
    }
    out
}

/// For each α, the field ∇^α φ (all components), visited once per α.
fn for_each_derivative<F: FnMut([u8; DIM], &[f64])>(field: &Field, p: usize, mut visit: F) {
    let t = &field.torus;
    let vol = t.volume();
    let nc = field.ncomp;
    let fwd: Vec<Vec<usize>> = (0..DIM)
        .map(|a| (0..vol).map(|i| t.neighbor(i, a, true)).collect())
        .collect();
    // depth-first over α built by appending axes in nondecreasing order
    let mut stack: Vec<(Vec<f64>, [u8; DIM], usize)> = vec![(field.values.clone(), [0; DIM], 0)];
    while let Some((f, alpha, min_axis)) = stack.pop() {
        visit(alpha, &f);
        let order: usize = alpha.iter().map(|&c| c as usize).sum();
        if order == p {
            continue;
        }
        for axis in min_axis..DIM {
            let mut g = vec![0.0; f.len()];
            for i in 0..vol {
                let n = fwd[axis][i];
                for c in 0..nc {
                    g[i * nc + c] = f[n * nc + c] - f[i * nc + c];
                }
            }
            let mut a2 = alpha;
            a2[axis] += 1;
            stack.push((g, a2, axis));
        }
    }
}

/// sup_x |∇^α φ_x| for every α with |α| ≤ p; a site mask restricts x.
pub fn derivative_sups(field: &Field, p: usize, mask: Option<&[bool]>) -> Vec<([u8; DIM], f64)> {
    let nc = field.ncomp;
    let mut out = Vec::new();
    for_each_derivative(field, p, |alpha, f| {
        let mut m = 0.0f64;
        for (i, chunk) in f.chunks(nc).enumerate() {
            if mask.is_none_or(|mk| mk[i]) {
                for v in chunk {
                    m = m.max(v.abs());
                }
            }
        }
        out.push((alpha, m));
    });
    out.sort_by_key(|a| a.0);
    out
}

pub fn norm_from_sups(sups: &[([u8; DIM], f64)], j: usize, ell: f64, l: usize) -> f64 {
    let lj = (l as f64).powi(j as i32);
    sups.iter()
        .map(|(a, s)| lj.powi(a.iter().map(|&c| c as i32).sum()) * s)
        .fold(0.0, f64::max)
        / ell
}

/// ‖φ‖_{Φ_j(ℓ)} = ℓ^{-1} sup_x sup_{|α|≤p} L^{j|α|} |∇^α φ_x|.
pub fn field_phi_norm(field: &Field, j: usize, ell: f64, p_phi: usize, l: usize) -> f64 {
    norm_from_sups(&derivative_sups(field, p_phi, None), j, ell, l)
}

/// Sites x whose forward stencil x + [0, p]⁴ lies inside X.
pub fn stencil_interior(torus: &Torus, x: &[bool], p: usize) -> Vec<bool> {
    let vol = torus.volume();
    let mut cur = x.to_vec();
    for axis in 0..DIM {
        let mut next = cur.clone();
        for (i, n) in next.iter_mut().enumerate() {
            let mut site = i;
            for _ in 0..p {
                site = torus.neighbor(site, axis, true);
                if !cur[site] {
                    *n = false;
                    break;
                }
            }
        }
        cur = next;
        debug_assert_eq!(cur.len(), vol);
    }
    cur
}

/// Evaluation of ‖φ‖_{Φ_j(X)}: the sup of the full norm restricted to sites
/// whose difference stencil stays in X. Every f vanishing on X leaves these
/// derivatives unchanged, so the value never exceeds the infimum, nor the
/// global norm; it is 0 when φ vanishes on X.
pub fn field_phi_norm_localized(
    field: &Field,
    x: &[bool],
    j: usize,
    ell: f64,
    p_phi: usize,
    l: usize,
) -> Result<f64> {
    if x.len() != field.torus.volume() {
        return Err(Error::InvalidArgument("site mask does not match the torus".into()));
    }
    if !x.iter().any(|&b| b) {
        return Err(Error::InvalidArgument("X must be nonempty".into()));
    }
    if x.iter().all(|&b| b) {
        return Ok(field_phi_norm(field, j, ell, p_phi, l));
    }
    let interior = stencil_interior(&field.torus, x, p_phi);
    Ok(norm_from_sups(&derivative_sups(field, p_phi, Some(&interior)), j, ell, l))
}

/// Scale-j block geometry: cubes of side L^j anchored at the origin.
#[derive(Debug, Clone)]
pub struct Blocks {
    pub side: usize,
    pub per_axis: usize,
    torus: Torus,
}

/// Small sets have at most 2^d blocks, so B^□ reaches 2^d − 1 blocks out.
pub const SMALL_SET_REACH: usize = (1 << DIM) - 1;

impl Blocks {
    pub fn new(torus: Torus, l: usize, j: usize) -> Result<Self> {
        let side = l.pow(j as u32);
        if side > torus.m || !torus.m.is_multiple_of(side) {
            return Err(Error::Precondition(format!(
                "scale-{j} blocks of side {side} do not tile a torus of side {}",
                torus.m
            )));
        }
        Ok(Self {
            side,
            per_axis: torus.m / side,
            torus,
        })
    }

    pub fn block_of(&self, site: usize) -> [usize; DIM] {
        let x = self.torus.embed(site);
        let m = self.torus.m as i64;
        let mut b = [0; DIM];
        for i in 0..DIM {
            b[i] = (x[i].rem_euclid(m) as usize) / self.side;
        }
        b
    }

    fn block_dist(&self, a: &[usize; DIM], b: &[usize; DIM]) -> usize {
        (0..DIM)
            .map(|i| {
                let d = a[i].abs_diff(b[i]);
                d.min(self.per_axis - d)
            })
            .max()
            .unwrap()
    }

    /// Site mask of B^□.
    pub fn neighbourhood(&self, b: &[usize; DIM]) -> Vec<bool> {
        (0..self.torus.volume())
            .map(|i| self.block_dist(&self.block_of(i), b) <= SMALL_SET_REACH)
            .collect()
    }

    /// Blocks making up a site set, or an error if X is not block-aligned.
    pub fn decompose(&self, x: &[bool]) -> Result<Vec<[usize; DIM]>> {
        let nb = self.per_axis.pow(DIM as u32);
        let mut count = vec![0usize; nb];
        let key = |b: &[usize; DIM]| b.iter().fold(0, |k, &c| k * self.per_axis + c);
        for (i, &inside) in x.iter().enumerate() {
            if inside {
                count[key(&self.block_of(i))] += 1;
            }
        }
        let full = self.side.pow(DIM as u32);
        let mut out = Vec::new();
        for (k, &c) in count.iter().enumerate() {
            if c != 0 && c != full {
                return Err(Error::InvalidArgument("X is not a union of scale-j blocks".into()));
            }
            if c == full {
                let mut b = [0; DIM];
                let mut r = k;
                for i in (0..DIM).rev() {
                    b[i] = r % self.per_axis;
                    r /= self.per_axis;
                }
                out.push(b);
            }
        }
        Ok(out)
    }
}

/// ln G_j(X, φ) = Σ_{x∈X} |B_x|^{-1} ‖φ‖²_{Φ_j(B_x^□, ℓ_j)}, i.e. one term
/// ‖φ‖²_{Φ_j(B^□)} per scale-j block B of X.
pub fn ln_regulator(field: &Field, x: &[bool], j: usize, ell_j: f64, p_phi: usize, l: usize) -> Result<f64> {
    if x.len() != field.torus.volume() {
        return Err(Error::InvalidArgument("site mask does not match the torus".into()));
    }
    let blocks = Blocks::new(field.torus, l, j)?;
    let mut total = 0.0;
    for b in blocks.decompose(x)? {
        let nb = blocks.neighbourhood(&b);
        let v = field_phi_norm_localized(field, &nb, j, ell_j, p_phi, l)?;
        total += v * v;
    }
    Ok(total)
}

pub fn regulator_g(field: &Field, x: &[bool], j: usize, ell_j: f64, p_phi: usize, l: usize) -> Result<f64> {
    Ok(ln_regulator(field, x, j, ell_j, p_phi, l)?.exp())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MartReport {
    pub q: f64,
    pub s: f64,
    pub l: usize,
    pub j: usize,
    pub j_m: usize,
    pub samples: usize,
    /// max over samples of ‖φ‖_{Φ_j(ℓ_j)} / (L^{-(1+s)} ‖φ‖_{Φ_{j+1}(ℓ_{j+1})}).
    pub worst_weight_ratio: f64,
    /// max over samples of q‖φ‖²_j / (L^{-4}‖φ‖²_{j+1}).
    pub worst_ratio: f64,
    pub violations: usize,
    /// Regulator inequality, checked when X = Λ is block-aligned at j+1.
    pub regulator_checked: usize,
    pub regulator_violations: usize,
    pub pass: bool,
}

/// Smallest integer L with q L^{2−2s} ≤ 1.
pub fn mart_required_l(q: f64, s: f64) -> usize {
    let mut l = 2usize;
    while q * (l as f64).powf(2.0 - 2.0 * s) > 1.0 {
        l += 1;
    }
    l
}

/// q‖φ‖²_{Φ_j(ℓ_j)} ≤ L^{-4}‖φ‖²_{Φ_{j+1}(ℓ_{j+1})} over the samples.
pub fn check_mart(q: f64, s: f64, l: usize, j: usize, j_m: usize, samples: &[Field]) -> Result<MartReport> {
    if !(q > 0.0) {
        return Err(Error::InvalidArgument("q must be positive".into()));
    }
    if !(s > 1.0) {
        return Err(Error::InvalidArgument(format!("the regulator inequality needs s > 1, got {s}")));
    }
    if q * (l as f64).powf(2.0 - 2.0 * s) > 1.0 {
        return Err(Error::Precondition(format!(
            "q L^(2-2s) = {} > 1; need L >= {}",
            q * (l as f64).powf(2.0 - 2.0 * s),
            mart_required_l(q, s)
        )));
    }
    if j < j_m {
        return Err(Error::Precondition(format!("need j >= j_m, got j = {j} < {j_m}")));
    }
    let p = 4;
    let ell_j = ell(1.0, l, s, j, j_m);
    let ell_k = ell(1.0, l, s, j + 1, j_m);
    let lf = l as f64;
    let mut worst_weight = 0.0f64;
    let mut worst = 0.0f64;
    let mut violations = 0;
    let mut reg_checked = 0;
    let mut reg_viol = 0;
    for f in samples {
        let sups = derivative_sups(f, p, None);
        let nj = norm_from_sups(&sups, j, ell_j, l);
        let nk = norm_from_sups(&sups, j + 1, ell_k, l);
        if nk > 0.0 {
            worst_weight = worst_weight.max(nj / (lf.powf(-(1.0 + s)) * nk));
            let r = q * nj * nj / (lf.powi(-4) * nk * nk);
            worst = worst.max(r);
            if r > 1.0 {
                violations += 1;
            }
        } else if nj > 0.0 {
            violations += 1;
        }
        if Blocks::new(f.torus, l, j + 1).is_ok() {
            let all = vec![true; f.torus.volume()];
            let gj = ln_regulator(f, &all, j, ell_j, p, l)?;
            let gk = ln_regulator(f, &all, j + 1, ell_k, p, l)?;
            reg_checked += 1;
            if q * gj > gk * (1.0 + 1e-12) {
                reg_viol += 1;
            }
        }
    }
    Ok(MartReport {
        q,
        s,
        l,
        j,
        j_m,
        samples: samples.len(),
        worst_weight_ratio: worst_weight,
        worst_ratio: worst,
        violations,
        regulator_checked: reg_checked,
        regulator_violations: reg_viol,
        pass: violations == 0 && reg_viol == 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn sched(s: f64, j_m: usize, j_x: usize, len: usize) -> NormSchedule {
        NormSchedule {
            ell0: 3.0,
            k0: 0.5,
            s,
            l: 2,
            j_m,
            j_x,
            g_tilde: (0..len).map(|j| 0.1 / (1.0 + 0.05 * j as f64)).collect(),
        }
    }

    #[test]
    fn seventy_multi_indices() {
        assert_eq!(multi_indices(4).len(), 70);
    }

    #[test]
    fn constant_field_norm() {
        let t = Torus::with_side(4).unwrap();
        let f = Field::new(t, 2, vec![-1.5; 2 * t.volume()]).unwrap();
        assert_relative_eq!(field_phi_norm(&f, 2, 0.5, 4, 2), 3.0, max_relative = 1e-15);
        assert_relative_eq!(field_phi_norm(&f, 2, 1.0, 4, 2), 1.5, max_relative = 1e-15);
    }

    #[test]
    fn plane_wave_against_stencil_brute_force() {
        let t = Torus::with_side(6).unwrap();
        let f = Field::sample(t, 1, FieldLaw::PlaneWave, 3, 0);
        let (j, ell, l) = (1, 2.0, 2);
        // explicit stencil: ∇^α φ_x = Σ_ε (−1)^{|α−ε|} Π C(α_i, ε_i) φ_{x+ε}
        let mut best = 0.0f64;
        for alpha in multi_indices(4) {
            for i in 0..t.volume() {
                let x = t.embed(i);
                let mut s = 0.0;
                for e0 in 0..=alpha[0] {
                    for e1 in 0..=alpha[1] {
                        for e2 in 0..=alpha[2] {
                            for e3 in 0..=alpha[3] {
                                let e = [e0, e1, e2, e3];
                                let mut c = 1.0;
                                for k in 0..DIM {
                                    let n = alpha[k] as u32;
                                    let r = e[k] as u32;
                                    c *= (1..=r).fold(1.0, |a, i| a * (n + 1 - i) as f64 / i as f64);
                                    if (n - r) % 2 == 1 {
                                        c = -c;
                                    }
                                }
                                let y = [x[0] + e0 as i64, x[1] + e1 as i64, x[2] + e2 as i64, x[3] + e3 as i64];
                                s += c * f.values[t.index_of(&t.wrap(&y))];
                            }
                        }
                    }
                }
                let w = (l as f64).powi((j * alpha.iter().map(|&c| c as usize).sum::<usize>()) as i32);
                best = best.max(w * s.abs());
            }
        }
        assert_relative_eq!(field_phi_norm(&f, j, ell, 4, l), best / ell, max_relative = 1e-12);
    }

    #[test]
    fn localized_norm_properties() {
        let t = Torus::with_side(8).unwrap();
        let mut f = Field::sample(t, 1, FieldLaw::IidGaussian, 1, 0);
        let global = field_phi_norm(&f, 1, 1.0, 4, 2);
        let all = vec![true; t.volume()];
        assert_eq!(field_phi_norm_localized(&f, &all, 1, 1.0, 4, 2).unwrap(), global);
        let x: Vec<bool> = (0..t.volume()).map(|i| t.embed(i)[0] >= 0).collect();
        let loc = field_phi_norm_localized(&f, &x, 1, 1.0, 4, 2).unwrap();
        assert!(loc <= global && loc > 0.0);
        for (i, inside) in x.iter().enumerate() {
            if *inside {
                f.values[i] = 0.0;
            }
        }
        assert_eq!(field_phi_norm_localized(&f, &x, 1, 1.0, 4, 2).unwrap(), 0.0);
    }

    #[test]
    fn regulator_closed_forms() {
        let t = Torus::with_side(4).unwrap();
        let all = vec![true; t.volume()];
        let zero = Field::new(t, 1, vec![0.0; t.volume()]).unwrap();
        assert_eq!(regulator_g(&zero, &all, 2, 1.0, 4, 2).unwrap(), 1.0);
        let c = 0.7;
        let konst = Field::new(t, 1, vec![c; t.volume()]).unwrap();
        let ell_j = 1.3;
        assert_relative_eq!(
            regulator_g(&konst, &all, 2, ell_j, 4, 2).unwrap(),
            ((c / ell_j) * (c / ell_j)).exp(),
            max_relative = 1e-14
        );
        let f = Field::sample(t, 1, FieldLaw::IidGaussian, 5, 0);
        let mut f2 = f.clone();
        f2.values.iter_mut().for_each(|v| *v *= 2.0);
        assert!(ln_regulator(&f2, &all, 1, 1.0, 4, 2).unwrap() >= ln_regulator(&f, &all, 1, 1.0, 4, 2).unwrap());
        let ragged: Vec<bool> = (0..t.volume()).map(|i| i == 0).collect();
        assert!(ln_regulator(&f, &ragged, 1, 1.0, 4, 2).is_err());
    }

    #[test]
    fn mart_precondition_and_constant_field() {
        let t = Torus::with_side(4).unwrap();
        assert!(matches!(check_mart(4.0, 1.5, 2, 1, 1, &[]), Err(Error::Precondition(_))));
        assert_eq!(mart_required_l(4.0, 1.5), 4);
        let konst = Field::new(t, 1, vec![1.0; t.volume()]).unwrap();
        let r = check_mart(4.0, 2.0, 4, 1, 1, &[konst]).unwrap();
        assert_relative_eq!(r.worst_weight_ratio, 1.0, max_relative = 1e-12);
        assert!(r.pass);
    }

    #[test]
    fn mart_adversarial_fields() {
        let t = Torus::with_side(4).unwrap();
        let fields: Vec<Field> = [FieldLaw::MaxFrequency, FieldLaw::PlaneWave, FieldLaw::Smoothed]
            .iter()
            .map(|&law| Field::sample(t, 1, law, 9, 0))
            .collect();
        let r = check_mart(4.0, 2.0, 4, 1, 1, &fields).unwrap();
        assert!(r.pass && r.worst_weight_ratio <= 1.0 + 1e-12);
        assert_eq!(r.regulator_checked, 0);
    }

    #[test]
    fn legacy_regime_satisfies_all_constraints() {
        let r = schedule_ratios(&sched(0.0, 3, 8, 40), 39).unwrap();
        assert!(r.second_all);
        assert!(r.third_violations.is_empty());
        assert!(r.product_identity_failures.is_empty());
    }

    #[test]
    fn new_schedule_flags() {
        let sc = sched(2.0, 3, 8, 40);
        let r = schedule_ratios(&sc, 39).unwrap();
        assert!(r.second_all);
        assert_eq!(r.third_violations, (3..8).collect::<Vec<_>>());
        // the two products agree up to max(j_x, j_m) and split after it
        assert_eq!(r.product_identity_failures, (9..39).collect::<Vec<_>>());
        for row in &r.rows {
            assert_relative_eq!(row.ell_ratio, row.ell_ratio_expected, max_relative = 1e-12);
        }
        assert!(r.product_step_max <= 2.0 * 2.0);
    }

    proptest! {
        #[test]
        fn weight_comparison(seed in 0u64..1000, j in 1usize..4, s in 0.0f64..3.0) {
            let t = Torus::with_side(3).unwrap();
            let f = Field::sample(t, 1, FieldLaw::IidGaussian, seed, 0);
            let jm = 1;
            let nj = field_phi_norm(&f, j, ell(1.0, 2, s, j, jm), 4, 2);
            let nk = field_phi_norm(&f, j + 1, ell(1.0, 2, s, j + 1, jm), 4, 2);
            let pw = 1.0 + if j >= jm { s } else { 0.0 };
            prop_assert!(nj <= 2f64.powf(-pw) * nk * (1.0 + 1e-12));
        }

        #[test]
        fn product_identity_below_coalescence(j_m in 0usize..20, j_x in 0usize..20, s in 0.0f64..4.0) {
            let sc = NormSchedule { ell0: 1.7, k0: 1.0, s, l: 3, j_m, j_x, g_tilde: vec![0.05; 60] };
            for j in 0..=j_x.max(j_m) {
                let gap = sc.ln_ell(j) + sc.ln_ell_sigma(j) - sc.ln_ell_old(j) - sc.ln_ell_sigma_old(j);
                prop_assert!(gap.abs() < 1e-10);
            }
        }
    }
}
