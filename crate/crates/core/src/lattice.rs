//! Torus geometry, the nearest-neighbour Laplacian, shells and the two
//! scale functions j_m and j_x.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const DIM: usize = 4;

pub type Point = [i64; DIM];

/// Discrete 4-torus of side M = L^N, embedded as a centred cube in Z⁴.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Torus {
    pub l: usize,
    pub n: usize,
    pub m: usize,
}

impl Torus {
    pub fn new(l: usize, n: usize) -> Result<Self> {
        if l < 2 {
            return Err(Error::InvalidArgument(format!("L must exceed 1, got {l}")));
        }
        if n < 1 {
            return Err(Error::InvalidArgument("N must be at least 1".into()));
        }
        let m = (l as u64)
            .checked_pow(n as u32)
            .filter(|&m| m <= 1 << 12)
            .ok_or_else(|| Error::InvalidArgument(format!("L^N too large for L={l}, N={n}")))?;
        Ok(Self { l, n, m: m as usize })
    }

    /// A torus of arbitrary side, used for tests and Monte Carlo where M need
    /// not be a power of L. `l` and `n` are recorded as (M, 1).
    pub fn with_side(m: usize) -> Result<Self> {
        if m < 1 {
            return Err(Error::InvalidArgument("side must be positive".into()));
        }
        Ok(Self { l: m, n: 1, m })
    }

    pub fn volume(&self) -> usize {
        self.m.pow(DIM as u32)
    }

    /// Smallest embedded coordinate along each axis.
    pub fn lo(&self) -> i64 {
        let m = self.m as i64;
        if m % 2 == 0 {
            -m / 2 + 1
        } else {
            -(m - 1) / 2
        }
    }

    pub fn hi(&self) -> i64 {
        self.lo() + self.m as i64 - 1
    }

    /// Row-major index to centred coordinates.
    pub fn embed(&self, index: usize) -> Point {
        let m = self.m;
        let lo = self.lo();
        let mut rem = index;
        let mut x = [0i64; DIM];
        for i in (0..DIM).rev() {
            x[i] = (rem % m) as i64 + lo;
            rem /= m;
        }
        x
    }

    /// Index of a Z⁴ point after reduction mod M.
    pub fn index_of(&self, x: &Point) -> usize {
        let m = self.m as i64;
        let lo = self.lo();
        let mut idx = 0usize;
        for &c in x {
            let r = (c - lo).rem_euclid(m);
            idx = idx * self.m + r as usize;
        }
        idx
    }

    /// Reduce a point into the centred cube.
    pub fn wrap(&self, x: &Point) -> Point {
        self.embed(self.index_of(x))
    }

    pub fn neighbor(&self, index: usize, axis: usize, forward: bool) -> usize {
        let stride = self.m.pow((DIM - 1 - axis) as u32);
        let c = (index / stride) % self.m;
        if forward {
            if c + 1 == self.m {
                index + stride - self.m * stride
            } else {
                index + stride
            }
        } else if c == 0 {
            index + (self.m - 1) * stride
        } else {
            index - stride
        }
    }

    /// (Δf)_x = Σ_{y~x} (f_y − f_x) for a scalar field.
    pub fn laplacian_apply(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.laplacian_apply_vec(f, 1)
    }

    /// Component-wise Laplacian of a field stored site-major with `ncomp`
    /// components per site.
    pub fn laplacian_apply_vec(&self, f: &[f64], ncomp: usize) -> Result<Vec<f64>> {
        if ncomp == 0 || f.len() != self.volume() * ncomp {
            return Err(Error::InvalidArgument(format!(
                "field length {} does not match {} sites x {} components",
                f.len(),
                self.volume(),
                ncomp
            )));
        }
        let mut out = vec![0.0; f.len()];
        for s in 0..self.volume() {
            for axis in 0..DIM {
                for fwd in [true, false] {
                    let t = self.neighbor(s, axis, fwd);
                    for a in 0..ncomp {
                        out[s * ncomp + a] += f[t * ncomp + a] - f[s * ncomp + a];
                    }
                }
            }
        }
        Ok(out)
    }
}

pub fn norm2(x: &Point) -> i64 {
    x.iter().map(|c| c * c).sum()
}

pub fn norm(x: &Point) -> f64 {
    (norm2(x) as f64).sqrt()
}

fn ipow(base: usize, e: usize) -> u128 {
    (base as u128).pow(e as u32)
}

/// j_m = ⌊log_L m^{-1}⌋ for m² ∈ (0, 1).
pub fn mass_scale(m2: f64, l: usize) -> Result<usize> {
    if !(m2 > 0.0 && m2 < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mass scale needs 0 < m² < 1, got {m2}"
        )));
    }
    if l < 2 {
        return Err(Error::InvalidArgument(format!("L must exceed 1, got {l}")));
    }
    let lf = l as f64;
    let mut j = 0usize;
    // L^{j+1} ≤ 1/m  ⇔  L^{2(j+1)} m² ≤ 1
    while lf.powi(2 * (j as i32 + 1)) * m2 <= 1.0 {
        j += 1;
    }
    Ok(j)
}

/// j_x = max{0, ⌊log_L(2|x|)⌋} for x ≠ 0.
pub fn coalescence_scale(x: &Point, l: usize) -> Result<usize> {
    let r2 = norm2(x);
    if r2 == 0 {
        return Err(Error::InvalidArgument(
            "coalescence scale is undefined at x = 0".into(),
        ));
    }
    Ok(coalescence_scale_r2(r2 as u128, l))
}

/// j_x from |x|², for |x|² ≥ 1.
pub fn coalescence_scale_r2(r2: u128, l: usize) -> usize {
    let four_r2 = 4 * r2;
    let mut j = 0usize;
    while ipow(l, 2 * (j + 1)) <= four_r2 {
        j += 1;
    }
    j
}

/// Shell index of x: S_1 = {|x| < L/2}, S_j = {L^{j-1}/2 ≤ |x| < L^j/2}.
pub fn shell_index(x: &Point, l: usize) -> usize {
    let r2 = norm2(x);
    if r2 == 0 {
        1
    } else {
        coalescence_scale_r2(r2 as u128, l) + 1
    }
}

fn in_shell(r2: u128, j: usize, l: usize) -> bool {
    let four = 4 * r2;
    let upper = four < ipow(l, 2 * j);
    if j == 1 {
        upper
    } else {
        upper && four >= ipow(l, 2 * (j - 1))
    }
}

/// Streaming iterator over the points of S_j in row-major order.
pub struct ShellIter {
    j: usize,
    l: usize,
    r: i64,
    cur: Point,
    done: bool,
}

impl ShellIter {
    pub fn new(j: usize, l: usize) -> Self {
        let r = (ipow(l, j) / 2) as i64 + 1;
        Self {
            j,
            l,
            r,
            cur: [-r; DIM],
            done: false,
        }
    }

    fn advance(&mut self) {
        for i in (0..DIM).rev() {
            if self.cur[i] < self.r {
                self.cur[i] += 1;
                return;
            }
            self.cur[i] = -self.r;
        }
        self.done = true;
    }
}

impl Iterator for ShellIter {
    type Item = Point;
    fn next(&mut self) -> Option<Point> {
        while !self.done {
            let x = self.cur;
            self.advance();
            if in_shell(norm2(&x) as u128, self.j, self.l) {
                return Some(x);
            }
        }
        None
    }
}

pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

/// Upper estimate of the number of points with |x| < r.
pub fn ball_count_estimate(r: f64) -> u64 {
    let v = std::f64::consts::PI.powi(2) / 2.0 * (r + 2.0).powi(4);
    v.ceil() as u64
}

/// Materialised shell S_j, refused beyond `cap` points.
pub fn shell_members(j: usize, l: usize, cap: u64) -> Result<Vec<Point>> {
    if j < 1 {
        return Err(Error::InvalidArgument("shell index starts at 1".into()));
    }
    let hi = ipow(l, j) as f64 / 2.0;
    let lo = if j == 1 { 0.0 } else { hi / l as f64 };
    let est = std::f64::consts::PI.powi(2) / 2.0 * (hi.powi(4) - lo.powi(4));
    if est > 2.0 * cap as f64 {
        return Err(Error::CapExceeded {
            needed: est as u64,
            cap,
        });
    }
    if ball_count_estimate(hi) > cap {
        let exact = shell_count(j, l);
        if exact > cap {
            return Err(Error::CapExceeded { needed: exact, cap });
        }
    }
    Ok(ShellIter::new(j, l).collect())
}

/// |S_j| by counting over sorted orbit representatives.
pub fn shell_count(j: usize, l: usize) -> u64 {
    let r = (ipow(l, j) / 2) as u32 + 1;
    let mut count = 0u64;
    for a in SortedTuples::new(r) {
        let r2: u128 = a.iter().map(|&c| (c as u128) * (c as u128)).sum();
        if in_shell(r2, j, l) {
            count += orbit_size(&a);
        }
    }
    count
}

/// Sorted absolute coordinates, the representative of a point's orbit under
/// the 384 signed permutations.
pub fn sorted_abs(x: &Point) -> [u32; DIM] {
    let mut a = [0u32; DIM];
    for i in 0..DIM {
        a[i] = x[i].unsigned_abs() as u32;
    }
    a.sort_unstable();
    a
}

/// Number of distinct points in the orbit of a sorted representative.
pub fn orbit_size(a: &[u32; DIM]) -> u64 {
    let mut perms = 24u64;
    let mut i = 0;
    while i < DIM {
        let mut k = i;
        while k + 1 < DIM && a[k + 1] == a[i] {
            k += 1;
        }
        let run = (k - i + 1) as u64;
        perms /= (1..=run).product::<u64>();
        i = k + 1;
    }
    let nonzero = a.iter().filter(|&&c| c != 0).count() as u32;
    perms * (1u64 << nonzero)
}

fn binom(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let mut r = 1u64;
    for i in 0..k {
        r = r * (n - i) / (i + 1);
    }
    r
}

/// Colex rank of a sorted tuple a1 ≤ a2 ≤ a3 ≤ a4; independent of any
/// bound on the entries.
pub fn colex_rank(a: &[u32; DIM]) -> usize {
    let mut r = 0u64;
    for (i, &c) in a.iter().enumerate() {
        r += binom(c as u64 + i as u64, i as u64 + 1);
    }
    r as usize
}

/// Number of sorted tuples with entries in 0..=r.
pub fn colex_count(r: u32) -> usize {
    binom(r as u64 + DIM as u64, DIM as u64) as usize
}

/// Sorted tuples with entries in 0..=r, in colex order.
pub struct SortedTuples {
    r: u32,
    cur: [u32; DIM],
    done: bool,
}

impl SortedTuples {
    pub fn new(r: u32) -> Self {
        Self {
            r,
            cur: [0; DIM],
            done: false,
        }
    }
}

impl Iterator for SortedTuples {
    type Item = [u32; DIM];
    fn next(&mut self) -> Option<[u32; DIM]> {
        if self.done {
            return None;
        }
        let out = self.cur;
        // colex successor: bump the first entry that can grow, reset those before it
        let mut i = 0;
        loop {
            let cap = if i + 1 < DIM { self.cur[i + 1] } else { self.r };
            if self.cur[i] < cap {
                self.cur[i] += 1;
                for k in 0..i {
                    self.cur[k] = 0;
                }
                break;
            }
            i += 1;
            if i == DIM {
                self.done = true;
                break;
            }
        }
        Some(out)
    }
}

/// All 384 signed permutations applied to a point (with repetitions).
pub fn point_group_images(x: &Point) -> Vec<Point> {
    const PERMS: [[usize; 4]; 24] = [
        [0, 1, 2, 3], [0, 1, 3, 2], [0, 2, 1, 3], [0, 2, 3, 1], [0, 3, 1, 2], [0, 3, 2, 1],
        [1, 0, 2, 3], [1, 0, 3, 2], [1, 2, 0, 3], [1, 2, 3, 0], [1, 3, 0, 2], [1, 3, 2, 0],
        [2, 0, 1, 3], [2, 0, 3, 1], [2, 1, 0, 3], [2, 1, 3, 0], [2, 3, 0, 1], [2, 3, 1, 0],
        [3, 0, 1, 2], [3, 0, 2, 1], [3, 1, 0, 2], [3, 1, 2, 0], [3, 2, 0, 1], [3, 2, 1, 0],
    ];
    let mut out = Vec::with_capacity(384);
    for p in PERMS {
        for signs in 0..16u32 {
            let mut y = [0i64; DIM];
            for i in 0..DIM {
                let s = if signs >> i & 1 == 1 { -1 } else { 1 };
                y[i] = s * x[p[i]];
            }
            out.push(y);
        }
    }
    out
}
