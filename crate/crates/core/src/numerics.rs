//! Small numerical kernels shared by the rest of the crate: compensated
//! summation, Gauss quadrature, heat-kernel rows and Bessel functions.

use crate::error::{Error, Result};
use std::f64::consts::PI;

/// Neumaier's variant of Kahan summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl Extend<f64> for NeumaierSum {
    fn extend<I: IntoIterator<Item = f64>>(&mut self, iter: I) {
        for x in iter {
            self.add(x);
        }
    }
}

impl FromIterator<f64> for NeumaierSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = NeumaierSum::new();
        s.extend(iter);
        s
    }
}

pub fn neumaier_sum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    iter.into_iter().collect::<NeumaierSum>().value()
}

/// Gauss–Legendre nodes and weights on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, z);
                dp = d;
                let dz = p / d;
                z -= dz;
                if dz.abs() < 1e-16 {
                    let (_, d) = legendre_with_derivative(n, z);
                    dp = d;
                    break;
                }
            }
            nodes[i] = -z;
            nodes[n - 1 - i] = z;
            let w = 2.0 / ((1.0 - z * z) * dp * dp);
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes and weights mapped to [a, b].
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let h = 0.5 * (b - a);
        let c = 0.5 * (b + a);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&x, &w)| (c + h * x, h * w))
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let mut s = NeumaierSum::new();
        for (x, w) in self.mapped(a, b) {
            s.add(w * f(x));
        }
        s.value()
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Geometric panels covering [0, t_max]: a first panel [0, t0] followed by
/// panels whose length grows by `ratio`.
pub fn geometric_panels(t0: f64, t_max: f64, ratio: f64) -> Vec<(f64, f64)> {
    let mut panels = vec![(0.0, t0.min(t_max))];
    let mut a = t0;
    while a < t_max {
        let b = (a * ratio).min(t_max);
        panels.push((a, b));
        a = b;
    }
    panels
}

const GK_X: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK_WK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728,
];
const GK_WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = fc * GK_WK[7];
    let mut g = fc * GK_WG[3];
    for i in 0..7 {
        let dx = h * GK_X[i];
        let s = f(c - dx) + f(c + dx);
        k += GK_WK[i] * s;
        if i % 2 == 1 {
            g += GK_WG[i / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Adaptive Gauss–Kronrod (7/15) quadrature on a finite interval.
/// Returns the value and an error estimate.
pub fn integrate_adaptive<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<(f64, f64)> {
    let mut intervals = vec![(a, b, gk15(&mut f, a, b))];
    for _ in 0..5000 {
        let total: f64 = neumaier_sum(intervals.iter().map(|iv| iv.2 .0));
        let err: f64 = intervals.iter().map(|iv| iv.2 .1).sum();
        if err <= abs_tol.max(rel_tol * total.abs()) {
            return Ok((total, err));
        }
        let (imax, _) = intervals
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .2 .1.total_cmp(&y.1 .2 .1))
            .expect("non-empty");
        let (lo, hi, _) = intervals.swap_remove(imax);
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        intervals.push((lo, mid, gk15(&mut f, lo, mid)));
        intervals.push((mid, hi, gk15(&mut f, mid, hi)));
    }
    let total: f64 = neumaier_sum(intervals.iter().map(|iv| iv.2 .0));
    let err: f64 = intervals.iter().map(|iv| iv.2 .1).sum();
    if err <= abs_tol.max(rel_tol * total.abs()) {
        Ok((total, err))
    } else {
        Err(Error::Quadrature {
            achieved: err,
            wanted: abs_tol.max(rel_tol * total.abs()),
        })
    }
}

/// Adaptive quadrature on [a, ∞) through the map t = a + u/(1-u).
pub fn integrate_to_infinity<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<(f64, f64)> {
    integrate_adaptive(
        |u| {
            if u >= 1.0 {
                return 0.0;
            }
            let v = 1.0 - u;
            let t = a + u / v;
            let y = f(t) / (v * v);
            if y.is_finite() {
                y
            } else {
                0.0
            }
        },
        0.0,
        1.0,
        abs_tol,
        rel_tol,
    )
}

/// Row of the continuous-time 1-d random-walk kernel
/// q_t(k) = e^{-2t} I_k(2t) for k = 0..=kmax (rate-2 walk on Z).
///
/// Miller's backward recurrence, normalised by q(0) + 2 Σ_{k≥1} q(k) = 1.
pub fn heat_kernel_row(t: f64, kmax: usize) -> Vec<f64> {
    let mut out = vec![0.0; kmax + 1];
    if t <= 0.0 {
        out[0] = 1.0;
        return out;
    }
    let x = 2.0 * t;
    let spread = (x * 80.0).sqrt() + 40.0;
    let start = kmax.max(spread as usize) + 20;
    let mut vals = vec![0.0; start + 2];
    let mut ip1 = 0.0;
    let mut i = 1e-300;
    for k in (1..=start).rev() {
        let im1 = ip1 + (2.0 * k as f64 / x) * i;
        ip1 = i;
        i = im1;
        vals[k - 1] = i;
        vals[k] = ip1;
        if i > 1e250 {
            for v in vals[k - 1..].iter_mut() {
                *v *= 1e-250;
            }
            i *= 1e-250;
            ip1 *= 1e-250;
        }
    }
    let mut norm = NeumaierSum::new();
    norm.add(vals[0]);
    for v in vals.iter().take(start + 1).skip(1) {
        norm.add(2.0 * v);
    }
    let norm = norm.value();
    for (k, o) in out.iter_mut().enumerate() {
        if k <= start {
            *o = vals[k] / norm;
        }
    }
    out
}

/// Coefficients a_k(ν) of the Hankel expansion
/// e^{-x} I_ν(x) ~ (2πx)^{-1/2} Σ_k (-1)^k a_k(ν) x^{-k}.
pub fn hankel_coefficients(nu: f64, order: usize) -> Vec<f64> {
    let mu = 4.0 * nu * nu;
    let mut c = vec![1.0];
    for k in 1..=order {
        let prev = c[k - 1];
        let odd = (2 * k - 1) as f64;
        c.push(prev * (mu - odd * odd) / (k as f64 * 8.0));
    }
    c
}

/// Modified Bessel function K_ν(x) for x > 0 from the integral
/// K_ν(x) = ∫_0^∞ e^{-x cosh u} cosh(νu) du, evaluated by the trapezoid
/// rule (exponentially convergent for this entire integrand).
pub fn bessel_k(nu: f64, x: f64) -> f64 {
    assert!(x > 0.0, "bessel_k needs x > 0");
    // work with e^{x} K to keep large x representable
    let scaled = bessel_k_scaled(nu, x);
    scaled * (-x).exp()
}

/// e^{x} K_ν(x).
pub fn bessel_k_scaled(nu: f64, x: f64) -> f64 {
    let h = 0.05;
    let mut s = NeumaierSum::new();
    s.add(0.5);
    let mut k = 1usize;
    loop {
        let u = k as f64 * h;
        let term = (-x * (u.cosh() - 1.0)).exp() * (nu * u).cosh();
        s.add(term);
        if term < 1e-18 * s.value() && x * (u.cosh() - 1.0) > 40.0 {
            break;
        }
        k += 1;
        if k > 100_000 {
            break;
        }
    }
    h * s.value()
}

pub fn gamma(x: f64) -> f64 {
    statrs::function::gamma::gamma(x)
}

pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// Least-squares slope of y against x.
pub fn linear_slope(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
    }
    sxy / sxx
}

/// Slope of log y against log x.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    linear_slope(&lx, &ly)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn neumaier_recovers_cancelled_terms() {
        let v = [1.0, 1e100, 1.0, -1e100];
        assert_eq!(neumaier_sum(v), 2.0);
    }

    #[test]
    fn gauss_legendre_exact_for_polynomials() {
        let gl = GaussLegendre::new(10);
        let v = gl.integrate(0.0, 2.0, |x| x.powi(19));
        assert_relative_eq!(v, 2f64.powi(20) / 20.0, max_relative = 1e-13);
        let w: f64 = gl.weights.iter().sum();
        assert_relative_eq!(w, 2.0, max_relative = 1e-14);
    }

    #[test]
    fn kronrod_handles_endpoint_singularity() {
        let (v, _) = integrate_adaptive(|x| x.sqrt().ln(), 0.0, 1.0, 1e-12, 1e-12).unwrap();
        assert_relative_eq!(v, -0.5, max_relative = 1e-9);
    }

    #[test]
    fn semi_infinite_gaussian() {
        let (v, _) = integrate_to_infinity(|x| (-x * x).exp(), 0.0, 1e-13, 1e-12).unwrap();
        assert_relative_eq!(v, PI.sqrt() / 2.0, max_relative = 1e-10);
    }

    #[test]
    fn heat_kernel_small_t_series() {
        // e^{-x} I_k(x) ≈ e^{-x} (x/2)^k / k! for tiny x
        let t = 1e-3;
        let row = heat_kernel_row(t, 3);
        let x: f64 = 2.0 * t;
        assert_relative_eq!(row[0], (-x).exp() * (1.0 + x * x / 4.0), max_relative = 1e-10);
        assert_relative_eq!(row[1], (-x).exp() * (x / 2.0) * (1.0 + x * x / 8.0), max_relative = 1e-10);
    }

    #[test]
    fn heat_kernel_known_values() {
        // I_0(2) = 2.2795853023360673, I_1(2) = 1.5906368546373291
        let row = heat_kernel_row(1.0, 2);
        assert_relative_eq!(row[0], (-2f64).exp() * 2.279_585_302_336_067_3, max_relative = 1e-13);
        assert_relative_eq!(row[1], (-2f64).exp() * 1.590_636_854_637_329, max_relative = 1e-13);
    }

    #[test]
    fn heat_kernel_large_t_matches_hankel() {
        let t = 5e3;
        let row = heat_kernel_row(t, 0);
        let x = 2.0 * t;
        let c = hankel_coefficients(0.0, 6);
        let series: f64 = c
            .iter()
            .enumerate()
            .map(|(k, &a)| if k % 2 == 0 { a } else { -a } / x.powi(k as i32))
            .sum();
        assert_relative_eq!(row[0], series / (2.0 * PI * x).sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn bessel_k_reference_values() {
        assert_relative_eq!(bessel_k(0.0, 1.0), 0.421_024_438_240_708_3, max_relative = 1e-13);
        assert_relative_eq!(bessel_k(1.0, 1.0), 0.601_907_230_197_234_6, max_relative = 1e-13);
        assert_relative_eq!(bessel_k(1.0, 0.01), 99.973_894_118_296_24, max_relative = 1e-12);
        assert_relative_eq!(bessel_k(1.0, 10.0), 1.864_877_345_382_558e-5, max_relative = 1e-12);
    }

    #[test]
    fn slope_of_power_law() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-1.5)).collect();
        assert_relative_eq!(loglog_slope(&x, &y), -1.5, max_relative = 1e-12);
    }

    proptest! {
        #[test]
        fn heat_kernel_row_is_a_probability(t in 0.0f64..2000.0) {
            let row = heat_kernel_row(t, 4000);
            let total = row[0] + 2.0 * row[1..].iter().sum::<f64>();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(row.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn heat_kernel_second_moment(t in 0.01f64..500.0) {
            let row = heat_kernel_row(t, 2000);
            let m2: f64 = 2.0 * row.iter().enumerate().map(|(k, q)| (k * k) as f64 * q).sum::<f64>();
            prop_assert!((m2 - 2.0 * t).abs() < 1e-10 * (1.0 + t));
        }

        #[test]
        fn neumaier_matches_exact_integer_sums(v in proptest::collection::vec(-1_000_000i64..1_000_000, 1..200)) {
            let exact: i64 = v.iter().sum();
            let s = neumaier_sum(v.iter().map(|&x| x as f64 * 0.5));
            prop_assert_eq!(s, exact as f64 * 0.5);
        }
    }
}
