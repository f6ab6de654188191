//! Monte Carlo for the lattice |φ|⁴ model (Metropolis) and the continuous-time
//! weakly self-avoiding walk, with autocorrelation-corrected errors.

use crate::error::{Error, Result};
use crate::green::{Provenance, TableData, TwoPointTable};
use crate::lattice::{self, Point, Torus, DIM};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phi4Config {
    pub side: usize,
    pub n: usize,
    pub g: f64,
    pub nu: f64,
    pub sweeps: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Measurements averaged into one bin before the error analysis.
    pub bin: usize,
    pub chains: usize,
    pub seed: u64,
    /// Initial proposal half-width; tuned during the first half of burn-in.
    pub width: f64,
}

impl Default for Phi4Config {
    fn default() -> Self {
        Self {
            side: 4,
            n: 1,
            g: 1e-3,
            nu: 0.5,
            sweeps: 20_000,
            burn_in: 2_000,
            thin: 1,
            bin: 50,
            chains: 4,
            seed: 1,
            width: 1.0,
        }
    }
}

impl Phi4Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.g > 0.0) || !self.g.is_finite() {
            return Err(Error::InvalidArgument(format!("g must be positive, got {}", self.g)));
        }
        if !self.nu.is_finite() {
            return Err(Error::InvalidArgument("ν must be finite".into()));
        }
        if self.n == 0 {
            return Err(Error::InvalidArgument("n must be at least 1".into()));
        }
        if self.side < 2 {
            return Err(Error::InvalidArgument("torus side must be at least 2".into()));
        }
        if self.sweeps == 0 || self.thin == 0 || self.bin == 0 || self.chains == 0 {
            return Err(Error::InvalidArgument(
                "sweeps, thin, bin and chains must be positive".into(),
            ));
        }
        if self.sweeps / self.thin / self.bin < 4 {
            return Err(Error::InvalidArgument("fewer than 4 bins per chain".into()));
        }
        if !(self.width > 0.0) {
            return Err(Error::InvalidArgument("proposal width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WalkConfig {
    pub g: f64,
    pub nu: f64,
    pub samples: usize,
    /// Independent streams; samples are split evenly across them.
    pub chains: usize,
    pub bin: usize,
    pub seed: u64,
    /// Wrap the walk on a torus of this side; `None` walks on Z⁴.
    pub torus_side: Option<usize>,
}

impl Default for WalkConfig {
    fn default() -> Self {
        Self {
            g: 0.0,
            nu: 0.5,
            samples: 400_000,
            chains: 4,
            bin: 1000,
            seed: 1,
            torus_side: None,
        }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0) || !self.nu.is_finite() {
            return Err(Error::Precondition(format!(
                "the walk sampler needs ν > 0, got {}",
                self.nu
            )));
        }
        if !(self.g >= 0.0) || !self.g.is_finite() {
            return Err(Error::InvalidArgument(format!("g must be ≥ 0, got {}", self.g)));
        }
        if self.chains == 0 || self.bin == 0 || self.samples < 4 * self.chains * self.bin {
            return Err(Error::InvalidArgument(
                "need at least 4 bins of samples per chain".into(),
            ));
        }
        if let Some(m) = self.torus_side {
            Torus::with_side(m)?;
        }
        Ok(())
    }
}

/// Mean, standard error and integrated autocorrelation time of a scalar
/// series split over chains.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SeriesStats {
    pub mean: f64,
    pub se: f64,
    /// τ_int in units of bins, averaged over chains.
    pub tau: f64,
    pub ess: f64,
}

/// τ_int = ½ + Σ_{t=1}^{W} ρ(t) with the automatic window W = min{W : W ≥ c τ_int(W)}.
pub fn integrated_autocorrelation(x: &[f64]) -> f64 {
    const C: f64 = 6.0;
    let n = x.len();
    if n < 2 {
        return 0.5;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let c0 = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    if c0 <= 0.0 {
        return 0.5;
    }
    let mut tau = 0.5;
    for t in 1..n {
        let ct = (0..n - t).map(|i| (x[i] - mean) * (x[i + t] - mean)).sum::<f64>() / n as f64;
        tau += ct / c0;
        if t as f64 >= C * tau {
            break;
        }
    }
    tau.max(0.5)
}

pub fn series_stats(chains: &[Vec<f64>]) -> SeriesStats {
    let c = chains.len() as f64;
    let total: usize = chains.iter().map(|s| s.len()).sum();
    let mean = chains.iter().flatten().sum::<f64>() / total as f64;
    let mut var_mean = 0.0;
    let mut tau_sum = 0.0;
    for s in chains {
        let n = s.len() as f64;
        let m = s.iter().sum::<f64>() / n;
        let var = s.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0).max(1.0);
        let tau = integrated_autocorrelation(s);
        tau_sum += tau;
        var_mean += 2.0 * tau * var / n;
    }
    let se = var_mean.sqrt() / c;
    let tau = tau_sum / c;
    SeriesStats {
        mean,
        se,
        tau,
        ess: total as f64 / (2.0 * tau),
    }
}

/// Gelman–Rubin R̂ over chains of equal length.
pub fn gelman_rubin(chains: &[Vec<f64>]) -> Option<f64> {
    let m = chains.len();
    if m < 2 {
        return None;
    }
    let n = chains.iter().map(|c| c.len()).min()?;
    if n < 2 {
        return None;
    }
    let means: Vec<f64> = chains.iter().map(|c| c[..n].iter().sum::<f64>() / n as f64).collect();
    let grand = means.iter().sum::<f64>() / m as f64;
    let b = n as f64 / (m as f64 - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c[..n].iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n as f64 - 1.0))
        .sum::<f64>()
        / m as f64;
    if w <= 0.0 {
        return None;
    }
    let var = (n as f64 - 1.0) / n as f64 * w + b / n as f64;
    Some((var / w).sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McEstimate {
    pub model: String,
    pub seed: u64,
    pub torus_side: Option<usize>,
    pub points: Vec<Point>,
    pub mean: Vec<f64>,
    /// Autocorrelation-corrected standard errors (zero for a point never hit).
    pub se: Vec<f64>,
    pub chi: f64,
    pub chi_se: f64,
    pub tau_chi: f64,
    pub ess: f64,
    pub rhat: Option<f64>,
    pub acceptance: Option<f64>,
    pub width: Option<f64>,
    /// Binned series [chain][bin][point] of the per-point estimator.
    #[serde(skip)]
    pub series: Vec<Vec<Vec<f64>>>,
}

impl McEstimate {
    fn from_series(model: &str, seed: u64, torus_side: Option<usize>, points: Vec<Point>, series: Vec<Vec<Vec<f64>>>) -> Self {
        let np = points.len();
        let mut mean = Vec::with_capacity(np);
        let mut se = Vec::with_capacity(np);
        for k in 0..np {
            let s: Vec<Vec<f64>> = series.iter().map(|c| c.iter().map(|b| b[k]).collect()).collect();
            let st = series_stats(&s);
            mean.push(st.mean);
            se.push(st.se);
        }
        let chi_series: Vec<Vec<f64>> = series.iter().map(|c| c.iter().map(|b| b.iter().sum()).collect()).collect();
        let st = series_stats(&chi_series);
        Self {
            model: model.into(),
            seed,
            torus_side,
            points,
            mean,
            se,
            chi: st.mean,
            chi_se: st.se,
            tau_chi: st.tau,
            ess: st.ess,
            rhat: gelman_rubin(&chi_series),
            acceptance: None,
            width: None,
            series,
        }
    }

    pub fn value(&self, x: &Point) -> Option<(f64, f64)> {
        self.points.iter().position(|p| p == x).map(|k| (self.mean[k], self.se[k]))
    }

    /// Point-group averages: (sorted |x|, mean, se), errors from the binned
    /// series of the average itself.
    pub fn orbit_means(&self) -> Vec<([u32; DIM], f64, f64)> {
        let mut groups: BTreeMap<[u32; DIM], Vec<usize>> = BTreeMap::new();
        for (k, p) in self.points.iter().enumerate() {
            groups.entry(lattice::sorted_abs(p)).or_default().push(k);
        }
        groups
            .into_iter()
            .map(|(rep, ks)| {
                let s: Vec<Vec<f64>> = self
                    .series
                    .iter()
                    .map(|c| c.iter().map(|b| ks.iter().map(|&k| b[k]).sum::<f64>() / ks.len() as f64).collect())
                    .collect();
                let st = series_stats(&s);
                (rep, st.mean, st.se)
            })
            .collect()
    }

    pub fn to_table(&self) -> Result<TwoPointTable> {
        let side = self
            .torus_side
            .ok_or_else(|| Error::InvalidArgument("only torus estimates convert to a table".into()))?;
        let torus = Torus::with_side(side)?;
        let mut values = vec![0.0; torus.volume()];
        let mut errs = vec![0.0; torus.volume()];
        for (k, p) in self.points.iter().enumerate() {
            let i = torus.index_of(p);
            values[i] = self.mean[k];
            errs[i] = self.se[k];
        }
        Ok(TwoPointTable {
            m2: f64::NAN,
            provenance: Provenance::Mc,
            data: TableData::Torus { torus, values, errs },
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("x1,x2,x3,x4,value,se\n");
        for (k, x) in self.points.iter().enumerate() {
            s.push_str(&format!(
                "{},{},{},{},{:.17e},{:.6e}\n",
                x[0], x[1], x[2], x[3], self.mean[k], self.se[k]
            ));
        }
        s
    }
}

/// Runs `f(0..chains)` on up to `threads` scoped threads and returns the
/// results in chain order.
fn map_chains<T: Send, F: Fn(usize) -> T + Sync>(chains: usize, threads: usize, f: F) -> Vec<T> {
    let threads = threads.clamp(1, chains.max(1));
    if threads == 1 {
        return (0..chains).map(&f).collect();
    }
    let mut out: Vec<Option<T>> = (0..chains).map(|_| None).collect();
    std::thread::scope(|sc| {
        let f = &f;
        let handles: Vec<_> = (0..threads)
            .map(|t| sc.spawn(move || (t..chains).step_by(threads).map(|c| (c, f(c))).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            for (c, v) in h.join().expect("chain thread panicked") {
                out[c] = Some(v);
            }
        }
    });
    out.into_iter().map(|v| v.expect("every chain ran")).collect()
}

fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// In-place 4-d FFT on an array in torus index order (each index digit is a
/// coordinate shifted by the centring offset, so translations are cyclic).
fn fft4(data: &mut [Complex64], m: usize, fft: &dyn rustfft::Fft<f64>) {
    let vol = data.len();
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
}

struct Correlator {
    m: usize,
    fwd: std::sync::Arc<dyn rustfft::Fft<f64>>,
    inv: std::sync::Arc<dyn rustfft::Fft<f64>>,
    buf: Vec<Complex64>,
    power: Vec<f64>,
    /// For each torus index i (point x), the digit index of x mod M.
    lag_of: Vec<usize>,
}

impl Correlator {
    fn new(torus: &Torus) -> Self {
        let m = torus.m;
        let mut planner = FftPlanner::<f64>::new();
        let lag_of = (0..torus.volume())
            .map(|i| {
                let x = torus.embed(i);
                x.iter().fold(0usize, |acc, &c| acc * m + c.rem_euclid(m as i64) as usize)
            })
            .collect();
        Self {
            m,
            fwd: planner.plan_fft_forward(m),
            inv: planner.plan_fft_inverse(m),
            buf: vec![Complex64::new(0.0, 0.0); torus.volume()],
            power: vec![0.0; torus.volume()],
            lag_of,
        }
    }

    /// out[i] += (1/(nV)) Σ_y φ_y · φ_{y+x_i}.
    fn accumulate(&mut self, field: &[f64], n: usize, out: &mut [f64]) {
        let vol = self.buf.len();
        self.power.iter_mut().for_each(|p| *p = 0.0);
        for a in 0..n {
            for (i, b) in self.buf.iter_mut().enumerate() {
                *b = Complex64::new(field[i * n + a], 0.0);
            }
            fft4(&mut self.buf, self.m, self.fwd.as_ref());
            for (p, b) in self.power.iter_mut().zip(&self.buf) {
                *p += b.norm_sqr();
            }
        }
        for (b, p) in self.buf.iter_mut().zip(&self.power) {
            *b = Complex64::new(*p, 0.0);
        }
        fft4(&mut self.buf, self.m, self.inv.as_ref());
        let norm = 1.0 / (vol as f64 * vol as f64 * n as f64);
        for (o, &lag) in out.iter_mut().zip(&self.lag_of) {
            *o += self.buf[lag].re * norm;
        }
    }
}

struct ChainOutput {
    bins: Vec<Vec<f64>>,
    acceptance: f64,
    width: f64,
}

fn phi4_chain(cfg: &Phi4Config, torus: &Torus, chain: usize) -> ChainOutput {
    let n = cfg.n;
    let vol = torus.volume();
    let mut rng = chain_rng(cfg.seed, chain);
    let mut field = vec![0.0; vol * n];
    let nbrs: Vec<[usize; 2 * DIM]> = (0..vol)
        .map(|i| {
            let mut a = [0; 2 * DIM];
            for axis in 0..DIM {
                a[2 * axis] = torus.neighbor(i, axis, true);
                a[2 * axis + 1] = torus.neighbor(i, axis, false);
            }
            a
        })
        .collect();
    // local energy g/4 |φ|⁴ + (ν/2 + d)|φ|² − φ·h, h = Σ_{y~x} φ_y
    let c2 = 0.5 * cfg.nu + DIM as f64;
    let quarter_g = 0.25 * cfg.g;
    let mut width = cfg.width;
    let sweep = |field: &mut Vec<f64>, rng: &mut ChaCha8Rng, width: f64| -> (u64, u64) {
        let mut acc = 0u64;
        let mut tried = 0u64;
        let mut h = vec![0.0; n];
        for x in 0..vol {
            h.iter_mut().for_each(|v| *v = 0.0);
            for &y in &nbrs[x] {
                for a in 0..n {
                    h[a] += field[y * n + a];
                }
            }
            let mut q: f64 = (0..n).map(|a| field[x * n + a].powi(2)).sum();
            for a in 0..n {
                let old = field[x * n + a];
                let delta = rng.gen_range(-width..width);
                let new = old + delta;
                let q_new = q + new * new - old * old;
                let de = quarter_g * (q_new * q_new - q * q) + c2 * (q_new - q) - delta * h[a];
                tried += 1;
                if de <= 0.0 || rng.gen::<f64>() < (-de).exp() {
                    field[x * n + a] = new;
                    q = q_new;
                    acc += 1;
                }
            }
        }
        (acc, tried)
    };
    let tune_every = 20;
    let tune_until = cfg.burn_in / 2;
    let (mut acc, mut tried) = (0u64, 0u64);
    for s in 0..cfg.burn_in {
        let (a, t) = sweep(&mut field, &mut rng, width);
        acc += a;
        tried += t;
        if s < tune_until && (s + 1) % tune_every == 0 {
            let rate = acc as f64 / tried as f64;
            if !(0.3..=0.5).contains(&rate) {
                width *= (rate / 0.4).clamp(0.5, 2.0);
            }
            acc = 0;
            tried = 0;
        }
    }
    let mut corr = Correlator::new(torus);
    let per_bin = cfg.bin;
    let nbins = cfg.sweeps / cfg.thin / per_bin;
    let mut bins = Vec::with_capacity(nbins);
    let (mut acc, mut tried) = (0u64, 0u64);
    for _ in 0..nbins {
        let mut sum = vec![0.0; vol];
        for _ in 0..per_bin {
            for _ in 0..cfg.thin {
                let (a, t) = sweep(&mut field, &mut rng, width);
                acc += a;
                tried += t;
            }
            corr.accumulate(&field, n, &mut sum);
        }
        sum.iter_mut().for_each(|v| *v /= per_bin as f64);
        bins.push(sum);
    }
    ChainOutput {
        bins,
        acceptance: acc as f64 / tried.max(1) as f64,
        width,
    }
}

/// Metropolis estimate of G_{x,N} = (1/n)⟨φ_0·φ_x⟩ on the torus of side
/// `cfg.side`, with χ = Σ_x G_{x,N}.
pub fn phi4_run(cfg: &Phi4Config) -> Result<McEstimate> {
    phi4_run_threads(cfg, 1)
}

/// As [`phi4_run`]; each chain has its own stream, so the result does not
/// depend on `threads`.
pub fn phi4_run_threads(cfg: &Phi4Config, threads: usize) -> Result<McEstimate> {
    cfg.validate()?;
    let torus = Torus::with_side(cfg.side)?;
    let outs: Vec<ChainOutput> = map_chains(cfg.chains, threads, |c| phi4_chain(cfg, &torus, c));
    let points: Vec<Point> = (0..torus.volume()).map(|i| torus.embed(i)).collect();
    let acceptance = outs.iter().map(|o| o.acceptance).sum::<f64>() / outs.len() as f64;
    let width = outs.iter().map(|o| o.width).sum::<f64>() / outs.len() as f64;
    let series = outs.into_iter().map(|o| o.bins).collect();
    let mut est = McEstimate::from_series("phi4", cfg.seed, Some(cfg.side), points, series);
    est.acceptance = Some(acceptance);
    est.width = Some(width);
    Ok(est)
}

/// One walk: endpoint, weight e^{-g I(T)}, I(T), T and the number of
/// distinct sites visited.
#[derive(Debug, Clone, Copy)]
pub struct WalkSample {
    pub end: Point,
    pub weight: f64,
    pub intersection: f64,
    pub time: f64,
    pub distinct: usize,
}

pub fn sample_walk(rng: &mut ChaCha8Rng, g: f64, nu: f64, torus: Option<&Torus>) -> WalkSample {
    let t_total: f64 = Exp::new(nu).expect("ν > 0").sample(rng);
    let hold = Exp::new(2.0 * DIM as f64).expect("positive rate");
    let mut visits: Vec<(Point, f64)> = Vec::new();
    let mut pos = [0i64; DIM];
    let mut t = 0.0;
    loop {
        let dt: f64 = hold.sample(rng);
        if t + dt >= t_total {
            visits.push((pos, t_total - t));
            break;
        }
        visits.push((pos, dt));
        t += dt;
        let dir = rng.gen_range(0..2 * DIM);
        pos[dir / 2] += if dir % 2 == 0 { 1 } else { -1 };
        if let Some(tor) = torus {
            pos = tor.wrap(&pos);
        }
    }
    visits.sort_by_key(|a| a.0);
    let mut intersection = 0.0;
    let mut distinct = 0;
    let mut i = 0;
    while i < visits.len() {
        let mut local = 0.0;
        let mut k = i;
        while k < visits.len() && visits[k].0 == visits[i].0 {
            local += visits[k].1;
            k += 1;
        }
        intersection += local * local;
        distinct += 1;
        i = k;
    }
    WalkSample {
        end: pos,
        weight: (-g * intersection).exp(),
        intersection,
        time: t_total,
        distinct,
    }
}

/// G_x(g, ν; 0) = ν^{-1} E[e^{-g I(T)} 1{X(T) = x}] with T ~ Exp(ν).
pub fn wsaw_run(cfg: &WalkConfig) -> Result<McEstimate> {
    wsaw_run_threads(cfg, 1)
}

pub fn wsaw_run_threads(cfg: &WalkConfig, threads: usize) -> Result<McEstimate> {
    cfg.validate()?;
    let torus = cfg.torus_side.map(Torus::with_side).transpose()?;
    let per_chain = cfg.samples / cfg.chains;
    let nbins = per_chain / cfg.bin;
    let raw: Vec<Vec<(Point, f64)>> = map_chains(cfg.chains, threads, |c| {
        let mut rng = chain_rng(cfg.seed, c);
        (0..nbins * cfg.bin)
            .map(|_| {
                let s = sample_walk(&mut rng, cfg.g, cfg.nu, torus.as_ref());
                (s.end, s.weight)
            })
            .collect()
    });
    let mut index: BTreeMap<Point, usize> = raw.iter().flatten().map(|(p, _)| (*p, 0)).collect();
    if let Some(t) = &torus {
        for i in 0..t.volume() {
            index.entry(t.embed(i)).or_insert(0);
        }
    }
    let points: Vec<Point> = index.keys().copied().collect();
    for (k, p) in points.iter().enumerate() {
        index.insert(*p, k);
    }
    let scale = 1.0 / (cfg.nu * cfg.bin as f64);
    let series: Vec<Vec<Vec<f64>>> = raw
        .iter()
        .map(|chain| {
            chain
                .chunks(cfg.bin)
                .map(|blk| {
                    let mut b = vec![0.0; points.len()];
                    for (p, w) in blk {
                        b[index[p]] += w * scale;
                    }
                    b
                })
                .collect()
        })
        .collect();
    Ok(McEstimate::from_series("wsaw", cfg.seed, cfg.torus_side, points, series))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct XiEstimate {
    pub p: f64,
    pub value: f64,
    pub se: f64,
}

/// Plug-in ξ_p = [Σ|x|^p Ĝ_x / Σ Ĝ_x]^{1/p} with a delta-method error from
/// the linearised binned series.
pub fn estimate_xi_p(mc: &McEstimate, p: f64) -> Result<XiEstimate> {
    if !(p > 0.0) {
        return Err(Error::InvalidArgument(format!("p must be positive, got {p}")));
    }
    let w: Vec<f64> = mc.points.iter().map(|x| lattice::norm(x).powf(p)).collect();
    let s: f64 = mc.mean.iter().zip(&w).map(|(g, w)| g * w).sum();
    let chi: f64 = mc.mean.iter().sum();
    if !(chi > 0.0) || !(s > 0.0) {
        return Err(Error::Numeric(format!("degenerate table: Σ|x|^pG = {s}, χ = {chi}")));
    }
    let value = (s / chi).powf(1.0 / p);
    let lin: Vec<Vec<f64>> = mc
        .series
        .iter()
        .map(|c| {
            c.iter()
                .map(|b| {
                    let sb: f64 = b.iter().zip(&w).map(|(g, w)| g * w).sum();
                    let cb: f64 = b.iter().sum();
                    value / p * (sb / s - cb / chi)
                })
                .collect()
        })
        .collect();
    Ok(XiEstimate {
        p,
        value,
        se: series_stats(&lin).se,
    })
}
