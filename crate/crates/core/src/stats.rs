//! Estimators and goodness-of-fit checks shared by the samplers and the
//! experiments.

use std::collections::BTreeMap;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Streaming mean and variance. Merging is associative.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    count: usize,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        let mut s = Self::new();
        xs.iter().for_each(|&x| s.push(x));
        s
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&self, other: &Self) -> Self {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        let mean = self.mean + delta * other.count as f64 / n;
        let m2 = self.m2 + other.m2 + delta * delta * self.count as f64 * other.count as f64 / n;
        Self { count: self.count + other.count, mean, m2 }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero below two samples.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).max(0.0)
        }
    }

    /// Naive i.i.d. standard error of the mean.
    pub fn naive_stderr(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }
}

/// Binned counts with explicit underflow and overflow, so `total` is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    edges: Vec<f64>,
    counts: Vec<u64>,
    underflow: u64,
    overflow: u64,
    total: u64,
}

impl Histogram {
    pub fn with_edges(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::Degenerate("a histogram needs at least two edges".into()));
        }
        if edges.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Degenerate("histogram edges must be strictly increasing".into()));
        }
        let bins = edges.len() - 1;
        Ok(Self { edges, counts: vec![0; bins], underflow: 0, overflow: 0, total: 0 })
    }

    pub fn uniform(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(hi > lo) {
            return Err(Error::Degenerate(format!("bad histogram range [{lo}, {hi}] x {bins}")));
        }
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|k| lo + width * k as f64).collect();
        Self::with_edges(edges)
    }

    /// Freedman-Diaconis bin width over the sample range.
    pub fn freedman_diaconis(sample: &[f64]) -> Result<Self> {
        if sample.len() < 2 {
            return Err(Error::InsufficientSamples { required: 2, actual: sample.len() });
        }
        let mut sorted = sample.to_vec();
        sorted.sort_by(f64::total_cmp);
        let lo = sorted[0];
        let hi = sorted[sorted.len() - 1];
        if !(hi > lo) {
            // all equal: a single bin around the common value
            let pad = lo.abs().max(1.0) * 1e-9;
            let mut h = Self::with_edges(vec![lo - pad, lo + pad])?;
            h.fill(sample);
            return Ok(h);
        }
        let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
        let n = sorted.len() as f64;
        let mut width = 2.0 * iqr / n.cbrt();
        if !(width > 0.0) {
            width = (hi - lo) / n.sqrt().ceil();
        }
        let bins = (((hi - lo) / width).ceil() as usize).clamp(1, 100_000);
        let mut edges: Vec<f64> = (0..=bins).map(|k| lo + (hi - lo) * k as f64 / bins as f64).collect();
        // the maximum belongs to the last bin, not the overflow
        let last = edges.len() - 1;
        edges[last] = f64::from_bits(hi.to_bits() + 1);
        let mut h = Self::with_edges(edges)?;
        h.fill(sample);
        Ok(h)
    }

    pub fn add(&mut self, x: f64) {
        self.total += 1;
        if x < self.edges[0] {
            self.underflow += 1;
            return;
        }
        if x >= self.edges[self.edges.len() - 1] {
            self.overflow += 1;
            return;
        }
        let k = self.edges.partition_point(|&e| e <= x) - 1;
        self.counts[k] += 1;
    }

    pub fn fill(&mut self, xs: &[f64]) {
        xs.iter().for_each(|&x| self.add(x));
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn underflow(&self) -> u64 {
        self.underflow
    }

    pub fn overflow(&self) -> u64 {
        self.overflow
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// `(bin_left, bin_right, count)` rows, including the open-ended tails.
    pub fn rows(&self) -> Vec<(f64, f64, u64)> {
        let mut rows = Vec::with_capacity(self.counts.len() + 2);
        if self.underflow > 0 {
            rows.push((f64::NEG_INFINITY, self.edges[0], self.underflow));
        }
        for (k, &c) in self.counts.iter().enumerate() {
            rows.push((self.edges[k], self.edges[k + 1], c));
        }
        if self.overflow > 0 {
            rows.push((self.edges[self.edges.len() - 1], f64::INFINITY, self.overflow));
        }
        rows
    }

    /// Differential Shannon entropy -sum p ln(p / width) over finite bins.
    pub fn differential_entropy(&self) -> f64 {
        let inside: u64 = self.counts.iter().sum();
        if inside == 0 {
            return 0.0;
        }
        let n = inside as f64;
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(k, &c)| {
                let p = c as f64 / n;
                let width = self.edges[k + 1] - self.edges[k];
                -p * (p / width).ln()
            })
            .sum()
    }
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Sup-norm distance between the empirical CDF of `sample` and `cdf`.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::InsufficientSamples { required: 1, actual: 0 });
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        // ties: jump over the whole run of equal values at once
        let x = sorted[i];
        let mut j = i;
        while j < sorted.len() && sorted[j] == x {
            j += 1;
        }
        let f = cdf(x);
        d = d.max(f - i as f64 / n).max(j as f64 / n - f);
        i = j;
    }
    Ok(d.clamp(0.0, 1.0))
}

/// KS distance against the exponential law with the given mean.
pub fn ks_exponential(sample: &[f64], mean: f64) -> Result<f64> {
    const MIN_SAMPLES: usize = 100;
    if sample.len() < MIN_SAMPLES {
        return Err(Error::InsufficientSamples { required: MIN_SAMPLES, actual: sample.len() });
    }
    if !(mean > 0.0 && mean.is_finite()) {
        return Err(Error::Domain(format!("exponential mean must be positive, got {mean}")));
    }
    if let Some(&bad) = sample.iter().find(|&&x| !(x >= 0.0)) {
        return Err(Error::Degenerate(format!("sample value {bad} outside [0, inf)")));
    }
    ks_statistic(sample, |x| -(-x / mean).exp_m1())
}

/// Total variation distance between two discrete distributions given as
/// (unnormalised) weights.
pub fn total_variation<K: Ord + Clone>(p: &BTreeMap<K, f64>, q: &BTreeMap<K, f64>) -> f64 {
    let sp: f64 = p.values().sum();
    let sq: f64 = q.values().sum();
    let mut keys: Vec<&K> = p.keys().chain(q.keys()).collect();
    keys.sort();
    keys.dedup();
    0.5 * keys
        .into_iter()
        .map(|k| {
            let a = p.get(k).copied().unwrap_or(0.0) / sp;
            let b = q.get(k).copied().unwrap_or(0.0) / sq;
            (a - b).abs()
        })
        .sum::<f64>()
}

/// One level of the blocking (doubling) transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockLevel {
    pub block_size: usize,
    pub blocks: usize,
    pub stderr: f64,
    pub stderr_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockingResult {
    pub stderr: f64,
    /// Whether a plateau was found; if not, `stderr` is the largest eligible level.
    pub converged: bool,
    pub levels: Vec<BlockLevel>,
}

/// Standard error of the mean of a correlated series by repeated pairwise
/// blocking, read off at the first plateau.
pub fn blocked_stderr(series: &[f64]) -> Result<BlockingResult> {
    const MIN_LEN: usize = 64;
    const MIN_BLOCKS: usize = 32;
    if series.len() < MIN_LEN {
        return Err(Error::InsufficientSamples { required: MIN_LEN, actual: series.len() });
    }
    let mut levels = Vec::new();
    let mut data = series.to_vec();
    let mut block_size = 1;
    while data.len() >= 2 {
        let stats = RunningStats::from_slice(&data);
        let n = data.len() as f64;
        let var_of_mean = stats.variance() / n;
        let stderr = var_of_mean.sqrt();
        levels.push(BlockLevel {
            block_size,
            blocks: data.len(),
            stderr,
            stderr_error: stderr / (2.0 * (n - 1.0)).sqrt(),
        });
        data = data.chunks_exact(2).map(|c| 0.5 * (c[0] + c[1])).collect();
        block_size *= 2;
    }
    let eligible: Vec<BlockLevel> = levels.iter().copied().filter(|l| l.blocks >= MIN_BLOCKS).collect();
    for k in 0..eligible.len().saturating_sub(2) {
        let base = eligible[k];
        let flat = eligible[k + 1..k + 3]
            .iter()
            .all(|l| l.stderr - base.stderr <= base.stderr_error);
        if flat {
            let stderr = eligible[k..k + 3].iter().map(|l| l.stderr).fold(0.0, f64::max);
            return Ok(BlockingResult { stderr, converged: true, levels });
        }
    }
    let stderr = eligible.iter().map(|l| l.stderr).fold(0.0, f64::max);
    Ok(BlockingResult { stderr, converged: false, levels })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub stderr: f64,
    pub intercept: f64,
}

/// Least-squares fit of ln y against ln x.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<SlopeFit> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch { money: xs.len(), goods: ys.len() });
    }
    if xs.len() < 3 {
        return Err(Error::InsufficientSamples { required: 3, actual: xs.len() });
    }
    if let Some(bad) = xs.iter().chain(ys).find(|&&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Domain(format!("log-log fit needs positive values, got {bad}")));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("all x values are equal".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let stderr = (ssr / (n - 2.0) / sxx).sqrt();
    Ok(SlopeFit { slope, stderr, intercept })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AutocorrTime {
    /// Integrated autocorrelation time, 1/2 + sum of rho(t) for t >= 1.
    pub tau: f64,
    /// Series is at least ten times longer than `tau`.
    pub window_ok: bool,
}

/// Normalised autocorrelation rho(t) for all lags, via FFT.
pub fn autocorrelation(series: &[f64]) -> Result<Vec<f64>> {
    let n = series.len();
    if n < 2 {
        return Err(Error::InsufficientSamples { required: 2, actual: n });
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let size = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = series
        .iter()
        .map(|&x| Complex::new(x - mean, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(size).process(&mut buf);
    buf.iter_mut().for_each(|c| *c = Complex::new(c.norm_sqr(), 0.0));
    planner.plan_fft_inverse(size).process(&mut buf);
    let c0 = buf[0].re;
    if !(c0 > 1e-300 * size as f64) {
        return Err(Error::Degenerate("series has zero variance".into()));
    }
    Ok(buf[..n].iter().map(|c| c.re / c0).collect())
}

/// Integrated autocorrelation time with Geyer's initial monotone positive
/// sequence cutoff.
pub fn autocorr_time(series: &[f64]) -> Result<AutocorrTime> {
    let rho = autocorrelation(series)?;
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut m = 0;
    while 2 * m + 1 < rho.len() {
        let pair = (rho[2 * m] + rho[2 * m + 1]).min(prev);
        if pair <= 0.0 {
            break;
        }
        sum += pair;
        prev = pair;
        m += 1;
    }
    let tau = (sum - 0.5).max(f64::EPSILON);
    Ok(AutocorrTime { tau, window_ok: series.len() as f64 >= 10.0 * tau })
}
