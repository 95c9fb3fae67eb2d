//! First-law bookkeeping, heat flow between coupled markets, second-law
//! checks, entropy estimates and quasistatic volume sweeps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_positive, Error, Result};
use crate::market::{new_market, Allocation, MarketState};
use crate::mc::{exchange_pair, kinetic_step, merged_mean, probe_size, ratio_estimate, Estimate, ExchangeRule};
use crate::oracle;
use crate::stats::{autocorr_time, blocked_stderr, Histogram, RunningStats};

/// Macroscopic state of a market at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub energy: f64,
    pub volume: f64,
    pub agents: f64,
}

impl Summary {
    pub fn of(state: &MarketState) -> Self {
        Self { energy: state.total_money(), volume: state.total_goods(), agents: state.len() as f64 }
    }
}

/// dE split into heat, work p dV and financial work mu dN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstLawRecord {
    pub d_e: f64,
    pub work: f64,
    pub financial_work: f64,
    pub heat: f64,
}

pub fn first_law_decompose(before: &Summary, after: &Summary, p: f64, mu: f64) -> FirstLawRecord {
    let d_e = after.energy - before.energy;
    let work = p * (after.volume - before.volume);
    let financial_work = mu * (after.agents - before.agents);
    FirstLawRecord { d_e, work, financial_work, heat: d_e + work - financial_work }
}

/// One market of a coupled experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarketConfig {
    pub agents: usize,
    pub temperature: f64,
    pub volume: f64,
    pub rule: ExchangeRule,
}

impl MarketConfig {
    pub fn new(agents: usize, temperature: f64, volume: f64) -> Self {
        Self { agents, temperature, volume, rule: ExchangeRule::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoupledSpec {
    pub first: MarketConfig,
    pub second: MarketConfig,
    /// Probability per step that the step is a cross-market exchange.
    pub coupling_rate: f64,
    pub steps: u64,
    /// Steps per reporting interval.
    pub interval: u64,
    /// Leading intervals excluded from the per-interval checks.
    pub burn_in_intervals: usize,
    pub seed: u64,
    pub k0: f64,
}

impl CoupledSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.coupling_rate > 0.0 && self.coupling_rate <= 1.0) {
            return Err(Error::Config(format!("coupling rate {} outside (0, 1]", self.coupling_rate)));
        }
        for m in [&self.first, &self.second] {
            if m.agents < 2 {
                return Err(Error::TooFewAgents { required: 2, actual: m.agents });
            }
            ensure_positive("temperature", m.temperature)?;
            ensure_positive("volume", m.volume)?;
            m.rule.validate()?;
            if m.rule.loss_fraction != 0.0 {
                return Err(Error::Incompatible("heat-flow markets must be loss-free".into()));
            }
        }
        if self.interval == 0 || self.steps < self.interval {
            return Err(Error::Config("need at least one full reporting interval".into()));
        }
        if self.burn_in_intervals >= (self.steps / self.interval) as usize {
            return Err(Error::Config("burn-in covers every interval".into()));
        }
        ensure_positive("k0", self.k0)
    }

    /// (N1 T1 + N2 T2) / (N1 + N2).
    pub fn common_temperature(&self) -> f64 {
        let (a, b) = (&self.first, &self.second);
        (a.agents as f64 * a.temperature + b.agents as f64 * b.temperature) / (a.agents + b.agents) as f64
    }
}

/// One reporting interval of a coupled pair.
///
/// `t1`, `t2` and the stderrs are end-of-interval snapshots; the entropies
/// use temperatures averaged over the interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatFlowInterval {
    pub step: u64,
    pub t1: f64,
    pub t2: f64,
    pub t1_stderr: f64,
    pub t2_stderr: f64,
    pub t1_mean: f64,
    pub t2_mean: f64,
    /// Blocked standard error of `t1_mean`.
    pub t1_mean_stderr: f64,
    /// Heat received by market 1 during this interval.
    pub dq12: f64,
    /// Heat received by market 1 since the start.
    pub cumulative_dq12: f64,
    pub s1: f64,
    pub s2: f64,
    pub s_total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatFlowReport {
    pub spec: CoupledSpec,
    pub initial: HeatFlowInterval,
    pub intervals: Vec<HeatFlowInterval>,
    /// Heat received by market 2, per interval; the negative of `dq12`.
    pub dq21: Vec<f64>,
    /// Largest |E1 + E2 - E_initial| seen at interval ends.
    pub money_drift: f64,
    /// Integrated autocorrelation time of T1 over the second half, in steps.
    pub tau_steps: f64,
}

/// T = E / (k0 N) and its standard error std(eps) / (k0 sqrt(N)).
pub fn temperature_estimate(state: &MarketState, k0: f64) -> Result<Estimate> {
    if state.len() < 2 {
        return Err(Error::TooFewAgents { required: 2, actual: state.len() });
    }
    let s = RunningStats::from_slice(state.money());
    Ok(Estimate { value: s.mean() / k0, stderr: s.variance().sqrt() / (k0 * (state.len() as f64).sqrt()) })
}

// Entropy of the pair as a function of market 1's temperature, with market
// 2 fixed by money conservation.
struct PairEntropy {
    n1: usize,
    n2: usize,
    v1: f64,
    v2: f64,
    energy: f64,
    k0: f64,
}

impl PairEntropy {
    fn t2(&self, t1: f64) -> f64 {
        (self.energy - self.k0 * self.n1 as f64 * t1) / (self.k0 * self.n2 as f64)
    }

    fn parts(&self, t1: f64) -> Result<(f64, f64)> {
        Ok((
            oracle::ideal_entropy(t1, self.v1, self.n1, self.k0)?,
            oracle::ideal_entropy(self.t2(t1), self.v2, self.n2, self.k0)?,
        ))
    }

    fn total(&self, t1: f64) -> f64 {
        self.parts(t1).map(|(a, b)| a + b).unwrap_or(f64::NEG_INFINITY)
    }

    // Largest fall and rise of S over t1 +- 3 sigma.
    fn spread(&self, t1: f64, sigma: f64) -> (f64, f64) {
        let s = self.total(t1);
        let mut fall: f64 = 0.0;
        let mut rise: f64 = 0.0;
        for k in -30..=30 {
            let x = self.total(t1 + 0.1 * k as f64 * sigma);
            if x.is_finite() {
                fall = fall.max(s - x);
                rise = rise.max(x - s);
            }
        }
        (fall, rise)
    }
}

struct IntervalAccumulator {
    t1: Vec<f64>,
}

impl IntervalAccumulator {
    fn close(
        &mut self,
        step: u64,
        m1: &MarketState,
        m2: &MarketState,
        pair: &PairEntropy,
        dq12: f64,
        cumulative: f64,
    ) -> Result<HeatFlowInterval> {
        let k0 = pair.k0;
        let e1 = temperature_estimate(m1, k0)?;
        let e2 = temperature_estimate(m2, k0)?;
        let (t1_mean, t1_mean_stderr) = if self.t1.is_empty() {
            (e1.value, 0.0)
        } else {
            let mean = self.t1.iter().sum::<f64>() / self.t1.len() as f64;
            (mean, blocked_stderr(&self.t1).map(|b| b.stderr).unwrap_or(f64::NAN))
        };
        self.t1.clear();
        let (s1, s2) = pair.parts(t1_mean)?;
        Ok(HeatFlowInterval {
            step,
            t1: e1.value,
            t2: e2.value,
            t1_stderr: e1.stderr,
            t2_stderr: e2.stderr,
            t1_mean,
            t2_mean: pair.t2(t1_mean),
            t1_mean_stderr,
            dq12,
            cumulative_dq12: cumulative,
            s1,
            s2,
            s_total: s1 + s2,
        })
    }
}

/// Two kinetic markets exchanging money only: each step is, with
/// probability `coupling_rate`, a uniform-fraction trade between a random
/// agent of each market, and otherwise an internal trade in one market
/// chosen in proportion to its size.
pub fn heat_flow_experiment(spec: &CoupledSpec) -> Result<HeatFlowReport> {
    spec.validate()?;
    let (c1, c2) = (&spec.first, &spec.second);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let alloc = |k: u64| Allocation::Random { seed: spec.seed.wrapping_add(k) };
    let mut m1 = new_market(c1.agents, c1.agents as f64 * spec.k0 * c1.temperature, c1.volume, alloc(1))?;
    let mut m2 = new_market(c2.agents, c2.agents as f64 * spec.k0 * c2.temperature, c2.volume, alloc(2))?;
    let e0 = m1.total_money() + m2.total_money();
    let pair = PairEntropy { n1: m1.len(), n2: m2.len(), v1: c1.volume, v2: c2.volume, energy: e0, k0: spec.k0 };
    let p_first = c1.agents as f64 / (c1.agents + c2.agents) as f64;
    let mut acc = IntervalAccumulator { t1: Vec::new() };
    let initial = acc.close(0, &m1, &m2, &pair, 0.0, 0.0)?;
    let mut intervals = Vec::new();
    let mut dq = 0.0;
    let mut cumulative = 0.0;
    let mut drift: f64 = 0.0;
    let sample_every = (spec.interval / 256).max(1);
    let mut t1_series = Vec::new();
    for step in 1..=spec.steps {
        if rng.random::<f64>() < spec.coupling_rate {
            let i = rng.random_range(0..m1.len());
            let j = rng.random_range(0..m2.len());
            let (a, b) = (m1.money()[i], m2.money()[j]);
            let (a2, b2, _) = exchange_pair(a, b, rng.random(), 0.0);
            set_money(&mut m1, i, a2);
            set_money(&mut m2, j, b2);
            dq += a2 - a;
        } else if rng.random::<f64>() < p_first {
            kinetic_step(&mut m1, &c1.rule, &mut rng)?;
        } else {
            kinetic_step(&mut m2, &c2.rule, &mut rng)?;
        }
        if step % sample_every == 0 {
            let t1 = m1.total_money() / (spec.k0 * m1.len() as f64);
            t1_series.push(t1);
            acc.t1.push(t1);
        }
        if step % spec.interval == 0 {
            cumulative += dq;
            intervals.push(acc.close(step, &m1, &m2, &pair, dq, cumulative)?);
            drift = drift.max((m1.total_money() + m2.total_money() - e0).abs());
            dq = 0.0;
        }
    }
    let tail = &t1_series[t1_series.len() / 2..];
    let tau_steps = autocorr_time(tail).map(|a| a.tau * sample_every as f64).unwrap_or(f64::NAN);
    // Blocking inside one interval sees only a few correlation times, so the
    // interval-mean error is floored by the equilibrium estimate sd * sqrt(2 tau / interval).
    if tau_steps.is_finite() && tail.len() > 1 {
        let sd = RunningStats::from_slice(tail).variance().sqrt();
        let floor = sd * (2.0 * tau_steps / spec.interval as f64).min(1.0).sqrt();
        for iv in intervals.iter_mut() {
            iv.t1_mean_stderr = iv.t1_mean_stderr.max(floor);
        }
    }
    let dq21 = intervals.iter().map(|iv| -iv.dq12).collect();
    Ok(HeatFlowReport { spec: *spec, initial, intervals, dq21, money_drift: drift, tau_steps })
}

fn set_money(state: &mut MarketState, i: usize, value: f64) {
    state.money_mut()[i] = value;
}

/// Outcome of the per-interval checks on a heat-flow run.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatFlowVerdict {
    /// Cumulative heat into market 1 has sign(T2 - T1) in every checked interval.
    pub direction_ok: bool,
    /// (1/T1 - 1/T2) dQ12 >= -3 stderr in every checked interval.
    pub inequality_ok: bool,
    /// Worst value of the inequality in units of its tolerance.
    pub worst_inequality: f64,
    pub final_t1: Estimate,
    pub final_t2: Estimate,
    pub expected_final: f64,
    pub equilibrated: bool,
    /// Reporting interval spans at least ten autocorrelation times.
    pub interval_ok: bool,
}

impl HeatFlowReport {
    pub fn checked(&self) -> &[HeatFlowInterval] {
        &self.intervals[self.spec.burn_in_intervals..]
    }

    pub fn verdict(&self) -> HeatFlowVerdict {
        let sign = (self.spec.second.temperature - self.spec.first.temperature).signum();
        let direction_ok = self.checked().iter().all(|iv| iv.cumulative_dq12 * sign > 0.0);
        let mut worst = f64::INFINITY;
        for iv in self.checked() {
            let (t1, t2) = (iv.t1_mean, iv.t2_mean);
            let lhs = (1.0 / t1 - 1.0 / t2) * iv.dq12;
            let sd = iv.dq12.abs() * ((iv.t1_stderr / (t1 * t1)).powi(2) + (iv.t2_stderr / (t2 * t2)).powi(2)).sqrt();
            let score = if sd > 0.0 { lhs / (3.0 * sd) } else if lhs >= 0.0 { f64::INFINITY } else { f64::NEG_INFINITY };
            worst = worst.min(score);
        }
        let last = self.intervals[self.intervals.len() - 1];
        let f1 = Estimate { value: last.t1, stderr: last.t1_stderr };
        let f2 = Estimate { value: last.t2, stderr: last.t2_stderr };
        let expected = self.spec.common_temperature();
        HeatFlowVerdict {
            direction_ok,
            inequality_ok: worst >= -1.0,
            worst_inequality: worst,
            final_t1: f1,
            final_t2: f2,
            expected_final: expected,
            equilibrated: f1.within(expected, 3.0) && f2.within(expected, 3.0),
            interval_ok: self.spec.interval as f64 >= 10.0 * self.tau_steps,
        }
    }

    /// Second-law intervals for the isolated pair, with no external heat.
    /// The dS uncertainty is the largest change of the pair entropy when each
    /// interval's mean T1 moves by up to three standard errors, divided by
    /// three; the first-order term vanishes near equilibrium, so the bound is
    /// taken on the exact entropy rather than a linearisation.
    pub fn second_law_intervals(&self) -> Vec<SecondLawInterval> {
        let s = &self.spec;
        let pair = PairEntropy {
            n1: s.first.agents,
            n2: s.second.agents,
            v1: s.first.volume,
            v2: s.second.volume,
            energy: self.initial.t1 * s.k0 * s.first.agents as f64 + self.initial.t2 * s.k0 * s.second.agents as f64,
            k0: s.k0,
        };
        let mut prev = if s.burn_in_intervals == 0 { self.initial } else { self.intervals[s.burn_in_intervals - 1] };
        let mut out = Vec::new();
        for iv in self.checked() {
            let (fall, _) = pair.spread(iv.t1_mean, iv.t1_mean_stderr);
            let (_, rise) = pair.spread(prev.t1_mean, prev.t1_mean_stderr);
            out.push(SecondLawInterval {
                d_s: iv.s_total - prev.s_total,
                d_s_stderr: (fall + rise) / 3.0,
                subsystems: vec![
                    SubsystemInterval { temperature: iv.t1_mean, temperature_stderr: iv.t1_stderr, external_heat: 0.0 },
                    SubsystemInterval { temperature: iv.t2_mean, temperature_stderr: iv.t2_stderr, external_heat: 0.0 },
                ],
            });
            prev = *iv;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsystemInterval {
    pub temperature: f64,
    pub temperature_stderr: f64,
    /// Heat received from outside the combined system.
    pub external_heat: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SecondLawInterval {
    pub d_s: f64,
    pub d_s_stderr: f64,
    pub subsystems: Vec<SubsystemInterval>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecondLawLine {
    /// dS - sum of dQ_k / T_k.
    pub residual: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// dS - dQ / T_mean, when all T_k are within 5% of their mean.
    pub weak_gradient: Option<(f64, bool)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SecondLawReport {
    pub lines: Vec<SecondLawLine>,
    pub pass: bool,
}

/// Checks dS >= sum dQ_k / T_k per interval, at a tolerance of three
/// propagated standard errors.
pub fn second_law_check(intervals: &[SecondLawInterval]) -> Result<SecondLawReport> {
    let mut lines = Vec::with_capacity(intervals.len());
    for iv in intervals {
        if iv.subsystems.is_empty() {
            return Err(Error::Degenerate("interval has no subsystems".into()));
        }
        let mut flow = 0.0;
        let mut var = iv.d_s_stderr * iv.d_s_stderr;
        for s in &iv.subsystems {
            if !(s.temperature > 0.0 && s.temperature.is_finite()) {
                return Err(Error::Degenerate(format!("temperature {} not estimable", s.temperature)));
            }
            flow += s.external_heat / s.temperature;
            var += (s.external_heat * s.temperature_stderr / (s.temperature * s.temperature)).powi(2);
        }
        let residual = iv.d_s - flow;
        let tolerance = 3.0 * var.sqrt();
        let k = iv.subsystems.len() as f64;
        let t_mean = iv.subsystems.iter().map(|s| s.temperature).sum::<f64>() / k;
        let spread = iv.subsystems.iter().map(|s| (s.temperature - t_mean).abs()).fold(0.0, f64::max) / t_mean;
        let weak_gradient = (spread < 0.05).then(|| {
            let q: f64 = iv.subsystems.iter().map(|s| s.external_heat).sum();
            let r = iv.d_s - q / t_mean;
            (r, r >= -tolerance)
        });
        lines.push(SecondLawLine { residual, tolerance, pass: residual >= -tolerance, weak_gradient });
    }
    let pass = lines.iter().all(|l| l.pass && l.weak_gradient.is_none_or(|(_, ok)| ok));
    Ok(SecondLawReport { lines, pass })
}

/// A kinetic market receiving a fixed amount of heat per interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatingSpec {
    pub agents: usize,
    pub temperature: f64,
    pub volume: f64,
    pub heat_per_interval: f64,
    pub intervals: usize,
    /// Kinetic trades between injections.
    pub relax_steps: u64,
    pub seed: u64,
    pub k0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatingInterval {
    pub t_before: Estimate,
    pub t_after: Estimate,
    pub heat: f64,
    pub d_s: f64,
    /// dQ / T at the interval midpoint temperature.
    pub heat_over_t: f64,
    pub stderr: f64,
}

impl HeatingInterval {
    pub fn residual(&self) -> f64 {
        self.d_s - self.heat_over_t
    }

    /// |dS - dQ/T| <= 3 stderr.
    pub fn reversible(&self) -> bool {
        self.residual().abs() <= 3.0 * self.stderr
    }
}

/// Heat is paid to randomly chosen agents in 100 equal parts, then the
/// market relaxes by internal trades.
pub fn heated_market_experiment(spec: &HeatingSpec) -> Result<Vec<HeatingInterval>> {
    if spec.agents < 2 {
        return Err(Error::TooFewAgents { required: 2, actual: spec.agents });
    }
    ensure_positive("temperature", spec.temperature)?;
    ensure_positive("volume", spec.volume)?;
    ensure_positive("k0", spec.k0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut m = new_market(
        spec.agents,
        spec.agents as f64 * spec.k0 * spec.temperature,
        spec.volume,
        Allocation::Random { seed: spec.seed },
    )?;
    let rule = ExchangeRule::default();
    for _ in 0..spec.relax_steps {
        kinetic_step(&mut m, &rule, &mut rng)?;
    }
    let mut out = Vec::with_capacity(spec.intervals);
    for _ in 0..spec.intervals {
        let before = temperature_estimate(&m, spec.k0)?;
        let s_before = oracle::ideal_entropy(before.value, m.total_goods(), m.len(), spec.k0)?;
        let e_before = m.total_money();
        let part = spec.heat_per_interval / 100.0;
        for _ in 0..100 {
            let i = rng.random_range(0..m.len());
            let v = m.money()[i] + part;
            if v < 0.0 {
                return Err(Error::Domain("heat withdrawal exceeds an agent's money".into()));
            }
            set_money(&mut m, i, v);
        }
        for _ in 0..spec.relax_steps {
            kinetic_step(&mut m, &rule, &mut rng)?;
        }
        let after = temperature_estimate(&m, spec.k0)?;
        let s_after = oracle::ideal_entropy(after.value, m.total_goods(), m.len(), spec.k0)?;
        let heat = m.total_money() - e_before;
        let t_mid = 0.5 * (before.value + after.value);
        let se_t = 0.5 * (before.stderr + after.stderr);
        out.push(HeatingInterval {
            t_before: before,
            t_after: after,
            heat,
            d_s: s_after - s_before,
            heat_over_t: heat / t_mid,
            stderr: heat.abs() * se_t / (t_mid * t_mid),
        });
    }
    Ok(out)
}

impl HeatingInterval {
    pub fn as_second_law(&self) -> SecondLawInterval {
        let t = 0.5 * (self.t_before.value + self.t_after.value);
        SecondLawInterval {
            d_s: self.d_s,
            d_s_stderr: 0.0,
            subsystems: vec![SubsystemInterval {
                temperature: t,
                temperature_stderr: 0.5 * (self.t_before.stderr + self.t_after.stderr),
                external_heat: self.heat,
            }],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntropyMethod {
    /// Closed form for the primitive market at (T, V, N).
    IdealAnalytic,
    /// N times the differential entropy of the per-agent money histogram.
    /// Meaningful for comparisons only.
    HistogramShannon,
}

#[derive(Debug, Clone, Copy)]
pub enum EntropyInput<'a> {
    Summary { temperature: f64, volume: f64, agents: usize },
    Money { samples: &'a [f64], agents: usize },
}

const MIN_HISTOGRAM_SAMPLES: usize = 1000;

pub fn entropy_estimate(input: EntropyInput<'_>, method: EntropyMethod, k0: f64) -> Result<f64> {
    match (method, input) {
        (EntropyMethod::IdealAnalytic, EntropyInput::Summary { temperature, volume, agents }) => {
            oracle::ideal_entropy(temperature, volume, agents, k0)
        }
        (EntropyMethod::HistogramShannon, EntropyInput::Money { samples, agents }) => {
            if samples.len() < MIN_HISTOGRAM_SAMPLES {
                return Err(Error::InsufficientSamples { required: MIN_HISTOGRAM_SAMPLES, actual: samples.len() });
            }
            let h = Histogram::freedman_diaconis(samples)?;
            Ok(agents as f64 * h.differential_entropy())
        }
        (EntropyMethod::IdealAnalytic, _) => {
            Err(Error::Incompatible("analytic entropy needs a (T, V, N) summary".into()))
        }
        (EntropyMethod::HistogramShannon, _) => {
            Err(Error::Incompatible("histogram entropy needs money samples".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    /// Volume at each stage; the first entry must match the market.
    pub path: Vec<f64>,
    pub relax_steps: u64,
    pub measure_steps: u64,
    pub thin: u64,
    pub seed: u64,
    pub k0: f64,
    pub rule: ExchangeRule,
}

/// `start -> end -> start` in `stages` equal steps each way.
pub fn round_trip_path(start: f64, end: f64, stages: usize) -> Vec<f64> {
    let up: Vec<f64> = (0..=stages).map(|k| start + (end - start) * k as f64 / stages as f64).collect();
    let mut path = up.clone();
    path.extend(up.iter().rev().skip(1));
    path
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub volume: f64,
    pub pressure: Estimate,
    pub temperature: Estimate,
    /// p V / (k0 N T).
    pub eos_ratio: f64,
    /// Autocorrelation time of the pressure estimator, in steps.
    pub tau_steps: f64,
    /// tau over the stage length.
    pub rate_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    pub agents: usize,
}

impl SweepReport {
    /// First and last pressures agree within three combined standard errors.
    pub fn reversible(&self) -> bool {
        let (a, b) = (self.points[0].pressure, self.points[self.points.len() - 1].pressure);
        (a.value - b.value).abs() <= 3.0 * a.stderr.hypot(b.stderr)
    }

    pub fn worst_eos_deviation(&self) -> f64 {
        self.points.iter().map(|p| (p.eos_ratio - 1.0).abs()).fold(0.0, f64::max)
    }
}

/// Steps a kinetic market with goods exchange through a volume path. At each
/// stage the goods are rescaled to the new total, the market relaxes, and the
/// price is read from a probe subsystem of N/10 agents.
pub fn quasistatic_sweep(market: &MarketState, spec: &SweepSpec) -> Result<SweepReport> {
    if !spec.rule.goods_exchange {
        return Err(Error::Incompatible("sweep needs goods exchange".into()));
    }
    spec.rule.validate()?;
    ensure_positive("k0", spec.k0)?;
    if spec.path.is_empty() {
        return Err(Error::Config("empty volume path".into()));
    }
    for &v in &spec.path {
        ensure_positive("sweep volume", v)?;
    }
    if spec.thin == 0 || spec.measure_steps / spec.thin < 64 {
        return Err(Error::InsufficientSamples { required: 64, actual: (spec.measure_steps / spec.thin.max(1)) as usize });
    }
    let n = market.len();
    if n < 2 {
        return Err(Error::TooFewAgents { required: 2, actual: n });
    }
    let v0 = market.total_goods();
    if (v0 - spec.path[0]).abs() > 1e-9 * v0.max(1.0) {
        return Err(Error::SimplexViolated { sum: v0, volume: spec.path[0] });
    }
    let mut m = market.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let probe = probe_size(n);
    let stage_len = (spec.relax_steps + spec.measure_steps) as f64;
    let mut points = Vec::with_capacity(spec.path.len());
    for &v in &spec.path {
        let c = v / m.total_goods();
        m.goods_mut().iter_mut().for_each(|g| *g *= c);
        for _ in 0..spec.relax_steps {
            kinetic_step(&mut m, &spec.rule, &mut rng)?;
        }
        let len = (spec.measure_steps / spec.thin) as usize;
        let mut pe = Vec::with_capacity(len);
        let mut pv = Vec::with_capacity(len);
        let mut temps = Vec::with_capacity(len);
        for step in 1..=spec.measure_steps {
            kinetic_step(&mut m, &spec.rule, &mut rng)?;
            if step % spec.thin == 0 {
                pe.push(m.money()[..probe].iter().sum::<f64>());
                pv.push(m.goods()[..probe].iter().sum::<f64>());
                temps.push(m.total_money() / (spec.k0 * n as f64));
            }
        }
        let pressure = ratio_estimate(&[&pe], &[&pv])?;
        let resid: Vec<f64> = pe.iter().zip(&pv).map(|(e, v)| e - pressure.value * v).collect();
        let tau_steps = autocorr_time(&resid)?.tau * spec.thin as f64;
        let rate_ratio = tau_steps / stage_len;
        if rate_ratio > 0.1 {
            return Err(Error::RateTooFast { tau: tau_steps, ratio: rate_ratio });
        }
        let t_mean = merged_mean(&[&temps])?;
        let temperature = Estimate {
            value: t_mean.value,
            stderr: temperature_estimate(&m, spec.k0)?.stderr,
        };
        let volume = m.total_goods();
        points.push(SweepPoint {
            volume,
            pressure,
            temperature,
            eos_ratio: pressure.value * volume / (spec.k0 * n as f64 * temperature.value),
            tau_steps,
            rate_ratio,
        });
    }
    Ok(SweepReport { points, agents: n })
}
