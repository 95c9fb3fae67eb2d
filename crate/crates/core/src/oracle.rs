//! Closed forms for the primitive (ideal) market: additive money, goods
//! owned by exactly one agent, no interactions.
//!
//! Partition functions are returned in the log domain so that markets with
//! millions of agents do not overflow.

use crate::error::{ensure_positive, Error, Result};
use crate::market::{Ensemble, EnsembleSpec};

/// ln n!, via log-gamma.
pub fn ln_factorial(n: usize) -> f64 {
    if n < 2 {
        0.0
    } else {
        libm::lgamma(n as f64 + 1.0)
    }
}

/// A positive quantity carried by its logarithm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogValue(pub f64);

impl LogValue {
    pub fn ln(self) -> f64 {
        self.0
    }

    /// The plain value; `inf` when it does not fit in an f64.
    pub fn value(self) -> f64 {
        self.0.exp()
    }
}

fn agents_at_least_one(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::ZeroAgents)
    } else {
        Ok(())
    }
}

/// Money part of the canonical partition function, (k0 T)^N.
pub fn ideal_z0(t: f64, n: usize, k0: f64) -> Result<LogValue> {
    ensure_positive("temperature", t)?;
    ensure_positive("k0", k0)?;
    agents_at_least_one(n)?;
    Ok(LogValue(n as f64 * (k0 * t).ln()))
}

/// Volume of the goods simplex {v >= 0, sum v = V}: V^(N-1) / (N-1)!, as a log.
pub fn ln_simplex_volume(v: f64, n: usize) -> f64 {
    (n as f64 - 1.0) * v.ln() - ln_factorial(n - 1)
}

/// ln Z_{V,N} = N ln(k0 T) + (N-1) ln V - ln (N-1)!.
pub fn ideal_canonical_partition(t: f64, v: f64, n: usize, k0: f64) -> Result<f64> {
    ensure_positive("volume", v)?;
    Ok(ideal_z0(t, n, k0)?.ln() + ln_simplex_volume(v, n))
}

/// E = k0 N T, independent of V.
pub fn ideal_mean_energy(t: f64, n: usize, k0: f64) -> Result<f64> {
    ensure_positive("temperature", t)?;
    ensure_positive("k0", k0)?;
    agents_at_least_one(n)?;
    Ok(k0 * n as f64 * t)
}

/// Canonical energy variance k0 T^2 dE/dT = (k0 T)^2 N.
pub fn ideal_energy_variance(t: f64, n: usize, k0: f64) -> Result<f64> {
    let e = ideal_mean_energy(t, n, k0)?;
    Ok(k0 * t * e)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EosForm {
    /// p V = k0 (N - 1) T.
    #[default]
    Exact,
    /// p V = k0 N T, the many-agent limit.
    LargeN,
}

pub fn ideal_eos_pressure(t: f64, v: f64, n: usize, k0: f64, form: EosForm) -> Result<f64> {
    ensure_positive("temperature", t)?;
    ensure_positive("volume", v)?;
    ensure_positive("k0", k0)?;
    agents_at_least_one(n)?;
    let owners = match form {
        EosForm::Exact => n as f64 - 1.0,
        EosForm::LargeN => n as f64,
    };
    Ok(k0 * owners * t / v)
}

/// ln Z_N for fixed (T, p, N): Z_N = (k0 T)^N (k0 T / p)^N.
pub fn ideal_npt_partition(t: f64, p: f64, n: usize, k0: f64) -> Result<f64> {
    ensure_positive("pressure", p)?;
    let z0 = ideal_z0(t, n, k0)?.ln();
    Ok(z0 + n as f64 * (k0 * t / p).ln())
}

/// Mean volume N k0 T / p at fixed (T, p, N).
pub fn ideal_npt_mean_volume(t: f64, p: f64, n: usize, k0: f64) -> Result<f64> {
    ensure_positive("temperature", t)?;
    ensure_positive("pressure", p)?;
    ensure_positive("k0", k0)?;
    agents_at_least_one(n)?;
    Ok(n as f64 * k0 * t / p)
}

/// Volume variance -k0 T dV/dp = N (k0 T / p)^2.
pub fn ideal_npt_volume_variance(t: f64, p: f64, n: usize, k0: f64) -> Result<f64> {
    let v = ideal_npt_mean_volume(t, p, n, k0)?;
    Ok(v * k0 * t / p)
}

/// Fixed-volume (grand) occupancy of the primitive market.
///
/// With activity `a = k0 T exp(mu / k0 T)` the sum over N >= 1 is
/// `Z_V = a exp(a V)`, so N - 1 is Poisson with mean `a V`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrandOccupancy {
    pub activity: f64,
    pub ln_z: f64,
    pub mean_agents: f64,
    pub var_agents: f64,
}

pub fn ideal_grand_mean_agents(t: f64, v: f64, mu: f64, k0: f64) -> Result<GrandOccupancy> {
    ensure_positive("temperature", t)?;
    ensure_positive("volume", v)?;
    ensure_positive("k0", k0)?;
    let kt = k0 * t;
    let ln_a = kt.ln() + mu / kt;
    let a = ln_a.exp();
    Ok(GrandOccupancy {
        activity: a,
        ln_z: ln_a + a * v,
        mean_agents: 1.0 + a * v,
        var_agents: a * v,
    })
}

/// ln P(N) of the grand-canonical agent-count marginal.
pub fn ideal_grand_ln_marginal(t: f64, v: f64, mu: f64, k0: f64, n: usize) -> Result<f64> {
    let occ = ideal_grand_mean_agents(t, v, mu, k0)?;
    if n == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    let lambda = occ.activity * v;
    Ok(-lambda + (n as f64 - 1.0) * lambda.ln() - ln_factorial(n - 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PotentialKind {
    HelmholtzF0,
    GibbsG0,
    OmegaOmega0,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PotentialValue {
    pub kind: PotentialKind,
    pub value: f64,
    pub at: EnsembleSpec,
}

impl PotentialValue {
    /// mu = G0 / N, defined for the Gibbs potential.
    pub fn financial_potential(&self) -> Option<f64> {
        match (self.kind, self.at.ensemble) {
            (PotentialKind::GibbsG0, Ensemble::IsothermalIsobaric { agents, .. }) => {
                Some(self.value / agents as f64)
            }
            _ => None,
        }
    }

    /// p = -Omega0 / V, defined for the grand potential.
    pub fn pressure(&self) -> Option<f64> {
        match (self.kind, self.at.ensemble) {
            (PotentialKind::OmegaOmega0, Ensemble::GrandCanonical { volume, .. }) => {
                Some(-self.value / volume)
            }
            _ => None,
        }
    }
}

/// F0, G0 or Omega0 from the closed-form partition function of `spec`.
pub fn ideal_potential(spec: &EnsembleSpec) -> Result<PotentialValue> {
    spec.validate()?;
    let k0 = spec.k0;
    let (kind, ln_z, t) = match spec.ensemble {
        Ensemble::Isolated { .. } => {
            return Err(Error::Incompatible("no potential for the isolated ensemble".into()))
        }
        Ensemble::Canonical { temperature, volume, agents } => (
            PotentialKind::HelmholtzF0,
            ideal_canonical_partition(temperature, volume, agents, k0)?,
            temperature,
        ),
        Ensemble::IsothermalIsobaric { temperature, pressure, agents } => (
            PotentialKind::GibbsG0,
            ideal_npt_partition(temperature, pressure, agents, k0)?,
            temperature,
        ),
        Ensemble::GrandCanonical { temperature, volume, mu } => (
            PotentialKind::OmegaOmega0,
            ideal_grand_mean_agents(temperature, volume, mu, k0)?.ln_z,
            temperature,
        ),
    };
    Ok(PotentialValue { kind, value: -k0 * t * ln_z, at: *spec })
}

/// Relative fluctuation of price and of temperature, 1 / sqrt(N).
pub fn ideal_relative_fluctuation(n: usize) -> Result<f64> {
    agents_at_least_one(n)?;
    Ok(1.0 / (n as f64).sqrt())
}

/// S0 = -dF0/dT = k0 ln Z_{V,N} + k0 N.
pub fn ideal_entropy(t: f64, v: f64, n: usize, k0: f64) -> Result<f64> {
    let ln_z = ideal_canonical_partition(t, v, n, k0)?;
    Ok(k0 * ln_z + k0 * n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn z0_values() {
        assert!(close(ideal_z0(2.0, 3, 1.0).unwrap().value(), 8.0, 1e-14));
        assert_eq!(ideal_z0(1.0, 1, 1.0).unwrap().value(), 1.0);
        // summing ln 2 five hundred times is an independent route
        let oracle: f64 = (0..500).map(|_| 2f64.ln()).sum();
        assert!(close(ideal_z0(2.0, 500, 1.0).unwrap().ln(), oracle, 1e-13));
        assert!(ideal_z0(0.0, 3, 1.0).is_err());
        assert!(ideal_z0(-1.0, 3, 1.0).is_err());
    }

    #[test]
    fn canonical_partition() {
        assert_eq!(ideal_canonical_partition(1.0, 1.0, 1, 1.0).unwrap(), 0.0);
        assert!(close(ideal_canonical_partition(1.0, 2.0, 3, 1.0).unwrap().exp(), 2.0, 1e-13));
        assert!(close(ideal_canonical_partition(2.0, 3.0, 4, 1.0).unwrap().exp(), 72.0, 1e-13));
        assert!(ideal_canonical_partition(1.0, 0.0, 3, 1.0).is_err());
        assert!(ideal_canonical_partition(1.0, 1.0, 0, 1.0).is_err());
    }

    #[test]
    fn large_markets_stay_finite() {
        let ln_z = ideal_canonical_partition(1.5, 1e6, 1_000_000, 1.0).unwrap();
        assert!(ln_z.is_finite());
    }

    #[test]
    fn mean_energy() {
        assert_eq!(ideal_mean_energy(1.0, 1000, 1.0).unwrap(), 1000.0);
        assert_eq!(ideal_mean_energy(50.0, 1, 1.0).unwrap(), 50.0);
        assert_eq!(ideal_mean_energy(2.0, 10, 3.0).unwrap(), 60.0);
    }

    #[test]
    fn eos() {
        assert!(close(ideal_eos_pressure(1.0, 100.0, 101, 1.0, EosForm::Exact).unwrap(), 1.0, 1e-14));
        assert_eq!(ideal_eos_pressure(1.0, 5.0, 1, 1.0, EosForm::Exact).unwrap(), 0.0);
        assert!(close(ideal_eos_pressure(3.0, 30.0, 11, 1.0, EosForm::Exact).unwrap(), 1.0, 1e-14));
        assert!(close(ideal_eos_pressure(1.0, 100.0, 100, 1.0, EosForm::LargeN).unwrap(), 1.0, 1e-14));
    }

    #[test]
    fn npt_volume() {
        assert_eq!(ideal_npt_mean_volume(1.0, 2.0, 10, 1.0).unwrap(), 5.0);
        assert_eq!(ideal_npt_mean_volume(1.0, 1.0, 1, 1.0).unwrap(), 1.0);
        assert_eq!(ideal_npt_mean_volume(4.0, 2.0, 100, 1.0).unwrap(), 200.0);
        // -k0 T d ln Z_N / dp matches the closed form
        let h = 1e-6;
        let d = (ideal_npt_partition(1.0, 2.0 + h, 10, 1.0).unwrap()
            - ideal_npt_partition(1.0, 2.0 - h, 10, 1.0).unwrap())
            / (2.0 * h);
        assert!(close(-d, 5.0, 1e-8));
    }

    #[test]
    fn grand_occupancy_matches_truncated_sum() {
        for (mu, expect) in [(0.0, 10.0), (2f64.ln(), 19.0)] {
            let occ = ideal_grand_mean_agents(1.0, 9.0, mu, 1.0).unwrap();
            // truncated oracle: sum over N <= 200 of Z_{V,N} e^{mu N}
            let terms: Vec<f64> = (1..=200usize)
                .map(|n| ideal_canonical_partition(1.0, 9.0, n, 1.0).unwrap() + mu * n as f64)
                .collect();
            let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = terms.iter().map(|t| (t - max).exp()).collect();
            let z: f64 = w.iter().sum();
            let mean: f64 = w.iter().enumerate().map(|(i, w)| (i + 1) as f64 * w).sum::<f64>() / z;
            let m2: f64 =
                w.iter().enumerate().map(|(i, w)| ((i + 1) as f64).powi(2) * w).sum::<f64>() / z;
            assert!(close(occ.mean_agents, mean, 1e-10));
            assert!(close(occ.var_agents, m2 - mean * mean, 1e-9));
            assert!(close(occ.ln_z, max + z.ln(), 1e-12));
            assert!(close(occ.mean_agents, expect, 1e-12));
        }
        let occ = ideal_grand_mean_agents(1.0, 9.0, 0.0, 1.0).unwrap();
        assert!(close(occ.var_agents, 9.0, 1e-12));
        let tiny = ideal_grand_mean_agents(1.0, 1e-12, 0.0, 1.0).unwrap();
        assert!(close(tiny.mean_agents, 1.0, 1e-10));
    }

    #[test]
    fn potentials() {
        let f = ideal_potential(&EnsembleSpec::canonical(1.0, 1.0, 1)).unwrap();
        assert_eq!(f.kind, PotentialKind::HelmholtzF0);
        assert_eq!(f.value, 0.0);
        let g = ideal_potential(&EnsembleSpec::isothermal_isobaric(1.0, 1.0, 2)).unwrap();
        assert_eq!(g.value, 0.0);
        assert_eq!(g.financial_potential(), Some(0.0));
        let o = ideal_potential(&EnsembleSpec::grand_canonical(1.0, 9.0, 0.0)).unwrap();
        assert!(close(o.value, -9.0, 1e-14));
        assert!(close(o.pressure().unwrap(), 1.0, 1e-14));
        assert!(ideal_potential(&EnsembleSpec::isolated(1.0, 1.0, 1)).is_err());
    }

    #[test]
    fn mu_equals_gibbs_per_agent() {
        // mu = dG0/dN is linear in N for the closed form, so G0/N is exact
        let g = |n: usize| ideal_potential(&EnsembleSpec::isothermal_isobaric(1.7, 0.6, n)).unwrap();
        let mu_discrete = g(6).value - g(5).value;
        assert!(close(g(5).financial_potential().unwrap(), mu_discrete, 1e-12));
    }

    #[test]
    fn grand_pressure_limit() {
        // -Omega0/V approaches k0 N T / V for large V at fixed activity
        let (t, mu) = (1.3, -0.4);
        let mut last = f64::INFINITY;
        for v in [10.0, 100.0, 1000.0, 10000.0] {
            let spec = EnsembleSpec::grand_canonical(t, v, mu);
            let p = ideal_potential(&spec).unwrap().pressure().unwrap();
            let occ = ideal_grand_mean_agents(t, v, mu, 1.0).unwrap();
            let gap = (p - occ.mean_agents * t / v).abs();
            assert!(gap < last);
            last = gap;
        }
        assert!(last < 1e-3);
    }

    #[test]
    fn gibbs_helmholtz_finite_difference() {
        for &(t, v, n, k0) in &[(1.0, 1.0, 1usize, 1.0), (2.5, 7.0, 11, 1.0), (0.7, 3.0, 60, 2.0)] {
            let f = |t: f64| -k0 * t * ideal_canonical_partition(t, v, n, k0).unwrap();
            let h = 1e-5 * t;
            let df = (f(t + h) - f(t - h)) / (2.0 * h);
            let e = ideal_mean_energy(t, n, k0).unwrap();
            let scale = f(t).abs().max(e.abs());
            assert!((f(t) - (e + t * df)).abs() <= 1e-8 * scale, "t={t} n={n}");
        }
    }

    #[test]
    fn maxwell_exact() {
        // p is linear in T, so T dp/dT = p with dE/dV = 0
        let (v, n) = (4.0, 9);
        let p = |t: f64| ideal_eos_pressure(t, v, n, 1.0, EosForm::Exact).unwrap();
        let slope = p(2.0) - p(1.0);
        assert_eq!(1.0 * slope, p(1.0));
    }

    #[test]
    fn relative_fluctuation() {
        assert!(close(ideal_relative_fluctuation(10000).unwrap(), 0.01, 1e-15));
        assert_eq!(ideal_relative_fluctuation(1).unwrap(), 1.0);
        assert_eq!(ideal_relative_fluctuation(64).unwrap(), 0.125);
        assert!(ideal_relative_fluctuation(0).is_err());
        // sqrt(k0 / (dE/dT)) with dE/dT = k0 N
        let k0 = 2.0;
        let n = 49;
        let c = ideal_mean_energy(1.0, n, k0).unwrap();
        assert!(close((k0 / c).sqrt(), ideal_relative_fluctuation(n).unwrap(), 1e-15));
    }

    #[test]
    fn entropy() {
        assert!(close(ideal_entropy(1.0, 1.0, 1, 1.0).unwrap(), 1.0, 1e-14));
        assert!(close(ideal_entropy(std::f64::consts::E, 1.0, 1, 1.0).unwrap(), 2.0, 1e-14));
        // finite-difference -dF0/dT
        let (t, v, n) = (1.3, 5.0, 7);
        let f = |t: f64| -t * ideal_canonical_partition(t, v, n, 1.0).unwrap();
        let h = 1e-5;
        let s_fd = -(f(t + h) - f(t - h)) / (2.0 * h);
        assert!(close(ideal_entropy(t, v, n, 1.0).unwrap(), s_fd, 1e-8));
    }

    #[test]
    fn entropy_extensive_limit() {
        // Stirling: ln (N-1)! ~ N ln N - N, so S(2V, 2N) / S(V, N) -> 2
        let mut prev_gap = f64::INFINITY;
        for n in [10usize, 100, 1000, 100_000] {
            let v = n as f64;
            let s1 = ideal_entropy(1.0, v, n, 1.0).unwrap();
            let s2 = ideal_entropy(1.0, 2.0 * v, 2 * n, 1.0).unwrap();
            let gap = (s2 / s1 - 2.0).abs();
            assert!(gap < prev_gap);
            prev_gap = gap;
        }
        assert!(prev_gap < 1e-3);
    }
}
