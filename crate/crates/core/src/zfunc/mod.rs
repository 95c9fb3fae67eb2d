//! Numerical partition functions for small markets with arbitrary energy
//! functionals, and thermodynamics from their log-derivatives.

mod rules;

pub use rules::{gauss_laguerre, gauss_legendre};

use crate::error::{ensure_positive, Error, Result};
use crate::market::{EnergyFunctional, Ensemble, EnsembleSpec, Param, ThermoReport};
use crate::oracle;
use std::collections::HashMap;
use std::sync::Mutex;

/// Largest market integrated directly.
pub const MAX_QUADRATURE_AGENTS: usize = 6;

// Cap on integrand evaluations for one partition function.
const EVALUATION_BUDGET: u64 = 200_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Gauss-Laguerre in units of k0 T; exact for additive money.
    ExponentialWeighted,
    /// Gauss-Legendre panels on [0, cutoff], split at the functional's kinks.
    UniformComposite,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureSpec {
    pub scheme: Scheme,
    pub nodes_per_dim: usize,
    /// Upper money limit per agent; `None` picks one from the tail bound.
    pub money_cutoff: Option<f64>,
    /// Gauss-Legendre nodes per stick-breaking goods coordinate.
    pub goods_nodes: usize,
    /// Relative error accepted before the result is rejected.
    pub tolerance: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            scheme: Scheme::ExponentialWeighted,
            nodes_per_dim: 16,
            money_cutoff: None,
            goods_nodes: 12,
            tolerance: 1e-8,
        }
    }
}

const TAIL_MASS: f64 = 1e-10;

impl QuadratureSpec {
    pub fn composite(nodes_per_dim: usize) -> Self {
        Self { scheme: Scheme::UniformComposite, nodes_per_dim, ..Self::default() }
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    /// Cutoff for which the dropped tail of `exp(-eps / k0 T)` over `agents`
    /// dimensions stays below 1e-10.
    pub fn default_cutoff(kt: f64, agents: usize) -> f64 {
        kt * ((agents as f64).ln() - TAIL_MASS.ln() + 1.0)
    }

    pub fn validate(&self, kt: f64, agents: usize) -> Result<()> {
        if self.nodes_per_dim < 8 {
            return Err(Error::Domain(format!(
                "need at least 8 nodes per dimension, got {}",
                self.nodes_per_dim
            )));
        }
        if self.goods_nodes == 0 {
            return Err(Error::Domain("need at least one goods node".into()));
        }
        ensure_positive("quadrature tolerance", self.tolerance)?;
        if let (Scheme::UniformComposite, Some(c)) = (self.scheme, self.money_cutoff) {
            ensure_positive("money cutoff", c)?;
            let tail = agents as f64 * (-c / kt).exp();
            if tail >= TAIL_MASS {
                return Err(Error::Domain(format!(
                    "money cutoff {c} leaves tail mass {tail:e} (limit {TAIL_MASS:e})"
                )));
            }
        }
        Ok(())
    }
}

/// A partition function value in the log domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ZResult {
    pub ln_z: f64,
    pub ensemble: EnsembleSpec,
    pub energy_id: String,
    /// Estimated relative error of Z.
    pub error_estimate: f64,
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

// Nodes in money units with log-weights absorbing the exp(+eps/kT) factor of
// the Laguerre rule, so that every rule integrates exp(-E/kT) directly.
fn money_rule(q: &QuadratureSpec, nodes: usize, kt: f64, agents: usize, breakpoints: &[f64]) -> (Vec<f64>, Vec<f64>) {
    match q.scheme {
        Scheme::ExponentialWeighted => {
            let (x, lw) = gauss_laguerre(nodes);
            let eps: Vec<f64> = x.iter().map(|x| x * kt).collect();
            let ln_w = x.iter().zip(&lw).map(|(x, lw)| lw + x + kt.ln()).collect();
            (eps, ln_w)
        }
        Scheme::UniformComposite => {
            let cutoff = q.money_cutoff.unwrap_or_else(|| QuadratureSpec::default_cutoff(kt, agents));
            let per_panel = 8;
            let panels = (nodes / per_panel).max(1);
            let mut edges: Vec<f64> = (0..=panels).map(|k| cutoff * k as f64 / panels as f64).collect();
            edges.extend(breakpoints.iter().copied().filter(|&b| b > 0.0 && b < cutoff));
            edges.sort_by(f64::total_cmp);
            edges.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * cutoff);
            let (gx, gw) = gauss_legendre(per_panel);
            let mut eps = Vec::new();
            let mut ln_w = Vec::new();
            for pair in edges.windows(2) {
                let (a, b) = (pair[0], pair[1]);
                let half = 0.5 * (b - a);
                let mid = 0.5 * (a + b);
                for (x, w) in gx.iter().zip(&gw) {
                    eps.push(mid + half * x);
                    ln_w.push((w * half).ln());
                }
            }
            (eps, ln_w)
        }
    }
}

// Coordinates in which a shared pool's kinks are axis-aligned. Within each
// pool the poorest member carries the base coordinate and the others an
// offset above it; by symmetry every member is the poorest equally often.
struct Layout {
    base_of: Vec<Option<usize>>,
    ln_factor: f64,
}

impl Layout {
    fn new(f: &EnergyFunctional, n: usize) -> Self {
        let mut base_of = vec![None; n];
        let mut ln_factor = 0.0;
        if let EnergyFunctional::SharedPool(pools) = f {
            for p in pools.iter().filter(|p| p.members.len() > 1 && p.amount > 0.0) {
                let base = p.members[0];
                for &j in &p.members[1..] {
                    base_of[j] = Some(base);
                }
                ln_factor += (p.members.len() as f64).ln();
            }
        }
        Self { base_of, ln_factor }
    }
}

// ln of the integral of exp(-E(eps, goods)/kT) over the money coordinates.
fn money_integral(f: &EnergyFunctional, layout: &Layout, goods: &[f64], kt: f64, eps: &[f64], ln_w: &[f64]) -> f64 {
    let n = goods.len();
    let m = eps.len();
    let mut idx = vec![0usize; n];
    let mut money = vec![0.0; n];
    let mut terms = Vec::with_capacity(m.pow(n as u32));
    loop {
        let mut lw = layout.ln_factor;
        for d in 0..n {
            money[d] = eps[idx[d]];
            if let Some(b) = layout.base_of[d] {
                money[d] += eps[idx[b]];
            }
            lw += ln_w[idx[d]];
        }
        terms.push(lw - f.evaluate_unchecked(&money, goods) / kt);
        let mut d = 0;
        loop {
            if d == n {
                return log_sum_exp(&terms);
            }
            idx[d] += 1;
            if idx[d] < m {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

// Goods-dependent energy: stick-breaking Gauss-Legendre over the simplex.
#[allow(clippy::too_many_arguments)]
fn simplex_integral(f: &EnergyFunctional, layout: &Layout, v: f64, n: usize, kt: f64, eps: &[f64], ln_w: &[f64], goods_nodes: usize) -> f64 {
    if n == 1 {
        return money_integral(f, layout, &[v], kt, eps, ln_w);
    }
    let (gx, gw) = gauss_legendre(goods_nodes);
    let u: Vec<f64> = gx.iter().map(|x| 0.5 * (x + 1.0)).collect();
    let uw: Vec<f64> = gw.iter().map(|w| 0.5 * w).collect();
    let dims = n - 1;
    let mut idx = vec![0usize; dims];
    let mut goods = vec![0.0; n];
    let mut terms = Vec::new();
    loop {
        let mut remaining = v;
        let mut ln_jac = 0.0;
        for d in 0..dims {
            let take = remaining * u[idx[d]];
            ln_jac += remaining.ln() + uw[idx[d]].ln();
            goods[d] = take;
            remaining -= take;
        }
        goods[dims] = remaining.max(0.0);
        terms.push(ln_jac + money_integral(f, layout, &goods, kt, eps, ln_w));
        let mut d = 0;
        loop {
            if d == dims {
                return log_sum_exp(&terms);
            }
            idx[d] += 1;
            if idx[d] < goods_nodes {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

fn canonical_ln_z(f: &EnergyFunctional, kt: f64, v: f64, n: usize, q: &QuadratureSpec, nodes: usize) -> f64 {
    let bp = f.money_breakpoints();
    let (eps, ln_w) = money_rule(q, nodes, kt, n, &bp);
    let layout = Layout::new(f, n);
    if f.depends_on_goods() {
        simplex_integral(f, &layout, v, n, kt, &eps, &ln_w, q.goods_nodes)
    } else {
        money_integral(f, &layout, &vec![v / n as f64; n], kt, &eps, &ln_w) + oracle::ln_simplex_volume(v, n)
    }
}

/// Canonical partition function Z_{V,N} by tensor-product quadrature.
///
/// The error estimate compares the requested rule against one with half the
/// nodes, plus the truncated tail for the composite scheme.
pub fn integrate_canonical_z(
    f: &EnergyFunctional,
    t: f64,
    v: f64,
    n: usize,
    k0: f64,
    q: &QuadratureSpec,
) -> Result<ZResult> {
    if n == 0 {
        return Err(Error::ZeroAgents);
    }
    if n > MAX_QUADRATURE_AGENTS {
        return Err(Error::TooManyAgents { max: MAX_QUADRATURE_AGENTS, actual: n });
    }
    ensure_positive("temperature", t)?;
    ensure_positive("volume", v)?;
    ensure_positive("k0", k0)?;
    f.check_size(n)?;
    let kt = k0 * t;
    q.validate(kt, n)?;
    let goods_evals = if f.depends_on_goods() { (q.goods_nodes as u64).pow(n as u32 - 1) } else { 1 };
    let money_evals = (q.nodes_per_dim as u64 + 2 * f.money_breakpoints().len() as u64 * 8).pow(n as u32);
    if money_evals.saturating_mul(goods_evals) > EVALUATION_BUDGET {
        return Err(Error::Domain(format!(
            "quadrature needs {} evaluations (budget {EVALUATION_BUDGET})",
            money_evals.saturating_mul(goods_evals)
        )));
    }
    let fine = canonical_ln_z(f, kt, v, n, q, q.nodes_per_dim);
    let coarse = canonical_ln_z(f, kt, v, n, q, (q.nodes_per_dim / 2).max(4));
    let mut error = (fine - coarse).abs();
    if q.scheme == Scheme::UniformComposite {
        let cutoff = q.money_cutoff.unwrap_or_else(|| QuadratureSpec::default_cutoff(kt, n));
        error += n as f64 * (-cutoff / kt).exp();
    }
    if !(error <= q.tolerance) {
        return Err(Error::UnmetTolerance { estimate: error, tolerance: q.tolerance });
    }
    Ok(ZResult {
        ln_z: fine,
        ensemble: EnsembleSpec { ensemble: Ensemble::Canonical { temperature: t, volume: v, agents: n }, k0 },
        energy_id: f.id(),
        error_estimate: error,
    })
}

/// Fixed-N partition function from a canonical family: the Laplace transform
/// of Z_{V,N} in V, by Gauss-Laguerre with node doubling until the relative
/// change drops below 1e-7.
pub fn compose_npt_z(
    zv: &dyn Fn(f64) -> Result<ZResult>,
    t: f64,
    p: f64,
    n: usize,
    k0: f64,
) -> Result<ZResult> {
    const REL_TOL: f64 = 1e-7;
    ensure_positive("temperature", t)?;
    ensure_positive("pressure", p)?;
    ensure_positive("k0", k0)?;
    if n == 0 {
        return Err(Error::ZeroAgents);
    }
    let scale = k0 * t / p;
    let mut energy_id = String::new();
    let mut eval = |nodes: usize| -> Result<(f64, f64)> {
        let (x, lw) = gauss_laguerre(nodes);
        let mut terms = Vec::with_capacity(nodes);
        let mut err: f64 = 0.0;
        for (x, lw) in x.iter().zip(&lw) {
            let z = zv(scale * x)?;
            err = err.max(z.error_estimate);
            energy_id = z.energy_id;
            terms.push(lw + z.ln_z);
        }
        Ok((scale.ln() + log_sum_exp(&terms), err))
    };
    let (mut prev, _) = eval(16)?;
    for nodes in [32usize, 64, 128] {
        let (cur, inner) = eval(nodes)?;
        let diff = (cur - prev).abs();
        if diff <= REL_TOL {
            return Ok(ZResult {
                ln_z: cur,
                ensemble: EnsembleSpec::isothermal_isobaric(t, p, n).with_k0(k0),
                energy_id,
                error_estimate: diff + inner,
            });
        }
        prev = cur;
    }
    Err(Error::UnmetTolerance { estimate: f64::NAN, tolerance: REL_TOL })
}

/// Fixed-volume partition function as the series over N >= 1 of
/// Z_{V,N} exp(mu N / k0 T), truncated at `n_max`.
///
/// The tail bound assumes the terms decay at least geometrically from the
/// last ratio, which holds for log-concave series such as the ideal one.
pub fn compose_grand_z(
    zvn: &dyn Fn(usize) -> Result<ZResult>,
    t: f64,
    v: f64,
    mu: f64,
    k0: f64,
    n_max: usize,
) -> Result<ZResult> {
    const TAIL_TOL: f64 = 1e-12;
    ensure_positive("temperature", t)?;
    ensure_positive("volume", v)?;
    ensure_positive("k0", k0)?;
    if n_max < 2 {
        return Err(Error::Domain("grand series needs n_max >= 2".into()));
    }
    let kt = k0 * t;
    let mut terms = Vec::with_capacity(n_max);
    let mut energy_id = String::new();
    let mut inner: f64 = 0.0;
    for n in 1..=n_max {
        let z = zvn(n)?;
        inner = inner.max(z.error_estimate);
        energy_id = z.energy_id;
        terms.push(z.ln_z + mu * n as f64 / kt);
    }
    let ln_sum = log_sum_exp(&terms);
    let last = terms[n_max - 1];
    let ln_ratio = last - terms[n_max - 2];
    if ln_ratio >= 0.0 {
        return Err(Error::NonConvergent(format!(
            "terms still growing at N = {n_max} (ratio {:.3})",
            ln_ratio.exp()
        )));
    }
    let r = ln_ratio.exp();
    let tail = (last - ln_sum).exp() * r / (1.0 - r);
    if tail > TAIL_TOL {
        return Err(Error::NonConvergent(format!("relative tail {tail:e} at N = {n_max}")));
    }
    Ok(ZResult {
        ln_z: ln_sum,
        ensemble: EnsembleSpec::grand_canonical(t, v, mu).with_k0(k0),
        energy_id,
        error_estimate: tail + inner,
    })
}

/// A family of partition functions indexed by ensemble parameters.
pub trait LogPartition {
    fn ln_z(&self, spec: &EnsembleSpec) -> Result<ZResult>;
}

impl<F> LogPartition for F
where
    F: Fn(&EnsembleSpec) -> Result<ZResult>,
{
    fn ln_z(&self, spec: &EnsembleSpec) -> Result<ZResult> {
        self(spec)
    }
}

/// Closed-form primitive-market family.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdealFamily;

impl LogPartition for IdealFamily {
    fn ln_z(&self, spec: &EnsembleSpec) -> Result<ZResult> {
        let k0 = spec.k0;
        let ln_z = match spec.ensemble {
            Ensemble::Canonical { temperature, volume, agents } => {
                oracle::ideal_canonical_partition(temperature, volume, agents, k0)?
            }
            Ensemble::IsothermalIsobaric { temperature, pressure, agents } => {
                oracle::ideal_npt_partition(temperature, pressure, agents, k0)?
            }
            Ensemble::GrandCanonical { temperature, volume, mu } => {
                oracle::ideal_grand_mean_agents(temperature, volume, mu, k0)?.ln_z
            }
            Ensemble::Isolated { .. } => {
                return Err(Error::Incompatible("no partition function for the isolated ensemble".into()))
            }
        };
        Ok(ZResult { ln_z, ensemble: *spec, energy_id: "additive".into(), error_estimate: 0.0 })
    }
}

/// Family built from a canonical Z_{V,N}; the fixed-N and fixed-V members are
/// composed numerically.
pub struct ComposedFamily<F> {
    canonical: F,
    pub grand_n_max: usize,
}

impl<F> ComposedFamily<F>
where
    F: Fn(f64, f64, usize, f64) -> Result<ZResult>,
{
    /// `canonical(T, V, N, k0)`.
    pub fn new(canonical: F, grand_n_max: usize) -> Self {
        Self { canonical, grand_n_max }
    }
}

impl<F> LogPartition for ComposedFamily<F>
where
    F: Fn(f64, f64, usize, f64) -> Result<ZResult>,
{
    fn ln_z(&self, spec: &EnsembleSpec) -> Result<ZResult> {
        let k0 = spec.k0;
        match spec.ensemble {
            Ensemble::Canonical { temperature, volume, agents } => {
                (self.canonical)(temperature, volume, agents, k0)
            }
            Ensemble::IsothermalIsobaric { temperature, pressure, agents } => compose_npt_z(
                &|v| (self.canonical)(temperature, v, agents, k0),
                temperature,
                pressure,
                agents,
                k0,
            ),
            Ensemble::GrandCanonical { temperature, volume, mu } => compose_grand_z(
                &|n| (self.canonical)(temperature, volume, n, k0),
                temperature,
                volume,
                mu,
                k0,
                self.grand_n_max,
            ),
            Ensemble::Isolated { .. } => {
                Err(Error::Incompatible("no partition function for the isolated ensemble".into()))
            }
        }
    }
}

/// Family backed by direct quadrature of an energy functional.
///
/// For goods-independent functionals the money integral does not depend on V,
/// so it is computed once per (T, N) and reused across volumes.
pub fn quadrature_family(
    f: EnergyFunctional,
    q: QuadratureSpec,
) -> ComposedFamily<impl Fn(f64, f64, usize, f64) -> Result<ZResult>> {
    let cache: Mutex<HashMap<(u64, usize, u64), ZResult>> = Mutex::new(HashMap::new());
    ComposedFamily::new(
        move |t, v, n, k0| {
            if f.depends_on_goods() {
                return integrate_canonical_z(&f, t, v, n, k0, &q);
            }
            ensure_positive("volume", v)?;
            let key = (t.to_bits(), n, k0.to_bits());
            let hit = cache.lock().expect("cache poisoned").get(&key).cloned();
            let base = match hit {
                Some(z) => z,
                None => {
                    let z = integrate_canonical_z(&f, t, 1.0, n, k0, &q)?;
                    cache.lock().expect("cache poisoned").insert(key, z.clone());
                    z
                }
            };
            Ok(ZResult {
                ln_z: base.ln_z - oracle::ln_simplex_volume(1.0, n) + oracle::ln_simplex_volume(v, n),
                ensemble: EnsembleSpec { ensemble: Ensemble::Canonical { temperature: t, volume: v, agents: n }, k0 },
                ..base
            })
        },
        MAX_QUADRATURE_AGENTS,
    )
}

// Relative step for first derivatives of ln Z.
const FIRST_STEP: f64 = 1e-4;
// Outer step for derivatives of first-derivative quantities.
const SECOND_STEP: f64 = 1e-3;
// Two step sizes that disagree by more than this trigger Richardson extrapolation.
const FD_TOL: f64 = 1e-9;

fn step_for(x: f64, rel: f64, fallback_scale: f64) -> Result<f64> {
    let h = if x != 0.0 { rel * x.abs() } else { rel * fallback_scale };
    if !(h > 0.0) || x + h == x {
        return Err(Error::Domain(format!("finite-difference step underflows at {x}")));
    }
    Ok(h)
}

/// Central difference with a half-step cross-check.
fn central(g: &dyn Fn(f64) -> Result<f64>, x: f64, h: f64) -> Result<f64> {
    let d1 = (g(x + h)? - g(x - h)?) / (2.0 * h);
    let d2 = (g(x + 0.5 * h)? - g(x - 0.5 * h)?) / h;
    if (d1 - d2).abs() > 10.0 * FD_TOL * d2.abs().max(1.0) {
        Ok((4.0 * d2 - d1) / 3.0)
    } else {
        Ok(d2)
    }
}

fn second_central(g: &dyn Fn(f64) -> Result<f64>, x: f64, h: f64) -> Result<f64> {
    Ok((g(x + h)? - 2.0 * g(x)? + g(x - h)?) / (h * h))
}

struct Probe<'a> {
    family: &'a dyn LogPartition,
    spec: EnsembleSpec,
    kt: f64,
}

impl Probe<'_> {
    fn ln_z_at(&self, spec: &EnsembleSpec) -> Result<f64> {
        let z = self.family.ln_z(spec)?;
        Ok(z.ln_z)
    }

    fn along(&self, p: Param) -> impl Fn(f64) -> Result<f64> + '_ {
        move |x| {
            let s = self.spec.with_param(p, x).ok_or_else(|| missing(p))?;
            self.ln_z_at(&s)
        }
    }

    fn x(&self, p: Param) -> Result<f64> {
        self.spec.param(p).ok_or_else(|| missing(p))
    }

    fn d1(&self, p: Param) -> Result<f64> {
        let x = self.x(p)?;
        let h = step_for(x, FIRST_STEP, self.kt)?;
        let z = self.family.ln_z(&self.spec)?;
        // quadrature noise amplified by the step must stay well below the result
        let noise = z.error_estimate / h;
        let d = central(&self.along(p), x, h)?;
        if noise > 1e-4 * d.abs().max(1.0) {
            return Err(Error::UnmetTolerance { estimate: noise, tolerance: 1e-4 });
        }
        Ok(d)
    }

    fn d2(&self, p: Param) -> Result<f64> {
        let x = self.x(p)?;
        let h = step_for(x, SECOND_STEP, self.kt)?;
        second_central(&self.along(p), x, h)
    }
}

fn missing(p: Param) -> Error {
    Error::Incompatible(format!("ensemble has no {p:?} parameter"))
}

fn probe<'a>(family: &'a dyn LogPartition, spec: &EnsembleSpec) -> Result<Probe<'a>> {
    spec.validate()?;
    let kt = spec.kt().ok_or_else(|| Error::Incompatible("isolated ensemble has no temperature".into()))?;
    Ok(Probe { family, spec: *spec, kt })
}

fn helmholtz(family: &dyn LogPartition, spec: &EnsembleSpec) -> Result<f64> {
    Ok(-spec.kt().unwrap_or(f64::NAN) * family.ln_z(spec)?.ln_z)
}

/// mu = dF0/dN by a central difference in the integer agent count.
fn canonical_mu(family: &dyn LogPartition, spec: &EnsembleSpec, agents: usize) -> Option<f64> {
    let f = |n: usize| helmholtz(family, &spec.with_agents(n)?).ok();
    if agents >= 2 {
        Some(0.5 * (f(agents + 1)? - f(agents - 1)?))
    } else {
        Some(f(agents + 1)? - f(agents)?)
    }
}

/// Means, potential, price, financial potential and entropy from
/// log-derivatives of Z.
pub fn derive_observables(family: &dyn LogPartition, spec: &EnsembleSpec) -> Result<ThermoReport> {
    let pr = probe(family, spec)?;
    let kt = pr.kt;
    let t = spec.temperature().unwrap_or(f64::NAN);
    let ln_z = family.ln_z(spec)?.ln_z;
    let l_t = pr.d1(Param::Temperature)?;
    let potential = -kt * ln_z;
    let entropy = spec.k0 * ln_z + kt * l_t;
    let mut r = ThermoReport {
        temperature: Some(t),
        potential: Some(potential),
        entropy: Some(entropy),
        ..ThermoReport::default()
    };
    match spec.ensemble {
        Ensemble::Canonical { volume, agents, .. } => {
            r.mean_energy = kt * t * l_t;
            r.mean_volume = volume;
            r.mean_agents = agents as f64;
            r.pressure = Some(kt * pr.d1(Param::Volume)?);
            r.financial_potential = canonical_mu(family, spec, agents);
        }
        Ensemble::IsothermalIsobaric { pressure, agents, .. } => {
            let v = -kt * pr.d1(Param::Pressure)?;
            r.mean_volume = v;
            r.mean_energy = kt * t * l_t - pressure * v;
            r.mean_agents = agents as f64;
            r.pressure = Some(pressure);
            r.financial_potential = Some(potential / agents as f64);
        }
        Ensemble::GrandCanonical { volume, mu, .. } => {
            let n = kt * pr.d1(Param::Mu)?;
            r.mean_agents = n;
            r.mean_energy = kt * t * l_t + mu * n;
            r.mean_volume = volume;
            r.pressure = Some(-potential / volume);
            r.financial_potential = Some(mu);
        }
        Ensemble::Isolated { .. } => unreachable!("rejected by probe"),
    }
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fluctuations {
    pub var_energy: f64,
    pub var_volume: Option<f64>,
    pub var_agents: Option<f64>,
}

fn mean_energy(family: &dyn LogPartition, spec: &EnsembleSpec) -> Result<f64> {
    Ok(derive_observables(family, spec)?.mean_energy)
}

fn nonneg(what: &str, v: f64, scale: f64) -> Result<f64> {
    if v < -1e-6 * scale.abs().max(1e-300) {
        Err(Error::Degenerate(format!("negative {what} variance {v:e}: partition function too inaccurate")))
    } else {
        Ok(v.max(0.0))
    }
}

/// Variances from the derivative relations of each ensemble.
pub fn derive_fluctuations(family: &dyn LogPartition, spec: &EnsembleSpec) -> Result<Fluctuations> {
    let pr = probe(family, spec)?;
    let kt = pr.kt;
    let t = spec.temperature().unwrap_or(f64::NAN);
    // d E / d param by an outer central difference over the mean energy
    let de = |p: Param| -> Result<f64> {
        let x = pr.x(p)?;
        let h = step_for(x, SECOND_STEP, kt)?;
        let g = |y: f64| -> Result<f64> { mean_energy(family, &spec.with_param(p, y).ok_or_else(|| missing(p))?) };
        Ok((g(x + h)? - g(x - h)?) / (2.0 * h))
    };
    let e = mean_energy(family, spec)?;
    match spec.ensemble {
        Ensemble::Canonical { .. } => {
            let l_t = pr.d1(Param::Temperature)?;
            let l_tt = pr.d2(Param::Temperature)?;
            let var = kt * kt * (2.0 * t * l_t + t * t * l_tt);
            Ok(Fluctuations { var_energy: nonneg("energy", var, e * kt)?, var_volume: None, var_agents: None })
        }
        Ensemble::IsothermalIsobaric { pressure, .. } => {
            let var_e = kt * t * de(Param::Temperature)? + pressure * kt * de(Param::Pressure)?;
            let var_v = kt * kt * pr.d2(Param::Pressure)?;
            Ok(Fluctuations {
                var_energy: nonneg("energy", var_e, e * kt)?,
                var_volume: Some(nonneg("volume", var_v, 1.0)?),
                var_agents: None,
            })
        }
        Ensemble::GrandCanonical { mu, .. } => {
            let var_e = kt * t * de(Param::Temperature)? + mu * kt * de(Param::Mu)?;
            let var_n = kt * kt * pr.d2(Param::Mu)?;
            Ok(Fluctuations {
                var_energy: nonneg("energy", var_e, e * kt)?,
                var_volume: None,
                var_agents: Some(nonneg("agent-count", var_n, 1.0)?),
            })
        }
        Ensemble::Isolated { .. } => unreachable!("rejected by probe"),
    }
}

/// Where the Maxwell-type check takes its derivatives from.
#[derive(Clone, Copy)]
pub enum MaxwellSource<'a> {
    /// Analytic derivatives of the closed forms.
    IdealOracle,
    Numeric(&'a dyn LogPartition),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaxwellReport {
    pub at: EnsembleSpec,
    pub pressure: f64,
    /// T dp/dT.
    pub lhs: f64,
    /// p + dE/dV.
    pub rhs: f64,
    pub residual: f64,
    /// Residual of the cross-derivative identity dp/dN = -dmu/dV at fixed T;
    /// `None` when the neighbouring agent counts cannot be evaluated.
    pub cross_residual: Option<f64>,
}

impl MaxwellReport {
    pub fn relative_residual(&self) -> f64 {
        self.residual / self.pressure.abs()
    }
}

/// Residuals of T dp/dT = p + dE/dV and of the integrability of the
/// equations of state, in the canonical ensemble.
pub fn maxwell_check(source: MaxwellSource<'_>, spec: &EnsembleSpec) -> Result<MaxwellReport> {
    spec.validate()?;
    let Ensemble::Canonical { temperature: t, volume: v, agents: n } = spec.ensemble else {
        return Err(Error::Incompatible("Maxwell check needs a canonical spec".into()));
    };
    let k0 = spec.k0;
    match source {
        MaxwellSource::IdealOracle => {
            let dp_dt = k0 * (n as f64 - 1.0) / v;
            let p = t * dp_dt;
            let lhs = t * dp_dt;
            let de_dv = 0.0;
            let rhs = p + de_dv;
            let dp_dn = k0 * t / v;
            let dmu_dv = -k0 * t / v;
            let cross = dp_dn + dmu_dv;
            Ok(MaxwellReport { at: *spec, pressure: p, lhs, rhs, residual: (lhs - rhs).abs(), cross_residual: Some(cross.abs()) })
        }
        MaxwellSource::Numeric(family) => {
            let pressure_at = |s: &EnsembleSpec| -> Result<f64> {
                derive_observables(family, s)?.pressure.ok_or_else(|| missing(Param::Volume))
            };
            let p = pressure_at(spec)?;
            let ht = step_for(t, SECOND_STEP, 1.0)?;
            let hv = step_for(v, SECOND_STEP, 1.0)?;
            let at_t = |x: f64| spec.with_param(Param::Temperature, x).ok_or_else(|| missing(Param::Temperature));
            let at_v = |x: f64| spec.with_param(Param::Volume, x).ok_or_else(|| missing(Param::Volume));
            let dp_dt = (pressure_at(&at_t(t + ht)?)? - pressure_at(&at_t(t - ht)?)?) / (2.0 * ht);
            let de_dv = (mean_energy(family, &at_v(v + hv)?)? - mean_energy(family, &at_v(v - hv)?)?) / (2.0 * hv);
            let lhs = t * dp_dt;
            let rhs = p + de_dv;
            let cross = cross_residual(family, spec, n, v, hv);
            Ok(MaxwellReport { at: *spec, pressure: p, lhs, rhs, residual: (lhs - rhs).abs(), cross_residual: cross })
        }
    }
}

fn cross_residual(family: &dyn LogPartition, spec: &EnsembleSpec, n: usize, v: f64, hv: f64) -> Option<f64> {
    let p_at = |agents: usize| -> Option<f64> { derive_observables(family, &spec.with_agents(agents)?).ok()?.pressure };
    let dp_dn = if n >= 2 { 0.5 * (p_at(n + 1)? - p_at(n - 1)?) } else { p_at(n + 1)? - p_at(n)? };
    let mu_at = |vol: f64| -> Option<f64> { canonical_mu(family, &spec.with_param(Param::Volume, vol)?, n) };
    let dmu_dv = (mu_at(v + hv)? - mu_at(v - hv)?) / (2.0 * hv);
    Some((dp_dn + dmu_dv).abs())
}

/// Runs the check at every grid point.
pub fn maxwell_grid(source: MaxwellSource<'_>, grid: &[EnsembleSpec]) -> Vec<Result<MaxwellReport>> {
    grid.iter().map(|s| maxwell_check(source, s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::SharedPool;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn additive_matches_closed_form() {
        let q = QuadratureSpec::default();
        let z = integrate_canonical_z(&EnergyFunctional::Additive, 1.0, 2.0, 3, 1.0, &q).unwrap();
        assert!(rel(z.ln_z.exp(), 2.0) < 1e-6);
        let z = integrate_canonical_z(&EnergyFunctional::Additive, 1.0, 1.0, 1, 1.0, &q).unwrap();
        assert!((z.ln_z.exp() - 1.0).abs() < 1e-8);
        for n in 1..=MAX_QUADRATURE_AGENTS {
            let z = integrate_canonical_z(&EnergyFunctional::Additive, 2.0, 3.0, n, 1.0, &q).unwrap();
            let exact = oracle::ideal_canonical_partition(2.0, 3.0, n, 1.0).unwrap();
            assert!((z.ln_z - exact).abs() < 1e-9, "n={n}");
        }
    }

    #[test]
    fn composite_scheme_additive() {
        let q = QuadratureSpec::composite(64);
        let z = integrate_canonical_z(&EnergyFunctional::Additive, 1.0, 2.0, 3, 1.0, &q).unwrap();
        assert!(rel(z.ln_z.exp(), 2.0) < 1e-6);
    }

    #[test]
    fn guards() {
        let q = QuadratureSpec::default();
        assert!(matches!(
            integrate_canonical_z(&EnergyFunctional::Additive, 1.0, 1.0, 7, 1.0, &q),
            Err(Error::TooManyAgents { .. })
        ));
        assert!(integrate_canonical_z(&EnergyFunctional::Additive, 0.0, 1.0, 2, 1.0, &q).is_err());
        let few = QuadratureSpec { nodes_per_dim: 4, ..q };
        assert!(integrate_canonical_z(&EnergyFunctional::Additive, 1.0, 1.0, 2, 1.0, &few).is_err());
        let short = QuadratureSpec { money_cutoff: Some(5.0), ..QuadratureSpec::composite(32) };
        assert!(integrate_canonical_z(&EnergyFunctional::Additive, 1.0, 1.0, 2, 1.0, &short).is_err());
    }

    #[test]
    fn kinked_functional_flagged_by_laguerre() {
        // Laguerre cannot resolve the shared-pool kink; the estimate says so
        let f = EnergyFunctional::SharedPool(vec![SharedPool { members: vec![0, 1], amount: 1.0 }]);
        let q = QuadratureSpec::default();
        assert!(matches!(
            integrate_canonical_z(&f, 1.0, 1.0, 2, 1.0, &q),
            Err(Error::UnmetTolerance { .. })
        ));
    }

    #[test]
    fn shared_pool_against_closed_form_and_grid() {
        // two agents sharing c: Z_money = 2 - exp(-c) at k0 T = 1
        let c: f64 = 1.0;
        let f = EnergyFunctional::SharedPool(vec![SharedPool { members: vec![0, 1], amount: c }]);
        let q = QuadratureSpec::composite(64);
        let z = integrate_canonical_z(&f, 1.0, 1.0, 2, 1.0, &q).unwrap();
        let exact = 2.0 - (-c).exp();
        assert!(rel(z.ln_z.exp(), exact) < 1e-8, "{} vs {exact}", z.ln_z.exp());
        assert!((z.ln_z - exact.ln()).abs() <= 10.0 * z.error_estimate.max(1e-10));
        // brute-force midpoint grid, 10^4 nodes per dimension
        let cutoff = QuadratureSpec::default_cutoff(1.0, 2);
        let m = 10_000;
        let h = cutoff / m as f64;
        let mut sum = 0.0;
        for i in 0..m {
            let a = (i as f64 + 0.5) * h;
            for j in 0..m {
                let b = (j as f64 + 0.5) * h;
                sum += (-f.evaluate_unchecked(&[a, b], &[0.5, 0.5])).exp();
            }
        }
        let grid = sum * h * h;
        assert!(rel(z.ln_z.exp(), grid) < 1e-4, "{} vs grid {grid}", z.ln_z.exp());
    }

    #[test]
    fn npt_composition() {
        let q = QuadratureSpec::default();
        let f = EnergyFunctional::Additive;
        for (t, p, n, expect) in [(1.0, 1.0, 2usize, 1.0), (2.0, 1.0, 1, 4.0), (1.0, 2.0, 3, 0.125)] {
            let z = compose_npt_z(&|v| integrate_canonical_z(&f, t, v, n, 1.0, &q), t, p, n, 1.0).unwrap();
            assert!(rel(z.ln_z.exp(), expect) < 1e-6, "{t} {p} {n}");
        }
    }

    #[test]
    fn grand_composition() {
        let ideal = |n: usize| IdealFamily.ln_z(&EnsembleSpec::canonical(1.0, 9.0, n));
        let z = compose_grand_z(&ideal, 1.0, 9.0, 0.0, 1.0, 200).unwrap();
        assert!((z.ln_z - 9.0).abs() < 1e-9);
        assert!(z.error_estimate < 1e-12);
        assert!(compose_grand_z(&ideal, 1.0, 9.0, 0.0, 1.0, 8).is_err());
        // deep negative mu: dominated by the N = 1 term
        let ideal_small = |n: usize| IdealFamily.ln_z(&EnsembleSpec::canonical(1.0, 0.1, n));
        let z = compose_grand_z(&ideal_small, 1.0, 0.1, -40.0, 1.0, 6).unwrap();
        assert!(z.ln_z < -39.0);
    }

    #[test]
    fn grand_from_quadrature_small_volume() {
        let fam = quadrature_family(EnergyFunctional::Additive, QuadratureSpec::default());
        let spec = EnsembleSpec::grand_canonical(1.0, 0.1, -5.0);
        let r = derive_observables(&fam, &spec).unwrap();
        let a = (-5.0f64).exp();
        assert!(rel(r.mean_agents, 1.0 + a * 0.1) < 1e-8);
    }

    #[test]
    fn observables_from_quadrature() {
        let fam = quadrature_family(EnergyFunctional::Additive, QuadratureSpec::default());
        let r = derive_observables(&fam, &EnsembleSpec::canonical(1.0, 2.0, 3)).unwrap();
        assert!((r.mean_energy - 3.0).abs() < 1e-4);
        assert!(rel(r.pressure.unwrap(), 1.0) < 1e-6);
        let r = derive_observables(&fam, &EnsembleSpec::isothermal_isobaric(1.0, 2.0, 6)).unwrap();
        assert!((r.mean_volume - 3.0).abs() < 1e-4);
        let r = derive_observables(&IdealFamily, &EnsembleSpec::isothermal_isobaric(1.0, 2.0, 10)).unwrap();
        assert!((r.mean_volume - 5.0).abs() < 1e-4);
        let r = derive_observables(&IdealFamily, &EnsembleSpec::grand_canonical(1.0, 9.0, 0.0)).unwrap();
        assert!((r.mean_agents - 10.0).abs() < 1e-4);
        assert!(rel(r.pressure.unwrap(), 1.0) < 1e-12);
    }

    #[test]
    fn fluctuations() {
        let fam = quadrature_family(EnergyFunctional::Additive, QuadratureSpec::default());
        let f = derive_fluctuations(&fam, &EnsembleSpec::canonical(1.0, 2.0, 3)).unwrap();
        assert!((f.var_energy - 3.0).abs() < 1e-3, "{}", f.var_energy);
        let f = derive_fluctuations(&IdealFamily, &EnsembleSpec::isothermal_isobaric(1.0, 2.0, 10)).unwrap();
        assert!((f.var_volume.unwrap() - 2.5).abs() < 1e-3);
        let f = derive_fluctuations(&IdealFamily, &EnsembleSpec::grand_canonical(1.0, 9.0, 0.0)).unwrap();
        assert!((f.var_agents.unwrap() - 9.0).abs() < 1e-3);
        // energy and agent count are correlated in the grand ensemble
        assert!((f.var_energy - (10.0 + 9.0)).abs() < 1e-2, "{}", f.var_energy);
    }

    #[test]
    fn maxwell_ideal_exact() {
        for spec in [EnsembleSpec::canonical(1.0, 2.0, 3), EnsembleSpec::canonical(3.7, 0.3, 1000)] {
            let r = maxwell_check(MaxwellSource::IdealOracle, &spec).unwrap();
            assert_eq!(r.residual, 0.0);
            assert_eq!(r.cross_residual, Some(0.0));
        }
    }

    #[test]
    fn maxwell_numeric_grid() {
        let fam = quadrature_family(EnergyFunctional::Additive, QuadratureSpec::default());
        let grid: Vec<EnsembleSpec> =
            [0.5, 1.0, 2.0].iter().flat_map(|&t| [1.0, 3.0].map(|v| EnsembleSpec::canonical(t, v, 3))).collect();
        for r in maxwell_grid(MaxwellSource::Numeric(&fam), &grid) {
            let r = r.unwrap();
            assert!(r.relative_residual() < 1e-4, "{r:?}");
            assert!(r.cross_residual.unwrap() < 1e-4 * r.pressure, "{r:?}");
        }
        let pool = quadrature_family(
            EnergyFunctional::SharedPool(vec![SharedPool { members: vec![0, 1], amount: 1.0 }]),
            QuadratureSpec::composite(64),
        );
        let r = maxwell_check(MaxwellSource::Numeric(&pool), &EnsembleSpec::canonical(1.0, 1.0, 2)).unwrap();
        assert!(r.relative_residual() < 1e-3, "{r:?}");
    }

    #[test]
    fn maxwell_rejects_other_ensembles() {
        assert!(maxwell_check(MaxwellSource::IdealOracle, &EnsembleSpec::grand_canonical(1.0, 1.0, 0.0)).is_err());
    }
}
