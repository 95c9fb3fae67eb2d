//! Market microstates, the energy and volume functionals that map them to
//! totals, ensemble parameters, and temperature estimation.

use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{ensure_positive, Error, Result};

/// Money and goods held by each agent of a market.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketState {
    money: Vec<f64>,
    goods: Vec<f64>,
}

/// How totals are split across agents when building a market.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Allocation {
    Equal,
    /// Uniform on the simplex of allocations (independent splits of money and goods).
    Random { seed: u64 },
}

impl MarketState {
    pub fn new(money: Vec<f64>, goods: Vec<f64>) -> Result<Self> {
        if money.len() != goods.len() {
            return Err(Error::LengthMismatch { money: money.len(), goods: goods.len() });
        }
        for &m in &money {
            check_holding("money", m)?;
        }
        for &g in &goods {
            check_holding("goods", g)?;
        }
        Ok(Self { money, goods })
    }

    /// An agent-free market. Valid, with E = V = 0.
    pub fn empty() -> Self {
        Self { money: Vec::new(), goods: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.money.len()
    }

    pub fn is_empty(&self) -> bool {
        self.money.is_empty()
    }

    pub fn money(&self) -> &[f64] {
        &self.money
    }

    pub fn goods(&self) -> &[f64] {
        &self.goods
    }

    pub fn total_money(&self) -> f64 {
        self.money.iter().sum()
    }

    pub fn total_goods(&self) -> f64 {
        self.goods.iter().sum()
    }

    /// Places two markets side by side.
    pub fn concat(&self, other: &MarketState) -> MarketState {
        let mut money = self.money.clone();
        money.extend_from_slice(&other.money);
        let mut goods = self.goods.clone();
        goods.extend_from_slice(&other.goods);
        MarketState { money, goods }
    }

    // Sampler-side mutation. Callers uphold non-negativity.
    pub(crate) fn money_mut(&mut self) -> &mut Vec<f64> {
        &mut self.money
    }

    pub(crate) fn goods_mut(&mut self) -> &mut Vec<f64> {
        &mut self.goods
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Vec<f64>, &mut Vec<f64>) {
        (&mut self.money, &mut self.goods)
    }

    pub(crate) fn push_agent(&mut self, money: f64, goods: f64) {
        self.money.push(money);
        self.goods.push(goods);
    }

    pub(crate) fn pop_agent(&mut self) -> Option<(f64, f64)> {
        Some((self.money.pop()?, self.goods.pop()?))
    }
}

fn check_holding(what: &'static str, value: f64) -> Result<()> {
    if value.is_nan() || value < 0.0 || value.is_infinite() {
        Err(Error::Negative { what, value })
    } else {
        Ok(())
    }
}

/// Builds a market of `agents` agents holding the given totals.
pub fn new_market(
    agents: usize,
    total_money: f64,
    total_goods: f64,
    allocation: Allocation,
) -> Result<MarketState> {
    if agents == 0 {
        return Err(Error::ZeroAgents);
    }
    check_holding("total money", total_money)?;
    check_holding("total goods", total_goods)?;
    let (money, goods) = match allocation {
        Allocation::Equal => (
            vec![total_money / agents as f64; agents],
            vec![total_goods / agents as f64; agents],
        ),
        Allocation::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let money = simplex_split(&mut rng, agents, total_money);
            let goods = simplex_split(&mut rng, agents, total_goods);
            (money, goods)
        }
    };
    MarketState::new(money, goods)
}

/// Uniform point on the simplex of `n` non-negative parts summing to `total`.
pub(crate) fn simplex_split<R: rand::Rng + ?Sized>(rng: &mut R, n: usize, total: f64) -> Vec<f64> {
    let mut parts: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let sum: f64 = parts.iter().sum();
    if sum > 0.0 {
        let scale = total / sum;
        parts.iter_mut().for_each(|p| *p *= scale);
    } else {
        parts.iter_mut().for_each(|p| *p = total / n as f64);
    }
    parts
}

/// A group of agents that jointly dispose of `amount` of money.
///
/// Each member's balance includes its view of the pool; at system level the
/// shared part is counted once.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedPool {
    pub members: Vec<usize>,
    pub amount: f64,
}

impl SharedPool {
    // Money actually shared: capped by the poorest member.
    fn shared(&self, money: &[f64]) -> f64 {
        self.members.iter().fold(self.amount, |acc, &i| acc.min(money[i]))
    }

    fn correction(&self, money: &[f64]) -> f64 {
        (self.members.len().saturating_sub(1)) as f64 * self.shared(money)
    }
}

type EnergyFn = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;
type VolumeFn = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;

/// User-supplied energy map.
#[derive(Clone)]
pub struct CustomEnergy {
    pub id: String,
    pub agents: Option<usize>,
    pub uses_goods: bool,
    eval: Arc<EnergyFn>,
}

impl CustomEnergy {
    pub fn new(
        id: impl Into<String>,
        agents: Option<usize>,
        uses_goods: bool,
        eval: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { id: id.into(), agents, uses_goods, eval: Arc::new(eval) }
    }
}

impl fmt::Debug for CustomEnergy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomEnergy")
            .field("id", &self.id)
            .field("agents", &self.agents)
            .field("uses_goods", &self.uses_goods)
            .finish_non_exhaustive()
    }
}

/// Map from a microstate to total market energy (money).
#[derive(Debug, Clone)]
pub enum EnergyFunctional {
    Additive,
    SharedPool(Vec<SharedPool>),
    Custom(CustomEnergy),
}

impl EnergyFunctional {
    /// Validates the functional against a market of `agents` agents.
    pub fn check_size(&self, agents: usize) -> Result<()> {
        match self {
            EnergyFunctional::Additive => Ok(()),
            EnergyFunctional::SharedPool(pools) => {
                let mut seen = vec![false; agents];
                for pool in pools {
                    check_holding("pool amount", pool.amount)?;
                    for &m in &pool.members {
                        if m >= agents {
                            return Err(Error::SizeMismatch { expected: m + 1, actual: agents });
                        }
                        if seen[m] {
                            return Err(Error::Domain(format!(
                                "agent {m} belongs to more than one pool"
                            )));
                        }
                        seen[m] = true;
                    }
                }
                Ok(())
            }
            EnergyFunctional::Custom(c) => match c.agents {
                Some(n) if n != agents => Err(Error::SizeMismatch { expected: n, actual: agents }),
                _ => Ok(()),
            },
        }
    }

    pub fn evaluate(&self, money: &[f64], goods: &[f64]) -> Result<f64> {
        self.check_size(money.len())?;
        Ok(self.evaluate_unchecked(money, goods))
    }

    pub(crate) fn evaluate_unchecked(&self, money: &[f64], goods: &[f64]) -> f64 {
        match self {
            EnergyFunctional::Additive => money.iter().sum(),
            EnergyFunctional::SharedPool(pools) => {
                let raw: f64 = money.iter().sum();
                raw - pools.iter().map(|p| p.correction(money)).sum::<f64>()
            }
            EnergyFunctional::Custom(c) => (c.eval)(money, goods),
        }
    }

    /// Energy change when agent `i`'s money becomes `new_value`.
    pub(crate) fn money_delta(&self, money: &mut [f64], goods: &[f64], i: usize, new_value: f64) -> f64 {
        let old_value = money[i];
        match self {
            EnergyFunctional::Additive => new_value - old_value,
            EnergyFunctional::SharedPool(pools) => {
                let raw = new_value - old_value;
                match pools.iter().find(|p| p.members.contains(&i)) {
                    None => raw,
                    Some(pool) => {
                        let before = pool.correction(money);
                        money[i] = new_value;
                        let after = pool.correction(money);
                        money[i] = old_value;
                        raw - (after - before)
                    }
                }
            }
            EnergyFunctional::Custom(c) => {
                let before = (c.eval)(money, goods);
                money[i] = new_value;
                let after = (c.eval)(money, goods);
                money[i] = old_value;
                after - before
            }
        }
    }

    /// Energy change for a set of goods updates `(agent, new_value)`.
    pub(crate) fn goods_delta(&self, money: &[f64], goods: &mut [f64], updates: &[(usize, f64)]) -> f64 {
        let EnergyFunctional::Custom(c) = self else {
            return 0.0;
        };
        if !c.uses_goods {
            return 0.0;
        }
        let before = (c.eval)(money, goods);
        let saved: Vec<f64> = updates.iter().map(|&(i, _)| goods[i]).collect();
        for &(i, v) in updates {
            goods[i] = v;
        }
        let after = (c.eval)(money, goods);
        for (&(i, _), v) in updates.iter().zip(saved) {
            goods[i] = v;
        }
        after - before
    }

    pub fn depends_on_goods(&self) -> bool {
        matches!(self, EnergyFunctional::Custom(c) if c.uses_goods)
    }

    pub fn is_additive(&self) -> bool {
        matches!(self, EnergyFunctional::Additive)
    }

    /// Money levels where the integrand has a kink along a coordinate axis.
    pub(crate) fn money_breakpoints(&self) -> Vec<f64> {
        match self {
            EnergyFunctional::SharedPool(pools) => {
                pools.iter().map(|p| p.amount).filter(|&a| a > 0.0).collect()
            }
            _ => Vec::new(),
        }
    }

    pub fn id(&self) -> String {
        match self {
            EnergyFunctional::Additive => "additive".into(),
            EnergyFunctional::SharedPool(pools) => {
                let parts: Vec<String> = pools
                    .iter()
                    .map(|p| {
                        let m: Vec<String> = p.members.iter().map(|i| i.to_string()).collect();
                        format!("{}@{}", p.amount, m.join("+"))
                    })
                    .collect();
                format!("shared-pool[{}]", parts.join(","))
            }
            EnergyFunctional::Custom(c) => format!("custom:{}", c.id),
        }
    }
}

/// User-supplied volume map.
#[derive(Clone)]
pub struct CustomVolume {
    pub id: String,
    pub agents: Option<usize>,
    eval: Arc<VolumeFn>,
}

impl CustomVolume {
    pub fn new(
        id: impl Into<String>,
        agents: Option<usize>,
        eval: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { id: id.into(), agents, eval: Arc::new(eval) }
    }
}

impl fmt::Debug for CustomVolume {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomVolume").field("id", &self.id).finish_non_exhaustive()
    }
}

/// Map from a microstate to total market volume (goods).
#[derive(Debug, Clone)]
pub enum VolumeFunctional {
    Additive,
    Custom(CustomVolume),
}

impl VolumeFunctional {
    pub fn evaluate(&self, money: &[f64], goods: &[f64]) -> Result<f64> {
        match self {
            VolumeFunctional::Additive => Ok(goods.iter().sum()),
            VolumeFunctional::Custom(c) => match c.agents {
                Some(n) if n != goods.len() => {
                    Err(Error::SizeMismatch { expected: n, actual: goods.len() })
                }
                _ => Ok((c.eval)(money, goods)),
            },
        }
    }

    pub fn is_additive(&self) -> bool {
        matches!(self, VolumeFunctional::Additive)
    }

    pub fn id(&self) -> String {
        match self {
            VolumeFunctional::Additive => "additive".into(),
            VolumeFunctional::Custom(c) => format!("custom:{}", c.id),
        }
    }
}

pub fn total_energy(state: &MarketState, f: &EnergyFunctional) -> Result<f64> {
    f.evaluate(state.money(), state.goods())
}

pub fn total_volume(state: &MarketState, g: &VolumeFunctional) -> Result<f64> {
    g.evaluate(state.money(), state.goods())
}

/// Which macroscopic parameters are held fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ensemble {
    Isolated { energy: f64, volume: f64, agents: usize },
    Canonical { temperature: f64, volume: f64, agents: usize },
    IsothermalIsobaric { temperature: f64, pressure: f64, agents: usize },
    GrandCanonical { temperature: f64, volume: f64, mu: f64 },
}

/// Continuous ensemble parameters that can be varied for finite differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    Temperature,
    Volume,
    Pressure,
    Mu,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleSpec {
    pub ensemble: Ensemble,
    pub k0: f64,
}

pub const DEFAULT_K0: f64 = 1.0;

impl EnsembleSpec {
    pub fn new(ensemble: Ensemble, k0: f64) -> Result<Self> {
        let spec = Self { ensemble, k0 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn canonical(temperature: f64, volume: f64, agents: usize) -> Self {
        Self { ensemble: Ensemble::Canonical { temperature, volume, agents }, k0: DEFAULT_K0 }
    }

    pub fn isothermal_isobaric(temperature: f64, pressure: f64, agents: usize) -> Self {
        Self {
            ensemble: Ensemble::IsothermalIsobaric { temperature, pressure, agents },
            k0: DEFAULT_K0,
        }
    }

    pub fn grand_canonical(temperature: f64, volume: f64, mu: f64) -> Self {
        Self { ensemble: Ensemble::GrandCanonical { temperature, volume, mu }, k0: DEFAULT_K0 }
    }

    pub fn isolated(energy: f64, volume: f64, agents: usize) -> Self {
        Self { ensemble: Ensemble::Isolated { energy, volume, agents }, k0: DEFAULT_K0 }
    }

    pub fn with_k0(mut self, k0: f64) -> Self {
        self.k0 = k0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure_positive("k0", self.k0)?;
        let agents_ok = |n: usize| if n == 0 { Err(Error::ZeroAgents) } else { Ok(()) };
        match self.ensemble {
            Ensemble::Isolated { energy, volume, agents } => {
                ensure_positive("energy", energy)?;
                ensure_positive("volume", volume)?;
                agents_ok(agents)
            }
            Ensemble::Canonical { temperature, volume, agents } => {
                ensure_positive("temperature", temperature)?;
                ensure_positive("volume", volume)?;
                agents_ok(agents)
            }
            Ensemble::IsothermalIsobaric { temperature, pressure, agents } => {
                ensure_positive("temperature", temperature)?;
                ensure_positive("pressure", pressure)?;
                agents_ok(agents)
            }
            Ensemble::GrandCanonical { temperature, volume, mu } => {
                ensure_positive("temperature", temperature)?;
                ensure_positive("volume", volume)?;
                if mu.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Domain(format!("mu must be finite, got {mu}")))
                }
            }
        }
    }

    pub fn temperature(&self) -> Option<f64> {
        match self.ensemble {
            Ensemble::Isolated { .. } => None,
            Ensemble::Canonical { temperature, .. }
            | Ensemble::IsothermalIsobaric { temperature, .. }
            | Ensemble::GrandCanonical { temperature, .. } => Some(temperature),
        }
    }

    /// k0 * T, the natural money scale.
    pub fn kt(&self) -> Option<f64> {
        self.temperature().map(|t| t * self.k0)
    }

    pub fn agents(&self) -> Option<usize> {
        match self.ensemble {
            Ensemble::Isolated { agents, .. }
            | Ensemble::Canonical { agents, .. }
            | Ensemble::IsothermalIsobaric { agents, .. } => Some(agents),
            Ensemble::GrandCanonical { .. } => None,
        }
    }

    pub fn volume(&self) -> Option<f64> {
        match self.ensemble {
            Ensemble::Isolated { volume, .. }
            | Ensemble::Canonical { volume, .. }
            | Ensemble::GrandCanonical { volume, .. } => Some(volume),
            Ensemble::IsothermalIsobaric { .. } => None,
        }
    }

    pub fn param(&self, p: Param) -> Option<f64> {
        match (p, self.ensemble) {
            (Param::Temperature, _) => self.temperature(),
            (Param::Volume, _) => self.volume(),
            (Param::Pressure, Ensemble::IsothermalIsobaric { pressure, .. }) => Some(pressure),
            (Param::Mu, Ensemble::GrandCanonical { mu, .. }) => Some(mu),
            _ => None,
        }
    }

    /// Copy with one continuous parameter replaced.
    pub fn with_param(&self, p: Param, value: f64) -> Option<Self> {
        let mut out = *self;
        match (p, &mut out.ensemble) {
            (Param::Temperature, Ensemble::Canonical { temperature, .. })
            | (Param::Temperature, Ensemble::IsothermalIsobaric { temperature, .. })
            | (Param::Temperature, Ensemble::GrandCanonical { temperature, .. }) => {
                *temperature = value
            }
            (Param::Volume, Ensemble::Isolated { volume, .. })
            | (Param::Volume, Ensemble::Canonical { volume, .. })
            | (Param::Volume, Ensemble::GrandCanonical { volume, .. }) => *volume = value,
            (Param::Pressure, Ensemble::IsothermalIsobaric { pressure, .. }) => *pressure = value,
            (Param::Mu, Ensemble::GrandCanonical { mu, .. }) => *mu = value,
            _ => return None,
        }
        Some(out)
    }

    /// Copy with the agent count replaced (fixed-N ensembles only).
    pub fn with_agents(&self, n: usize) -> Option<Self> {
        let mut out = *self;
        match &mut out.ensemble {
            Ensemble::Isolated { agents, .. }
            | Ensemble::Canonical { agents, .. }
            | Ensemble::IsothermalIsobaric { agents, .. } => *agents = n,
            Ensemble::GrandCanonical { .. } => return None,
        }
        Some(out)
    }

    pub fn kind(&self) -> &'static str {
        match self.ensemble {
            Ensemble::Isolated { .. } => "isolated",
            Ensemble::Canonical { .. } => "canonical",
            Ensemble::IsothermalIsobaric { .. } => "isothermal-isobaric",
            Ensemble::GrandCanonical { .. } => "grand-canonical",
        }
    }
}

/// Estimated thermodynamic quantities, from a trace or from a partition function.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ThermoReport {
    pub mean_energy: f64,
    pub mean_volume: f64,
    pub mean_agents: f64,
    pub var_energy: f64,
    pub var_volume: f64,
    pub var_agents: f64,
    pub stderr_energy: f64,
    pub stderr_volume: f64,
    pub stderr_agents: f64,
    pub pressure: Option<f64>,
    pub temperature: Option<f64>,
    pub financial_potential: Option<f64>,
    pub entropy: Option<f64>,
    /// F0, G0 or Omega0 depending on the ensemble.
    pub potential: Option<f64>,
    pub sample_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TemperatureMethod {
    /// T = E / (k0 N).
    MeanMoney,
    /// T = p V / (k0 N) at a given mean price.
    EquationOfState { pressure: f64 },
}

pub fn estimate_temperature(state: &MarketState, k0: f64, method: TemperatureMethod) -> Result<f64> {
    if state.is_empty() {
        return Err(Error::EmptyMarket);
    }
    ensure_positive("k0", k0)?;
    let n = state.len() as f64;
    match method {
        TemperatureMethod::MeanMoney => Ok(state.total_money() / (k0 * n)),
        TemperatureMethod::EquationOfState { pressure } => {
            ensure_positive("pressure", pressure)?;
            Ok(pressure * state.total_goods() / (k0 * n))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_split() {
        let m = new_market(2, 10.0, 4.0, Allocation::Equal).unwrap();
        assert_eq!(m.money(), &[5.0, 5.0]);
        assert_eq!(m.goods(), &[2.0, 2.0]);
        let m = new_market(1, 7.0, 0.0, Allocation::Equal).unwrap();
        assert_eq!(m.money(), &[7.0]);
        assert_eq!(m.goods(), &[0.0]);
    }

    #[test]
    fn random_split_sums() {
        let m = new_market(1000, 1000.0, 0.0, Allocation::Random { seed: 42 }).unwrap();
        let direct: f64 = m.money().iter().sum();
        assert!((direct - 1000.0).abs() <= 1e-9 * 1000.0);
        assert!(m.money().iter().all(|&x| x >= 0.0));
        assert!(m.goods().iter().all(|&x| x == 0.0));
        let again = new_market(1000, 1000.0, 0.0, Allocation::Random { seed: 42 }).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn construction_errors() {
        assert!(matches!(new_market(0, 1.0, 1.0, Allocation::Equal), Err(Error::ZeroAgents)));
        assert!(matches!(new_market(3, -1.0, 1.0, Allocation::Equal), Err(Error::Negative { .. })));
        assert!(matches!(new_market(3, 1.0, -1.0, Allocation::Equal), Err(Error::Negative { .. })));
        assert!(MarketState::new(vec![1.0], vec![]).is_err());
        assert!(MarketState::new(vec![-1.0], vec![0.0]).is_err());
    }

    #[test]
    fn totals() {
        let s = MarketState::new(vec![1.0, 2.0, 3.0], vec![0.5, 1.5, 3.0]).unwrap();
        assert_eq!(total_energy(&s, &EnergyFunctional::Additive).unwrap(), 6.0);
        assert_eq!(total_volume(&s, &VolumeFunctional::Additive).unwrap(), 5.0);
        let e = MarketState::empty();
        assert_eq!(total_energy(&e, &EnergyFunctional::Additive).unwrap(), 0.0);
        let z = MarketState::new(vec![0.0; 4], vec![0.0; 4]).unwrap();
        assert_eq!(total_volume(&z, &VolumeFunctional::Additive).unwrap(), 0.0);
        let g = MarketState::new(vec![0.0, 0.0], vec![2.0, 2.0]).unwrap();
        assert_eq!(total_volume(&g, &VolumeFunctional::Additive).unwrap(), 4.0);
    }

    #[test]
    fn shared_pool_counted_once() {
        let s = MarketState::new(vec![5.0, 5.0], vec![0.0, 0.0]).unwrap();
        let f = EnergyFunctional::SharedPool(vec![SharedPool { members: vec![0, 1], amount: 2.0 }]);
        assert_eq!(total_energy(&s, &f).unwrap(), 8.0);
        // shared part capped by the poorest member keeps E >= 0
        let poor = MarketState::new(vec![0.5, 5.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(total_energy(&poor, &f).unwrap(), 5.0);
    }

    #[test]
    fn shared_pool_size_mismatch() {
        let s = MarketState::new(vec![5.0], vec![0.0]).unwrap();
        let f = EnergyFunctional::SharedPool(vec![SharedPool { members: vec![0, 1], amount: 2.0 }]);
        assert!(matches!(total_energy(&s, &f), Err(Error::SizeMismatch { .. })));
        let overlap = EnergyFunctional::SharedPool(vec![
            SharedPool { members: vec![0, 1], amount: 1.0 },
            SharedPool { members: vec![1, 2], amount: 1.0 },
        ]);
        assert!(overlap.check_size(3).is_err());
    }

    #[test]
    fn custom_size_mismatch() {
        let f = EnergyFunctional::Custom(CustomEnergy::new("sq", Some(2), false, |m, _| {
            m.iter().map(|x| x * x).sum()
        }));
        let s = MarketState::new(vec![1.0, 2.0, 3.0], vec![0.0; 3]).unwrap();
        assert!(matches!(total_energy(&s, &f), Err(Error::SizeMismatch { .. })));
    }

    #[test]
    fn incremental_deltas_match_full_evaluation() {
        let f = EnergyFunctional::SharedPool(vec![SharedPool { members: vec![0, 2], amount: 1.5 }]);
        let mut money = vec![2.0, 3.0, 1.0, 4.0];
        let goods = vec![0.0; 4];
        for (i, new) in [(0, 0.2), (2, 5.0), (1, 0.0), (3, 9.0)] {
            let before = f.evaluate(&money, &goods).unwrap();
            let d = f.money_delta(&mut money, &goods, i, new);
            money[i] = new;
            let after = f.evaluate(&money, &goods).unwrap();
            assert!((after - before - d).abs() < 1e-12);
        }
    }

    #[test]
    fn temperature_estimates() {
        let s = new_market(100, 5000.0, 0.0, Allocation::Random { seed: 3 }).unwrap();
        let t = estimate_temperature(&s, 1.0, TemperatureMethod::MeanMoney).unwrap();
        assert!((t - 50.0).abs() < 1e-9);
        let s = new_market(100, 10.0, 100.0, Allocation::Equal).unwrap();
        let t = estimate_temperature(&s, 1.0, TemperatureMethod::EquationOfState { pressure: 1.0 })
            .unwrap();
        assert!((t - 1.0).abs() < 1e-12);
        let s = MarketState::new(vec![3.0], vec![0.0]).unwrap();
        assert_eq!(estimate_temperature(&s, 3.0, TemperatureMethod::MeanMoney).unwrap(), 1.0);
        assert!(matches!(
            estimate_temperature(&MarketState::empty(), 1.0, TemperatureMethod::MeanMoney),
            Err(Error::EmptyMarket)
        ));
        assert!(estimate_temperature(&s, 1.0, TemperatureMethod::EquationOfState { pressure: 0.0 })
            .is_err());
    }

    #[test]
    fn concatenation_is_extensive() {
        let a = new_market(50, 73.0, 20.0, Allocation::Random { seed: 9 }).unwrap();
        let b = a.concat(&a);
        let f = EnergyFunctional::Additive;
        let g = VolumeFunctional::Additive;
        let (ea, eb) = (total_energy(&a, &f).unwrap(), total_energy(&b, &f).unwrap());
        let (va, vb) = (total_volume(&a, &g).unwrap(), total_volume(&b, &g).unwrap());
        assert!((eb - 2.0 * ea).abs() <= 1e-12 * ea);
        assert!((vb - 2.0 * va).abs() <= 1e-12 * va);
        let ta = estimate_temperature(&a, 1.0, TemperatureMethod::MeanMoney).unwrap();
        let tb = estimate_temperature(&b, 1.0, TemperatureMethod::MeanMoney).unwrap();
        assert!((ta - tb).abs() <= 1e-12 * ta);
    }

    #[test]
    fn spec_validation() {
        assert!(EnsembleSpec::canonical(1.0, 1.0, 1).validate().is_ok());
        assert!(EnsembleSpec::canonical(0.0, 1.0, 1).validate().is_err());
        assert!(EnsembleSpec::canonical(1.0, 1.0, 0).validate().is_err());
        assert!(EnsembleSpec::grand_canonical(1.0, 1.0, -3.0).validate().is_ok());
        assert!(EnsembleSpec::isothermal_isobaric(1.0, -1.0, 2).validate().is_err());
        assert!(EnsembleSpec::canonical(1.0, 1.0, 1).with_k0(0.0).validate().is_err());
        let s = EnsembleSpec::canonical(1.0, 2.0, 3);
        assert_eq!(s.with_param(Param::Volume, 4.0).unwrap().volume(), Some(4.0));
        assert!(s.with_param(Param::Mu, 0.0).is_none());
    }
}
