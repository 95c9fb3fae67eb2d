//! Python bindings: closed forms, markets, chains, heat flow and the
//! acceptance suite.

use std::collections::BTreeMap;
use std::path::PathBuf;

use market_thermo::mc::{self, kinetic_step};
use market_thermo::oracle;
use market_thermo::stats::ks_exponential;
use market_thermo::thermo::{heat_flow_experiment, second_law_check, CoupledSpec, MarketConfig};
use market_thermo::{
    run_chain, run_experiment, summarize, verify_suite, Allocation, ChainConfig, Dynamics, EnergyFunctional,
    EnsembleSpec, Error, ExchangeRule, ExperimentConfig, MarketState, Scale, ThermoReport, VerifyOptions,
    VolumeFunctional,
};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyRuntimeError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

#[pyfunction]
#[pyo3(signature = (t, v, n, k0 = 1.0))]
fn ideal_ln_z(t: f64, v: f64, n: usize, k0: f64) -> PyResult<f64> {
    oracle::ideal_canonical_partition(t, v, n, k0).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (t, v, n, k0 = 1.0, large_n = false))]
fn ideal_pressure(t: f64, v: f64, n: usize, k0: f64, large_n: bool) -> PyResult<f64> {
    let form = if large_n { oracle::EosForm::LargeN } else { oracle::EosForm::Exact };
    oracle::ideal_eos_pressure(t, v, n, k0, form).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (t, n, k0 = 1.0))]
fn ideal_mean_energy(t: f64, n: usize, k0: f64) -> PyResult<f64> {
    oracle::ideal_mean_energy(t, n, k0).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (t, v, n, k0 = 1.0))]
fn ideal_entropy(t: f64, v: f64, n: usize, k0: f64) -> PyResult<f64> {
    oracle::ideal_entropy(t, v, n, k0).map_err(py_err)
}

/// (mean, variance) of V at fixed (T, p, N).
#[pyfunction]
#[pyo3(signature = (t, p, n, k0 = 1.0))]
fn ideal_npt_volume(t: f64, p: f64, n: usize, k0: f64) -> PyResult<(f64, f64)> {
    Ok((
        oracle::ideal_npt_mean_volume(t, p, n, k0).map_err(py_err)?,
        oracle::ideal_npt_volume_variance(t, p, n, k0).map_err(py_err)?,
    ))
}

/// (mean, variance) of N at fixed (T, V, mu).
#[pyfunction]
#[pyo3(signature = (t, v, mu, k0 = 1.0))]
fn ideal_grand_agents(t: f64, v: f64, mu: f64, k0: f64) -> PyResult<(f64, f64)> {
    let occ = oracle::ideal_grand_mean_agents(t, v, mu, k0).map_err(py_err)?;
    Ok((occ.mean_agents, occ.var_agents))
}

/// A market of agents holding money and goods.
#[pyclass(name = "Market", skip_from_py_object)]
#[derive(Clone)]
struct PyMarket {
    state: MarketState,
}

#[pymethods]
impl PyMarket {
    /// Equal split of the totals, or a uniform random split when `seed` is given.
    #[new]
    #[pyo3(signature = (agents, total_money, total_goods, seed = None))]
    fn new(agents: usize, total_money: f64, total_goods: f64, seed: Option<u64>) -> PyResult<Self> {
        let alloc = match seed {
            Some(seed) => Allocation::Random { seed },
            None => Allocation::Equal,
        };
        let state = market_thermo::new_market(agents, total_money, total_goods, alloc).map_err(py_err)?;
        Ok(Self { state })
    }

    fn __len__(&self) -> usize {
        self.state.len()
    }

    fn money(&self) -> Vec<f64> {
        self.state.money().to_vec()
    }

    fn goods(&self) -> Vec<f64> {
        self.state.goods().to_vec()
    }

    fn total_money(&self) -> f64 {
        self.state.total_money()
    }

    fn total_goods(&self) -> f64 {
        self.state.total_goods()
    }

    /// Runs `steps` loss-free kinetic exchanges in place.
    #[pyo3(signature = (steps, seed, goods_exchange = false))]
    fn kinetic(&mut self, py: Python<'_>, steps: u64, seed: u64, goods_exchange: bool) -> PyResult<()> {
        let rule = if goods_exchange { ExchangeRule::default().with_goods() } else { ExchangeRule::default() };
        let state = &mut self.state;
        py.detach(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..steps {
                kinetic_step(state, &rule, &mut rng)?;
            }
            Ok(())
        })
        .map_err(py_err)
    }

    /// KS distance of the money distribution from an exponential with the
    /// market's mean.
    fn ks_exponential(&self) -> PyResult<f64> {
        let mean = self.state.total_money() / self.state.len() as f64;
        ks_exponential(self.state.money(), mean).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Market(agents={}, money={}, goods={})",
            self.state.len(),
            self.state.total_money(),
            self.state.total_goods()
        )
    }
}

fn report_dict(r: &ThermoReport) -> BTreeMap<String, f64> {
    let mut d = BTreeMap::new();
    for (k, v) in [
        ("mean_energy", r.mean_energy),
        ("mean_volume", r.mean_volume),
        ("mean_agents", r.mean_agents),
        ("var_energy", r.var_energy),
        ("var_volume", r.var_volume),
        ("var_agents", r.var_agents),
        ("stderr_energy", r.stderr_energy),
        ("stderr_volume", r.stderr_volume),
        ("stderr_agents", r.stderr_agents),
        ("sample_count", r.sample_count as f64),
    ] {
        d.insert(k.to_string(), v);
    }
    for (k, v) in [("pressure", r.pressure), ("temperature", r.temperature), ("financial_potential", r.financial_potential)]
    {
        if let Some(v) = v {
            d.insert(k.to_string(), v);
        }
    }
    d
}

fn chain(
    py: Python<'_>,
    market: &PyMarket,
    spec: EnsembleSpec,
    cfg: ChainConfig,
) -> PyResult<BTreeMap<String, f64>> {
    let state = market.state.clone();
    py.detach(move || {
        let tr = run_chain(&state, &spec, &EnergyFunctional::Additive, &VolumeFunctional::Additive, &Dynamics::Metropolis, &cfg)?;
        let mut d = report_dict(&summarize(&tr)?);
        if cfg.record_probe {
            let p = mc::probe_pressure(&tr)?;
            d.insert("probe_pressure".into(), p.value);
            d.insert("probe_pressure_stderr".into(), p.stderr);
        }
        Ok(d)
    })
    .map_err(py_err)
}

/// Metropolis chain at fixed (T, V, N); V and N come from `market`.
#[pyfunction]
#[pyo3(signature = (market, temperature, steps, burn_in, seed, thin = 10, replicas = 1, k0 = 1.0))]
#[allow(clippy::too_many_arguments)]
fn canonical_chain(
    py: Python<'_>,
    market: &PyMarket,
    temperature: f64,
    steps: u64,
    burn_in: u64,
    seed: u64,
    thin: u64,
    replicas: usize,
    k0: f64,
) -> PyResult<BTreeMap<String, f64>> {
    let spec = EnsembleSpec::canonical(temperature, market.state.total_goods(), market.state.len()).with_k0(k0);
    let cfg = ChainConfig::new(steps, burn_in, thin, seed).with_replicas(replicas).with_probe();
    chain(py, market, spec, cfg)
}

/// Metropolis chain at fixed (T, p, N).
#[pyfunction]
#[pyo3(signature = (market, temperature, pressure, steps, burn_in, seed, thin = 5, replicas = 1, k0 = 1.0))]
#[allow(clippy::too_many_arguments)]
fn npt_chain(
    py: Python<'_>,
    market: &PyMarket,
    temperature: f64,
    pressure: f64,
    steps: u64,
    burn_in: u64,
    seed: u64,
    thin: u64,
    replicas: usize,
    k0: f64,
) -> PyResult<BTreeMap<String, f64>> {
    let spec = EnsembleSpec::isothermal_isobaric(temperature, pressure, market.state.len()).with_k0(k0);
    chain(py, market, spec, ChainConfig::new(steps, burn_in, thin, seed).with_replicas(replicas))
}

/// Metropolis chain at fixed (T, V, mu); V comes from `market`.
#[pyfunction]
#[pyo3(signature = (market, temperature, mu, steps, burn_in, seed, thin = 1, replicas = 1, k0 = 1.0))]
#[allow(clippy::too_many_arguments)]
fn grand_chain(
    py: Python<'_>,
    market: &PyMarket,
    temperature: f64,
    mu: f64,
    steps: u64,
    burn_in: u64,
    seed: u64,
    thin: u64,
    replicas: usize,
    k0: f64,
) -> PyResult<BTreeMap<String, f64>> {
    let spec = EnsembleSpec::grand_canonical(temperature, market.state.total_goods(), mu).with_k0(k0);
    chain(py, market, spec, ChainConfig::new(steps, burn_in, thin, seed).with_replicas(replicas))
}

// step, T1, T2, cumulative dQ12, S_total
type HeatFlowRow = (u64, f64, f64, f64, f64);

/// Two kinetic markets exchanging money; returns the verdict and the
/// per-interval (step, T1, T2, cumulative dQ12, S_total) rows.
#[pyfunction]
#[pyo3(signature = (agents1, t1, agents2, t2, steps, interval, seed, coupling_rate = 0.5, burn_in_intervals = 1))]
#[allow(clippy::too_many_arguments)]
fn heat_flow(
    py: Python<'_>,
    agents1: usize,
    t1: f64,
    agents2: usize,
    t2: f64,
    steps: u64,
    interval: u64,
    seed: u64,
    coupling_rate: f64,
    burn_in_intervals: usize,
) -> PyResult<(BTreeMap<String, f64>, Vec<HeatFlowRow>)> {
    let spec = CoupledSpec {
        first: MarketConfig::new(agents1, t1, 100.0),
        second: MarketConfig::new(agents2, t2, 100.0),
        coupling_rate,
        steps,
        interval,
        burn_in_intervals,
        seed,
        k0: 1.0,
    };
    py.detach(move || {
        let r = heat_flow_experiment(&spec)?;
        let v = r.verdict();
        let sl = second_law_check(&r.second_law_intervals())?;
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        let mut d = BTreeMap::new();
        d.insert("direction_ok".to_string(), flag(v.direction_ok));
        d.insert("inequality_ok".to_string(), flag(v.inequality_ok));
        d.insert("equilibrated".to_string(), flag(v.equilibrated));
        d.insert("second_law_ok".to_string(), flag(sl.pass));
        d.insert("final_t1".to_string(), v.final_t1.value);
        d.insert("final_t2".to_string(), v.final_t2.value);
        d.insert("expected_final".to_string(), v.expected_final);
        let rows = r.intervals.iter().map(|iv| (iv.step, iv.t1, iv.t2, iv.cumulative_dq12, iv.s_total)).collect();
        Ok((d, rows))
    })
    .map_err(py_err)
}

/// Runs the acceptance suite. Returns (all passed, checks), each check a
/// (criterion, name, measured, expected, tolerance, passed) tuple.
#[pyfunction]
#[pyo3(signature = (scale = "quick", seed = 1, criteria = None))]
#[allow(clippy::type_complexity)]
fn verify(
    py: Python<'_>,
    scale: &str,
    seed: u64,
    criteria: Option<Vec<u8>>,
) -> PyResult<(bool, Vec<(u8, String, f64, f64, f64, bool)>)> {
    let scale: Scale = scale.parse().map_err(py_err)?;
    let opts = VerifyOptions { scale, seed, criteria: criteria.unwrap_or_default(), ..VerifyOptions::default() };
    let report = py.detach(move || verify_suite(&opts));
    let checks = report
        .checks
        .iter()
        .map(|c| (c.criterion, c.name.clone(), c.measured, c.expected, c.tolerance, c.pass))
        .collect();
    Ok((report.passed(), checks))
}

/// Runs an experiment given as config text; returns (passed, written files).
#[pyfunction]
fn run_config(py: Python<'_>, text: &str, out_dir: PathBuf) -> PyResult<(bool, Vec<PathBuf>)> {
    let cfg = ExperimentConfig::parse(text).map_err(py_err)?;
    let outcome = py.detach(move || run_experiment(&cfg, &out_dir)).map_err(py_err)?;
    Ok((outcome.passed, outcome.files))
}

#[pymodule]
fn market_thermo_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMarket>()?;
    m.add_function(wrap_pyfunction!(ideal_ln_z, m)?)?;
    m.add_function(wrap_pyfunction!(ideal_pressure, m)?)?;
    m.add_function(wrap_pyfunction!(ideal_mean_energy, m)?)?;
    m.add_function(wrap_pyfunction!(ideal_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(ideal_npt_volume, m)?)?;
    m.add_function(wrap_pyfunction!(ideal_grand_agents, m)?)?;
    m.add_function(wrap_pyfunction!(canonical_chain, m)?)?;
    m.add_function(wrap_pyfunction!(npt_chain, m)?)?;
    m.add_function(wrap_pyfunction!(grand_chain, m)?)?;
    m.add_function(wrap_pyfunction!(heat_flow, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    Ok(())
}
