//! Statistical mechanics of agent-based markets: closed forms for the ideal
//! market, Monte Carlo samplers for four ensembles, numerical partition
//! functions and heat-flow experiments.

// `!(x > 0.0)` guards reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod io;
pub mod market;
pub mod mc;
pub mod oracle;
pub mod runner;
pub mod stats;
pub mod thermo;
pub mod verify;
pub mod zfunc;

pub use config::{ExperimentConfig, ExperimentKind};
pub use error::{Error, Result};
pub use market::{
    new_market, Allocation, EnergyFunctional, Ensemble, EnsembleSpec, MarketState, SharedPool, ThermoReport,
    VolumeFunctional,
};
pub use mc::{run_chain, summarize, ChainConfig, Dynamics, Estimate, ExchangeRule, Trace};
pub use runner::{run_experiment, RunOutcome};
pub use verify::{verify_suite, Scale, VerifyOptions, VerifyReport};
