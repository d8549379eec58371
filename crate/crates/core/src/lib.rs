//! Desk-scale deep hedging: a reverse-mode autodiff core, a probabilistic
//! return forecaster, Black–Scholes and Monte Carlo pricing, a hedging
//! environment with transaction costs, a recurrent PPO agent pretrained by
//! behavior cloning, and the evaluation protocol that compares it with Delta
//! hedging.
//!
//! Numerical building blocks are generic over [`scalar::Scalar`]; the aliases
//! below fix them at `f64`, the precision every network in the pipeline uses.

pub mod agent;
pub mod diffcore;
pub mod evalkit;
pub mod forecaster;
pub mod hedgenv;
pub mod marketdata;
pub mod paths;
pub mod pricing;
pub mod scalar;
pub mod synthetic;

pub type Tensor = diffcore::Tensor<f64>;
pub type Graph = diffcore::Graph<f64>;
pub type ParamStore = diffcore::ParamStore<f64>;
pub type BsInputs = pricing::BsInputs<f64>;
pub type EpisodeSpec = hedgenv::EpisodeSpec<f64>;
pub type HedgeEnv = hedgenv::HedgeEnv<f64>;
pub type PricePathSet = paths::PricePathSet<f64>;

/// Any error raised by the pipeline stages.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] marketdata::DataError),
    #[error(transparent)]
    Diff(#[from] diffcore::DiffError),
    #[error(transparent)]
    Forecast(#[from] forecaster::ForecastError),
    #[error(transparent)]
    Pricing(#[from] pricing::PricingError),
    #[error(transparent)]
    Path(#[from] paths::PathError),
    #[error(transparent)]
    Hedge(#[from] hedgenv::HedgeError),
    #[error(transparent)]
    Agent(#[from] agent::AgentError),
    #[error(transparent)]
    Eval(#[from] evalkit::EvalError),
}

pub type Result<T> = std::result::Result<T, Error>;
