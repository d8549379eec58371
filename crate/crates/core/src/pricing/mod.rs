//! Black–Scholes pricing, implied volatility, geometric Brownian motion and
//! Monte-Carlo risk-neutral valuation, plus expert hedge datasets.

mod bs;
mod expert;
mod mc;
mod normal;

pub use bs::{
    bs_call_price, bs_delta, bs_vega, call_bounds, implied_delta, implied_vol, BsInputs, DELTA_EPS, MAX_MATURITY,
    VOL_HI, VOL_LO,
};
pub use expert::{build_expert_dataset, read_expert_csv, write_expert_csv, ExpertPair, ExpertReport};
pub use mc::{gbm_paths, mc_risk_neutral_price, GbmSource, McPrice, PathSource, StoredSource, MIN_MC_PATHS};
pub use normal::{norm_cdf, norm_pdf, norm_sf};

/// Trading days per year.
pub const TRADING_DAYS: f64 = 252.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PricingError {
    #[error("invalid pricing input: {0}")]
    InvalidInput(String),
    #[error("option price {price} violates no-arbitrage bounds ({lower}, {upper})")]
    Arbitrage { price: f64, lower: f64, upper: f64 },
    #[error("no implied volatility in [{lo}, {hi}] reproduces price {price}")]
    NoRoot { price: f64, lo: f64, hi: f64 },
    #[error("{got} Monte-Carlo paths requested, at least {min} required")]
    TooFewPaths { got: usize, min: usize },
    #[error("generator covers {generator} years but the option matures in {maturity}")]
    HorizonMismatch { generator: f64, maturity: f64 },
}
