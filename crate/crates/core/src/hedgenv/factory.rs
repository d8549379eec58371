use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EnvFactory, EpisodeSource, EpisodeSpec, HedgeError};
use crate::paths::PricePathSet;
use crate::pricing::{bs_call_price, BsInputs, TRADING_DAYS};

/// Where generated episodes take their underlying paths from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathOrigin {
    #[default]
    Gbm,
    /// A bank of sampled paths, usually from the forecaster.
    Paths,
}

/// Distribution of hedging episodes.
///
/// Entry moneyness `S_0 / K` is uniform on `1 ± moneyness_jitter` and the
/// episode length uniform on `[min_steps, steps]`. GBM episodes move the entry
/// spot around a fixed strike; path-bank episodes keep the bank's entry price
/// and move the strike.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub source: PathOrigin,
    pub strike: f64,
    /// Annualized GBM drift.
    pub mu: f64,
    /// GBM volatility, also used to price the option sold at entry.
    pub sigma: f64,
    pub steps: usize,
    /// Shortest episode; `None` means every episode has `steps` steps.
    pub min_steps: Option<usize>,
    pub cost_rate: f64,
    pub moneyness_jitter: f64,
    /// Bank asset used when `source = "paths"`.
    pub asset: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            source: PathOrigin::Gbm,
            strike: 100.0,
            mu: 0.0,
            sigma: 0.2,
            steps: 20,
            min_steps: None,
            cost_rate: 0.0,
            moneyness_jitter: 0.03,
            asset: 0,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), HedgeError> {
        let bad = |m: String| Err(HedgeError::InvalidSpec(m));
        if !(self.strike > 0.0 && self.strike.is_finite()) {
            return bad(format!("strike must be positive, got {}", self.strike));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite() && self.mu.is_finite()) {
            return bad(format!("need a positive volatility and finite drift, got {} and {}", self.sigma, self.mu));
        }
        if self.steps == 0 || self.min_steps.is_some_and(|m| m == 0 || m > self.steps) {
            return bad(format!("steps {} and min_steps {:?} must satisfy 1 <= min_steps <= steps", self.steps, self.min_steps));
        }
        if !(self.cost_rate >= 0.0 && self.cost_rate.is_finite()) {
            return bad(format!("cost rate {}", self.cost_rate));
        }
        if !(0.0..1.0).contains(&self.moneyness_jitter) {
            return bad(format!("moneyness_jitter must lie in [0, 1), got {}", self.moneyness_jitter));
        }
        Ok(())
    }
}

/// Separates the draws of episode parameters from the path streams of
/// [`super::episode_streams`], which share the seed.
const PARAM_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// [`EnvFactory`] for an [`EpisodeConfig`]. Episode `id` always gets the same
/// strike, entry spot and length under the same seed.
#[derive(Clone, Debug)]
pub struct EpisodeGenerator {
    pub config: EpisodeConfig,
    pub seed: u64,
    bank: Option<Arc<PricePathSet<f64>>>,
}

impl EpisodeGenerator {
    pub fn new(config: EpisodeConfig, seed: u64, bank: Option<Arc<PricePathSet<f64>>>) -> Result<Self, HedgeError> {
        config.validate()?;
        match (config.source, &bank) {
            (PathOrigin::Paths, None) => return Err(HedgeError::InvalidSpec("path-bank episodes need a path bank".into())),
            (PathOrigin::Paths, Some(b)) if b.horizon() < config.steps => {
                return Err(HedgeError::PathTooShort { need: config.steps + 1, got: b.len() })
            }
            (PathOrigin::Paths, Some(b)) if config.asset >= b.n_assets() => {
                return Err(HedgeError::InvalidSpec(format!("bank has {} assets, asked for {}", b.n_assets(), config.asset)))
            }
            _ => {}
        }
        Ok(EpisodeGenerator { config, seed, bank })
    }

    pub fn with_cost(mut self, cost_rate: f64) -> Self {
        self.config.cost_rate = cost_rate;
        self
    }

    fn build(&self, id: u64) -> Result<EpisodeSpec<f64>, HedgeError> {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ PARAM_SALT);
        rng.set_stream(id);
        let m = if c.moneyness_jitter > 0.0 {
            rng.random_range(1.0 - c.moneyness_jitter..=1.0 + c.moneyness_jitter)
        } else {
            1.0
        };
        let steps = match c.min_steps {
            Some(lo) if lo < c.steps => rng.random_range(lo..=c.steps),
            _ => c.steps,
        };
        let dt = 1.0 / TRADING_DAYS;
        let (source, spot, strike) = match (c.source, &self.bank) {
            (PathOrigin::Paths, Some(bank)) => {
                let s0 = bank.price(0, 0, c.asset);
                (EpisodeSource::PathBank { paths: bank.clone(), asset: c.asset }, s0, s0 / m)
            }
            _ => {
                let s0 = c.strike * m;
                (EpisodeSource::Gbm { s0, mu: c.mu, sigma: c.sigma }, s0, c.strike)
            }
        };
        let inp = BsInputs::new(spot, strike, 0.0, c.sigma, dt * steps as f64)
            .map_err(|e| HedgeError::InvalidSpec(e.to_string()))?;
        let spec = EpisodeSpec {
            source,
            strike,
            v0: bs_call_price(&inp),
            steps,
            cost_rate: c.cost_rate,
            dt,
            sigma_hint: Some(c.sigma),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl EnvFactory for EpisodeGenerator {
    fn spec(&self, episode: u64) -> EpisodeSpec<f64> {
        // The configuration was validated on construction, so every draw is valid.
        self.build(episode).expect("validated episode configuration")
    }
}
