//! Episodic hedging of one short call with proportional transaction costs.
//!
//! The agent observes `(S_t / K, time to expiry in years, a_{t-1})` and picks a
//! long underlying position `a_t` in `[0, 1]`. Trades are self-financing, cash
//! earns nothing, the position starts flat and is liquidated at expiry. The
//! only reward is `-PV_T^2` on the terminal step.

mod factory;

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::paths::PricePathSet;
use crate::pricing::{bs_call_price, gbm_paths, BsInputs, TRADING_DAYS};
use crate::scalar::Scalar;

pub use factory::{EpisodeConfig, EpisodeGenerator, PathOrigin};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HedgeError {
    #[error("invalid episode: {0}")]
    InvalidSpec(String),
    #[error("historical path has {got} prices but the episode needs {need}")]
    PathTooShort { need: usize, got: usize },
    #[error("action is NaN at step {0}")]
    NanAction(usize),
    #[error("episode already finished")]
    Finished,
    #[error("episode incomplete: {done} of {steps} steps taken")]
    Incomplete { done: usize, steps: usize },
    #[error("{0}")]
    Io(String),
}

/// Where the underlying path of an episode comes from.
#[derive(Clone, Debug)]
pub enum EpisodeSource<T> {
    /// Fresh geometric Brownian motion with annualized drift and volatility.
    Gbm { s0: T, mu: T, sigma: T },
    /// A path drawn uniformly from a bank, for example forecaster samples.
    PathBank { paths: Arc<PricePathSet<T>>, asset: usize },
    /// A recorded price series replayed from its first value.
    Historical { closes: Arc<Vec<T>> },
}

/// Description of one hedging episode.
#[derive(Clone, Debug)]
pub struct EpisodeSpec<T> {
    pub source: EpisodeSource<T>,
    pub strike: T,
    /// Proceeds from selling the option at entry.
    pub v0: T,
    /// Episode length in steps.
    pub steps: usize,
    pub cost_rate: T,
    /// Year fraction per step; one trading day by default.
    pub dt: T,
    /// Volatility a delta rule should use, when one is known.
    pub sigma_hint: Option<T>,
}

impl<T: Scalar> EpisodeSpec<T> {
    /// GBM episode whose initial proceeds are the Black–Scholes value at the generating
    /// volatility with zero rates.
    pub fn gbm(s0: T, strike: T, mu: T, sigma: T, steps: usize, cost_rate: T) -> Result<Self, HedgeError> {
        let dt = T::lit(1.0 / TRADING_DAYS);
        let inp = BsInputs::new(s0, strike, T::zero(), sigma, dt * T::lit(steps as f64))
            .map_err(|e| HedgeError::InvalidSpec(e.to_string()))?;
        let spec = EpisodeSpec {
            source: EpisodeSource::Gbm { s0, mu, sigma },
            strike,
            v0: bs_call_price(&inp),
            steps,
            cost_rate,
            dt,
            sigma_hint: Some(sigma),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_dt(mut self, dt: T) -> Self {
        self.dt = dt;
        self
    }

    pub fn with_cost(mut self, cost_rate: T) -> Self {
        self.cost_rate = cost_rate;
        self
    }

    pub fn validate(&self) -> Result<(), HedgeError> {
        let bad = |m: String| Err(HedgeError::InvalidSpec(m));
        if self.steps == 0 {
            return bad("episode needs at least one step".into());
        }
        if !(self.strike.is_finite() && self.strike > T::zero()) {
            return bad(format!("strike {}", self.strike));
        }
        if !(self.v0.is_finite() && self.v0 >= T::zero()) {
            return bad(format!("initial proceeds {}", self.v0));
        }
        if !(self.cost_rate.is_finite() && self.cost_rate >= T::zero()) {
            return bad(format!("cost rate {}", self.cost_rate));
        }
        if !(self.dt.is_finite() && self.dt > T::zero()) {
            return bad(format!("step length {}", self.dt));
        }
        match &self.source {
            EpisodeSource::Gbm { s0, sigma, .. } if !(*s0 > T::zero() && *sigma >= T::zero()) => {
                bad(format!("gbm spot {} volatility {}", s0, sigma))
            }
            EpisodeSource::PathBank { paths, asset } if *asset >= paths.n_assets() || paths.is_empty() => {
                bad("path bank asset out of range or bank empty".into())
            }
            EpisodeSource::PathBank { paths, .. } if paths.horizon() < self.steps => {
                Err(HedgeError::PathTooShort { need: self.steps + 1, got: paths.len() })
            }
            EpisodeSource::Historical { closes } if closes.len() < self.steps + 1 => {
                Err(HedgeError::PathTooShort { need: self.steps + 1, got: closes.len() })
            }
            _ => Ok(()),
        }
    }

    /// Draws the underlying path, `steps + 1` prices.
    pub fn draw_path<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<T>, HedgeError> {
        self.validate()?;
        Ok(match &self.source {
            EpisodeSource::Gbm { s0, mu, sigma } => gbm_paths(*s0, *mu, *sigma, self.dt, self.steps, 1, rng)
                .map_err(|e| HedgeError::InvalidSpec(e.to_string()))?
                .series(0, 0),
            EpisodeSource::PathBank { paths, asset } => {
                let p = rng.random_range(0..paths.n_paths());
                paths.series(p, *asset)[..=self.steps].to_vec()
            }
            EpisodeSource::Historical { closes } => closes[..=self.steps].to_vec(),
        })
    }
}

/// Produces the episode spec for an episode id.
pub trait EnvFactory: Sync {
    fn spec(&self, episode: u64) -> EpisodeSpec<f64>;
}

impl<F: Fn(u64) -> EpisodeSpec<f64> + Sync> EnvFactory for F {
    fn spec(&self, episode: u64) -> EpisodeSpec<f64> {
        self(episode)
    }
}

/// Independent generators for episode `id` under `seed`: the first drives the
/// price path, the second any action noise.
///
/// Streams are addressed by id, so an episode sees the same path whatever
/// strategy runs on it and however episodes are batched.
pub fn episode_streams(seed: u64, id: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut path = ChaCha8Rng::seed_from_u64(seed);
    path.set_stream(2 * id);
    let mut noise = ChaCha8Rng::seed_from_u64(seed);
    noise.set_stream(2 * id + 1);
    (path, noise)
}

/// Value at expiry of the short call: `-max(S_T - K, 0)`.
pub fn payoff<T: Scalar>(s_t: T, strike: T) -> T {
    -(s_t - strike).max(T::zero())
}

/// One environment step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition<T> {
    pub obs: [T; 3],
    /// Action after clipping to `[0, 1]`.
    pub action: T,
    pub reward: T,
    pub next_obs: [T; 3],
    pub done: bool,
    /// Trading cost charged on this step, including liquidation on the last one.
    pub cost: T,
    /// Mark-to-market gain of the position over this step.
    pub pnl: T,
}

/// Terminal portfolio value and its parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PvBreakdown<T> {
    pub pv: T,
    pub payoff: T,
    pub trading_pnl: T,
    pub cost: T,
}

/// A running episode.
#[derive(Clone, Debug)]
pub struct HedgeEnv<T> {
    path: Vec<T>,
    strike: T,
    v0: T,
    cost_rate: T,
    dt: T,
    t: usize,
    prev_action: T,
    cum_pnl: T,
    cum_cost: T,
    actions: Vec<T>,
    pv: Option<T>,
}

impl<T: Scalar> HedgeEnv<T> {
    /// Starts an episode with a freshly drawn path.
    pub fn reset<R: Rng + ?Sized>(spec: &EpisodeSpec<T>, rng: &mut R) -> Result<Self, HedgeError> {
        let path = spec.draw_path(rng)?;
        Self::from_path(spec, path)
    }

    /// Starts an episode on a given path of `steps + 1` prices.
    pub fn from_path(spec: &EpisodeSpec<T>, path: Vec<T>) -> Result<Self, HedgeError> {
        if path.len() != spec.steps + 1 {
            return Err(HedgeError::PathTooShort { need: spec.steps + 1, got: path.len() });
        }
        if path.iter().any(|s| !(s.is_finite() && *s > T::zero())) {
            return Err(HedgeError::InvalidSpec("path prices must be positive".into()));
        }
        Ok(HedgeEnv {
            path,
            strike: spec.strike,
            v0: spec.v0,
            cost_rate: spec.cost_rate,
            dt: spec.dt,
            t: 0,
            prev_action: T::zero(),
            cum_pnl: T::zero(),
            cum_cost: T::zero(),
            actions: Vec::with_capacity(spec.steps),
            pv: None,
        })
    }

    pub fn steps(&self) -> usize {
        self.path.len() - 1
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn path(&self) -> &[T] {
        &self.path
    }

    pub fn actions(&self) -> &[T] {
        &self.actions
    }

    pub fn is_done(&self) -> bool {
        self.pv.is_some()
    }

    pub fn spot(&self) -> T {
        self.path[self.t]
    }

    pub fn strike(&self) -> T {
        self.strike
    }

    pub fn entry_moneyness(&self) -> T {
        self.path[0] / self.strike
    }

    pub fn cum_cost(&self) -> T {
        self.cum_cost
    }

    pub fn cum_pnl(&self) -> T {
        self.cum_pnl
    }

    /// Cash side of the book: `V_0` plus trading gains minus costs so far.
    pub fn cash(&self) -> T {
        self.v0 + self.cum_pnl - self.cum_cost
    }

    /// Years to expiry at the current step.
    pub fn tte_years(&self) -> T {
        T::lit((self.steps() - self.t) as f64) * self.dt
    }

    pub fn observation(&self) -> [T; 3] {
        [self.spot() / self.strike, self.tte_years(), self.prev_action]
    }

    /// Terminal portfolio value once the episode is done.
    pub fn pv(&self) -> Option<T> {
        self.pv
    }

    /// Applies position `action`, clipped to `[0, 1]`.
    pub fn step(&mut self, action: T) -> Result<Transition<T>, HedgeError> {
        if self.is_done() {
            return Err(HedgeError::Finished);
        }
        if action.is_nan() {
            return Err(HedgeError::NanAction(self.t));
        }
        let a = action.max(T::zero()).min(T::one());
        let obs = self.observation();
        let (s, s_next) = (self.path[self.t], self.path[self.t + 1]);
        let mut cost = self.cost_rate * s * (self.prev_action - a).abs();
        let pnl = a * (s_next - s);
        self.cum_pnl = self.cum_pnl + pnl;
        self.cum_cost = self.cum_cost + cost;
        self.actions.push(a);
        self.prev_action = a;
        self.t += 1;
        let done = self.t == self.steps();
        let mut reward = T::zero();
        if done {
            let liquidation = self.cost_rate * s_next * a.abs();
            self.cum_cost = self.cum_cost + liquidation;
            cost = cost + liquidation;
            let pv = payoff(s_next, self.strike) + self.v0 + self.cum_pnl - self.cum_cost;
            self.pv = Some(pv);
            reward = -(pv * pv);
        }
        Ok(Transition { obs, action: a, reward, next_obs: self.observation(), done, cost, pnl })
    }

    /// Recomputes the terminal value from the path and the recorded actions.
    pub fn terminal_pv(&self) -> Result<PvBreakdown<T>, HedgeError> {
        if !self.is_done() {
            return Err(HedgeError::Incomplete { done: self.t, steps: self.steps() });
        }
        Ok(terminal_pv(&self.path, &self.actions, self.strike, self.v0, self.cost_rate))
    }
}

/// Closed-form terminal value `-V_T + V_0 + sum a_t (S_{t+1} - S_t) - C_T` with
/// `C_T = c sum_{t=0}^{T} S_t |a_{t-1} - a_t|`, `a_{-1} = a_T = 0`.
///
/// Sums run in the same order as [`HedgeEnv::step`], so both agree bit for bit.
pub fn terminal_pv<T: Scalar>(path: &[T], actions: &[T], strike: T, v0: T, cost_rate: T) -> PvBreakdown<T> {
    let steps = actions.len();
    assert_eq!(path.len(), steps + 1, "path must have one more price than actions");
    let mut trading_pnl = T::zero();
    let mut cost = T::zero();
    let mut prev = T::zero();
    for t in 0..steps {
        cost = cost + cost_rate * path[t] * (prev - actions[t]).abs();
        trading_pnl = trading_pnl + actions[t] * (path[t + 1] - path[t]);
        prev = actions[t];
    }
    cost = cost + cost_rate * path[steps] * prev.abs();
    let payoff = payoff(path[steps], strike);
    PvBreakdown { pv: payoff + v0 + trading_pnl - cost, payoff, trading_pnl, cost }
}

/// Appends one episode to a log with columns `episode, t, S_t, action, cost, pnl, reward`.
///
/// The final row has `t = steps` and carries the terminal price with empty trade fields.
pub fn write_episode_log<T: Scalar, W: Write>(
    out: &mut W,
    episode: usize,
    path: &[T],
    transitions: &[Transition<T>],
) -> Result<(), HedgeError> {
    let io = |e: std::io::Error| HedgeError::Io(e.to_string());
    for (t, tr) in transitions.iter().enumerate() {
        writeln!(out, "{},{},{},{},{},{},{}", episode, t, path[t], tr.action, tr.cost, tr.pnl, tr.reward).map_err(io)?;
    }
    writeln!(out, "{},{},{},,,,", episode, transitions.len(), path[transitions.len()]).map_err(io)
}

pub const EPISODE_LOG_HEADER: &str = "episode,t,S_t,action,cost,pnl,reward";

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(path: Vec<f64>, v0: f64, c: f64) -> EpisodeSpec<f64> {
        EpisodeSpec {
            steps: path.len() - 1,
            source: EpisodeSource::Historical { closes: Arc::new(path) },
            strike: 100.0,
            v0,
            cost_rate: c,
            dt: 1.0 / 252.0,
            sigma_hint: None,
        }
    }

    #[test]
    fn reset_observation() {
        let s = spec(vec![100.0; 11], 2.0, 0.0);
        let env = HedgeEnv::reset(&s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(env.observation(), [1.0, 10.0 / 252.0, 0.0]);
    }

    #[test]
    fn cost_increment_reference() {
        let s = spec(vec![100.0, 100.0, 100.0], 0.0, 0.0004);
        let mut env = HedgeEnv::reset(&s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let tr = env.step(0.5).unwrap();
        assert!((tr.cost - 0.02).abs() < 1e-15);
        assert_eq!(tr.reward, 0.0);
        let tr = env.step(0.5).unwrap();
        // No rebalancing cost, only the liquidation of the half position.
        assert!((tr.cost - 0.02).abs() < 1e-15);
    }

    #[test]
    fn unhedged_accounting() {
        let s = spec(vec![100.0, 104.0, 110.0], 8.0, 0.0);
        let mut env = HedgeEnv::reset(&s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        env.step(0.0).unwrap();
        let tr = env.step(0.0).unwrap();
        assert!(tr.done);
        assert_eq!(env.pv(), Some(-2.0));
        assert_eq!(tr.reward, -4.0);
        assert!(matches!(env.step(0.0), Err(HedgeError::Finished)));
    }

    #[test]
    fn full_hedge_telescopes() {
        let path = vec![100.0, 97.0, 103.0, 108.0];
        let s = spec(path.clone(), 5.0, 0.0);
        let mut env = HedgeEnv::reset(&s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for _ in 0..3 {
            env.step(1.0).unwrap();
        }
        assert!((env.pv().unwrap() - (5.0 - 8.0 + 8.0)).abs() < 1e-12);
        assert_eq!(env.terminal_pv().unwrap().pv, env.pv().unwrap());
    }

    #[test]
    fn actions_are_clipped_and_nan_rejected() {
        let s = spec(vec![100.0, 101.0, 102.0], 1.0, 0.0);
        let mut env = HedgeEnv::reset(&s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(env.step(f64::NAN), Err(HedgeError::NanAction(0))));
        assert_eq!(env.step(1.7).unwrap().action, 1.0);
        assert_eq!(env.step(-0.2).unwrap().action, 0.0);
        assert!(env.terminal_pv().is_ok());
    }

    #[test]
    fn payoff_cases() {
        assert_eq!(payoff(110.0, 100.0), -10.0);
        assert_eq!(payoff(90.0, 100.0), 0.0);
        assert_eq!(payoff(100.0, 100.0), 0.0);
    }

    #[test]
    fn short_history_rejected() {
        let mut s = spec(vec![100.0, 101.0], 1.0, 0.0);
        s.steps = 5;
        assert!(matches!(HedgeEnv::reset(&s, &mut ChaCha8Rng::seed_from_u64(0)), Err(HedgeError::PathTooShort { .. })));
        s.steps = 0;
        assert!(matches!(s.validate(), Err(HedgeError::InvalidSpec(_))));
    }

    #[test]
    fn incomplete_episode_has_no_terminal_value() {
        let s = spec(vec![100.0, 101.0, 102.0], 1.0, 0.0);
        let mut env = HedgeEnv::reset(&s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        env.step(0.3).unwrap();
        assert!(matches!(env.terminal_pv(), Err(HedgeError::Incomplete { done: 1, steps: 2 })));
    }

    #[test]
    fn gbm_reset_is_seeded() {
        let s = EpisodeSpec::<f64>::gbm(100.0, 100.0, 0.0, 0.2, 10, 0.0).unwrap();
        let a = HedgeEnv::reset(&s, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = HedgeEnv::reset(&s, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a.path(), b.path());
        assert!((s.v0 - 1.589_318_975_645_66).abs() < 1e-9);
    }
}
