use rand::Rng;
use rand_distr::StandardNormal;

use super::PricingError;
use crate::paths::PricePathSet;
use crate::scalar::Scalar;

/// Exact geometric Brownian motion paths for one asset.
///
/// `S_{t+1} = S_t exp((mu - sigma^2/2) dt + sigma sqrt(dt) Z)`.
pub fn gbm_paths<T: Scalar, R: Rng + ?Sized>(
    s0: T,
    mu: T,
    sigma: T,
    dt: T,
    steps: usize,
    n_paths: usize,
    rng: &mut R,
) -> Result<PricePathSet<T>, PricingError> {
    check_gbm(s0, sigma, dt)?;
    let mut data = Vec::with_capacity(n_paths * (steps + 1));
    let drift = (mu - T::lit(0.5) * sigma * sigma) * dt;
    let vol = sigma * dt.sqrt();
    for _ in 0..n_paths {
        let mut s = s0;
        data.push(s);
        for _ in 0..steps {
            let z: f64 = rng.sample(StandardNormal);
            s = s * (drift + vol * T::lit(z)).exp();
            data.push(s);
        }
    }
    PricePathSet::new(n_paths, steps + 1, 1, data).map_err(|e| PricingError::InvalidInput(e.to_string()))
}

fn check_gbm<T: Scalar>(s0: T, sigma: T, dt: T) -> Result<(), PricingError> {
    if !(s0.is_finite() && s0 > T::zero()) {
        return Err(PricingError::InvalidInput(format!("spot = {}", s0)));
    }
    if !(sigma.is_finite() && sigma >= T::zero()) {
        return Err(PricingError::InvalidInput(format!("volatility = {}", sigma)));
    }
    if !(dt.is_finite() && dt > T::zero()) {
        return Err(PricingError::InvalidInput(format!("time step = {}", dt)));
    }
    Ok(())
}

/// Step-by-step source of log returns for a batch of paths.
///
/// Streaming one step at a time keeps Monte-Carlo memory at one value per
/// path regardless of the horizon.
pub trait PathSource<T> {
    /// Number of steps per path.
    fn steps(&self) -> usize;
    /// Year fraction covered by one step.
    fn dt(&self) -> T;
    /// Writes the log returns of step `step` for paths `first..first + out.len()`.
    fn fill_step<R: Rng + ?Sized>(&mut self, step: usize, first: usize, rng: &mut R, out: &mut [T]);
}

/// Fresh GBM draws for every call.
#[derive(Clone, Copy, Debug)]
pub struct GbmSource<T> {
    pub mu: T,
    pub sigma: T,
    pub dt: T,
    pub steps: usize,
}

impl<T: Scalar> PathSource<T> for GbmSource<T> {
    fn steps(&self) -> usize {
        self.steps
    }

    fn dt(&self) -> T {
        self.dt
    }

    fn fill_step<R: Rng + ?Sized>(&mut self, _step: usize, _first: usize, rng: &mut R, out: &mut [T]) {
        let drift = (self.mu - T::lit(0.5) * self.sigma * self.sigma) * self.dt;
        let vol = self.sigma * self.dt.sqrt();
        for r in out {
            let z: f64 = rng.sample(StandardNormal);
            *r = drift + vol * T::lit(z);
        }
    }
}

/// Replays stored paths of one asset, for example a forecaster path bank.
#[derive(Clone, Debug)]
pub struct StoredSource<'a, T> {
    pub paths: &'a PricePathSet<T>,
    pub asset: usize,
    pub dt: T,
}

impl<T: Scalar> PathSource<T> for StoredSource<'_, T> {
    fn steps(&self) -> usize {
        self.paths.horizon()
    }

    fn dt(&self) -> T {
        self.dt
    }

    fn fill_step<R: Rng + ?Sized>(&mut self, step: usize, first: usize, _rng: &mut R, out: &mut [T]) {
        let n = self.paths.n_paths();
        for (j, r) in out.iter_mut().enumerate() {
            let p = (first + j) % n;
            *r = (self.paths.price(p, step + 1, self.asset) / self.paths.price(p, step, self.asset)).ln();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McPrice {
    pub price: f64,
    pub std_error: f64,
    pub n_paths: usize,
}

pub const MIN_MC_PATHS: usize = 100;

/// Risk-neutral call value from an arbitrary return generator by drift replacement.
///
/// At every step the cross-path mean of the log returns is replaced with
/// `(r_f - v/2) dt`, where `v dt` is the cross-path variance of that step's
/// returns. Any drift the generator learned is removed while its dispersion is
/// kept, so the discounted price process is a martingale in expectation.
/// Returns `e^{-r_f T} mean(max(S_T - K, 0))` with its standard error.
pub fn mc_risk_neutral_price<T: Scalar, S: PathSource<T>, R: Rng + ?Sized>(
    source: &mut S,
    s0: T,
    k: T,
    r_f: T,
    t: T,
    n_paths: usize,
    rng: &mut R,
) -> Result<McPrice, PricingError> {
    if n_paths < MIN_MC_PATHS {
        return Err(PricingError::TooFewPaths { got: n_paths, min: MIN_MC_PATHS });
    }
    if !(s0.is_finite() && s0 > T::zero()) || !(k.is_finite() && k >= T::zero()) {
        return Err(PricingError::InvalidInput(format!("spot {} and strike {}", s0, k)));
    }
    let steps = source.steps();
    let dt = source.dt().as_f64();
    let horizon = steps as f64 * dt;
    if steps == 0 || (horizon - t.as_f64()).abs() > 1e-9 * t.as_f64().max(1.0) {
        return Err(PricingError::HorizonMismatch { generator: horizon, maturity: t.as_f64() });
    }
    let r_f = r_f.as_f64();
    let n = n_paths as f64;
    let mut log_s = vec![0.0f64; n_paths];
    let mut buf = vec![T::zero(); n_paths];
    for step in 0..steps {
        source.fill_step(step, 0, rng, &mut buf);
        let mean = buf.iter().map(|r| r.as_f64()).sum::<f64>() / n;
        let var = buf.iter().map(|r| (r.as_f64() - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let shift = r_f * dt - 0.5 * var - mean;
        for (x, r) in log_s.iter_mut().zip(&buf) {
            *x += r.as_f64() + shift;
        }
    }
    let (s0, k) = (s0.as_f64(), k.as_f64());
    let disc = (-r_f * t.as_f64()).exp();
    let payoffs: Vec<f64> = log_s.iter().map(|x| disc * (s0 * x.exp() - k).max(0.0)).collect();
    let mean = payoffs.iter().sum::<f64>() / n;
    let var = payoffs.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(McPrice { price: mean, std_error: (var / n).sqrt(), n_paths })
}
