use super::model::CHANNELS;
use super::ForecastError;
use crate::marketdata::{Channel, ReturnPanel};

/// A single Gaussian fitted by maximum likelihood: sample mean and the
/// population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantGaussian {
    pub mu: f64,
    pub sigma: f64,
}

impl ConstantGaussian {
    pub fn fit(samples: impl IntoIterator<Item = f64>) -> Result<Self, ForecastError> {
        let xs: Vec<f64> = samples.into_iter().collect();
        if xs.is_empty() {
            return Err(ForecastError::Config("cannot fit a Gaussian to no samples".into()));
        }
        let n = xs.len() as f64;
        let mu = xs.iter().sum::<f64>() / n;
        let sigma = (xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n).sqrt();
        if !(sigma > 0.0) {
            return Err(ForecastError::Config("samples are constant; the Gaussian fit is degenerate".into()));
        }
        Ok(ConstantGaussian { mu, sigma })
    }

    /// One Gaussian for every present return cell of the panel, all assets and channels pooled.
    pub fn fit_pooled(panel: &ReturnPanel) -> Result<Self, ForecastError> {
        Self::fit(panel.returns.iter().flatten().flatten().flatten().copied())
    }

    /// One Gaussian per asset and channel, `[asset][channel]`.
    pub fn fit_per_series(panel: &ReturnPanel) -> Result<Vec<[Self; CHANNELS]>, ForecastError> {
        (0..panel.n_assets())
            .map(|i| {
                let fits = Channel::ALL
                    .map(|c| Self::fit((0..panel.len()).filter_map(|t| panel.get(c, i, t))));
                let [a, b, c, d] = fits;
                Ok([a?, b?, c?, d?])
            })
            .collect()
    }

    /// `ln sigma + (x - mu)^2 / (2 sigma^2)`, the per-cell loss the forecaster minimizes.
    pub fn nll(&self, x: f64) -> f64 {
        let z = (x - self.mu) / self.sigma;
        self.sigma.ln() + 0.5 * z * z
    }

    /// Mean NLL over the present cells of steps `from..` of `panel`.
    pub fn panel_nll(&self, panel: &ReturnPanel, from: usize) -> Result<f64, ForecastError> {
        mean_nll(panel, from, |_, _| *self)
    }

    /// Mean NLL of per-series fits over the present cells of steps `from..`.
    pub fn per_series_nll(fits: &[[Self; CHANNELS]], panel: &ReturnPanel, from: usize) -> Result<f64, ForecastError> {
        if fits.len() != panel.n_assets() {
            return Err(ForecastError::Shape(format!("{} fits for {} assets", fits.len(), panel.n_assets())));
        }
        mean_nll(panel, from, |i, c| fits[i][c])
    }
}

fn mean_nll(panel: &ReturnPanel, from: usize, fit: impl Fn(usize, usize) -> ConstantGaussian) -> Result<f64, ForecastError> {
    let (mut sum, mut n) = (0.0, 0usize);
    for t in from..panel.len() {
        for i in 0..panel.n_assets() {
            for c in Channel::ALL {
                if let Some(x) = panel.get(c, i, t) {
                    sum += fit(i, c.index()).nll(x);
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        return Err(ForecastError::Shape("no present cells to score".into()));
    }
    Ok(sum / n as f64)
}
