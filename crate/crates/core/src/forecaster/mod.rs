//! Probabilistic return forecaster with low-rank asset attention.
//!
//! Each step's N assets are embedded and compressed into k latent assets, a
//! causal attention stack runs over time for each latent asset, and the
//! result is decoded back to per-asset Gaussian parameters for the next step's
//! four return channels. Sampling the Gaussians autoregressively turns the
//! model into a price path generator.

mod baseline;
mod model;
mod sample;
mod train;

pub use baseline::ConstantGaussian;
pub use model::{
    low_rank_decode, low_rank_encode, network, position_encoding, ForecastConfig, Forecaster, GaussianForecast, Heads,
    WindowBatch, CHANNELS,
};
pub use sample::sample_paths;
pub use train::{gaussian_nll, held_out_nll, HeldOut, nll_loss, train, write_loss_curve, LossRow, TrainConfig, TrainReport, LOSS_HEADER};

use thiserror::Error;

use crate::diffcore::DiffError;
use crate::marketdata::{Channel, DataError, ReturnPanel};
use crate::paths::PathError;

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("forecaster configuration: {0}")]
    Config(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("{layer}: {source}")]
    Layer { layer: String, source: DiffError },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error("training set has no complete window of {needed} returns")]
    EmptyTrainingSet { needed: usize },
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("sigma {sigma} at asset {asset}, channel {channel} is below the floor {floor}")]
    SigmaBelowFloor { asset: usize, channel: usize, sigma: f64, floor: f64 },
    #[error("sampling: {0}")]
    Sampling(String),
}

fn at(layer: &'static str) -> impl Fn(DiffError) -> ForecastError {
    move |source| ForecastError::Layer { layer: layer.to_string(), source }
}

/// Returns of a panel as dense `[T, N, CHANNELS]` cells with presence flags.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct DenseReturns {
    pub len: usize,
    pub n_assets: usize,
    pub values: Vec<f64>,
    pub present: Vec<bool>,
}

impl DenseReturns {
    pub fn from_panel(panel: &ReturnPanel) -> Self {
        let (len, n) = (panel.len(), panel.n_assets());
        let mut values = Vec::with_capacity(len * n * CHANNELS);
        let mut present = Vec::with_capacity(len * n * CHANNELS);
        for t in 0..len {
            for i in 0..n {
                for c in Channel::ALL {
                    let v = panel.get(c, i, t);
                    values.push(v.unwrap_or(0.0));
                    present.push(v.is_some());
                }
            }
        }
        DenseReturns { len, n_assets: n, values, present }
    }

    fn stride(&self) -> usize {
        self.n_assets * CHANNELS
    }

    /// Cells of steps `range`, flattened.
    pub fn cells(&self, range: std::ops::Range<usize>) -> (&[f64], &[bool]) {
        let s = self.stride();
        (&self.values[range.start * s..range.end * s], &self.present[range.start * s..range.end * s])
    }

    /// The last `tail` steps of `self` followed by all of `next`.
    pub fn joined_after(&self, next: &DenseReturns, tail: usize) -> DenseReturns {
        let from = self.len.saturating_sub(tail);
        let (v, p) = self.cells(from..self.len);
        DenseReturns {
            len: self.len - from + next.len,
            n_assets: self.n_assets,
            values: v.iter().chain(&next.values).copied().collect(),
            present: p.iter().chain(&next.present).copied().collect(),
        }
    }
}
