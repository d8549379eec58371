use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::model::{Forecaster, WindowBatch, CHANNELS};
use super::{DenseReturns, ForecastError};
use crate::marketdata::{Channel, PricePanel};
use crate::paths::PricePathSet;

/// Paths simulated together in one forward pass.
const PATH_CHUNK: usize = 64;

/// Generator of path `id`: the `seed` generator on stream `id`.
pub fn path_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Simulates `n_paths` price paths of `horizon` steps after the end of `conditioning`.
///
/// At each step every asset's four return channels are drawn from the
/// forecast Gaussians and appended to the context; only the close return moves
/// the price. Each path owns its own generator, so the output does not depend
/// on how paths are scheduled.
pub fn sample_paths(
    model: &Forecaster,
    conditioning: &PricePanel,
    horizon: usize,
    n_paths: usize,
    seed: u64,
) -> Result<PricePathSet<f64>, ForecastError> {
    let n = model.n_assets;
    let l = model.config.context_len;
    if conditioning.n_assets() != n {
        return Err(ForecastError::Shape(format!("conditioning has {} assets, model {}", conditioning.n_assets(), n)));
    }
    if n_paths == 0 {
        return Err(ForecastError::Sampling("n_paths must be positive".into()));
    }
    let returns = DenseReturns::from_panel(&conditioning.to_log_returns()?);
    if returns.len < l {
        return Err(ForecastError::Sampling(format!("conditioning has {} returns, the model needs {}", returns.len, l)));
    }
    let last = conditioning.n_dates() - 1;
    let s0 = (0..n)
        .map(|i| {
            conditioning
                .close(i, last)
                .ok_or_else(|| ForecastError::Sampling(format!("asset {} has no close on the last conditioning date", i)))
        })
        .collect::<Result<Vec<f64>, _>>()?;
    let (ctx_v, ctx_p) = returns.cells(returns.len - l..returns.len);
    let ctx_p: Vec<f64> = ctx_p.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let step_cells = n * CHANNELS;

    let ids: Vec<usize> = (0..n_paths).collect();
    let chunks: Vec<Vec<f64>> = ids
        .par_chunks(PATH_CHUNK)
        .map(|chunk| -> Result<Vec<f64>, ForecastError> {
            let b = chunk.len();
            let mut rngs: Vec<ChaCha8Rng> = chunk.iter().map(|&id| path_rng(seed, id as u64)).collect();
            let mut values: Vec<f64> = (0..b).flat_map(|_| ctx_v.iter().copied()).collect();
            let mut present: Vec<f64> = (0..b).flat_map(|_| ctx_p.iter().copied()).collect();
            let mut prices: Vec<Vec<f64>> = vec![s0.clone(); b];
            let mut trail: Vec<Vec<f64>> = vec![s0.clone(); b];
            for _ in 0..horizon {
                let batch = WindowBatch { batch: b, len: l, n_assets: n, values: values.clone(), present: present.clone() };
                let forecasts = model.predict_last(&batch)?;
                for (k, f) in forecasts.iter().enumerate() {
                    let mut row = Vec::with_capacity(step_cells);
                    for i in 0..n {
                        for c in 0..CHANNELS {
                            let z: f64 = rngs[k].sample(StandardNormal);
                            row.push(f.mu[i][c] + f.sigma[i][c] * z);
                        }
                        prices[k][i] *= row[i * CHANNELS + Channel::Close.index()].exp();
                    }
                    let w = k * l * step_cells..(k + 1) * l * step_cells;
                    values[w.clone()].copy_within(step_cells.., 0);
                    present[w.clone()].copy_within(step_cells.., 0);
                    let tail = w.end - step_cells..w.end;
                    values[tail.clone()].copy_from_slice(&row);
                    present[tail].iter_mut().for_each(|p| *p = 1.0);
                    trail[k].extend_from_slice(&prices[k]);
                }
            }
            Ok(trail.concat())
        })
        .collect::<Result<_, _>>()?;
    let data: Vec<f64> = chunks.into_iter().flatten().collect();
    Ok(PricePathSet::new(n_paths, horizon + 1, n, data)?.with_seed(seed))
}
