use std::io::Write;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;

use super::model::{network, Forecaster, GaussianForecast, WindowBatch, CHANNELS};
use super::{DenseReturns, ForecastConfig, ForecastError};
use crate::diffcore::{clip_grad_norm, Adam, DiffError, Graph, Tensor};
use crate::marketdata::{apply_dropout, select_dropped, ReturnPanel};

pub const LOSS_HEADER: &str = "epoch,train_nll,val_nll";

/// Windows evaluated per forward pass outside training.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 200, batch_size: 32, lr: 1e-3, grad_clip: 1.0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ForecastError> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !(self.grad_clip > 0.0) {
            return Err(ForecastError::Config("batch_size, lr and grad_clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Parameters from the epoch with the lowest validation NLL.
    pub model: Forecaster,
    pub curve: Vec<LossRow>,
    pub best_epoch: usize,
    pub best_val_nll: f64,
}

/// Mean of `ln sigma + (r - mu)^2 / (2 sigma^2)` over the present target cells.
pub fn nll_loss(forecast: &GaussianForecast, target: &[[Option<f64>; CHANNELS]], sigma_floor: f64) -> Result<f64, ForecastError> {
    if target.len() != forecast.mu.len() || forecast.sigma.len() != forecast.mu.len() {
        return Err(ForecastError::Shape(format!("{} target rows for {} assets", target.len(), forecast.mu.len())));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, row) in target.iter().enumerate() {
        for (c, r) in row.iter().enumerate() {
            let sigma = forecast.sigma[i][c];
            if !(sigma >= sigma_floor) {
                return Err(ForecastError::SigmaBelowFloor { asset: i, channel: c, sigma, floor: sigma_floor });
            }
            if let Some(r) = r {
                let z = (r - forecast.mu[i][c]) / sigma;
                sum += sigma.ln() + 0.5 * z * z;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(ForecastError::Shape("every target cell is missing".into()));
    }
    Ok(sum / count as f64)
}

/// Masked Gaussian NLL on the graph: the mean of `ln sigma + (r - mu)^2 / (2 sigma^2)`
/// over cells whose mask is 1. The mask must select at least one cell.
pub fn gaussian_nll(
    g: &mut Graph<f64>,
    mu: &Tensor<f64>,
    sigma: &Tensor<f64>,
    target: &Tensor<f64>,
    mask: &Tensor<f64>,
) -> Result<Tensor<f64>, DiffError> {
    let count: f64 = mask.data().iter().sum();
    if !(count > 0.0) {
        return Err(DiffError::Shape { op: "gaussian_nll", detail: "mask selects no cells".into() });
    }
    let diff = g.sub(target, mu)?;
    let z = g.div(&diff, sigma)?;
    let z2 = g.square(&z)?;
    let half = g.scale(&z2, 0.5)?;
    let ls = g.ln(sigma)?;
    let cell = g.add(&ls, &half)?;
    let masked = g.mul(&cell, mask)?;
    let total = g.sum(&masked, None)?;
    g.scale(&total, 1.0 / count)
}

fn flags(p: &[bool]) -> impl Iterator<Item = f64> + '_ {
    p.iter().map(|&b| if b { 1.0 } else { 0.0 })
}

/// Zeroes the dropped assets and rescales the rest, on one window `[L, N, CHANNELS]`.
fn drop_assets(values: &mut [f64], present: &mut [f64], n: usize, dropped: &[usize], p: f64) {
    let len = values.len() / (n * CHANNELS);
    for c in 0..CHANNELS {
        let idx = |t: usize, i: usize| (t * n + i) * CHANNELS + c;
        let mut rows: Vec<Vec<Option<f64>>> = (0..n)
            .map(|i| (0..len).map(|t| (present[idx(t, i)] > 0.0).then_some(values[idx(t, i)])).collect())
            .collect();
        apply_dropout(&mut rows, dropped, p);
        for (i, row) in rows.iter().enumerate() {
            for (t, cell) in row.iter().enumerate() {
                values[idx(t, i)] = cell.unwrap_or(0.0);
                present[idx(t, i)] = if cell.is_some() { 1.0 } else { 0.0 };
            }
        }
    }
}

/// Windows of inputs `[s, s + L)` for each start `s`.
fn input_batch(data: &DenseReturns, starts: &[usize], len: usize) -> WindowBatch {
    let mut values = Vec::with_capacity(starts.len() * len * data.n_assets * CHANNELS);
    let mut present = Vec::with_capacity(values.capacity());
    for &s in starts {
        let (v, p) = data.cells(s..s + len);
        values.extend_from_slice(v);
        present.extend(flags(p));
    }
    WindowBatch { batch: starts.len(), len, n_assets: data.n_assets, values, present }
}

/// Targets `[s + 1, s + L + 1)` for each start, with a presence mask.
fn target_batch(data: &DenseReturns, starts: &[usize], len: usize) -> (Vec<f64>, Vec<f64>) {
    let mut values = Vec::new();
    let mut mask = Vec::new();
    for &s in starts {
        let (v, p) = data.cells(s + 1..s + len + 1);
        values.extend_from_slice(v);
        mask.extend(flags(p));
    }
    (values, mask)
}

/// Result of [`held_out_nll`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeldOut {
    pub nll: f64,
    pub cells: usize,
    /// First step of the evaluated panel that was scored.
    pub first_step: usize,
}

fn held_out_dense(model: &Forecaster, data: &DenseReturns, from: usize) -> Result<HeldOut, ForecastError> {
    let l = model.config.context_len;
    let first = from.max(l);
    let targets: Vec<usize> = (first..data.len).collect();
    let (mut sum, mut cells) = (0.0, 0usize);
    for chunk in targets.chunks(EVAL_CHUNK) {
        let starts: Vec<usize> = chunk.iter().map(|t| t - l).collect();
        let forecasts = model.predict_last(&input_batch(data, &starts, l))?;
        for (&t, f) in chunk.iter().zip(&forecasts) {
            let (v, p) = data.cells(t..t + 1);
            for i in 0..data.n_assets {
                for c in 0..CHANNELS {
                    let j = i * CHANNELS + c;
                    if p[j] {
                        let z = (v[j] - f.mu[i][c]) / f.sigma[i][c];
                        sum += f.sigma[i][c].ln() + 0.5 * z * z;
                        cells += 1;
                    }
                }
            }
        }
    }
    if cells == 0 {
        return Err(ForecastError::Shape("no scorable target cells".into()));
    }
    Ok(HeldOut { nll: sum / cells as f64, cells, first_step: first - from })
}

/// One-step-ahead NLL over `eval`, each target predicted from the `context_len`
/// returns before it. The tail of `context` supplies history for the first
/// steps of `eval`; steps without a full window are skipped.
pub fn held_out_nll(model: &Forecaster, context: &ReturnPanel, eval: &ReturnPanel) -> Result<HeldOut, ForecastError> {
    let ctx = DenseReturns::from_panel(context);
    let ev = DenseReturns::from_panel(eval);
    if ctx.n_assets != ev.n_assets || ev.n_assets != model.n_assets {
        return Err(ForecastError::Shape("panels and model disagree on the asset count".into()));
    }
    let l = model.config.context_len;
    let joined = ctx.joined_after(&ev, l);
    let offset = joined.len - ev.len;
    held_out_dense(model, &joined, offset)
}

fn diverged(epoch: usize, e: ForecastError) -> ForecastError {
    match e {
        ForecastError::Diff(DiffError::NonFinite { .. }) | ForecastError::Layer { source: DiffError::NonFinite { .. }, .. } => {
            ForecastError::Diverged { epoch, detail: e.to_string() }
        }
        other => other,
    }
}

/// Trains on `train`, selecting the epoch with the lowest one-step NLL on `val`.
///
/// Training windows are teacher-forced: every step of a window predicts the
/// next step's returns. Market-value dropout is applied to the inputs only.
pub fn train<R: Rng + ?Sized>(
    train: &ReturnPanel,
    val: &ReturnPanel,
    config: &ForecastConfig,
    tcfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainReport, ForecastError> {
    config.validate()?;
    tcfg.validate()?;
    let l = config.context_len;
    let data = DenseReturns::from_panel(train);
    if data.len < l + 1 {
        return Err(ForecastError::EmptyTrainingSet { needed: l + 1 });
    }
    let val_data = data.joined_after(&DenseReturns::from_panel(val), l);
    let val_from = val_data.len - val.len();
    if val.n_assets() != train.n_assets() {
        return Err(ForecastError::Shape("train and validation panels disagree on the asset count".into()));
    }
    let mut model = Forecaster::new(config.clone(), data.n_assets, rng)?;
    let adam = Adam::with_lr(tcfg.lr);
    let mut starts: Vec<usize> = (0..data.len - l).collect();
    let mut curve = Vec::with_capacity(tcfg.epochs);
    let mut best: Option<(usize, f64, Forecaster)> = None;
    for epoch in 1..=tcfg.epochs {
        starts.shuffle(rng);
        let (mut sum, mut cells) = (0.0, 0.0);
        for chunk in starts.chunks(tcfg.batch_size) {
            let mut batch = input_batch(&data, chunk, l);
            if config.dropout_p > 0.0 {
                let w = l * data.n_assets * CHANNELS;
                for b in 0..chunk.len() {
                    let dropped = select_dropped(&train.market_value, config.dropout_p, config.tau, config.mv_scale, rng)?;
                    let range = b * w..(b + 1) * w;
                    drop_assets(&mut batch.values[range.clone()], &mut batch.present[range], data.n_assets, &dropped, config.dropout_p);
                }
            }
            let (target, mask) = target_batch(&data, chunk, l);
            let count: f64 = mask.iter().sum();
            if count == 0.0 {
                continue;
            }
            let rows = batch.rows();
            let step = (|| {
                let mut g = Graph::new();
                let p = g.bind(&model.params);
                let heads = network(&mut g, &p, config, &batch)?;
                let t = Tensor::from_parts(vec![rows, CHANNELS], target);
                let m = Tensor::from_parts(vec![rows, CHANNELS], mask);
                let loss = gaussian_nll(&mut g, &heads.mu, &heads.sigma, &t, &m)?;
                let mut grads = g.backward(&loss)?;
                clip_grad_norm(&mut grads, tcfg.grad_clip);
                model.params.adam_step(&grads, &adam)?;
                Ok::<f64, ForecastError>(loss.item()?)
            })()
            .map_err(|e| diverged(epoch, e))?;
            sum += step * count;
            cells += count;
        }
        let train_nll = sum / cells;
        let val_nll = held_out_dense(&model, &val_data, val_from).map_err(|e| diverged(epoch, e))?.nll;
        if !train_nll.is_finite() || !val_nll.is_finite() {
            return Err(ForecastError::Diverged { epoch, detail: format!("train NLL {}, validation NLL {}", train_nll, val_nll) });
        }
        info!("forecaster epoch {}: train NLL {:.5}, validation NLL {:.5}", epoch, train_nll, val_nll);
        curve.push(LossRow { epoch, train_nll, val_nll });
        if best.as_ref().is_none_or(|(_, v, _)| val_nll < *v) {
            best = Some((epoch, val_nll, model.clone()));
        }
    }
    let (best_epoch, best_val_nll, model) = match best {
        Some(b) => b,
        None => {
            let v = held_out_dense(&model, &val_data, val_from)?.nll;
            (0, v, model)
        }
    };
    Ok(TrainReport { model, curve, best_epoch, best_val_nll })
}

pub fn write_loss_curve<W: Write>(rows: &[LossRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{}", LOSS_HEADER)?;
    for r in rows {
        writeln!(w, "{},{},{}", r.epoch, r.train_nll, r.val_nll)?;
    }
    Ok(())
}
