//! Network definition: missing-value fill, asset embedding, low-rank asset
//! attention, causal temporal attention over the latent assets, decoding back
//! to assets and Gaussian heads.
//!
//! All stages run on a batch of `B` windows of `L` steps over `N` assets at
//! once. Row orders are noted per stage; `G = B * L` counts (window, step)
//! pairs.

use std::collections::BTreeMap;

use rand::Rng;

use super::{at, ForecastError};
use crate::diffcore::{glorot, DiffError, Graph, ParamStore, Tensor};

/// Return channels per asset (open, high, low, close).
pub const CHANNELS: usize = 4;

const MASK: f64 = -1e9;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastConfig {
    /// Latent asset count.
    pub k: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Steps of history per window.
    pub context_len: usize,
    pub sigma_floor: f64,
    /// Market-value dropout fraction during training.
    pub dropout_p: f64,
    /// Market-value dropout temperature.
    pub tau: f64,
    pub mv_scale: crate::marketdata::MvScale,
    /// Multiplies filled returns before the embedding so daily moves are O(1).
    pub input_scale: f64,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        ForecastConfig {
            k: 11,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            context_len: 32,
            sigma_floor: 1e-4,
            dropout_p: 0.1,
            tau: 1.0,
            mv_scale: crate::marketdata::MvScale::Raw,
            input_scale: 100.0,
        }
    }
}

impl ForecastConfig {
    pub fn validate(&self) -> Result<(), ForecastError> {
        let bad = |m: String| Err(ForecastError::Config(m));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.context_len < 2 {
            return bad(format!("context_len must be at least 2, got {}", self.context_len));
        }
        if !(self.sigma_floor > 0.0) {
            return bad(format!("sigma_floor must be positive, got {}", self.sigma_floor));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if !(0.0..1.0).contains(&self.dropout_p) || !(self.tau > 0.0) {
            return bad(format!("dropout_p must lie in [0, 1) and tau be positive, got {} and {}", self.dropout_p, self.tau));
        }
        if !(self.input_scale > 0.0 && self.input_scale.is_finite()) {
            return bad(format!("input_scale must be positive, got {}", self.input_scale));
        }
        Ok(())
    }
}

/// Per-asset Gaussian parameters for the next step's returns, `[asset][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianForecast {
    pub mu: Vec<[f64; CHANNELS]>,
    pub sigma: Vec<[f64; CHANNELS]>,
}

/// A batch of return windows, `[B, L, N, CHANNELS]` row-major.
///
/// Missing cells hold 0 in `values` and 0 in `present`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    pub batch: usize,
    pub len: usize,
    pub n_assets: usize,
    pub values: Vec<f64>,
    pub present: Vec<f64>,
}

impl WindowBatch {
    pub fn rows(&self) -> usize {
        self.batch * self.len * self.n_assets
    }
}

/// Network outputs for every step of every window, `[B * L * N, CHANNELS]`.
pub struct Heads {
    pub mu: Tensor<f64>,
    pub sigma: Tensor<f64>,
}

/// Parameters plus the configuration and asset count they were built for.
#[derive(Clone, Debug)]
pub struct Forecaster {
    pub config: ForecastConfig,
    pub n_assets: usize,
    pub params: ParamStore<f64>,
}

fn softplus_inv(y: f64) -> f64 {
    y.exp_m1().ln()
}

impl Forecaster {
    pub fn new<R: Rng + ?Sized>(config: ForecastConfig, n_assets: usize, rng: &mut R) -> Result<Self, ForecastError> {
        config.validate()?;
        if n_assets == 0 {
            return Err(ForecastError::Config("the asset universe is empty".into()));
        }
        let d = config.d_model;
        let mut p = ParamStore::new();
        let mut add = |name: &str, t: Tensor<f64>| p.insert(name, t);
        add("fill.w1", Tensor::zeros(&[CHANNELS]))?;
        add("fill.w2", Tensor::zeros(&[CHANNELS]))?;
        add("embed.w", glorot(rng, CHANNELS, d, 1.0))?;
        add("embed.b", Tensor::zeros(&[d]))?;
        add("embed.asset", glorot(rng, n_assets, d, 1.0))?;
        add("encode.wq", glorot(rng, config.k, d, 1.0))?;
        add("decode.q", glorot(rng, n_assets, d, 1.0))?;
        for l in 0..config.n_layers {
            let b = |s: &str| format!("block{}.{}", l, s);
            add(&b("ln1.g"), Tensor::full(&[d], 1.0))?;
            add(&b("ln1.b"), Tensor::zeros(&[d]))?;
            for w in ["attn.wq", "attn.wk", "attn.wv"] {
                add(&b(w), glorot(rng, d, d, 1.0))?;
            }
            add(&b("attn.wo"), glorot(rng, d, d, 0.5))?;
            add(&b("attn.bo"), Tensor::zeros(&[d]))?;
            add(&b("ln2.g"), Tensor::full(&[d], 1.0))?;
            add(&b("ln2.b"), Tensor::zeros(&[d]))?;
            add(&b("ffn.w1"), glorot(rng, d, 2 * d, 1.0))?;
            add(&b("ffn.b1"), Tensor::zeros(&[2 * d]))?;
            add(&b("ffn.w2"), glorot(rng, 2 * d, d, 0.5))?;
            add(&b("ffn.b2"), Tensor::zeros(&[d]))?;
        }
        add("final_ln.g", Tensor::full(&[d], 1.0))?;
        add("final_ln.b", Tensor::zeros(&[d]))?;
        add("head_ln.g", Tensor::full(&[d], 1.0))?;
        add("head_ln.b", Tensor::zeros(&[d]))?;
        add("head.w", glorot(rng, d, 2 * CHANNELS, 0.1))?;
        // Start from a daily volatility around 1%.
        let mut bias = vec![0.0; CHANNELS];
        bias.extend(std::iter::repeat_n(softplus_inv(0.01), CHANNELS));
        add("head.b", Tensor::vector(bias)?)?;
        Ok(Forecaster { config, n_assets, params: p })
    }

    /// Reads parameters and checks names and shapes against a fresh network.
    pub fn from_params(config: ForecastConfig, n_assets: usize, params: ParamStore<f64>) -> Result<Self, ForecastError> {
        let fresh = Forecaster::new(config, n_assets, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        let names: Vec<&str> = params.names().collect();
        if names != fresh.params.names().collect::<Vec<_>>() {
            return Err(ForecastError::Config(format!("checkpoint parameters {:?} do not match the network", names)));
        }
        for (name, t) in fresh.params.iter() {
            let got = params.require(name)?.shape();
            if got != t.shape() {
                return Err(ForecastError::Config(format!("{} has shape {:?}, network expects {:?}", name, got, t.shape())));
            }
        }
        Ok(Forecaster { params, ..fresh })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ForecastError> {
        Ok(crate::diffcore::save_checkpoint(&self.params, path)?)
    }

    pub fn load(config: ForecastConfig, n_assets: usize, path: &std::path::Path) -> Result<Self, ForecastError> {
        Forecaster::from_params(config, n_assets, crate::diffcore::load_checkpoint(path)?)
    }

    /// Forecast of the step after the window `[L][N][CHANNELS]`, whose cells must all be present.
    pub fn forward(&self, window: &[Vec<[f64; CHANNELS]>]) -> Result<GaussianForecast, ForecastError> {
        let n = self.n_assets;
        if window.len() != self.config.context_len || window.iter().any(|row| row.len() != n) {
            return Err(ForecastError::Shape(format!(
                "window must be {} steps of {} assets",
                self.config.context_len, n
            )));
        }
        let values: Vec<f64> = window.iter().flatten().flatten().copied().collect();
        let batch = WindowBatch { batch: 1, len: window.len(), n_assets: n, present: vec![1.0; values.len()], values };
        let mut out = self.predict_last(&batch)?;
        Ok(out.pop().expect("one window"))
    }

    /// Forecasts for the step after each window of the batch.
    pub fn predict_last(&self, batch: &WindowBatch) -> Result<Vec<GaussianForecast>, ForecastError> {
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let heads = network(&mut g, &p, &self.config, batch)?;
        let n = batch.n_assets;
        let row = |t: &Tensor<f64>, b: usize, i: usize| -> [f64; CHANNELS] {
            let r = (b * batch.len + batch.len - 1) * n + i;
            t.data()[r * CHANNELS..(r + 1) * CHANNELS].try_into().expect("channel row")
        };
        Ok((0..batch.batch)
            .map(|b| GaussianForecast {
                mu: (0..n).map(|i| row(&heads.mu, b, i)).collect(),
                sigma: (0..n).map(|i| row(&heads.sigma, b, i)).collect(),
            })
            .collect())
    }
}

type Bound = BTreeMap<String, Tensor<f64>>;

/// `softmax(Q K^T / sqrt(d)) K` per group, with `Q [G, r, d]` given as an unbatched
/// `[r, d]` matrix that every group shares.
fn shared_query_attention(
    g: &mut Graph<f64>,
    q: &Tensor<f64>,
    keys: &Tensor<f64>,
    groups: usize,
) -> Result<Tensor<f64>, DiffError> {
    let (r, d) = (q.shape()[0], q.shape()[1]);
    let idx: Vec<usize> = (0..groups).flat_map(|_| 0..r).collect();
    let rep = g.gather_rows(q, idx)?;
    let rep = g.reshape(&rep, &[groups, r, d])?;
    let scores = g.batch_matmul(&rep, keys, true)?;
    let scores = g.scale(&scores, 1.0 / (d as f64).sqrt())?;
    let weights = g.softmax(&scores, 2)?;
    g.batch_matmul(&weights, keys, false)
}

/// Latent rows `softmax(W_Q E^T / sqrt(d)) E` for asset rows `E [n, d]`.
pub fn low_rank_encode(e: &Tensor<f64>, wq: &Tensor<f64>) -> Result<Tensor<f64>, DiffError> {
    attend_rows(e, wq)
}

/// Asset rows `softmax(Q H^T / sqrt(d)) H` for latent rows `H [k, d]` and queries `Q [n, d]`.
pub fn low_rank_decode(h: &Tensor<f64>, queries: &Tensor<f64>) -> Result<Tensor<f64>, DiffError> {
    attend_rows(h, queries)
}

/// Sum of `terms` in ascending order, so the result does not depend on the order given.
fn canonical_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

/// Direct evaluation of `softmax(Q K^T / sqrt(d)) K`. Every reduction over
/// the rows of `keys` is summed in sorted order, which makes the result
/// exactly invariant to a permutation of those rows.
fn attend_rows(keys: &Tensor<f64>, q: &Tensor<f64>) -> Result<Tensor<f64>, DiffError> {
    if keys.rank() != 2 || q.rank() != 2 || keys.shape()[1] != q.shape()[1] || keys.shape()[0] == 0 {
        return Err(DiffError::Shape {
            op: "low_rank_attention",
            detail: format!("rows {:?} and queries {:?} must be [n, d] and [r, d] with n >= 1", keys.shape(), q.shape()),
        });
    }
    let (n, d, r) = (keys.shape()[0], keys.shape()[1], q.shape()[0]);
    let (k, qd) = (keys.data(), q.data());
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Vec::with_capacity(r * d);
    let mut terms = vec![0.0; n];
    for qi in qd.chunks(d) {
        let scores: Vec<f64> = k.chunks(d).map(|ki| qi.iter().zip(ki).map(|(a, b)| a * b).sum::<f64>() * scale).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        terms.copy_from_slice(&exps);
        let denom = canonical_sum(&mut terms);
        let w: Vec<f64> = exps.iter().map(|e| e / denom).collect();
        for j in 0..d {
            for i in 0..n {
                terms[i] = w[i] * k[i * d + j];
            }
            out.push(canonical_sum(&mut terms));
        }
    }
    Tensor::new(vec![r, d], out)
}

fn layer_norm(g: &mut Graph<f64>, x: &Tensor<f64>, gain: &Tensor<f64>, bias: &Tensor<f64>) -> Result<Tensor<f64>, DiffError> {
    let mean = g.mean(x, Some(1))?;
    let xc = g.sub(x, &mean)?;
    let sq = g.square(&xc)?;
    let var = g.mean(&sq, Some(1))?;
    let var = g.shift(&var, LN_EPS)?;
    let sd = g.sqrt(&var)?;
    let y = g.div(&xc, &sd)?;
    let y = g.mul(&y, gain)?;
    g.add(&y, bias)
}

/// Additive causal mask `[L, L]`: zero on and below the diagonal.
fn causal_mask(len: usize) -> Tensor<f64> {
    let data = (0..len * len).map(|i| if i % len > i / len { MASK } else { 0.0 }).collect();
    Tensor::from_parts(vec![len, len], data)
}

/// Sinusoidal position encoding `[L, d]`.
pub fn position_encoding(len: usize, d: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for j in 0..d {
            let freq = 10000f64.powf(-((j / 2 * 2) as f64) / d as f64);
            let a = pos as f64 * freq;
            data.push(if j % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    Tensor::from_parts(vec![len, d], data)
}

/// Pre-norm attention block over sequences `x [S * L, d]` (sequence-major rows).
fn temporal_block(
    g: &mut Graph<f64>,
    p: &Bound,
    layer: usize,
    cfg: &ForecastConfig,
    x: &Tensor<f64>,
    seqs: usize,
    len: usize,
) -> Result<Tensor<f64>, DiffError> {
    let w = |s: &str| &p[&format!("block{}.{}", layer, s)];
    let d = cfg.d_model;
    let dh = d / cfg.n_heads;
    let h = layer_norm(g, x, w("ln1.g"), w("ln1.b"))?;
    let q = g.matmul(&h, w("attn.wq"))?;
    let k = g.matmul(&h, w("attn.wk"))?;
    let v = g.matmul(&h, w("attn.wv"))?;
    let mask = causal_mask(len);
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for head in 0..cfg.n_heads {
        let split = |g: &mut Graph<f64>, t: &Tensor<f64>| -> Result<Tensor<f64>, DiffError> {
            let s = g.slice(t, 1, head * dh, (head + 1) * dh)?;
            g.reshape(&s, &[seqs, len, dh])
        };
        let (qh, kh, vh) = (split(g, &q)?, split(g, &k)?, split(g, &v)?);
        let scores = g.batch_matmul(&qh, &kh, true)?;
        let scores = g.scale(&scores, 1.0 / (dh as f64).sqrt())?;
        let scores = g.add(&scores, &mask)?;
        let att = g.softmax(&scores, 2)?;
        let o = g.batch_matmul(&att, &vh, false)?;
        heads.push(g.reshape(&o, &[seqs * len, dh])?);
    }
    let refs: Vec<&Tensor<f64>> = heads.iter().collect();
    let cat = g.concat(&refs, 1)?;
    let proj = g.linear(&cat, w("attn.wo"), w("attn.bo"))?;
    let x = g.add(x, &proj)?;
    let h = layer_norm(g, &x, w("ln2.g"), w("ln2.b"))?;
    let f = g.linear(&h, w("ffn.w1"), w("ffn.b1"))?;
    let f = g.tanh(&f)?;
    let f = g.linear(&f, w("ffn.w2"), w("ffn.b2"))?;
    g.add(&x, &f)
}

/// Full forward pass for every step of every window. Row `(b * L + t) * N + i`
/// of each head forecasts the returns after step `t` of asset `i` in window `b`.
pub fn network(g: &mut Graph<f64>, p: &Bound, cfg: &ForecastConfig, batch: &WindowBatch) -> Result<Heads, ForecastError> {
    let (b, l, n, d, k) = (batch.batch, batch.len, batch.n_assets, cfg.d_model, cfg.k);
    let rows = batch.rows();
    if batch.values.len() != rows * CHANNELS || batch.present.len() != rows * CHANNELS || n != p["decode.q"].shape()[0] {
        return Err(ForecastError::Shape(format!("window batch does not match {} assets", p["decode.q"].shape()[0])));
    }
    let gsz = b * l;

    // Missing cells take w1, present cells x + w2 x.
    let filled = (|| {
        let x = g.constant(Tensor::from_parts(vec![rows, CHANNELS], batch.values.clone()));
        let m = g.constant(Tensor::from_parts(vec![rows, CHANNELS], batch.present.clone()));
        let absent = g.constant(Tensor::from_parts(vec![rows, CHANNELS], batch.present.iter().map(|v| 1.0 - v).collect()));
        let xw = g.mul(&x, &p["fill.w2"])?;
        let res = g.add(&x, &xw)?;
        let res = g.mul(&res, &m)?;
        let fill = g.mul(&absent, &p["fill.w1"])?;
        let filled = g.add(&res, &fill)?;
        g.scale(&filled, cfg.input_scale)
    })()
    .map_err(at("fill"))?;

    // E [G, N, d]
    let e = (|| {
        let e = g.linear(&filled, &p["embed.w"], &p["embed.b"])?;
        let e = g.reshape(&e, &[gsz, n, d])?;
        g.add(&e, &p["embed.asset"])
    })()
    .map_err(at("embed"))?;

    // Z [G, k, d], rows (window, step, latent)
    let z = shared_query_attention(g, &p["encode.wq"], &e, gsz).map_err(at("encode"))?;

    // Sequences per (window, latent): rows (window, latent, step).
    let seq_order: Vec<usize> = (0..b)
        .flat_map(|bi| (0..k).flat_map(move |j| (0..l).map(move |t| (bi * l + t) * k + j)))
        .collect();
    let mut inverse = vec![0; seq_order.len()];
    for (pos, &src) in seq_order.iter().enumerate() {
        inverse[src] = pos;
    }
    let mut h = (|| {
        let flat = g.reshape(&z, &[gsz * k, d])?;
        let seq = g.gather_rows(&flat, seq_order)?;
        let seq = g.reshape(&seq, &[b * k, l, d])?;
        let seq = g.add(&seq, &position_encoding(l, d))?;
        g.reshape(&seq, &[b * k * l, d])
    })()
    .map_err(at("temporal"))?;
    for layer in 0..cfg.n_layers {
        h = temporal_block(g, p, layer, cfg, &h, b * k, l).map_err(|e| ForecastError::Layer {
            layer: format!("temporal block {}", layer),
            source: e,
        })?;
    }
    let latent = (|| {
        let h = layer_norm(g, &h, &p["final_ln.g"], &p["final_ln.b"])?;
        let back = g.gather_rows(&h, inverse)?;
        g.reshape(&back, &[gsz, k, d])
    })()
    .map_err(at("temporal"))?;

    // Back to assets with a residual from each asset's own embedding.
    let dec = (|| {
        let dec = shared_query_attention(g, &p["decode.q"], &latent, gsz)?;
        let dec = g.add(&dec, &e)?;
        g.reshape(&dec, &[rows, d])
    })()
    .map_err(at("decode"))?;

    let (mu, sigma) = (|| {
        let dec = layer_norm(g, &dec, &p["head_ln.g"], &p["head_ln.b"])?;
        let out = g.linear(&dec, &p["head.w"], &p["head.b"])?;
        let mu = g.slice(&out, 1, 0, CHANNELS)?;
        let raw = g.slice(&out, 1, CHANNELS, 2 * CHANNELS)?;
        let sp = g.softplus(&raw)?;
        let sigma = g.shift(&sp, cfg.sigma_floor)?;
        Ok::<_, DiffError>((mu, sigma))
    })()
    .map_err(at("head"))?;
    Ok(Heads { mu, sigma })
}
