mod common;

use common::{max_fd_error, random_tensor};
use hedgelab::diffcore::{ParamStore, Tensor};
use hedgelab::forecaster::{
    gaussian_nll, held_out_nll, low_rank_decode, low_rank_encode, network, sample_paths, train, ConstantGaussian,
    ForecastConfig, ForecastError, Forecaster, TrainConfig, WindowBatch, CHANNELS,
};
use hedgelab::marketdata::ReturnPanel;
use hedgelab::synthetic::SyntheticPanel;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    t.data().chunks(t.shape()[1]).map(|r| r.to_vec()).collect()
}

/// `softmax(Q K^T / sqrt(d)) K` written out row by row.
fn attention_oracle(keys: &[Vec<f64>], queries: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = keys[0].len();
    queries
        .iter()
        .map(|q| {
            let s: Vec<f64> = keys.iter().map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()).collect();
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
            (0..d).map(|j| keys.iter().zip(&s).map(|(k, v)| (v - m).exp() / z * k[j]).sum()).collect()
        })
        .collect()
}

#[test]
fn encode_is_exactly_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let n = rng.random_range(1..12);
        let e = random_tensor(&mut rng, &[n, 6], -2.0, 2.0);
        let wq = random_tensor(&mut rng, &[3, 6], -2.0, 2.0);
        let base = low_rank_encode(&e, &wq).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let er = rows(&e);
        let permuted = Tensor::new(vec![n, 6], perm.iter().flat_map(|&i| er[i].clone()).collect()).unwrap();
        let other = low_rank_encode(&permuted, &wq).unwrap();
        assert_eq!(base.data(), other.data());
        for (a, b) in rows(&base).iter().zip(attention_oracle(&er, &rows(&wq))) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn decode_follows_its_queries() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = random_tensor(&mut rng, &[1, 4], -1.0, 1.0);
    let q = random_tensor(&mut rng, &[5, 4], -1.0, 1.0);
    let out = low_rank_decode(&h, &q).unwrap();
    for r in rows(&out) {
        assert_eq!(r, h.to_vec());
    }
    let h = random_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let out = low_rank_decode(&h, &q).unwrap();
    for (a, b) in rows(&out).iter().zip(attention_oracle(&rows(&h), &rows(&q))) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    assert!(low_rank_encode(&h, &random_tensor(&mut rng, &[2, 3], 0.0, 1.0)).is_err());
}

fn toy_config() -> ForecastConfig {
    ForecastConfig { k: 2, d_model: 4, n_layers: 1, n_heads: 2, context_len: 5, dropout_p: 0.0, ..Default::default() }
}

fn random_batch(rng: &mut ChaCha8Rng, b: usize, l: usize, n: usize, missing: f64) -> WindowBatch {
    let cells = b * l * n * CHANNELS;
    let present: Vec<f64> = (0..cells).map(|_| if rng.random::<f64>() < missing { 0.0 } else { 1.0 }).collect();
    let values = present.iter().map(|&p| if p > 0.0 { rng.random_range(-0.03..0.03) } else { 0.0 }).collect();
    WindowBatch { batch: b, len: l, n_assets: n, values, present }
}

fn heads(model: &Forecaster, batch: &WindowBatch) -> (Vec<f64>, Vec<f64>) {
    let mut g = hedgelab::Graph::new();
    let p = g.bind(&model.params);
    let h = network(&mut g, &p, &model.config, batch).unwrap();
    (h.mu.to_vec(), h.sigma.to_vec())
}

#[test]
fn future_inputs_do_not_reach_earlier_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = ForecastConfig { n_layers: 2, ..toy_config() };
    let (n, l) = (3, cfg.context_len);
    let model = Forecaster::new(cfg, n, &mut rng).unwrap();
    let batch = random_batch(&mut rng, 2, l, n, 0.1);
    let (mu, sigma) = heads(&model, &batch);
    let step_cells = n * CHANNELS;
    for t in 1..l {
        let mut moved = batch.clone();
        for b in 0..2 {
            for c in 0..step_cells {
                let j = (b * l + t) * step_cells + c;
                moved.values[j] += 0.5;
                moved.present[j] = 1.0;
            }
        }
        let (mu2, sigma2) = heads(&model, &moved);
        let mut changed = false;
        for b in 0..2 {
            for s in 0..l {
                let r = (b * l + s) * step_cells..(b * l + s + 1) * step_cells;
                if s < t {
                    assert_eq!(mu[r.clone()], mu2[r.clone()], "step {} moved by step {}", s, t);
                    assert_eq!(sigma[r.clone()], sigma2[r]);
                } else {
                    changed |= mu[r.clone()] != mu2[r];
                }
            }
        }
        assert!(changed);
    }
}

#[test]
fn nll_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    store.insert("mu", random_tensor(&mut rng, &[6, 4], -0.5, 0.5)).unwrap();
    store.insert("raw", random_tensor(&mut rng, &[6, 4], -1.0, 1.0)).unwrap();
    let target = random_tensor(&mut rng, &[6, 4], -1.0, 1.0);
    let mask = Tensor::new(vec![6, 4], (0..24).map(|i| if i % 5 == 0 { 0.0 } else { 1.0 }).collect()).unwrap();
    let err = max_fd_error(&store, 1e-6, |g, p| {
        let s = g.softplus(&p["raw"])?;
        let sigma = g.shift(&s, 1e-4)?;
        gaussian_nll(g, &p["mu"], &sigma, &target, &mask)
    });
    assert!(err < 1e-4, "{:e}", err);
}

#[test]
fn network_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = toy_config();
    let n = 3;
    let model = Forecaster::new(cfg.clone(), n, &mut rng).unwrap();
    let batch = random_batch(&mut rng, 2, cfg.context_len, n, 0.2);
    let rows = batch.rows();
    let target = random_tensor(&mut rng, &[rows, CHANNELS], -0.03, 0.03);
    let mask = Tensor::new(vec![rows, CHANNELS], (0..rows * CHANNELS).map(|i| if i % 7 == 3 { 0.0 } else { 1.0 }).collect()).unwrap();
    let err = max_fd_error(&model.params, 1e-6, |g, p| {
        let h = network(g, p, &cfg, &batch).map_err(|e| match e {
            ForecastError::Diff(d) | ForecastError::Layer { source: d, .. } => d,
            other => panic!("{}", other),
        })?;
        gaussian_nll(g, &h.mu, &h.sigma, &target, &mask)
    });
    assert!(err < 1e-4, "{:e}", err);
}

#[test]
fn sigma_respects_the_floor_and_forecasts_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for seed in 0..20 {
        let model = Forecaster::new(toy_config(), 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let batch = random_batch(&mut rng, 3, 5, 4, 0.3);
        let (_, sigma) = heads(&model, &batch);
        assert!(sigma.iter().all(|&s| s >= model.config.sigma_floor));
        assert_eq!(model.predict_last(&batch).unwrap(), model.predict_last(&batch).unwrap());
    }
}

fn panels(seed: u64, n_dates: usize) -> (ReturnPanel, ReturnPanel, hedgelab::marketdata::PricePanel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prices = SyntheticPanel { n_dates, ..Default::default() }.generate(&mut rng).unwrap();
    let r = prices.to_log_returns().unwrap();
    let cut = r.len() * 3 / 4;
    (r.slice_dates(0..cut), r.slice_dates(cut..r.len()), prices)
}

fn small_training() -> (ForecastConfig, TrainConfig) {
    let cfg = ForecastConfig { k: 2, d_model: 8, n_layers: 1, n_heads: 2, context_len: 8, ..Default::default() };
    (cfg, TrainConfig { epochs: 12, batch_size: 32, lr: 3e-3, ..Default::default() })
}

#[test]
fn training_beats_the_pooled_constant_gaussian() {
    let (tr, val, _) = panels(7, 320);
    let (cfg, tcfg) = small_training();
    let report = train(&tr, &val, &cfg, &tcfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let pooled = ConstantGaussian::fit_pooled(&tr).unwrap();
    let baseline = pooled.panel_nll(&tr, 0).unwrap();
    let last = report.curve.last().unwrap().train_nll;
    assert!(last < baseline, "train {} vs baseline {}", last, baseline);
    let held = held_out_nll(&report.model, &tr, &val).unwrap();
    assert!(held.nll < pooled.panel_nll(&val, 0).unwrap());
    assert_eq!(held.nll, report.best_val_nll);
}

#[test]
fn training_is_reproducible_and_rejects_short_panels() {
    let (tr, val, _) = panels(9, 120);
    let (cfg, mut tcfg) = small_training();
    tcfg.epochs = 3;
    let a = train(&tr, &val, &cfg, &tcfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = train(&tr, &val, &cfg, &tcfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a.curve, b.curve);
    assert!(a.model.params.bit_eq(&b.model.params));
    let short = tr.slice_dates(0..cfg.context_len);
    assert!(matches!(
        train(&short, &val, &cfg, &tcfg, &mut ChaCha8Rng::seed_from_u64(1)),
        Err(ForecastError::EmptyTrainingSet { .. })
    ));
}

#[test]
fn sampled_paths_are_positive_and_seeded() {
    let (_, _, prices) = panels(10, 40);
    let model = Forecaster::new(toy_config(), 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let a = sample_paths(&model, &prices, 15, 30, 4).unwrap();
    let b = sample_paths(&model, &prices, 15, 30, 4).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.n_paths(), a.len(), a.n_assets()), (30, 16, 2));
    assert!(a.data().iter().all(|&s| s > 0.0 && s.is_finite()));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("forecaster.ckpt");
    let model = Forecaster::new(toy_config(), 3, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    model.save(&path).unwrap();
    let back = Forecaster::load(toy_config(), 3, &path).unwrap();
    assert!(back.params.bit_eq(&model.params));
    assert!(Forecaster::load(toy_config(), 4, &path).is_err());
}

