//! Acceptance suite. Each test checks one criterion, prints one PASS/FAIL
//! line with its runtime and budget, and fails if the criterion or the budget
//! is missed. Criteria run one at a time so runtimes are not inflated by each
//! other. Run with `cargo test -p hedgelab-cli --test acceptance -- --nocapture`
//! to see the summary lines.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use hedgelab::agent::{bc_pretrain, compute_gae, held_out_mae, policy_forward, value_forward, value_targets, Agent, BcConfig, NetConfig, Obs, WindowBatch};
use hedgelab::diffcore::{DiffError, Graph, OpKind, ParamStore, Tensor};
use hedgelab::forecaster::{gaussian_nll, network, ForecastConfig, ForecastError, Forecaster, CHANNELS};
use hedgelab::pricing::{bs_call_price, bs_delta, implied_delta, implied_vol, mc_risk_neutral_price, BsInputs, ExpertPair, GbmSource, TRADING_DAYS};
use hedgelab::{EpisodeSpec, HedgeEnv};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BIN: &str = env!("CARGO_BIN_EXE_hedgelab");

static SERIAL: Mutex<()> = Mutex::new(());

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

/// Prints the criterion's line and fails the test unless it passed within budget.
fn verdict(n: u32, title: &str, pass: bool, detail: String, elapsed: Duration, budget_s: u64) {
    let in_time = elapsed.as_secs_f64() <= budget_s as f64;
    let ok = pass && in_time;
    let line = format!(
        "criterion {:>2} {} {}: {} [{:.1}s, budget {}s{}]",
        n,
        if ok { "PASS" } else { "FAIL" },
        title,
        detail,
        elapsed.as_secs_f64(),
        budget_s,
        if in_time { "" } else { ", over budget" }
    );
    println!("{}", line);
    assert!(ok, "{}", line);
}

// ---------------------------------------------------------------- library criteria

type Bound = BTreeMap<String, Tensor<f64>>;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Worst relative error between reverse-mode and central-difference gradients.
fn fd_error<F>(store: &ParamStore<f64>, h: f64, loss: F) -> f64
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Tensor<f64>, DiffError>,
{
    let mut g = Graph::new();
    let b = g.bind(store);
    let l = loss(&mut g, &b).unwrap();
    let grads = g.backward(&l).unwrap();
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let b = g.bind(s);
        loss(&mut g, &b).unwrap().item().unwrap()
    };
    let mut worst = 0.0f64;
    for (name, value) in store.iter() {
        for i in 0..value.numel() {
            let bumped = |d: f64| {
                let mut s = store.clone();
                let mut v = value.to_vec();
                v[i] += d;
                s.set(name, Tensor::new(value.shape().to_vec(), v).unwrap()).unwrap();
                eval(&s)
            };
            let numeric = (bumped(h) - bumped(-h)) / (2.0 * h);
            let analytic = grads[name].data()[i];
            worst = worst.max((numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6));
        }
    }
    worst
}

fn op_error(kind: OpKind<f64>, inputs: Vec<Tensor<f64>>, rng: &mut ChaCha8Rng) -> f64 {
    let mut store = ParamStore::new();
    let names: Vec<String> = (0..inputs.len()).map(|i| format!("x{}", i)).collect();
    for (n, t) in names.iter().zip(inputs) {
        store.insert(n, t).unwrap();
    }
    let probe = {
        let mut g = Graph::new();
        let b = g.bind(&store);
        let xs: Vec<&Tensor<f64>> = names.iter().map(|n| &b[n]).collect();
        g.apply(kind.clone(), &xs).unwrap()
    };
    let w = random_tensor(rng, probe.shape(), -1.0, 1.0);
    fd_error(&store, 1e-5, |g, b| {
        let xs: Vec<&Tensor<f64>> = names.iter().map(|n| &b[n]).collect();
        let y = g.apply(kind.clone(), &xs)?;
        let y = g.mul(&y, &w)?;
        g.sum(&y, None)
    })
}

#[test]
fn criterion_01_autodiff_soundness() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut input_rng = ChaCha8Rng::seed_from_u64(7);
    let mut r = |shape: &[usize], lo: f64, hi: f64| random_tensor(&mut input_rng, shape, lo, hi);
    let cases: Vec<(OpKind<f64>, Vec<Tensor<f64>>)> = vec![
        (OpKind::MatMul, vec![r(&[3, 4], -1.0, 1.0), r(&[4, 2], -1.0, 1.0)]),
        (OpKind::BatchMatMul { trans_b: false }, vec![r(&[2, 3, 4], -1.0, 1.0), r(&[2, 4, 2], -1.0, 1.0)]),
        (OpKind::BatchMatMul { trans_b: true }, vec![r(&[2, 3, 4], -1.0, 1.0), r(&[2, 5, 4], -1.0, 1.0)]),
        (OpKind::Add, vec![r(&[3, 4], -1.0, 1.0), r(&[4], -1.0, 1.0)]),
        (OpKind::Sub, vec![r(&[3, 4], -1.0, 1.0), r(&[3, 1], -1.0, 1.0)]),
        (OpKind::Mul, vec![r(&[2, 3], -1.0, 1.0), r(&[2, 3], -1.0, 1.0)]),
        (OpKind::Div, vec![r(&[2, 3], -1.0, 1.0), r(&[3], 0.5, 2.0)]),
        (OpKind::Minimum, vec![r(&[2, 3], -1.0, 0.0), r(&[2, 3], 0.0, 1.0)]),
        (OpKind::Maximum, vec![r(&[2, 3], -1.0, 0.0), r(&[2, 3], 0.0, 1.0)]),
        (OpKind::Exp, vec![r(&[2, 3], -1.0, 1.0)]),
        (OpKind::Ln, vec![r(&[2, 3], 0.2, 3.0)]),
        (OpKind::Tanh, vec![r(&[2, 3], -2.0, 2.0)]),
        (OpKind::Sigmoid, vec![r(&[2, 3], -3.0, 3.0)]),
        (OpKind::Softplus, vec![r(&[2, 3], -3.0, 3.0)]),
        (OpKind::Square, vec![r(&[2, 3], -2.0, 2.0)]),
        (OpKind::Abs, vec![Tensor::vector(vec![-0.9, -0.3, 0.4, 0.8]).unwrap()]),
        (OpKind::Neg, vec![r(&[4], -1.0, 1.0)]),
        (OpKind::Sqrt, vec![r(&[4], 0.5, 2.0)]),
        (OpKind::Scale(-2.5), vec![r(&[4], -1.0, 1.0)]),
        (OpKind::Shift(0.7), vec![r(&[4], -1.0, 1.0)]),
        (OpKind::Clamp { lo: 0.8, hi: 1.2 }, vec![Tensor::vector(vec![0.5, 0.9, 1.1, 1.5]).unwrap()]),
        (OpKind::Softmax { axis: 1 }, vec![r(&[3, 4], -2.0, 2.0)]),
        (OpKind::Softmax { axis: 0 }, vec![r(&[3, 4], -2.0, 2.0)]),
        (OpKind::Sum { axis: Some(0) }, vec![r(&[3, 4], -1.0, 1.0)]),
        (OpKind::Sum { axis: None }, vec![r(&[3, 4], -1.0, 1.0)]),
        (OpKind::Mean { axis: Some(1) }, vec![r(&[3, 4], -1.0, 1.0)]),
        (OpKind::Mean { axis: None }, vec![r(&[2, 2, 2], -1.0, 1.0)]),
        (OpKind::Concat { axis: 1 }, vec![r(&[2, 3], -1.0, 1.0), r(&[2, 1], -1.0, 1.0)]),
        (OpKind::Concat { axis: 0 }, vec![r(&[2, 3], -1.0, 1.0), r(&[1, 3], -1.0, 1.0)]),
        (OpKind::Slice { axis: 1, start: 1, end: 3 }, vec![r(&[2, 4], -1.0, 1.0)]),
        (OpKind::Transpose, vec![r(&[2, 3], -1.0, 1.0)]),
        (OpKind::Reshape(vec![3, 2]), vec![r(&[2, 3], -1.0, 1.0)]),
        (OpKind::GatherRows(vec![2, 0, 2]), vec![r(&[3, 2], -1.0, 1.0)]),
        (
            OpKind::GruCell,
            vec![r(&[2, 3], -1.0, 1.0), r(&[2, 4], -0.9, 0.9), r(&[3, 12], -0.7, 0.7), r(&[4, 12], -0.7, 0.7), r(&[12], -0.3, 0.3)],
        ),
    ];
    let n_ops = cases.len();
    let mut worst = (0.0f64, String::new());
    for (kind, inputs) in cases {
        let name = kind.name().to_string();
        let e = op_error(kind, inputs, &mut rng);
        if e >= worst.0 {
            worst = (e, name);
        }
    }

    // Policy and value networks at toy width.
    let net = NetConfig { frames: 3, embed: 3, gru_hidden: 3, mlp_hidden: 4, sigma_floor: 1e-3, use_gru: true };
    let agent = Agent::new(net, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let hists: Vec<Vec<Obs>> = (0..5)
        .map(|i| (0..=i).map(|_| [rng.random_range(0.9..1.1), rng.random_range(0.0..0.1), rng.random_range(0.0..1.0)]).collect())
        .collect();
    let refs: Vec<&[Obs]> = hists.iter().map(|h| h.as_slice()).collect();
    let batch = WindowBatch::from_histories(&refs, net.frames).with_aux((0..5).map(|_| rng.random_range(-1.0..1.0)).collect());
    let w = random_tensor(&mut rng, &[5, 1], -1.0, 1.0);
    let policy = fd_error(&agent.actor, 1e-6, |g, p| {
        let (mu, sigma) = policy_forward(g, p, &net, &batch)?;
        let s = g.add(&mu, &sigma)?;
        let s = g.mul(&s, &w)?;
        g.sum(&s, None)
    });
    let value = fd_error(&agent.critic, 1e-6, |g, p| {
        let v = value_forward(g, p, &net, &batch)?;
        let v = g.mul(&v, &w)?;
        g.sum(&v, None)
    });

    // Forecaster at toy width, through the Gaussian NLL.
    let cfg = ForecastConfig { k: 2, d_model: 4, n_layers: 1, n_heads: 2, context_len: 5, dropout_p: 0.0, ..Default::default() };
    let n = 3;
    let model = Forecaster::new(cfg.clone(), n, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let cells = 2 * cfg.context_len * n * CHANNELS;
    let fbatch = hedgelab::forecaster::WindowBatch {
        batch: 2,
        len: cfg.context_len,
        n_assets: n,
        values: (0..cells).map(|_| rng.random_range(-0.03..0.03)).collect(),
        present: vec![1.0; cells],
    };
    let rows = fbatch.rows();
    let target = random_tensor(&mut rng, &[rows, CHANNELS], -0.03, 0.03);
    let mask = Tensor::new(vec![rows, CHANNELS], vec![1.0; rows * CHANNELS]).unwrap();
    let forecaster = fd_error(&model.params, 1e-6, |g, p| {
        let h = network(g, p, &cfg, &fbatch).map_err(|e| match e {
            ForecastError::Diff(d) | ForecastError::Layer { source: d, .. } => d,
            other => panic!("{}", other),
        })?;
        gaussian_nll(g, &h.mu, &h.sigma, &target, &mask)
    });

    let pass = worst.0 < 1e-4 && policy < 1e-4 && value < 1e-4 && forecaster < 1e-4;
    let detail = format!(
        "{} op kinds, worst {:.1e} ({}); policy {:.1e}, value {:.1e}, forecaster {:.1e}; tolerance 1e-4",
        n_ops, worst.0, worst.1, policy, value, forecaster
    );
    verdict(1, "autodiff soundness", pass, detail, t0.elapsed(), 60);
}

/// Discounted lognormal expectation of the payoff, composite Simpson in the
/// standard normal variable from the exercise boundary to 12 deviations.
fn quadrature_call(s0: f64, k: f64, r_f: f64, sigma: f64, t: f64) -> f64 {
    let m = (r_f - 0.5 * sigma * sigma) * t;
    let v = sigma * t.sqrt();
    let z_star = ((k / s0).ln() - m) / v;
    let (a, b) = (z_star.max(-12.0), 12.0_f64.max(z_star + 1.0));
    let n = 20_000;
    let h = (b - a) / n as f64;
    let f = |z: f64| (s0 * (m + v * z).exp() - k).max(0.0) * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut sum = f(a) + f(b);
    for i in 1..n {
        sum += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
    }
    (-r_f * t).exp() * sum * h / 3.0
}

fn call(s0: f64, k: f64, r_f: f64, sigma: f64, t: f64) -> f64 {
    bs_call_price(&BsInputs::new(s0, k, r_f, sigma, t).unwrap())
}

#[test]
fn criterion_02_pricing_oracle() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let mut price_err = 0.0f64;
    let mut points = 0;
    for m in [0.8, 0.9, 1.0, 1.1, 1.25] {
        for s in [0.1, 0.2, 0.4, 0.7, 1.2] {
            for t in [0.02, 0.1, 0.25, 0.5, 1.0, 1.5, 2.0, 3.0] {
                price_err = price_err.max((call(100.0 * m, 100.0, 0.02, s, t) - quadrature_call(100.0 * m, 100.0, 0.02, s, t)).abs());
                points += 1;
            }
        }
    }
    let mut iv_err = 0.0f64;
    for m in [0.9, 1.0, 1.1] {
        for t in [0.25, 1.0] {
            for i in 0..=58 {
                let sigma = 0.05 + 1.45 * i as f64 / 58.0;
                let back = implied_vol(call(100.0 * m, 100.0, 0.0, sigma, t), 100.0 * m, 100.0, 0.0, t).unwrap();
                iv_err = iv_err.max((back - sigma).abs());
            }
        }
    }
    let h = 1e-4;
    let mut delta_err = 0.0f64;
    for m in [0.8, 0.95, 1.0, 1.05, 1.2] {
        for sigma in [0.1, 0.2, 0.5, 1.0] {
            for t in [0.05, 0.25, 1.0] {
                let s0 = 100.0 * m;
                let fd = (call(s0 + h, 100.0, 0.01, sigma, t) - call(s0 - h, 100.0, 0.01, sigma, t)) / (2.0 * h);
                delta_err = delta_err.max((fd - implied_delta(s0, 100.0, 0.01, sigma, t).unwrap()).abs());
            }
        }
    }
    let pass = points == 200 && price_err < 1e-6 && iv_err < 1e-6 && delta_err < 1e-5;
    let detail = format!(
        "price vs quadrature {:.1e} on {} points (tol 1e-6), implied vol {:.1e} (tol 1e-6), delta vs FD {:.1e} (tol 1e-5)",
        price_err, points, iv_err, delta_err
    );
    verdict(2, "pricing oracle", pass, detail, t0.elapsed(), 60);
}

#[test]
fn criterion_03_mc_risk_neutral_pricing() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut src = GbmSource { mu: 0.3, sigma: 0.2, dt: 1.0 / TRADING_DAYS, steps: 252 };
    let mc = mc_risk_neutral_price(&mut src, 100.0, 100.0, 0.0, 1.0, 200_000, &mut rng).unwrap();
    let z = (mc.price - 7.965567) / mc.std_error;
    let detail = format!("price {:.5} +- {:.5} (se), {:.2} se from 7.965567", mc.price, mc.std_error, z);
    verdict(3, "MC risk-neutral pricing", z.abs() < 3.0, detail, t0.elapsed(), 120);
}

#[test]
fn criterion_04_rl_identities() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut sum_err, mut exact, mut endpoint_err) = (0.0f64, true, 0.0f64);
    for _ in 0..1000 {
        let n = rng.random_range(1..=40);
        let mut r: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        if rng.random_bool(0.5) {
            r.iter_mut().take(n - 1).for_each(|x| *x = 0.0);
        }
        // Dyadic values keep every sum representable, so identities can be exact.
        let v: Vec<f64> = (0..n).map(|_| (rng.random_range(-3.0..3.0) * 1024.0f64).round() / 1024.0).collect();
        let gamma = rng.random_range(0.9..=1.0);
        let lambda = rng.random_range(0.0..=1.0);
        let next = |t: usize| if t + 1 < n { v[t + 1] } else { 0.0 };
        let delta: Vec<f64> = (0..n).map(|t| r[t] + gamma * next(t) - v[t]).collect();
        let a = compute_gae(&r, &v, gamma, lambda);
        for t in 0..n {
            let explicit: f64 = (0..n - t).map(|i| (gamma * lambda).powi(i as i32) * delta[t + i]).sum();
            sum_err = sum_err.max((a[t] - explicit).abs());
        }
        let ad: Vec<f64> = a.iter().map(|x| (x * 1024.0).round() / 1024.0).collect();
        let targets = value_targets(&ad, &v);
        exact &= (0..n).all(|t| targets[t] - v[t] == ad[t]);
        let td = compute_gae(&r, &v, gamma, 0.0);
        let mc = compute_gae(&r, &v, gamma, 1.0);
        for t in 0..n {
            endpoint_err = endpoint_err.max((td[t] - delta[t]).abs());
            let ret: f64 = (t..n).map(|k| gamma.powi((k - t) as i32) * r[k]).sum();
            endpoint_err = endpoint_err.max((mc[t] - (ret - v[t])).abs());
        }
    }
    let pass = sum_err < 1e-12 && exact && endpoint_err < 1e-12;
    let detail = format!(
        "1000 trajectories: GAE vs double sum {:.1e}, targets - values == advantages {}, lambda endpoints {:.1e}",
        sum_err, if exact { "exact" } else { "NOT exact" }, endpoint_err
    );
    verdict(4, "RL identities", pass, detail, t0.elapsed(), 30);
}

#[test]
fn criterion_05_environment_accounting() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst, mut zero_rewards) = (0.0f64, true);
    for _ in 0..10_000 {
        let steps = rng.random_range(1..=30);
        let c = if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..0.01) };
        let k = rng.random_range(80.0..120.0);
        let spec = EpisodeSpec::gbm(100.0, k, 0.0, rng.random_range(0.05..0.8), steps, c).unwrap();
        let mut env = HedgeEnv::reset(&spec, &mut rng).unwrap();
        loop {
            let tr = env.step(rng.random_range(-0.2..1.2)).unwrap();
            if tr.done {
                break;
            }
            zero_rewards &= tr.reward == 0.0;
        }
        // -V_T + V_0 + (delta . s)_T - C_T, summed in a different order from the environment.
        let (path, acts) = (env.path(), env.actions());
        let gains: f64 = (0..steps).rev().map(|t| acts[t] * (path[t + 1] - path[t])).sum();
        let mut held = vec![0.0];
        held.extend_from_slice(acts);
        held.push(0.0);
        let costs: f64 = (0..=steps).rev().map(|t| c * path[t] * (held[t] - held[t + 1]).abs()).sum();
        let closed = -(path[steps] - k).max(0.0) + spec.v0 + gains - costs;
        worst = worst.max((env.pv().unwrap() - closed).abs());
    }
    let pass = worst < 1e-12 && zero_rewards;
    let detail = format!("10000 episodes: |PV - closed form| max {:.1e}, non-terminal rewards all zero: {}", worst, zero_rewards);
    verdict(5, "environment accounting", pass, detail, t0.elapsed(), 60);
}

/// Expert pairs from GBM paths hedged at the Black-Scholes delta.
fn bs_expert_pairs(contracts: usize, days: usize, seed: u64) -> Vec<ExpertPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = 1.0 / TRADING_DAYS;
    let start = chrono::NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
    let mut pairs = Vec::new();
    for c in 0..contracts {
        let k = 100.0;
        let mut s = k * rng.random_range(0.95..1.05);
        let mut prev = 0.0;
        for d in 0..days {
            let tte = (days - d) as f64 * dt;
            let action = bs_delta(&BsInputs::new(s, k, 0.0, 0.2, tte).unwrap());
            pairs.push(ExpertPair {
                contract: format!("C{:04}", c),
                date: start + chrono::Days::new(d as u64),
                day: d,
                s_over_k: s / k,
                tte_years: tte,
                prev_action: prev,
                action,
            });
            prev = action;
            let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            s *= (-0.5 * 0.04 * dt + 0.2 * dt.sqrt() * z).exp();
        }
    }
    pairs
}

#[test]
fn criterion_06_bc_pretraining_fidelity() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let train = bs_expert_pairs(250, 20, 60);
    let held_out = bs_expert_pairs(50, 20, 61);
    let net = NetConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut agent = Agent::new(net, &mut rng).unwrap();
    let report = bc_pretrain(&train, &mut agent.actor, &net, &BcConfig::default(), &mut rng).unwrap();
    let mae = held_out_mae(&agent.actor, &net, &held_out).unwrap();
    let pass = train.len() == 5000 && mae < 0.05 && report.min_sigma >= net.sigma_floor && report.min_sigma.is_finite();
    let detail = format!(
        "{} pairs, held-out mean |mu_a - a_expert| {:.4} (tol 0.05), min sigma_a {:.2e} vs floor {:.0e}",
        train.len(),
        mae,
        report.min_sigma,
        net.sigma_floor
    );
    verdict(6, "BC pretraining fidelity", pass, detail, t0.elapsed(), 300);
}

// ---------------------------------------------------------------- CLI criteria

struct Pipeline {
    root: tempfile::TempDir,
    run: String,
    overrides: Vec<String>,
}

impl Pipeline {
    fn new(run: &str, overrides: &[&str]) -> Pipeline {
        let mut o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        o.push(format!("run_name={}", run));
        Pipeline { root: tempfile::tempdir().unwrap(), run: run.into(), overrides: o }
    }

    fn run(&self, command: &str, extra: &[&str]) {
        let mut cmd = Command::new(BIN);
        cmd.arg(command).arg("--config").arg(fixtures().join("pipeline.toml"));
        for o in self.overrides.iter().map(|s| s.as_str()).chain(extra.iter().copied()) {
            cmd.arg("--set").arg(o);
        }
        let out = cmd.env("HEDGELAB_OUTPUT_ROOT", self.root.path()).output().unwrap();
        assert!(out.status.success(), "hedgelab {} {:?} failed:\n{}", command, extra, String::from_utf8_lossy(&out.stderr));
    }

    fn dir(&self) -> PathBuf {
        self.root.path().join(&self.run)
    }

    fn read(&self, stage: &str, file: &str) -> String {
        std::fs::read_to_string(self.dir().join(stage).join(file)).unwrap()
    }
}

/// `metrics.csv` rows keyed by (strategy, cost rate) with the numeric columns.
fn metrics(text: &str) -> BTreeMap<(String, String), Vec<f64>> {
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            ((f[0].to_string(), f[1].to_string()), f[2..].iter().map(|x| x.parse().unwrap()).collect())
        })
        .collect()
}

// Column offsets into the numeric part of a metrics row.
const AVG_R: usize = 1;
const STD_PV: usize = 3;

fn row<'a>(m: &'a BTreeMap<(String, String), Vec<f64>>, strategy: &str) -> &'a [f64] {
    m.iter().find(|((s, _), _)| s == strategy).map(|(_, v)| v.as_slice()).unwrap()
}

#[test]
fn criterion_07_end_to_end_zero_cost() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let p = Pipeline::new("zero-cost", &["env.cost_rate=0"]);
    for cmd in ["ingest", "build-expert", "pretrain", "finetune", "evaluate"] {
        p.run(cmd, &[]);
    }
    let m = metrics(&p.read("evaluate", "metrics.csv"));
    let (agent, delta, zero) = (row(&m, "agent"), row(&m, "delta"), row(&m, "zero"));
    let std_ratio = agent[STD_PV] / zero[STD_PV];
    let r_ratio = agent[AVG_R].abs() / delta[AVG_R].abs();
    let pass = agent[0] == 2000.0 && std_ratio < 0.4 && r_ratio <= 1.5;
    let detail = format!(
        "std_PV agent/zero {:.3} (< 0.4), |avg_r| agent/delta {:.3} (<= 1.5); agent avg_r {:.5}, delta {:.5}",
        std_ratio, r_ratio, agent[AVG_R], delta[AVG_R]
    );
    verdict(7, "end-to-end hedging at zero cost", pass, detail, t0.elapsed(), 600);
}

#[test]
fn criterion_08_cost_sweep_direction() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let p = Pipeline::new("cost-sweep", &["eval.strategies=[\"agent\", \"delta\"]"]);
    for cmd in ["ingest", "build-expert", "pretrain", "finetune", "sweep"] {
        p.run(cmd, &[]);
    }
    let gaps: Vec<(f64, f64)> = p
        .read("sweep", "gap.csv")
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            (f[0], f[3])
        })
        .collect();
    let at = gaps.iter().find(|(c, _)| *c == 4e-4).map(|g| g.1).unwrap();
    let monotone = gaps.windows(2).all(|w| w[1].1 >= w[0].1);
    let listed: Vec<String> = gaps.iter().map(|(c, g)| format!("{}:{:+.6}", c, g)).collect();
    let detail = format!(
        "agent - delta avg_r at c=4e-4 {:+.6} (>= 0: {}), nondecreasing in c: {} [{}]",
        at,
        at >= 0.0,
        monotone,
        listed.join(" ")
    );
    verdict(8, "cost-sweep direction", at >= 0.0 && monotone, detail, t0.elapsed(), 600);
}

#[test]
fn criterion_09_ablation_direction() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    // Both arms get the same rollout budget; only the initialization differs.
    let p = Pipeline::new("ablation", &["agent.finetune.epochs=8", "eval.strategies=[\"agent\"]"]);
    for cmd in ["ingest", "build-expert", "pretrain"] {
        p.run(cmd, &[]);
    }
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in [1u64, 2, 3] {
        let s = format!("seed={}", seed);
        let mut avg = [0.0; 2];
        for (i, init) in ["agent.init=pretrained", "agent.init=random"].iter().enumerate() {
            p.run("finetune", &[&s, init]);
            p.run("evaluate", &[&s]);
            avg[i] = row(&metrics(&p.read("evaluate", "metrics.csv")), "agent")[AVG_R];
        }
        pass &= avg[1] <= avg[0];
        lines.push(format!("seed {}: with BC {:.5}, without {:.5}", seed, avg[0], avg[1]));
    }
    verdict(9, "ablation direction", pass, lines.join("; "), t0.elapsed(), 900);
}

#[test]
fn criterion_10_forecaster_calibration() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    // The fixture panel was generated by GBM with these annualized volatilities.
    let sigmas = [0.2, 0.3];
    let p = Pipeline::new("forecaster", &[]);
    for cmd in ["ingest", "train-forecaster", "sample-paths"] {
        p.run(cmd, &[]);
    }
    let nll: BTreeMap<String, f64> = p
        .read("train-forecaster", "heldout_nll.csv")
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].parse().unwrap())
        })
        .collect();
    let mut pass = nll["forecaster"] < nll["pooled_gaussian"];
    let mut parts = vec![format!(
        "held-out NLL {:.4} vs constant Gaussian {:.4} (per-series {:.4})",
        nll["forecaster"], nll["pooled_gaussian"], nll["per_series_gaussian"]
    )];
    for (i, l) in p.read("sample-paths", "path_summary.csv").lines().skip(1).enumerate() {
        let sd: f64 = l.split(',').nth(2).unwrap().parse().unwrap();
        let target = sigmas[i] / TRADING_DAYS.sqrt() * 20f64.sqrt();
        let rel = sd / target - 1.0;
        pass &= rel.abs() <= 0.25;
        parts.push(format!("asset {} 20-step std {:.4} vs {:.4} ({:+.1}%)", i, sd, target, 100.0 * rel));
    }
    verdict(10, "forecaster calibration", pass, parts.join("; "), t0.elapsed(), 600);
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for stage in std::fs::read_dir(dir).unwrap() {
        let stage = stage.unwrap().path();
        for f in std::fs::read_dir(&stage).unwrap() {
            let f = f.unwrap().path();
            out.insert(f.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&f).unwrap());
        }
    }
    out
}

#[test]
fn criterion_11_determinism() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let small = [
        "forecaster.train.epochs=3",
        "forecaster.n_paths=200",
        "agent.bc.epochs=10",
        "agent.ppo.n_path=128",
        "agent.finetune.epochs=2",
        "agent.finetune.critic_warmup=1",
        "agent.finetune.val_episodes=128",
        "eval.episodes=500",
    ];
    let commands = [
        "ingest",
        "train-forecaster",
        "sample-paths",
        "build-expert",
        "pretrain",
        "finetune",
        "evaluate",
        "sweep",
        "grid",
        "report",
    ];
    let runs: Vec<Pipeline> = (0..2).map(|_| Pipeline::new("determinism", &small)).collect();
    for p in &runs {
        for cmd in commands {
            p.run(cmd, &[]);
        }
    }
    let (a, b) = (files(&runs[0].dir()), files(&runs[1].dir()));
    let differing: Vec<String> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let detail = format!(
        "{} commands run twice, {} artifacts compared, {} differ{}",
        commands.len(),
        a.len(),
        differing.len(),
        if differing.is_empty() { String::new() } else { format!(": {}", differing.join(", ")) }
    );
    verdict(11, "determinism", differing.is_empty() && a.len() == b.len(), detail, t0.elapsed(), 600);
}
