#![allow(dead_code)]

use std::collections::BTreeMap;

use hedgelab::diffcore::{DiffError, Graph, ParamStore, Tensor};
use rand::Rng;

pub type Bound = BTreeMap<String, Tensor<f64>>;

/// Largest relative error between analytic and central-difference gradients.
///
/// Relative error uses `max(|analytic|, |numeric|, 1e-6)` as denominator.
pub fn max_fd_error<F>(store: &ParamStore<f64>, h: f64, loss: F) -> f64
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Tensor<f64>, DiffError>,
{
    let mut g = Graph::new();
    let bound = g.bind(store);
    let l = loss(&mut g, &bound).unwrap();
    let grads = g.backward(&l).unwrap();
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let b = g.bind(s);
        loss(&mut g, &b).unwrap().item().unwrap()
    };
    let mut worst = 0.0f64;
    for (name, value) in store.iter() {
        for i in 0..value.numel() {
            let bump = |delta: f64| {
                let mut s = store.clone();
                let mut v = value.to_vec();
                v[i] += delta;
                s.set(name, Tensor::new(value.shape().to_vec(), v).unwrap()).unwrap();
                eval(&s)
            };
            let numeric = (bump(h) - bump(-h)) / (2.0 * h);
            let analytic = grads[name].data()[i];
            let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}
