use rand::Rng;

use super::{Channel, DataError, ReturnPanel};

/// Transform applied to market values before the temperature softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MvScale {
    #[default]
    Raw,
    Log,
}

fn check_args(p: f64, tau: f64) -> Result<(), DataError> {
    if !(0.0..1.0).contains(&p) {
        return Err(DataError::Invalid(format!("drop fraction must lie in [0, 1), got {}", p)));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(DataError::Invalid(format!("temperature must be positive, got {}", tau)));
    }
    Ok(())
}

fn logits(mv: &[f64], tau: f64, scale: MvScale) -> Vec<f64> {
    mv.iter()
        .map(|&v| match scale {
            MvScale::Raw => v / tau,
            MvScale::Log => v.ln() / tau,
        })
        .collect()
}

/// Softmax weights over the assets not yet taken, relative to the largest remaining logit.
fn remaining_weights(logits: &[f64], taken: &[usize]) -> Vec<f64> {
    let max = (0..logits.len()).filter(|i| !taken.contains(i)).map(|i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    (0..logits.len()).map(|i| if taken.contains(&i) { 0.0 } else { (logits[i] - max).exp() }).collect()
}

/// Draws `floor(N p)` distinct asset indices, one at a time, each with
/// probability proportional to `softmax(MV / tau)` over the assets not yet drawn.
///
/// Returned indices are sorted.
pub fn select_dropped<R: Rng + ?Sized>(
    market_value: &[f64],
    p: f64,
    tau: f64,
    scale: MvScale,
    rng: &mut R,
) -> Result<Vec<usize>, DataError> {
    check_args(p, tau)?;
    let n_drop = (market_value.len() as f64 * p).floor() as usize;
    let logits = logits(market_value, tau, scale);
    let mut dropped = Vec::with_capacity(n_drop);
    for _ in 0..n_drop {
        let w = remaining_weights(&logits, &dropped);
        let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
        let mut pick = None;
        for (i, &wi) in w.iter().enumerate() {
            if wi > 0.0 {
                pick = Some(i);
                if u < wi {
                    break;
                }
                u -= wi;
            }
        }
        dropped.push(pick.expect("the largest remaining weight is 1"));
    }
    dropped.sort_unstable();
    Ok(dropped)
}

/// Exact probability that each asset is among the `floor(N p)` drops,
/// by enumerating every ordered draw sequence. Intended for small `N`.
pub fn inclusion_probabilities(market_value: &[f64], p: f64, tau: f64, scale: MvScale) -> Result<Vec<f64>, DataError> {
    check_args(p, tau)?;
    let n_drop = (market_value.len() as f64 * p).floor() as usize;
    let logits = logits(market_value, tau, scale);
    let mut incl = vec![0.0; logits.len()];
    fn walk(logits: &[f64], taken: &mut Vec<usize>, prob: f64, left: usize, incl: &mut [f64]) {
        if left == 0 {
            for &i in taken.iter() {
                incl[i] += prob;
            }
            return;
        }
        let w = remaining_weights(logits, taken);
        let total: f64 = w.iter().sum();
        for i in 0..w.len() {
            if w[i] == 0.0 {
                continue;
            }
            taken.push(i);
            walk(logits, taken, prob * w[i] / total, left - 1, incl);
            taken.pop();
        }
    }
    walk(&logits, &mut Vec::new(), 1.0, n_drop, &mut incl);
    Ok(incl)
}

/// Zeroes the dropped rows and scales every kept row by `1 / (1 - p)`.
/// Missing cells in kept rows stay missing.
pub fn apply_dropout(rows: &mut [Vec<Option<f64>>], dropped: &[usize], p: f64) {
    let keep = 1.0 / (1.0 - p);
    for (i, row) in rows.iter_mut().enumerate() {
        if dropped.contains(&i) {
            row.iter_mut().for_each(|v| *v = Some(0.0));
        } else {
            row.iter_mut().flatten().for_each(|v| *v *= keep);
        }
    }
}

/// Market-value dropout over all four channels of a return window.
///
/// Outside training the window is returned unchanged.
pub fn market_value_dropout<R: Rng + ?Sized>(
    window: &ReturnPanel,
    p: f64,
    tau: f64,
    scale: MvScale,
    training: bool,
    rng: &mut R,
) -> Result<ReturnPanel, DataError> {
    check_args(p, tau)?;
    let mut out = window.clone();
    if !training {
        return Ok(out);
    }
    let dropped = select_dropped(&window.market_value, p, tau, scale, rng)?;
    for c in Channel::ALL {
        apply_dropout(&mut out.returns[c.index()], &dropped, p);
    }
    Ok(out)
}

/// Learned missing-value fill: `w1` where the cell is missing, `w2 x + x` otherwise.
pub fn res_missing_value(x: Option<f64>, w1: f64, w2: f64) -> f64 {
    match x {
        None => w1,
        Some(x) => w2 * x + x,
    }
}
