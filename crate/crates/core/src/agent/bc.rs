//! Behavior-cloning pretraining of the policy on expert hedge ratios.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::net::{entropy_loss, gaussian_log_prob, policy_eval, policy_forward, NetConfig, Obs, WindowBatch};
use super::AgentError;
use crate::diffcore::{clip_grad_norm, Adam, Graph, ParamStore, Tensor};
use crate::pricing::ExpertPair;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub entropy_weight: f64,
    pub grad_clip: f64,
    /// Share of contracts held out for validation.
    pub val_fraction: f64,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig { epochs: 150, batch_size: 256, lr: 3e-3, entropy_weight: 0.01, grad_clip: 1.0, val_fraction: 0.2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BcEpoch {
    pub epoch: usize,
    pub loss_expert: f64,
    pub loss_entropy: f64,
    pub val_mae: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BcReport {
    pub epochs: Vec<BcEpoch>,
    pub train_pairs: usize,
    pub val_pairs: usize,
    /// Smallest action standard deviation over the training windows after the last epoch.
    pub min_sigma: f64,
}

/// Expert windows: each pair's state history within its contract, in day order.
pub struct ExpertSet {
    pub windows: WindowBatch,
    pub actions: Vec<f64>,
    /// Contract index of every row.
    pub contract: Vec<usize>,
}

impl ExpertSet {
    pub fn build(pairs: &[ExpertPair], frames: usize) -> Self {
        let mut groups: BTreeMap<&str, Vec<&ExpertPair>> = BTreeMap::new();
        for p in pairs {
            groups.entry(&p.contract).or_default().push(p);
        }
        let mut histories: Vec<Vec<Obs>> = Vec::with_capacity(pairs.len());
        let mut actions = Vec::with_capacity(pairs.len());
        let mut contract = Vec::with_capacity(pairs.len());
        for (ci, (_, mut g)) in groups.into_iter().enumerate() {
            g.sort_by_key(|p| p.day);
            let states: Vec<Obs> = g.iter().map(|p| p.state()).collect();
            for (j, p) in g.iter().enumerate() {
                histories.push(states[..=j].to_vec());
                actions.push(p.action);
                contract.push(ci);
            }
        }
        let refs: Vec<&[Obs]> = histories.iter().map(|h| h.as_slice()).collect();
        ExpertSet { windows: WindowBatch::from_histories(&refs, frames), actions, contract }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Expert negative log-likelihood and entropy loss on one batch.
pub fn bc_losses(
    g: &mut Graph<f64>,
    p: &BTreeMap<String, Tensor<f64>>,
    net: &NetConfig,
    batch: &WindowBatch,
    actions: &[f64],
) -> Result<(Tensor<f64>, Tensor<f64>), AgentError> {
    let (mu, sigma) = policy_forward(g, p, net, batch)?;
    let a = Tensor::new(vec![actions.len(), 1], actions.to_vec())?;
    let lp = gaussian_log_prob(g, &a, &mu, &sigma)?;
    let nll = g.mean(&lp, None)?;
    let nll = g.neg(&nll)?;
    let ent = entropy_loss(g, &sigma)?;
    Ok((nll, ent))
}

fn mae(actor: &ParamStore<f64>, net: &NetConfig, set: &ExpertSet, rows: &[usize]) -> Result<f64, AgentError> {
    if rows.is_empty() {
        return Ok(f64::NAN);
    }
    let (mu, _) = policy_eval(actor, net, &set.windows.select(rows))?;
    Ok(rows.iter().zip(&mu).map(|(&i, m)| (m - set.actions[i]).abs()).sum::<f64>() / rows.len() as f64)
}

/// Minimizes `L_expert + w * L_entropy` over minibatches of expert windows.
///
/// `actor` must hold only `actor.` parameters. A share of contracts is held out
/// and its mean absolute action error is reported every epoch.
pub fn bc_pretrain<R: Rng + ?Sized>(
    pairs: &[ExpertPair],
    actor: &mut ParamStore<f64>,
    net: &NetConfig,
    cfg: &BcConfig,
    rng: &mut R,
) -> Result<BcReport, AgentError> {
    if pairs.is_empty() {
        return Err(AgentError::Invalid("expert dataset is empty".into()));
    }
    if cfg.batch_size == 0 || !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(AgentError::Invalid("batch size must be positive and validation share in [0, 1)".into()));
    }
    let set = ExpertSet::build(pairs, net.frames);
    let n_contracts = set.contract.iter().max().map_or(0, |m| m + 1);
    let mut order: Vec<usize> = (0..n_contracts).collect();
    order.shuffle(rng);
    let n_val = ((n_contracts as f64) * cfg.val_fraction).floor() as usize;
    let val_contracts = &order[..n_val.min(n_contracts.saturating_sub(1))];
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for i in 0..set.len() {
        if val_contracts.contains(&set.contract[i]) {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    let adam = Adam::with_lr(cfg.lr);
    let mut report = BcReport { train_pairs: train.len(), val_pairs: val.len(), ..Default::default() };
    for epoch in 0..cfg.epochs {
        train.shuffle(rng);
        let (mut sum_nll, mut sum_ent, mut seen) = (0.0, 0.0, 0usize);
        for chunk in train.chunks(cfg.batch_size) {
            let actions: Vec<f64> = chunk.iter().map(|&i| set.actions[i]).collect();
            let mut g = Graph::new();
            let p = g.bind(actor);
            let (nll, ent) = bc_losses(&mut g, &p, net, &set.windows.select(chunk), &actions)?;
            let weighted = g.scale(&ent, cfg.entropy_weight)?;
            let loss = g.add(&nll, &weighted)?;
            let mut grads = g.backward(&loss)?;
            clip_grad_norm(&mut grads, cfg.grad_clip);
            actor.adam_step(&grads, &adam)?;
            sum_nll += nll.item()? * chunk.len() as f64;
            sum_ent += ent.item()? * chunk.len() as f64;
            seen += chunk.len();
        }
        let row = BcEpoch {
            epoch: epoch + 1,
            loss_expert: sum_nll / seen as f64,
            loss_entropy: sum_ent / seen as f64,
            val_mae: mae(actor, net, &set, &val)?,
        };
        if !row.loss_expert.is_finite() {
            return Err(AgentError::Diverged { epoch: epoch + 1, detail: format!("expert loss {}", row.loss_expert) });
        }
        log::debug!("bc epoch {} nll {:.5} entropy {:.5} val mae {:.5}", row.epoch, row.loss_expert, row.loss_entropy, row.val_mae);
        report.epochs.push(row);
    }
    let all: Vec<usize> = (0..set.len()).collect();
    let (_, sigma) = policy_eval(actor, net, &set.windows.select(&all))?;
    report.min_sigma = sigma.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(report)
}

/// Mean absolute error of the policy mean against held-out expert actions.
pub fn held_out_mae(actor: &ParamStore<f64>, net: &NetConfig, pairs: &[ExpertPair]) -> Result<f64, AgentError> {
    let set = ExpertSet::build(pairs, net.frames);
    let rows: Vec<usize> = (0..set.len()).collect();
    mae(actor, net, &set, &rows)
}
