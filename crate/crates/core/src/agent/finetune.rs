//! Reinforcement-learning fine-tuning loop with validation-based checkpoint selection.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::rl::{a2c_update, collect_rollouts, critic_update, explained_variance, ppo_update, A2cBatch, PpoConfig, RolloutBatch, UpdateDiagnostics};
use super::{Agent, AgentError};
use crate::evalkit::{evaluate, AgentHedge, HedgeMetrics};
use crate::hedgenv::EnvFactory;

pub const FINETUNE_HEADER: &str = "epoch,avg_r,avg_PV,std_PV,clip_fraction,entropy";

/// First id of the validation episodes; training episodes use ids below it.
const VALIDATION_BASE: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    #[default]
    Ppo,
    A2c,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub val_episodes: usize,
    pub algorithm: Algorithm,
    /// Rollout batches used to fit the critic before any policy update.
    pub critic_warmup: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { epochs: 30, val_episodes: 512, algorithm: Algorithm::Ppo, critic_warmup: 5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub avg_r: f64,
    pub avg_pv: f64,
    pub std_pv: f64,
    /// Absent for epoch 0, which evaluates the starting parameters.
    pub clip_fraction: Option<f64>,
    pub entropy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FinetuneReport {
    pub epochs: Vec<FinetuneEpoch>,
    /// Epoch whose parameters were kept; 0 means the starting parameters.
    pub best_epoch: usize,
    pub best_avg_r: f64,
    /// Why training stopped early, if it did.
    pub aborted: Option<String>,
}

impl FinetuneReport {
    pub fn write<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "{}", FINETUNE_HEADER)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.epochs {
            writeln!(out, "{},{},{},{},{},{}", e.epoch, e.avg_r, e.avg_pv, e.std_pv, opt(e.clip_fraction), opt(e.entropy))?;
        }
        Ok(())
    }
}

/// The frozen validation episode ids.
pub fn validation_episodes(n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| VALIDATION_BASE + i).collect()
}

fn validate_agent<F: EnvFactory + ?Sized>(factory: &F, agent: &Agent, ids: &[u64], seed: u64) -> Result<HedgeMetrics, AgentError> {
    let (m, _) = evaluate(factory, &AgentHedge { agent }, ids, seed).map_err(|e| AgentError::Invalid(e.to_string()))?;
    Ok(m)
}

/// Alternates rollout collection and policy updates for `cfg.epochs` epochs.
///
/// After every epoch the mean policy is scored on a fixed validation set, and
/// the parameters with the best validation `avg_r` (the starting point
/// included) are left in `agent`. A non-finite update stops training and
/// keeps the best parameters seen so far.
pub fn finetune<F: EnvFactory + ?Sized>(
    factory: &F,
    agent: &mut Agent,
    ppo: &PpoConfig,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneReport, AgentError> {
    ppo.validate()?;
    if cfg.val_episodes < 2 {
        return Err(AgentError::Invalid("at least 2 validation episodes are needed".into()));
    }
    let val = validation_episodes(cfg.val_episodes);
    let mut update_rng = ChaCha8Rng::seed_from_u64(seed);
    update_rng.set_stream(u64::MAX);
    let start = validate_agent(factory, agent, &val, seed)?;
    let mut report = FinetuneReport {
        epochs: vec![FinetuneEpoch {
            epoch: 0,
            avg_r: start.avg_r,
            avg_pv: start.avg_pv,
            std_pv: start.std_pv,
            clip_fraction: None,
            entropy: None,
        }],
        best_epoch: 0,
        best_avg_r: start.avg_r,
        aborted: None,
    };
    let mut best = agent.clone();
    if cfg.epochs > 0 {
        for w in 0..cfg.critic_warmup {
            let first = (w * ppo.n_path) as u64;
            let ids: Vec<u64> = (first..first + ppo.n_path as u64).collect();
            let trajs = collect_rollouts(factory, agent, &ids, seed)?;
            let batch = RolloutBatch::from_trajectories(&trajs, agent.net.frames, ppo);
            let ev = explained_variance(&batch.values, &batch.targets);
            let loss = critic_update(agent, &batch, ppo, &mut update_rng)?;
            log::info!("critic warm-up {}: loss {:.6} explained variance {:.3}", w + 1, loss, ev);
        }
        best = agent.clone();
    }
    for epoch in 1..=cfg.epochs {
        let first = ((cfg.critic_warmup + epoch - 1) * ppo.n_path) as u64;
        let ids: Vec<u64> = (first..first + ppo.n_path as u64).collect();
        let step = collect_rollouts(factory, agent, &ids, seed).and_then(|trajs| {
            let batch = RolloutBatch::from_trajectories(&trajs, agent.net.frames, ppo);
            match cfg.algorithm {
                Algorithm::Ppo => ppo_update(agent, &batch, ppo, &mut update_rng),
                Algorithm::A2c => a2c_update(agent, &mut A2cBatch::new(batch), ppo, &mut update_rng),
            }
        });
        let diag: UpdateDiagnostics = match step {
            Ok(d) => d,
            Err(e @ (AgentError::Diff(_) | AgentError::NonFiniteRatio(_))) => {
                log::warn!("fine-tuning stopped at epoch {}: {}", epoch, e);
                report.aborted = Some(format!("epoch {}: {}", epoch, e));
                break;
            }
            Err(e) => return Err(e),
        };
        let m = validate_agent(factory, agent, &val, seed)?;
        log::info!(
            "epoch {}: validation avg_r {:.6} std_PV {:.4} clip {:.3} kl {:.5} explained variance {:.3}",
            epoch,
            m.avg_r,
            m.std_pv,
            diag.clip_fraction,
            diag.approx_kl,
            diag.explained_variance
        );
        report.epochs.push(FinetuneEpoch {
            epoch,
            avg_r: m.avg_r,
            avg_pv: m.avg_pv,
            std_pv: m.std_pv,
            clip_fraction: Some(diag.clip_fraction),
            entropy: Some(diag.entropy),
        });
        if m.avg_r > report.best_avg_r {
            report.best_avg_r = m.avg_r;
            report.best_epoch = epoch;
            best = agent.clone();
        }
    }
    *agent = best;
    Ok(report)
}
