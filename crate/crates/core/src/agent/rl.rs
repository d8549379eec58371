//! Rollout collection, advantage estimation and the PPO and A2C updaters.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::net::{critic_aux, entropy_loss, gaussian_log_prob, gaussian_log_prob_f64, policy_eval, policy_forward, value_eval, value_forward, NetConfig, Obs, WindowBatch};
use super::{Agent, AgentError};
use crate::diffcore::{clip_grad_norm, Adam, Graph, ParamStore, Tensor};
use crate::hedgenv::{episode_streams, EnvFactory, HedgeEnv};
use crate::pricing::{bs_call_price, BsInputs};

/// One episode as seen by the learner.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub episode: u64,
    pub obs: Vec<Obs>,
    /// Critic input per step, see [`critic_aux`].
    pub aux: Vec<f64>,
    /// Gaussian samples before clipping; log-probabilities refer to these.
    pub raw_actions: Vec<f64>,
    /// Positions actually taken, clipped to `[0, 1]`.
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub pv: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Cash minus the option's current value, over the strike. The option is
/// marked at Black–Scholes with the episode's volatility when one is known,
/// at intrinsic value otherwise.
pub fn marked_book(env: &HedgeEnv<f64>, sigma_hint: Option<f64>) -> f64 {
    let (s, k, tte) = (env.spot(), env.strike(), env.tte_years());
    let option = match sigma_hint.and_then(|sig| BsInputs::new(s, k, 0.0, sig, tte).ok()) {
        Some(inp) if tte > 0.0 => bs_call_price(&inp),
        _ => (s - k).max(0.0),
    };
    (env.cash() - option) / k
}

/// Runs one episode per id with actions drawn from the current policy.
///
/// Episodes advance in lockstep so each step is one batched forward pass. The
/// underlying path and the action noise of episode `id` come from separate
/// streams of `seed`, so results do not depend on batch composition.
pub fn collect_rollouts<F: EnvFactory + ?Sized>(
    factory: &F,
    agent: &Agent,
    episodes: &[u64],
    seed: u64,
) -> Result<Vec<Trajectory>, AgentError> {
    let mut envs = Vec::with_capacity(episodes.len());
    let mut noise = Vec::with_capacity(episodes.len());
    let mut hints = Vec::with_capacity(episodes.len());
    let mut trajs = Vec::with_capacity(episodes.len());
    for &id in episodes {
        let (mut path_rng, noise_rng) = episode_streams(seed, id);
        let spec = factory.spec(id);
        hints.push(spec.sigma_hint);
        let env = HedgeEnv::reset(&spec, &mut path_rng).map_err(|e| AgentError::Episode { id, source: e })?;
        trajs.push(Trajectory {
            episode: id,
            obs: vec![env.observation()],
            aux: vec![],
            raw_actions: vec![],
            actions: vec![],
            log_probs: vec![],
            rewards: vec![],
            values: vec![],
            dones: vec![],
            pv: f64::NAN,
        });
        envs.push(env);
        noise.push(noise_rng);
    }
    loop {
        let active: Vec<usize> = (0..envs.len()).filter(|&i| !envs[i].is_done()).collect();
        if active.is_empty() {
            break;
        }
        let hists: Vec<&[Obs]> = active.iter().map(|&i| trajs[i].obs.as_slice()).collect();
        let aux: Vec<f64> = active.iter().map(|&i| critic_aux(marked_book(&envs[i], hints[i]))).collect();
        let batch = WindowBatch::from_histories(&hists, agent.net.frames).with_aux(aux.clone());
        let (mu, sigma) = policy_eval(&agent.actor, &agent.net, &batch)?;
        let values = value_eval(&agent.critic, &agent.net, &batch)?;
        for (j, &i) in active.iter().enumerate() {
            let z: f64 = noise[i].sample(StandardNormal);
            let raw = mu[j] + sigma[j] * z;
            let id = trajs[i].episode;
            let tr = envs[i].step(raw).map_err(|e| AgentError::Episode { id, source: e })?;
            let traj = &mut trajs[i];
            traj.aux.push(aux[j]);
            traj.raw_actions.push(raw);
            traj.actions.push(tr.action);
            traj.log_probs.push(gaussian_log_prob_f64(raw, mu[j], sigma[j]));
            traj.rewards.push(tr.reward);
            traj.values.push(values[j]);
            traj.dones.push(tr.done);
            if tr.done {
                traj.pv = envs[i].pv().expect("done episodes have a value");
            } else {
                traj.obs.push(tr.next_obs);
            }
        }
    }
    Ok(trajs)
}

/// Generalized advantage estimates by the backward recursion
/// `A_t = delta_t + gamma lambda A_{t+1}`, `delta_t = r_t + gamma V_{t+1} - V_t`,
/// with the value beyond the last step taken as 0.
pub fn compute_gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    assert_eq!(rewards.len(), values.len(), "rewards and values must align");
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = 0.0;
    for t in (0..n).rev() {
        let delta = rewards[t] + gamma * next_value - values[t];
        next_adv = delta + gamma * lambda * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    adv
}

/// Lambda-return targets `V + A`.
pub fn value_targets(advantages: &[f64], values: &[f64]) -> Vec<f64> {
    advantages.iter().zip(values).map(|(a, v)| v + a).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip_eps: f64,
    pub entropy_weight: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Episodes collected per iteration.
    pub n_path: usize,
    pub actor_epochs: usize,
    pub critic_epochs: usize,
    pub batch_size: usize,
    pub normalize_advantages: bool,
    pub grad_clip: f64,
    /// Multiplier applied to rewards before advantage estimation.
    pub reward_scale: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 1.0,
            lambda: 0.95,
            clip_eps: 0.2,
            entropy_weight: 0.01,
            actor_lr: 3e-4,
            critic_lr: 1e-3,
            n_path: 256,
            actor_epochs: 4,
            critic_epochs: 4,
            batch_size: 512,
            normalize_advantages: true,
            grad_clip: 0.5,
            reward_scale: 1.0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::Invalid(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip epsilon must lie in (0, 1)");
        }
        if self.n_path == 0 || self.batch_size == 0 {
            return bad("n_path and batch_size must be positive");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0 && self.reward_scale > 0.0) {
            return bad("learning rates and reward scale must be positive");
        }
        Ok(())
    }
}

/// Flattened training rows from a set of trajectories, in episode order.
#[derive(Clone, Debug)]
pub struct RolloutBatch {
    pub windows: WindowBatch,
    pub raw_actions: Vec<f64>,
    pub old_log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub targets: Vec<f64>,
}

impl RolloutBatch {
    pub fn from_trajectories(trajs: &[Trajectory], frames: usize, cfg: &PpoConfig) -> Self {
        let mut hists: Vec<&[Obs]> = Vec::new();
        let mut out = RolloutBatch {
            windows: WindowBatch { len: 0, frames: vec![], aux: None },
            raw_actions: vec![],
            old_log_probs: vec![],
            values: vec![],
            advantages: vec![],
            targets: vec![],
        };
        let mut aux = Vec::new();
        for tr in trajs {
            aux.extend_from_slice(&tr.aux);
            let rewards: Vec<f64> = tr.rewards.iter().map(|r| r * cfg.reward_scale).collect();
            let adv = compute_gae(&rewards, &tr.values, cfg.gamma, cfg.lambda);
            out.targets.extend(value_targets(&adv, &tr.values));
            out.advantages.extend(adv);
            out.values.extend_from_slice(&tr.values);
            out.raw_actions.extend_from_slice(&tr.raw_actions);
            out.old_log_probs.extend_from_slice(&tr.log_probs);
            for t in 0..tr.len() {
                hists.push(&tr.obs[..=t]);
            }
        }
        out.windows = WindowBatch::from_histories(&hists, frames).with_aux(aux);
        out
    }

    pub fn len(&self) -> usize {
        self.raw_actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw_actions.is_empty()
    }

    fn normalized_advantages(&self, on: bool) -> Vec<f64> {
        if !on || self.len() < 2 {
            return self.advantages.clone();
        }
        let n = self.len() as f64;
        let mean = self.advantages.iter().sum::<f64>() / n;
        let var = self.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std < 1e-12 {
            return vec![0.0; self.len()];
        }
        self.advantages.iter().map(|a| (a - mean) / std).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateDiagnostics {
    pub actor_loss: f64,
    pub critic_loss: f64,
    /// Share of rows whose ratio left `[1 - eps, 1 + eps]`.
    pub clip_fraction: f64,
    /// Mean of `old_log_prob - new_log_prob`.
    pub approx_kl: f64,
    /// Mean differential entropy of the action Gaussians.
    pub entropy: f64,
    /// `1 - Var(target - V) / Var(target)` for the values recorded at collection time.
    pub explained_variance: f64,
}

/// `1 - Var(targets - values) / Var(targets)`; 0 when the targets are constant.
pub fn explained_variance(values: &[f64], targets: &[f64]) -> f64 {
    let n = targets.len() as f64;
    if targets.len() < 2 {
        return 0.0;
    }
    let var = |x: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = x.collect();
        let m = v.iter().sum::<f64>() / n;
        v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n
    };
    let vt = var(&mut targets.iter().copied());
    if vt == 0.0 {
        return 0.0;
    }
    1.0 - var(&mut targets.iter().zip(values).map(|(t, v)| t - v)) / vt
}

fn column(v: &[f64]) -> Result<Tensor<f64>, AgentError> {
    Ok(Tensor::new(vec![v.len(), 1], v.to_vec())?)
}

fn pick(v: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| v[i]).collect()
}

/// Clipped surrogate `-mean(min(rho A, clip(rho, 1-eps, 1+eps) A))` plus the
/// weighted entropy loss. Returns `(total, surrogate, entropy_loss, rho)`.
pub fn ppo_actor_loss(
    g: &mut Graph<f64>,
    p: &std::collections::BTreeMap<String, Tensor<f64>>,
    net: &NetConfig,
    windows: &WindowBatch,
    raw_actions: &[f64],
    old_log_probs: &[f64],
    advantages: &[f64],
    clip_eps: f64,
    entropy_weight: f64,
) -> Result<(Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>), AgentError> {
    let (mu, sigma) = policy_forward(g, p, net, windows)?;
    let lp = gaussian_log_prob(g, &column(raw_actions)?, &mu, &sigma)?;
    let diff = g.sub(&lp, &column(old_log_probs)?)?;
    let rho = g.exp(&diff)?;
    let adv = column(advantages)?;
    let unclipped = g.mul(&rho, &adv)?;
    let rho_c = g.clamp(&rho, 1.0 - clip_eps, 1.0 + clip_eps)?;
    let clipped = g.mul(&rho_c, &adv)?;
    let m = g.minimum(&unclipped, &clipped)?;
    let s = g.mean(&m, None)?;
    let surrogate = g.neg(&s)?;
    let ent = entropy_loss(g, &sigma)?;
    let weighted = g.scale(&ent, entropy_weight)?;
    let total = g.add(&surrogate, &weighted)?;
    Ok((total, surrogate, ent, rho))
}

/// Mean squared error between the critic and the lambda-return targets.
pub fn critic_loss(
    g: &mut Graph<f64>,
    p: &std::collections::BTreeMap<String, Tensor<f64>>,
    net: &NetConfig,
    windows: &WindowBatch,
    targets: &[f64],
) -> Result<Tensor<f64>, AgentError> {
    let v = value_forward(g, p, net, windows)?;
    let d = g.sub(&v, &column(targets)?)?;
    let d2 = g.square(&d)?;
    Ok(g.mean(&d2, None)?)
}

/// Critic-only regression passes on a batch, leaving the actor untouched.
/// Returns the mean critic loss.
pub fn critic_update<R: Rng + ?Sized>(
    agent: &mut Agent,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<f64, AgentError> {
    cfg.validate()?;
    critic_updates(&mut agent.critic, &agent.net, batch, cfg, cfg.critic_epochs, rng)
}

fn critic_updates<R: Rng + ?Sized>(
    critic: &mut ParamStore<f64>,
    net: &NetConfig,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    epochs: usize,
    rng: &mut R,
) -> Result<f64, AgentError> {
    let adam = Adam::with_lr(cfg.critic_lr);
    let mut idx: Vec<usize> = (0..batch.len()).collect();
    let (mut total, mut count) = (0.0, 0usize);
    for _ in 0..epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let p = g.bind(critic);
            let loss = critic_loss(&mut g, &p, net, &batch.windows.select(chunk), &pick(&batch.targets, chunk))?;
            let mut grads = g.backward(&loss)?;
            clip_grad_norm(&mut grads, cfg.grad_clip);
            critic.adam_step(&grads, &adam)?;
            total += loss.item()?;
            count += 1;
        }
    }
    Ok(if count > 0 { total / count as f64 } else { 0.0 })
}

/// `actor_epochs` passes of clipped-surrogate minibatch updates, then
/// `critic_epochs` passes of value regression onto the lambda returns.
pub fn ppo_update<R: Rng + ?Sized>(
    agent: &mut Agent,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateDiagnostics, AgentError> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(AgentError::Invalid("empty rollout batch".into()));
    }
    let adv = batch.normalized_advantages(cfg.normalize_advantages);
    let adam = Adam::with_lr(cfg.actor_lr);
    let mut idx: Vec<usize> = (0..batch.len()).collect();
    let mut diag = UpdateDiagnostics::default();
    let (mut clipped, mut rows, mut kl, mut ent_sum, mut loss_sum, mut steps) = (0usize, 0usize, 0.0, 0.0, 0.0, 0usize);
    for _ in 0..cfg.actor_epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let p = g.bind(&agent.actor);
            let old = pick(&batch.old_log_probs, chunk);
            let (total, _, ent, rho) = ppo_actor_loss(
                &mut g,
                &p,
                &agent.net,
                &batch.windows.select(chunk),
                &pick(&batch.raw_actions, chunk),
                &old,
                &pick(&adv, chunk),
                cfg.clip_eps,
                cfg.entropy_weight,
            )
            .map_err(|e| match e {
                AgentError::Diff(d) => AgentError::NonFiniteRatio(d.to_string()),
                other => other,
            })?;
            for &r in rho.data() {
                if (r - 1.0).abs() > cfg.clip_eps {
                    clipped += 1;
                }
                kl += -r.ln();
            }
            rows += chunk.len();
            let mut grads = g.backward(&total)?;
            clip_grad_norm(&mut grads, cfg.grad_clip);
            agent.actor.adam_step(&grads, &adam)?;
            ent_sum += -ent.item()?;
            loss_sum += total.item()?;
            steps += 1;
        }
    }
    if steps > 0 {
        diag.clip_fraction = clipped as f64 / rows as f64;
        diag.approx_kl = kl / rows as f64;
        diag.entropy = ent_sum / steps as f64;
        diag.actor_loss = loss_sum / steps as f64;
    }
    diag.explained_variance = explained_variance(&batch.values, &batch.targets);
    diag.critic_loss = critic_updates(&mut agent.critic, &agent.net, batch, cfg, cfg.critic_epochs, rng)?;
    Ok(diag)
}

/// A rollout batch that may feed exactly one A2C update.
#[derive(Clone, Debug)]
pub struct A2cBatch {
    batch: RolloutBatch,
    consumed: bool,
}

impl A2cBatch {
    pub fn new(batch: RolloutBatch) -> Self {
        A2cBatch { batch, consumed: false }
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }
}

/// Policy-gradient loss `-mean(log pi(a|s) A)` without clipping or entropy bonus.
pub fn a2c_actor_loss(
    g: &mut Graph<f64>,
    p: &std::collections::BTreeMap<String, Tensor<f64>>,
    net: &NetConfig,
    windows: &WindowBatch,
    raw_actions: &[f64],
    advantages: &[f64],
) -> Result<Tensor<f64>, AgentError> {
    let (mu, sigma) = policy_forward(g, p, net, windows)?;
    let lp = gaussian_log_prob(g, &column(raw_actions)?, &mu, &sigma)?;
    let w = g.mul(&lp, &column(advantages)?)?;
    let m = g.mean(&w, None)?;
    Ok(g.neg(&m)?)
}

/// One full-batch actor step and one critic pass. The batch is marked used, and a
/// second call on it is rejected.
pub fn a2c_update<R: Rng + ?Sized>(
    agent: &mut Agent,
    batch: &mut A2cBatch,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateDiagnostics, AgentError> {
    cfg.validate()?;
    if batch.consumed {
        return Err(AgentError::Consumed);
    }
    batch.consumed = true;
    let b = &batch.batch;
    let adv = b.normalized_advantages(cfg.normalize_advantages);
    let mut g = Graph::new();
    let p = g.bind(&agent.actor);
    let loss = a2c_actor_loss(&mut g, &p, &agent.net, &b.windows, &b.raw_actions, &adv)?;
    let mut grads = g.backward(&loss)?;
    clip_grad_norm(&mut grads, cfg.grad_clip);
    agent.actor.adam_step(&grads, &Adam::with_lr(cfg.actor_lr))?;
    let critic_loss = critic_updates(&mut agent.critic, &agent.net, b, cfg, 1, rng)?;
    Ok(UpdateDiagnostics {
        actor_loss: loss.item()?,
        critic_loss,
        explained_variance: explained_variance(&b.values, &b.targets),
        ..Default::default()
    })
}
