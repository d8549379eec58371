//! Recurrent actor-critic hedging agent: networks, behavior cloning and
//! reinforcement-learning fine-tuning.

mod bc;
mod finetune;
mod net;
mod rl;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

pub use bc::{bc_losses, bc_pretrain, held_out_mae, BcConfig, BcEpoch, BcReport, ExpertSet};
pub use finetune::{finetune, validation_episodes, Algorithm, FinetuneConfig, FinetuneEpoch, FinetuneReport, FINETUNE_HEADER};
pub use net::{
    critic_aux, entropy_loss, features, gaussian_log_prob, gaussian_log_prob_f64, init_params, policy_eval, policy_forward,
    value_eval, value_forward, NetConfig, Obs, Role, WindowBatch, N_FEATURES,
};
pub use rl::{
    a2c_actor_loss, a2c_update, collect_rollouts, compute_gae, critic_loss, critic_update, explained_variance, ppo_actor_loss, ppo_update, value_targets,
    A2cBatch, PpoConfig, RolloutBatch, Trajectory, UpdateDiagnostics,
};

use crate::diffcore::{read_checkpoint, write_checkpoint, DiffError, ParamStore};
use crate::hedgenv::HedgeError;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Env(#[from] HedgeError),
    #[error("episode {id}: {source}")]
    Episode { id: u64, source: HedgeError },
    #[error("invalid agent input: {0}")]
    Invalid(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("policy ratio became non-finite: {0}")]
    NonFiniteRatio(String),
    #[error("rollout batch was already used for an update")]
    Consumed,
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: String, detail: String },
}

/// Actor and critic parameters with the architecture they were built for.
///
/// The two networks keep separate optimizer state so that an update of one
/// never moves the other.
#[derive(Clone, Debug)]
pub struct Agent {
    pub net: NetConfig,
    pub actor: ParamStore<f64>,
    pub critic: ParamStore<f64>,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(net: NetConfig, rng: &mut R) -> Result<Self, AgentError> {
        net.validate().map_err(AgentError::Invalid)?;
        let mut actor = ParamStore::new();
        init_params(&mut actor, &net, Role::Actor, rng)?;
        let mut critic = ParamStore::new();
        init_params(&mut critic, &net, Role::Critic, rng)?;
        Ok(Agent { net, actor, critic })
    }

    /// Serializes the actor container followed by the critic container.
    pub fn write<W: Write>(&self, mut w: W) -> Result<(), AgentError> {
        write_checkpoint(&self.actor, &mut w)?;
        write_checkpoint(&self.critic, &mut w)?;
        Ok(())
    }

    /// Reads a checkpoint written by [`Agent::write`] and checks every
    /// parameter shape against `net`.
    pub fn read<R: Read>(net: NetConfig, mut r: R) -> Result<Self, AgentError> {
        let actor = read_checkpoint(&mut r)?;
        let critic = read_checkpoint(&mut r)?;
        let reference = Agent::new(net, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        for (loaded, fresh) in [(&actor, &reference.actor), (&critic, &reference.critic)] {
            let names: Vec<&str> = loaded.names().collect();
            if names != fresh.names().collect::<Vec<_>>() {
                return Err(AgentError::Invalid(format!("checkpoint parameters {:?} do not match the network", names)));
            }
            for (name, t) in fresh.iter() {
                let got = loaded.require(name)?.shape();
                if got != t.shape() {
                    return Err(AgentError::Invalid(format!("{} has shape {:?}, network expects {:?}", name, got, t.shape())));
                }
            }
        }
        Ok(Agent { net, actor, critic })
    }

    pub fn save(&self, path: &Path) -> Result<(), AgentError> {
        let ck = |e: std::io::Error| AgentError::Checkpoint { path: path.display().to_string(), detail: e.to_string() };
        let mut w = BufWriter::new(File::create(path).map_err(ck)?);
        self.write(&mut w)?;
        w.flush().map_err(ck)
    }

    pub fn load(net: NetConfig, path: &Path) -> Result<Self, AgentError> {
        let f = File::open(path)
            .map_err(|e| AgentError::Checkpoint { path: path.display().to_string(), detail: e.to_string() })?;
        Agent::read(net, BufReader::new(f))
    }

    /// True when both networks match bit for bit, optimizer state included.
    pub fn bit_eq(&self, other: &Agent) -> bool {
        self.net == other.net && self.actor.bit_eq(&other.actor) && self.critic.bit_eq(&other.critic)
    }
}
