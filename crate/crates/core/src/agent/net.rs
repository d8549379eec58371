//! Recurrent policy and value networks over frame-stacked observations.
//!
//! Each trunk embeds every frame, runs a GRU from the oldest to the newest
//! frame, and concatenates the final hidden state with an MLP of the newest
//! frame and the newest frame's raw features. The actor head emits the mean
//! and standard deviation of a Gaussian over the hedge ratio; the critic head
//! emits a scalar value. Actor and critic share no parameters.

use std::collections::BTreeMap;

use rand::Rng;

use crate::diffcore::{glorot, DiffError, Graph, ParamStore, Tensor};
use crate::pricing::TRADING_DAYS;

pub type Obs = [f64; 3];
pub const N_FEATURES: usize = 4;

/// Scaled marked book value `20 * (cash - option value) / K`, an input of the
/// critic only.
///
/// The terminal reward depends on the whole trading history, which the
/// observation window does not carry. Giving the critic the running book value
/// lets its baseline absorb that history, and since the current action does not
/// affect it, the policy gradient stays unbiased.
pub fn critic_aux(book_over_strike: f64) -> f64 {
    20.0 * book_over_strike
}

/// Fixed input scaling of an observation `(S/K, tte_years, a_prev)`.
///
/// The last feature, `ln(S/K) / sqrt(tte)`, is the moneyness measured in
/// units of remaining time, the natural argument of a hedge ratio.
pub fn features(obs: &Obs) -> [f64; N_FEATURES] {
    let [m, tte, prev] = *obs;
    let tte_floor = tte.max(0.5 / TRADING_DAYS);
    [(m - 1.0) * 20.0, tte * TRADING_DAYS / 22.0, 2.0 * prev - 1.0, 0.2 * m.ln() / tte_floor.sqrt()]
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Frames per observation window.
    pub frames: usize,
    pub embed: usize,
    pub gru_hidden: usize,
    pub mlp_hidden: usize,
    pub sigma_floor: f64,
    /// Ablation switch; when off the recurrent state is replaced by zeros.
    pub use_gru: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { frames: 8, embed: 16, gru_hidden: 16, mlp_hidden: 32, sigma_floor: 1e-3, use_gru: true }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.frames == 0 || self.embed == 0 || self.gru_hidden == 0 || self.mlp_hidden == 0 {
            return Err("network widths and frame count must be positive".into());
        }
        if !(self.sigma_floor > 0.0) {
            return Err(format!("sigma floor must be positive, got {}", self.sigma_floor));
        }
        Ok(())
    }

    fn latest_input(&self, role: Role) -> usize {
        match role {
            Role::Actor => N_FEATURES,
            Role::Critic => N_FEATURES + 1,
        }
    }

    fn head_input(&self, role: Role) -> usize {
        self.gru_hidden + self.mlp_hidden + self.latest_input(role)
    }
}

/// Which network a parameter set belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Actor,
    Critic,
}

impl Role {
    pub fn prefix(self) -> &'static str {
        match self {
            Role::Actor => "actor.",
            Role::Critic => "critic.",
        }
    }

    fn outputs(self) -> usize {
        match self {
            Role::Actor => 2,
            Role::Critic => 1,
        }
    }
}

/// Adds freshly initialized parameters for `role` to `store`.
pub fn init_params<R: Rng + ?Sized>(store: &mut ParamStore<f64>, cfg: &NetConfig, role: Role, rng: &mut R) -> Result<(), DiffError> {
    let p = role.prefix();
    let h = cfg.gru_hidden;
    let mut add = |name: &str, t: Tensor<f64>| store.insert(&format!("{}{}", p, name), t);
    add("embed.w", glorot(rng, N_FEATURES, cfg.embed, 1.0))?;
    add("embed.b", Tensor::zeros(&[cfg.embed]))?;
    add("gru.w", glorot(rng, cfg.embed, 3 * h, 1.0))?;
    add("gru.u", glorot(rng, h, 3 * h, 1.0))?;
    add("gru.b", Tensor::zeros(&[3 * h]))?;
    add("mlp1.w", glorot(rng, cfg.latest_input(role), cfg.mlp_hidden, 1.0))?;
    add("mlp1.b", Tensor::zeros(&[cfg.mlp_hidden]))?;
    add("mlp2.w", glorot(rng, cfg.mlp_hidden, cfg.mlp_hidden, 1.0))?;
    add("mlp2.b", Tensor::zeros(&[cfg.mlp_hidden]))?;
    add("head.w", glorot(rng, cfg.head_input(role), role.outputs(), 0.1))?;
    let bias = match role {
        // Start near a half hedge with a standard deviation around 0.1.
        Role::Actor => Tensor::vector(vec![0.0, (0.1f64.exp() - 1.0).ln()])?,
        Role::Critic => Tensor::zeros(&[1]),
    };
    add("head.b", bias)
}

/// A batch of observation windows, oldest frame first.
#[derive(Clone, Debug)]
pub struct WindowBatch {
    pub len: usize,
    /// One `[len, N_FEATURES]` tensor per frame.
    pub frames: Vec<Tensor<f64>>,
    /// Critic-only input `[len, 1]`, see [`critic_aux`].
    pub aux: Option<Tensor<f64>>,
}

impl WindowBatch {
    /// Builds windows from observation histories. Each history ends with the
    /// current observation; windows shorter than `m` are padded at the front by
    /// repeating the history's first observation.
    pub fn from_histories(histories: &[&[Obs]], m: usize) -> Self {
        let mut frames = vec![Vec::with_capacity(histories.len() * N_FEATURES); m];
        for hist in histories {
            assert!(!hist.is_empty(), "observation history must not be empty");
            let n = hist.len();
            for (j, frame) in frames.iter_mut().enumerate() {
                let idx = (n + j).saturating_sub(m);
                frame.extend_from_slice(&features(&hist[idx]));
            }
        }
        WindowBatch {
            len: histories.len(),
            frames: frames.into_iter().map(|f| Tensor::from_parts(vec![histories.len(), N_FEATURES], f)).collect(),
            aux: None,
        }
    }

    /// Attaches the critic input, one value per window.
    pub fn with_aux(mut self, aux: Vec<f64>) -> Self {
        assert_eq!(aux.len(), self.len, "one auxiliary value per window");
        self.aux = Some(Tensor::from_parts(vec![self.len, 1], aux));
        self
    }

    /// Rows `idx` of every frame.
    pub fn select(&self, idx: &[usize]) -> Self {
        let frames = self
            .frames
            .iter()
            .map(|f| {
                let mut data = Vec::with_capacity(idx.len() * N_FEATURES);
                for &i in idx {
                    data.extend_from_slice(&f.data()[i * N_FEATURES..(i + 1) * N_FEATURES]);
                }
                Tensor::from_parts(vec![idx.len(), N_FEATURES], data)
            })
            .collect();
        let aux = self.aux.as_ref().map(|a| Tensor::from_parts(vec![idx.len(), 1], idx.iter().map(|&i| a.data()[i]).collect()));
        WindowBatch { len: idx.len(), frames, aux }
    }
}

fn trunk(
    g: &mut Graph<f64>,
    p: &BTreeMap<String, Tensor<f64>>,
    role: Role,
    cfg: &NetConfig,
    batch: &WindowBatch,
) -> Result<Tensor<f64>, DiffError> {
    let prefix = role.prefix();
    let w = |name: &str| &p[&format!("{}{}", prefix, name)];
    let newest = batch.frames.last().expect("at least one frame");
    let latest = match role {
        Role::Actor => newest.clone(),
        Role::Critic => {
            let aux = batch.aux.as_ref().ok_or_else(|| DiffError::Shape {
                op: "value_forward",
                detail: "critic windows need the cash input".into(),
            })?;
            g.concat(&[newest, aux], 1)?
        }
    };
    let latest = &latest;
    let h = if cfg.use_gru {
        let mut h = Tensor::zeros(&[batch.len, cfg.gru_hidden]);
        for x in &batch.frames {
            let e = g.linear(x, w("embed.w"), w("embed.b"))?;
            let e = g.tanh(&e)?;
            h = g.gru_cell(&e, &h, w("gru.w"), w("gru.u"), w("gru.b"))?;
        }
        h
    } else {
        Tensor::zeros(&[batch.len, cfg.gru_hidden])
    };
    let u = g.linear(latest, w("mlp1.w"), w("mlp1.b"))?;
    let u = g.tanh(&u)?;
    let u = g.linear(&u, w("mlp2.w"), w("mlp2.b"))?;
    let u = g.tanh(&u)?;
    g.concat(&[&h, &u, latest], 1)
}

/// Gaussian policy head: `(mu [B,1], sigma [B,1])` with `mu` in (0, 1) and `sigma >= floor`.
pub fn policy_forward(
    g: &mut Graph<f64>,
    p: &BTreeMap<String, Tensor<f64>>,
    cfg: &NetConfig,
    batch: &WindowBatch,
) -> Result<(Tensor<f64>, Tensor<f64>), DiffError> {
    let z = trunk(g, p, Role::Actor, cfg, batch)?;
    let out = g.linear(&z, &p["actor.head.w"], &p["actor.head.b"])?;
    let mu = g.slice(&out, 1, 0, 1)?;
    let mu = g.sigmoid(&mu)?;
    let raw = g.slice(&out, 1, 1, 2)?;
    let sigma = g.softplus(&raw)?;
    let sigma = g.shift(&sigma, cfg.sigma_floor)?;
    Ok((mu, sigma))
}

/// State value `[B,1]`.
pub fn value_forward(
    g: &mut Graph<f64>,
    p: &BTreeMap<String, Tensor<f64>>,
    cfg: &NetConfig,
    batch: &WindowBatch,
) -> Result<Tensor<f64>, DiffError> {
    let z = trunk(g, p, Role::Critic, cfg, batch)?;
    g.linear(&z, &p["critic.head.w"], &p["critic.head.b"])
}

/// Policy mean and standard deviation for each window, without gradients.
pub fn policy_eval(store: &ParamStore<f64>, cfg: &NetConfig, batch: &WindowBatch) -> Result<(Vec<f64>, Vec<f64>), DiffError> {
    let mut g = Graph::new();
    let p = g.bind(store);
    let (mu, sigma) = policy_forward(&mut g, &p, cfg, batch)?;
    Ok((mu.to_vec(), sigma.to_vec()))
}

pub fn value_eval(store: &ParamStore<f64>, cfg: &NetConfig, batch: &WindowBatch) -> Result<Vec<f64>, DiffError> {
    let mut g = Graph::new();
    let p = g.bind(store);
    Ok(value_forward(&mut g, &p, cfg, batch)?.to_vec())
}

/// `ln N(a; mu, sigma^2)` elementwise.
pub fn gaussian_log_prob(
    g: &mut Graph<f64>,
    a: &Tensor<f64>,
    mu: &Tensor<f64>,
    sigma: &Tensor<f64>,
) -> Result<Tensor<f64>, DiffError> {
    let diff = g.sub(a, mu)?;
    let z = g.div(&diff, sigma)?;
    let z2 = g.square(&z)?;
    let half_z2 = g.scale(&z2, -0.5)?;
    let ln_sigma = g.ln(sigma)?;
    let lp = g.sub(&half_z2, &ln_sigma)?;
    g.shift(&lp, -0.5 * (2.0 * std::f64::consts::PI).ln())
}

/// `-mean(1/2 ln(2 pi e sigma^2))`, the negative differential entropy of the action Gaussians.
pub fn entropy_loss(g: &mut Graph<f64>, sigma: &Tensor<f64>) -> Result<Tensor<f64>, DiffError> {
    let ln_sigma = g.ln(sigma)?;
    let m = g.mean(&ln_sigma, None)?;
    let h = g.shift(&m, 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln())?;
    g.neg(&h)
}

pub fn gaussian_log_prob_f64(a: f64, mu: f64, sigma: f64) -> f64 {
    let z = (a - mu) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}
