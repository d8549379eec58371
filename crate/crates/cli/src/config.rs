//! The run configuration document and its command-line overrides.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use hedgelab::agent::{BcConfig, FinetuneConfig, NetConfig, PpoConfig};
use hedgelab::evalkit::GridBuckets;
use hedgelab::forecaster::{ForecastConfig, TrainConfig};
use hedgelab::hedgenv::EpisodeConfig;
use hedgelab::marketdata::OhlcSchema;
use hedgelab::synthetic::{SyntheticChain, SyntheticPanel};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable that replaces `output_dir`.
pub const OUTPUT_ROOT_VAR: &str = "HEDGELAB_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Subdirectory of the output root shared by every stage of one pipeline.
    pub run_name: String,
    pub data: DataConfig,
    pub forecaster: ForecasterConfig,
    pub pricing: PricingConfig,
    pub env: EpisodeConfig,
    pub agent: AgentConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            run_name: "default".into(),
            data: DataConfig::default(),
            forecaster: ForecasterConfig::default(),
            pricing: PricingConfig::default(),
            env: EpisodeConfig::default(),
            agent: AgentConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Market data. Without files, `ingest` simulates the panel and chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub ohlc: Option<PathBuf>,
    pub options: Option<PathBuf>,
    pub schema: OhlcSchema,
    pub synthetic: SyntheticPanel,
    pub chain: SyntheticChain,
    /// Chronological split by inclusive end dates; both or neither.
    pub train_end: Option<NaiveDate>,
    pub val_end: Option<NaiveDate>,
    /// Split by share of return dates when no end dates are given.
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            ohlc: None,
            options: None,
            schema: OhlcSchema::default(),
            synthetic: SyntheticPanel::default(),
            chain: SyntheticChain::default(),
            train_end: None,
            val_end: None,
            train_fraction: 0.7,
            val_fraction: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecasterConfig {
    pub model: ForecastConfig,
    pub train: TrainConfig,
    /// Steps per sampled path.
    pub horizon: usize,
    pub n_paths: usize,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        ForecasterConfig { model: ForecastConfig::default(), train: TrainConfig::default(), horizon: 20, n_paths: 2000 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PricingConfig {
    pub r_f: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentInit {
    /// Fine-tune the behavior-cloned agent written by `pretrain`.
    #[default]
    Pretrained,
    /// Fine-tune a freshly initialized agent.
    Random,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub init: AgentInit,
    pub net: NetConfig,
    pub bc: BcConfig,
    pub ppo: PpoConfig,
    pub finetune: FinetuneConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Agent,
    Delta,
    Zero,
}

/// Stage whose agent checkpoint `evaluate`, `sweep` and `grid` use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentStage {
    Pretrain,
    #[default]
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Seed of the evaluation episodes; the run seed when absent.
    pub seed: Option<u64>,
    pub strategies: Vec<StrategyKind>,
    pub agent_stage: AgentStage,
    /// Volatility of the delta rule; each episode's pricing volatility when absent.
    pub delta_sigma: Option<f64>,
    pub cost_rates: Vec<f64>,
    pub bins: usize,
    pub grid: GridBuckets,
    /// Episode length range for `grid`, so that maturity buckets fill.
    pub grid_min_steps: usize,
    /// Write per-step logs of every evaluated episode.
    pub episode_logs: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 2000,
            seed: None,
            strategies: vec![StrategyKind::Agent, StrategyKind::Delta, StrategyKind::Zero],
            agent_stage: AgentStage::Finetune,
            delta_sigma: None,
            cost_rates: vec![0.0, 2e-4, 4e-4, 8e-4],
            bins: 100,
            grid: GridBuckets::default(),
            grid_min_steps: 1,
            episode_logs: true,
        }
    }
}

impl RunConfig {
    /// Reads a config file, applies `key=value` overrides and validates.
    /// Relative data paths are resolved against the config file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {}", path.display(), e)))?;
        let mut table: toml::Table =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e)))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = serde_path_to_error::deserialize(table).map_err(|e| {
            let key = e.path().to_string();
            CliError::Config(format!("config key `{}`: {}", key, e.into_inner()))
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.ohlc, &mut cfg.data.options].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) || self.run_name == ".." {
            return bad(format!("run_name `{}` must be a plain directory name", self.run_name));
        }
        let d = &self.data;
        if d.train_end.is_some() != d.val_end.is_some() {
            return bad("data.train_end and data.val_end must be given together".into());
        }
        if !(d.train_fraction > 0.0 && d.val_fraction > 0.0 && d.train_fraction + d.val_fraction < 1.0) {
            return bad(format!(
                "data.train_fraction {} and data.val_fraction {} must be positive with a sum below 1",
                d.train_fraction, d.val_fraction
            ));
        }
        self.forecaster.model.validate().map_err(|e| CliError::Config(format!("forecaster.model: {}", e)))?;
        self.forecaster.train.validate().map_err(|e| CliError::Config(format!("forecaster.train: {}", e)))?;
        if self.forecaster.n_paths == 0 {
            return bad("forecaster.n_paths must be positive".into());
        }
        if !self.pricing.r_f.is_finite() {
            return bad("pricing.r_f must be finite".into());
        }
        self.env.validate().map_err(|e| CliError::Config(format!("env: {}", e)))?;
        self.agent.net.validate().map_err(|e| CliError::Config(format!("agent.net: {}", e)))?;
        self.agent.ppo.validate().map_err(|e| CliError::Config(format!("agent.ppo: {}", e)))?;
        let e = &self.eval;
        if e.episodes < 2 {
            return bad(format!("eval.episodes must be at least 2, got {}", e.episodes));
        }
        if e.strategies.is_empty() {
            return bad("eval.strategies is empty".into());
        }
        if e.bins == 0 {
            return bad("eval.bins must be positive".into());
        }
        if e.delta_sigma.is_some_and(|s| !(s > 0.0)) {
            return bad("eval.delta_sigma must be positive".into());
        }
        if e.cost_rates.is_empty() || e.cost_rates.windows(2).any(|w| !(w[0] < w[1])) || e.cost_rates.iter().any(|c| !(*c >= 0.0)) {
            return bad("eval.cost_rates must be nonnegative and strictly increasing".into());
        }
        if e.grid_min_steps == 0 || e.grid_min_steps > self.env.steps {
            return bad(format!("eval.grid_min_steps must lie in 1..={}", self.env.steps));
        }
        e.grid.validate().map_err(|err| CliError::Config(format!("eval.grid: {}", err)))?;
        Ok(())
    }

    pub fn eval_seed(&self) -> u64 {
        self.eval.seed.unwrap_or(self.seed)
    }

    /// Output root: the environment override, else `output_dir`.
    pub fn output_root(&self) -> PathBuf {
        std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| self.output_dir.clone())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_root().join(&self.run_name)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }
}

/// Sets `a.b.c = value`, creating tables on the way. The value is read as a
/// TOML value, or taken as a bare string when it does not parse as one.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{}` is not of the form key=value", spec)))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key `{}` is malformed", key)));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let mut cur = table;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{}`: `{}` is not a table", key, parts[..=i].join("."))))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
