//! Strategy evaluation: hedging metrics, terminal-value distributions, cost
//! sweeps and moneyness by maturity grids.
//!
//! Every strategy is run on the same episodes: episode `id` under `seed` draws
//! its path from a stream addressed by `(seed, id)`, so comparisons are paired.

mod distribution;
mod grid;
mod metrics;
mod strategy;
mod sweep;

use rayon::prelude::*;
use thiserror::Error;

pub use distribution::{pv_distribution, silverman_bandwidth, write_distribution, PvDistribution, DISTRIBUTION_HEADER};
pub use grid::{grid_report, write_grid, GridBuckets, GridCell, GridReport, GRID_HEADER};
pub use metrics::{quantile_sorted, HedgeMetrics, Z95};
pub use strategy::{AgentHedge, DeltaHedge, HedgeStrategy, StepContext, ZeroHedge};
pub use sweep::{cost_sweep, write_metrics, CostOverride, SweepResult, SweepRow, METRICS_HEADER};

use crate::agent::Obs;
use crate::hedgenv::{episode_streams, EnvFactory, HedgeEnv};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least 2 episodes, got {0}")]
    TooFewEpisodes(usize),
    #[error("{failed} of {total} episodes failed (first: {first})")]
    TooManyFailures { failed: usize, total: usize, first: String },
    #[error("strategy {name}: {detail}")]
    Strategy { name: String, detail: String },
    #[error("invalid evaluation input: {0}")]
    Invalid(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Share of failed episodes above which a run is rejected.
pub const MAX_FAILURE_SHARE: f64 = 0.01;

/// Episodes evaluated in one lockstep batch.
const CHUNK: usize = 256;

/// A completed episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub id: u64,
    pub steps: usize,
    pub strike: f64,
    pub cost_rate: f64,
    pub pv: f64,
    pub payoff: f64,
    pub trading_pnl: f64,
    pub cost: f64,
    pub path: Vec<f64>,
    pub actions: Vec<f64>,
}

impl EpisodeOutcome {
    pub fn entry_moneyness(&self) -> f64 {
        self.path[0] / self.strike
    }
}

/// Completed episodes in id order, plus the ids that failed and why.
#[derive(Clone, Debug, Default)]
pub struct EvalRun {
    pub outcomes: Vec<EpisodeOutcome>,
    pub failures: Vec<(u64, String)>,
}

impl EvalRun {
    pub fn pv_samples(&self) -> Vec<f64> {
        self.outcomes.iter().map(|o| o.pv).collect()
    }

    pub fn metrics(&self) -> Result<HedgeMetrics, EvalError> {
        HedgeMetrics::from_samples(&self.pv_samples())
    }
}

struct Live {
    id: u64,
    env: HedgeEnv<f64>,
    history: Vec<Obs>,
    sigma_hint: Option<f64>,
    cost_rate: f64,
}

fn run_chunk<F, S>(factory: &F, strategy: &S, ids: &[u64], seed: u64) -> Result<EvalRun, EvalError>
where
    F: EnvFactory + ?Sized,
    S: HedgeStrategy + ?Sized,
{
    let mut run = EvalRun::default();
    let mut live = Vec::with_capacity(ids.len());
    for &id in ids {
        let spec = factory.spec(id);
        let (mut rng, _) = episode_streams(seed, id);
        match HedgeEnv::reset(&spec, &mut rng) {
            Ok(env) => live.push(Live {
                id,
                history: vec![env.observation()],
                env,
                sigma_hint: spec.sigma_hint,
                cost_rate: spec.cost_rate,
            }),
            Err(e) => run.failures.push((id, e.to_string())),
        }
    }
    let mut failed = vec![false; live.len()];
    loop {
        let active: Vec<usize> = (0..live.len()).filter(|&i| !failed[i] && !live[i].env.is_done()).collect();
        if active.is_empty() {
            break;
        }
        let ctx: Vec<StepContext> =
            active.iter().map(|&i| StepContext { history: &live[i].history, sigma_hint: live[i].sigma_hint }).collect();
        let actions = strategy
            .act(&ctx)
            .map_err(|detail| EvalError::Strategy { name: strategy.name(), detail })?;
        if actions.len() != active.len() {
            return Err(EvalError::Strategy {
                name: strategy.name(),
                detail: format!("returned {} actions for {} episodes", actions.len(), active.len()),
            });
        }
        for (&i, a) in active.iter().zip(actions) {
            let ep = &mut live[i];
            match ep.env.step(a) {
                Ok(tr) if !tr.done => ep.history.push(tr.next_obs),
                Ok(_) => {}
                Err(e) => {
                    failed[i] = true;
                    run.failures.push((ep.id, e.to_string()));
                }
            }
        }
    }
    for (ep, bad) in live.into_iter().zip(failed) {
        if bad {
            continue;
        }
        let b = ep.env.terminal_pv().expect("finished episodes have a terminal value");
        run.outcomes.push(EpisodeOutcome {
            id: ep.id,
            steps: ep.env.steps(),
            strike: ep.env.strike(),
            cost_rate: ep.cost_rate,
            pv: ep.env.pv().expect("finished"),
            payoff: b.payoff,
            trading_pnl: b.trading_pnl,
            cost: b.cost,
            path: ep.env.path().to_vec(),
            actions: ep.env.actions().to_vec(),
        });
    }
    run.failures.sort_by_key(|f| f.0);
    Ok(run)
}

/// Runs `strategy` on every episode id. Chunks of episodes run in parallel on
/// the current rayon pool; results are assembled in id order, so the output
/// does not depend on the number of workers.
pub fn run_episodes<F, S>(factory: &F, strategy: &S, ids: &[u64], seed: u64) -> Result<EvalRun, EvalError>
where
    F: EnvFactory + ?Sized,
    S: HedgeStrategy + ?Sized,
{
    let parts: Vec<EvalRun> =
        ids.par_chunks(CHUNK).map(|chunk| run_chunk(factory, strategy, chunk, seed)).collect::<Result<_, _>>()?;
    let mut run = EvalRun::default();
    for p in parts {
        run.outcomes.extend(p.outcomes);
        run.failures.extend(p.failures);
    }
    if !run.failures.is_empty() {
        log::warn!("{}: {} of {} episodes failed", strategy.name(), run.failures.len(), ids.len());
    }
    if run.failures.len() as f64 > MAX_FAILURE_SHARE * ids.len() as f64 {
        return Err(EvalError::TooManyFailures {
            failed: run.failures.len(),
            total: ids.len(),
            first: format!("episode {}: {}", run.failures[0].0, run.failures[0].1),
        });
    }
    Ok(run)
}

/// Runs the episodes and summarizes their terminal values.
pub fn evaluate<F, S>(factory: &F, strategy: &S, ids: &[u64], seed: u64) -> Result<(HedgeMetrics, EvalRun), EvalError>
where
    F: EnvFactory + ?Sized,
    S: HedgeStrategy + ?Sized,
{
    if ids.len() < 2 {
        return Err(EvalError::TooFewEpisodes(ids.len()));
    }
    let run = run_episodes(factory, strategy, ids, seed)?;
    Ok((run.metrics()?, run))
}

/// Writes every step of every outcome with the episode log layout of
/// [`crate::hedgenv::EPISODE_LOG_HEADER`]. Rewards are reconstructed from the
/// terminal value.
pub fn write_outcome_log<W: std::io::Write>(out: &mut W, run: &EvalRun) -> Result<(), EvalError> {
    writeln!(out, "{}", crate::hedgenv::EPISODE_LOG_HEADER)?;
    for o in &run.outcomes {
        let mut prev = 0.0;
        for (t, &a) in o.actions.iter().enumerate() {
            let last = t + 1 == o.steps;
            let mut cost = o.cost_rate * o.path[t] * (prev - a).abs();
            if last {
                cost += o.cost_rate * o.path[t + 1] * a.abs();
            }
            let reward = if last { -(o.pv * o.pv) } else { 0.0 };
            writeln!(out, "{},{},{},{},{},{},{}", o.id, t, o.path[t], a, cost, a * (o.path[t + 1] - o.path[t]), reward)?;
            prev = a;
        }
        writeln!(out, "{},{},{},,,,", o.id, o.steps, o.path[o.steps])?;
    }
    Ok(())
}
