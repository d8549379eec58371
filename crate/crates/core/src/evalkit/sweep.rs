use std::io::Write;

use super::{evaluate, EvalError, EvalRun, HedgeMetrics, HedgeStrategy};
use crate::hedgenv::{EnvFactory, EpisodeSpec};

pub const METRICS_HEADER: &str = "strategy,c,n,avg_r,avg_PV,std_PV,ci_low,ci_high";

/// Episodes of `inner` with the cost rate replaced.
pub struct CostOverride<'a, F: ?Sized> {
    pub inner: &'a F,
    pub cost_rate: f64,
}

impl<F: EnvFactory + ?Sized> EnvFactory for CostOverride<'_, F> {
    fn spec(&self, episode: u64) -> EpisodeSpec<f64> {
        self.inner.spec(episode).with_cost(self.cost_rate)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub cost_rate: f64,
    pub strategy: String,
    pub metrics: HedgeMetrics,
    pub ci95: (f64, f64),
}

/// Rows ordered by cost rate, then by strategy order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn get(&self, strategy: &str, cost_rate: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.strategy == strategy && r.cost_rate == cost_rate)
    }
}

/// Evaluates every strategy at every cost rate on the same episodes.
pub fn cost_sweep<F: EnvFactory + ?Sized>(
    factory: &F,
    strategies: &[&dyn HedgeStrategy],
    cost_rates: &[f64],
    ids: &[u64],
    seed: u64,
) -> Result<SweepResult, EvalError> {
    if cost_rates.is_empty() || cost_rates.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(EvalError::Invalid("cost rates must be nonempty and strictly increasing".into()));
    }
    if let Some(c) = cost_rates.iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
        return Err(EvalError::Invalid(format!("cost rate {}", c)));
    }
    let mut out = SweepResult::default();
    for &c in cost_rates {
        let f = CostOverride { inner: factory, cost_rate: c };
        for s in strategies {
            let (metrics, _): (HedgeMetrics, EvalRun) = evaluate(&f, *s, ids, seed)?;
            out.rows.push(SweepRow { cost_rate: c, strategy: s.name(), ci95: metrics.ci95(), metrics });
        }
    }
    Ok(out)
}

/// One metrics line per row.
pub fn write_metrics<W: Write>(out: &mut W, rows: &[SweepRow]) -> Result<(), EvalError> {
    writeln!(out, "{}", METRICS_HEADER)?;
    for r in rows {
        let m = &r.metrics;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.strategy, r.cost_rate, m.n, m.avg_r, m.avg_pv, m.std_pv, r.ci95.0, r.ci95.1
        )?;
    }
    Ok(())
}
