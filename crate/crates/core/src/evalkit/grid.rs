use std::io::Write;

use super::metrics::quantile_sorted;
use super::{EpisodeOutcome, EvalError};

pub const GRID_HEADER: &str = "moneyness_lo,moneyness_hi,tte_lo,tte_hi,n,mean_pv,p05,p50,p95";

/// Bucket edges for entry moneyness `S_0 / K` and maturity in steps.
///
/// Buckets are half-open except the last one on each axis, which includes its
/// upper edge.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridBuckets {
    pub moneyness_edges: Vec<f64>,
    pub maturity_edges: Vec<f64>,
}

impl Default for GridBuckets {
    fn default() -> Self {
        GridBuckets {
            moneyness_edges: (0..=5).map(|i| 0.95 + 0.02 * i as f64).collect(),
            maturity_edges: (0..=7).map(|i| 1.0 + 3.0 * i as f64).collect(),
        }
    }
}

impl GridBuckets {
    pub fn validate(&self) -> Result<(), EvalError> {
        for (axis, e) in [("moneyness", &self.moneyness_edges), ("maturity", &self.maturity_edges)] {
            if e.len() < 2 || e.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(EvalError::Invalid(format!("{} edges must be at least two increasing values", axis)));
            }
        }
        Ok(())
    }
}

fn bucket(edges: &[f64], x: f64) -> Option<usize> {
    let last = edges.len() - 2;
    (0..=last).find(|&i| x >= edges[i] && (x < edges[i + 1] || (i == last && x <= edges[i + 1])))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub moneyness: (f64, f64),
    pub tte: (f64, f64),
    pub n: usize,
    /// `None` for empty buckets.
    pub mean_pv: Option<f64>,
    pub p05: Option<f64>,
    pub p50: Option<f64>,
    pub p95: Option<f64>,
    pub loss_probability: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridReport {
    /// Moneyness-major order.
    pub cells: Vec<GridCell>,
    /// Episodes outside every bucket.
    pub outside: usize,
}

/// Terminal-value summaries per (entry moneyness, maturity) bucket.
pub fn grid_report(outcomes: &[EpisodeOutcome], buckets: &GridBuckets) -> Result<GridReport, EvalError> {
    buckets.validate()?;
    let (me, te) = (&buckets.moneyness_edges, &buckets.maturity_edges);
    let (nm, nt) = (me.len() - 1, te.len() - 1);
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); nm * nt];
    let mut outside = 0;
    for o in outcomes {
        match (bucket(me, o.entry_moneyness()), bucket(te, o.steps as f64)) {
            (Some(i), Some(j)) => members[i * nt + j].push(o.pv),
            _ => outside += 1,
        }
    }
    let cells = members
        .into_iter()
        .enumerate()
        .map(|(idx, mut pv)| {
            let (i, j) = (idx / nt, idx % nt);
            pv.sort_by(f64::total_cmp);
            let n = pv.len();
            let stat = |f: &dyn Fn(&[f64]) -> f64| if n == 0 { None } else { Some(f(&pv)) };
            GridCell {
                moneyness: (me[i], me[i + 1]),
                tte: (te[j], te[j + 1]),
                n,
                mean_pv: stat(&|v| v.iter().sum::<f64>() / v.len() as f64),
                p05: stat(&|v| quantile_sorted(v, 0.05)),
                p50: stat(&|v| quantile_sorted(v, 0.5)),
                p95: stat(&|v| quantile_sorted(v, 0.95)),
                loss_probability: stat(&|v| v.iter().filter(|&&x| x < 0.0).count() as f64 / v.len() as f64),
            }
        })
        .collect();
    Ok(GridReport { cells, outside })
}

/// Empty buckets leave their statistic fields blank.
pub fn write_grid<W: Write>(out: &mut W, report: &GridReport) -> Result<(), EvalError> {
    writeln!(out, "{}", GRID_HEADER)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for c in &report.cells {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            c.moneyness.0,
            c.moneyness.1,
            c.tte.0,
            c.tte.1,
            c.n,
            opt(c.mean_pv),
            opt(c.p05),
            opt(c.p50),
            opt(c.p95)
        )?;
    }
    Ok(())
}
