use std::io::Write;

use super::metrics::quantile_sorted;
use super::EvalError;

pub const DISTRIBUTION_HEADER: &str = "grid_x,density,hist_count";

/// Histogram and Gaussian kernel density of terminal values on one grid.
///
/// `grid_x` holds bin centers; `hist_count[i]` counts samples in the bin around
/// `grid_x[i]` and `density[i]` is the kernel estimate at that point.
#[derive(Clone, Debug, PartialEq)]
pub struct PvDistribution {
    pub grid_x: Vec<f64>,
    pub density: Vec<f64>,
    pub hist_count: Vec<usize>,
    pub bandwidth: f64,
    pub bin_width: f64,
}

/// Silverman's rule `0.9 min(sd, IQR / 1.34) n^(-1/5)`, falling back to the
/// standard deviation when the interquartile range is zero. Zero for constant data.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    if samples.len() < 2 {
        return 0.0;
    }
    let mean = samples.iter().sum::<f64>() / n;
    let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * n.powf(-0.2)
}

/// Builds the histogram and density on `bins` evenly spaced points covering
/// the samples plus four bandwidths on each side.
pub fn pv_distribution(samples: &[f64], bins: usize) -> Result<PvDistribution, EvalError> {
    if samples.is_empty() || bins == 0 {
        return Err(EvalError::Invalid("distribution needs samples and at least one bin".into()));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(EvalError::Invalid("non-finite sample".into()));
    }
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut h = silverman_bandwidth(samples);
    if h == 0.0 {
        h = 1e-3 * lo.abs().max(1.0);
    }
    let (start, end) = (lo - 4.0 * h, hi + 4.0 * h);
    let width = (end - start) / bins as f64;
    let grid_x: Vec<f64> = (0..bins).map(|i| start + (i as f64 + 0.5) * width).collect();
    let mut hist_count = vec![0usize; bins];
    for &x in samples {
        let i = (((x - start) / width) as usize).min(bins - 1);
        hist_count[i] += 1;
    }
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let density = grid_x
        .iter()
        .map(|&g| norm * samples.iter().map(|&x| (-0.5 * ((g - x) / h).powi(2)).exp()).sum::<f64>())
        .collect();
    Ok(PvDistribution { grid_x, density, hist_count, bandwidth: h, bin_width: width })
}

pub fn write_distribution<W: Write>(out: &mut W, d: &PvDistribution) -> Result<(), EvalError> {
    writeln!(out, "{}", DISTRIBUTION_HEADER)?;
    for i in 0..d.grid_x.len() {
        writeln!(out, "{},{},{}", d.grid_x[i], d.density[i], d.hist_count[i])?;
    }
    Ok(())
}
