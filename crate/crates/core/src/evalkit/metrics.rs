use super::EvalError;

/// z-score of a two-sided 95% normal interval.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Hedging statistics over terminal portfolio values.
#[derive(Clone, Debug, PartialEq)]
pub struct HedgeMetrics {
    pub n: usize,
    /// Mean of `-PV_T^2`.
    pub avg_r: f64,
    pub avg_pv: f64,
    /// Sample standard deviation with the `n - 1` denominator.
    pub std_pv: f64,
    pub pv_samples: Vec<f64>,
}

impl HedgeMetrics {
    pub fn from_samples(pv: &[f64]) -> Result<Self, EvalError> {
        if pv.len() < 2 {
            return Err(EvalError::TooFewEpisodes(pv.len()));
        }
        if let Some(bad) = pv.iter().find(|v| !v.is_finite()) {
            return Err(EvalError::Invalid(format!("non-finite terminal value {}", bad)));
        }
        let n = pv.len() as f64;
        let avg_pv = pv.iter().sum::<f64>() / n;
        let avg_r = -pv.iter().map(|v| v * v).sum::<f64>() / n;
        let ss = pv.iter().map(|v| (v - avg_pv).powi(2)).sum::<f64>();
        Ok(HedgeMetrics { n: pv.len(), avg_r, avg_pv, std_pv: (ss / (n - 1.0)).sqrt(), pv_samples: pv.to_vec() })
    }

    /// Normal-approximation 95% interval for the mean terminal value.
    pub fn ci95(&self) -> (f64, f64) {
        let half = Z95 * self.std_pv / (self.n as f64).sqrt();
        (self.avg_pv - half, self.avg_pv + half)
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}
