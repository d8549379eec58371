//! Synthetic markets: GBM-driven OHLC panels and option chains priced exactly
//! by Black–Scholes. Used for fixtures, tests and desk-scale experiments.

use chrono::{Datelike, Days, NaiveDate, Weekday};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::marketdata::{trading_days_between, DataError, OptionRecord, PricePanel};
use crate::pricing::{bs_call_price, BsInputs, TRADING_DAYS};

/// The first `n` weekdays on or after `start`.
pub fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d + Days::new(1);
    }
    out
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticPanel {
    pub start: NaiveDate,
    pub n_dates: usize,
    /// Annualized volatility of each asset; its length sets the asset count.
    pub sigmas: Vec<f64>,
    /// Annualized drift shared by all assets.
    pub mu: f64,
    pub s0: f64,
    /// Probability that an (asset, date) bar is absent.
    pub missing_prob: f64,
}

impl Default for SyntheticPanel {
    fn default() -> Self {
        SyntheticPanel {
            start: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
            n_dates: 500,
            sigmas: vec![0.2, 0.3],
            mu: 0.0,
            s0: 100.0,
            missing_prob: 0.0,
        }
    }
}

/// Intraday segments per bar: one overnight gap then four trading-session moves.
const SEGMENTS: usize = 5;

impl SyntheticPanel {
    /// Simulates the panel. Closes follow exact daily GBM; open, high and low come
    /// from the intermediate points of the same day, so every bar is consistent.
    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<PricePanel, DataError> {
        let calendar = business_days(self.start, self.n_dates);
        let n = self.sigmas.len();
        let mut bars: [Vec<Vec<Option<f64>>>; 4] = Default::default();
        for c in bars.iter_mut() {
            *c = vec![vec![None; self.n_dates]; n];
        }
        let dt = 1.0 / TRADING_DAYS / SEGMENTS as f64;
        for (i, &sigma) in self.sigmas.iter().enumerate() {
            let drift = (self.mu - 0.5 * sigma * sigma) * dt;
            let vol = sigma * dt.sqrt();
            let mut close = self.s0;
            for t in 0..self.n_dates {
                let mut level = close;
                let mut pts = [0.0; SEGMENTS];
                for p in pts.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    level *= (drift + vol * z).exp();
                    *p = level;
                }
                let (open, close_t) = (pts[0], pts[SEGMENTS - 1]);
                let high = pts.iter().cloned().fold(f64::MIN, f64::max);
                let low = pts.iter().cloned().fold(f64::MAX, f64::min);
                close = close_t;
                if t > 0 && rng.random::<f64>() < self.missing_prob {
                    continue;
                }
                for (c, v) in [open, high, low, close_t].into_iter().enumerate() {
                    bars[c][i][t] = Some(v);
                }
            }
        }
        let assets = (0..n).map(|i| format!("SYN{}", i)).collect();
        let market_value = (0..n).map(|i| 1e3 * (i + 1) as f64).collect();
        PricePanel::new(assets, calendar, bars, market_value)
    }
}

/// A chain of calls on one panel asset, quoted at Black–Scholes prices.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticChain {
    pub asset: usize,
    pub sigma: f64,
    pub r_f: f64,
    /// Strikes as multiples of the entry close.
    pub strike_ratios: Vec<f64>,
    /// Contract lives in trading days.
    pub maturities: Vec<usize>,
    /// Trading days between successive listing dates.
    pub listing_stride: usize,
}

impl Default for SyntheticChain {
    fn default() -> Self {
        SyntheticChain {
            asset: 0,
            sigma: 0.2,
            r_f: 0.0,
            strike_ratios: vec![0.97, 1.0, 1.03],
            maturities: vec![10, 20],
            listing_stride: 5,
        }
    }
}

impl SyntheticChain {
    /// Quotes each contract on every calendar day from listing until the day
    /// before expiry. Time to expiry uses the trading-day convention of the
    /// expert dataset, so inverting the quotes recovers `sigma` exactly.
    pub fn generate(&self, panel: &PricePanel) -> Result<Vec<OptionRecord>, DataError> {
        if self.asset >= panel.n_assets() {
            return Err(DataError::Invalid(format!("asset index {} out of range", self.asset)));
        }
        let mut out = Vec::new();
        let stride = self.listing_stride.max(1);
        for entry in (0..panel.n_dates()).step_by(stride) {
            let Some(s_entry) = panel.close(self.asset, entry) else { continue };
            for &life in &self.maturities {
                if entry + life >= panel.n_dates() {
                    continue;
                }
                let expiry = panel.calendar[entry + life];
                for &ratio in &self.strike_ratios {
                    let strike = (s_entry * ratio * 100.0).round() / 100.0;
                    for t in entry..entry + life {
                        let Some(s) = panel.close(self.asset, t) else { continue };
                        let tte = trading_days_between(&panel.calendar, panel.calendar[t], expiry) as f64 / TRADING_DAYS;
                        let inp = BsInputs::new(s, strike, self.r_f, self.sigma, tte)
                            .map_err(|e| DataError::Invalid(e.to_string()))?;
                        out.push(OptionRecord {
                            trade_date: panel.calendar[t],
                            expiry,
                            strike,
                            close: bs_call_price(&inp),
                            volume: 10.0,
                            underlying: panel.assets[self.asset].clone(),
                        });
                    }
                }
            }
        }
        out.sort_by(|a, b| (a.trade_date, a.expiry, a.strike).partial_cmp(&(b.trade_date, b.expiry, b.strike)).unwrap());
        Ok(out)
    }
}
