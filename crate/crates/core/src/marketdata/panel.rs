use chrono::NaiveDate;

use super::DataError;

/// One of the four price fields of a daily bar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Channel {
    Open = 0,
    High = 1,
    Low = 2,
    Close = 3,
}

impl Channel {
    pub const ALL: [Channel; 4] = [Channel::Open, Channel::High, Channel::Low, Channel::Close];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Open => "open",
            Channel::High => "high",
            Channel::Low => "low",
            Channel::Close => "close",
        }
    }
}

/// Daily OHLC bars for a set of assets on a shared calendar.
///
/// `bars[c][i][t]` is channel `c` of asset `i` on `calendar[t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PricePanel {
    pub assets: Vec<String>,
    pub calendar: Vec<NaiveDate>,
    pub bars: [Vec<Vec<Option<f64>>>; 4],
    pub market_value: Vec<f64>,
}

impl PricePanel {
    /// Builds a panel after checking shapes, price positivity and bar consistency.
    pub fn new(
        assets: Vec<String>,
        calendar: Vec<NaiveDate>,
        bars: [Vec<Vec<Option<f64>>>; 4],
        market_value: Vec<f64>,
    ) -> Result<Self, DataError> {
        let n = assets.len();
        if market_value.len() != n || bars.iter().any(|c| c.len() != n) {
            return Err(DataError::Invalid(format!("panel needs {} rows per channel and market value", n)));
        }
        if bars.iter().flatten().any(|row| row.len() != calendar.len()) {
            return Err(DataError::Invalid(format!("every row must span {} dates", calendar.len())));
        }
        if calendar.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DataError::Invalid("calendar must be strictly increasing".into()));
        }
        if let Some(i) = market_value.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(DataError::MissingMarketValue(assets[i].clone()));
        }
        let panel = PricePanel { assets, calendar, bars, market_value };
        for i in 0..n {
            for t in 0..panel.calendar.len() {
                panel.check_bar(i, t, 0)?;
            }
        }
        Ok(panel)
    }

    pub(crate) fn check_bar(&self, i: usize, t: usize, line: u64) -> Result<(), DataError> {
        let get = |c: Channel| self.bars[c.index()][i][t];
        for c in Channel::ALL {
            if let Some(v) = get(c) {
                if !(v.is_finite() && v > 0.0) {
                    return Err(DataError::NonPositive {
                        line,
                        asset: self.assets[i].clone(),
                        date: self.calendar[t],
                        field: c.name(),
                        value: v,
                    });
                }
            }
        }
        let bad = |msg: String| DataError::Inconsistent { line, asset: self.assets[i].clone(), date: self.calendar[t], msg };
        let (h, l) = (get(Channel::High), get(Channel::Low));
        for c in [Channel::Open, Channel::Close] {
            if let (Some(h), Some(x)) = (h, get(c)) {
                if h < x {
                    return Err(bad(format!("high {} below {} {}", h, c.name(), x)));
                }
            }
            if let (Some(l), Some(x)) = (l, get(c)) {
                if l > x {
                    return Err(bad(format!("low {} above {} {}", l, c.name(), x)));
                }
            }
        }
        Ok(())
    }

    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    pub fn n_dates(&self) -> usize {
        self.calendar.len()
    }

    pub fn get(&self, c: Channel, asset: usize, t: usize) -> Option<f64> {
        self.bars[c.index()][asset][t]
    }

    pub fn close(&self, asset: usize, t: usize) -> Option<f64> {
        self.get(Channel::Close, asset, t)
    }

    pub fn asset_index(&self, id: &str) -> Option<usize> {
        self.assets.iter().position(|a| a == id)
    }

    pub fn date_index(&self, d: NaiveDate) -> Option<usize> {
        self.calendar.binary_search(&d).ok()
    }

    pub fn missing_count(&self) -> usize {
        self.bars.iter().flatten().flatten().filter(|v| v.is_none()).count()
    }

    /// Sub-panel over calendar positions `range`.
    pub fn slice_dates(&self, range: std::ops::Range<usize>) -> PricePanel {
        PricePanel {
            assets: self.assets.clone(),
            calendar: self.calendar[range.clone()].to_vec(),
            bars: self.bars.clone().map(|c| c.into_iter().map(|row| row[range.clone()].to_vec()).collect()),
            market_value: self.market_value.clone(),
        }
    }

    /// Four-channel log returns against the previous close:
    /// `r^X_t = ln X_{t+1} - ln C_t`. Any missing operand gives a missing return.
    pub fn to_log_returns(&self) -> Result<ReturnPanel, DataError> {
        if self.n_dates() < 2 {
            return Err(DataError::Invalid(format!("log returns need at least 2 dates, panel has {}", self.n_dates())));
        }
        let t_len = self.n_dates() - 1;
        let returns = Channel::ALL.map(|c| {
            (0..self.n_assets())
                .map(|i| {
                    (0..t_len)
                        .map(|t| match (self.get(c, i, t + 1), self.close(i, t)) {
                            (Some(x), Some(prev)) => Some(x.ln() - prev.ln()),
                            _ => None,
                        })
                        .collect()
                })
                .collect()
        });
        Ok(ReturnPanel {
            assets: self.assets.clone(),
            dates: self.calendar[1..].to_vec(),
            returns,
            closes: self.bars[Channel::Close.index()].clone(),
            market_value: self.market_value.clone(),
        })
    }
}

/// Log returns of a [`PricePanel`].
///
/// `returns[c][i][t]` is the channel-`c` return of asset `i` realized on `dates[t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReturnPanel {
    pub assets: Vec<String>,
    pub dates: Vec<NaiveDate>,
    pub returns: [Vec<Vec<Option<f64>>>; 4],
    /// Closes `closes[i][t]` on the date preceding `dates[t]`, plus the final close,
    /// so each row has `dates.len() + 1` entries.
    pub closes: Vec<Vec<Option<f64>>>,
    pub market_value: Vec<f64>,
}

impl ReturnPanel {
    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn get(&self, c: Channel, asset: usize, t: usize) -> Option<f64> {
        self.returns[c.index()][asset][t]
    }

    /// Closing prices `C_0 exp(cumsum r^C)` for one asset, starting with the first close.
    ///
    /// Entries after the first missing return are `None`.
    pub fn reconstruct_close(&self, asset: usize) -> Vec<Option<f64>> {
        let base = self.closes[asset][0];
        let mut out = Vec::with_capacity(self.len() + 1);
        out.push(base);
        let mut acc = Some(0.0);
        for t in 0..self.len() {
            acc = acc.zip(self.get(Channel::Close, asset, t)).map(|(a, r)| a + r);
            out.push(base.zip(acc).map(|(c0, a)| c0 * a.exp()));
        }
        out
    }

    /// Sub-panel over return positions `range`.
    pub fn slice_dates(&self, range: std::ops::Range<usize>) -> ReturnPanel {
        ReturnPanel {
            assets: self.assets.clone(),
            dates: self.dates[range.clone()].to_vec(),
            returns: self.returns.clone().map(|c| c.into_iter().map(|row| row[range.clone()].to_vec()).collect()),
            closes: self.closes.iter().map(|row| row[range.start..=range.end].to_vec()).collect(),
            market_value: self.market_value.clone(),
        }
    }
}
