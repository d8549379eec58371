use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, Days, NaiveDate, Weekday};
use log::warn;

use super::ingest::{column, csv_err, line_of, parse_date, parse_opt};
use super::{DataError, PricePanel};

/// One daily quote of a call option.
#[derive(Clone, Debug, PartialEq)]
pub struct OptionRecord {
    pub trade_date: NaiveDate,
    pub expiry: NaiveDate,
    pub strike: f64,
    pub close: f64,
    pub volume: f64,
    pub underlying: String,
}

impl OptionRecord {
    pub fn key(&self) -> ContractKey {
        ContractKey { underlying: self.underlying.clone(), expiry: self.expiry, strike_bits: self.strike.to_bits() }
    }
}

/// Identity of a listed contract. Ordering follows underlying, expiry, then strike.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContractKey {
    pub underlying: String,
    pub expiry: NaiveDate,
    strike_bits: u64,
}

impl ContractKey {
    pub fn strike(&self) -> f64 {
        f64::from_bits(self.strike_bits)
    }

    /// Stable text id, e.g. `IDX-20240119-100`.
    pub fn id(&self) -> String {
        format!("{}-{}-{}", self.underlying, self.expiry.format("%Y%m%d"), self.strike())
    }
}

pub type OptionChain = Vec<OptionRecord>;

/// Moneyness band for eligible contracts at entry.
pub const MONEYNESS_BAND: (f64, f64) = (0.95, 1.05);
/// Longest eligible life of a contract, in trading days from entry.
pub const EXPIRY_TRADING_DAYS: usize = 22;

pub fn ingest_options(path: &Path) -> Result<OptionChain, DataError> {
    let file = std::fs::File::open(path).map_err(|e| DataError::Io(format!("{}: {}", path.display(), e)))?;
    read_options(file)
}

/// Reads `trade_date, expiry_date, strike, close, volume, underlying` rows.
pub fn read_options<R: Read>(reader: R) -> Result<OptionChain, DataError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let cols = ["trade_date", "expiry_date", "strike", "close", "volume", "underlying"].map(|c| column(&headers, c));
    let [td, ex, k, c, v, u] = [0, 1, 2, 3, 4, 5].map(|i| cols[i].clone());
    let (td, ex, k, c, v, u) = (td?, ex?, k?, c?, v?, u?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = line_of(&rec);
        let field = |i: usize| rec.get(i).unwrap_or("");
        let required = |i: usize, what: &str| {
            parse_opt(field(i), what, line)?.ok_or_else(|| DataError::Parse { line, msg: format!("{} is empty", what) })
        };
        let r = OptionRecord {
            trade_date: parse_date(field(td), line)?,
            expiry: parse_date(field(ex), line)?,
            strike: required(k, "strike")?,
            close: required(c, "close")?,
            volume: required(v, "volume")?,
            underlying: field(u).to_string(),
        };
        let bad = |msg: String| DataError::Parse { line, msg };
        if r.expiry < r.trade_date {
            return Err(bad(format!("expiry {} precedes trade date {}", r.expiry, r.trade_date)));
        }
        if r.strike <= 0.0 {
            return Err(bad(format!("strike {} must be positive", r.strike)));
        }
        if r.close < 0.0 || r.volume < 0.0 {
            return Err(bad("price and volume must be nonnegative".into()));
        }
        if r.underlying.is_empty() {
            return Err(bad("empty underlying id".into()));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn write_options<W: Write>(chain: &[OptionRecord], writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| DataError::Io(e.to_string());
    w.write_record(["trade_date", "expiry_date", "strike", "close", "volume", "underlying"]).map_err(io)?;
    for r in chain {
        w.write_record([
            r.trade_date.to_string(),
            r.expiry.to_string(),
            r.strike.to_string(),
            r.close.to_string(),
            r.volume.to_string(),
            r.underlying.clone(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| DataError::Io(e.to_string()))
}

/// Trading days in `(from, to]`: calendar dates inside the range, plus weekdays
/// past the end of the calendar.
pub fn trading_days_between(calendar: &[NaiveDate], from: NaiveDate, to: NaiveDate) -> usize {
    if to <= from {
        return 0;
    }
    let lo = calendar.partition_point(|d| *d <= from);
    let hi = calendar.partition_point(|d| *d <= to);
    let mut n = hi - lo;
    let mut d = calendar.last().copied().unwrap_or(from).max(from);
    while d < to {
        d = d + Days::new(1);
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            n += 1;
        }
    }
    n
}

/// Counts of what [`filter_eligible_options`] removed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FilterReport {
    pub input: usize,
    pub kept: usize,
    pub zero_volume: usize,
    pub outside_band: usize,
    pub too_long: usize,
    /// Records whose underlying is not in the panel.
    pub unknown_underlying: usize,
    /// Records whose contract's entry date has no underlying close.
    pub uncovered: usize,
}

/// Keeps quotes with positive volume whose contract enters with
/// `0.95 <= S_entry / K <= 1.05` and expires within 22 trading days of entry.
///
/// A contract's entry is its first quote with positive volume; zero-volume
/// quotes are dropped before contracts are grouped.
pub fn filter_eligible_options(chain: &[OptionRecord], underlying: &PricePanel) -> (OptionChain, FilterReport) {
    let mut report = FilterReport { input: chain.len(), ..Default::default() };
    let mut contracts: BTreeMap<ContractKey, Vec<&OptionRecord>> = BTreeMap::new();
    for r in chain {
        if r.volume <= 0.0 {
            report.zero_volume += 1;
        } else {
            contracts.entry(r.key()).or_default().push(r);
        }
    }
    let mut kept = Vec::new();
    for (key, mut quotes) in contracts {
        quotes.sort_by_key(|r| r.trade_date);
        let Some(asset) = underlying.asset_index(&key.underlying) else {
            warn!("contract {} references unknown underlying {}", key.id(), key.underlying);
            report.unknown_underlying += quotes.len();
            continue;
        };
        let entry = quotes[0].trade_date;
        let Some(s0) = underlying.date_index(entry).and_then(|t| underlying.close(asset, t)) else {
            warn!("no underlying close for contract {} on entry date {}", key.id(), entry);
            report.uncovered += quotes.len();
            continue;
        };
        let m = s0 / key.strike();
        if !(MONEYNESS_BAND.0..=MONEYNESS_BAND.1).contains(&m) {
            report.outside_band += quotes.len();
            continue;
        }
        if trading_days_between(&underlying.calendar, entry, key.expiry) > EXPIRY_TRADING_DAYS {
            report.too_long += quotes.len();
            continue;
        }
        kept.extend(quotes.into_iter().cloned());
    }
    report.kept = kept.len();
    (kept, report)
}
