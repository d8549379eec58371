use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::NaiveDate;

use super::{implied_delta, implied_vol, PricingError, TRADING_DAYS};
use crate::marketdata::{trading_days_between, ContractKey, DataError, OptionRecord, PricePanel};

/// One expert state–action pair: the market's implied delta on one day of one contract.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertPair {
    pub contract: String,
    pub date: NaiveDate,
    /// Position of the quote within its contract's usable quotes.
    pub day: usize,
    pub s_over_k: f64,
    pub tte_years: f64,
    pub prev_action: f64,
    pub action: f64,
}

impl ExpertPair {
    pub fn state(&self) -> [f64; 3] {
        [self.s_over_k, self.tte_years, self.prev_action]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExpertReport {
    pub pairs: usize,
    pub contracts: usize,
    /// Quotes dropped because implied volatility could not be inverted.
    pub inversion_failures: usize,
    /// Quotes on or after expiry, or without an underlying close.
    pub unusable: usize,
    pub skipped: Vec<(String, NaiveDate, String)>,
}

/// Expert actions from an eligible option chain.
///
/// For every quote before expiry the implied volatility is inverted from the
/// quoted price and the implied delta becomes the action. Time to expiry is the
/// number of remaining trading days over 252. The previous action starts at 0 and
/// carries over skipped days.
pub fn build_expert_dataset(chain: &[OptionRecord], underlying: &PricePanel, r_f: f64) -> (Vec<ExpertPair>, ExpertReport) {
    let mut by_contract: BTreeMap<ContractKey, Vec<&OptionRecord>> = BTreeMap::new();
    for r in chain {
        by_contract.entry(r.key()).or_default().push(r);
    }
    let mut report = ExpertReport { contracts: by_contract.len(), ..Default::default() };
    let mut pairs = Vec::new();
    for (key, mut quotes) in by_contract {
        quotes.sort_by_key(|r| r.trade_date);
        let id = key.id();
        let asset = underlying.asset_index(&key.underlying);
        let mut prev = 0.0;
        let mut day = 0;
        for q in quotes {
            let mut skip = |reason: String, inversion: bool| {
                if inversion {
                    report.inversion_failures += 1;
                } else {
                    report.unusable += 1;
                }
                report.skipped.push((id.clone(), q.trade_date, reason));
            };
            let Some(s) = asset.and_then(|a| underlying.date_index(q.trade_date).and_then(|t| underlying.close(a, t))) else {
                skip("no underlying close".into(), false);
                continue;
            };
            let remaining = trading_days_between(&underlying.calendar, q.trade_date, q.expiry);
            if remaining == 0 {
                skip("no time to expiry".into(), false);
                continue;
            }
            let tte = remaining as f64 / TRADING_DAYS;
            let k = key.strike();
            let delta = implied_vol(q.close, s, k, r_f, tte).and_then(|sigma| implied_delta(s, k, r_f, sigma, tte));
            match delta {
                Ok(a) => {
                    pairs.push(ExpertPair {
                        contract: id.clone(),
                        date: q.trade_date,
                        day,
                        s_over_k: s / k,
                        tte_years: tte,
                        prev_action: prev,
                        action: a,
                    });
                    prev = a;
                    day += 1;
                }
                Err(e) => skip(e.to_string(), matches!(e, PricingError::Arbitrage { .. } | PricingError::NoRoot { .. })),
            }
        }
    }
    report.pairs = pairs.len();
    (pairs, report)
}

const EXPERT_HEADER: [&str; 6] = ["contract", "date", "S_over_K", "tte_years", "prev_action", "action"];

pub fn write_expert_csv<W: Write>(pairs: &[ExpertPair], writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| DataError::Io(e.to_string());
    w.write_record(EXPERT_HEADER).map_err(io)?;
    for p in pairs {
        w.write_record([
            p.contract.clone(),
            p.date.to_string(),
            p.s_over_k.to_string(),
            p.tte_years.to_string(),
            p.prev_action.to_string(),
            p.action.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| DataError::Io(e.to_string()))
}

/// Reads pairs written by [`write_expert_csv`]; day indices are rebuilt per contract.
pub fn read_expert_csv<R: Read>(reader: R) -> Result<Vec<ExpertPair>, DataError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| DataError::Io(e.to_string()))?.clone();
    if headers.iter().ne(EXPERT_HEADER) {
        return Err(DataError::Parse { line: 1, msg: format!("expected header {}", EXPERT_HEADER.join(",")) });
    }
    let mut out: Vec<ExpertPair> = Vec::new();
    let mut days: BTreeMap<String, usize> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| DataError::Io(e.to_string()))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let num = |i: usize| -> Result<f64, DataError> {
            rec[i].parse().map_err(|_| DataError::Parse { line, msg: format!("{} {:?} is not a number", EXPERT_HEADER[i], &rec[i]) })
        };
        let date = NaiveDate::parse_from_str(&rec[1], "%Y-%m-%d")
            .map_err(|e| DataError::Parse { line, msg: format!("date {:?}: {}", &rec[1], e) })?;
        let contract = rec[0].to_string();
        let day = days.entry(contract.clone()).or_insert(0);
        out.push(ExpertPair {
            contract,
            date,
            day: *day,
            s_over_k: num(2)?,
            tte_years: num(3)?,
            prev_action: num(4)?,
            action: num(5)?,
        });
        *day += 1;
    }
    Ok(out)
}
