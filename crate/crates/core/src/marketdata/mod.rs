//! Price and option-chain ingestion, log-return panels, and the two
//! conditioning layers applied to forecaster inputs: market-value dropout and
//! learned missing-value filling.
//!
//! Missing cells are carried as `None` end to end and are never forward-filled.

mod dropout;
mod ingest;
mod options;
mod panel;
mod split;

pub use dropout::{apply_dropout, inclusion_probabilities, market_value_dropout, res_missing_value, select_dropped, MvScale};
pub use ingest::{ingest_ohlc, read_ohlc, write_ohlc, OhlcSchema};
pub use options::{
    filter_eligible_options, ingest_options, read_options, trading_days_between, write_options, ContractKey, FilterReport,
    OptionChain, OptionRecord, EXPIRY_TRADING_DAYS, MONEYNESS_BAND,
};
pub use panel::{Channel, PricePanel, ReturnPanel};
pub use split::split_index;

use chrono::NaiveDate;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("{0}")]
    Io(String),
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("line {line}: {field} for {asset} on {date} is {value}; prices must be positive")]
    NonPositive { line: u64, asset: String, date: NaiveDate, field: &'static str, value: f64 },
    #[error("line {line}: {asset} on {date}: {msg}")]
    Inconsistent { line: u64, asset: String, date: NaiveDate, msg: String },
    #[error("line {line}: duplicate row for {asset} on {date} (first seen on line {first})")]
    Duplicate { line: u64, first: u64, asset: String, date: NaiveDate },
    #[error("asset {0} has no market value")]
    MissingMarketValue(String),
    #[error("{0}")]
    Invalid(String),
}
