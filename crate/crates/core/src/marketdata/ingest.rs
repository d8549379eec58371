use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;

use super::{Channel, DataError, PricePanel};

/// Column names of the OHLC file. The defaults match the documented layout.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OhlcSchema {
    pub date: String,
    pub asset: String,
    pub open: String,
    pub high: String,
    pub low: String,
    pub close: String,
    pub market_value: String,
}

impl Default for OhlcSchema {
    fn default() -> Self {
        OhlcSchema {
            date: "date".into(),
            asset: "asset".into(),
            open: "open".into(),
            high: "high".into(),
            low: "low".into(),
            close: "close".into(),
            market_value: "market_value".into(),
        }
    }
}

pub(crate) fn column(headers: &csv::StringRecord, name: &str) -> Result<usize, DataError> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| DataError::Parse { line: 1, msg: format!("missing column {:?}", name) })
}

pub(crate) fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

pub(crate) fn parse_date(s: &str, line: u64) -> Result<NaiveDate, DataError> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|e| DataError::Parse { line, msg: format!("date {:?}: {}", s, e) })
}

pub(crate) fn parse_opt(s: &str, what: &str, line: u64) -> Result<Option<f64>, DataError> {
    if s.is_empty() {
        return Ok(None);
    }
    let v: f64 = s.parse().map_err(|_| DataError::Parse { line, msg: format!("{} {:?} is not a number", what, s) })?;
    if !v.is_finite() {
        return Err(DataError::Parse { line, msg: format!("{} {:?} is not finite", what, s) });
    }
    Ok(Some(v))
}

pub(crate) fn csv_err(e: csv::Error) -> DataError {
    match e.position() {
        Some(p) => DataError::Parse { line: p.line(), msg: e.to_string() },
        None => DataError::Io(e.to_string()),
    }
}

struct Row {
    line: u64,
    values: [Option<f64>; 4],
    market_value: Option<f64>,
}

/// Reads an OHLC file into a panel aligned on the union of all dates.
pub fn ingest_ohlc(path: &Path, schema: &OhlcSchema) -> Result<PricePanel, DataError> {
    let file = std::fs::File::open(path).map_err(|e| DataError::Io(format!("{}: {}", path.display(), e)))?;
    read_ohlc(file, schema)
}

pub fn read_ohlc<R: Read>(reader: R, schema: &OhlcSchema) -> Result<PricePanel, DataError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let cols = [&schema.open, &schema.high, &schema.low, &schema.close].map(|c| column(&headers, c));
    let cols = [cols[0].clone()?, cols[1].clone()?, cols[2].clone()?, cols[3].clone()?];
    let (date_col, asset_col, mv_col) =
        (column(&headers, &schema.date)?, column(&headers, &schema.asset)?, column(&headers, &schema.market_value)?);

    let mut rows: BTreeMap<(String, NaiveDate), Row> = BTreeMap::new();
    let mut asset_order: Vec<String> = Vec::new();
    let mut seen_assets: HashMap<String, ()> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = line_of(&rec);
        let field = |i: usize| rec.get(i).unwrap_or("");
        let date = parse_date(field(date_col), line)?;
        let asset = field(asset_col).to_string();
        if asset.is_empty() {
            return Err(DataError::Parse { line, msg: "empty asset id".into() });
        }
        let mut values = [None; 4];
        for c in Channel::ALL {
            values[c.index()] = parse_opt(field(cols[c.index()]), c.name(), line)?;
            if let Some(v) = values[c.index()] {
                if v <= 0.0 {
                    return Err(DataError::NonPositive { line, asset, date, field: c.name(), value: v });
                }
            }
        }
        let market_value = parse_opt(field(mv_col), "market value", line)?;
        if let Some(v) = market_value {
            if v <= 0.0 {
                return Err(DataError::NonPositive { line, asset, date, field: "market_value", value: v });
            }
        }
        if seen_assets.insert(asset.clone(), ()).is_none() {
            asset_order.push(asset.clone());
        }
        if let Some(first) = rows.get(&(asset.clone(), date)) {
            return Err(DataError::Duplicate { line, first: first.line, asset, date });
        }
        rows.insert((asset, date), Row { line, values, market_value });
    }

    let calendar: Vec<NaiveDate> = rows.keys().map(|(_, d)| *d).collect::<BTreeSet<_>>().into_iter().collect();
    let mut bars: [Vec<Vec<Option<f64>>>; 4] = Default::default();
    for c in bars.iter_mut() {
        *c = vec![vec![None; calendar.len()]; asset_order.len()];
    }
    let mut market_value = Vec::with_capacity(asset_order.len());
    let mut lines = vec![vec![0u64; calendar.len()]; asset_order.len()];
    for (i, asset) in asset_order.iter().enumerate() {
        let mut latest = None;
        for (t, date) in calendar.iter().enumerate() {
            if let Some(row) = rows.get(&(asset.clone(), *date)) {
                for c in 0..4 {
                    bars[c][i][t] = row.values[c];
                }
                lines[i][t] = row.line;
                latest = row.market_value.or(latest);
            }
        }
        market_value.push(latest.ok_or_else(|| DataError::MissingMarketValue(asset.clone()))?);
    }
    let panel = PricePanel { assets: asset_order, calendar, bars, market_value };
    for i in 0..panel.n_assets() {
        for t in 0..panel.n_dates() {
            panel.check_bar(i, t, lines[i][t])?;
        }
    }
    Ok(panel)
}

/// Writes a panel in the default layout. Every asset row carries its market value.
pub fn write_ohlc<W: Write>(panel: &PricePanel, writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| DataError::Io(e.to_string());
    w.write_record(["date", "asset", "open", "high", "low", "close", "market_value"]).map_err(io)?;
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (t, date) in panel.calendar.iter().enumerate() {
        for (i, asset) in panel.assets.iter().enumerate() {
            let bar = Channel::ALL.map(|c| panel.get(c, i, t));
            if bar.iter().all(Option::is_none) {
                continue;
            }
            w.write_record([
                date.to_string(),
                asset.clone(),
                cell(bar[0]),
                cell(bar[1]),
                cell(bar[2]),
                cell(bar[3]),
                panel.market_value[i].to_string(),
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|e| DataError::Io(e.to_string()))
}
