//! Simulated price paths shared by the pricing, forecasting and hedging code.

use std::io::{Read, Write};

use crate::scalar::Scalar;

pub const PATHS_HEADER: [&str; 4] = ["path", "t", "asset", "price"];

/// Dense `[n_paths × len × n_assets]` price cube, row-major.
///
/// Time index 0 holds the conditioning price, so a horizon of `h` steps
/// gives `len == h + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct PricePathSet<T> {
    n_paths: usize,
    len: usize,
    n_assets: usize,
    data: Vec<T>,
    /// Seed the paths were drawn from, when known.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PathError {
    #[error("path cube {n_paths}x{len}x{n_assets} needs {expected} prices, got {got}")]
    Size { n_paths: usize, len: usize, n_assets: usize, expected: usize, got: usize },
    #[error("price at path {path}, t={t}, asset {asset} is {value}; prices must be positive and finite")]
    NonPositive { path: usize, t: usize, asset: usize, value: f64 },
    #[error("path file line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("path file: {0}")]
    Io(String),
}

impl<T: Scalar> PricePathSet<T> {
    pub fn new(n_paths: usize, len: usize, n_assets: usize, data: Vec<T>) -> Result<Self, PathError> {
        let expected = n_paths * len * n_assets;
        if data.len() != expected || len == 0 {
            return Err(PathError::Size { n_paths, len, n_assets, expected, got: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !(v.is_finite() && *v > T::zero())) {
            let (path, rem) = (i / (len * n_assets), i % (len * n_assets));
            return Err(PathError::NonPositive {
                path,
                t: rem / n_assets,
                asset: rem % n_assets,
                value: data[i].as_f64(),
            });
        }
        Ok(PricePathSet { n_paths, len, n_assets, data, seed: None })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    /// Number of time points, horizon + 1.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.n_paths == 0
    }

    pub fn horizon(&self) -> usize {
        self.len - 1
    }

    pub fn n_assets(&self) -> usize {
        self.n_assets
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn price(&self, path: usize, t: usize, asset: usize) -> T {
        self.data[(path * self.len + t) * self.n_assets + asset]
    }

    /// Prices of one asset along one path.
    pub fn series(&self, path: usize, asset: usize) -> Vec<T> {
        (0..self.len).map(|t| self.price(path, t, asset)).collect()
    }
}

impl PricePathSet<f64> {
    /// Writes one `path, t, asset, price` row per cell, path-major.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), PathError> {
        let io = |e: csv::Error| PathError::Io(e.to_string());
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(PATHS_HEADER).map_err(io)?;
        for p in 0..self.n_paths {
            for t in 0..self.len {
                for a in 0..self.n_assets {
                    w.write_record([p.to_string(), t.to_string(), a.to_string(), self.price(p, t, a).to_string()])
                        .map_err(io)?;
                }
            }
        }
        w.flush().map_err(|e| PathError::Io(e.to_string()))
    }

    /// Reads a file written by [`PricePathSet::write_csv`]. Rows must come in
    /// the same complete path-major order.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, PathError> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers().map_err(|e| PathError::Io(e.to_string()))?;
        if header.iter().ne(PATHS_HEADER) {
            return Err(PathError::Parse { line: 1, detail: format!("expected header {}", PATHS_HEADER.join(",")) });
        }
        let mut rows: Vec<[usize; 3]> = Vec::new();
        let mut data = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| PathError::Parse { line, detail: e.to_string() })?;
            let bad = |detail: String| PathError::Parse { line, detail };
            if rec.len() != 4 {
                return Err(bad(format!("expected 4 fields, got {}", rec.len())));
            }
            let mut idx = [0usize; 3];
            for (k, v) in idx.iter_mut().enumerate() {
                *v = rec[k].parse().map_err(|_| bad(format!("{} is not an index", &rec[k])))?;
            }
            data.push(rec[3].parse::<f64>().map_err(|_| bad(format!("{} is not a price", &rec[3])))?);
            rows.push(idx);
        }
        let Some(last) = rows.last() else {
            return Err(PathError::Parse { line: 2, detail: "no prices".into() });
        };
        let (n_paths, len, n_assets) = (last[0] + 1, last[1] + 1, last[2] + 1);
        for (i, row) in rows.iter().enumerate() {
            let expect = [i / (len * n_assets), i / n_assets % len, i % n_assets];
            if *row != expect {
                return Err(PathError::Parse { line: i + 2, detail: format!("expected indices {:?}, got {:?}", expect, row) });
            }
        }
        PricePathSet::new(n_paths, len, n_assets, data)
    }
}
