use chrono::NaiveDate;
use log::warn;

use super::{DataError, PricePanel, ReturnPanel};

/// Cut points for a chronological three-way split with inclusive ends.
///
/// Returns `(a, b)` such that train is `dates[..a]`, validation `dates[a..b]`
/// and test `dates[b..]`. A date equal to a boundary falls in the earlier split.
pub fn split_index(dates: &[NaiveDate], train_end: NaiveDate, val_end: NaiveDate) -> Result<(usize, usize), DataError> {
    if train_end >= val_end {
        return Err(DataError::Invalid(format!("train end {} must precede validation end {}", train_end, val_end)));
    }
    let a = dates.partition_point(|d| *d <= train_end);
    let b = dates.partition_point(|d| *d <= val_end);
    match dates.last() {
        Some(last) if val_end >= *last => warn!("validation end {} is at or past the last date {}; test split is empty", val_end, last),
        None => warn!("splitting an empty calendar"),
        _ => {}
    }
    Ok((a, b))
}

impl PricePanel {
    pub fn split_by_date(&self, train_end: NaiveDate, val_end: NaiveDate) -> Result<(Self, Self, Self), DataError> {
        let (a, b) = split_index(&self.calendar, train_end, val_end)?;
        Ok((self.slice_dates(0..a), self.slice_dates(a..b), self.slice_dates(b..self.n_dates())))
    }
}

impl ReturnPanel {
    pub fn split_by_date(&self, train_end: NaiveDate, val_end: NaiveDate) -> Result<(Self, Self, Self), DataError> {
        let (a, b) = split_index(&self.dates, train_end, val_end)?;
        Ok((self.slice_dates(0..a), self.slice_dates(a..b), self.slice_dates(b..self.len())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn calendar(n: usize) -> Vec<NaiveDate> {
        let start = NaiveDate::from_ymd_opt(2023, 1, 1).unwrap();
        (0..n).map(|i| start + chrono::Days::new(i as u64)).collect()
    }

    #[test]
    fn seventy_fifteen_fifteen() {
        let c = calendar(100);
        assert_eq!(split_index(&c, c[69], c[84]).unwrap(), (70, 85));
    }

    #[test]
    fn boundary_date_goes_to_earlier_split() {
        let c = calendar(10);
        let (a, _) = split_index(&c, c[3], c[6]).unwrap();
        assert_eq!(a, 4);
        assert_eq!(c[a - 1], c[3]);
    }

    #[test]
    fn past_calendar_leaves_test_empty() {
        let c = calendar(10);
        let beyond = c[9] + chrono::Days::new(30);
        assert_eq!(split_index(&c, c[5], beyond).unwrap(), (6, 10));
    }

    #[test]
    fn rejects_reversed_bounds() {
        let c = calendar(10);
        assert!(split_index(&c, c[5], c[5]).is_err());
        assert!(split_index(&c, c[6], c[5]).is_err());
    }
}
