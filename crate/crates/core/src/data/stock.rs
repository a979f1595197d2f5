//! Daily-close CSV ingestion into paired log returns.
//!
//! Each input file has a header naming a `date` and a `close` column, in any
//! case and order; other columns are ignored. Dates are ISO `YYYY-MM-DD`.
//! A pair of tickers yields one row per pair of consecutive common trading
//! days, `(log(a_{d+1}/a_d), log(b_{d+1}/b_d))`, dated `d+1`, with the
//! pair index as block id. Rows of all pairs are split 70/15/15 in time.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

#[derive(Clone, Debug, PartialEq)]
pub struct PriceSeries {
    pub ticker: String,
    pub closes: BTreeMap<NaiveDate, f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StockPair {
    pub a: PathBuf,
    pub b: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StockData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Trading days present for only one ticker of a pair.
    pub skipped: usize,
    pub tickers: Vec<(String, String)>,
}

fn ticker_of(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("?")
        .to_string()
}

pub fn read_price_csv(path: &Path) -> Result<PriceSeries> {
    let ticker = ticker_of(path);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.to_ascii_lowercase())
        .collect();
    let column = |name: &str| header.iter().position(|h| h == name);
    let (Some(date_col), Some(close_col)) = (column("date"), column("close")) else {
        return Err(Error::Parse(format!(
            "{}: header needs `date` and `close` columns, found `{}`",
            path.display(),
            header.join(",")
        )));
    };
    let mut closes = BTreeMap::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        let date_s = rec.get(date_col).unwrap_or("");
        let date = NaiveDate::parse_from_str(date_s, "%Y-%m-%d").map_err(|e| {
            Error::Parse(format!("{}:{line}: date {date_s:?}: {e}", path.display()))
        })?;
        let close_s = rec.get(close_col).unwrap_or("");
        let price: f64 = close_s.parse().map_err(|e| {
            Error::Parse(format!("{}:{line}: close {close_s:?}: {e}", path.display()))
        })?;
        if !(price > 0.0) || !price.is_finite() {
            return Err(Error::NonPositivePrice {
                ticker: ticker.clone(),
                date: date_s.to_string(),
                price,
            });
        }
        if closes.insert(date, price).is_some() {
            return Err(Error::Parse(format!(
                "{}:{line}: duplicate date {date_s}",
                path.display()
            )));
        }
    }
    Ok(PriceSeries { ticker, closes })
}

/// Returns on consecutive common trading days and the count of days
/// present in only one series.
pub fn pair_returns(a: &PriceSeries, b: &PriceSeries) -> (Vec<(NaiveDate, [f64; 2])>, usize) {
    let common: Vec<(NaiveDate, f64, f64)> = a
        .closes
        .iter()
        .filter_map(|(d, &pa)| b.closes.get(d).map(|&pb| (*d, pa, pb)))
        .collect();
    let skipped = a.closes.len() + b.closes.len() - 2 * common.len();
    let rows = common
        .windows(2)
        .map(|w| {
            let (_, a0, b0) = w[0];
            let (d1, a1, b1) = w[1];
            (d1, [(a1 / a0).ln(), (b1 / b0).ln()])
        })
        .collect();
    (rows, skipped)
}

/// Index in `bounds` closest to `target`, restricted to `(lo, hi)`.
fn snap(bounds: &[usize], target: f64, lo: usize, hi: usize) -> Option<usize> {
    bounds
        .iter()
        .copied()
        .filter(|&c| c > lo && c < hi)
        .min_by(|&x, &y| {
            (x as f64 - target)
                .abs()
                .partial_cmp(&(y as f64 - target).abs())
                .expect("finite")
                .then(x.cmp(&y))
        })
}

pub fn ingest_stock_csv(pairs: &[StockPair]) -> Result<StockData> {
    if pairs.is_empty() {
        return Err(Error::InvalidParameter("no stock pairs given".into()));
    }
    let mut rows: Vec<(NaiveDate, usize, [f64; 2])> = Vec::new();
    let mut skipped = 0;
    let mut tickers = Vec::new();
    for (k, pair) in pairs.iter().enumerate() {
        let a = read_price_csv(&pair.a)?;
        let b = read_price_csv(&pair.b)?;
        let (r, s) = pair_returns(&a, &b);
        if s > 0 {
            log::warn!(
                "{}/{}: {s} trading days without a partner quote skipped",
                a.ticker,
                b.ticker
            );
        }
        skipped += s;
        rows.extend(r.into_iter().map(|(d, v)| (d, k, v)));
        tickers.push((a.ticker, b.ticker));
    }
    rows.sort_by(|x, y| x.0.cmp(&y.0).then(x.1.cmp(&y.1)));
    let n = rows.len();
    let bounds: Vec<usize> = (1..n).filter(|&k| rows[k].0 != rows[k - 1].0).collect();
    let c1 = snap(&bounds, 0.70 * n as f64, 0, n);
    let c2 = c1.and_then(|c1| snap(&bounds, 0.85 * n as f64, c1, n));
    let (c1, c2) = match (c1, c2) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::InvalidParameter(format!(
                "{n} return rows over too few dates for a three-way temporal split"
            )))
        }
    };
    let build = |range: std::ops::Range<usize>, split: Split| -> Result<Dataset> {
        let part = &rows[range];
        let mut remap = vec![usize::MAX; pairs.len()];
        let mut next = 0;
        let mut present: Vec<usize> = part.iter().map(|r| r.1).collect();
        present.sort_unstable();
        present.dedup();
        for p in present {
            remap[p] = next;
            next += 1;
        }
        let x = DenseMatrix::from_rows(&part.iter().map(|r| r.2).collect::<Vec<_>>())?;
        let ds = Dataset {
            x,
            block_ids: Some(part.iter().map(|r| remap[r.1]).collect()),
            g: None,
            true_params: None,
            split,
            dates: Some(
                part.iter()
                    .map(|r| r.0.format("%Y-%m-%d").to_string())
                    .collect(),
            ),
        };
        ds.validate()?;
        Ok(ds)
    };
    Ok(StockData {
        train: build(0..c1, Split::Train)?,
        val: build(c1..c2, Split::Val)?,
        test: build(c2..n, Split::Test)?,
        skipped,
        tickers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &Path, name: &str, rows: &[(&str, f64)]) -> PathBuf {
        let p = dir.join(name);
        let mut s = String::from("date,close\n");
        for (d, c) in rows {
            s.push_str(&format!("{d},{c}\n"));
        }
        fs::write(&p, s).unwrap();
        p
    }

    #[test]
    fn worked_example() {
        let dir = tempfile::tempdir().unwrap();
        let ma = read_price_csv(&write(
            dir.path(),
            "MA.csv",
            &[("2012-06-21", 40.737), ("2012-06-22", 42.080)],
        ))
        .unwrap();
        let v = read_price_csv(&write(
            dir.path(),
            "V.csv",
            &[("2012-06-21", 28.661), ("2012-06-22", 29.976)],
        ))
        .unwrap();
        let (rows, skipped) = pair_returns(&ma, &v);
        assert_eq!(skipped, 0);
        assert_eq!(rows.len(), 1);
        assert_eq!(format!("{:.4}", rows[0].1[0]), "0.0324");
        assert_eq!(format!("{:.4}", rows[0].1[1]), "0.0449");
    }

    #[test]
    fn extra_columns_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("X.csv");
        fs::write(
            &p,
            "Date,Open,High,Low,Close,Volume\n2020-01-02,1,3,0.5,2.5,100\n",
        )
        .unwrap();
        let s = read_price_csv(&p).unwrap();
        let d = NaiveDate::from_ymd_opt(2020, 1, 2).unwrap();
        assert_eq!(s.closes[&d], 2.5);

        fs::write(&p, "date,open\n2020-01-02,1\n").unwrap();
        assert!(matches!(read_price_csv(&p), Err(Error::Parse(_))));
    }

    #[test]
    fn misaligned_days_are_counted() {
        let dir = tempfile::tempdir().unwrap();
        let a = read_price_csv(&write(
            dir.path(),
            "A.csv",
            &[
                ("2020-01-01", 1.0),
                ("2020-01-02", 2.0),
                ("2020-01-03", 4.0),
            ],
        ))
        .unwrap();
        let b = read_price_csv(&write(
            dir.path(),
            "B.csv",
            &[("2020-01-01", 1.0), ("2020-01-03", 3.0)],
        ))
        .unwrap();
        let (rows, skipped) = pair_returns(&a, &b);
        assert_eq!(skipped, 1);
        assert_eq!(rows.len(), 1);
        assert!((rows[0].1[0] - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn bad_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "Z.csv",
            &[("2020-01-01", 1.0), ("2020-01-02", 0.0)],
        );
        match read_price_csv(&p) {
            Err(Error::NonPositivePrice { ticker, date, .. }) => {
                assert_eq!(ticker, "Z");
                assert_eq!(date, "2020-01-02");
            }
            other => panic!("{other:?}"),
        }
        let p = dir.path().join("H.csv");
        fs::write(&p, "2020-01-01,1.0\n").unwrap();
        assert!(read_price_csv(&p).is_err());
    }
}
