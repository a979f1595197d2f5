//! Relationship-matrix and block-assignment files.
//!
//! A matrix file is either headerless CSV (one matrix row per line) or, for
//! any other extension, the binary layout `b"DEPFMAT1"`, `rows: u64 LE`,
//! `cols: u64 LE`, then `rows * cols` little-endian `f64` in row-major order.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

const MAGIC: &[u8; 8] = b"DEPFMAT1";

fn is_csv(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

pub fn read_relationship_matrix(path: &Path) -> Result<DenseMatrix> {
    let m = if is_csv(path) {
        read_csv(path)?
    } else {
        read_binary(path)?
    };
    if !m.is_finite() {
        return Err(Error::Parse(format!(
            "{}: non-finite entry",
            path.display()
        )));
    }
    Ok(m)
}

fn read_csv(path: &Path) -> Result<DenseMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|e| {
                    Error::Parse(format!("{}:{}: {f:?}: {e}", path.display(), line + 1))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    DenseMatrix::from_rows(&rows)
}

fn read_binary(path: &Path) -> Result<DenseMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |what: &str| Error::Parse(format!("{}: {what}", path.display()));
    if bytes.len() < 24 || &bytes[..8] != MAGIC {
        return Err(bad("missing matrix header"));
    }
    let word = |k: usize| u64::from_le_bytes(bytes[k..k + 8].try_into().expect("8 bytes"));
    let (rows, cols) = (word(8) as usize, word(16) as usize);
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| bad("matrix size overflows"))?;
    if bytes.len() != 24 + 8 * count {
        return Err(bad("payload length does not match header"));
    }
    let data = bytes[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    DenseMatrix::new(rows, cols, data)
}

pub fn write_matrix_binary(m: &DenseMatrix, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(24 + 8 * m.as_slice().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_matrix_csv(m: &DenseMatrix, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    for i in 0..m.rows() {
        w.write_record(m.row(i).iter().map(|v| format!("{v:?}")))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One non-negative integer per line; blank lines are ignored.
pub fn read_block_ids(path: &Path) -> Result<Vec<usize>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut ids = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        ids.push(
            t.parse::<usize>()
                .map_err(|e| Error::Parse(format!("{}:{}: {t:?}: {e}", path.display(), k + 1)))?,
        );
    }
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_and_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = DenseMatrix::from_rows(&[[1.0, 0.1 + 0.2], [0.3, 1.0 / 3.0]]).unwrap();
        let bin = dir.path().join("g.bin");
        write_matrix_binary(&m, &bin).unwrap();
        assert_eq!(read_relationship_matrix(&bin).unwrap(), m);
        let csv = dir.path().join("g.csv");
        write_matrix_csv(&m, &csv).unwrap();
        assert_eq!(read_relationship_matrix(&csv).unwrap(), m);
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.bin");
        fs::write(&p, b"DEPFMAT1\x02\0\0\0\0\0\0\0\x02\0\0\0\0\0\0\0").unwrap();
        assert!(read_relationship_matrix(&p).is_err());
    }

    #[test]
    fn block_ids_skip_blank_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.txt");
        fs::write(&p, "0\n0\n\n1\n2 \n").unwrap();
        assert_eq!(read_block_ids(&p).unwrap(), vec![0, 0, 1, 2]);
        fs::write(&p, "0\nx\n").unwrap();
        assert!(read_block_ids(&p).is_err());
    }
}
