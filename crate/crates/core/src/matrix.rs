//! Dense matrices and their on-disk container.
//!
//! A single matrix serializes as a 16-byte header (`n_rows`, `n_cols`, each a
//! little-endian `u64`) followed by `n_rows * n_cols` little-endian `f64`
//! values in row-major order. [`Archive`] bundles named matrices with a JSON
//! metadata record for model, adapter and detector checkpoints.

use std::io::{Read, Write};

use nalgebra::DMatrix;

use crate::error::{RcuError, Result};

/// Dense real matrix used throughout the crate.
pub type Matrix = DMatrix<f64>;

pub fn ensure_finite(m: &Matrix, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(RcuError::NonFinite(what))
    }
}

/// Returns the dimension of a square, finite matrix.
pub fn ensure_square(m: &Matrix, op: &'static str) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(RcuError::shape(op, format!("expected square matrix, got {}x{}", m.nrows(), m.ncols())));
    }
    ensure_finite(m, op)?;
    Ok(m.nrows())
}

pub fn ensure_same_shape(a: &Matrix, b: &Matrix, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(RcuError::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

#[inline]
pub fn frobenius_sq(m: &Matrix) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Row-major copy of the entries.
pub fn row_major(m: &Matrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn write_matrix<W: Write>(w: &mut W, m: &Matrix) -> Result<()> {
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for v in row_major(m) {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_matrix<R: Read>(r: &mut R) -> Result<Matrix> {
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    let len = rows
        .checked_mul(cols)
        .filter(|&n| n <= (1 << 28))
        .ok_or_else(|| RcuError::Format(format!("implausible matrix header {rows}x{cols}")))?;
    let mut data = Vec::with_capacity(len);
    let mut buf = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    Ok(Matrix::from_row_slice(rows, cols, &data))
}

pub fn matrix_to_bytes(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * m.len());
    write_matrix(&mut out, m).expect("writing to a Vec cannot fail");
    out
}

pub fn matrix_from_bytes(mut bytes: &[u8]) -> Result<Matrix> {
    let m = read_matrix(&mut bytes)?;
    if !bytes.is_empty() {
        return Err(RcuError::Format(format!("{} trailing bytes after matrix", bytes.len())));
    }
    Ok(m)
}

/// CSV export for debugging: one matrix row per line, full round-trip precision.
pub fn matrix_to_csv(m: &Matrix) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|v| format!("{v:?}")))?;
    }
    let bytes = w.into_inner().map_err(|e| RcuError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is ascii"))
}

pub fn matrix_from_csv(text: &str) -> Result<Matrix> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| f.trim().parse::<f64>().map_err(|e| RcuError::Format(format!("bad csv value {f:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(RcuError::Format("ragged csv rows".into()));
            }
        }
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Matrix::from_row_slice(rows.len(), cols, &flat))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

const ARCHIVE_MAGIC: &[u8; 4] = b"RCUA";
pub const ARCHIVE_VERSION: u32 = 1;

/// Named matrices plus a JSON metadata record.
///
/// Layout: magic `RCUA`, `u32` version, `u64` metadata length, metadata bytes,
/// `u64` entry count, then per entry a `u64` name length, the UTF-8 name and a
/// matrix container.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub version: u32,
    pub meta: serde_json::Value,
    pub entries: Vec<(String, Matrix)>,
}

impl Archive {
    pub fn new(meta: serde_json::Value) -> Self {
        Archive { version: ARCHIVE_VERSION, meta, entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, m: Matrix) {
        self.entries.push((name.into(), m));
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| RcuError::Format(format!("archive has no entry {name:?}")))
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(ARCHIVE_MAGIC)?;
        w.write_all(&self.version.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (name, m) in &self.entries {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            write_matrix(w, m)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != ARCHIVE_MAGIC {
            return Err(RcuError::Format("bad archive magic".into()));
        }
        let mut vbuf = [0u8; 4];
        r.read_exact(&mut vbuf)?;
        let version = u32::from_le_bytes(vbuf);
        if version != ARCHIVE_VERSION {
            return Err(RcuError::Format(format!("unsupported archive version {version}")));
        }
        let meta_len = read_u64(r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let meta = serde_json::from_slice(&meta)?;
        let count = read_u64(r)? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = read_u64(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| RcuError::Format(e.to_string()))?;
            entries.push((name, read_matrix(r)?));
        }
        Ok(Archive { version, meta, entries })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Archive::read(&mut bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_rows_then_cols_little_endian() {
        let m = Matrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let bytes = matrix_to_bytes(&m);
        assert_eq!(bytes.len(), 16 + 6 * 8);
        assert_eq!(&bytes[0..8], &2u64.to_le_bytes());
        assert_eq!(&bytes[8..16], &3u64.to_le_bytes());
        // row-major: second stored value is m[(0,1)]
        assert_eq!(&bytes[24..32], &2.0f64.to_le_bytes());
        assert_eq!(&bytes[40..48], &4.0f64.to_le_bytes());
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = matrix_to_bytes(&Matrix::identity(2, 2));
        bytes.push(0);
        assert!(matrix_from_bytes(&bytes).is_err());
    }

    #[test]
    fn square_check() {
        assert!(ensure_square(&Matrix::zeros(2, 3), "t").is_err());
        let mut m = Matrix::identity(2, 2);
        m[(0, 1)] = f64::NAN;
        assert!(matches!(ensure_square(&m, "t"), Err(RcuError::NonFinite(_))));
    }

    #[test]
    fn archive_roundtrip() {
        let mut a = Archive::new(serde_json::json!({"kind": "test", "n": 3}));
        a.push("w", Matrix::from_row_slice(2, 2, &[1.0, -2.5, 3.0, 1e-300]));
        a.push("b", Matrix::zeros(1, 4));
        let back = Archive::read(&mut a.to_bytes().as_slice()).unwrap();
        assert_eq!(back, a);
        assert!(back.get("missing").is_err());
    }

    proptest! {
        #[test]
        fn container_and_csv_roundtrip(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1e3..1e3));
            prop_assert_eq!(matrix_from_bytes(&matrix_to_bytes(&m)).unwrap(), m.clone());
            prop_assert_eq!(matrix_from_csv(&matrix_to_csv(&m).unwrap()).unwrap(), m);
        }
    }
}
