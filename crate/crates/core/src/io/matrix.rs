//! Binary matrix container.
//!
//! Layout, all little-endian: magic `ANMF`, `u32` version (1), `u64` rows,
//! `u64` cols, then `rows * cols` `f64` values in column-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MATRIX_MAGIC: &[u8; 4] = b"ANMF";
pub const MATRIX_VERSION: u32 = 1;

pub fn write_matrix_to(mut w: impl Write, a: &Array2<f64>) -> Result<()> {
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&MATRIX_VERSION.to_le_bytes())?;
    w.write_all(&(a.nrows() as u64).to_le_bytes())?;
    w.write_all(&(a.ncols() as u64).to_le_bytes())?;
    for col in a.columns() {
        for x in col {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_from(mut r: impl Read) -> Result<Array2<f64>> {
    let mut header = [0u8; 24];
    r.read_exact(&mut header)
        .map_err(|_| Error::Format("matrix file: truncated header".into()))?;
    if &header[0..4] != MATRIX_MAGIC {
        return Err(Error::Format("matrix file: bad magic".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != MATRIX_VERSION {
        return Err(Error::Format(format!("matrix file: unsupported version {version}")));
    }
    let rows = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(header[16..24].try_into().unwrap()) as usize;
    let len = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Format("matrix file: dimensions overflow".into()))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != len {
        return Err(Error::Format(format!(
            "matrix file: expected {len} payload bytes for {rows}x{cols}, found {}",
            payload.len()
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    // column-major payload is the transpose of a row-major cols x rows array
    let t = Array2::from_shape_vec((cols, rows), values)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(t.reversed_axes().as_standard_layout().into_owned())
}

pub fn write_matrix(path: impl AsRef<Path>, a: &Array2<f64>) -> Result<()> {
    write_matrix_to(BufWriter::new(File::create(path)?), a)
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    read_matrix_from(BufReader::new(File::open(path)?))
}
