//! IDX image files (`0x00000803`, big-endian `u32` dimensions, `u8` pixels).

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::{DataKind, DataMatrix};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;

/// Parses IDX image bytes; every image becomes one column (pixels in file
/// order) scaled from `[0, 255]` to `[0, 1]`.
pub fn read_idx_images(bytes: &[u8]) -> Result<DataMatrix> {
    let be = |k: usize| -> Result<u32> {
        bytes
            .get(4 * k..4 * k + 4)
            .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::Format("idx: truncated header".into()))
    };
    let magic = be(0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format(format!("idx: bad magic {magic:#010x}")));
    }
    let count = be(1)? as usize;
    let rows = be(2)? as usize;
    let cols = be(3)? as usize;
    let pixels = rows * cols;
    let data = &bytes[16..];
    if data.len() < count * pixels {
        return Err(Error::Format(format!(
            "idx: expected {} pixel bytes, found {}",
            count * pixels,
            data.len()
        )));
    }
    let entries = Array2::from_shape_fn((pixels, count), |(p, i)| data[i * pixels + p] as f64 / 255.0);
    DataMatrix::new(entries, DataKind::Source)
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<DataMatrix> {
    read_idx_images(&fs::read(path)?)
}

/// Writes columns of `[0, 1]` values as `rows x cols` IDX images.
pub fn write_idx_images(path: impl AsRef<Path>, images: &Array2<f64>, rows: usize, cols: usize) -> Result<()> {
    if images.nrows() != rows * cols {
        return Err(Error::InvalidParam(format!(
            "{} pixels per column do not form {rows}x{cols} images",
            images.nrows()
        )));
    }
    let mut out = Vec::with_capacity(16 + images.len());
    for v in [IDX_IMAGE_MAGIC, images.ncols() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for col in images.columns() {
        out.extend(col.iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_images() -> Vec<u8> {
        let mut b = Vec::new();
        for v in [0x803u32, 2, 2, 2] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(&[0, 51, 102, 255]);
        b.extend_from_slice(&[0, 0, 0, 0]);
        b
    }

    #[test]
    fn parses_two_small_images() {
        let m = read_idx_images(&two_images()).unwrap();
        assert_eq!(m.entries.dim(), (4, 2));
        assert_eq!(m.entries.column(0).to_vec(), vec![0.0, 0.2, 0.4, 1.0]);
        assert!(m.entries.column(1).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut b = two_images();
        b[3] = 0x01;
        assert!(matches!(read_idx_images(&b), Err(Error::Format(_))));
        let b = two_images();
        assert!(matches!(read_idx_images(&b[..b.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(read_idx_images(&b[..10]), Err(Error::Format(_))));
    }
}
