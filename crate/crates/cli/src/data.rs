//! Loading inputs and writing outputs in the supported formats.

use std::io::Write;
use std::path::Path;

use anmf_core::io::{load_idx_images, load_wav, read_matrix, write_matrix};
use anmf_core::model::{DataKind, DataMatrix};
use anyhow::{bail, Context, Result};
use ndarray::Array2;

pub fn is_wav(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

fn is_idx(path: &Path) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    name.ends_with(".idx") || name.ends_with("-ubyte") || name.ends_with(".idx3")
}

/// Reads a matrix file or IDX image file. Negative entries are an error
/// unless `clamp` is set, in which case they become zero.
pub fn load_data(path: &Path, kind: DataKind, clamp: bool) -> Result<DataMatrix> {
    if is_wav(path) {
        bail!(
            "{} is audio; convert it with `anmf features` to a spectrogram first",
            path.display()
        );
    }
    if is_idx(path) {
        let mut m = load_idx_images(path).with_context(|| format!("reading {}", path.display()))?;
        m.kind = kind;
        return Ok(m);
    }
    let entries = read_matrix(path).with_context(|| format!("reading {}", path.display()))?;
    let m = if clamp {
        DataMatrix::clamped(entries, kind)
    } else {
        DataMatrix::new(entries, kind)
    };
    m.with_context(|| format!("{} (use --clamp-negatives to clamp negative entries)", path.display()))
}

pub fn load_signal(path: &Path) -> Result<(Vec<f64>, u32)> {
    load_wav(path).with_context(|| format!("reading {}", path.display()))
}

/// Matrix whose columns are evaluation samples. A WAV file is one sample.
pub fn load_samples(path: &Path) -> Result<Array2<f64>> {
    if is_wav(path) {
        let (x, _) = load_signal(path)?;
        let n = x.len();
        return Ok(Array2::from_shape_vec((n, 1), x)?);
    }
    if is_idx(path) {
        return Ok(load_idx_images(path)?.entries);
    }
    read_matrix(path).with_context(|| format!("reading {}", path.display()))
}

pub fn save_matrix(path: &Path, a: &Array2<f64>) -> Result<()> {
    write_matrix(path, a).with_context(|| format!("writing {}", path.display()))
}

pub const CSV_HEADER: [&str; 4] = ["sample_index", "source", "metric", "value"];

/// Metrics CSV with the fixed header `sample_index,source,metric,value`.
pub struct MetricsCsv<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsCsv<W> {
    pub fn new(w: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(w);
        inner.write_record(CSV_HEADER)?;
        Ok(MetricsCsv { inner })
    }

    pub fn row(&mut self, sample: &str, source: &str, metric: &str, value: f64) -> Result<()> {
        self.inner.write_record([sample, source, metric, &value.to_string()])?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

