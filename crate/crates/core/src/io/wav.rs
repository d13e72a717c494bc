//! PCM16 mono WAV audio.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

/// Reads a 16-bit PCM mono file; samples are divided by 32768.
pub fn load_wav(path: impl AsRef<Path>) -> Result<(Vec<f64>, u32)> {
    let reader = WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != SampleFormat::Int {
        return Err(Error::Format(format!(
            "wav: expected 16-bit PCM mono, found {} channel(s), {} bits, {:?}",
            spec.channels, spec.bits_per_sample, spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((samples, spec.sample_rate))
}

/// Writes 16-bit PCM mono; samples are scaled by 32768, rounded and clipped.
pub fn write_wav(path: impl AsRef<Path>, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut w = WavWriter::create(path, spec)?;
    for &x in samples {
        let v = (x * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        w.write_sample(v)?;
    }
    w.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_scale_sample() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("half.wav");
        write_wav(&p, &[0.5], 16_000).unwrap();
        let (x, sr) = load_wav(&p).unwrap();
        assert_eq!(x, vec![0.5]);
        assert_eq!(sr, 16_000);
    }

    #[test]
    fn round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rt.wav");
        let x: Vec<f64> = (-300..300).map(|k| (k * 97) as f64 / 32768.0).collect();
        write_wav(&p, &x, 8000).unwrap();
        let (y, _) = load_wav(&p).unwrap();
        assert_eq!(x.len(), y.len());
        assert!(x.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits()));
        let p2 = dir.path().join("rt2.wav");
        write_wav(&p2, &y, 8000).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn empty_data_chunk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.wav");
        write_wav(&p, &[], 16_000).unwrap();
        assert_eq!(load_wav(&p).unwrap().0, Vec::<f64>::new());
    }

    #[test]
    fn rejects_stereo_and_float() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stereo.wav");
        let spec = WavSpec { channels: 2, sample_rate: 8000, bits_per_sample: 16, sample_format: SampleFormat::Int };
        let mut w = WavWriter::create(&p, spec).unwrap();
        w.write_sample(1i16).unwrap();
        w.write_sample(1i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(load_wav(&p), Err(Error::Format(_))));

        let p = dir.path().join("float.wav");
        let spec = WavSpec { channels: 1, sample_rate: 8000, bits_per_sample: 32, sample_format: SampleFormat::Float };
        let mut w = WavWriter::create(&p, spec).unwrap();
        w.write_sample(0.5f32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(load_wav(&p), Err(Error::Format(_))));
    }
}
