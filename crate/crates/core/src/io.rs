//! File formats: WAV audio and the binary feature matrix dump.
//!
//! Feature dumps are one matrix per file, little-endian throughout:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "ELVM"
//! 4       2     format version (u16, currently 1)
//! 6       1     dtype code: 0 = f32, 1 = f64
//! 7       1     reserved (0)
//! 8       8     rows (u64)
//! 16      8     cols (u64)
//! 24      -     row-major sample data
//! ```

use crate::mat::Mat;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MATRIX_MAGIC: &[u8; 4] = b"ELVM";
const MATRIX_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("wav error on {path}: {source}")]
    Wav {
        path: String,
        #[source]
        source: hound::Error,
    },
    #[error("bad matrix file {path}: {reason}")]
    BadMatrix { path: String, reason: String },
    #[error("unsupported wav format in {path}: expected mono 16 kHz PCM")]
    UnsupportedWav { path: String },
}

fn io_err(path: &Path, source: std::io::Error) -> IoError {
    IoError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Dtype selector for matrix dumps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

pub fn write_matrix(path: &Path, mat: &Mat, dtype: Dtype) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
    }
    let mut buf = Vec::with_capacity(24 + mat.data.len() * 8);
    buf.extend_from_slice(MATRIX_MAGIC);
    buf.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
    buf.push(match dtype {
        Dtype::F32 => 0,
        Dtype::F64 => 1,
    });
    buf.push(0);
    buf.extend_from_slice(&(mat.rows as u64).to_le_bytes());
    buf.extend_from_slice(&(mat.cols as u64).to_le_bytes());
    match dtype {
        Dtype::F32 => {
            for &v in &mat.data {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in &mat.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&buf).map_err(|e| io_err(path, e))
}

pub fn read_matrix(path: &Path) -> Result<Mat, IoError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| io_err(path, e))?;
    let bad = |reason: &str| IoError::BadMatrix {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 24 || &bytes[0..4] != MATRIX_MAGIC {
        return Err(bad("missing ELVM header"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != MATRIX_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let dtype = match bytes[6] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        other => return Err(bad(&format!("unknown dtype code {other}"))),
    };
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let elem = if dtype == Dtype::F32 { 4 } else { 8 };
    let expected = 24 + rows * cols * elem;
    if bytes.len() != expected {
        return Err(bad(&format!(
            "payload length {} does not match {rows}x{cols} {dtype:?}",
            bytes.len() - 24
        )));
    }
    let mut data = Vec::with_capacity(rows * cols);
    match dtype {
        Dtype::F32 => {
            for chunk in bytes[24..].chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
        }
        Dtype::F64 => {
            for chunk in bytes[24..].chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
    }
    Ok(Mat::from_vec(rows, cols, data))
}

/// Writes mono 16-bit PCM at the given rate. Samples are clamped to [-1, 1].
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| IoError::Wav {
        path: path.display().to_string(),
        source: e,
    })?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(|e| IoError::Wav {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    writer.finalize().map_err(|e| IoError::Wav {
        path: path.display().to_string(),
        source: e,
    })
}

/// Reads a mono 16 kHz PCM wav into normalized f64 samples.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32), IoError> {
    let mut reader = hound::WavReader::open(path).map_err(|e| IoError::Wav {
        path: path.display().to_string(),
        source: e,
    })?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.sample_format != hound::SampleFormat::Int {
        return Err(IoError::UnsupportedWav {
            path: path.display().to_string(),
        });
    }
    let denom = (1i64 << (spec.bits_per_sample - 1)) as f64;
    let samples: Result<Vec<f64>, hound::Error> = reader
        .samples::<i32>()
        .map(|s| s.map(|v| v as f64 / denom))
        .collect();
    let samples = samples.map_err(|e| IoError::Wav {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok((samples, spec.sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_round_trip_f64_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.elvm");
        let mat = Mat::from_vec(3, 2, vec![1.5, -2.25, 0.0, 1e-12, 3.5e8, -0.125]);
        write_matrix(&path, &mat, Dtype::F64).unwrap();
        let back = read_matrix(&path).unwrap();
        assert_eq!(mat, back);
    }

    #[test]
    fn matrix_f32_round_trip_within_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m32.elvm");
        let mat = Mat::from_vec(2, 2, vec![0.1, -0.2, 0.3, 0.4]);
        write_matrix(&path, &mat, Dtype::F32).unwrap();
        let back = read_matrix(&path).unwrap();
        for (a, b) in mat.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_corrupt_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.elvm");
        std::fs::write(&path, b"NOPEnope").unwrap();
        assert!(matches!(
            read_matrix(&path),
            Err(IoError::BadMatrix { .. })
        ));
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples: Vec<f64> = (0..1600)
            .map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16000.0).sin() * 0.5)
            .collect();
        write_wav(&path, &samples, 16000).unwrap();
        let (back, rate) = read_wav(&path).unwrap();
        assert_eq!(rate, 16000);
        assert_eq!(back.len(), samples.len());
        for (a, b) in samples.iter().zip(&back) {
            assert!((a - b).abs() < 1.0 / 32000.0);
        }
    }
}
