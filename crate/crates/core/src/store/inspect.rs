use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::norm;

use super::format::{checksum, read_header, EmbeddingShard, ShardDims};

/// Summary statistics of a scalar field.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FieldStats {
    pub count: u64,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl FieldStats {
    fn from_values(values: impl Iterator<Item = f64>) -> Self {
        let (mut n, mut sum, mut sq) = (0u64, 0.0f64, 0.0f64);
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            n += 1;
            sum += v;
            sq += v * v;
            min = min.min(v);
            max = max.max(v);
        }
        if n == 0 {
            return Self::default();
        }
        let mean = sum / n as f64;
        Self {
            count: n,
            mean,
            std: (sq / n as f64 - mean * mean).max(0.0).sqrt(),
            min,
            max,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ChecksumStatus {
    Verified,
    Absent,
    Mismatch,
}

/// What `inspect-shard` reports about one file.
#[derive(Clone, Debug, Serialize)]
pub struct ShardReport {
    pub path: String,
    pub file_bytes: u64,
    pub sha256: String,
    pub dims: Option<ShardDims>,
    pub record_count: Option<u64>,
    pub checksum: Option<ChecksumStatus>,
    pub errors: Vec<String>,
    pub token_encodings: Option<FieldStats>,
    pub valid_len: Option<FieldStats>,
    pub image_norms: Option<FieldStats>,
    pub token_ids: Option<FieldStats>,
    pub sample_ids: Option<FieldStats>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Reads and validates a shard file, collecting statistics. Validation
/// failures are reported in [`ShardReport::errors`]; only I/O failures are
/// returned as errors.
pub fn inspect_shard(path: &Path) -> Result<ShardReport> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(inspect_bytes(&path.display().to_string(), &bytes))
}

pub fn inspect_bytes(name: &str, bytes: &[u8]) -> ShardReport {
    let mut report = ShardReport {
        path: name.to_string(),
        file_bytes: bytes.len() as u64,
        sha256: sha256_hex(bytes),
        dims: None,
        record_count: None,
        checksum: None,
        errors: Vec::new(),
        token_encodings: None,
        valid_len: None,
        image_norms: None,
        token_ids: None,
        sample_ids: None,
    };
    match read_header(bytes) {
        Ok(h) => {
            report.dims = Some(h.dims);
            report.record_count = Some(h.record_count);
            report.checksum = Some(match h.reserved {
                0 => ChecksumStatus::Absent,
                stored if stored == checksum(bytes) => ChecksumStatus::Verified,
                _ => ChecksumStatus::Mismatch,
            });
        }
        Err(e) => {
            report.errors.push(e.to_string());
            return report;
        }
    }
    let shard = match EmbeddingShard::from_bytes(bytes) {
        Ok(s) => s,
        Err(e) => {
            report.errors.push(e.to_string());
            return report;
        }
    };
    let d = shard.dims.d_tok as usize;
    report.token_encodings = Some(FieldStats::from_values(shard.records.iter().flat_map(
        |r| {
            r.mask
                .iter()
                .enumerate()
                .filter(|(_, &m)| m)
                .flat_map(move |(p, _)| r.token_encodings.data()[p * d..(p + 1) * d].iter())
                .map(|&v| v as f64)
        },
    )));
    report.valid_len = Some(FieldStats::from_values(
        shard.records.iter().map(|r| r.valid_len() as f64),
    ));
    report.image_norms = Some(FieldStats::from_values(shard.records.iter().flat_map(|r| {
        (0..r.image_embeddings.rows()).map(move |v| norm(r.image_embeddings.row(v)))
    })));
    report.token_ids = Some(FieldStats::from_values(
        shard
            .records
            .iter()
            .flat_map(|r| r.token_ids.iter().map(|&i| i as f64)),
    ));
    report.sample_ids = Some(FieldStats::from_values(
        shard.records.iter().map(|r| r.sample_id as f64),
    ));
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::synthetic::{gen_synthetic, SyntheticSpec};

    #[test]
    fn clean_shard_has_no_errors() {
        let data = gen_synthetic(&SyntheticSpec::new(3, 4, 2, 10, 0)).unwrap();
        let bytes = data.train.to_bytes().unwrap();
        let r = inspect_bytes("mem", &bytes);
        assert!(r.errors.is_empty(), "{:?}", r.errors);
        assert_eq!(r.checksum, Some(ChecksumStatus::Verified));
        assert_eq!(r.record_count, Some(10));
        let norms = r.image_norms.unwrap();
        assert!((norms.mean - 1.0).abs() < 1e-6);
    }

    #[test]
    fn truncated_shard_reports_error() {
        let data = gen_synthetic(&SyntheticSpec::new(3, 4, 2, 10, 0)).unwrap();
        let bytes = data.train.to_bytes().unwrap();
        let r = inspect_bytes("mem", &bytes[..bytes.len() - 3]);
        assert!(!r.errors.is_empty());
        assert_eq!(r.checksum, Some(ChecksumStatus::Mismatch));
    }
}
