//! Reader and writer for `.apes` embedding shards.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! header  magic "APES" | version u32 | d_img u32 | d_tok u32 | max_seq u32
//!         | n_variants u32 | record_count u64 | reserved u64      (40 bytes)
//! record  sample_id u64
//!         | token_encodings max_seq·d_tok f32
//!         | mask max_seq u8, zero-padded to a multiple of 8 bytes
//!         | image_embeddings n_variants·d_img f32
//!         | n_tokens u32 | token_ids n_tokens u32
//! ```
//!
//! The reserved word carries a CRC-64/XZ over the first 32 header bytes and
//! the whole payload. A reserved value of zero means "not checksummed" and
//! is accepted, so files produced by other writers that leave the field
//! blank still load.

use std::fs;
use std::io::Write;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SHARD_MAGIC: [u8; 4] = *b"APES";
pub const SHARD_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 40;

const CHECKSUM: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

/// Per-shard dimensions shared by every record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardDims {
    pub d_img: u32,
    pub d_tok: u32,
    pub max_seq: u32,
    pub n_variants: u32,
}

impl ShardDims {
    pub fn new(d_img: u32, d_tok: u32, max_seq: u32, n_variants: u32) -> Result<Self> {
        let dims = Self {
            d_img,
            d_tok,
            max_seq,
            n_variants,
        };
        dims.validate()?;
        Ok(dims)
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_img", self.d_img),
            ("d_tok", self.d_tok),
            ("max_seq", self.max_seq),
            ("n_variants", self.n_variants),
        ] {
            if v == 0 {
                return Err(Error::Format(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Mask length on disk, padded to 8-byte alignment.
    pub fn mask_bytes(&self) -> usize {
        (self.max_seq as usize).div_ceil(8) * 8
    }

    /// Size of a record holding `n_tokens` token ids.
    pub fn record_size(&self, n_tokens: usize) -> usize {
        8 + 4 * self.max_seq as usize * self.d_tok as usize
            + self.mask_bytes()
            + 4 * self.n_variants as usize * self.d_img as usize
            + 4
            + 4 * n_tokens
    }
}

/// One paired sample: frozen per-token text encodings and one or more
/// precomputed image embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub sample_id: u64,
    /// `[max_seq, d_tok]`; padded positions hold zeros.
    pub token_encodings: Tensor<f32>,
    pub mask: Vec<bool>,
    /// `[n_variants, d_img]`
    pub image_embeddings: Tensor<f32>,
    pub token_ids: Vec<u32>,
}

impl SampleRecord {
    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Checks the record against shard dimensions; the message does not
    /// include the record index, callers add it.
    fn check(&self, dims: &ShardDims) -> std::result::Result<(), String> {
        let (t, d) = (dims.max_seq as usize, dims.d_tok as usize);
        if self.token_encodings.shape() != [t, d] {
            return Err(format!(
                "token encodings {:?}, expected [{t}, {d}]",
                self.token_encodings.shape()
            ));
        }
        if self.mask.len() != t {
            return Err(format!("mask length {}, expected {t}", self.mask.len()));
        }
        let (v, di) = (dims.n_variants as usize, dims.d_img as usize);
        if self.image_embeddings.shape() != [v, di] {
            return Err(format!(
                "image embeddings {:?}, expected [{v}, {di}]",
                self.image_embeddings.shape()
            ));
        }
        let valid = self.valid_len();
        if valid == 0 {
            return Err("mask has no valid position".into());
        }
        if self.token_ids.len() != valid {
            return Err(format!(
                "{} token ids for {valid} valid positions",
                self.token_ids.len()
            ));
        }
        for (pos, &m) in self.mask.iter().enumerate() {
            if !m && self.token_encodings.row(pos).iter().any(|&x| x != 0.0) {
                return Err(format!("padded position {pos} holds a non-zero encoding"));
            }
        }
        if let Some(i) = self.token_encodings.first_non_finite() {
            return Err(format!("token encoding value {i} is not finite"));
        }
        if let Some(i) = self.image_embeddings.first_non_finite() {
            return Err(format!("image embedding value {i} is not finite"));
        }
        Ok(())
    }
}

/// An immutable batch of paired samples sharing one set of dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingShard {
    pub dims: ShardDims,
    pub records: Vec<SampleRecord>,
}

impl EmbeddingShard {
    pub fn new(dims: ShardDims, records: Vec<SampleRecord>) -> Result<Self> {
        dims.validate()?;
        for (i, r) in records.iter().enumerate() {
            r.check(&dims)
                .map_err(|m| Error::Shape(format!("record {i}: {m}")))?;
        }
        Ok(Self { dims, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode(&self.dims, &self.records)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        decode(bytes)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes =
            fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        decode(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Writes atomically: the bytes land in a sibling temp file which is
    /// then renamed over `path`.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }
}

/// Validates `records` against `dims` and writes a shard file.
pub fn write_shard(path: &Path, dims: ShardDims, records: Vec<SampleRecord>) -> Result<()> {
    EmbeddingShard::new(dims, records)?.write(path)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let ctx = |what: &str| format!("{what} {}", tmp.display());
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(ctx("creating"), e))?;
    f.write_all(bytes).map_err(|e| Error::io(ctx("writing"), e))?;
    f.sync_all().map_err(|e| Error::io(ctx("syncing"), e))?;
    drop(f);
    fs::rename(&tmp, path)
        .map_err(|e| Error::io(format!("renaming into {}", path.display()), e))
}

fn encode(dims: &ShardDims, records: &[SampleRecord]) -> Result<Vec<u8>> {
    let body: usize = records.iter().map(|r| dims.record_size(r.token_ids.len())).sum();
    let mut out = Vec::with_capacity(HEADER_LEN + body);
    out.extend_from_slice(&SHARD_MAGIC);
    for v in [
        SHARD_VERSION,
        dims.d_img,
        dims.d_tok,
        dims.max_seq,
        dims.n_variants,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    out.extend_from_slice(&0u64.to_le_bytes());

    for (i, r) in records.iter().enumerate() {
        r.check(dims)
            .map_err(|m| Error::Shape(format!("record {i}: {m}")))?;
        out.extend_from_slice(&r.sample_id.to_le_bytes());
        for v in r.token_encodings.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut mask = vec![0u8; dims.mask_bytes()];
        for (m, &b) in mask.iter_mut().zip(&r.mask) {
            *m = u8::from(b);
        }
        out.extend_from_slice(&mask);
        for v in r.image_embeddings.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(r.token_ids.len() as u32).to_le_bytes());
        for id in &r.token_ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
    }
    let sum = checksum(&out);
    out[32..40].copy_from_slice(&sum.to_le_bytes());
    Ok(out)
}

/// CRC over the header (minus the reserved word) and the payload.
pub fn checksum(file: &[u8]) -> u64 {
    let mut digest = CHECKSUM.digest();
    digest.update(&file[..32]);
    digest.update(&file[HEADER_LEN..]);
    digest.finalize()
}

/// Parsed header fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShardHeader {
    pub version: u32,
    pub dims: ShardDims,
    pub record_count: u64,
    pub reserved: u64,
}

pub fn read_header(bytes: &[u8]) -> Result<ShardHeader> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "file has {} bytes, shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if bytes[..4] != SHARD_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let version = u32_at(4);
    if version != SHARD_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dims = ShardDims {
        d_img: u32_at(8),
        d_tok: u32_at(12),
        max_seq: u32_at(16),
        n_variants: u32_at(20),
    };
    dims.validate()?;
    Ok(ShardHeader {
        version,
        dims,
        record_count: u64_at(24),
        reserved: u64_at(32),
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    record: u64,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!(
                "record {}: truncated while reading {what} ({} bytes needed at offset {}, file is {} bytes)",
                self.record,
                n,
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).unwrap_or(usize::MAX), what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

fn decode(bytes: &[u8]) -> Result<EmbeddingShard> {
    let header = read_header(bytes)?;
    let dims = header.dims;
    let min_record = dims.record_size(1) as u64;
    let payload = (bytes.len() - HEADER_LEN) as u64;
    if header.record_count.saturating_mul(min_record) > payload {
        return Err(Error::Format(format!(
            "header declares {} records of at least {min_record} bytes but the payload has {payload}",
            header.record_count
        )));
    }
    if header.reserved != 0 {
        let actual = checksum(bytes);
        if actual != header.reserved {
            return Err(Error::Format(format!(
                "checksum mismatch: header {:#018x}, computed {actual:#018x}",
                header.reserved
            )));
        }
    }

    let (t, d) = (dims.max_seq as usize, dims.d_tok as usize);
    let (v, di) = (dims.n_variants as usize, dims.d_img as usize);
    let mut cur = Cursor {
        bytes,
        pos: HEADER_LEN,
        record: 0,
    };
    let mut records = Vec::with_capacity(header.record_count as usize);
    for i in 0..header.record_count {
        cur.record = i;
        let sample_id = cur.u64("sample_id")?;
        let tokens = cur.f32s(t * d, "token encodings")?;
        let mask_raw = cur.take(dims.mask_bytes(), "mask")?;
        if let Some(p) = mask_raw[..t].iter().position(|&b| b > 1) {
            return Err(Error::Format(format!(
                "record {i}: mask byte {p} is {}, expected 0 or 1",
                mask_raw[p]
            )));
        }
        if mask_raw[t..].iter().any(|&b| b != 0) {
            return Err(Error::Format(format!("record {i}: non-zero mask padding")));
        }
        let mask: Vec<bool> = mask_raw[..t].iter().map(|&b| b == 1).collect();
        let images = cur.f32s(v * di, "image embeddings")?;
        let n_tokens = cur.u32("n_tokens")? as usize;
        if n_tokens > t {
            return Err(Error::Format(format!(
                "record {i}: {n_tokens} token ids exceed max_seq {t}"
            )));
        }
        let ids_raw = cur.take(4 * n_tokens, "token ids")?;
        let token_ids = ids_raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let record = SampleRecord {
            sample_id,
            token_encodings: Tensor::new(vec![t, d], tokens)?,
            mask,
            image_embeddings: Tensor::new(vec![v, di], images)?,
            token_ids,
        };
        record
            .check(&dims)
            .map_err(|m| Error::Format(format!("record {i}: {m}")))?;
        records.push(record);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after {} records",
            bytes.len() - cur.pos,
            header.record_count
        )));
    }
    Ok(EmbeddingShard { dims, records })
}
