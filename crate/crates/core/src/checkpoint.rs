//! `.apec` checkpoint container: head architecture and parameters,
//! optional optimizer state, optional run state.
//!
//! ```text
//! magic "APEC" | version u32
//! config   text_kind u32 (0 = mlp, 1 = lookup)
//!          n u32 | n × u32        mlp widths, or [vocab, d_out]
//!          m u32 | m × u32        image MLP widths, m = 0 when disabled
//!          log_scale f32
//! params   every head tensor in declaration order, f32
//! optim    present u32; if 1: step u64 | beta1 f64 | beta2 f64 | eps f64
//!          | weight_decay f64 | first moments | second moments
//!          (one tensor per parameter including the log-scale, f32)
//! run      len u32 | len bytes of UTF-8 JSON
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::head::{AlignmentHead, HeadSpec, Linear, LookupHead, MlpHead, TextHead, TextHeadSpec};
use crate::optim::{AdamWConfig, AdamWState};
use crate::store::write_atomic;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"APEC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub head: AlignmentHead<f32>,
    pub optimizer: Option<AdamWState<f32>>,
    /// Opaque run state written by the trainer.
    pub run_state: String,
}

impl Checkpoint {
    pub fn new(head: AlignmentHead<f32>) -> Self {
        Self {
            head,
            optimizer: None,
            run_state: String::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let spec = self.head.spec();
        let (kind, dims) = match &spec.text {
            TextHeadSpec::Mlp { widths } => (0u32, widths.clone()),
            TextHeadSpec::Lookup { vocab, d_out } => (1u32, vec![*vocab, *d_out]),
        };
        put_u32(&mut out, kind);
        put_dims(&mut out, &dims)?;
        put_dims(&mut out, spec.image.as_deref().unwrap_or(&[]))?;
        out.extend_from_slice(&self.head.log_scale.data()[0].to_le_bytes());
        let params = self.head.params();
        for p in &params[..params.len() - 1] {
            put_f32s(&mut out, p.data());
        }
        match &self.optimizer {
            None => put_u32(&mut out, 0),
            Some(opt) => {
                if opt.m.len() != params.len() {
                    return Err(Error::Shape(format!(
                        "optimizer tracks {} tensors, head has {}",
                        opt.m.len(),
                        params.len()
                    )));
                }
                put_u32(&mut out, 1);
                out.extend_from_slice(&opt.step.to_le_bytes());
                for v in [
                    opt.config.beta1,
                    opt.config.beta2,
                    opt.config.eps,
                    opt.config.weight_decay,
                ] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                for (t, p) in opt.m.iter().chain(&opt.v).zip(params.iter().cycle()) {
                    if t.shape() != p.shape() {
                        return Err(Error::Shape(format!(
                            "optimizer moment {:?} for parameter {:?}",
                            t.shape(),
                            p.shape()
                        )));
                    }
                    put_f32s(&mut out, t.data());
                }
            }
        }
        let run = self.run_state.as_bytes();
        put_u32(&mut out, u32::try_from(run.len()).map_err(|_| {
            Error::Format("run state too large".into())
        })?);
        out.extend_from_slice(run);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let kind = r.u32()?;
        let text_dims = r.dims()?;
        let image_dims = r.dims()?;
        let log_scale = r.f32s(1)?[0];
        let text_spec = match (kind, text_dims.as_slice()) {
            (0, w) if !w.is_empty() => TextHeadSpec::Mlp { widths: w.to_vec() },
            (1, &[vocab, d_out]) => TextHeadSpec::Lookup { vocab, d_out },
            _ => {
                return Err(Error::Format(format!(
                    "bad text head block: kind {kind}, dims {text_dims:?}"
                )))
            }
        };
        let spec = HeadSpec {
            text: text_spec,
            image: (!image_dims.is_empty()).then_some(image_dims),
        };
        spec.validate(None)
            .map_err(|e| Error::Format(format!("checkpoint head: {e}")))?;

        let read_mlp = |r: &mut Reader, widths: &[usize]| -> Result<MlpHead<f32>> {
            let layers = widths
                .windows(2)
                .map(|w| {
                    Ok(Linear {
                        weight: Tensor::new(vec![w[0], w[1]], r.f32s(w[0] * w[1])?)?,
                        bias: Tensor::new(vec![w[1]], r.f32s(w[1])?)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            MlpHead::from_layers(layers)
        };
        let text = match &spec.text {
            TextHeadSpec::Mlp { widths } => TextHead::Mlp(read_mlp(&mut r, widths)?),
            TextHeadSpec::Lookup { vocab, d_out } => TextHead::Lookup(LookupHead {
                table: Tensor::new(vec![*vocab, *d_out], r.f32s(vocab * d_out)?)?,
            }),
        };
        let image = spec
            .image
            .as_deref()
            .map(|w| read_mlp(&mut r, w))
            .transpose()?;
        let head = AlignmentHead::from_parts(text, image, log_scale)?;

        let optimizer = match r.u32()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let mut cfg = [0.0f64; 4];
                for c in &mut cfg {
                    *c = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                }
                let config = AdamWConfig {
                    beta1: cfg[0],
                    beta2: cfg[1],
                    eps: cfg[2],
                    weight_decay: cfg[3],
                };
                let shapes: Vec<Vec<usize>> =
                    head.params().iter().map(|p| p.shape().to_vec()).collect();
                let read_set = |r: &mut Reader| -> Result<Vec<Tensor<f32>>> {
                    shapes
                        .iter()
                        .map(|s| Tensor::new(s.clone(), r.f32s(s.iter().product())?))
                        .collect()
                };
                let m = read_set(&mut r)?;
                let v = read_set(&mut r)?;
                Some(AdamWState { config, step, m, v })
            }
            other => return Err(Error::Format(format!("bad optimizer flag {other}"))),
        };
        let len = r.u32()? as usize;
        let run_state = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|e| Error::Format(format!("run state is not UTF-8: {e}")))?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes in checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            head,
            optimizer,
            run_state,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes =
            fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Atomic write (temp file + rename).
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_dims(out: &mut Vec<u8>, dims: &[usize]) -> Result<()> {
    put_u32(out, dims.len() as u32);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?;
        put_u32(out, d);
    }
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()) {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!(
                "checkpoint truncated at offset {} ({} more bytes needed)",
                self.pos, n
            ))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn dims(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()? as usize;
        if n > 64 {
            return Err(Error::Format(format!("{n} dimensions in a width list")));
        }
        (0..n).map(|_| Ok(self.u32()? as usize)).collect()
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).unwrap_or(usize::MAX))?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head(lookup: bool, image: bool) -> AlignmentHead<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = HeadSpec {
            text: if lookup {
                TextHeadSpec::Lookup { vocab: 7, d_out: 3 }
            } else {
                TextHeadSpec::Mlp {
                    widths: vec![4, 8, 3],
                }
            },
            image: image.then(|| vec![5, 3]),
        };
        AlignmentHead::init(&spec, 2.0, &mut rng).unwrap()
    }

    #[test]
    fn byte_exact_round_trip() {
        for (lookup, image) in [(false, false), (false, true), (true, false), (true, true)] {
            let h = head(lookup, image);
            let mut ck = Checkpoint::new(h.clone());
            let mut opt = AdamWState::new(AdamWConfig::with_weight_decay(0.1), &h.params()).unwrap();
            opt.step = 17;
            opt.m[0].data_mut()[0] = 0.25;
            ck.optimizer = Some(opt);
            ck.run_state = "{\"step\":17}".into();
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn truncation_rejected() {
        let bytes = Checkpoint::new(head(false, true)).to_bytes().unwrap();
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
