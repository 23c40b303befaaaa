//! Synthetic paired data with a known ground truth.
//!
//! A latent `z ~ N(0, I_k)` generates both sides: the image embedding is
//! `normalize(A·z + σ·ε)` and the encoding at token position `t` is
//! `B_t·z + σ·ε`, optionally followed by a fixed random map
//! `x ↦ tanh(R·x + c)`. Token ids quantize a per-position projection of
//! `z`, so a lookup table sees a coarsened version of the same signal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::format::{EmbeddingShard, SampleRecord, ShardDims};

/// Parameters of [`gen_synthetic`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub latent: usize,
    pub d_img: usize,
    pub d_tok: usize,
    pub seq_len: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub noise: f64,
    pub nonlinear: bool,
    pub seed: u64,
    #[serde(default = "one")]
    pub n_variants: usize,
    /// Shortest valid sequence; lengths are uniform in `min_len..=seq_len`.
    /// Defaults to `seq_len` (no padding).
    #[serde(default)]
    pub min_len: Option<usize>,
    /// Quantization levels per position for token ids.
    #[serde(default = "default_bins")]
    pub bins: u32,
}

fn one() -> usize {
    1
}

fn default_bins() -> u32 {
    16
}

impl SyntheticSpec {
    pub fn new(latent: usize, d: usize, seq_len: usize, n_train: usize, n_test: usize) -> Self {
        Self {
            latent,
            d_img: d,
            d_tok: d,
            seq_len,
            n_train,
            n_test,
            noise: 0.0,
            nonlinear: false,
            seed: 0,
            n_variants: 1,
            min_len: None,
            bins: default_bins(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.seq_len * self.bins as usize
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("latent", self.latent),
            ("d_img", self.d_img),
            ("d_tok", self.d_tok),
            ("seq_len", self.seq_len),
            ("n_variants", self.n_variants),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise {} must be >= 0", self.noise)));
        }
        if self.bins == 0 {
            return Err(Error::Config("bins must be at least 1".into()));
        }
        let min_len = self.min_len.unwrap_or(self.seq_len);
        if min_len == 0 || min_len > self.seq_len {
            return Err(Error::Config(format!(
                "min_len {min_len} outside 1..={}",
                self.seq_len
            )));
        }
        Ok(())
    }

    fn dims(&self) -> ShardDims {
        ShardDims {
            d_img: self.d_img as u32,
            d_tok: self.d_tok as u32,
            max_seq: self.seq_len as u32,
            n_variants: self.n_variants as u32,
        }
    }
}

/// Train and held-out shards from one synthetic world.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub train: EmbeddingShard,
    pub test: EmbeddingShard,
}

/// Class templates and a labelled image set for zero-shot evaluation,
/// drawn from the same world as [`gen_synthetic`].
#[derive(Clone, Debug)]
pub struct SyntheticZeroShot {
    /// One record per template, class-major; `sample_id` is the class.
    pub templates: EmbeddingShard,
    /// `sample_id` is the label.
    pub eval: EmbeddingShard,
    pub class_names: Vec<String>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// `rows × cols` matrix applied to `x`.
fn apply(m: &[f64], rows: usize, x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|r| m[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// The fixed random maps of one seed.
struct World {
    spec: SyntheticSpec,
    image_map: Vec<f64>,
    token_maps: Vec<Vec<f64>>,
    probes: Vec<Vec<f64>>,
    mix: Vec<f64>,
    offset: Vec<f64>,
}

impl World {
    fn new(spec: &SyntheticSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(0);
        let k = spec.latent;
        let std = 1.0 / (k as f64).sqrt();
        let image_map = gaussian(&mut rng, spec.d_img * k, std);
        let token_maps = (0..spec.seq_len)
            .map(|_| gaussian(&mut rng, spec.d_tok * k, std))
            .collect();
        let probes = (0..spec.seq_len)
            .map(|_| {
                let p = gaussian(&mut rng, k, 1.0);
                let n = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                p.into_iter().map(|v| v / n).collect()
            })
            .collect();
        let mix = gaussian(&mut rng, spec.d_tok * spec.d_tok, 1.0 / (spec.d_tok as f64).sqrt());
        let offset = (0..spec.d_tok).map(|_| rng.gen_range(-0.5..0.5)).collect();
        Self {
            spec: spec.clone(),
            image_map,
            token_maps,
            probes,
            mix,
            offset,
        }
    }

    fn quantize(&self, v: f64) -> u32 {
        // equal-width bins over [-2.5, 2.5]; the tails fold into the ends
        let bins = self.spec.bins;
        let x = ((v + 2.5) / 5.0 * bins as f64).floor();
        x.clamp(0.0, (bins - 1) as f64) as u32
    }

    fn image(&self, z: &[f64], rng: &mut ChaCha8Rng) -> Vec<f32> {
        let s = &self.spec;
        let mut v = apply(&self.image_map, s.d_img, z);
        for (x, e) in v.iter_mut().zip(gaussian(rng, s.d_img, s.noise)) {
            *x += e;
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        v.into_iter().map(|x| (x / n) as f32).collect()
    }

    fn record(&self, id: u64, z: &[f64], rng: &mut ChaCha8Rng) -> SampleRecord {
        let s = &self.spec;
        let min_len = s.min_len.unwrap_or(s.seq_len);
        let len = if min_len == s.seq_len {
            s.seq_len
        } else {
            rng.gen_range(min_len..=s.seq_len)
        };
        let mut tokens = vec![0.0f32; s.seq_len * s.d_tok];
        let mut ids = Vec::with_capacity(len);
        for t in 0..len {
            let mut enc = apply(&self.token_maps[t], s.d_tok, z);
            for (x, e) in enc.iter_mut().zip(gaussian(rng, s.d_tok, s.noise)) {
                *x += e;
            }
            if s.nonlinear {
                enc = apply(&self.mix, s.d_tok, &enc)
                    .into_iter()
                    .zip(&self.offset)
                    .map(|(x, c)| (x + c).tanh())
                    .collect();
            }
            for (dst, v) in tokens[t * s.d_tok..(t + 1) * s.d_tok].iter_mut().zip(enc) {
                *dst = v as f32;
            }
            let proj: f64 = self.probes[t].iter().zip(z).map(|(a, b)| a * b).sum();
            ids.push(t as u32 * s.bins + self.quantize(proj));
        }
        let images: Vec<f32> = (0..s.n_variants).flat_map(|_| self.image(z, rng)).collect();
        SampleRecord {
            sample_id: id,
            token_encodings: Tensor::new(vec![s.seq_len, s.d_tok], tokens).expect("sized"),
            mask: (0..s.seq_len).map(|t| t < len).collect(),
            image_embeddings: Tensor::new(vec![s.n_variants, s.d_img], images).expect("sized"),
            token_ids: ids,
        }
    }

    fn shard(&self, stream: u64, n: usize, first_id: u64) -> Result<EmbeddingShard> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(stream);
        let records = (0..n)
            .map(|i| {
                let z = gaussian(&mut rng, self.spec.latent, 1.0);
                self.record(first_id + i as u64, &z, &mut rng)
            })
            .collect();
        EmbeddingShard::new(self.spec.dims(), records)
    }
}

/// Generates train and held-out shards. Deterministic in `spec`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let world = World::new(spec);
    Ok(SyntheticData {
        train: world.shard(1, spec.n_train, 0)?,
        test: world.shard(2, spec.n_test, spec.n_train as u64)?,
    })
}

/// Generates a zero-shot task in the world of `spec`: `classes` latent
/// prototypes, `templates` noisy text renderings per class and
/// `per_class` labelled images per class. `spread` scales the within-class
/// latent noise.
pub fn gen_zero_shot(
    spec: &SyntheticSpec,
    classes: usize,
    templates: usize,
    per_class: usize,
    spread: f64,
) -> Result<SyntheticZeroShot> {
    spec.validate()?;
    if classes == 0 || templates == 0 {
        return Err(Error::Config("need at least one class and one template".into()));
    }
    let world = World::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(3);
    let k = spec.latent;
    let prototypes: Vec<Vec<f64>> = (0..classes).map(|_| gaussian(&mut rng, k, 1.0)).collect();
    let jitter = |rng: &mut ChaCha8Rng, p: &[f64]| -> Vec<f64> {
        p.iter()
            .zip(gaussian(rng, k, spread))
            .map(|(a, b)| a + b)
            .collect()
    };
    let mut template_records = Vec::with_capacity(classes * templates);
    for (c, p) in prototypes.iter().enumerate() {
        for _ in 0..templates {
            let z = jitter(&mut rng, p);
            template_records.push(world.record(c as u64, &z, &mut rng));
        }
    }
    let mut eval_records = Vec::with_capacity(classes * per_class);
    for (c, p) in prototypes.iter().enumerate() {
        for _ in 0..per_class {
            let z = jitter(&mut rng, p);
            eval_records.push(world.record(c as u64, &z, &mut rng));
        }
    }
    Ok(SyntheticZeroShot {
        templates: EmbeddingShard::new(spec.dims(), template_records)?,
        eval: EmbeddingShard::new(spec.dims(), eval_records)?,
        class_names: (0..classes).map(|c| format!("class_{c}")).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let mut spec = SyntheticSpec::new(4, 8, 3, 20, 5);
        spec.seed = 42;
        spec.nonlinear = true;
        spec.noise = 0.1;
        let a = gen_synthetic(&spec).unwrap();
        let b = gen_synthetic(&spec).unwrap();
        assert_eq!(a.train.to_bytes().unwrap(), b.train.to_bytes().unwrap());
        assert_eq!(a.test.to_bytes().unwrap(), b.test.to_bytes().unwrap());
        spec.seed = 43;
        let c = gen_synthetic(&spec).unwrap();
        assert_ne!(a.train.to_bytes().unwrap(), c.train.to_bytes().unwrap());
    }

    #[test]
    fn images_are_unit_and_ids_in_vocab() {
        let mut spec = SyntheticSpec::new(4, 6, 5, 30, 0);
        spec.min_len = Some(2);
        spec.n_variants = 3;
        spec.noise = 0.2;
        let data = gen_synthetic(&spec).unwrap();
        for r in &data.train.records {
            for v in 0..3 {
                let n: f32 = r.image_embeddings.row(v).iter().map(|x| x * x).sum();
                assert!((n - 1.0).abs() < 1e-5);
            }
            assert!(r.valid_len() >= 2);
            assert!(r.token_ids.iter().all(|&id| (id as usize) < spec.vocab_size()));
        }
        assert!(data.train.records.iter().any(|r| r.valid_len() < 5));
    }

    #[test]
    fn rejects_bad_config() {
        let mut spec = SyntheticSpec::new(0, 4, 2, 1, 1);
        assert!(gen_synthetic(&spec).is_err());
        spec.latent = 2;
        spec.noise = -1.0;
        assert!(gen_synthetic(&spec).is_err());
    }

    #[test]
    fn zero_shot_templates_are_class_major() {
        let spec = SyntheticSpec::new(4, 6, 3, 0, 0);
        let zs = gen_zero_shot(&spec, 3, 2, 4, 0.2).unwrap();
        let ids: Vec<u64> = zs.templates.records.iter().map(|r| r.sample_id).collect();
        assert_eq!(ids, vec![0, 0, 1, 1, 2, 2]);
        assert_eq!(zs.eval.len(), 12);
    }
}
