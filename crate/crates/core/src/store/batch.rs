use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::format::{EmbeddingShard, SampleRecord, ShardDims};
use super::mixture::MixturePlan;

/// Records of one or more shards with identical dimensions, held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    dims: ShardDims,
    records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn from_shards(shards: Vec<EmbeddingShard>) -> Result<Self> {
        let mut iter = shards.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::Config("no shards given".into()))?;
        let dims = first.dims;
        let mut records = first.records;
        for (i, s) in iter.enumerate() {
            if s.dims != dims {
                return Err(Error::Shape(format!(
                    "shard {} has dims {:?}, shard 0 has {:?}",
                    i + 1,
                    s.dims,
                    dims
                )));
            }
            records.extend(s.records);
        }
        Ok(Self { dims, records })
    }

    pub fn dims(&self) -> ShardDims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    /// Gathers `(record index, image variant)` pairs into a batch.
    pub fn gather(&self, picks: &[(usize, u32)]) -> Result<Batch> {
        let (t, d) = (self.dims.max_seq as usize, self.dims.d_tok as usize);
        let di = self.dims.d_img as usize;
        let b = picks.len();
        let mut tokens = Vec::with_capacity(b * t * d);
        let mut mask = Vec::with_capacity(b * t);
        let mut images = Vec::with_capacity(b * di);
        let mut token_ids = Vec::with_capacity(b);
        let mut sample_ids = Vec::with_capacity(b);
        for &(idx, variant) in picks {
            let r = self
                .records
                .get(idx)
                .ok_or_else(|| Error::Range(format!("record {idx} of {}", self.len())))?;
            if variant >= self.dims.n_variants {
                return Err(Error::Range(format!(
                    "variant {variant} of {}",
                    self.dims.n_variants
                )));
            }
            tokens.extend_from_slice(r.token_encodings.data());
            mask.extend_from_slice(&r.mask);
            images.extend_from_slice(r.image_embeddings.row(variant as usize));
            token_ids.push(r.token_ids.clone());
            sample_ids.push(r.sample_id);
        }
        Ok(Batch {
            tokens: Tensor::new(vec![b, t, d], tokens)?,
            mask,
            images: Tensor::new(vec![b, di], images)?,
            token_ids,
            sample_ids,
            variants: picks.iter().map(|p| p.1).collect(),
            short: false,
        })
    }

    /// Every record, first image variant, in file order.
    pub fn all(&self) -> Result<Batch> {
        let picks: Vec<(usize, u32)> = (0..self.len()).map(|i| (i, 0)).collect();
        self.gather(&picks)
    }
}

/// Model-ready view of a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T: Real = f32> {
    /// `[B, max_seq, d_tok]`
    pub tokens: Tensor<T>,
    /// `B·max_seq` validity flags, row-major.
    pub mask: Vec<bool>,
    /// `[B, d_img]`
    pub images: Tensor<T>,
    pub token_ids: Vec<Vec<u32>>,
    pub sample_ids: Vec<u64>,
    pub variants: Vec<u32>,
    /// Set on the final partial batch of an epoch.
    pub short: bool,
}

impl<T: Real> Batch<T> {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn cast<U: Real>(&self) -> Batch<U> {
        Batch {
            tokens: self.tokens.cast(),
            mask: self.mask.clone(),
            images: self.images.cast(),
            token_ids: self.token_ids.clone(),
            sample_ids: self.sample_ids.clone(),
            variants: self.variants.clone(),
            short: self.short,
        }
    }

    /// Samples `start..end` as their own batch.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        let t = self.seq_len();
        Ok(Self {
            tokens: self.tokens.slice_leading(start, end)?,
            mask: self.mask[start * t..end * t].to_vec(),
            images: self.images.slice_leading(start, end)?,
            token_ids: self.token_ids[start..end].to_vec(),
            sample_ids: self.sample_ids[start..end].to_vec(),
            variants: self.variants[start..end].to_vec(),
            short: self.short,
        })
    }
}

/// What one epoch visits.
#[derive(Clone, Debug)]
pub enum EpochPlan {
    /// Every dataset record once.
    All(usize),
    /// A fixed-ratio mixture of sources.
    Mixture(MixturePlan),
}

impl EpochPlan {
    fn epoch_len(&self) -> usize {
        match self {
            EpochPlan::All(n) => *n,
            EpochPlan::Mixture(p) => p.epoch_len(),
        }
    }
}

/// Position of a [`BatchSampler`]; enough to resume it exactly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub epoch: u64,
    pub cursor: usize,
}

/// Draws batches without replacement within an epoch and reshuffles at
/// epoch boundaries. Each appearance of a sample picks one image variant
/// uniformly. The order of epoch `e` depends only on `(seed, e)`.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    plan: EpochPlan,
    n_variants: u32,
    batch_size: usize,
    drop_last: bool,
    seed: u64,
    state: SamplerState,
    order: Vec<(usize, u32)>,
}

impl BatchSampler {
    pub fn new(
        plan: EpochPlan,
        n_variants: u32,
        batch_size: usize,
        drop_last: bool,
        seed: u64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let len = plan.epoch_len();
        if len == 0 {
            return Err(Error::Config("dataset is empty".into()));
        }
        if drop_last && batch_size > len {
            return Err(Error::Config(format!(
                "batch size {batch_size} exceeds the {len} samples of an epoch"
            )));
        }
        let mut s = Self {
            plan,
            n_variants,
            batch_size,
            drop_last,
            seed,
            state: SamplerState::default(),
            order: Vec::new(),
        };
        s.order = s.epoch_order(0);
        Ok(s)
    }

    pub fn state(&self) -> SamplerState {
        self.state
    }

    pub fn restore(&mut self, state: SamplerState) -> Result<()> {
        self.order = self.epoch_order(state.epoch);
        if state.cursor > self.order.len() {
            return Err(Error::Range(format!(
                "sampler cursor {} beyond epoch of {}",
                state.cursor,
                self.order.len()
            )));
        }
        self.state = state;
        Ok(())
    }

    fn epoch_order(&self, epoch: u64) -> Vec<(usize, u32)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut indices = match &self.plan {
            EpochPlan::All(n) => (0..*n).collect::<Vec<_>>(),
            EpochPlan::Mixture(p) => p.epoch_indices(),
        };
        indices.shuffle(&mut rng);
        indices
            .into_iter()
            .map(|i| (i, rng.gen_range(0..self.n_variants)))
            .collect()
    }

    /// The next `(record, variant)` picks, advancing epochs as needed.
    pub fn next_picks(&mut self) -> (Vec<(usize, u32)>, bool) {
        let remaining = self.order.len() - self.state.cursor;
        if remaining == 0 || (self.drop_last && remaining < self.batch_size) {
            self.state = SamplerState {
                epoch: self.state.epoch + 1,
                cursor: 0,
            };
            self.order = self.epoch_order(self.state.epoch);
        }
        let start = self.state.cursor;
        let end = (start + self.batch_size).min(self.order.len());
        self.state.cursor = end;
        (self.order[start..end].to_vec(), end - start < self.batch_size)
    }

    pub fn next_batch(&mut self, data: &Dataset) -> Result<Batch> {
        let (picks, short) = self.next_picks();
        let mut batch = data.gather(&picks)?;
        batch.short = short;
        Ok(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sampler(n: usize, b: usize, drop_last: bool, variants: u32, seed: u64) -> BatchSampler {
        BatchSampler::new(EpochPlan::All(n), variants, b, drop_last, seed).unwrap()
    }

    #[test]
    fn full_epoch_batch_covers_everything_once() {
        let mut s = sampler(10, 10, true, 1, 3);
        let (picks, short) = s.next_picks();
        assert!(!short);
        let mut idx: Vec<usize> = picks.iter().map(|p| p.0).collect();
        idx.sort_unstable();
        assert_eq!(idx, (0..10).collect::<Vec<_>>());
        assert!(picks.iter().all(|p| p.1 == 0));
    }

    #[test]
    fn short_final_batch_is_flagged() {
        let mut s = sampler(10, 4, false, 1, 3);
        let sizes: Vec<(usize, bool)> = (0..4)
            .map(|_| {
                let (p, short) = s.next_picks();
                (p.len(), short)
            })
            .collect();
        assert_eq!(sizes, vec![(4, false), (4, false), (2, true), (4, false)]);
    }

    #[test]
    fn drop_last_skips_partial_batch() {
        let mut s = sampler(10, 4, true, 1, 3);
        for _ in 0..2 {
            s.next_picks();
        }
        s.next_picks();
        assert_eq!(s.state().epoch, 1);
        assert_eq!(s.state().cursor, 4);
    }

    #[test]
    fn same_seed_same_sequence_and_restore() {
        let mut a = sampler(37, 5, true, 3, 11);
        let mut b = sampler(37, 5, true, 3, 11);
        let mut seq_a = Vec::new();
        for _ in 0..20 {
            seq_a.push(a.next_picks());
            assert_eq!(seq_a.last().unwrap(), &b.next_picks());
        }
        let mut c = sampler(37, 5, true, 3, 11);
        for _ in 0..9 {
            c.next_picks();
        }
        let mut d = sampler(37, 5, true, 3, 11);
        d.restore(c.state()).unwrap();
        for _ in 0..10 {
            assert_eq!(c.next_picks(), d.next_picks());
        }
    }

    #[test]
    fn oversized_batch_rejected_when_dropping() {
        assert!(BatchSampler::new(EpochPlan::All(3), 1, 4, true, 0).is_err());
        assert!(BatchSampler::new(EpochPlan::All(3), 1, 4, false, 0).is_ok());
    }
}
