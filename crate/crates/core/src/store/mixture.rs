use std::path::PathBuf;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One weighted data source of a mixture.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSource {
    pub shards: Vec<PathBuf>,
    pub weight: u64,
    /// Optional newline-delimited sample_id list restricting the source.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index_list: Option<PathBuf>,
}

/// Sources and their integer mixing weights.
///
/// Per-epoch draws follow the weights exactly. Without `epoch_size` the
/// epoch is the largest one in which no source has to repeat a sample;
/// with it, counts are apportioned by largest remainder and a source whose
/// count exceeds its size cycles through all of its samples.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub sources: Vec<MixtureSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch_size: Option<u64>,
}

/// Per-source sample counts for one epoch.
pub fn apportion(sizes: &[usize], weights: &[u64], epoch_size: Option<u64>) -> Result<Vec<u64>> {
    if sizes.len() != weights.len() || sizes.is_empty() {
        return Err(Error::Config(format!(
            "{} sources but {} weights",
            sizes.len(),
            weights.len()
        )));
    }
    let total: u64 = weights.iter().sum();
    if total == 0 {
        return Err(Error::Config("mixture needs at least one positive weight".into()));
    }
    for (s, (&n, &w)) in sizes.iter().zip(weights).enumerate() {
        if w > 0 && n == 0 {
            return Err(Error::Config(format!(
                "source {s} has weight {w} but no samples"
            )));
        }
    }
    match epoch_size {
        None => {
            let unit = sizes
                .iter()
                .zip(weights)
                .filter(|(_, &w)| w > 0)
                .map(|(&n, &w)| n as u64 / w)
                .min()
                .expect("a positive weight exists");
            if unit == 0 {
                return Err(Error::Config(
                    "a source has fewer samples than its weight; set an explicit epoch size"
                        .into(),
                ));
            }
            Ok(weights.iter().map(|&w| w * unit).collect())
        }
        Some(n) => {
            let n = n as u128;
            let total = total as u128;
            let mut counts: Vec<u64> = weights
                .iter()
                .map(|&w| (n * w as u128 / total) as u64)
                .collect();
            let assigned: u64 = counts.iter().sum();
            let mut rem: Vec<(u128, usize)> = weights
                .iter()
                .enumerate()
                .map(|(s, &w)| ((n * w as u128) % total, s))
                .collect();
            // largest remainder first, lower source index on ties
            rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            for &(_, s) in rem.iter().take((n as u64 - assigned) as usize) {
                counts[s] += 1;
            }
            Ok(counts)
        }
    }
}

/// A mixture with its per-source subsets fixed for the whole run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixturePlan {
    offsets: Vec<usize>,
    /// Local indices drawn from each source, possibly repeating when the
    /// source is oversampled. Sorted.
    subsets: Vec<Vec<usize>>,
}

impl MixturePlan {
    /// Draws the per-source subsets. `sizes[s]` is the number of samples
    /// source `s` contributes; sources occupy consecutive index ranges of
    /// the combined dataset in the given order.
    pub fn new<R: Rng>(
        sizes: &[usize],
        weights: &[u64],
        epoch_size: Option<u64>,
        rng: &mut R,
    ) -> Result<Self> {
        let counts = apportion(sizes, weights, epoch_size)?;
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut acc = 0;
        for &n in sizes {
            offsets.push(acc);
            acc += n;
        }
        let subsets = sizes
            .iter()
            .zip(&counts)
            .map(|(&size, &count)| {
                let count = count as usize;
                let mut picked: Vec<usize> = Vec::with_capacity(count);
                for _ in 0..count / size.max(1) {
                    picked.extend(0..size);
                }
                let extra = count - picked.len();
                if extra > 0 {
                    picked.extend(index::sample(rng, size, extra).into_iter());
                }
                picked.sort_unstable();
                picked
            })
            .collect();
        Ok(Self { offsets, subsets })
    }

    /// Rebuilds a plan from explicit per-source subsets.
    pub fn from_subsets(sizes: &[usize], subsets: Vec<Vec<usize>>) -> Result<Self> {
        if sizes.len() != subsets.len() {
            return Err(Error::Config(format!(
                "{} sources but {} subsets",
                sizes.len(),
                subsets.len()
            )));
        }
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut acc = 0;
        for (s, (&n, sub)) in sizes.iter().zip(&subsets).enumerate() {
            if let Some(&bad) = sub.iter().find(|&&i| i >= n) {
                return Err(Error::Range(format!(
                    "subset index {bad} for source {s} of size {n}"
                )));
            }
            offsets.push(acc);
            acc += n;
        }
        Ok(Self { offsets, subsets })
    }

    pub fn subsets(&self) -> &[Vec<usize>] {
        &self.subsets
    }

    pub fn counts(&self) -> Vec<usize> {
        self.subsets.iter().map(Vec::len).collect()
    }

    pub fn epoch_len(&self) -> usize {
        self.subsets.iter().map(Vec::len).sum()
    }

    /// Combined-dataset indices of one epoch, unshuffled.
    pub fn epoch_indices(&self) -> Vec<usize> {
        self.subsets
            .iter()
            .zip(&self.offsets)
            .flat_map(|(sub, &off)| sub.iter().map(move |&i| off + i))
            .collect()
    }

    /// One epoch's shuffled `(source, local index)` schedule.
    pub fn schedule<R: Rng>(&self, rng: &mut R) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = self
            .subsets
            .iter()
            .enumerate()
            .flat_map(|(s, sub)| sub.iter().map(move |&i| (s, i)))
            .collect();
        out.shuffle(rng);
        out
    }
}

/// Draws the run's fixed subsets and returns one epoch's schedule.
pub fn mixture_epoch<R: Rng>(
    sizes: &[usize],
    weights: &[u64],
    epoch_size: Option<u64>,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let plan = MixturePlan::new(sizes, weights, epoch_size, rng)?;
    Ok(plan.schedule(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn per_source(schedule: &[(usize, usize)], sources: usize) -> Vec<usize> {
        let mut c = vec![0; sources];
        for &(s, _) in schedule {
            c[s] += 1;
        }
        c
    }

    #[test]
    fn zero_weight_source_is_never_drawn() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sched = mixture_epoch(&[100, 50], &[1, 0], None, &mut rng).unwrap();
        assert_eq!(per_source(&sched, 2), vec![100, 0]);
    }

    #[test]
    fn default_epoch_has_no_repeats() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plan = MixturePlan::new(&[1000, 446], &[2, 1], None, &mut rng).unwrap();
        assert_eq!(plan.counts(), vec![892, 446]);
        let mut all = plan.epoch_indices();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 892 + 446);
    }

    #[test]
    fn explicit_epoch_oversamples_small_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let plan = MixturePlan::new(&[1000, 446], &[2, 1], Some(1500), &mut rng).unwrap();
        assert_eq!(plan.counts(), vec![1000, 500]);
        // every sample of the small source appears at least once
        let mut small = plan.subsets()[1].clone();
        small.dedup();
        assert_eq!(small.len(), 446);
    }

    #[test]
    fn largest_remainder_stays_within_one() {
        let counts = apportion(&[10_000; 3], &[1, 1, 1], Some(100)).unwrap();
        assert_eq!(counts, vec![34, 33, 33]);
    }

    #[test]
    fn empty_positive_source_is_a_config_error() {
        let err = apportion(&[0, 5], &[1, 1], None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(apportion(&[5, 5], &[0, 0], None).is_err());
    }

    #[test]
    fn subsets_are_fixed_across_epochs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let plan = MixturePlan::new(&[300, 40], &[1, 1], Some(60), &mut rng).unwrap();
        let a: Vec<_> = {
            let mut s = plan.schedule(&mut rng);
            s.sort_unstable();
            s
        };
        let b: Vec<_> = {
            let mut s = plan.schedule(&mut rng);
            s.sort_unstable();
            s
        };
        assert_eq!(a, b);
    }
}
