//! Zero-shot classification from class templates and image↔text
//! retrieval recall. Ties in every argmax and ranking go to the lower
//! index.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::AlignmentHead;
use crate::store::{Batch, Dataset, EmbeddingShard};
use crate::tensor::{normalize_rows, strict_deterministic, MatRef, Real, Tensor};

/// Rows embedded per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 1024;

/// Unit class vectors built from template embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct ZeroShotClassifier {
    pub class_names: Vec<String>,
    /// `[C, d_out]`, unit rows.
    pub class_vectors: Tensor<f32>,
}

impl ZeroShotClassifier {
    pub fn from_vectors(class_names: Vec<String>, vectors: Tensor<f32>) -> Result<Self> {
        if vectors.shape().len() != 2 || vectors.shape()[0] != class_names.len() {
            return Err(Error::Shape(format!(
                "{} class names for class vectors {:?}",
                class_names.len(),
                vectors.shape()
            )));
        }
        Ok(Self {
            class_names,
            class_vectors: normalize_rows(&vectors)?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// Embeds every record of `data` through the text head, in chunks.
pub fn embed_all_text(head: &AlignmentHead<f32>, data: &Dataset) -> Result<Tensor<f32>> {
    let picks: Vec<(usize, u32)> = (0..data.len()).map(|i| (i, 0)).collect();
    let parts = picks
        .chunks(EVAL_CHUNK)
        .map(|c| head.embed_text(&data.gather(c)?))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_leading(&parts)
}

/// Embeds image rows through the image side, in chunks.
pub fn embed_all_images(head: &AlignmentHead<f32>, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let n = images.shape()[0];
    let parts = (0..n)
        .step_by(EVAL_CHUNK)
        .map(|s| head.embed_image(&images.slice_leading(s, (s + EVAL_CHUNK).min(n))?))
        .collect::<Result<Vec<_>>>()?;
    if parts.is_empty() {
        return Ok(Tensor::zeros(vec![0, head.d_out()]));
    }
    Tensor::concat_leading(&parts)
}

/// Builds one class vector per class from a template shard whose
/// `sample_id` is the class index. With `class_names` the class count is
/// fixed by the names, otherwise by the largest id.
pub fn build_classifier(
    head: &AlignmentHead<f32>,
    templates: &EmbeddingShard,
    class_names: Option<Vec<String>>,
) -> Result<ZeroShotClassifier> {
    let max_id = templates.records.iter().map(|r| r.sample_id).max();
    let names = match class_names {
        Some(n) => n,
        None => (0..max_id.map_or(0, |m| m + 1))
            .map(|c| format!("class_{c}"))
            .collect(),
    };
    if let Some(m) = max_id {
        if m as usize >= names.len() {
            return Err(Error::Range(format!(
                "template for class {m} but only {} classes are named",
                names.len()
            )));
        }
    }
    let data = Dataset::from_shards(vec![templates.clone()])?;
    let emb = embed_all_text(head, &data)?;
    let d = emb.cols();
    let mut sums = vec![vec![0.0f64; d]; names.len()];
    let mut counts = vec![0usize; names.len()];
    for (i, r) in templates.records.iter().enumerate() {
        let c = r.sample_id as usize;
        counts[c] += 1;
        for (a, &v) in sums[c].iter_mut().zip(emb.row(i)) {
            *a += v as f64;
        }
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Precondition(format!(
            "class {c} ({}) has no templates",
            names[c]
        )));
    }
    let data = sums
        .iter()
        .zip(&counts)
        .flat_map(|(s, &n)| s.iter().map(move |v| (v / n as f64) as f32))
        .collect();
    ZeroShotClassifier::from_vectors(names, Tensor::new(vec![counts.len(), d], data)?)
}

/// Maps eval-set labels to classifier indices, for eval sets that use a
/// subset or relabelling of the classifier's classes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelMap {
    pub map: BTreeMap<u64, usize>,
}

impl LabelMap {
    /// Lines `eval_label→classifier_index`; `->` and whitespace also work
    /// as separators. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line
                .split(|c: char| c == '→' || c.is_whitespace())
                .flat_map(|p| p.split("->"))
                .filter(|p| !p.is_empty())
                .collect();
            let bad = || Error::Format(format!("label map line {}: {raw:?}", n + 1));
            let [from, to] = parts.as_slice() else {
                return Err(bad());
            };
            let from: u64 = from.parse().map_err(|_| bad())?;
            let to: usize = to.parse().map_err(|_| bad())?;
            if map.insert(from, to).is_some() {
                return Err(Error::Format(format!(
                    "label map line {}: label {from} mapped twice",
                    n + 1
                )));
            }
        }
        Ok(Self { map })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }
}

/// Labelled images for zero-shot evaluation.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub name: String,
    /// `[N, d_img]`
    pub images: Tensor<f32>,
    pub labels: Vec<u64>,
}

impl EvalSet {
    /// Uses the first image variant of every record; `sample_id` is the
    /// label.
    pub fn from_shard(name: impl Into<String>, shard: &EmbeddingShard) -> Result<Self> {
        let data = Dataset::from_shards(vec![shard.clone()])?;
        let Batch {
            images, sample_ids, ..
        } = data.all()?;
        Ok(Self {
            name: name.into(),
            images,
            labels: sample_ids,
        })
    }
}

fn argmax_lowest(scores: impl Iterator<Item = (usize, f32)>) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (i, s) in scores {
        if best.map_or(true, |(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// Predicted class per image embedding row, restricted to `allowed` when
/// given.
pub fn predict(
    classifier: &ZeroShotClassifier,
    image_emb: &Tensor<f32>,
    allowed: Option<&[usize]>,
) -> Result<Vec<usize>> {
    let c = classifier.num_classes();
    let d = classifier.class_vectors.cols();
    if image_emb.cols() != d {
        return Err(Error::Shape(format!(
            "image embeddings {:?} against class vectors {:?}",
            image_emb.shape(),
            classifier.class_vectors.shape()
        )));
    }
    let n = image_emb.rows();
    let mut scores = vec![0.0f32; n * c];
    f32::gemm(
        MatRef::new(image_emb.data(), n, d),
        MatRef::new(classifier.class_vectors.data(), c, d).t(),
        &mut scores,
        false,
    );
    Ok((0..n)
        .map(|i| {
            let row = &scores[i * c..(i + 1) * c];
            match allowed {
                Some(a) => argmax_lowest(a.iter().map(|&j| (j, row[j]))),
                None => argmax_lowest(row.iter().copied().enumerate()),
            }
            .unwrap_or(0)
        })
        .collect())
}

/// Fraction of images whose nearest class vector is their label.
pub fn zero_shot_accuracy(
    classifier: &ZeroShotClassifier,
    set: &EvalSet,
    head: &AlignmentHead<f32>,
    labels: Option<&LabelMap>,
) -> Result<f64> {
    let n = set.labels.len();
    if n == 0 {
        return Err(Error::Precondition(format!("eval set {} is empty", set.name)));
    }
    let targets: Vec<usize> = match labels {
        Some(m) => set
            .labels
            .iter()
            .map(|l| {
                m.map.get(l).copied().ok_or_else(|| {
                    Error::Format(format!("label {l} of {} missing from label map", set.name))
                })
            })
            .collect::<Result<_>>()?,
        None => set.labels.iter().map(|&l| l as usize).collect(),
    };
    let c = classifier.num_classes();
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::Range(format!(
            "label {bad} of {} outside the {c} classifier classes",
            set.name
        )));
    }
    let allowed: Option<Vec<usize>> = labels.map(|m| {
        let mut v: Vec<usize> = m.map.values().copied().collect();
        v.sort_unstable();
        v.dedup();
        v
    });
    let emb = embed_all_images(head, &set.images)?;
    let pred = predict(classifier, &emb, allowed.as_deref())?;
    let correct: u64 = pred
        .iter()
        .zip(&targets)
        .map(|(p, t)| u64::from(p == t))
        .sum();
    Ok(correct as f64 / n as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallDirection {
    #[default]
    ImageToText,
    TextToImage,
    /// Mean of both directions.
    Both,
}

/// Zero-based rank of each query's true counterpart (row `i` of `keys`)
/// by inner product, lower index first on ties.
pub fn true_pair_ranks(queries: &Tensor<f32>, keys: &Tensor<f32>) -> Result<Vec<usize>> {
    if queries.shape().len() != 2 || queries.shape() != keys.shape() {
        return Err(Error::Shape(format!(
            "queries {:?} against keys {:?}",
            queries.shape(),
            keys.shape()
        )));
    }
    let (n, d) = (queries.shape()[0], queries.shape()[1]);
    let block = |start: usize| -> Vec<usize> {
        let end = (start + EVAL_CHUNK).min(n);
        let mut sims = vec![0.0f32; (end - start) * n];
        f32::gemm(
            MatRef::new(&queries.data()[start * d..end * d], end - start, d),
            MatRef::new(keys.data(), n, d).t(),
            &mut sims,
            false,
        );
        (start..end)
            .map(|i| {
                let row = &sims[(i - start) * n..(i - start + 1) * n];
                let own = row[i];
                row.iter()
                    .enumerate()
                    .filter(|&(j, &s)| s > own || (s == own && j < i))
                    .count()
            })
            .collect()
    };
    let starts: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
    let ranks: Vec<Vec<usize>> = if strict_deterministic() {
        starts.into_iter().map(block).collect()
    } else {
        starts.into_par_iter().map(block).collect()
    };
    Ok(ranks.concat())
}

fn recall_from_ranks(ranks: &[usize], k: usize) -> f64 {
    let hits: u64 = ranks.iter().map(|&r| u64::from(r < k)).sum();
    hits as f64 / ranks.len() as f64
}

/// Recall@k for each `k` in `ks`.
pub fn recall_at_ks(
    img: &Tensor<f32>,
    txt: &Tensor<f32>,
    ks: &[usize],
    direction: RecallDirection,
) -> Result<Vec<f64>> {
    let n = img.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::Precondition("recall over an empty set".into()));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::Range(format!("k = {k} with {n} pairs")));
    }
    let i2t = || true_pair_ranks(img, txt);
    let t2i = || true_pair_ranks(txt, img);
    Ok(match direction {
        RecallDirection::ImageToText => {
            let r = i2t()?;
            ks.iter().map(|&k| recall_from_ranks(&r, k)).collect()
        }
        RecallDirection::TextToImage => {
            let r = t2i()?;
            ks.iter().map(|&k| recall_from_ranks(&r, k)).collect()
        }
        RecallDirection::Both => {
            let (a, b) = (i2t()?, t2i()?);
            ks.iter()
                .map(|&k| 0.5 * (recall_from_ranks(&a, k) + recall_from_ranks(&b, k)))
                .collect()
        }
    })
}

/// Image-to-text recall@k.
pub fn recall_at_k(img: &Tensor<f32>, txt: &Tensor<f32>, k: usize) -> Result<f64> {
    Ok(recall_at_ks(img, txt, &[k], RecallDirection::ImageToText)?[0])
}

/// Recall of a paired dataset under a head.
pub fn dataset_recall(
    head: &AlignmentHead<f32>,
    data: &Dataset,
    ks: &[usize],
    direction: RecallDirection,
) -> Result<Vec<f64>> {
    let txt = embed_all_text(head, data)?;
    let img = embed_all_images(head, &data.all()?.images)?;
    recall_at_ks(&img, &txt, ks, direction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::{MlpHead, TextHead};

    fn rows(r: &[Vec<f32>]) -> Tensor<f32> {
        Tensor::from_rows(r).unwrap()
    }

    fn identity_head(d: usize) -> AlignmentHead<f32> {
        AlignmentHead::from_parts(TextHead::Mlp(MlpHead::identity(d)), None, 0.0).unwrap()
    }

    #[test]
    fn recall_with_hand_ranks() {
        let img = rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.6, 0.8]]);
        // image 0: true text ranked first; image 1: second; image 2: third
        let txt = rows(&[vec![1.0, 0.0], vec![0.8, 0.6], vec![-0.6, -0.8]]);
        let ranks = true_pair_ranks(&img, &txt).unwrap();
        assert_eq!(ranks, vec![0, 1, 2]);
        let r = recall_at_ks(&img, &txt, &[1, 2, 3], RecallDirection::ImageToText).unwrap();
        assert!((r[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((r[1] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r[2], 1.0);
    }

    #[test]
    fn recall_identity_and_k_bounds() {
        let e = rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]]);
        assert_eq!(recall_at_k(&e, &e, 1).unwrap(), 1.0);
        assert!(matches!(recall_at_k(&e, &e, 4), Err(Error::Range(_))));
    }

    #[test]
    fn ties_go_to_lower_index() {
        let e = rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(true_pair_ranks(&e, &e).unwrap(), vec![0, 1]);
    }

    #[test]
    fn label_map_parsing() {
        let m = LabelMap::parse("0→5\n1 -> 7\n# comment\n\n2 9\n").unwrap();
        assert_eq!(m.map.get(&0), Some(&5));
        assert_eq!(m.map.get(&1), Some(&7));
        assert_eq!(m.map.get(&2), Some(&9));
        assert!(LabelMap::parse("0→1→2").is_err());
        assert!(LabelMap::parse("0→1\n0→2").is_err());
    }

    #[test]
    fn accuracy_with_orthonormal_and_swapped_classes() {
        let head = identity_head(2);
        let clf = ZeroShotClassifier::from_vectors(
            vec!["a".into(), "b".into()],
            rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]),
        )
        .unwrap();
        let set = EvalSet {
            name: "probe".into(),
            images: rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]),
            labels: vec![0, 1],
        };
        assert_eq!(zero_shot_accuracy(&clf, &set, &head, None).unwrap(), 1.0);
        let swapped = EvalSet {
            labels: vec![1, 0],
            ..set.clone()
        };
        assert_eq!(zero_shot_accuracy(&clf, &swapped, &head, None).unwrap(), 0.0);
        // restricting to class 1 forces every prediction to 1
        let only_b = LabelMap::parse("0→1\n1→1").unwrap();
        assert_eq!(
            zero_shot_accuracy(&clf, &set, &head, Some(&only_b)).unwrap(),
            1.0
        );
    }
}
