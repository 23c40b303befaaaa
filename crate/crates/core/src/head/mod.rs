//! Trainable alignment functions placed on top of frozen encodings.
//!
//! The text side is either a weight-tied MLP applied to every token
//! encoding followed by masked mean pooling, or a token lookup table
//! averaged over the sequence. The image side is the identity unless an
//! image MLP is configured. Both sides end in L2 normalization, and the
//! head also owns the learnable log-scale of the contrastive logits.

mod layers;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::Batch;
use crate::tensor::{Real, Tape, Tensor, Var};

pub use layers::{Linear, LookupHead, MlpHead, MAX_LAYERS};

/// `ln(1 / 0.07)`
pub const DEFAULT_LOG_SCALE: f64 = 2.659_260_036_932_778_4;
/// Upper clamp of the logit scale.
pub const MAX_SCALE: f64 = 100.0;

/// Architecture of the text side.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TextHeadSpec {
    /// Layer widths `(d_tok, h, …, h, d_out)`.
    Mlp { widths: Vec<usize> },
    Lookup { vocab: usize, d_out: usize },
}

impl TextHeadSpec {
    pub fn d_out(&self) -> usize {
        match self {
            TextHeadSpec::Mlp { widths } => *widths.last().expect("validated widths"),
            TextHeadSpec::Lookup { d_out, .. } => *d_out,
        }
    }
}

/// Full head architecture.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub text: TextHeadSpec,
    /// Widths `(d_img, …, d_out)` of an optional image MLP.
    #[serde(default)]
    pub image: Option<Vec<usize>>,
}

impl HeadSpec {
    pub fn d_out(&self) -> usize {
        self.text.d_out()
    }

    /// Checks internal consistency and, given the image embedding width,
    /// that both sides land in the same space.
    pub fn validate(&self, d_img: Option<usize>) -> Result<()> {
        if let TextHeadSpec::Mlp { widths } = &self.text {
            if widths.is_empty() || widths.len() - 1 > MAX_LAYERS || widths.contains(&0) {
                return Err(Error::Config(format!("invalid text MLP widths {widths:?}")));
            }
        }
        let d_out = self.d_out();
        match &self.image {
            Some(w) => {
                if w.len() < 2 || w.len() - 1 > MAX_LAYERS || w.contains(&0) {
                    return Err(Error::Config(format!("invalid image MLP widths {w:?}")));
                }
                if w[w.len() - 1] != d_out {
                    return Err(Error::Config(format!(
                        "image MLP ends at {} but the text side outputs {d_out}",
                        w[w.len() - 1]
                    )));
                }
                if let Some(d) = d_img {
                    if w[0] != d {
                        return Err(Error::Config(format!(
                            "image MLP takes {} but images have {d} dims",
                            w[0]
                        )));
                    }
                }
            }
            None => {
                if let Some(d) = d_img {
                    if d != d_out {
                        return Err(Error::Config(format!(
                            "image head disabled but image dim {d} differs from output dim {d_out}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TextHead<T: Real = f32> {
    Mlp(MlpHead<T>),
    Lookup(LookupHead<T>),
}

/// Trainable parameters: text head, optional image MLP and logit
/// log-scale.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentHead<T: Real = f32> {
    pub text: TextHead<T>,
    pub image: Option<MlpHead<T>>,
    /// Shape `[1]`.
    pub log_scale: Tensor<T>,
}

/// Tape handles for every parameter of an [`AlignmentHead`].
pub struct HeadVars {
    pub text: Vec<Var>,
    pub image: Vec<Var>,
    pub log_scale: Var,
}

impl HeadVars {
    /// All handles in declaration order.
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.text.clone();
        v.extend_from_slice(&self.image);
        v.push(self.log_scale);
        v
    }
}

impl<T: Real> AlignmentHead<T> {
    pub fn init<R: Rng>(spec: &HeadSpec, log_scale: f64, rng: &mut R) -> Result<Self> {
        spec.validate(None)?;
        let text = match &spec.text {
            TextHeadSpec::Mlp { widths } => TextHead::Mlp(MlpHead::init(widths, rng)?),
            TextHeadSpec::Lookup { vocab, d_out } => {
                TextHead::Lookup(LookupHead::init(*vocab, *d_out, rng)?)
            }
        };
        let image = spec
            .image
            .as_ref()
            .map(|w| MlpHead::init(w, rng))
            .transpose()?;
        let mut head = Self {
            text,
            image,
            log_scale: Tensor::scalar(T::lit(log_scale)),
        };
        head.clamp_log_scale();
        Ok(head)
    }

    pub fn from_parts(text: TextHead<T>, image: Option<MlpHead<T>>, log_scale: T) -> Result<Self> {
        let head = Self {
            text,
            image,
            log_scale: Tensor::scalar(log_scale),
        };
        head.spec().validate(None)?;
        Ok(head)
    }

    pub fn spec(&self) -> HeadSpec {
        HeadSpec {
            text: match &self.text {
                TextHead::Mlp(m) => TextHeadSpec::Mlp { widths: m.widths() },
                TextHead::Lookup(l) => TextHeadSpec::Lookup {
                    vocab: l.vocab(),
                    d_out: l.d_out(),
                },
            },
            image: self.image.as_ref().map(MlpHead::widths),
        }
    }

    pub fn d_out(&self) -> usize {
        match &self.text {
            TextHead::Mlp(m) => m.d_out().unwrap_or_else(|| m.widths()[0]),
            TextHead::Lookup(l) => l.d_out(),
        }
    }

    /// `exp(log_scale)`.
    pub fn scale(&self) -> f64 {
        self.log_scale.data()[0].as_f64().exp()
    }

    /// Keeps `exp(log_scale) <= 100`.
    pub fn clamp_log_scale(&mut self) {
        let max = T::lit(MAX_SCALE.ln());
        let v = &mut self.log_scale.data_mut()[0];
        if *v > max {
            *v = max;
        }
    }

    /// Parameters in declaration order: text, image, log-scale.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = match &self.text {
            TextHead::Mlp(m) => m.params().collect(),
            TextHead::Lookup(l) => vec![&l.table],
        };
        if let Some(img) = &self.image {
            out.extend(img.params());
        }
        out.push(&self.log_scale);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = match &mut self.text {
            TextHead::Mlp(m) => m.params_mut().collect(),
            TextHead::Lookup(l) => vec![&mut l.table],
        };
        if let Some(img) = &mut self.image {
            out.extend(img.params_mut());
        }
        out.push(&mut self.log_scale);
        out
    }

    /// Which parameters take weight decay: all but the log-scale.
    pub fn decay_mask(&self) -> Vec<bool> {
        let n = self.params().len();
        (0..n).map(|i| i + 1 < n).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Replaces every parameter, in declaration order.
    pub fn set_params(&mut self, values: &[Tensor<T>]) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(Error::Shape(format!(
                "{} parameter tensors for a head with {}",
                values.len(),
                slots.len()
            )));
        }
        for (i, (slot, v)) in slots.iter_mut().zip(values).enumerate() {
            if slot.shape() != v.shape() {
                return Err(Error::Shape(format!(
                    "parameter {i}: {:?} replacing {:?}",
                    v.shape(),
                    slot.shape()
                )));
            }
            **slot = v.clone();
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> AlignmentHead<U> {
        let cast_mlp = |m: &MlpHead<T>| MlpHead {
            layers: m
                .layers
                .iter()
                .map(|l| Linear {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
        };
        AlignmentHead {
            text: match &self.text {
                TextHead::Mlp(m) => TextHead::Mlp(cast_mlp(m)),
                TextHead::Lookup(l) => TextHead::Lookup(LookupHead {
                    table: l.table.cast(),
                }),
            },
            image: self.image.as_ref().map(cast_mlp),
            log_scale: self.log_scale.cast(),
        }
    }

    /// Puts the parameters on `tape`, trainable or frozen.
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> HeadVars {
        let mut put = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let text = match &self.text {
            TextHead::Mlp(m) => m.params().map(&mut put).collect(),
            TextHead::Lookup(l) => vec![put(&l.table)],
        };
        let image = self
            .image
            .iter()
            .flat_map(|m| m.params())
            .map(&mut put)
            .collect();
        let log_scale = put(&self.log_scale);
        HeadVars {
            text,
            image,
            log_scale,
        }
    }

    /// Unit-norm text embeddings `[B, d_out]` recorded on `tape`.
    pub fn embed_text_on(&self, tape: &mut Tape<T>, vars: &HeadVars, batch: &Batch<T>) -> Result<Var> {
        let pooled = match &self.text {
            TextHead::Mlp(m) => {
                let tokens = tape.constant(batch.tokens.clone());
                let per_token = m.forward(tape, &vars.text, tokens)?;
                tape.masked_mean(per_token, &batch.mask)?
            }
            TextHead::Lookup(_) => tape.lookup_mean(vars.text[0], &batch.token_ids)?,
        };
        tape.normalize(pooled)
    }

    /// Unit-norm image embeddings `[B, d_out]` recorded on `tape`.
    pub fn embed_image_on(
        &self,
        tape: &mut Tape<T>,
        vars: &HeadVars,
        images: &Tensor<T>,
    ) -> Result<Var> {
        let x = tape.constant(images.clone());
        let mapped = match &self.image {
            Some(m) => m.forward(tape, &vars.image, x)?,
            None => {
                if images.cols() != self.d_out() {
                    return Err(Error::Config(format!(
                        "image head disabled but image dim {} differs from output dim {}",
                        images.cols(),
                        self.d_out()
                    )));
                }
                x
            }
        };
        tape.normalize(mapped)
    }

    /// Text embeddings without recording gradients.
    pub fn embed_text(&self, batch: &Batch<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let out = self.embed_text_on(&mut tape, &vars, batch)?;
        Ok(tape.value(out).clone())
    }

    /// Image embeddings without recording gradients.
    pub fn embed_image(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let out = self.embed_image_on(&mut tape, &vars, images)?;
        Ok(tape.value(out).clone())
    }
}

/// Parameter counts of a head architecture.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCount {
    pub text_head: u64,
    pub image_head: u64,
    pub temperature: u64,
    pub total: u64,
    /// `text_head / text_tower` when the tower size is given.
    pub text_head_ratio: Option<f64>,
}

/// Parameters of an MLP with the given widths: `Σ (in·out + out)`.
pub fn mlp_params(widths: &[usize]) -> u64 {
    widths
        .windows(2)
        .map(|w| (w[0] * w[1] + w[1]) as u64)
        .sum()
}

/// Exact parameter counts; `text_tower` is the declared size of the frozen
/// text encoder.
pub fn count_params(spec: &HeadSpec, text_tower: Option<u64>) -> ParamCount {
    let text_head = match &spec.text {
        TextHeadSpec::Mlp { widths } => mlp_params(widths),
        TextHeadSpec::Lookup { vocab, d_out } => (*vocab * *d_out) as u64,
    };
    let image_head = spec.image.as_deref().map_or(0, mlp_params);
    ParamCount {
        text_head,
        image_head,
        temperature: 1,
        total: text_head + image_head + 1,
        text_head_ratio: text_tower
            .filter(|&t| t > 0)
            .map(|t| text_head as f64 / t as f64),
    }
}

/// Default text MLP widths: `layers` layers, hidden width `2·d_tok`.
pub fn default_mlp_widths(d_tok: usize, d_out: usize, layers: usize, hidden: Option<usize>) -> Vec<usize> {
    let h = hidden.unwrap_or(2 * d_tok);
    let mut w = vec![d_tok];
    for l in 0..layers {
        w.push(if l + 1 == layers { d_out } else { h });
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch_of(tokens: Vec<Vec<f64>>, mask: Vec<bool>, ids: Vec<Vec<u32>>) -> Batch<f64> {
        let t = tokens.len();
        let d = tokens[0].len();
        Batch {
            tokens: Tensor::new(vec![1, t, d], tokens.concat()).unwrap(),
            mask,
            images: Tensor::zeros(vec![1, d]),
            token_ids: ids,
            sample_ids: vec![0],
            variants: vec![0],
            short: false,
        }
    }

    fn identity_head(d: usize) -> AlignmentHead<f64> {
        AlignmentHead::from_parts(TextHead::Mlp(MlpHead::identity(d)), None, 0.0).unwrap()
    }

    #[test]
    fn identity_mlp_pools_constant_sequence() {
        let head = identity_head(3);
        let v = vec![1.0, -2.0, 2.0];
        let b = batch_of(vec![v.clone(), v.clone()], vec![true, false], vec![vec![0]]);
        let out = head.embed_text(&b).unwrap();
        let expected: Vec<f64> = v.iter().map(|x| x / 3.0).collect();
        for (a, e) in out.data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_excludes_padding() {
        let head = identity_head(2);
        let b = batch_of(vec![vec![1.0, 2.0], vec![3.0, 4.0]], vec![true, false], vec![vec![0]]);
        let out = head.embed_text(&b).unwrap();
        let n = 5f64.sqrt();
        assert!((out.data()[0] - 1.0 / n).abs() < 1e-12);
        assert!((out.data()[1] - 2.0 / n).abs() < 1e-12);
    }

    #[test]
    fn all_masked_row_is_a_precondition_error() {
        let head = identity_head(2);
        let b = batch_of(vec![vec![1.0, 2.0]], vec![false], vec![vec![0]]);
        assert!(matches!(head.embed_text(&b), Err(Error::Precondition(_))));
    }

    #[test]
    fn lookup_mean_then_normalize() {
        let table = Tensor::from_rows(&[vec![9.0, 9.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let head =
            AlignmentHead::from_parts(TextHead::Lookup(LookupHead { table }), None, 0.0).unwrap();
        let b = batch_of(vec![vec![0.0, 0.0]], vec![true], vec![vec![1, 2]]);
        let out = head.embed_text(&b).unwrap();
        for v in out.data() {
            assert!((v - 0.707_106_781).abs() < 1e-6);
        }
        let single = batch_of(vec![vec![0.0, 0.0]], vec![true], vec![vec![1]]);
        assert_eq!(head.embed_text(&single).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn image_side_normalizes() {
        let head = identity_head(2);
        let img = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let out = head.embed_image(&img).unwrap();
        assert!((out.data()[0] - 0.6).abs() < 1e-15 && (out.data()[1] - 0.8).abs() < 1e-15);
        let unit = Tensor::from_rows(&[vec![0.6, 0.8]]).unwrap();
        assert_eq!(head.embed_image(&unit).unwrap().data(), unit.data());

        let with_image = AlignmentHead::from_parts(
            TextHead::Mlp(MlpHead::identity(2)),
            Some(MlpHead::identity(2)),
            0.0,
        )
        .unwrap();
        let out = with_image.embed_image(&img).unwrap();
        assert!((out.data()[0] - 0.6).abs() < 1e-12 && (out.data()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn disabled_image_head_requires_matching_dims() {
        let head = identity_head(2);
        let img = Tensor::from_rows(&[vec![3.0, 4.0, 0.0]]).unwrap();
        assert!(matches!(head.embed_image(&img), Err(Error::Config(_))));
    }

    #[test]
    fn parameter_counts() {
        let spec = HeadSpec {
            text: TextHeadSpec::Mlp {
                widths: vec![768; 5],
            },
            image: None,
        };
        assert_eq!(count_params(&spec, None).text_head, 2_362_368);
        let lookup = HeadSpec {
            text: TextHeadSpec::Lookup {
                vocab: 32_000,
                d_out: 768,
            },
            image: None,
        };
        assert_eq!(count_params(&lookup, None).text_head, 24_576_000);
        let empty = HeadSpec {
            text: TextHeadSpec::Mlp { widths: vec![768] },
            image: None,
        };
        assert_eq!(count_params(&empty, None).text_head, 0);
        let r = count_params(&spec, Some(23_623_680)).text_head_ratio.unwrap();
        assert!((r - 0.1).abs() < 1e-12);
    }

    #[test]
    fn init_matches_declared_counts_and_clamps_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = HeadSpec {
            text: TextHeadSpec::Mlp {
                widths: default_mlp_widths(8, 6, 4, None),
            },
            image: Some(vec![6, 12, 6]),
        };
        let head = AlignmentHead::<f32>::init(&spec, 10.0, &mut rng).unwrap();
        let c = count_params(&spec, None);
        assert_eq!(head.num_params() as u64, c.total);
        assert!((head.scale() - 100.0).abs() < 1e-3);
        assert_eq!(head.spec(), spec);
        assert_eq!(head.decay_mask().iter().filter(|&&d| !d).count(), 1);
    }
}
