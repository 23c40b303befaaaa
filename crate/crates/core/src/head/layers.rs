use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const MAX_LAYERS: usize = 8;

/// One affine layer, `x · W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// MLP applied independently to every row of its input, GELU between
/// layers and nothing after the last one. Zero layers is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpHead<T: Real = f32> {
    pub layers: Vec<Linear<T>>,
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.is_empty() {
        return Err(Error::Config("an MLP needs at least its input width".into()));
    }
    if widths.len() - 1 > MAX_LAYERS {
        return Err(Error::Config(format!(
            "{} layers requested, at most {MAX_LAYERS} supported",
            widths.len() - 1
        )));
    }
    if widths.iter().any(|&w| w == 0) {
        return Err(Error::Config(format!("zero width in {widths:?}")));
    }
    Ok(())
}

impl<T: Real> MlpHead<T> {
    /// Fan-in scaled uniform weights (variance `1/fan_in`), zero biases,
    /// and the last layer shrunk by 10×.
    pub fn init<R: Rng>(widths: &[usize], rng: &mut R) -> Result<Self> {
        check_widths(widths)?;
        let n = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (d_in, d_out) = (w[0], w[1]);
                let mut bound = (3.0 / d_in as f64).sqrt();
                if l + 1 == n {
                    bound *= 0.1;
                }
                let weight = (0..d_in * d_out)
                    .map(|_| T::lit(rng.gen_range(-bound..bound)))
                    .collect();
                Linear {
                    weight: Tensor::new(vec![d_in, d_out], weight).expect("sized"),
                    bias: Tensor::zeros(vec![d_out]),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    /// Single layer with identity weights and zero bias.
    pub fn identity(dim: usize) -> Self {
        let mut w = Tensor::zeros(vec![dim, dim]);
        for i in 0..dim {
            w.data_mut()[i * dim + i] = T::one();
        }
        Self {
            layers: vec![Linear {
                weight: w,
                bias: Tensor::zeros(vec![dim]),
            }],
        }
    }

    pub fn from_layers(layers: Vec<Linear<T>>) -> Result<Self> {
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(Error::Shape(format!(
                    "layer {l} outputs {} but layer {} takes {}",
                    pair[0].d_out(),
                    l + 1,
                    pair[1].d_in()
                )));
            }
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.weight.shape().len() != 2 || layer.bias.shape() != [layer.d_out()] {
                return Err(Error::Shape(format!(
                    "layer {l}: weight {:?}, bias {:?}",
                    layer.weight.shape(),
                    layer.bias.shape()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.layers.iter().map(Linear::d_in).collect();
        if let Some(last) = self.layers.last() {
            w.push(last.d_out());
        }
        w
    }

    pub fn d_out(&self) -> Option<usize> {
        self.layers.last().map(Linear::d_out)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub(crate) fn params(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// Records the forward pass on `tape`; `vars` holds the parameter
    /// handles in [`MlpHead::params`] order.
    pub(crate) fn forward(&self, tape: &mut Tape<T>, vars: &[Var], mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for l in 0..n {
            x = tape.affine(x, vars[2 * l], vars[2 * l + 1])?;
            if l + 1 < n {
                x = tape.gelu(x);
            }
        }
        Ok(x)
    }
}

/// Learned embedding per token id; a sequence embeds as the mean of its
/// rows.
#[derive(Clone, Debug, PartialEq)]
pub struct LookupHead<T: Real = f32> {
    /// `[vocab, d_out]`
    pub table: Tensor<T>,
}

impl<T: Real> LookupHead<T> {
    /// Rows drawn from `N(0, 1/d_out)`.
    pub fn init<R: Rng>(vocab: usize, d_out: usize, rng: &mut R) -> Result<Self> {
        if vocab == 0 || d_out == 0 {
            return Err(Error::Config(format!(
                "lookup table of {vocab} × {d_out}"
            )));
        }
        let std = 1.0 / (d_out as f64).sqrt();
        let data = (0..vocab * d_out)
            .map(|_| T::lit(std * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Ok(Self {
            table: Tensor::new(vec![vocab, d_out], data)?,
        })
    }

    pub fn vocab(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.table.shape()[1]
    }
}
