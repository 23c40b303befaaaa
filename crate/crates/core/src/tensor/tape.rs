use crate::error::{Error, Result};

use super::{dot, norm, MatRef, Real, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Affine {
        x: usize,
        w: usize,
        b: usize,
    },
    Gelu {
        x: usize,
    },
    MaskedMean {
        x: usize,
        mask: Vec<bool>,
        counts: Vec<usize>,
    },
    LookupMean {
        table: usize,
        ids: Vec<Vec<u32>>,
    },
    Normalize {
        x: usize,
        norms: Vec<f64>,
    },
    Contrastive {
        img: usize,
        txt: usize,
        log_scale: usize,
        logits: Vec<f64>,
        batch: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed operations.
///
/// Values are immutable once recorded; [`Tape::backward`] walks the record
/// in exact reverse order and only produces gradients for values that
/// depend on a [`Tape::param`].
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a frozen input; it never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// `out[.., :] = x[.., :] · W + b` over every leading index of `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let d_in = xv.cols();
        if wv.shape().len() != 2 || wv.shape()[0] != d_in {
            return Err(Error::Shape(format!(
                "affine input {:?} against weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let d_out = wv.shape()[1];
        if bv.shape() != [d_out] {
            return Err(Error::Shape(format!(
                "affine weight {:?} against bias {:?}",
                wv.shape(),
                bv.shape()
            )));
        }
        let n = xv.rows();
        let mut out = Vec::with_capacity(n * d_out);
        for _ in 0..n {
            out.extend_from_slice(bv.data());
        }
        T::gemm(
            MatRef::new(xv.data(), n, d_in),
            MatRef::new(wv.data(), d_in, d_out),
            &mut out,
            true,
        );
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("non-scalar input") = d_out;
        let needs = self.needs(x.0) || self.needs(w.0) || self.needs(b.0);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Affine {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            needs,
        ))
    }

    /// Elementwise GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out: Vec<T> = xv.data().iter().map(|&v| gelu(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let needs = self.needs(x.0);
        self.push(value, Op::Gelu { x: x.0 }, needs)
    }

    /// Mean over the valid positions of a `[B, T, D]` input; `mask` has
    /// `B·T` entries. Rows without a valid position are rejected.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 3 {
            return Err(Error::Shape(format!(
                "masked mean expects [B, T, D], got {:?}",
                xv.shape()
            )));
        }
        let (b, t, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if mask.len() != b * t {
            return Err(Error::Shape(format!(
                "mask of length {} against tokens {:?}",
                mask.len(),
                xv.shape()
            )));
        }
        let mut out = vec![T::zero(); b * d];
        let mut counts = Vec::with_capacity(b);
        for i in 0..b {
            let valid = &mask[i * t..(i + 1) * t];
            let count = valid.iter().filter(|&&m| m).count();
            if count == 0 {
                return Err(Error::Precondition(format!(
                    "sequence {i} has no valid positions"
                )));
            }
            let mut acc = vec![0.0f64; d];
            for (pos, _) in valid.iter().enumerate().filter(|(_, &m)| m) {
                let row = xv.row(i * t + pos);
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v.as_f64();
                }
            }
            for (o, a) in out[i * d..(i + 1) * d].iter_mut().zip(acc) {
                *o = T::lit(a / count as f64);
            }
            counts.push(count);
        }
        let needs = self.needs(x.0);
        Ok(self.push(
            Tensor::new(vec![b, d], out)?,
            Op::MaskedMean {
                x: x.0,
                mask: mask.to_vec(),
                counts,
            },
            needs,
        ))
    }

    /// Mean of `table` rows selected by each id list.
    pub fn lookup_mean(&mut self, table: Var, ids: &[Vec<u32>]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "lookup table must be 2-D, got {:?}",
                tv.shape()
            )));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = vec![T::zero(); ids.len() * d];
        for (i, seq) in ids.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::Precondition(format!("sequence {i} has no tokens")));
            }
            let mut acc = vec![0.0f64; d];
            for &id in seq {
                if id as usize >= vocab {
                    return Err(Error::Range(format!(
                        "token id {id} in sequence {i} exceeds vocabulary of {vocab}"
                    )));
                }
                for (a, &v) in acc.iter_mut().zip(tv.row(id as usize)) {
                    *a += v.as_f64();
                }
            }
            for (o, a) in out[i * d..(i + 1) * d].iter_mut().zip(acc) {
                *o = T::lit(a / seq.len() as f64);
            }
        }
        let needs = self.needs(table.0);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::LookupMean {
                table: table.0,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Scales each trailing-dimension row to unit L2 norm.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let n = norm(xv.row(i));
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::Numeric(format!(
                    "row {i} has norm {n} and cannot be normalized"
                )));
            }
            let inv = T::lit(1.0 / n);
            out.row_mut(i).iter_mut().for_each(|v| *v = *v * inv);
            norms.push(n);
        }
        let needs = self.needs(x.0);
        Ok(self.push(out, Op::Normalize { x: x.0, norms }, needs))
    }

    /// Symmetric batch contrastive loss over unit-norm rows.
    ///
    /// With `S[i, j] = exp(log_scale) · <img_i, txt_j>` the loss is the mean
    /// of the row-wise and column-wise cross-entropies against the diagonal.
    /// Softmax and reductions run in 64-bit.
    pub fn contrastive_loss(&mut self, img: Var, txt: Var, log_scale: Var) -> Result<Var> {
        let (iv, tv, sv) = (self.value(img), self.value(txt), self.value(log_scale));
        if iv.shape().len() != 2 || iv.shape() != tv.shape() {
            return Err(Error::Shape(format!(
                "contrastive loss over image {:?} and text {:?}",
                iv.shape(),
                tv.shape()
            )));
        }
        if sv.len() != 1 {
            return Err(Error::Shape(format!(
                "log scale must be a scalar, got {:?}",
                sv.shape()
            )));
        }
        let (batch, d) = (iv.shape()[0], iv.shape()[1]);
        if batch == 0 {
            return Err(Error::Precondition("empty batch".into()));
        }
        let scale = sv.data()[0].as_f64().exp();
        let img64: Vec<f64> = iv.data().iter().map(|v| v.as_f64()).collect();
        let txt64: Vec<f64> = tv.data().iter().map(|v| v.as_f64()).collect();
        let mut logits = vec![0.0f64; batch * batch];
        f64::gemm(
            MatRef::new(&img64, batch, d),
            MatRef::new(&txt64, batch, d).t(),
            &mut logits,
            false,
        );
        for (k, s) in logits.iter_mut().enumerate() {
            *s *= scale;
            if !s.is_finite() {
                return Err(Error::Numeric(format!(
                    "logit for image {} and text {} is {s}",
                    k / batch,
                    k % batch
                )));
            }
        }
        let loss = symmetric_cross_entropy(&logits, batch);
        let needs = self.needs(img.0) || self.needs(txt.0) || self.needs(log_scale.0);
        Ok(self.push(
            Tensor::scalar(T::lit(loss)),
            Op::Contrastive {
                img: img.0,
                txt: txt.0,
                log_scale: log_scale.0,
                logits,
                batch,
            },
            needs,
        ))
    }

    /// Backpropagates from a scalar output seeded with 1.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let v = self.value(output);
        if v.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got {:?}",
                v.shape()
            )));
        }
        self.backward_with(vec![(output, Tensor::full(v.shape().to_vec(), T::one()))])
    }

    /// Backpropagates from arbitrary upstream gradients.
    pub fn backward_with(&self, seeds: Vec<(Var, Tensor<T>)>) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (var, seed) in seeds {
            if seed.shape() != self.value(var).shape() {
                return Err(Error::Shape(format!(
                    "seed {:?} for value {:?}",
                    seed.shape(),
                    self.value(var).shape()
                )));
            }
            accumulate(&mut grads[var.0], seed);
            last = last.max(var.0 + 1);
        }
        for idx in (0..last).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if !node.needs_grad {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                let (d_in, d_out) = (wv.shape()[0], wv.shape()[1]);
                let n = xv.rows();
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * d_in];
                    T::gemm(
                        MatRef::new(g.data(), n, d_out),
                        MatRef::new(wv.data(), d_in, d_out).t(),
                        &mut dx,
                        false,
                    );
                    accumulate(&mut grads[*x], Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); d_in * d_out];
                    T::gemm(
                        MatRef::new(xv.data(), n, d_in).t(),
                        MatRef::new(g.data(), n, d_out),
                        &mut dw,
                        false,
                    );
                    accumulate(&mut grads[*w], Tensor::new(vec![d_in, d_out], dw)?);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0f64; d_out];
                    for r in 0..n {
                        for (a, &v) in db.iter_mut().zip(g.row(r)) {
                            *a += v.as_f64();
                        }
                    }
                    let db = db.into_iter().map(T::lit).collect();
                    accumulate(&mut grads[*b], Tensor::new(vec![d_out], db)?);
                }
            }
            Op::Gelu { x } => {
                let xv = &self.nodes[*x].value;
                let dx = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| gv * gelu_grad(v))
                    .collect();
                accumulate(&mut grads[*x], Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::MaskedMean { x, mask, counts } => {
                let xv = &self.nodes[*x].value;
                let (t, d) = (xv.shape()[1], xv.shape()[2]);
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                for (i, &count) in counts.iter().enumerate() {
                    let inv = T::lit(1.0 / count as f64);
                    for pos in 0..t {
                        if mask[i * t + pos] {
                            let dst = &mut dx.data_mut()[(i * t + pos) * d..(i * t + pos + 1) * d];
                            for (o, &gv) in dst.iter_mut().zip(g.row(i)) {
                                *o = gv * inv;
                            }
                        }
                    }
                }
                accumulate(&mut grads[*x], dx);
            }
            Op::LookupMean { table, ids } => {
                let tv = &self.nodes[*table].value;
                let mut dt = Tensor::zeros(tv.shape().to_vec());
                for (i, seq) in ids.iter().enumerate() {
                    let inv = T::lit(1.0 / seq.len() as f64);
                    for &id in seq {
                        for (o, &gv) in dt.row_mut(id as usize).iter_mut().zip(g.row(i)) {
                            *o = *o + gv * inv;
                        }
                    }
                }
                accumulate(&mut grads[*table], dt);
            }
            Op::Normalize { x, norms } => {
                let y = &self.nodes[idx].value;
                let mut dx = Tensor::zeros(y.shape().to_vec());
                for (i, &n) in norms.iter().enumerate() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let proj = dot(yr, gr);
                    for ((o, &yv), &gv) in dx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = T::lit((gv.as_f64() - yv.as_f64() * proj) / n);
                    }
                }
                accumulate(&mut grads[*x], dx);
            }
            Op::Contrastive {
                img,
                txt,
                log_scale,
                logits,
                batch,
            } => {
                let b = *batch;
                let upstream = g.data()[0].as_f64();
                let dlogits = contrastive_logit_grad(logits, b, upstream);
                let scale = self.nodes[*log_scale].value.data()[0].as_f64().exp();
                let iv = &self.nodes[*img].value;
                let tv = &self.nodes[*txt].value;
                let d = iv.shape()[1];
                if self.needs(*img) || self.needs(*txt) {
                    let img64: Vec<f64> = iv.data().iter().map(|v| v.as_f64()).collect();
                    let txt64: Vec<f64> = tv.data().iter().map(|v| v.as_f64()).collect();
                    if self.needs(*img) {
                        let mut di = vec![0.0f64; b * d];
                        f64::gemm(
                            MatRef::new(&dlogits, b, b),
                            MatRef::new(&txt64, b, d),
                            &mut di,
                            false,
                        );
                        let di = di.into_iter().map(|v| T::lit(v * scale)).collect();
                        accumulate(&mut grads[*img], Tensor::new(vec![b, d], di)?);
                    }
                    if self.needs(*txt) {
                        let mut dt = vec![0.0f64; b * d];
                        f64::gemm(
                            MatRef::new(&dlogits, b, b).t(),
                            MatRef::new(&img64, b, d),
                            &mut dt,
                            false,
                        );
                        let dt = dt.into_iter().map(|v| T::lit(v * scale)).collect();
                        accumulate(&mut grads[*txt], Tensor::new(vec![b, d], dt)?);
                    }
                }
                if self.needs(*log_scale) {
                    // dS/dlog_scale = S
                    let ds: f64 = dlogits.iter().zip(logits).map(|(a, s)| a * s).sum();
                    let shape = self.nodes[*log_scale].value.shape().to_vec();
                    accumulate(&mut grads[*log_scale], Tensor::new(shape, vec![T::lit(ds)])?);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&g).expect("gradient shapes agree"),
        None => *slot = Some(g),
    }
}

/// Gradients produced by a backward pass, indexed by [`Var`].
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` for frozen inputs and for values the output does not depend on.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but yields zeros of the given shape when no
    /// gradient reached the value.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let v = x.as_f64();
    let u = GELU_C * (v + GELU_K * v * v * v);
    T::lit(0.5 * v * (1.0 + u.tanh()))
}

fn gelu_grad<T: Real>(x: T) -> T {
    let v = x.as_f64();
    let u = GELU_C * (v + GELU_K * v * v * v);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_K * v * v);
    T::lit(0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Loss value from a row-major `batch × batch` logit matrix.
pub(crate) fn symmetric_cross_entropy(logits: &[f64], batch: usize) -> f64 {
    let mut rows = 0.0;
    let mut cols = 0.0;
    for i in 0..batch {
        let row = logits[i * batch..(i + 1) * batch].iter().copied();
        rows += log_sum_exp(row) - logits[i * batch + i];
        let col = (0..batch).map(|j| logits[j * batch + i]);
        cols += log_sum_exp(col) - logits[i * batch + i];
    }
    0.5 * (rows / batch as f64 + cols / batch as f64)
}

/// d loss / d logits, scaled by the upstream gradient.
fn contrastive_logit_grad(logits: &[f64], batch: usize, upstream: f64) -> Vec<f64> {
    let coef = 0.5 * upstream / batch as f64;
    let mut grad = vec![0.0f64; batch * batch];
    for i in 0..batch {
        let row = &logits[i * batch..(i + 1) * batch];
        let lse = log_sum_exp(row.iter().copied());
        for j in 0..batch {
            grad[i * batch + j] += coef * (row[j] - lse).exp();
        }
        grad[i * batch + i] -= coef;
    }
    for j in 0..batch {
        let lse = log_sum_exp((0..batch).map(|i| logits[i * batch + j]));
        for i in 0..batch {
            grad[i * batch + j] += coef * (logits[i * batch + j] - lse).exp();
        }
        grad[j * batch + j] -= coef;
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn affine_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(&[vec![1.0, 2.0]]));
        let w = tape.param(t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = tape.param(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let w0 = tape.param(t2(&[vec![0.0, 0.0], vec![0.0, 0.0]]));
        let b34 = tape.param(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let y = tape.affine(x, w0, b34).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);

        let ones = tape.constant(t2(&[vec![1.0, 1.0]]));
        let w23 = tape.param(t2(&[vec![2.0, 0.0], vec![0.0, 3.0]]));
        let b11 = tape.param(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let y = tape.affine(ones, w23, b11).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn affine_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![2, 3]));
        let w = tape.param(Tensor::zeros(vec![2, 4]));
        let b = tape.param(Tensor::zeros(vec![4]));
        let msg = tape.affine(x, w, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 4]"), "{msg}");
    }

    #[test]
    fn affine_is_linear_without_bias() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::new(vec![1, 2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75]).unwrap();
        let mut x3 = x.clone();
        x3.scale(3.0);
        let w = tape.param(Tensor::new(vec![3, 2], vec![1.0, -2.0, 0.5, 0.0, 3.0, 1.0]).unwrap());
        let b = tape.param(Tensor::zeros(vec![2]));
        let xv = tape.constant(x);
        let x3v = tape.constant(x3);
        let y = tape.affine(xv, w, b).unwrap();
        let y3 = tape.affine(x3v, w, b).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2, 2]);
        for (a, b) in tape.value(y).data().iter().zip(tape.value(y3).data()) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(10.0f64) - 10.0).abs() < 1e-6);
        // 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715)) evaluated by hand
        assert!((gelu(1.0f64) - 0.841_192).abs() < 1e-6, "{}", gelu(1.0f64));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(&[vec![1.0, 2.0]]));
        let w = tape.param(t2(&[vec![1.0], vec![1.0]]));
        let b = tape.param(Tensor::zeros(vec![1]));
        let y = tape.affine(x, w, b).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0]);
    }

    #[test]
    fn backward_keeps_forward_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t2(&[vec![3.0, 4.0], vec![1.0, 0.0]]));
        let y = tape.normalize(x).unwrap();
        let before: Vec<f64> = tape.value(y).data().to_vec();
        let xs = tape.value(x).data().to_vec();
        let s = tape.param(Tensor::scalar(0.0));
        let l = tape.contrastive_loss(y, y, s).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.value(y).data(), before.as_slice());
        assert_eq!(tape.value(x).data(), xs.as_slice());
    }

    #[test]
    fn masked_mean_rejects_empty_row() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![2, 2, 1]));
        let err = tape.masked_mean(x, &[true, false, false, false]).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn contrastive_hand_case() {
        let mut tape = Tape::<f64>::new();
        let e = tape.constant(t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let s = tape.constant(Tensor::scalar(0.0));
        let l = tape.contrastive_loss(e, e, s).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((tape.value(l).data()[0] - expected).abs() < 1e-12);
        assert!((expected - 0.313_262).abs() < 1e-6);
    }

    #[test]
    fn contrastive_rejects_non_finite_logits() {
        let mut tape = Tape::<f64>::new();
        let e = tape.constant(t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let s = tape.constant(Tensor::scalar(1e6));
        let msg = tape.contrastive_loss(e, e, s).unwrap_err().to_string();
        assert!(msg.contains("image 0 and text 0"), "{msg}");
    }
}
