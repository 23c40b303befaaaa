//! Dense row-major tensors and the small reverse-mode kernel that drives the
//! alignment heads and the contrastive loss.
//!
//! The kernel is deliberately narrow: it supports the handful of operations
//! the heads need ([`Tape::affine`], [`Tape::gelu`], masked pooling, lookup
//! pooling, row normalization and the fused contrastive loss) and nothing
//! else. All shapes are explicit; the only broadcast is the bias add.

mod gradcheck;
mod tape;

use std::fmt::{self, Debug};
use std::iter::Sum;
use std::sync::atomic::{AtomicBool, Ordering};

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

pub use gradcheck::{finite_difference_check, GradCheck};
pub use tape::{Gradients, Tape, Var};

static STRICT: AtomicBool = AtomicBool::new(false);

/// Switch strict-deterministic mode on or off for the whole process.
///
/// In strict mode every reduction runs on the calling thread in a fixed
/// order, and wall-clock readings are kept out of persisted artifacts.
pub fn set_strict_deterministic(on: bool) {
    STRICT.store(on, Ordering::SeqCst);
}

pub fn strict_deterministic() -> bool {
    STRICT.load(Ordering::SeqCst)
}

/// Floating-point element type. `f32` is the storage type used for
/// training; `f64` exists so gradient checks can run at higher precision.
pub trait Real:
    Float + FromPrimitive + Default + Debug + fmt::Display + Sum + Send + Sync + 'static
{
    const NAME: &'static str;

    /// `c = a · b (+ c if accumulate)` for row-major operands, either of
    /// which may be read transposed.
    fn gemm(a: MatRef<'_, Self>, b: MatRef<'_, Self>, c: &mut [Self], accumulate: bool);

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

/// Borrowed matrix view used by [`Real::gemm`].
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    /// Logical (rows, cols) after transposition.
    fn dims(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    /// Row and column strides of the logical matrix.
    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

macro_rules! impl_real {
    ($t:ty, $name:expr, $kernel:path) => {
        impl Real for $t {
            const NAME: &'static str = $name;

            fn gemm(a: MatRef<'_, Self>, b: MatRef<'_, Self>, c: &mut [Self], accumulate: bool) {
                let (m, k) = a.dims();
                let (k2, n) = b.dims();
                assert_eq!(k, k2, "gemm inner dimensions");
                assert_eq!(c.len(), m * n, "gemm output length");
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        c.iter_mut().for_each(|v| *v = 0.0);
                    }
                    return;
                }
                let (rsa, csa) = a.strides();
                let (rsb, csb) = b.strides();
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the strides describe exactly the borrowed slices,
                // whose lengths were checked above, and `c` is uniquely
                // borrowed for the duration of the call.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.data.as_ptr(),
                        rsa,
                        csa,
                        b.data.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, "f32", matrixmultiply::sgemm);
impl_real!(f64, "f64", matrixmultiply::dgemm);

/// Contiguous row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) && !data.is_empty() {
            return Err(Error::Shape(format!(
                "shape {shape:?} is empty but {} values were given",
                data.len()
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); len],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("rows have unequal lengths".into()));
        }
        Self::new(
            vec![rows.len(), cols],
            rows.iter().flatten().copied().collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the trailing dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of trailing-dimension rows, i.e. the product of every leading
    /// dimension.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            n => self.shape[..n - 1].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.as_f64()).expect("representable"))
                .collect(),
        }
    }

    /// Index of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// Fails with a numeric error naming `what` and the offending flat index.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.first_non_finite() {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "{what} has non-finite value {} at flat index {i} (shape {:?})",
                self.data[i], self.shape
            ))),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "cannot add {:?} into {:?}",
                other.shape, self.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        self.data.iter_mut().for_each(|v| *v = *v * factor);
    }

    /// Selects rows `start..end` of the leading dimension.
    pub fn slice_leading(&self, start: usize, end: usize) -> Result<Self> {
        let lead = *self
            .shape
            .first()
            .ok_or_else(|| Error::Shape("cannot slice a 0-d tensor".into()))?;
        if start > end || end > lead {
            return Err(Error::Range(format!(
                "slice {start}..{end} of leading dimension {lead}"
            )));
        }
        let stride: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self {
            shape,
            data: self.data[start * stride..end * stride].to_vec(),
        })
    }

    /// Concatenates along the leading dimension.
    pub fn concat_leading(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
        let inner = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != inner {
                return Err(Error::Shape(format!(
                    "cannot concatenate {:?} with {:?}",
                    p.shape, first.shape
                )));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Ok(Self { shape, data })
    }

    /// `self · other` for 2-D operands.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Self> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::Shape(format!(
                "matmul of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let (m, n) = (self.shape[0], other.shape[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            MatRef::new(&self.data, m, self.shape[1]),
            MatRef::new(&other.data, other.shape[0], n),
            &mut out,
            false,
        );
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(Error::Shape(format!("transpose of {:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor<{}>{:?} [", T::NAME, self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", …")?;
        }
        write!(f, "]")
    }
}

/// Euclidean norm accumulated in 64-bit.
pub fn norm<T: Real>(v: &[T]) -> f64 {
    v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
}

/// Inner product accumulated in 64-bit.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum()
}

/// Rows scaled to unit norm. Fails on a zero row.
pub fn normalize_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let n = norm(x.row(i));
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::Numeric(format!(
                "row {i} has norm {n} and cannot be normalized"
            )));
        }
        let inv = T::lit(1.0 / n);
        out.row_mut(i).iter_mut().for_each(|v| *v = *v * inv);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        let err = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn matmul_against_naive() {
        let a = Tensor::<f64>::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::<f64>::new(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
        // transposed operands through the strided kernel
        let mut out = vec![0.0; 4];
        f64::gemm(
            MatRef::new(b.data(), 3, 2).t(),
            MatRef::new(a.data(), 2, 3).t(),
            &mut out,
            false,
        );
        assert_eq!(out, c.transpose().unwrap().data());
    }

    #[test]
    fn check_finite_reports_index() {
        let t = Tensor::<f32>::new(vec![3], vec![1.0, f32::NAN, 0.0]).unwrap();
        let msg = t.check_finite("probe").unwrap_err().to_string();
        assert!(msg.contains("index 1"), "{msg}");
    }

    #[test]
    fn normalize_zero_row_fails() {
        let t = Tensor::<f32>::new(vec![2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        assert!(normalize_rows(&t).is_err());
        let ok = normalize_rows(&t.slice_leading(0, 1).unwrap()).unwrap();
        assert_eq!(ok.data(), &[0.6, 0.8]);
    }
}
