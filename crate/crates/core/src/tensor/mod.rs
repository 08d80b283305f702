//! Dense tensors and the differentiable kernels the spiking U-Net is built from.
//!
//! Every kernel accepts either a single feature map `[C, H, W]` or a stack of
//! them `[N, C, H, W]`; the leading axis is used for the timestep dimension when
//! a layer is evaluated over a whole sequence at once.

mod concat;
mod conv;
mod loss;
mod pool;
mod upsample;

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

pub use concat::{concat_channels, split_channels};
pub use conv::{conv2d_backward, conv2d_forward, Conv2dGrads, ConvPath};
pub use conv::{conv2d_backward_with, conv2d_forward_with};
pub use loss::{softmax_ce, SoftmaxCe};
pub use pool::{maxpool2_backward, maxpool2_forward, PoolIndices};
pub use upsample::{
    tconv2_backward, tconv2_forward, upsample_nearest2_backward, upsample_nearest2_forward,
    TConv2Grads,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("{op}: spatial size {height}x{width} must be even")]
    OddSpatial {
        op: &'static str,
        height: usize,
        width: usize,
    },
    #[error("target class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: u8, classes: usize },
    #[error("{0}: backward called without a saved forward context")]
    MissingContext(&'static str),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Scalar type the kernels are generic over: `f32` for training, `f64` for
/// gradient checks.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a * b + beta * c` with arbitrary row/column strides.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (usize, usize)) {
    if rows > 0 && cols > 0 {
        let last = (rows - 1) * rs + (cols - 1) * cs;
        assert!(last < len, "gemm operand out of bounds");
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                check_extent(a.len(), m, k, a_strides);
                check_extent(b.len(), k, n, b_strides);
                check_extent(c.len(), m, n, c_strides);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every operand extent was bounds-checked above.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Row-major dense tensor, last axis fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                len: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }

    pub fn fill(&mut self, value: F) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// `true` when every entry is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == F::zero() || v == F::one())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != F::zero()).count()
    }

    pub fn sum(&self) -> F {
        self.data.iter().fold(F::zero(), |acc, &v| acc + v)
    }

    pub fn max_value(&self) -> Option<F> {
        self.data.iter().copied().reduce(F::max)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                expected: format!("{:?}", self.shape),
                got: other.shape.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: F) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| G::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(G::nan))
                .collect(),
        }
    }

    /// Contiguous slice of the `index`-th entry along the leading axis.
    pub fn outer(&self, index: usize) -> &[F] {
        let stride = self.data.len() / self.shape[0];
        &self.data[index * stride..(index + 1) * stride]
    }

    pub fn outer_mut(&mut self, index: usize) -> &mut [F] {
        let stride = self.data.len() / self.shape[0];
        &mut self.data[index * stride..(index + 1) * stride]
    }
}

/// Normalized view of a `[C,H,W]` or `[N,C,H,W]` shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Maps {
    pub batch: Option<usize>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Maps {
    pub fn of(op: &'static str, shape: &[usize]) -> Result<Self> {
        match *shape {
            [c, h, w] if h > 0 && w > 0 => Ok(Self {
                batch: None,
                channels: c,
                height: h,
                width: w,
            }),
            [n, c, h, w] if h > 0 && w > 0 => Ok(Self {
                batch: Some(n),
                channels: c,
                height: h,
                width: w,
            }),
            _ => Err(TensorError::ShapeMismatch {
                op,
                expected: "[C,H,W] or [N,C,H,W]".into(),
                got: shape.to_vec(),
            }),
        }
    }

    pub fn frames(&self) -> usize {
        self.batch.unwrap_or(1)
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.plane()
    }

    pub fn shape_with(&self, channels: usize, height: usize, width: usize) -> Vec<usize> {
        match self.batch {
            Some(n) => vec![n, channels, height, width],
            None => vec![channels, height, width],
        }
    }
}

pub(crate) fn expect_shape<F: Real>(op: &'static str, t: &Tensor<F>, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: format!("{shape:?}"),
            got: t.shape().to_vec(),
        });
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    pub fn random_binary(shape: &[usize], density: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| if rng.gen_bool(density) { 1.0 } else { 0.0 })
    }

    pub fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    /// Central finite difference of `loss` with respect to every entry of `x`.
    pub fn numeric_grad(x: &Tensor<f64>, step: f64, mut loss: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
        let mut probe = x.clone();
        let mut grad = x.zeros_like();
        for i in 0..x.len() {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + step;
            let up = loss(&probe);
            probe.data_mut()[i] = orig - step;
            let down = loss(&probe);
            probe.data_mut()[i] = orig;
            grad.data_mut()[i] = (up - down) / (2.0 * step);
        }
        grad
    }

    /// Max relative error with an absolute floor, so near-zero entries do not blow up.
    pub fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        assert_eq!(a.shape(), b.shape());
        let scale = a
            .data()
            .iter()
            .chain(b.data())
            .fold(1e-3f64, |m, v| m.max(v.abs()));
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() / scale)
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn gemm_matches_naive_product() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0f64; 4];
        f64::gemm(2, 3, 2, 1.0, &a, (3, 1), &b, (2, 1), 0.0, &mut c, (2, 1));
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
        // transposed view of b
        let bt = [7.0f64, 9.0, 11.0, 8.0, 10.0, 12.0];
        f64::gemm(2, 3, 2, 1.0, &a, (3, 1), &bt, (1, 3), 0.0, &mut c, (2, 1));
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn binary_detection() {
        let t = Tensor::<f32>::new(vec![3], vec![0.0, 1.0, 1.0]).unwrap();
        assert!(t.is_binary());
        let t = Tensor::<f32>::new(vec![3], vec![0.0, 2.0, 1.0]).unwrap();
        assert!(!t.is_binary());
    }
}
