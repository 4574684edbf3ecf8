//! Dense row-major tensors, a recording autodiff graph, Adam and
//! checkpoint files.
//!
//! Training runs in `f32`; the same code instantiated with `f64` is used as
//! the high-precision comparison path by gradient checks.

mod checkpoint;
mod graph;
mod optim;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_FORMAT_VERSION, CHECKPOINT_MAGIC};
pub use graph::{AttentionWeights, Graph, Var};
pub use optim::{lr_schedule, Adam, AdamConfig};
pub use params::{Gradients, ParamStore};

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("backward called without a recorded forward pass")]
    NoForward,
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape { op, detail: detail.into() }
}

/// Scalar type the tensor engine runs on: `f32` for training, `f64` for
/// reference computations.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    /// `c = alpha * a·b + beta * c` on strided matrices (`m×k` by `k×n`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        c: &mut [Self],
        c_strides: (isize, isize),
        beta: Self,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }

    /// Element-wise `exp`. Inputs below about −87 give exactly 0.
    fn exp_in_place(xs: &mut [Self]) {
        xs.iter_mut().for_each(|x| *x = x.exp());
    }
}

/// Range-reduced polynomial `expf` (Cephes coefficients, about 1 ulp)
/// written so the loop vectorizes.
fn exp_f32_slice(xs: &mut [f32]) {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // adding and subtracting 1.5·2^23 rounds to the nearest integer
    const ROUND: f32 = 12_582_912.0;
    for x in xs.iter_mut() {
        let orig = *x;
        let v = if orig < -87.0 { -87.0 } else if orig > 88.0 { 88.0 } else { orig };
        let shifted = v * LOG2E + ROUND;
        let n = shifted - ROUND;
        // the rounded integer sits in the low mantissa bits of `shifted`
        let ni = shifted.to_bits().wrapping_sub(ROUND.to_bits()) as i32;
        let r = v - n * LN2_HI - n * LN2_LO;
        let mut p = 1.987_569_1e-4_f32;
        p = p * r + 1.398_199_9e-3;
        p = p * r + 8.333_452e-3;
        p = p * r + 4.166_579_6e-2;
        p = p * r + 1.666_666_5e-1;
        p = p * r + 5.000_000_1e-1;
        let y = p * r * r + r + 1.0;
        let scale = f32::from_bits((ni.wrapping_add(127) as u32) << 23);
        *x = if orig < -87.0 { 0.0 } else { y * scale };
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, strides: (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * strides.0 + (cols as isize - 1) * strides.1;
    assert!(strides.0 >= 0 && strides.1 >= 0 && (last as usize) < len, "gemm operand out of bounds");
}

macro_rules! impl_real {
    ($t:ty, $gemm:path $(, $exp:path)?) => {
        impl Real for $t {
            $(
                fn exp_in_place(xs: &mut [Self]) {
                    $exp(xs)
                }
            )?

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                c: &mut [Self],
                c_strides: (isize, isize),
                beta: Self,
            ) {
                check_extent(a.len(), m, k, a_strides);
                check_extent(b.len(), k, n, b_strides);
                check_extent(c.len(), m, n, c_strides);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: extents checked above; c does not alias a or b
                // because it is borrowed mutably.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm, exp_f32_slice);
impl_real!(f64, matrixmultiply::dgemm);

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err("Tensor::new", format!("shape {shape:?} needs {numel} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![F::zero(); shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: F) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("Tensor::from_rows", "ragged rows"));
        }
        Ok(Self { shape: vec![rows.len(), cols], data: rows.concat() })
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err("dims2", format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn row(&self, i: usize) -> &[F] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Element-type conversion (e.g. `f32` parameters into the `f64` path).
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| G::from_f64_lossy(v.as_f64())).collect() }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(&a, &b)| (a - b).abs().as_f64()).fold(0.0, f64::max)
    }

    /// Plain matrix product `self · other` (no graph recording).
    pub fn matmul(&self, other: &Self) -> Result<Self, TensorError> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = Self::zeros(&[m, n]);
        F::gemm(m, k, n, &self.data, (k as isize, 1), &other.data, (n as isize, 1), &mut out.data, (n as isize, 1), F::zero());
        Ok(out)
    }
}
