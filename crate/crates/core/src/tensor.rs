//! Dense row-major tensors in 64-bit working precision, emulated narrow
//! storage formats, and the Frobenius-norm relative error metric.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("out of bounds: {0}")]
    OutOfBounds(String),
    #[error("invalid shape {0:?}: extents must be >= 1 and match the data length")]
    InvalidShape(Vec<usize>),
}

/// Emulated floating-point storage formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FloatFormat {
    Fp32,
    Bf16,
    Fp8E4M3,
}

impl FloatFormat {
    /// Significand bits including the implicit leading one.
    pub const fn precision_bits(self) -> i32 {
        match self {
            FloatFormat::Fp32 => 24,
            FloatFormat::Bf16 => 8,
            FloatFormat::Fp8E4M3 => 4,
        }
    }

    /// Smallest normal exponent.
    pub const fn min_exponent(self) -> i32 {
        match self {
            FloatFormat::Fp32 | FloatFormat::Bf16 => -126,
            FloatFormat::Fp8E4M3 => -6,
        }
    }

    pub fn max_finite(self) -> f64 {
        match self {
            FloatFormat::Fp32 => f32::MAX as f64,
            // (2 - 2^-7) * 2^127
            FloatFormat::Bf16 => (2.0 - 2f64.powi(-7)) * 2f64.powi(127),
            // E4M3 (OCP "fn" variant): 1.75 * 2^8
            FloatFormat::Fp8E4M3 => 448.0,
        }
    }

    /// Unit roundoff: 2^-p for a p-bit significand.
    pub fn machine_epsilon(self) -> f64 {
        2f64.powi(-self.precision_bits())
    }

    pub fn name(self) -> &'static str {
        match self {
            FloatFormat::Fp32 => "fp32",
            FloatFormat::Bf16 => "bf16",
            FloatFormat::Fp8E4M3 => "fp8e4m3",
        }
    }
}

impl fmt::Display for FloatFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Round a working-precision value to the nearest value of `format`
/// (ties to even), clamping out-of-range magnitudes to the largest finite value.
pub fn quantize_scalar(x: f64, format: FloatFormat) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    let exp = exponent_of(x).max(format.min_exponent());
    let ulp_exp = exp - format.precision_bits() + 1;
    let scaled = scale_pow2(x, -ulp_exp);
    let rounded = scale_pow2(scaled.round_ties_even(), ulp_exp);
    let max = format.max_finite();
    rounded.clamp(-max, max)
}

/// floor(log2(|x|)) for finite nonzero x, read off the IEEE-754 bits.
fn exponent_of(x: f64) -> i32 {
    let bits = x.abs().to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    if biased == 0 {
        // f64 subnormal
        let mantissa = bits & ((1u64 << 52) - 1);
        -1022 - (mantissa.leading_zeros() as i32 - 12) - 1
    } else {
        biased - 1023
    }
}

/// Exact multiplication by 2^e, split so intermediate factors stay finite.
fn scale_pow2(x: f64, e: i32) -> f64 {
    let mut x = x;
    let mut e = e;
    while e > 1000 {
        x *= 2f64.powi(1000);
        e -= 1000;
    }
    while e < -1000 {
        x *= 2f64.powi(-1000);
        e += 1000;
    }
    x * 2f64.powi(e)
}

/// Which formats are applied after each primitive.
///
/// `Exact` keeps everything in working precision and is used for
/// finite-difference checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrecisionPolicy {
    Exact,
    Fp32,
    Bf16,
    Bf16Fp8,
}

impl PrecisionPolicy {
    pub fn storage(self) -> Option<FloatFormat> {
        match self {
            PrecisionPolicy::Exact => None,
            PrecisionPolicy::Fp32 => Some(FloatFormat::Fp32),
            PrecisionPolicy::Bf16 | PrecisionPolicy::Bf16Fp8 => Some(FloatFormat::Bf16),
        }
    }

    pub fn matmul_inputs(self) -> Option<FloatFormat> {
        match self {
            PrecisionPolicy::Exact => None,
            PrecisionPolicy::Fp32 => Some(FloatFormat::Fp32),
            PrecisionPolicy::Bf16 => Some(FloatFormat::Bf16),
            PrecisionPolicy::Bf16Fp8 => Some(FloatFormat::Fp8E4M3),
        }
    }

    /// Format whose epsilon sets tolerance floors; working precision maps to FP32's.
    pub fn reference_format(self) -> FloatFormat {
        self.storage().unwrap_or(FloatFormat::Fp32)
    }

    pub fn store(self, t: Tensor) -> Tensor {
        match self.storage() {
            Some(f) => t.quantize(f),
            None => t,
        }
    }

    pub fn store_scalar(self, x: f64) -> f64 {
        match self.storage() {
            Some(f) => quantize_scalar(x, f),
            None => x,
        }
    }

    pub fn matmul_operand(self, t: &Tensor) -> Tensor {
        match self.matmul_inputs() {
            Some(f) => t.quantize(f),
            None => t.clone(),
        }
    }
}

/// Per-dimension half-open index ranges.
pub type Ranges = [(usize, usize)];

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(TensorError::InvalidShape(shape));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::InvalidShape(shape));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&e| e > 0), "invalid shape {shape:?}");
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = value);
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::InvalidShape(vec![rows.len(), cols]));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("non-empty vector")
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    fn offset(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.shape).fold(0, |acc, (&i, &e)| acc * e + i)
    }

    fn check_same_shape(&self, other: &Tensor) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn quantize(&self, format: FloatFormat) -> Tensor {
        self.map(|x| quantize_scalar(x, format))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
        self.check_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<(), TensorError> {
        self.check_same_shape(other)?;
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// `a @ b` for 2-D operands, accumulating over the inner index in ascending order.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.ndim() != 2 || other.ndim() != 2 || self.cols() != other.rows() {
            return Err(TensorError::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (n, k, m) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let mut acc = 0.0;
                for (p, &av) in a.iter().enumerate() {
                    acc += av * other.data[p * m + j];
                }
                out[i * m + j] = acc;
            }
        }
        Ok(Tensor { shape: vec![n, m], data: out })
    }

    pub fn transpose(&self) -> Tensor {
        assert_eq!(self.ndim(), 2, "transpose expects a matrix");
        let (r, c) = (self.rows(), self.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor { shape: vec![c, r], data }
    }

    /// General axis permutation; `axes[k]` is the source axis of output axis k.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor, TensorError> {
        let mut seen = vec![false; self.ndim()];
        if axes.len() != self.ndim() || axes.iter().any(|&a| a >= seen.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::OutOfBounds(format!("bad permutation {axes:?}")));
        }
        let new_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let mut out = Tensor::zeros(&new_shape);
        let mut idx = vec![0usize; self.ndim()];
        let mut src = vec![0usize; self.ndim()];
        for flat in 0..self.len() {
            unravel(flat, &new_shape, &mut idx);
            for (k, &a) in axes.iter().enumerate() {
                src[a] = idx[k];
            }
            out.data[flat] = self.get(&src);
        }
        Ok(out)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    fn check_ranges(&self, ranges: &Ranges) -> Result<(), TensorError> {
        if ranges.len() != self.ndim()
            || ranges.iter().zip(&self.shape).any(|(&(s, e), &ext)| s >= e || e > ext)
        {
            return Err(TensorError::OutOfBounds(format!(
                "box {ranges:?} not within shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    pub fn slice_read(&self, ranges: &Ranges) -> Result<Tensor, TensorError> {
        self.check_ranges(ranges)?;
        let shape: Vec<usize> = ranges.iter().map(|&(s, e)| e - s).collect();
        let mut out = Tensor::zeros(&shape);
        let mut idx = vec![0usize; shape.len()];
        let mut src = vec![0usize; shape.len()];
        for flat in 0..out.len() {
            unravel(flat, &shape, &mut idx);
            for d in 0..idx.len() {
                src[d] = idx[d] + ranges[d].0;
            }
            out.data[flat] = self.get(&src);
        }
        Ok(out)
    }

    pub fn slice_write(&mut self, ranges: &Ranges, src: &Tensor) -> Result<(), TensorError> {
        self.check_ranges(ranges)?;
        let shape: Vec<usize> = ranges.iter().map(|&(s, e)| e - s).collect();
        if shape != src.shape {
            return Err(TensorError::ShapeMismatch { left: shape, right: src.shape.clone() });
        }
        let mut idx = vec![0usize; shape.len()];
        let mut dst = vec![0usize; shape.len()];
        for flat in 0..src.len() {
            unravel(flat, &shape, &mut idx);
            for d in 0..idx.len() {
                dst[d] = idx[d] + ranges[d].0;
            }
            let off = self.offset(&dst);
            self.data[off] = src.data[flat];
        }
        Ok(())
    }

    /// Rows `[start, stop)` of a tensor whose leading axis indexes rows.
    pub fn rows_range(&self, start: usize, stop: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = stop - start;
        Tensor { shape, data: self.data[start * inner..stop * inner].to_vec() }
    }

    /// Concatenate along the leading axis.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor, TensorError> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidShape(vec![]))?;
        let mut shape = first.shape.clone();
        shape[0] = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(TensorError::ShapeMismatch { left: first.shape.clone(), right: p.shape.clone() });
            }
            shape[0] += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Tensor::new(shape, data)
    }

    /// Gather rows by index.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Tensor { shape: vec![rows.len(), c], data }
    }

    /// Concatenate 2-D tensors along columns.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor, TensorError> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidShape(vec![]))?;
        let rows = first.rows();
        if parts.iter().any(|p| p.ndim() != 2 || p.rows() != rows) {
            return Err(TensorError::ShapeMismatch { left: first.shape.clone(), right: vec![] });
        }
        let cols: usize = parts.iter().map(Tensor::cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Tensor::new(vec![rows, cols], data)
    }

    /// Columns `[start, stop)` of a matrix.
    pub fn cols_range(&self, start: usize, stop: usize) -> Tensor {
        let mut data = Vec::with_capacity(self.rows() * (stop - start));
        for r in 0..self.rows() {
            data.extend_from_slice(&self.row(r)[start..stop]);
        }
        Tensor { shape: vec![self.rows(), stop - start], data }
    }
}

pub(crate) fn unravel(mut flat: usize, shape: &[usize], out: &mut [usize]) {
    for d in (0..shape.len()).rev() {
        out[d] = flat % shape[d];
        flat /= shape[d];
    }
}

pub fn frobenius_norm(t: &Tensor) -> f64 {
    t.data.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / ‖a‖`, with `a` the reference. A zero reference yields 0 when the
/// tensors agree and `+∞` otherwise.
pub fn rel_err(a: &Tensor, b: &Tensor) -> Result<f64, TensorError> {
    let diff = frobenius_norm(&a.sub(b)?);
    let base = frobenius_norm(a);
    Ok(if base == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        diff / base
    })
}
