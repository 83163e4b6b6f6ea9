//! Dense row-major tensors and the linear-algebra kernels everything else
//! is built on.
//!
//! Every reduction in this module runs in a fixed sequential order, so a
//! result never depends on how many worker threads were available. Work is
//! only ever split across independent output rows.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::Float;
use rayon::prelude::*;

use crate::error::{PsgrError, Result};

/// Highest rank a tensor may have.
pub const MAX_RANK: usize = 4;

/// Below this many multiply-adds a matmul stays on the calling thread.
const PAR_MATMUL_THRESHOLD: usize = 1 << 16;

/// Element type tag, shared with the on-disk tensor format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::U8 => "u8",
        }
    }
}

/// Floating-point element types a [`Tensor`] can hold.
pub trait Scalar:
    Float + Default + Debug + Display + LowerExp + Send + Sync + Sum + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    /// Raw bit pattern widened to 64 bits, for bitwise comparisons.
    fn bits(self) -> u64;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }

    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(b)
    }

    fn bits(self) -> u64 {
        self.to_bits()
    }
}

#[inline]
pub(crate) fn cst<T: Scalar>(v: f64) -> T {
    T::from_f64(v)
}

/// Logistic function with the input clamped to ±30 before exponentiation.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    let lim = cst::<T>(30.0);
    let x = x.max(-lim).min(lim);
    T::one() / (T::one() + (-x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Relu,
    Sigmoid,
    Scale(f64),
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} elements]", self.shape, self.data.len())
        }
    }
}

fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(PsgrError::NonFinite { op, index }),
        None => Ok(()),
    }
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, rejecting element-count mismatches, rank above
    /// [`MAX_RANK`] and non-finite values.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::checked("Tensor::new", shape.to_vec(), data)
    }

    pub(crate) fn checked(op: &'static str, shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(PsgrError::shape(
                op,
                format!("rank {} exceeds {}", shape.len(), MAX_RANK),
            ));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(PsgrError::shape(
                op,
                format!("shape {:?} needs {} elements, got {}", shape, n, data.len()),
            ));
        }
        check_finite(op, &data)?;
        Ok(Self { shape, data })
    }

    /// Construction for kernels whose output is finite by construction
    /// (copies, permutations, zero fills).
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![], vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = T::one();
        }
        Self::from_parts(vec![n, n], data)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::checked("Tensor::from_fn", shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
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

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(PsgrError::shape(
                "dims2",
                format!("expected a matrix, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let n = self.shape[self.shape.len() - 1];
        &self.data[i * n..(i + 1) * n]
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Self> {
        let n: usize = new_shape.iter().product();
        if n != self.data.len() {
            return Err(PsgrError::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, new_shape),
            ));
        }
        if new_shape.len() > MAX_RANK {
            return Err(PsgrError::shape("reshape", "rank exceeds 4"));
        }
        Ok(Self::from_parts(new_shape.to_vec(), self.data.clone()))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(PsgrError::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape, other.shape),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_acc(&self.data, &other.data, &mut out, m, k, n);
        Self::checked("matmul", vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2()?;
        Ok(Self::from_parts(vec![n, m], transpose_raw(&self.data, m, n)))
    }

    pub fn elementwise(&self, op: BinaryOp, other: &Self) -> Result<Self> {
        let f = |a: T, b: T| match op {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
        };
        let data: Vec<T> = if other.shape == self.shape {
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect()
        } else if other.data.len() == 1 && other.ndim() == 0 {
            let b = other.data[0];
            self.data.iter().map(|&a| f(a, b)).collect()
        } else {
            return Err(PsgrError::shape(
                "elementwise",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        };
        Self::checked("elementwise", self.shape.clone(), data)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.elementwise(BinaryOp::Add, other)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.elementwise(BinaryOp::Sub, other)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.elementwise(BinaryOp::Mul, other)
    }

    pub fn unary(&self, op: UnaryOp) -> Result<Self> {
        let data: Vec<T> = match op {
            UnaryOp::Relu => self
                .data
                .iter()
                .map(|&v| if v > T::zero() { v } else { T::zero() })
                .collect(),
            UnaryOp::Sigmoid => self.data.iter().map(|&v| sigmoid(v)).collect(),
            UnaryOp::Scale(a) => {
                let a = T::from_f64(a);
                self.data.iter().map(|&v| v * a).collect()
            }
        };
        Self::checked("unary", self.shape.clone(), data)
    }

    pub fn relu(&self) -> Result<Self> {
        self.unary(UnaryOp::Relu)
    }

    pub fn sigmoid(&self) -> Result<Self> {
        self.unary(UnaryOp::Sigmoid)
    }

    pub fn scale(&self, alpha: f64) -> Result<Self> {
        self.unary(UnaryOp::Scale(alpha))
    }

    /// Left-to-right sum of all elements.
    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn cast<U: Scalar>(&self) -> Result<Tensor<U>> {
        Tensor::checked(
            "cast",
            self.shape.clone(),
            self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        )
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// True when shapes match and every element has the same bit pattern.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.bits() == b.bits())
    }
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
///
/// Each output element accumulates its `k` products in ascending order of
/// the inner index. Rows of `c` may be produced on different threads.
pub(crate) fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 || m == 0 {
        return;
    }
    let block = |(bi, c_rows): (usize, &mut [T])| {
        let r0 = bi * GEMM_ROWS;
        let rows = c_rows.len() / n;
        let a_rows = &a[r0 * k..(r0 + rows) * k];
        if rows == GEMM_ROWS {
            gemm_rows_blocked(a_rows, b, c_rows, k, n);
        } else {
            gemm_rows_axpy(a_rows, b, c_rows, k, n);
        }
    };
    if m * k * n >= PAR_MATMUL_THRESHOLD && m > GEMM_ROWS {
        c.par_chunks_mut(GEMM_ROWS * n).enumerate().for_each(block);
    } else {
        c.chunks_mut(GEMM_ROWS * n).enumerate().for_each(block);
    }
}

const GEMM_ROWS: usize = 4;
const GEMM_COLS: usize = 16;

fn gemm_rows_axpy<T: Scalar>(a: &[T], b: &[T], c: &mut [T], k: usize, n: usize) {
    for (c_row, a_row) in c.chunks_mut(n).zip(a.chunks(k)) {
        for (t, &av) in a_row.iter().enumerate() {
            for (cv, &bv) in c_row.iter_mut().zip(&b[t * n..(t + 1) * n]) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// Four rows at a time with a 4×16 register tile; per element the products
/// are still added in ascending inner-index order.
fn gemm_rows_blocked<T: Scalar>(a: &[T], b: &[T], c: &mut [T], k: usize, n: usize) {
    let full = n - n % GEMM_COLS;
    for j0 in (0..full).step_by(GEMM_COLS) {
        let mut acc = [[T::zero(); GEMM_COLS]; GEMM_ROWS];
        for (r, acc_r) in acc.iter_mut().enumerate() {
            acc_r.copy_from_slice(&c[r * n + j0..r * n + j0 + GEMM_COLS]);
        }
        for t in 0..k {
            let bt: &[T; GEMM_COLS] = b[t * n + j0..t * n + j0 + GEMM_COLS].try_into().expect("tile");
            for (r, acc_r) in acc.iter_mut().enumerate() {
                let av = a[r * k + t];
                for (x, &bv) in acc_r.iter_mut().zip(bt) {
                    *x = *x + av * bv;
                }
            }
        }
        for (r, acc_r) in acc.iter().enumerate() {
            c[r * n + j0..r * n + j0 + GEMM_COLS].copy_from_slice(acc_r);
        }
    }
    if full < n {
        for r in 0..GEMM_ROWS {
            for t in 0..k {
                let av = a[r * k + t];
                for j in full..n {
                    c[r * n + j] = c[r * n + j] + av * b[t * n + j];
                }
            }
        }
    }
}

pub(crate) fn transpose_raw<T: Copy + Default>(data: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::default(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = data[i * n + j];
        }
    }
    out
}
