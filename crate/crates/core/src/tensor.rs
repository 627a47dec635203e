//! Dense row-major tensors and matrices.
//!
//! Images use a channel-last layout: `[d, h, w, c]` for volumes and
//! `[h, w, c]` for planes. Batched activations inside the network carry an
//! extra leading axis, `[n, d, h, w, c]`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{shape_err, Error, Result};

/// Element type tag used by the on-disk container.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Scalar element: `f32` for training, `f64` for verification runs.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Default + Send + Sync + Debug + Display + Sum + 'static
{
    const DTYPE: DType;

    /// `c <- alpha * op(a) * op(b) + beta * c` on raw strided storage.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing regions of the
    /// stated extents.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float to f64")
    }
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Row-major GEMM on contiguous buffers: `c <- alpha * op(a) * op(b) + beta * c`
/// where `op(a)` is `[m, k]` and `op(b)` is `[k, n]`. With `trans_a` the
/// buffer `a` holds a `[k, m]` matrix; likewise for `trans_b`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Element>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs buffer");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer");
    assert_eq!(c.len(), m * n, "gemm: output buffer");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: extents were checked against the buffer lengths above and `c`
    // is a unique borrow distinct from `a` and `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dense N-d array with a row-major buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {:?} holds {} elements but buffer has {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
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

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Channel count, i.e. the extent of the last axis.
    pub fn channels(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data)
    }

    /// Row-major linear index of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &s)| {
            debug_assert!(i < s);
            acc * s + i
        })
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], v: T) {
        let o = self.offset(index);
        self.data[o] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_scalar(&self, s: T) -> Self {
        self.map(|v| v + s)
    }

    pub fn apply(&self, op: Elementwise<T>, rhs: Operand<'_, T>) -> Result<Self> {
        match (op, rhs) {
            (Elementwise::Scale(s), _) => Ok(self.scale(s)),
            (Elementwise::Add, Operand::Tensor(b)) => self.add(b),
            (Elementwise::Sub, Operand::Tensor(b)) => self.sub(b),
            (Elementwise::Mul, Operand::Tensor(b)) => self.mul(b),
            (Elementwise::Add, Operand::Scalar(s)) => Ok(self.add_scalar(s)),
            (Elementwise::Sub, Operand::Scalar(s)) => Ok(self.add_scalar(-s)),
            (Elementwise::Mul, Operand::Scalar(s)) => Ok(self.scale(s)),
        }
    }

    /// In-place `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Inner product accumulated in `f64`.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a.as_f64() * b.as_f64()).sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    /// Population statistics over all elements.
    pub fn reduce_stats(&self) -> Result<Stats> {
        Stats::of(&self.data)
    }

    /// Linear-interpolated percentile, `0 <= p <= 100`.
    pub fn percentile(&self, p: f64) -> Result<f64> {
        let mut sorted: Vec<f64> = self.data.iter().map(|v| v.as_f64()).collect();
        if sorted.is_empty() {
            return Err(Error::EmptyInput);
        }
        sorted.sort_by(|a, b| a.total_cmp(b));
        percentile_sorted(&sorted, p)
    }

    /// Unfold along the channel axis: `[..spatial, c]` becomes `[c, prod(spatial)]`,
    /// column `j` holding the channel vector at spatial location `j`.
    pub fn unfold_channel(&self) -> Result<Matrix<T>> {
        if self.shape.len() < 2 {
            return shape_err(format!("unfold needs at least 2 axes, got {:?}", self.shape));
        }
        let c = self.channels();
        let n = self.data.len() / c;
        let mut data = vec![T::zero(); c * n];
        for j in 0..n {
            for ch in 0..c {
                data[ch * n + j] = self.data[j * c + ch];
            }
        }
        Ok(Matrix { rows: c, cols: n, data })
    }

    /// Inverse of [`Tensor::unfold_channel`].
    pub fn fold_channel(m: &Matrix<T>, spatial: &[usize]) -> Result<Self> {
        let n: usize = spatial.iter().product();
        if n != m.cols {
            return shape_err(format!(
                "spatial shape {:?} has {} locations but matrix has {} columns",
                spatial, n, m.cols
            ));
        }
        let c = m.rows;
        let mut data = vec![T::zero(); c * n];
        for ch in 0..c {
            for j in 0..n {
                data[j * c + ch] = m.data[ch * n + j];
            }
        }
        let mut shape = spatial.to_vec();
        shape.push(c);
        Ok(Tensor { shape, data })
    }
}

/// Binary / scalar elementwise operator selector.
#[derive(Clone, Copy, Debug)]
pub enum Elementwise<T> {
    Add,
    Sub,
    Mul,
    Scale(T),
}

#[derive(Clone, Copy, Debug)]
pub enum Operand<'a, T> {
    Tensor(&'a Tensor<T>),
    Scalar(T),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub var: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn of<T: Element>(values: &[T]) -> Result<Stats> {
        if values.is_empty() {
            return Err(Error::EmptyInput);
        }
        let n = values.len() as f64;
        let mean = values.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let var = values.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
        let (min, max) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            let v = v.as_f64();
            (lo.min(v), hi.max(v))
        });
        Ok(Stats { mean, var, min, max })
    }
}

pub(crate) fn percentile_sorted(sorted: &[f64], p: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::InvalidConfig(format!("percentile {p} outside [0, 100]")));
    }
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Element> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows * cols != data.len() {
            return shape_err(format!("{rows}x{cols} matrix with {} elements", data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> Self {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn scale(&self, s: T) -> Self {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| v * s).collect() }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul(self, other)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

pub fn matmul<T: Element>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return shape_err(format!(
            "matmul inner extents {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm(false, false, a.rows, a.cols, b.cols, T::one(), &a.data, &b.data, T::zero(), &mut out.data);
    Ok(out)
}
