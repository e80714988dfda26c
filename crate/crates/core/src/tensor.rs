//! Dense n-dimensional arrays over `f32`/`f64` with the elementwise, matrix,
//! convolution-support and reduction operations the rest of the engine builds on.
//!
//! Storage is always row-major and contiguous; there are no stride tricks.
//! Reductions accumulate in ascending index order so results are bitwise
//! reproducible across runs.

use std::fmt;
use std::io::{self, Read, Write};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dtype mismatch: expected {expected:?}, found {found:?}")]
    DtypeMismatch { expected: Dtype, found: Dtype },
    #[error("invalid axis {axis} for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("invalid tensor encoding: {0}")]
    InvalidEncoding(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

/// Element types the engine supports. `f32` is the training dtype; `f64`
/// exists for the finite-difference reference paths.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + Copy + Default + fmt::Debug + Send + Sync + 'static
{
    const DTYPE: Dtype;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    const BYTE_WIDTH: usize;
    /// C = alpha*A·B + beta*C for row-major rank-2 slices.
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
    const BYTE_WIDTH: usize = 4;
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha,
                a.as_ptr(), k as isize, 1,
                b.as_ptr(), n as isize, 1,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
    const BYTE_WIDTH: usize = 8;
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha,
                a.as_ptr(), k as isize, 1,
                b.as_ptr(), n as isize, 1,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

/// Dense row-major tensor. `data.len()` always equals the product of `shape`;
/// rank 0 is a scalar with one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub fn num_elements(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if num_elements(&shape) != data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {:?} implies {} elements, buffer holds {}",
                shape,
                num_elements(&shape),
                data.len()
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::ShapeMismatch(format!("zero extent in {shape:?}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![T::zero(); num_elements(shape)] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; num_elements(shape)] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = num_elements(shape);
        Self { shape: shape.to_vec(), data: (0..n).map(|i| f(i)).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if num_elements(shape) != self.data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn relu(&self) -> Self {
        self.map(|x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn sigmoid(&self) -> Self {
        self.map(|x| T::one() / (T::one() + (-x).exp()))
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.binary(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.binary(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.binary(other, |a, b| a * b)
    }

    /// Broadcast binary op with the numpy rule: shapes are right-aligned and
    /// an extent of 1 stretches.
    pub fn binary(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Self { shape: self.shape.clone(), data });
        }
        let out_shape = broadcast_shape(&self.shape, &other.shape)?;
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let n = num_elements(&out_shape);
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; out_shape.len()];
        for _ in 0..n {
            let mut oa = 0;
            let mut ob = 0;
            for d in 0..out_shape.len() {
                oa += idx[d] * sa[d];
                ob += idx[d] * sb[d];
            }
            data.push(f(self.data[oa], other.data[ob]));
            for d in (0..out_shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Self { shape: out_shape, data })
    }

    /// Sum a gradient of `self`'s broadcast result back down to `target_shape`.
    pub fn unbroadcast(&self, target_shape: &[usize]) -> Result<Self> {
        if self.shape == target_shape {
            return Ok(self.clone());
        }
        let mut out = Tensor::zeros(target_shape);
        let st = broadcast_strides(target_shape, &self.shape);
        let mut idx = vec![0usize; self.shape.len()];
        for &v in &self.data {
            let mut ot = 0;
            for d in 0..self.shape.len() {
                ot += idx[d] * st[d];
            }
            out.data[ot] += v;
            for d in (0..self.shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < self.shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(out)
    }

    /// Rank-2 matrix product `[m,k]·[k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul expects rank-2 operands, got {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul inner extents differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let mut c = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), &self.data, &other.data, T::zero(), &mut c);
        Ok(Self { shape: vec![m, n], data: c })
    }

    /// `[m,k]` transposed for rank-2 tensors.
    pub fn transpose2(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(TensorError::ShapeMismatch(format!(
                "transpose2 expects rank 2, got {:?}",
                self.shape
            )));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self { shape: vec![n, m], data })
    }

    pub fn reduce(&self, op: ReduceOp, axes: &[usize], keep: bool) -> Result<Self> {
        for &a in axes {
            if a >= self.rank() {
                return Err(TensorError::InvalidAxis { axis: a, rank: self.rank() });
            }
        }
        let mut seen = vec![false; self.rank()];
        for &a in axes {
            if seen[a] {
                return Err(TensorError::InvalidAxis { axis: a, rank: self.rank() });
            }
            seen[a] = true;
        }
        if axes.is_empty() {
            return Ok(self.clone());
        }
        let kept_shape: Vec<usize> = self
            .shape
            .iter()
            .enumerate()
            .map(|(d, &e)| if seen[d] { 1 } else { e })
            .collect();
        let count: usize = axes.iter().map(|&a| self.shape[a]).product();
        let init = match op {
            ReduceOp::Max => T::neg_infinity(),
            _ => T::zero(),
        };
        let mut out = Tensor::full(&kept_shape, init);
        let so = broadcast_strides(&kept_shape, &self.shape);
        let mut idx = vec![0usize; self.rank()];
        // ascending index order keeps float accumulation deterministic
        for &v in &self.data {
            let mut oo = 0;
            for d in 0..self.rank() {
                oo += idx[d] * so[d];
            }
            match op {
                ReduceOp::Sum | ReduceOp::Mean => out.data[oo] += v,
                ReduceOp::Max => {
                    if v > out.data[oo] {
                        out.data[oo] = v;
                    }
                }
            }
            for d in (0..self.rank()).rev() {
                idx[d] += 1;
                if idx[d] < self.shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        if matches!(op, ReduceOp::Mean) {
            let c = T::from_f64(count as f64);
            for v in &mut out.data {
                *v /= c;
            }
        }
        if !keep {
            let final_shape: Vec<usize> = self
                .shape
                .iter()
                .enumerate()
                .filter(|(d, _)| !seen[*d])
                .map(|(_, &e)| e)
                .collect();
            out.shape = final_shape;
        }
        Ok(out)
    }

    pub fn sum_all(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Exp,
    Log,
}

/// Uniform entry point for the pointwise ops. Binary ops require `b`,
/// unary ops reject it.
pub fn elementwise<T: Scalar>(op: ElemOp, a: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    match (op, b) {
        (ElemOp::Add, Some(b)) => a.add(b),
        (ElemOp::Sub, Some(b)) => a.sub(b),
        (ElemOp::Mul, Some(b)) => a.mul(b),
        (ElemOp::Relu, None) => Ok(a.relu()),
        (ElemOp::Sigmoid, None) => Ok(a.sigmoid()),
        (ElemOp::Exp, None) => Ok(a.map(|x| x.exp())),
        (ElemOp::Log, None) => Ok(a.map(|x| x.ln())),
        (op, b) => Err(TensorError::ShapeMismatch(format!(
            "{op:?} given {} operands",
            if b.is_some() { 2 } else { 1 }
        ))),
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for d in 0..rank {
        let ea = if d + a.len() >= rank { a[d + a.len() - rank] } else { 1 };
        let eb = if d + b.len() >= rank { b[d + b.len() - rank] } else { 1 };
        out[d] = if ea == eb || eb == 1 {
            ea
        } else if ea == 1 {
            eb
        } else {
            return Err(TensorError::ShapeMismatch(format!(
                "cannot broadcast {a:?} with {b:?}"
            )));
        };
    }
    Ok(out)
}

/// Row-major strides of `shape` viewed as `out_shape`, with stride 0 where the
/// source extent is 1 (or missing on the left).
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for d in (0..shape.len()).rev() {
        let od = d + rank - shape.len();
        if shape[d] != 1 {
            strides[od] = acc;
        }
        acc *= shape[d];
    }
    strides
}

/// Output spatial extent of a convolution-style sliding window.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(TensorError::ShapeMismatch(format!(
            "kernel {kernel} exceeds padded extent {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Unfold `[N,Cin,H,W]` into per-image patch matrices `[N, Cin·kh·kw, Hout·Wout]`.
/// Out-of-bounds taps read zero.
pub fn im2col<T: Scalar>(
    input: &Tensor<T>,
    kernel: (usize, usize),
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    if input.rank() != 4 {
        return Err(TensorError::ShapeMismatch(format!(
            "im2col expects [N,C,H,W], got {:?}",
            input.shape()
        )));
    }
    let (n, c, h, w) = (input.shape[0], input.shape[1], input.shape[2], input.shape[3]);
    let (kh, kw) = kernel;
    let h_out = conv_out_extent(h, kh, stride, padding)?;
    let w_out = conv_out_extent(w, kw, stride, padding)?;
    let rows = c * kh * kw;
    let cols = h_out * w_out;
    let mut out = vec![T::zero(); n * rows * cols];
    let x = &input.data;
    for ni in 0..n {
        let in_base = ni * c * h * w;
        let out_base = ni * rows * cols;
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    for oy in 0..h_out {
                        let iy = (oy * stride + ki) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..w_out {
                            let ix = (ox * stride + kj) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out[out_base + row * cols + oy * w_out + ox] =
                                x[in_base + ci * h * w + iy as usize * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, rows, cols], out)
}

/// Adjoint of [`im2col`]: scatter-adds patch columns back into `[N,C,H,W]`.
pub fn col2im<T: Scalar>(
    cols_t: &Tensor<T>,
    input_shape: &[usize],
    kernel: (usize, usize),
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (kh, kw) = kernel;
    let h_out = conv_out_extent(h, kh, stride, padding)?;
    let w_out = conv_out_extent(w, kw, stride, padding)?;
    let rows = c * kh * kw;
    let ncols = h_out * w_out;
    if cols_t.shape() != [n, rows, ncols] {
        return Err(TensorError::ShapeMismatch(format!(
            "col2im expects {:?}, got {:?}",
            [n, rows, ncols],
            cols_t.shape()
        )));
    }
    let mut out = vec![T::zero(); n * c * h * w];
    let src = &cols_t.data;
    for ni in 0..n {
        let in_base = ni * c * h * w;
        let col_base = ni * rows * ncols;
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    for oy in 0..h_out {
                        let iy = (oy * stride + ki) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..w_out {
                            let ix = (ox * stride + kj) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out[in_base + ci * h * w + iy as usize * w + ix as usize] +=
                                src[col_base + row * ncols + oy * w_out + ox];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), out)
}

const ENC_F32: u8 = 1;
const ENC_F64: u8 = 2;

/// Binary tensor encoding: dtype byte, u32 rank, u64 extents, then the raw
/// little-endian IEEE-754 buffer. Used by the checkpoint container.
pub fn write_tensor<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> io::Result<()> {
    let tag = match T::DTYPE {
        Dtype::F32 => ENC_F32,
        Dtype::F64 => ENC_F64,
    };
    w.write_all(&[tag])?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * T::BYTE_WIDTH);
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)
}

pub fn read_tensor<T: Scalar, R: Read>(r: &mut R) -> std::result::Result<Tensor<T>, TensorError> {
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag).map_err(|e| TensorError::InvalidEncoding(e.to_string()))?;
    let found = match tag[0] {
        ENC_F32 => Dtype::F32,
        ENC_F64 => Dtype::F64,
        other => return Err(TensorError::InvalidEncoding(format!("unknown dtype tag {other}"))),
    };
    if found != T::DTYPE {
        return Err(TensorError::DtypeMismatch { expected: T::DTYPE, found });
    }
    let mut rank_buf = [0u8; 4];
    r.read_exact(&mut rank_buf).map_err(|e| TensorError::InvalidEncoding(e.to_string()))?;
    let rank = u32::from_le_bytes(rank_buf) as usize;
    if rank > 16 {
        return Err(TensorError::InvalidEncoding(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut e = [0u8; 8];
        r.read_exact(&mut e).map_err(|er| TensorError::InvalidEncoding(er.to_string()))?;
        shape.push(u64::from_le_bytes(e) as usize);
    }
    let n = num_elements(&shape);
    let mut buf = vec![0u8; n * T::BYTE_WIDTH];
    r.read_exact(&mut buf).map_err(|e| TensorError::InvalidEncoding(e.to_string()))?;
    let data = buf.chunks_exact(T::BYTE_WIDTH).map(T::read_le).collect();
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_basic() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn add_scalar_broadcast() {
        let x = t(&[2], &[1.0, 2.0]);
        let s = Tensor::scalar(3.0);
        assert_eq!(x.add(&s).unwrap().data(), &[4.0, 5.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        assert_eq!(Tensor::scalar(0.0f64).sigmoid().item(), 0.5);
    }

    #[test]
    fn elementwise_dispatch_rejects_missing_operand() {
        let x = t(&[2], &[1.0, 2.0]);
        assert!(elementwise(ElemOp::Add, &x, None).is_err());
        assert!(elementwise(ElemOp::Relu, &x, Some(&x)).is_err());
    }

    #[test]
    fn broadcast_failure() {
        let a = t(&[3], &[1.0, 2.0, 3.0]);
        let b = t(&[2], &[1.0, 2.0]);
        assert!(matches!(a.add(&b), Err(TensorError::ShapeMismatch(_))));
    }

    #[test]
    fn matmul_identity() {
        let i = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(i.matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_hand_dot() {
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[2, 1], &[3.0, 4.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.item(), 11.0);
    }

    // independent oracle: naive triple loop
    fn matmul_naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out.data_mut()[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut state = 123456789u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let a = Tensor::from_fn(&[3, 4], |_| next());
        let b = Tensor::from_fn(&[4, 5], |_| next());
        let fast = a.matmul(&b).unwrap();
        let slow = matmul_naive(&a, &b);
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0));
        }
    }

    #[test]
    fn matmul_shape_error() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn im2col_preserves_resolution_with_padding_one() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 3, 3], |i| i as f64);
        let cols = im2col(&x, (3, 3), 1, 1).unwrap();
        assert_eq!(cols.shape(), &[1, 9, 9]);
    }

    #[test]
    fn im2col_stride_two() {
        let x = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        let cols = im2col(&x, (3, 3), 2, 1).unwrap();
        // floor((4+2-3)/2)+1 = 2 per axis
        assert_eq!(cols.shape(), &[1, 9, 4]);
    }

    #[test]
    fn im2col_rejects_empty_output() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        assert!(im2col(&x, (5, 5), 1, 0).is_err());
    }

    #[test]
    fn col2im_round_trip_non_overlapping() {
        // stride == kernel, padding 0: patches tile the input exactly
        let x = Tensor::<f64>::from_fn(&[2, 3, 4, 4], |i| i as f64 * 0.5 - 3.0);
        let cols = im2col(&x, (2, 2), 2, 0).unwrap();
        let back = col2im(&cols, x.shape(), (2, 2), 2, 0).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn reduce_mean_all() {
        let x = t(&[2, 2], &[1.0, 3.0, 5.0, 7.0]);
        let m = x.reduce(ReduceOp::Mean, &[0, 1], false).unwrap();
        assert_eq!(m.shape(), &[] as &[usize]);
        assert_eq!(m.item(), 4.0);
    }

    #[test]
    fn reduce_empty_axes_is_copy() {
        let x = t(&[2, 2], &[1.0, 3.0, 5.0, 7.0]);
        assert_eq!(x.reduce(ReduceOp::Sum, &[], false).unwrap(), x);
    }

    #[test]
    fn reduce_spatial_mean_matches_loop_oracle() {
        let x = Tensor::<f64>::from_fn(&[2, 4, 5, 5], |i| (i as f64).sin());
        let got = x.reduce(ReduceOp::Mean, &[2, 3], false).unwrap();
        assert_eq!(got.shape(), &[2, 4]);
        for n in 0..2 {
            for c in 0..4 {
                let mut acc = 0.0;
                for h in 0..5 {
                    for w in 0..5 {
                        acc += x.data()[((n * 4 + c) * 5 + h) * 5 + w];
                    }
                }
                let want = acc / 25.0;
                let diff: f64 = got.data()[n * 4 + c] - want;
                assert!(diff.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reduce_invalid_axis() {
        let x = t(&[2], &[1.0, 2.0]);
        assert!(matches!(
            x.reduce(ReduceOp::Sum, &[3], false),
            Err(TensorError::InvalidAxis { .. })
        ));
    }

    #[test]
    fn reduce_max_keepdims() {
        let x = t(&[2, 3], &[1.0, 5.0, 2.0, -1.0, 0.0, 4.0]);
        let m = x.reduce(ReduceOp::Max, &[1], true).unwrap();
        assert_eq!(m.shape(), &[2, 1]);
        assert_eq!(m.data(), &[5.0, 4.0]);
    }

    #[test]
    fn serialization_round_trip_bitexact() {
        let x = Tensor::<f32>::from_fn(&[3, 2], |i| (i as f32).exp());
        let mut buf = Vec::new();
        write_tensor(&mut buf, &x).unwrap();
        let back: Tensor<f32> = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn serialization_dtype_mismatch() {
        let x = Tensor::<f32>::zeros(&[2]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &x).unwrap();
        let err = read_tensor::<f64, _>(&mut buf.as_slice()).unwrap_err();
        assert!(matches!(err, TensorError::DtypeMismatch { .. }));
    }

    #[test]
    fn unbroadcast_sums_stretched_axes() {
        let g = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = g.unbroadcast(&[1, 3]).unwrap();
        assert_eq!(r.data(), &[5.0, 7.0, 9.0]);
        let r2 = g.unbroadcast(&[2, 1]).unwrap();
        assert_eq!(r2.data(), &[6.0, 15.0]);
    }
}
