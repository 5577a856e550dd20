use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};

/// Element type of network tensors. Training runs in `f32`; gradient
/// checks run the same code in `f64`.
pub trait Real:
    Copy
    + Send
    + Sync
    + Debug
    + Default
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn max(self, o: Self) -> Self {
        if self > o {
            self
        } else {
            o
        }
    }
    fn min(self, o: Self) -> Self {
        if self < o {
            self
        } else {
            o
        }
    }
    /// `c = op(a) * op(b) + beta * c` for row-major matrices, where `op(a)`
    /// is m x k and `op(b)` is k x n.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], trans_a: bool, b: &[Self], trans_b: bool, beta: Self, c: &mut [Self]);
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn gemm(m: usize, k: usize, n: usize, a: &[Self], trans_a: bool, b: &[Self], trans_b: bool, beta: Self, c: &mut [Self]) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
                // SAFETY: bounds checked above; strides describe the stated
                // row-major layouts.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
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
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense NHWC tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Tensor4 {
            n,
            h,
            w,
            c,
            data: vec![T::ZERO; n * h * w * c],
        }
    }

    pub fn from_vec(n: usize, h: usize, w: usize, c: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * h * w * c {
            return Err(Error::ShapeMismatch(format!(
                "{} values for shape {n}x{h}x{w}x{c}",
                data.len()
            )));
        }
        Ok(Tensor4 { n, h, w, c, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.h, self.w, self.c]
    }

    pub fn same_shape(&self, o: &Self) -> bool {
        self.shape() == o.shape()
    }

    #[inline]
    pub fn idx(&self, n: usize, y: usize, x: usize, c: usize) -> usize {
        ((n * self.h + y) * self.w + x) * self.c + c
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize, c: usize) -> T {
        self.data[self.idx(n, y, x, c)]
    }

    pub fn pixels(&self) -> usize {
        self.n * self.h * self.w
    }

    /// Channels `[c0, c0 + len)` as a new tensor.
    pub fn slice_channels(&self, c0: usize, len: usize) -> Self {
        let mut out = Tensor4::zeros(self.n, self.h, self.w, len);
        for (dst, src) in out.data.chunks_mut(len).zip(self.data.chunks(self.c)) {
            dst.copy_from_slice(&src[c0..c0 + len]);
        }
        out
    }

    /// Concatenation along channels.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::ShapeMismatch("nothing to concatenate".into()))?;
        let c: usize = parts.iter().map(|p| p.c).sum();
        let mut out = Tensor4::zeros(first.n, first.h, first.w, c);
        let mut c0 = 0;
        for p in parts {
            if (p.n, p.h, p.w) != (first.n, first.h, first.w) {
                return Err(Error::ShapeMismatch("concat of different spatial shapes".into()));
            }
            for (dst, src) in out.data.chunks_mut(c).zip(p.data.chunks(p.c)) {
                dst[c0..c0 + p.c].copy_from_slice(src);
            }
            c0 += p.c;
        }
        Ok(out)
    }

    /// Concatenation along the batch axis.
    pub fn concat_batch(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::ShapeMismatch("nothing to concatenate".into()))?;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if (p.h, p.w, p.c) != (first.h, first.w, first.c) {
                return Err(Error::ShapeMismatch("batch concat of different shapes".into()));
            }
            data.extend_from_slice(&p.data);
            n += p.n;
        }
        Ok(Tensor4 { n, h: first.h, w: first.w, c: first.c, data })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            n: self.n,
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Trainable array with gradient and momentum buffers of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub velocity: Vec<T>,
    /// Extra learning-rate factor applied by the optimizer.
    pub lr_mult: f64,
}

impl<T: Real> Param<T> {
    pub fn new(value: Vec<T>) -> Self {
        let n = value.len();
        Param {
            value,
            grad: vec![T::ZERO; n],
            velocity: vec![T::ZERO; n],
            lr_mult: 1.0,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::ZERO);
    }
}
