//! Dense row-major tensors over a scalar type shared by the 32-bit training
//! path and the 64-bit verification path.

use std::fmt::{Debug, Display};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Scalar abstraction: everything numeric in the crate is written once,
/// generically, and instantiated at `f32` (training) or `f64` (verification).
pub trait Real:
    Copy
    + PartialOrd
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tanh(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn min(self, other: Self) -> Self;
    fn is_finite(self) -> bool;

    /// exp() tuned for throughput on hot scan/compositing loops. For f64 it
    /// is the libm call; for f32 a branch-free polynomial within ~3 ulp,
    /// which auto-vectorizes where libm cannot.
    fn exp_fast(self) -> Self;

    /// `c[m x n] = alpha * a[m x k] . b[k x n] + beta * c`, with explicit
    /// row/col strides so transposed operands need no copies.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
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
}

/// Branch-free expf: x = n*ln2 + r with n rounded to nearest even via the
/// 1.5*2^23 magic constant, e^r from a degree-6 minimax polynomial, and the
/// 2^n scale applied through the exponent bits. Within ~3 ulp over the
/// normal range; inputs are clamped to [-87.3, 88] so the result is always
/// finite and positive. Non-finite inputs are not meaningful here.
#[inline(always)]
fn exp_fast_f32(x: f32) -> f32 {
    const C1: f32 = 0.693_359_375;
    const C2: f32 = -2.121_944_4e-4;
    const MAGIC: f32 = 12_582_912.0;
    let x = x.min(88.0).max(-87.3);
    let n = (x * std::f32::consts::LOG2_E + MAGIC) - MAGIC;
    let r = (x - n * C1) - n * C2;
    let p = 1.987_569_2e-4f32;
    let p = p * r + 1.398_2e-3;
    let p = p * r + 8.333_452e-3;
    let p = p * r + 4.166_579_6e-2;
    let p = p * r + 1.666_666_5e-1;
    let p = p * r + 5.000_000_3e-1;
    let poly = p * r * r + r + 1.0;
    poly * f32::from_bits((((n as i32) + 127) << 23) as u32)
}

macro_rules! impl_real {
    ($t:ty, $gemm:path, $exp_fast:expr) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline(always)]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline(always)]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline(always)]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline(always)]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline(always)]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline(always)]
            fn powi(self, n: i32) -> Self {
                self.powi(n)
            }
            #[inline(always)]
            fn sin(self) -> Self {
                self.sin()
            }
            #[inline(always)]
            fn cos(self) -> Self {
                self.cos()
            }
            #[inline(always)]
            fn tanh(self) -> Self {
                self.tanh()
            }
            #[inline(always)]
            fn max(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
            #[inline(always)]
            fn min(self, other: Self) -> Self {
                if self < other {
                    self
                } else {
                    other
                }
            }
            #[inline(always)]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline(always)]
            fn exp_fast(self) -> Self {
                $exp_fast(self)
            }

            #[inline]
            unsafe fn gemm(
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
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm, exp_fast_f32);
impl_real!(f64, matrixmultiply::dgemm, <f64>::exp);

/// Row-major dense tensor. Cloning is cheap: the buffer is shared.
#[derive(Clone)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {:?} does not match buffer length {}",
            shape,
            data.len()
        );
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![T::ZERO; n])
    }

    pub fn full(shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![v; n])
    }

    pub fn scalar(v: T) -> Self {
        Tensor::from_vec(vec![1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Mutable view of the buffer; unshares it first if cloned elsewhere.
    pub fn data_mut(&mut self) -> &mut [T]
    where
        T: Clone,
    {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Number of rows when viewed as a 2-D matrix (product of all leading dims).
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    /// Trailing dimension when viewed as a 2-D matrix.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Same buffer under a new shape; element count must be preserved.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elems) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor::from_vec(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor::from_vec(
            self.shape.clone(),
            self.data.iter().map(|v| v.to_f64()).collect(),
        )
    }

    pub fn from_f64(src: &Tensor<f64>) -> Self {
        Tensor::from_vec(
            src.shape.clone(),
            src.data.iter().map(|&v| T::from_f64(v)).collect(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.len() <= 8 {
            write!(f, " {:?}", self.data())?;
        }
        Ok(())
    }
}

/// `c[m x n] += a[m x k] . b[k x n]`, operands row-major, optional logical
/// transposes expressed through strides.
pub fn gemm_acc<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta_zero: bool,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm lhs size");
    assert_eq!(b.len(), k * n, "gemm rhs size");
    assert_eq!(c.len(), m * n, "gemm out size");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if beta_zero { T::ZERO } else { T::ONE };
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
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
