//! Scalar abstraction shared by the 32-bit inference path and the 64-bit gradient checker,
//! plus small dense kernels and seed derivation.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use sha2::{Digest, Sha256};

pub trait Scalar:
    Float + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
    fn lit(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

pub fn l2_norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// `out[n×m] = x[n×k] · w[k×m]`, overwriting `out`.
pub fn matmul<T: Scalar>(x: &[T], w: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    debug_assert_eq!(x.len(), n * k);
    debug_assert_eq!(w.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    out.iter_mut().for_each(|v| *v = T::zero());
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let xv = x[i * k + p];
            let wrow = &w[p * m..(p + 1) * m];
            for (o, wv) in row.iter_mut().zip(wrow) {
                *o += xv * *wv;
            }
        }
    }
}

/// Backward of [`matmul`]: accumulates `dw += xᵀ·dout` and `dx += dout·wᵀ`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    dx: &mut [T],
    dw: &mut [T],
    n: usize,
    k: usize,
    m: usize,
) {
    for i in 0..n {
        let drow = &dout[i * m..(i + 1) * m];
        for p in 0..k {
            let wrow = &w[p * m..(p + 1) * m];
            dx[i * k + p] += dot(drow, wrow);
            let xv = x[i * k + p];
            let dwrow = &mut dw[p * m..(p + 1) * m];
            for (g, d) in dwrow.iter_mut().zip(drow) {
                *g += xv * *d;
            }
        }
    }
}

/// Softmax with max subtraction, written into `out`.
pub fn softmax_into<T: Scalar>(logits: &[T], out: &mut [T]) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// Derives an independent 64-bit seed for a named pipeline stage from a root seed.
pub fn derive_seed(root: u64, stage: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(stage.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields 32 bytes"))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
