//! Dense row-major tensors and the seeded generator used throughout.
//!
//! Feature volumes are laid out `[channels, height, width]`, batched volumes
//! `[batch, channels, height, width]`. Production paths run in `f32`; the
//! `f64` instantiation exists for finite-difference verification and uses an
//! ordered-accumulation matrix kernel so its results can be compared
//! bit-for-bit against straightforward reference loops.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{shape_err, Result};

/// Floating-point element type of a [`Tensor`].
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Computes `c = a·b` (or `c += a·b` when `accumulate`) with arbitrary
    /// strides.
    ///
    /// # Safety
    /// Every element addressed through the pointers and strides must be in
    /// bounds, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        accumulate: bool,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        accumulate: bool,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        let beta = if accumulate { 1.0 } else { 0.0 };
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        accumulate: bool,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        // Pack to contiguous row-major, then accumulate each output in
        // ascending k order so results equal a plain dot-product loop.
        let mut ap = vec![0.0f64; m * k];
        for i in 0..m {
            for p in 0..k {
                ap[i * k + p] = *a.offset(i as isize * rsa + p as isize * csa);
            }
        }
        let mut bp = vec![0.0f64; k * n];
        for p in 0..k {
            for j in 0..n {
                bp[p * n + j] = *b.offset(p as isize * rsb + j as isize * csb);
            }
        }
        let mut row = vec![0.0f64; n];
        for i in 0..m {
            if accumulate {
                for (j, r) in row.iter_mut().enumerate() {
                    *r = *c.offset(i as isize * rsc + j as isize * csc);
                }
            } else {
                row.iter_mut().for_each(|r| *r = 0.0);
            }
            for p in 0..k {
                let av = ap[i * k + p];
                let brow = &bp[p * n..(p + 1) * n];
                for (r, &bv) in row.iter_mut().zip(brow) {
                    *r += av * bv;
                }
            }
            for (j, r) in row.iter().enumerate() {
                *c.offset(i as isize * rsc + j as isize * csc) = *r;
            }
        }
    }
}

/// Whether a matrix operand is used as stored or transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    N,
    T,
}

/// Row-major matrix product on raw slices.
///
/// `a` is stored row-major as `[m×k]` (`Op::N`) or `[k×m]` (`Op::T`), likewise
/// `b` as `[k×n]` or `[n×k]`. `c` is `[m×n]` row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    op_a: Op,
    b: &[T],
    op_b: Op,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(
        a.len() >= m * k && b.len() >= k * n && c.len() >= m * n,
        "gemm operand too short"
    );
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = match op_a {
        Op::N => (k as isize, 1),
        Op::T => (1, m as isize),
    };
    let (rsb, csb) = match op_b {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    // SAFETY: lengths checked above; strides address exactly the m×k, k×n
    // and m×n row-major extents.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            accumulate,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dense N-dimensional array. `data.len()` always equals the product of `dims`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

fn volume(dims: &[usize]) -> usize {
    dims.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: &[usize], data: Vec<T>) -> Result<Self> {
        if dims.contains(&0) {
            return shape_err(format!("dims {dims:?} contain a zero extent"));
        }
        if volume(dims) != data.len() {
            return shape_err(format!(
                "dims {dims:?} need {} values, got {}",
                volume(dims),
                data.len()
            ));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; volume(dims)],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: (0..volume(dims)).map(&mut f).collect(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(
            &[n, n],
            |i| if i / n == i % n { T::one() } else { T::zero() },
        )
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
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

    /// Mutable view of the values; the length (and thus the shape) is fixed.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        if volume(dims) != self.data.len() || dims.contains(&0) {
            return shape_err(format!("cannot reshape {:?} into {dims:?}", self.dims));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Collapses every dimension after the first (the batch) into one.
    pub fn flatten(&self) -> Result<Self> {
        if self.rank() < 2 {
            return shape_err(format!("flatten needs rank >= 2, got dims {:?}", self.dims));
        }
        let rest = volume(&self.dims[1..]);
        self.reshape(&[self.dims[0], rest])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    /// Applies `f` elementwise against `other`, which must have the same
    /// shape or the shape of one batch entry (broadcast along dim 0).
    pub fn zip_map(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.dims == other.dims {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Tensor {
                dims: self.dims.clone(),
                data,
            });
        }
        if self.rank() >= 2 && other.dims[..] == self.dims[1..] {
            let inner = other.len();
            let data = self
                .data
                .chunks_exact(inner)
                .flat_map(|row| row.iter().zip(&other.data).map(|(&a, &b)| f(a, b)))
                .collect();
            return Ok(Tensor {
                dims: self.dims.clone(),
                data,
            });
        }
        shape_err(format!(
            "elementwise shapes {:?} and {:?} do not match",
            self.dims, other.dims
        ))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    /// In-place `self += other`; used for gradient accumulation.
    pub fn accumulate(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.dims != other.dims {
            return shape_err(format!(
                "cannot accumulate {:?} into {:?}",
                other.dims, self.dims
            ));
        }
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a += b);
        Ok(())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sum_squares(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Self> {
        matmul(self, other)
    }
}

/// Matrix product of two rank-2 tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.dims[1] != b.dims[0] {
        return shape_err(format!("matmul of {:?} by {:?}", a.dims, b.dims));
    }
    let (m, k, n) = (a.dims[0], a.dims[1], b.dims[1]);
    let mut out = Tensor::zeros(&[m, n]);
    gemm(
        m,
        k,
        n,
        &a.data,
        Op::N,
        &b.data,
        Op::N,
        &mut out.data,
        false,
    );
    Ok(out)
}

/// SplitMix64 generator.
///
/// Each draw adds `0x9E3779B97F4A7C15` to the state and returns
/// `z ^ (z >> 31)` where `z` is the state passed through
/// `(z ^ (z >> 30)) * 0xBF58476D1CE4E5B9` and `(z ^ (z >> 27)) * 0x94D049BB133111EB`
/// (wrapping). Unit reals use the top 53 bits: `(x >> 11) * 2^-53`.
/// Bounded integers use Lemire's multiply-and-reject. Gaussians use the
/// cosine branch of Box-Muller on two consecutive unit draws.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Independent generator seeded from this one's next draw.
    pub fn split(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi]`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        debug_assert!(lo <= hi);
        (lo + (hi - lo) * self.next_f64()).min(hi)
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    pub fn gaussian(&mut self, mean: f64, std: f64) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        mean + std * z
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// Tensor of independent Gaussian draws.
pub fn rng_gaussian<T: Scalar>(rng: &mut Rng, dims: &[usize], mean: f64, std: f64) -> Tensor<T> {
    assert!(std >= 0.0, "negative standard deviation");
    Tensor::from_fn(dims, |_| T::of(rng.gaussian(mean, std)))
}

pub fn rng_uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    rng.uniform(lo, hi)
}
