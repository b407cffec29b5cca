//! Forward kernels on raw row-major buffers, shared by the tape and the
//! cached inference path.

use super::{Float, NEG_MASK};
use crate::error::{Error, Result};

/// Layout of a matrix operand in memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Stored as written: `rows x cols`.
    Normal,
    /// Stored transposed: the buffer holds `cols x rows`.
    Transposed,
}

/// `c = a * b` (or `c += a * b` when `accumulate`), where `a` is logically
/// `m x k` and `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_layout: Layout,
    b: &[T],
    b_layout: Layout,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match a_layout {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: lengths were checked above and `c` is a distinct mutable borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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

pub fn matmul<T: Float>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm(
        m,
        k,
        n,
        a,
        Layout::Normal,
        b,
        Layout::Normal,
        &mut out,
        false,
    );
    out
}

fn is_masked<T: Float>(x: T) -> bool {
    x.is_nan() || x <= T::of(NEG_MASK * 0.5)
}

/// Numerically stabilized softmax over each row of width `n`, in place.
pub fn softmax_rows_in_place<T: Float>(data: &mut [T], n: usize) -> Result<()> {
    for (r, row) in data.chunks_mut(n).enumerate() {
        if row.iter().any(|&x| x.is_nan() || x == T::infinity()) {
            return Err(Error::NonFinite("softmax"));
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        if row.iter().all(|&x| is_masked(x)) {
            return Err(Error::DegenerateRow { row: r });
        }
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        let inv = T::one() / sum;
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
    Ok(())
}

/// Log-softmax of a single row.
pub fn log_softmax<T: Float>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
    row.iter().map(|&x| x - lse).collect()
}

/// Layer normalization over rows of width `d`. Returns the output together
/// with the per-row mean and reciprocal standard deviation.
pub fn layer_norm_rows<T: Float>(
    x: &[T],
    d: usize,
    gain: &[T],
    bias: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut out = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    let inv_d = T::one() / T::of(d as f64);
    for (row, dst) in x.chunks(d).zip(out.chunks_mut(d)) {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        for j in 0..d {
            dst[j] = (row[j] - mean) * rstd * gain[j] + bias[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (out, means, rstds)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU, written as `x * sigmoid(2u)`.
pub fn gelu<T: Float>(x: T) -> T {
    x * gelu_gate(x)
}

fn gelu_gate<T: Float>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::one() / (T::one() + (-(u + u)).exp())
}

pub fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let s = gelu_gate(x);
    let sech2 = T::of(4.0) * s * (T::one() - s);
    s + T::of(0.5) * x * sech2 * c * (T::one() + T::of(3.0) * a * x * x)
}

pub fn add_row_in_place<T: Float>(x: &mut [T], bias: &[T]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}
