//! Eager numeric kernels shared by the tape and by callers that only need
//! forward values.

use super::tensor::Tensor;
use crate::error::{invalid, DvpError, Result};

/// Operand layout for [`gemm`].
#[derive(Clone, Copy, Debug)]
pub(crate) enum Layout {
    /// Row-major `rows x cols` as stored.
    Normal,
    /// The stored row-major matrix used transposed.
    Transposed,
}

/// `c = beta * c + a' * b'` where `a'` is `m x k`, `b'` is `k x n` and `c`
/// is row-major `m x n`. `a_cols` / `b_cols` are the stored column counts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_layout: Layout,
    b: &[f64],
    b_layout: Layout,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = match a_layout {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    // SAFETY: slice lengths were checked above and strides describe
    // in-bounds row-major / column-major views of those slices.
    unsafe {
        matrixmultiply::dgemm(
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

fn as_matrix_dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = as_matrix_dims(a);
    let (k2, n) = as_matrix_dims(b);
    if a.shape().len() != 2 || b.shape().len() != 2 || k != k2 {
        return Err(DvpError::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), Layout::Normal, b.data(), Layout::Normal, 0.0, &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Row-wise softmax in place with max subtraction.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if !x.is_finite() {
        return Err(DvpError::NonFinite { op: "softmax_rows" });
    }
    let mut out = x.clone();
    let c = x.cols();
    for row in out.data_mut().chunks_mut(c) {
        softmax_in_place(row);
    }
    Ok(out)
}

pub(crate) fn erf(x: f64) -> f64 {
    libm::erf(x)
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// d/dx gelu(x) = Phi(x) + x * phi(x).
pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    if !x.is_finite() {
        return Err(DvpError::NonFinite { op: "gelu" });
    }
    let data = x.data().iter().map(|&v| gelu_scalar(v)).collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

pub(crate) fn check_layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<()> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(DvpError::ShapeMismatch {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: gain.shape().to_vec(),
        });
    }
    if !(eps > 0.0) {
        return Err(invalid("layer_norm eps must be positive"));
    }
    Ok(())
}

/// Returns `(output, normalized, inverse_std_per_row)`.
pub(crate) fn layer_norm_parts(
    x: &[f64],
    d: usize,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        rstd[r] = inv;
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain[j] + bias[j];
        }
    }
    (out, xhat, rstd)
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    check_layer_norm(x, gain, bias, eps)?;
    let (out, _, _) = layer_norm_parts(x.data(), x.cols(), gain.data(), bias.data(), eps);
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}
