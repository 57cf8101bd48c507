//! Raw slice kernels shared by the autograd graph and inference paths.
//!
//! Every kernel is single-threaded and deterministic: identical inputs give
//! bit-identical outputs.

/// Strided operand view for [`gemm`].
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    /// Row-major `rows × cols` matrix.
    pub fn new(data: &'a [f64], cols: usize) -> Self {
        Self { data, row_stride: cols as isize, col_stride: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self { data, row_stride: 1, col_stride: cols as isize }
    }
}

/// `c[m×n] = beta·c + a[m×k]·b[k×n]` with row-major `c`.
pub fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let max_a = (m - 1) as isize * a.row_stride + (k - 1) as isize * a.col_stride;
    let max_b = (k - 1) as isize * b.row_stride + (n - 1) as isize * b.col_stride;
    assert!((max_a as usize) < a.data.len() && (max_b as usize) < b.data.len());
    // SAFETY: the bounds of every strided access were checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, MatRef::new(a, k), MatRef::new(b, n), 0.0, &mut c);
    c
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm. Returns `(out, normalized, rstd)`.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], cols: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / cols;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for c in 0..cols {
            let h = (row[c] - mean) * rs;
            xhat[r * cols + c] = h;
            out[r * cols + c] = h * gamma[c] + beta[c];
        }
    }
    (out, xhat, rstd)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// In-place numerically stable softmax over one slice; `-inf` entries map to 0.
/// Returns `false` if every entry is `-inf`.
pub fn softmax_in_place(row: &mut [f64]) -> bool {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return false;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    true
}

/// `log Σ exp(row)`, stable.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Shape parameters of a multi-head attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttnDims {
    /// Number of query rows.
    pub queries: usize,
    /// Number of key/value rows.
    pub keys: usize,
    pub heads: usize,
    pub d_model: usize,
    /// Query `t` may attend keys `0..=offset + t`.
    pub offset: usize,
}

impl AttnDims {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Causal multi-head attention. Returns the output `[queries × d_model]` and the
/// attention probabilities laid out `[heads × queries × keys]` (zeros past the
/// causal horizon).
pub fn attention_forward(q: &[f64], k: &[f64], v: &[f64], dims: AttnDims) -> (Vec<f64>, Vec<f64>) {
    let AttnDims { queries, keys, heads, d_model, offset } = dims;
    let dh = dims.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; queries * d_model];
    let mut probs = vec![0.0; heads * queries * keys];
    for h in 0..heads {
        let col = h * dh;
        for t in 0..queries {
            let horizon = (offset + t + 1).min(keys);
            let qrow = &q[t * d_model + col..t * d_model + col + dh];
            let p = &mut probs[(h * queries + t) * keys..(h * queries + t) * keys + keys];
            for j in 0..horizon {
                let krow = &k[j * d_model + col..j * d_model + col + dh];
                p[j] = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_in_place(&mut p[..horizon]);
            let orow = &mut out[t * d_model + col..t * d_model + col + dh];
            for j in 0..horizon {
                let w = p[j];
                let vrow = &v[j * d_model + col..j * d_model + col + dh];
                orow.iter_mut().zip(vrow).for_each(|(o, x)| *o += w * x);
            }
        }
    }
    (out, probs)
}

/// Backward of [`attention_forward`]; accumulates into whichever of
/// `dq`, `dk`, `dv` are provided.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    dims: AttnDims,
    mut dq: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
    mut dv: Option<&mut [f64]>,
) {
    let AttnDims { queries, keys, heads, d_model, offset } = dims;
    let dh = dims.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = vec![0.0; keys];
    for h in 0..heads {
        let col = h * dh;
        for t in 0..queries {
            let horizon = (offset + t + 1).min(keys);
            let p = &probs[(h * queries + t) * keys..(h * queries + t) * keys + horizon];
            let drow = &dout[t * d_model + col..t * d_model + col + dh];
            let mut dot = 0.0;
            for j in 0..horizon {
                let vrow = &v[j * d_model + col..j * d_model + col + dh];
                dp[j] = drow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                dot += dp[j] * p[j];
                if let Some(dv) = dv.as_deref_mut() {
                    let w = p[j];
                    dv[j * d_model + col..j * d_model + col + dh]
                        .iter_mut()
                        .zip(drow)
                        .for_each(|(g, d)| *g += w * d);
                }
            }
            for j in 0..horizon {
                let ds = p[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                if let Some(dq) = dq.as_deref_mut() {
                    let krow = &k[j * d_model + col..j * d_model + col + dh];
                    dq[t * d_model + col..t * d_model + col + dh]
                        .iter_mut()
                        .zip(krow)
                        .for_each(|(g, x)| *g += ds * x);
                }
                if let Some(dk) = dk.as_deref_mut() {
                    let qrow = &q[t * d_model + col..t * d_model + col + dh];
                    dk[j * d_model + col..j * d_model + col + dh]
                        .iter_mut()
                        .zip(qrow)
                        .for_each(|(g, x)| *g += ds * x);
                }
            }
        }
    }
}
