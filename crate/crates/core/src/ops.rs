//! Dense row-major kernels shared by the forward and backward passes.
//!
//! Every reduction runs in a fixed sequential order so that the same inputs
//! always produce bit-identical outputs, which the distributed equivalence
//! tests depend on.

pub const LN_EPS: f32 = 1e-5;
const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)
const GELU_K: f32 = 0.044_715;

/// `a [m x k] . b [k x n] -> [m x n]`
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a [m x n] . b^T` where `b` is `[k x n]`, giving `[m x k]`.
pub fn matmul_bt(a: &[f32], b: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0f32; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = dot(arow, &b[p * n..(p + 1) * n]);
        }
    }
    out
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0f32, |acc, (x, y)| acc + x * y)
}

pub fn add_bias(x: &mut [f32], bias: &[f32]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub fn add_in_place(x: &mut [f32], y: &[f32]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

/// Row-wise layer norm. Returns `(out, xhat, rstd)`.
pub fn layer_norm(
    x: &[f32],
    gamma: &[f32],
    beta: &[f32],
    width: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let rows = x.len() / width;
    let mut out = vec![0.0f32; x.len()];
    let mut xhat = vec![0.0f32; x.len()];
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().sum::<f32>() / width as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / width as f32;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        rstds.push(rstd);
        for c in 0..width {
            let h = (row[c] - mean) * rstd;
            xhat[r * width + c] = h;
            out[r * width + c] = h * gamma[c] + beta[c];
        }
    }
    (out, xhat, rstds)
}

/// Gradient of a row-wise layer norm with respect to its input.
pub fn layer_norm_backward(
    grad_out: &[f32],
    xhat: &[f32],
    rstd: &[f32],
    gamma: &[f32],
    width: usize,
) -> Vec<f32> {
    let mut grad_in = vec![0.0f32; grad_out.len()];
    for (r, &rs) in rstd.iter().enumerate() {
        let span = r * width..(r + 1) * width;
        let go = &grad_out[span.clone()];
        let xh = &xhat[span.clone()];
        let dxhat: Vec<f32> = go.iter().zip(gamma).map(|(g, w)| g * w).collect();
        let mean_d = dxhat.iter().sum::<f32>() / width as f32;
        let mean_dx = dxhat.iter().zip(xh).map(|(d, h)| d * h).sum::<f32>() / width as f32;
        for c in 0..width {
            grad_in[span.start + c] = rs * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    grad_in
}

pub fn gelu(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Numerically stable softmax in place.
pub fn softmax_in_place(x: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}
