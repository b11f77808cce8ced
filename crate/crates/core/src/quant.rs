//! 8-bit compression: blockwise absmax codes for activations in transit and
//! int8 weight storage with full-precision outlier columns.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BLOCK_SIZE: usize = 64;
pub const DEFAULT_OUTLIER_THRESHOLD: f32 = 6.0;

/// Activation tensor stored as per-block scales plus one signed byte per element.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlockwise {
    pub block_size: usize,
    pub shape: Vec<usize>,
    pub scales: Vec<f32>,
    pub codes: Vec<i8>,
}

impl QuantizedBlockwise {
    /// Number of elements in the final, possibly short, block.
    pub fn tail_len(&self) -> usize {
        match self.codes.len() % self.block_size {
            0 if self.codes.is_empty() => 0,
            0 => self.block_size,
            r => r,
        }
    }

    pub fn scale_for(&self, index: usize) -> f32 {
        self.scales[index / self.block_size]
    }
}

fn quantize_value(v: f32, scale: f32) -> i8 {
    if scale == 0.0 {
        return 0;
    }
    // f32::round is round-half-away-from-zero.
    (v as f64 / scale as f64).round().clamp(-127.0, 127.0) as i8
}

pub fn quantize_blockwise(x: &Tensor, block_size: usize) -> Result<QuantizedBlockwise> {
    if block_size == 0 {
        return Err(Error::input("block_size must be at least 1"));
    }
    if !x.is_finite() {
        return Err(Error::input("cannot quantize non-finite values"));
    }
    let n_blocks = x.data.len().div_ceil(block_size);
    let mut scales = Vec::with_capacity(n_blocks);
    let mut codes = Vec::with_capacity(x.data.len());
    for block in x.data.chunks(block_size) {
        let absmax = block.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let scale = absmax / 127.0;
        scales.push(scale);
        codes.extend(block.iter().map(|&v| quantize_value(v, scale)));
    }
    Ok(QuantizedBlockwise {
        block_size,
        shape: x.shape.clone(),
        scales,
        codes,
    })
}

pub fn dequantize_blockwise(q: &QuantizedBlockwise) -> Result<Tensor> {
    if q.block_size == 0 {
        return Err(Error::corrupt("zero block size"));
    }
    let n = crate::tensor::numel(&q.shape).map_err(|e| Error::corrupt(e.to_string()))?;
    if n != q.codes.len() {
        return Err(Error::corrupt(format!(
            "shape {:?} needs {n} codes, got {}",
            q.shape,
            q.codes.len()
        )));
    }
    if q.scales.len() != n.div_ceil(q.block_size) {
        return Err(Error::corrupt(format!(
            "expected {} scales, got {}",
            n.div_ceil(q.block_size),
            q.scales.len()
        )));
    }
    let data = q
        .codes
        .chunks(q.block_size)
        .zip(&q.scales)
        .flat_map(|(block, &s)| block.iter().map(move |&c| c as f32 * s))
        .collect();
    Ok(Tensor {
        shape: q.shape.clone(),
        data,
    })
}

/// Weight matrix `[rows x cols]` with int8 regular columns and f32 outlier columns.
///
/// A column is an outlier when any entry exceeds `threshold` in magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct Int8Weights {
    pub rows: usize,
    pub cols: usize,
    pub threshold: f32,
    /// Indices of the int8 columns, ascending.
    pub regular_cols: Vec<usize>,
    /// `[rows x regular_cols.len()]` codes.
    pub regular: Vec<i8>,
    /// One scale per regular column.
    pub col_scales: Vec<f32>,
    pub outlier_cols: Vec<usize>,
    /// `[rows x outlier_cols.len()]` full-precision values.
    pub outlier_data: Vec<f32>,
}

pub fn quantize_weights_int8(
    w: &[f32],
    rows: usize,
    cols: usize,
    threshold: f32,
) -> Result<Int8Weights> {
    if w.len() != rows * cols {
        return Err(Error::input(format!(
            "weight buffer has {} values, expected {}",
            w.len(),
            rows * cols
        )));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("non-finite weight"));
    }
    if !(threshold > 0.0) {
        return Err(Error::input("outlier threshold must be positive"));
    }
    let col_absmax: Vec<f32> = (0..cols)
        .map(|c| (0..rows).fold(0.0f32, |m, r| m.max(w[r * cols + c].abs())))
        .collect();
    let (outlier_cols, regular_cols): (Vec<usize>, Vec<usize>) =
        (0..cols).partition(|&c| col_absmax[c] > threshold);
    let col_scales: Vec<f32> = regular_cols.iter().map(|&c| col_absmax[c] / 127.0).collect();

    let mut regular = Vec::with_capacity(rows * regular_cols.len());
    let mut outlier_data = Vec::with_capacity(rows * outlier_cols.len());
    for r in 0..rows {
        for (j, &c) in regular_cols.iter().enumerate() {
            regular.push(quantize_value(w[r * cols + c], col_scales[j]));
        }
        outlier_data.extend(outlier_cols.iter().map(|&c| w[r * cols + c]));
    }
    Ok(Int8Weights {
        rows,
        cols,
        threshold,
        regular_cols,
        regular,
        col_scales,
        outlier_cols,
        outlier_data,
    })
}

impl Int8Weights {
    /// Full `[rows x cols]` matrix with regular entries dequantized.
    pub fn reconstruct(&self) -> Vec<f32> {
        let mut out = vec![0.0f32; self.rows * self.cols];
        let nr = self.regular_cols.len();
        let no = self.outlier_cols.len();
        for r in 0..self.rows {
            for (j, &c) in self.regular_cols.iter().enumerate() {
                out[r * self.cols + c] = self.regular[r * nr + j] as f32 * self.col_scales[j];
            }
            for (j, &c) in self.outlier_cols.iter().enumerate() {
                out[r * self.cols + c] = self.outlier_data[r * no + j];
            }
        }
        out
    }

    /// `x [n x cols] -> [n x rows]`, i.e. `(W . x^T)^T` computed row by row.
    ///
    /// Regular columns accumulate in the int8 domain per row, then apply the
    /// column scale; outlier columns take the f32 path.
    pub fn apply_rows(&self, x: &[f32], n: usize) -> Result<Vec<f32>> {
        if x.len() != n * self.cols {
            return Err(Error::input(format!(
                "input has {} values, expected {} x {}",
                x.len(),
                n,
                self.cols
            )));
        }
        let nr = self.regular_cols.len();
        let no = self.outlier_cols.len();
        let mut out = vec![0.0f32; n * self.rows];
        // Pre-scale the regular input features once per row.
        let mut scaled = vec![0.0f32; nr];
        for i in 0..n {
            let xi = &x[i * self.cols..(i + 1) * self.cols];
            for (j, &c) in self.regular_cols.iter().enumerate() {
                scaled[j] = xi[c] * self.col_scales[j];
            }
            for r in 0..self.rows {
                let codes = &self.regular[r * nr..(r + 1) * nr];
                let mut acc = 0.0f32;
                for (k, &code) in codes.iter().enumerate() {
                    acc += code as f32 * scaled[k];
                }
                let outl = &self.outlier_data[r * no..(r + 1) * no];
                for (k, &c) in self.outlier_cols.iter().enumerate() {
                    acc += outl[k] * xi[c];
                }
                out[i * self.rows + r] = acc;
            }
        }
        Ok(out)
    }
}

/// `W [rows x cols] . x [cols x n] -> [rows x n]` through the mixed decomposition.
pub fn matmul_mixed(w: &Int8Weights, x: &[f32], n: usize) -> Result<Vec<f32>> {
    if x.len() != w.cols * n {
        return Err(Error::input(format!(
            "inner dimensions disagree: W has {} columns, x has {} values for {n} columns",
            w.cols,
            x.len()
        )));
    }
    // Transpose x into rows so apply_rows can stream it.
    let mut xt = vec![0.0f32; n * w.cols];
    for c in 0..w.cols {
        for j in 0..n {
            xt[j * w.cols + c] = x[c * n + j];
        }
    }
    let yt = w.apply_rows(&xt, n)?;
    let mut y = vec![0.0f32; w.rows * n];
    for j in 0..n {
        for r in 0..w.rows {
            y[r * n + j] = yt[j * w.rows + r];
        }
    }
    Ok(y)
}
