//! Pure (non-recording) numeric operations on tensors. The differentiable
//! counterparts live on [`crate::tape::Tape`]; these are the plain-value
//! routes used by evaluation code and by test oracles.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Dot product accumulated in f64.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum::<f64>()
}

/// Euclidean norm accumulated in f64.
pub fn l2_norm(a: &[f32]) -> f64 {
    a.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine_sim(a: &Tensor, b: &Tensor) -> Result<f32> {
    if a.rank() != 1 || b.rank() != 1 || a.numel() != b.numel() {
        return Err(CoreError::Shape(format!(
            "cosine_sim expects equal-length vectors, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    cosine_sim_slices(a.data(), b.data())
}

pub fn cosine_sim_slices(a: &[f32], b: &[f32]) -> Result<f32> {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(CoreError::Domain("cosine_sim of zero-norm vector".into()));
    }
    Ok((dot(a, b) / (na * nb)) as f32)
}

/// Row-wise temperature softmax of a matrix, stabilized by row-max
/// subtraction. Each output row is non-negative and sums to 1.
pub fn softmax_rows(m: &Tensor, tau: f32) -> Result<Tensor> {
    if m.rank() != 2 {
        return Err(CoreError::Shape(format!(
            "softmax_rows expects a matrix, got {:?}",
            m.shape()
        )));
    }
    if !(tau > 0.0) {
        return Err(CoreError::Domain(format!("tau must be positive, got {tau}")));
    }
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let tau = tau as f64;
    let mut out = vec![0.0f32; rows * cols];
    for i in 0..rows {
        let row = &m.data()[i * cols..(i + 1) * cols];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut denom = 0.0f64;
        let mut exps = vec![0.0f64; cols];
        for (j, &v) in row.iter().enumerate() {
            let e = ((v as f64 - max) / tau).exp();
            exps[j] = e;
            denom += e;
        }
        for j in 0..cols {
            out[i * cols + j] = (exps[j] / denom) as f32;
        }
    }
    Tensor::new(vec![rows, cols], out)
}

/// Mean of a slice in f64.
pub fn mean(a: &[f32]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().map(|&x| x as f64).sum::<f64>() / a.len() as f64
}

/// Peak signal-to-noise ratio in dB for images on a 0..=peak scale.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(CoreError::Shape("psnr shape mismatch".into()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}
