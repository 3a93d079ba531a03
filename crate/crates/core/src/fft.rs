//! 2-D FFT between images and polar spectra.
//!
//! The forward transform is unnormalized (Parseval: sum(x^2) equals
//! sum(amplitude^2) / (H*W)); the inverse divides by H*W. DC sits at index
//! (0,0); window operations on the "centered" spectrum go through
//! [`fftshift_index`]. Amplitude and phase are kept in f64 so a
//! forward/inverse roundtrip reproduces an f32 image exactly after rounding.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Polar form of a 2-D spectrum. Phase lies in (-pi, pi].
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub rows: usize,
    pub cols: usize,
    pub amplitude: Vec<f64>,
    pub phase: Vec<f64>,
}

impl Spectrum {
    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

fn check_image(image: &Tensor) -> Result<(usize, usize)> {
    if image.rank() != 2 {
        return Err(CoreError::Shape(format!(
            "fft2 expects a rank-2 tensor, got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if h < 2 || w < 2 {
        return Err(CoreError::Shape(format!(
            "fft2 needs both sides >= 2, got {h}x{w}"
        )));
    }
    Ok((h, w))
}

fn fft2_complex(buf: &mut [Complex64], rows: usize, cols: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let row_fft = if inverse {
        planner.plan_fft_inverse(cols)
    } else {
        planner.plan_fft_forward(cols)
    };
    for r in 0..rows {
        row_fft.process(&mut buf[r * cols..(r + 1) * cols]);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(rows)
    } else {
        planner.plan_fft_forward(rows)
    };
    let mut col = vec![Complex64::default(); rows];
    for c in 0..cols {
        for r in 0..rows {
            col[r] = buf[r * cols + c];
        }
        col_fft.process(&mut col);
        for r in 0..rows {
            buf[r * cols + c] = col[r];
        }
    }
}

/// Forward 2-D FFT of a real image into polar form.
pub fn fft2(image: &Tensor) -> Result<Spectrum> {
    let (h, w) = check_image(image)?;
    let mut buf: Vec<Complex64> = image
        .data()
        .iter()
        .map(|&v| Complex64::new(v as f64, 0.0))
        .collect();
    fft2_complex(&mut buf, h, w, false);
    let mut amplitude = Vec::with_capacity(h * w);
    let mut phase = Vec::with_capacity(h * w);
    for z in &buf {
        amplitude.push(z.norm());
        let mut p = z.arg(); // [-pi, pi]
        if p == -std::f64::consts::PI {
            p = std::f64::consts::PI;
        }
        phase.push(p);
    }
    Ok(Spectrum {
        rows: h,
        cols: w,
        amplitude,
        phase,
    })
}

/// Inverse 2-D FFT of a polar spectrum back to a real image.
pub fn ifft2(s: &Spectrum) -> Result<Tensor> {
    if s.amplitude.len() != s.numel() || s.phase.len() != s.numel() {
        return Err(CoreError::Shape(
            "spectrum amplitude/phase length mismatch".into(),
        ));
    }
    let mut buf: Vec<Complex64> = s
        .amplitude
        .iter()
        .zip(&s.phase)
        .map(|(&a, &p)| Complex64::from_polar(a, p))
        .collect();
    fft2_complex(&mut buf, s.rows, s.cols, true);
    let scale = 1.0 / (s.rows * s.cols) as f64;
    let data: Vec<f32> = buf.iter().map(|z| (z.re * scale) as f32).collect();
    Tensor::new(vec![s.rows, s.cols], data)
}

/// Map an index of the DC-at-origin layout to the DC-centered layout.
pub fn fftshift_index(i: usize, n: usize) -> usize {
    (i + n / 2) % n
}

/// Inverse of [`fftshift_index`].
pub fn ifftshift_index(i: usize, n: usize) -> usize {
    (i + n - n / 2) % n
}
