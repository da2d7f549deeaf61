//! Log-magnitude short-time Fourier transform.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use tmc_core::Tensor;

use crate::{DspError, Result};

pub const WINDOW: usize = 512;
pub const HOP: usize = 192;
pub const BINS: usize = WINDOW / 2 + 1;

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

pub fn frame_count(samples: usize, window: usize, hop: usize) -> usize {
    if samples < window {
        0
    } else {
        (samples - window) / hop + 1
    }
}

/// `log(1 + |X|)` of Hann-windowed frames, as a `[window/2 + 1, frames]` tensor.
pub fn stft_log_magnitude_with(x: &[f64], window: usize, hop: usize) -> Result<Tensor> {
    if window == 0 || hop == 0 {
        return Err(DspError::Contract("window and hop must be positive".into()));
    }
    if x.len() < window {
        return Err(DspError::Contract(format!(
            "signal of {} samples is shorter than one {window}-sample window",
            x.len()
        )));
    }
    let frames = frame_count(x.len(), window, hop);
    let bins = window / 2 + 1;
    let w = hann(window);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(window);
    let mut buf = vec![Complex64::new(0.0, 0.0); window];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut out = vec![0.0; bins * frames];
    for f in 0..frames {
        let start = f * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex64::new(x[start + i] * w[i], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (b, v) in buf[..bins].iter().enumerate() {
            out[b * frames + f] = v.norm().ln_1p();
        }
    }
    Ok(Tensor::new(vec![bins, frames], out)?)
}

/// Spectrogram with 512-sample windows and a 192-sample hop (32 ms and 12 ms at 16 kHz).
pub fn stft_log_magnitude(x: &[f64]) -> Result<Tensor> {
    stft_log_magnitude_with(x, WINDOW, HOP)
}
