//! Decision-window segmentation and the 2 s to 3 s repeat-truncate step.

use std::ops::Range;

use tmc_core::Tensor;

use crate::{DspError, Result};

/// One decision window, in seconds from the trial start.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowSpan {
    pub start_s: f64,
    pub length_s: f64,
}

impl WindowSpan {
    /// Sample range of this window at `rate` Hz.
    pub fn samples(&self, rate: f64) -> Range<usize> {
        let start = (self.start_s * rate).round() as usize;
        start..start + (self.length_s * rate).round() as usize
    }
}

/// Overlap for each supported window length; both give a 1 s hop.
pub fn preset_overlap(window_s: u32) -> Result<u32> {
    match window_s {
        2 => Ok(1),
        3 => Ok(2),
        other => Err(DspError::Contract(format!("window length must be 2 or 3 s, got {other}"))),
    }
}

/// Windows of `window_s` seconds stepping by `window_s - overlap_s` over a
/// signal of `duration_s` seconds. Too-short signals yield no windows.
pub fn segment_windows(duration_s: f64, window_s: f64, overlap_s: f64) -> Result<Vec<WindowSpan>> {
    if !(window_s > 0.0) || !(overlap_s >= 0.0) || overlap_s >= window_s {
        return Err(DspError::Contract(format!(
            "need 0 <= overlap < window, got window {window_s} s, overlap {overlap_s} s"
        )));
    }
    if !(duration_s >= window_s) {
        return Ok(Vec::new());
    }
    let hop = window_s - overlap_s;
    // Guard against 9.999999 style rounding of an exact fit.
    let count = ((duration_s - window_s) / hop + 1e-9).floor() as usize + 1;
    Ok((0..count)
        .map(|k| WindowSpan {
            start_s: k as f64 * hop,
            length_s: window_s,
        })
        .collect())
}

/// Repeats a 2 s window along its last (time) axis and keeps the first
/// `floor(1.5 L)` samples, the length of a 3 s window.
pub fn repeat_truncate(t: &Tensor, rate_hz: f64) -> Result<Tensor> {
    let shape = t.shape();
    let len = *shape.last().ok_or_else(|| DspError::Contract("cannot repeat a scalar".into()))?;
    let expected = (2.0 * rate_hz).round() as usize;
    if len != expected {
        return Err(DspError::Contract(format!(
            "repeat-truncate needs a 2 s window ({expected} samples at {rate_hz} Hz), got {len}"
        )));
    }
    let out_len = len * 3 / 2;
    let rows = t.numel() / len;
    let mut data = Vec::with_capacity(rows * out_len);
    for r in 0..rows {
        let row = &t.data()[r * len..(r + 1) * len];
        data.extend_from_slice(row);
        data.extend_from_slice(&row[..out_len - len]);
    }
    let mut new_shape = shape.to_vec();
    *new_shape.last_mut().expect("rank checked") = out_len;
    Ok(Tensor::new(new_shape, data)?)
}
