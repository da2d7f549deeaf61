//! Rational-ratio resampling with a windowed-sinc polyphase filter bank.

use std::f64::consts::PI;

use crate::{DspError, Result};

/// Zero crossings of the interpolation kernel on each side of its centre.
const ZERO_CROSSINGS: usize = 16;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

fn blackman(t: f64) -> f64 {
    // t in [-1, 1]
    0.42 + 0.5 * (PI * t).cos() + 0.08 * (2.0 * PI * t).cos()
}

/// Resamples `x` from `source_hz` to `target_hz`. The output has
/// `round(len * target / source)` samples. The kernel's cutoff sits at the
/// lower of the two Nyquist rates; each phase is normalised to unit DC gain and
/// the signal is extended with its edge values.
pub fn resample(x: &[f64], source_hz: u32, target_hz: u32) -> Result<Vec<f64>> {
    if source_hz == 0 || target_hz == 0 {
        return Err(DspError::Contract(format!(
            "sample rates must be positive, got {source_hz} -> {target_hz}"
        )));
    }
    if source_hz == target_hz || x.is_empty() {
        return Ok(x.to_vec());
    }
    let g = gcd(source_hz as u64, target_hz as u64);
    let up = (target_hz as u64 / g) as usize;
    let down = (source_hz as u64 / g) as usize;
    let out_len = ((x.len() as u128 * target_hz as u128 + source_hz as u128 / 2) / source_hz as u128) as usize;
    let cutoff = (target_hz as f64 / source_hz as f64).min(1.0);
    let half = (ZERO_CROSSINGS as f64 / cutoff).ceil() as isize;

    // Phase q holds taps for output times whose fractional input offset is q/up.
    let phases: Vec<Vec<f64>> = (0..up)
        .map(|q| {
            let frac = q as f64 / up as f64;
            let mut taps: Vec<f64> = (-half + 1..=half)
                .map(|j| {
                    let d = j as f64 - frac;
                    let t = d / (half as f64);
                    if t.abs() >= 1.0 {
                        0.0
                    } else {
                        cutoff * sinc(cutoff * d) * blackman(t)
                    }
                })
                .collect();
            let sum: f64 = taps.iter().sum();
            taps.iter_mut().for_each(|v| *v /= sum);
            taps
        })
        .collect();

    let last = x.len() as isize - 1;
    let at = |i: isize| x[i.clamp(0, last) as usize];
    let y = (0..out_len)
        .map(|k| {
            let pos = k * down;
            let base = (pos / up) as isize;
            let taps = &phases[pos % up];
            // taps[m] weights input base + m - half + 1.
            taps.iter()
                .enumerate()
                .map(|(m, &w)| w * at(base + m as isize - half + 1))
                .sum()
        })
        .collect();
    Ok(y)
}
