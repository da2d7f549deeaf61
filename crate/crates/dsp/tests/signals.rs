use std::f64::consts::PI;

use proptest::prelude::*;
use tmc_core::Tensor;
use tmc_dsp::pipeline::{prepare_speech, SPEECH_RATE};
use tmc_dsp::resample::resample;
use tmc_dsp::stft::{frame_count, hann, stft_log_magnitude, BINS, HOP, WINDOW};
use tmc_dsp::window::{preset_overlap, repeat_truncate, segment_windows};

fn tone(freq: f64, rate: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| (2.0 * PI * freq * i as f64 / rate).sin()).collect()
}

/// Frequency of the largest DFT magnitude, refined by parabolic interpolation.
fn peak_frequency(x: &[f64], rate: f64) -> f64 {
    let n = x.len();
    let mut planner = rustfft::FftPlanner::new();
    let mut buf: Vec<num_complex::Complex64> = x.iter().zip(hann(n)).map(|(&v, w)| (v * w).into()).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    let mags: Vec<f64> = buf[..n / 2].iter().map(|c| c.norm().ln()).collect();
    let k = (1..n / 2 - 1).max_by(|&a, &b| mags[a].total_cmp(&mags[b])).unwrap();
    let (a, b, c) = (mags[k - 1], mags[k], mags[k + 1]);
    let offset = 0.5 * (a - c) / (a - 2.0 * b + c);
    (k as f64 + offset) * rate / n as f64
}

#[test]
fn resampled_tone_keeps_its_frequency() {
    for (from, to) in [(44_100, 16_000), (48_000, 16_000), (8_000, 16_000), (512, 128)] {
        let f = if to == 128 { 10.0 } else { 1000.0 };
        let x = tone(f, from as f64, from as usize * 2);
        let y = resample(&x, from, to).unwrap();
        assert_eq!(y.len(), to as usize * 2);
        let peak = peak_frequency(&y, to as f64);
        assert!((peak / f - 1.0).abs() < 1e-3, "{from}->{to}: {peak}");
        let mid = &y[y.len() / 4..3 * y.len() / 4];
        let amp = mid.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((amp - 1.0).abs() < 0.01, "{from}->{to}: amplitude {amp}");
    }
}

#[test]
fn resampling_preserves_dc() {
    for (from, to) in [(44_100, 16_000), (16_000, 16_000), (512, 128), (128, 512)] {
        let y = resample(&vec![0.75; from as usize], from, to).unwrap();
        assert!(y.iter().all(|v| (v - 0.75).abs() < 1e-9), "{from}->{to}");
    }
}

#[test]
fn speech_preparation_keeps_a_low_tone() {
    let x = tone(100.0, 44_100.0, 44_100);
    let y = prepare_speech(&x, 44_100).unwrap();
    assert_eq!(y.len(), SPEECH_RATE as usize);
    let rms = |s: &[f64]| (s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64).sqrt();
    let ratio = rms(&y[1600..]) / rms(&x[4410..]);
    assert!((ratio - 1.0).abs() < 0.05, "{ratio}");
}

#[test]
fn speech_preparation_removes_content_above_the_cutoff() {
    let x = tone(12_000.0, 44_100.0, 44_100);
    let y = prepare_speech(&x, 44_100).unwrap();
    let rms = (y[1600..].iter().map(|v| v * v).sum::<f64>() / (y.len() - 1600) as f64).sqrt();
    assert!(rms < 0.02, "{rms}");
}

#[test]
fn spectrogram_shape_and_tone_bin() {
    let x = tone(1000.0, 16_000.0, 48_000);
    let s = stft_log_magnitude(&x).unwrap();
    assert_eq!(s.shape(), &[BINS, 248]);
    assert_eq!(frame_count(48_000, WINDOW, HOP), 248);
    for frame in [0, 100, 247] {
        let col: Vec<f64> = (0..BINS).map(|b| s.data()[b * 248 + frame]).collect();
        let peak = (0..BINS).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
        assert_eq!(peak, 32);
    }
    assert!(s.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
}

#[test]
fn hann_window_is_periodic() {
    let w = hann(8);
    assert_eq!(w[0], 0.0);
    assert!((w[4] - 1.0).abs() < 1e-15);
    for i in 1..8 {
        assert!((w[i] - w[8 - i]).abs() < 1e-15);
    }
}

#[test]
fn window_presets() {
    assert_eq!(preset_overlap(2).unwrap(), 1);
    assert_eq!(preset_overlap(3).unwrap(), 2);
    assert!(preset_overlap(4).is_err());
    let w = segment_windows(10.0, 3.0, 2.0).unwrap();
    assert_eq!(w.len(), 8);
    assert_eq!(w.last().unwrap().start_s, 7.0);
    assert!(segment_windows(1.5, 2.0, 1.0).unwrap().is_empty());
    assert!(segment_windows(5.0, 2.0, 2.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn windows_tile_the_signal(duration in 0.0f64..200.0, window in 1u32..6, overlap_frac in 0.0f64..0.95) {
        let window = window as f64;
        let overlap = (window * overlap_frac * 4.0).floor() / 4.0;
        let spans = segment_windows(duration, window, overlap).unwrap();
        let hop = window - overlap;
        for (k, s) in spans.iter().enumerate() {
            prop_assert!((s.start_s - k as f64 * hop).abs() < 1e-9);
            prop_assert!(s.start_s + s.length_s <= duration + 1e-9);
        }
        // No further window would fit.
        let next = spans.len() as f64 * hop;
        prop_assert!(next + window > duration - 1e-9);
    }

    #[test]
    fn repeat_truncate_repeats_the_start(rows in 1usize..4, rate in prop::sample::select(vec![4.0, 128.0, 16_000.0]), seed in any::<u64>()) {
        let len = (2.0 * rate) as usize;
        let data: Vec<f64> = (0..rows * len).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64).collect();
        let t = Tensor::new(vec![rows, len], data).unwrap();
        let out = repeat_truncate(&t, rate).unwrap();
        let out_len = (3.0 * rate) as usize;
        prop_assert_eq!(out.shape(), &[rows, out_len][..]);
        for r in 0..rows {
            let (src, dst) = (t.row(r), out.row(r));
            prop_assert_eq!(&dst[..len], src);
            prop_assert_eq!(&dst[len..], &src[..out_len - len]);
        }
    }

    #[test]
    fn repeat_truncate_rejects_other_lengths(extra in 1usize..10) {
        let t = Tensor::zeros(vec![256 + extra]).unwrap();
        prop_assert!(repeat_truncate(&t, 128.0).is_err());
    }
}
