//! Chebyshev type-II IIR design and second-order-section filtering.
//!
//! Design follows the usual analog-prototype route: the normalised type-II
//! prototype (stopband edge at 1 rad/s), a frequency transform to the
//! prewarped edges, the bilinear transform, and pairing of conjugate roots
//! into biquads. Edges name the frequencies where the response first reaches
//! the stopband attenuation.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::{DspError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterKind {
    Lowpass,
    Bandpass,
}

/// One biquad: `[b0, b1, b2, 1, a1, a2]`.
pub type Section = [f64; 6];

#[derive(Clone, Debug, PartialEq)]
pub struct IirFilter {
    pub kind: FilterKind,
    pub order: usize,
    pub edges_hz: Vec<f64>,
    pub stopband_atten_db: f64,
    pub sample_rate: f64,
    pub sections: Vec<Section>,
}

struct Zpk {
    zeros: Vec<Complex64>,
    poles: Vec<Complex64>,
    gain: f64,
}

fn prototype(order: usize, atten_db: f64) -> Zpk {
    let n = order as f64;
    let de = 1.0 / (10f64.powf(0.1 * atten_db) - 1.0).sqrt();
    let mu = (1.0 / de).asinh() / n;
    let ms: Vec<f64> = if order % 2 == 1 {
        (0..order - 1)
            .map(|i| -(n - 1.0) + 2.0 * i as f64)
            .filter(|&m| m != 0.0)
            .collect()
    } else {
        (0..order).map(|i| -(n - 1.0) + 2.0 * i as f64).collect()
    };
    let zeros: Vec<Complex64> = ms
        .iter()
        .map(|&m| (Complex64::i() / (m * PI / (2.0 * n)).sin()).conj() * -1.0)
        .collect();
    let poles: Vec<Complex64> = (0..order)
        .map(|i| {
            let m = -(n - 1.0) + 2.0 * i as f64;
            let p = -(Complex64::i() * PI * m / (2.0 * n)).exp();
            let warped = Complex64::new(mu.sinh() * p.re, mu.cosh() * p.im);
            1.0 / warped
        })
        .collect();
    let prod = |v: &[Complex64]| v.iter().fold(Complex64::new(1.0, 0.0), |acc, &x| acc * -x);
    let gain = (prod(&poles) / prod(&zeros)).re;
    Zpk { zeros, poles, gain }
}

fn to_lowpass(z: Zpk, wo: f64) -> Zpk {
    let degree = z.poles.len() as i32 - z.zeros.len() as i32;
    Zpk {
        zeros: z.zeros.iter().map(|&x| x * wo).collect(),
        poles: z.poles.iter().map(|&x| x * wo).collect(),
        gain: z.gain * wo.powi(degree),
    }
}

fn to_bandpass(z: Zpk, wo: f64, bw: f64) -> Zpk {
    let degree = z.poles.len() - z.zeros.len();
    let split = |roots: &[Complex64]| -> Vec<Complex64> {
        let scaled: Vec<Complex64> = roots.iter().map(|&r| r * (bw / 2.0)).collect();
        let root = |r: Complex64| (r * r - wo * wo).sqrt();
        scaled
            .iter()
            .map(|&r| r + root(r))
            .chain(scaled.iter().map(|&r| r - root(r)))
            .collect()
    };
    let mut zeros = split(&z.zeros);
    zeros.extend(std::iter::repeat_n(Complex64::new(0.0, 0.0), degree));
    Zpk {
        zeros,
        poles: split(&z.poles),
        gain: z.gain * bw.powi(degree as i32),
    }
}

fn bilinear(z: Zpk, fs: f64) -> Zpk {
    let fs2 = 2.0 * fs;
    let degree = z.poles.len() - z.zeros.len();
    let map = |r: &Complex64| (fs2 + r) / (fs2 - r);
    let num = z.zeros.iter().fold(Complex64::new(1.0, 0.0), |acc, r| acc * (fs2 - r));
    let den = z.poles.iter().fold(Complex64::new(1.0, 0.0), |acc, r| acc * (fs2 - r));
    let mut zeros: Vec<Complex64> = z.zeros.iter().map(map).collect();
    zeros.extend(std::iter::repeat_n(Complex64::new(-1.0, 0.0), degree));
    Zpk {
        zeros,
        poles: z.poles.iter().map(map).collect(),
        gain: z.gain * (num / den).re,
    }
}

/// Groups roots into quadratic factors `[1, c1, c2]`: conjugate pairs first,
/// then leftover real roots two at a time. Each factor keeps a representative
/// root for pairing.
fn quadratics(roots: &[Complex64]) -> Vec<([f64; 3], Complex64)> {
    let tol = 1e-9;
    let mut complex: Vec<Complex64> = roots.iter().copied().filter(|r| r.im > tol).collect();
    let mut real: Vec<f64> = roots.iter().filter(|r| r.im.abs() <= tol).map(|r| r.re).collect();
    complex.sort_by(|a, b| b.norm().total_cmp(&a.norm()).then(a.re.total_cmp(&b.re)));
    real.sort_by(|a, b| b.abs().total_cmp(&a.abs()));
    let mut out: Vec<([f64; 3], Complex64)> = complex
        .into_iter()
        .map(|r| ([1.0, -2.0 * r.re, r.norm_sqr()], r))
        .collect();
    for pair in real.chunks(2) {
        match *pair {
            [a, b] => out.push(([1.0, -(a + b), a * b], Complex64::new(a, 0.0))),
            [a] => out.push(([1.0, -a, 0.0], Complex64::new(a, 0.0))),
            _ => unreachable!(),
        }
    }
    out
}

fn to_sections(z: &Zpk) -> Result<Vec<Section>> {
    let pole_q = quadratics(&z.poles);
    let mut zero_q = quadratics(&z.zeros);
    if pole_q.len() < zero_q.len() {
        return Err(DspError::Design("more zero sections than pole sections".into()));
    }
    // Poles closest to the unit circle come first here; each takes the
    // nearest remaining zero factor and the cascade is then reversed so
    // those sharpest sections run last.
    let mut sections = Vec::with_capacity(pole_q.len());
    for (a, p) in &pole_q {
        let b = if zero_q.is_empty() {
            [1.0, 0.0, 0.0]
        } else {
            let (idx, _) = zero_q
                .iter()
                .enumerate()
                .min_by(|(_, (_, x)), (_, (_, y))| (x - p).norm().total_cmp(&(y - p).norm()))
                .expect("non-empty");
            zero_q.swap_remove(idx).0
        };
        sections.push([b[0], b[1], b[2], 1.0, a[1], a[2]]);
    }
    sections.reverse();
    if let Some(first) = sections.first_mut() {
        for c in &mut first[..3] {
            *c *= z.gain;
        }
    }
    Ok(sections)
}

/// Designs a Chebyshev type-II filter with the given analog-prototype order.
/// A bandpass of order `n` therefore has `2n` poles.
pub fn design_cheby2(kind: FilterKind, order: usize, edges_hz: &[f64], stopband_atten_db: f64, sample_rate: f64) -> Result<IirFilter> {
    if order == 0 || order % 2 == 1 {
        return Err(DspError::Design(format!("order must be a positive even number, got {order}")));
    }
    if !(stopband_atten_db > 0.0) || !(sample_rate > 0.0) {
        return Err(DspError::Design(format!(
            "attenuation {stopband_atten_db} dB and sample rate {sample_rate} Hz must be positive"
        )));
    }
    let nyquist = sample_rate / 2.0;
    let expected = match kind {
        FilterKind::Lowpass => 1,
        FilterKind::Bandpass => 2,
    };
    if edges_hz.len() != expected {
        return Err(DspError::Design(format!("{kind:?} needs {expected} edge(s), got {}", edges_hz.len())));
    }
    if let Some(bad) = edges_hz.iter().find(|&&e| !(e > 0.0 && e < nyquist)) {
        return Err(DspError::Design(format!(
            "edge {bad} Hz outside (0, {nyquist}) at {sample_rate} Hz sampling"
        )));
    }
    if kind == FilterKind::Bandpass && edges_hz[0] >= edges_hz[1] {
        return Err(DspError::Design(format!("band edges {edges_hz:?} must ascend")));
    }
    let warp = |f: f64| 2.0 * sample_rate * (PI * f / sample_rate).tan();
    let proto = prototype(order, stopband_atten_db);
    let analog = match kind {
        FilterKind::Lowpass => to_lowpass(proto, warp(edges_hz[0])),
        FilterKind::Bandpass => {
            let (w1, w2) = (warp(edges_hz[0]), warp(edges_hz[1]));
            to_bandpass(proto, (w1 * w2).sqrt(), w2 - w1)
        }
    };
    let digital = bilinear(analog, sample_rate);
    if let Some(p) = digital.poles.iter().find(|p| p.norm() >= 1.0) {
        return Err(DspError::Design(format!("unstable design: pole at radius {}", p.norm())));
    }
    let filter = IirFilter {
        kind,
        order,
        edges_hz: edges_hz.to_vec(),
        stopband_atten_db,
        sample_rate,
        sections: to_sections(&digital)?,
    };
    if filter.max_pole_radius() >= 1.0 {
        return Err(DspError::Design("unstable section after pairing".into()));
    }
    Ok(filter)
}

impl IirFilter {
    /// Complex response at `freq_hz`.
    pub fn response(&self, freq_hz: f64) -> Complex64 {
        let w = 2.0 * PI * freq_hz / self.sample_rate;
        let e1 = Complex64::from_polar(1.0, -w);
        let e2 = e1 * e1;
        self.sections.iter().fold(Complex64::new(1.0, 0.0), |acc, s| {
            acc * (s[0] + s[1] * e1 + s[2] * e2) / (s[3] + s[4] * e1 + s[5] * e2)
        })
    }

    pub fn gain_db(&self, freq_hz: f64) -> f64 {
        20.0 * self.response(freq_hz).norm().log10()
    }

    /// Poles of every section.
    pub fn poles(&self) -> Vec<Complex64> {
        self.sections
            .iter()
            .flat_map(|s| {
                let (a1, a2) = (s[4], s[5]);
                let disc = Complex64::new(a1 * a1 - 4.0 * a2, 0.0).sqrt();
                [(-a1 + disc) / 2.0, (-a1 - disc) / 2.0]
            })
            .collect()
    }

    pub fn max_pole_radius(&self) -> f64 {
        self.poles().iter().map(|p| p.norm()).fold(0.0, f64::max)
    }

    /// Causal filtering from rest, transposed direct form II per section.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for s in &self.sections {
            let (mut z1, mut z2) = (0.0, 0.0);
            for v in y.iter_mut() {
                let input = *v;
                let out = s[0] * input + z1;
                z1 = s[1] * input - s[4] * out + z2;
                z2 = s[2] * input - s[5] * out;
                *v = out;
            }
        }
        y
    }
}
