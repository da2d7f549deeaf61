//! Five-band EEG filter bank over a fixed ten-electrode montage.

use std::collections::HashSet;

use tmc_core::Tensor;

use crate::filter::{design_cheby2, FilterKind};
use crate::resample::resample;
use crate::{par_map, DspError, Result};

pub const CHANNELS: [&str; 10] = ["F7", "F3", "F4", "F8", "T7", "C3", "Cz", "C4", "T8", "Pz"];

/// Delta, theta, alpha, beta and low-gamma, in Hz.
pub const BANDS: [(f64, f64); 5] = [(1.0, 4.0), (4.0, 8.0), (8.0, 12.0), (12.0, 30.0), (30.0, 50.0)];

/// Rate of the filter-bank output.
pub const FEATURE_RATE: u32 = 128;
pub const FILTER_ORDER: usize = 8;
pub const STOPBAND_DB: f64 = 40.0;

#[derive(Clone, Debug, PartialEq)]
pub struct EegRecording {
    channels: Vec<String>,
    sample_rate: u32,
    data: Vec<Vec<f64>>,
}

impl EegRecording {
    pub fn new(channels: Vec<String>, sample_rate: u32, data: Vec<Vec<f64>>) -> Result<Self> {
        if channels.len() != data.len() {
            return Err(DspError::Contract(format!(
                "{} channel names for {} signals",
                channels.len(),
                data.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = channels.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(DspError::Contract(format!("duplicate channel name `{dup}`")));
        }
        if data.windows(2).any(|w| w[0].len() != w[1].len()) {
            return Err(DspError::Contract("channels differ in length".into()));
        }
        if sample_rate == 0 {
            return Err(DspError::Contract("sample rate must be positive".into()));
        }
        Ok(EegRecording {
            channels,
            sample_rate,
            data,
        })
    }

    /// Builds a recording from a `[channels, time]` tensor.
    pub fn from_tensor(channels: Vec<String>, sample_rate: u32, t: &Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(DspError::Contract(format!("EEG must be [channels, time], got {:?}", t.shape())));
        }
        let rows = (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect();
        Self::new(channels, sample_rate, rows)
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.data.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn channel(&self, name: &str) -> Option<&[f64]> {
        self.channels.iter().position(|c| c == name).map(|i| self.data[i].as_slice())
    }
}

/// Band-filters the ten montage channels and resamples each band to
/// [`FEATURE_RATE`], giving a `[5, 10, time]` tensor.
pub fn eeg_filter_bank(r: &EegRecording) -> Result<Tensor> {
    if r.sample_rate < FEATURE_RATE {
        return Err(DspError::Contract(format!(
            "EEG sampled at {} Hz, below the {FEATURE_RATE} Hz feature rate",
            r.sample_rate
        )));
    }
    let signals: Vec<&[f64]> = CHANNELS
        .iter()
        .map(|&c| r.channel(c).ok_or_else(|| DspError::MissingChannel(c.to_string())))
        .collect::<Result<_>>()?;
    let filters: Vec<_> = BANDS
        .iter()
        .map(|&(lo, hi)| design_cheby2(FilterKind::Bandpass, FILTER_ORDER, &[lo, hi], STOPBAND_DB, r.sample_rate as f64))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..BANDS.len())
        .flat_map(|b| (0..CHANNELS.len()).map(move |c| (b, c)))
        .collect();
    let outputs = par_map(&jobs, |&(b, c)| resample(&filters[b].apply(signals[c]), r.sample_rate, FEATURE_RATE));
    let mut data = Vec::new();
    let mut len = None;
    for out in outputs {
        let out = out?;
        len.get_or_insert(out.len());
        data.extend(out);
    }
    let t = len.unwrap_or(0);
    if t == 0 {
        return Err(DspError::Contract("EEG recording is empty".into()));
    }
    Ok(Tensor::new(vec![BANDS.len(), CHANNELS.len(), t], data)?)
}
