//! Raw trials to decision-window features.
//!
//! A trial manifest is TOML. Top-level `eeg_rate`, `speech_rate` and
//! `eeg_channels` act as defaults for every `[[trials]]` entry:
//!
//! ```toml
//! eeg_rate = 512
//! speech_rate = 44100
//! eeg_channels = ["F7", "F3", "F4", "F8", "T7", "C3", "Cz", "C4", "T8", "Pz"]
//!
//! [[trials]]
//! id = "s01-t01"
//! split = "train"
//! label = 0
//! eeg = "s01-t01-eeg.mvt"      # [channels, time]
//! speech1 = "s01-t01-left.mvt"  # [time]
//! speech2 = "s01-t01-right.mvt"
//! ```
//!
//! Paths are relative to the manifest. Every window of a trial goes to that
//! trial's split, so overlapping windows never straddle train and test.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use tmc_core::data::Dataset;
use tmc_core::io::{self, Precision};
use tmc_core::mvt1::TensorFile;
use tmc_core::synth::Splits;
use tmc_core::Tensor;

use crate::filter::{design_cheby2, FilterKind};
use crate::filterbank::{eeg_filter_bank, EegRecording, FEATURE_RATE};
use crate::resample::resample;
use crate::stft::stft_log_magnitude;
use crate::window::{preset_overlap, repeat_truncate, segment_windows};
use crate::{par_map, DspError, Result};

pub const SPEECH_RATE: u32 = 16_000;
pub const ANTI_ALIAS_HZ: f64 = 8_000.0;
/// Largest tolerated disagreement between a trial's view durations.
pub const MAX_DURATION_MISMATCH_S: f64 = 1.0;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialManifest {
    pub eeg_rate: Option<u32>,
    pub speech_rate: Option<u32>,
    pub eeg_channels: Option<Vec<String>>,
    pub trials: Vec<TrialEntry>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialEntry {
    pub id: String,
    pub split: String,
    pub label: u8,
    pub eeg: PathBuf,
    pub speech1: PathBuf,
    pub speech2: PathBuf,
    pub eeg_rate: Option<u32>,
    pub speech_rate: Option<u32>,
    pub eeg_channels: Option<Vec<String>>,
}

impl TrialManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: TrialManifest = toml::from_str(text).map_err(|e| DspError::Manifest(e.message().replace('\n', " ")))?;
        if m.trials.is_empty() {
            return Err(DspError::Manifest("no [[trials]] entries".into()));
        }
        for t in &m.trials {
            let bad = |msg: String| Err(DspError::Manifest(msg).in_trial(&t.id));
            if !["train", "val", "test"].contains(&t.split.as_str()) {
                return bad(format!("split `{}` is not train, val or test", t.split));
            }
            if t.label > 1 {
                return bad(format!("label {} is not 0 or 1", t.label));
            }
            if t.eeg_rate.or(m.eeg_rate).is_none() {
                return bad("no eeg_rate declared".into());
            }
            if t.speech_rate.or(m.speech_rate).is_none() {
                return bad("no speech_rate declared".into());
            }
            if t.eeg_channels.as_ref().or(m.eeg_channels.as_ref()).is_none() {
                return bad("no eeg_channels declared".into());
            }
        }
        let mut ids: Vec<&str> = m.trials.iter().map(|t| t.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(DspError::Manifest(format!("trial id `{}` appears twice", w[0])));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| tmc_core::Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Features of one decision window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowFeatures {
    pub start_s: f64,
    /// `[5, 10, 384]`
    pub eeg: Tensor,
    /// `[1, 257, 248]` each
    pub speech1: Tensor,
    pub speech2: Tensor,
}

fn read_signal(path: &Path) -> Result<Vec<f64>> {
    let t = TensorFile::read(path)?.to_tensor()?;
    match t.shape() {
        [_] | [1, _] => Ok(t.into_data()),
        other => Err(DspError::Contract(format!(
            "{}: speech must be [time] or [1, time], got {other:?}",
            path.display()
        ))),
    }
}

/// Band-limits and resamples a speech signal to 16 kHz.
pub fn prepare_speech(x: &[f64], rate: u32) -> Result<Vec<f64>> {
    if rate > SPEECH_RATE {
        let lp = design_cheby2(FilterKind::Lowpass, 8, &[ANTI_ALIAS_HZ], 40.0, rate as f64)?;
        resample(&lp.apply(x), rate, SPEECH_RATE)
    } else {
        resample(x, rate, SPEECH_RATE)
    }
}

fn slice_last_axis(t: &Tensor, range: std::ops::Range<usize>) -> Result<Tensor> {
    let len = *t.shape().last().expect("feature tensors have rank >= 1");
    let rows = t.numel() / len;
    let mut data = Vec::with_capacity(rows * range.len());
    for r in 0..rows {
        data.extend_from_slice(&t.data()[r * len + range.start..r * len + range.end]);
    }
    let mut shape = t.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = range.len();
    Ok(Tensor::new(shape, data)?)
}

fn speech_window(wave: &[f64], range: std::ops::Range<usize>, window_s: u32) -> Result<Tensor> {
    let mut w = Tensor::new(vec![range.len()], wave[range].to_vec())?;
    if window_s == 2 {
        w = repeat_truncate(&w, SPEECH_RATE as f64)?;
    }
    let spec = stft_log_magnitude(w.data())?;
    let shape = [1, spec.shape()[0], spec.shape()[1]];
    Ok(spec.reshape(shape.to_vec())?)
}

/// Windowed features for one trial whose signals are already in memory.
pub fn trial_windows(eeg: &EegRecording, speech1: &[f64], speech2: &[f64], speech_rate: u32, window_s: u32) -> Result<Vec<WindowFeatures>> {
    let overlap = preset_overlap(window_s)?;
    let bank = eeg_filter_bank(eeg)?;
    let s1 = prepare_speech(speech1, speech_rate)?;
    let s2 = prepare_speech(speech2, speech_rate)?;
    let durations = [
        eeg.duration_s(),
        speech1.len() as f64 / speech_rate as f64,
        speech2.len() as f64 / speech_rate as f64,
    ];
    let longest = durations.iter().copied().fold(f64::MIN, f64::max);
    let shortest = durations.iter().copied().fold(f64::MAX, f64::min);
    if longest - shortest > MAX_DURATION_MISMATCH_S {
        return Err(DspError::Contract(format!(
            "view durations {durations:?} s disagree; check the declared sample rates"
        )));
    }
    let available = [
        bank.shape()[2] as f64 / FEATURE_RATE as f64,
        s1.len() as f64 / SPEECH_RATE as f64,
        s2.len() as f64 / SPEECH_RATE as f64,
    ]
    .into_iter()
    .fold(f64::MAX, f64::min);
    segment_windows(available, window_s as f64, overlap as f64)?
        .into_iter()
        .map(|span| {
            let mut e = slice_last_axis(&bank, span.samples(FEATURE_RATE as f64))?;
            if window_s == 2 {
                e = repeat_truncate(&e, FEATURE_RATE as f64)?;
            }
            let range = span.samples(SPEECH_RATE as f64);
            Ok(WindowFeatures {
                start_s: span.start_s,
                eeg: e,
                speech1: speech_window(&s1, range.clone(), window_s)?,
                speech2: speech_window(&s2, range, window_s)?,
            })
        })
        .collect()
}

fn process_trial(m: &TrialManifest, t: &TrialEntry, base: &Path, window_s: u32) -> Result<Vec<WindowFeatures>> {
    let eeg_rate = t.eeg_rate.or(m.eeg_rate).expect("checked at parse");
    let speech_rate = t.speech_rate.or(m.speech_rate).expect("checked at parse");
    let channels = t.eeg_channels.clone().or_else(|| m.eeg_channels.clone()).expect("checked at parse");
    let eeg_t = TensorFile::read(&base.join(&t.eeg))?.to_tensor()?;
    let eeg = EegRecording::from_tensor(channels, eeg_rate, &eeg_t)?;
    let s1 = read_signal(&base.join(&t.speech1))?;
    let s2 = read_signal(&base.join(&t.speech2))?;
    trial_windows(&eeg, &s1, &s2, speech_rate, window_s)
}

/// Summary of a preprocessing run.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub trials: usize,
    pub windows: usize,
    pub content_hash: String,
}

fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(parts[0].shape());
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Ok(Tensor::new(shape, data)?)
}

/// Runs the full pipeline for every trial in the manifest and writes a
/// dataset directory plus `windows.csv` (`window_id,trial_id,start_s,label`).
pub fn run(manifest_path: &Path, window_s: u32, out: &Path) -> Result<Report> {
    preset_overlap(window_s)?;
    let manifest = TrialManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let results = par_map(&manifest.trials, |t| {
        process_trial(&manifest, t, base, window_s).map_err(|e| e.in_trial(&t.id))
    });
    let mut per_split: [Vec<(u64, u8, WindowFeatures)>; 3] = Default::default();
    let mut index = String::from("window_id,trial_id,start_s,label\n");
    let mut next_id = 0u64;
    for (t, windows) in manifest.trials.iter().zip(results) {
        let windows = windows?;
        if windows.is_empty() {
            log::warn!("trial {} is shorter than one {window_s} s window", t.id);
        }
        let slot = ["train", "val", "test"].iter().position(|s| *s == t.split).expect("checked at parse");
        for w in windows {
            let _ = writeln!(index, "{next_id},{},{},{}", t.id, w.start_s, t.label);
            per_split[slot].push((next_id, t.label, w));
            next_id += 1;
        }
    }
    let build = |name: &str, items: &[(u64, u8, WindowFeatures)]| -> Result<Dataset> {
        if items.is_empty() {
            return Err(DspError::Manifest(format!("split `{name}` received no windows")));
        }
        let eeg = stack(&items.iter().map(|(_, _, w)| &w.eeg).collect::<Vec<_>>())?;
        let s1 = stack(&items.iter().map(|(_, _, w)| &w.speech1).collect::<Vec<_>>())?;
        let s2 = stack(&items.iter().map(|(_, _, w)| &w.speech2).collect::<Vec<_>>())?;
        let labels = items.iter().map(|(_, l, _)| *l).collect();
        let ids = items.iter().map(|(id, _, _)| *id).collect();
        Ok(Dataset::new(eeg, s1, s2, Some(labels), ids)?)
    };
    let splits = Splits {
        train: build("train", &per_split[0])?,
        val: build("val", &per_split[1])?,
        test: build("test", &per_split[2])?,
    };
    let written = io::write_dataset(out, &splits, "preprocessed", Precision::F64)?;
    let csv = out.join("windows.csv");
    fs::write(&csv, index).map_err(|e| tmc_core::Error::io(&csv, e))?;
    Ok(Report {
        trials: manifest.trials.len(),
        windows: next_id as usize,
        content_hash: written.content_hash,
    })
}
