//! Signal preprocessing for auditory-attention data: Chebyshev type-II
//! filtering, resampling, log spectrograms of speech, band filter banks of
//! EEG, and decision-window segmentation into a trainable dataset.

// Validation deliberately uses `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod filter;
pub mod filterbank;
pub mod pipeline;
pub mod resample;
pub mod stft;
pub mod window;

pub use filter::{design_cheby2, FilterKind, IirFilter};
pub use filterbank::{eeg_filter_bank, EegRecording};
pub use resample::resample;
pub use stft::stft_log_magnitude;
pub use window::{repeat_truncate, segment_windows, WindowSpan};

#[derive(Debug, thiserror::Error)]
pub enum DspError {
    #[error("filter design failed: {0}")]
    Design(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("missing EEG channel `{0}`")]
    MissingChannel(String),
    #[error("invalid trial manifest: {0}")]
    Manifest(String),
    #[error("trial `{trial}`: {source}")]
    Trial {
        trial: String,
        #[source]
        source: Box<DspError>,
    },
    #[error(transparent)]
    Core(#[from] tmc_core::Error),
}

impl DspError {
    pub fn kind(&self) -> &'static str {
        match self {
            DspError::Design(_) => "design",
            DspError::Contract(_) => "contract",
            DspError::MissingChannel(_) => "channel",
            DspError::Manifest(_) => "config",
            DspError::Trial { source, .. } => source.kind(),
            DspError::Core(e) => e.kind(),
        }
    }

    /// True for errors caused by the manifest itself rather than the data it points to.
    pub fn is_config(&self) -> bool {
        match self {
            DspError::Manifest(_) => true,
            DspError::Trial { source, .. } => source.is_config(),
            DspError::Core(e) => matches!(e, tmc_core::Error::Config(_)),
            _ => false,
        }
    }

    fn in_trial(self, trial: &str) -> DspError {
        DspError::Trial {
            trial: trial.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, DspError>;

#[cfg(feature = "parallel")]
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    items.iter().map(f).collect()
}
