//! Columnar multi-view datasets: one tensor per view with samples along axis 0.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The three views of a cocktail-party sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum View {
    Eeg,
    Speech1,
    Speech2,
}

impl View {
    pub const ALL: [View; 3] = [View::Eeg, View::Speech1, View::Speech2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            View::Eeg => "eeg",
            View::Speech1 => "speech1",
            View::Speech2 => "speech2",
        }
    }
}

/// Samples stored view by view. Label 0 means speech 1 is attended, 1 speech 2.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub eeg: Tensor,
    pub speech1: Tensor,
    pub speech2: Tensor,
    pub labels: Option<Vec<u8>>,
    /// Stable sample identifiers, carried through shuffles and splits.
    pub ids: Vec<u64>,
}

fn rows(t: &Tensor) -> usize {
    t.shape().first().copied().unwrap_or(0)
}

impl Dataset {
    pub fn new(
        eeg: Tensor,
        speech1: Tensor,
        speech2: Tensor,
        labels: Option<Vec<u8>>,
        ids: Vec<u64>,
    ) -> Result<Self> {
        let n = rows(&eeg);
        if eeg.rank() < 2 || speech1.rank() < 2 || speech2.rank() < 2 {
            return Err(Error::dim("view tensors need a sample axis and a feature axis"));
        }
        if rows(&speech1) != n || rows(&speech2) != n || ids.len() != n {
            return Err(Error::dim(format!(
                "sample counts differ: eeg {n}, speech1 {}, speech2 {}, ids {}",
                rows(&speech1),
                rows(&speech2),
                ids.len()
            )));
        }
        if speech1.shape() != speech2.shape() {
            return Err(Error::dim(format!(
                "speech views differ in shape: {:?} vs {:?}",
                speech1.shape(),
                speech2.shape()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::dim(format!("{} labels for {n} samples", l.len())));
            }
            if let Some(bad) = l.iter().find(|&&v| v > 1) {
                return Err(Error::Domain(format!("label {bad} is not 0 or 1")));
            }
        }
        Ok(Dataset {
            eeg,
            speech1,
            speech2,
            labels,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn view(&self, v: View) -> &Tensor {
        match v {
            View::Eeg => &self.eeg,
            View::Speech1 => &self.speech1,
            View::Speech2 => &self.speech2,
        }
    }

    /// Per-sample shape of a view.
    pub fn sample_shape(&self, v: View) -> &[usize] {
        &self.view(v).shape()[1..]
    }

    pub fn labels(&self) -> Result<&[u8]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::contract("dataset has no labels"))
    }

    /// The samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::contract("cannot select zero samples"));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::contract(format!(
                "sample index {bad} out of range for {} samples",
                self.len()
            )));
        }
        let take = |t: &Tensor| -> Result<Tensor> {
            let width: usize = t.shape()[1..].iter().product();
            let mut data = Vec::with_capacity(indices.len() * width);
            for &i in indices {
                data.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
            }
            let mut shape = t.shape().to_vec();
            shape[0] = indices.len();
            Tensor::new(shape, data)
        };
        Ok(Dataset {
            eeg: take(&self.eeg)?,
            speech1: take(&self.speech1)?,
            speech2: take(&self.speech2)?,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
        })
    }

    /// Contiguous slice `[start, end)`.
    pub fn range(&self, start: usize, end: usize) -> Result<Dataset> {
        self.select(&(start..end).collect::<Vec<_>>())
    }

    /// The same samples with the speech positions exchanged and labels flipped.
    pub fn swapped(&self) -> Dataset {
        Dataset {
            eeg: self.eeg.clone(),
            speech1: self.speech2.clone(),
            speech2: self.speech1.clone(),
            labels: self
                .labels
                .as_ref()
                .map(|l| l.iter().map(|v| 1 - v).collect()),
            ids: self.ids.clone(),
        }
    }

    pub fn without_labels(&self) -> Dataset {
        Dataset {
            labels: None,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let eeg = Tensor::new(vec![3, 2], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let s1 = Tensor::new(vec![3, 1], vec![10., 11., 12.]).unwrap();
        let s2 = Tensor::new(vec![3, 1], vec![20., 21., 22.]).unwrap();
        Dataset::new(eeg, s1, s2, Some(vec![0, 1, 0]), vec![7, 8, 9]).unwrap()
    }

    #[test]
    fn select_reorders_every_view() {
        let d = tiny().select(&[2, 0]).unwrap();
        assert_eq!(d.eeg.data(), &[4., 5., 0., 1.]);
        assert_eq!(d.speech2.data(), &[22., 20.]);
        assert_eq!(d.labels.as_deref(), Some(&[0u8, 0][..]));
        assert_eq!(d.ids, vec![9, 7]);
        assert!(tiny().select(&[3]).is_err());
    }

    #[test]
    fn swap_flips_labels() {
        let d = tiny().swapped();
        assert_eq!(d.speech1.data(), &[20., 21., 22.]);
        assert_eq!(d.labels.as_deref(), Some(&[1u8, 0, 1][..]));
    }

    #[test]
    fn rejects_bad_labels() {
        let d = tiny();
        let r = Dataset::new(d.eeg, d.speech1, d.speech2, Some(vec![0, 2, 0]), d.ids);
        assert!(matches!(r, Err(Error::Domain(_))));
    }
}
