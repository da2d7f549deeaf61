//! Synthetic cocktail-party data with a known latent structure.
//!
//! Each sample draws an attended source `z*` and a distractor `z_d` from N(0, I).
//! EEG is `A z* + ε`, the attended speech `B z* + ε` and the unattended speech
//! `B z_d + ε`, where `A` and `B` are fixed random maps. The attended speech is
//! placed at position 1 or 2 at random.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::parallel::Execution;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub latent_dim_true: usize,
    pub eeg_dim: usize,
    pub speech_dim: usize,
    pub noise_std: f64,
    /// Overrides `noise_std` for the EEG view.
    pub eeg_noise_std: Option<f64>,
    /// Overrides `noise_std` for both speech views.
    pub speech_noise_std: Option<f64>,
    pub n_samples: usize,
    /// Probability that speech 1 is the attended one (label 0).
    pub balance: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            latent_dim_true: 8,
            eeg_dim: 40,
            speech_dim: 60,
            noise_std: 0.3,
            eeg_noise_std: None,
            speech_noise_std: None,
            n_samples: 6000,
            balance: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn eeg_noise(&self) -> f64 {
        self.eeg_noise_std.unwrap_or(self.noise_std)
    }

    pub fn speech_noise(&self) -> f64 {
        self.speech_noise_std.unwrap_or(self.noise_std)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim_true < 1 || self.eeg_dim < 1 || self.speech_dim < 1 {
            return Err(Error::Config("synthetic dimensions must be at least 1".into()));
        }
        if self.n_samples < 1 {
            return Err(Error::Config("n_samples must be at least 1".into()));
        }
        for (name, v) in [("eeg", self.eeg_noise()), ("speech", self.speech_noise())] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} noise std must be non-negative, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.balance) {
            return Err(Error::Config(format!("balance {} outside [0, 1]", self.balance)));
        }
        Ok(())
    }
}

/// Generated samples together with their ground-truth latents.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub data: Dataset,
    /// `[n, latent_dim_true]` attended sources.
    pub z_true: Tensor,
    /// `[n, latent_dim_true]` distractor sources.
    pub z_distract: Tensor,
    /// `[latent_dim_true, eeg_dim]`.
    pub eeg_map: Tensor,
    /// `[latent_dim_true, speech_dim]`.
    pub speech_map: Tensor,
}

/// Stream 0 holds the maps; sample `i` reads stream `i + 1`, so each sample is
/// a pure function of `(seed, i)` and generation order does not matter.
fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn normals<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Row-vector times matrix: `z [k] · m [k, n]`.
fn project(z: &[f64], m: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (i, &zi) in z.iter().enumerate() {
        for (o, &w) in out.iter_mut().zip(&m[i * n..(i + 1) * n]) {
            *o += zi * w;
        }
    }
    out
}

struct Draw {
    z: Vec<f64>,
    zd: Vec<f64>,
    eeg: Vec<f64>,
    attended: Vec<f64>,
    unattended: Vec<f64>,
    label: u8,
}

pub fn generate(config: &SynthConfig, exec: Execution) -> Result<SynthDataset> {
    config.validate()?;
    let (k, de, ds) = (config.latent_dim_true, config.eeg_dim, config.speech_dim);
    let scale = 1.0 / (k as f64).sqrt();
    let mut maps = stream(config.seed, 0);
    let a: Vec<f64> = normals(&mut maps, k * de).iter().map(|v| v * scale).collect();
    let b: Vec<f64> = normals(&mut maps, k * ds).iter().map(|v| v * scale).collect();
    let (ne, ns) = (config.eeg_noise(), config.speech_noise());

    let draws = exec.map_range(config.n_samples, |i| {
        let mut rng = stream(config.seed, i as u64 + 1);
        let z = normals(&mut rng, k);
        let zd = normals(&mut rng, k);
        let mut noisy = |clean: Vec<f64>, std: f64| -> Vec<f64> {
            clean
                .into_iter()
                .map(|c| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    c + std * e
                })
                .collect()
        };
        let eeg = noisy(project(&z, &a, de), ne);
        let attended = noisy(project(&z, &b, ds), ns);
        let unattended = noisy(project(&zd, &b, ds), ns);
        let label = if rng.random::<f64>() < config.balance { 0 } else { 1 };
        Draw {
            z,
            zd,
            eeg,
            attended,
            unattended,
            label,
        }
    });

    let n = config.n_samples;
    let mut eeg = Vec::with_capacity(n * de);
    let mut s1 = Vec::with_capacity(n * ds);
    let mut s2 = Vec::with_capacity(n * ds);
    let mut zt = Vec::with_capacity(n * k);
    let mut zd = Vec::with_capacity(n * k);
    let mut labels = Vec::with_capacity(n);
    for d in draws {
        eeg.extend(d.eeg);
        let (first, second) = if d.label == 0 {
            (d.attended, d.unattended)
        } else {
            (d.unattended, d.attended)
        };
        s1.extend(first);
        s2.extend(second);
        zt.extend(d.z);
        zd.extend(d.zd);
        labels.push(d.label);
    }
    Ok(SynthDataset {
        data: Dataset::new(
            Tensor::new(vec![n, de], eeg)?,
            Tensor::new(vec![n, ds], s1)?,
            Tensor::new(vec![n, ds], s2)?,
            Some(labels),
            (0..n as u64).collect(),
        )?,
        z_true: Tensor::new(vec![n, k], zt)?,
        z_distract: Tensor::new(vec![n, k], zd)?,
        eeg_map: Tensor::new(vec![k, de], a)?,
        speech_map: Tensor::new(vec![k, ds], b)?,
    })
}

/// Train, validation and test partitions of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &Dataset)> {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)].into_iter()
    }
}

/// Integer split sizes: totals rounded from `fractions`, then each class
/// distributed so that it lands within one sample of its proportional share.
fn allocate(class_sizes: &[usize], fractions: [f64; 3]) -> Vec<[usize; 3]> {
    let n: usize = class_sizes.iter().sum();
    let train = (fractions[0] * n as f64).round() as usize;
    let val = ((fractions[1] * n as f64).round() as usize).min(n - train);
    let totals = [train, val, n - train - val];
    let mut remaining = totals;
    let mut out = Vec::with_capacity(class_sizes.len());
    for (c, &size) in class_sizes.iter().enumerate() {
        if c + 1 == class_sizes.len() {
            out.push(remaining);
            break;
        }
        let ideal: Vec<f64> = totals.iter().map(|&t| size as f64 * t as f64 / n as f64).collect();
        let mut alloc: [usize; 3] = std::array::from_fn(|s| (ideal[s].floor() as usize).min(remaining[s]));
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&x, &y| {
            let fx = ideal[x] - ideal[x].floor();
            let fy = ideal[y] - ideal[y].floor();
            fy.total_cmp(&fx).then(x.cmp(&y))
        });
        let mut left = size - alloc.iter().sum::<usize>();
        for &s in order.iter().cycle().take(6) {
            if left == 0 {
                break;
            }
            if alloc[s] < remaining[s] {
                alloc[s] += 1;
                left -= 1;
            }
        }
        for s in 0..3 {
            remaining[s] -= alloc[s];
        }
        out.push(alloc);
    }
    out
}

/// Seeded, label-stratified split. Every partition must end up non-empty.
pub fn split(data: &Dataset, fractions: [f64; 3], seed: u64) -> Result<Splits> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!(
            "split fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    let classes: Vec<Vec<usize>> = match &data.labels {
        Some(labels) => (0..=1u8)
            .map(|c| (0..data.len()).filter(|&i| labels[i] == c).collect())
            .collect(),
        None => vec![(0..data.len()).collect()],
    };
    let sizes: Vec<usize> = classes.iter().map(Vec::len).collect();
    let alloc = allocate(&sizes, fractions);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (members, counts) in classes.into_iter().zip(alloc) {
        let mut members = members;
        members.shuffle(&mut rng);
        let mut start = 0;
        for (s, &c) in counts.iter().enumerate() {
            parts[s].extend_from_slice(&members[start..start + c]);
            start += c;
        }
    }
    let mut out = Vec::with_capacity(3);
    for (name, mut idx) in ["train", "val", "test"].into_iter().zip(parts) {
        if idx.is_empty() {
            return Err(Error::contract(format!("{name} split would be empty")));
        }
        idx.sort_unstable();
        out.push(data.select(&idx)?);
    }
    let [train, val, test]: [Dataset; 3] = out.try_into().expect("three splits");
    Ok(Splits { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, seed: u64) -> SynthDataset {
        generate(
            &SynthConfig {
                n_samples: n,
                seed,
                ..SynthConfig::default()
            },
            Execution::Sequential,
        )
        .unwrap()
    }

    #[test]
    fn shapes_follow_config() {
        let d = small(50, 1);
        assert_eq!(d.data.eeg.shape(), &[50, 40]);
        assert_eq!(d.data.speech1.shape(), &[50, 60]);
        assert_eq!(d.z_true.shape(), &[50, 8]);
    }

    #[test]
    fn same_seed_same_data() {
        assert_eq!(small(40, 3), small(40, 3));
        assert_ne!(small(40, 3).data, small(40, 4).data);
    }

    #[test]
    fn execution_mode_does_not_change_data() {
        let c = SynthConfig {
            n_samples: 64,
            ..SynthConfig::default()
        };
        assert_eq!(
            generate(&c, Execution::Sequential).unwrap(),
            generate(&c, Execution::Parallel).unwrap()
        );
    }

    #[test]
    fn noiseless_views_are_exact_images() {
        let c = SynthConfig {
            n_samples: 5,
            noise_std: 0.0,
            ..SynthConfig::default()
        };
        let d = generate(&c, Execution::Sequential).unwrap();
        let labels = d.data.labels().unwrap();
        for (i, &label) in labels.iter().enumerate().take(5) {
            let att = if label == 0 { d.data.speech1.row(i) } else { d.data.speech2.row(i) };
            let expected = project(d.z_true.row(i), d.speech_map.data(), 60);
            assert_eq!(att, expected.as_slice());
        }
    }

    #[test]
    fn split_sizes() {
        let d = small(1000, 2);
        let s = split(&d.data, [0.8, 0.1, 0.1], 9).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (800, 100, 100));
        assert!(split(&d.data, [0.5, 0.2, 0.2], 9).is_err());
        assert!(split(&d.data, [1.0, 0.0, 0.0], 9).is_err());
    }

    #[test]
    fn allocation_respects_totals() {
        let a = allocate(&[503, 497], [0.8, 0.1, 0.1]);
        assert_eq!(a[0].iter().sum::<usize>(), 503);
        assert_eq!(a[0][0] + a[1][0], 800);
        assert_eq!(a[0][1] + a[1][1], 100);
    }

    #[test]
    fn invalid_config() {
        let c = SynthConfig {
            balance: 1.5,
            ..SynthConfig::default()
        };
        assert!(matches!(generate(&c, Execution::Sequential), Err(Error::Config(_))));
    }
}
