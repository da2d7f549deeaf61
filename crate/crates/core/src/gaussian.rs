//! Diagonal-Gaussian posterior algebra: product-of-experts, uniform mixtures over
//! view subsets, KL to the standard normal prior, and reparameterized sampling.
//!
//! The batched, differentiable forms (`*_node`) operate on `[batch, dim]` tape
//! values and are what the model trains through. The value-level functions wrap
//! them for single posteriors, so both paths share one implementation.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Log-variances are clamped into this range before being exponentiated for sampling.
pub const LOG_VARIANCE_MIN: f64 = -20.0;
pub const LOG_VARIANCE_MAX: f64 = 20.0;

#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalGaussian {
    mean: Vec<f64>,
    log_variance: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, log_variance: Vec<f64>) -> Result<Self> {
        if mean.len() != log_variance.len() {
            return Err(Error::dim(format!(
                "mean has {} entries, log-variance {}",
                mean.len(),
                log_variance.len()
            )));
        }
        if mean.is_empty() {
            return Err(Error::dim("zero-dimensional Gaussian"));
        }
        if !mean.iter().chain(&log_variance).all(|v| v.is_finite()) {
            return Err(Error::Domain("non-finite Gaussian parameter".into()));
        }
        Ok(DiagonalGaussian { mean, log_variance })
    }

    pub fn from_variance(mean: Vec<f64>, variance: &[f64]) -> Result<Self> {
        if let Some(v) = variance.iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain(format!("variance {v} is not positive")));
        }
        Self::new(mean, variance.iter().map(|v| v.ln()).collect())
    }

    /// The isotropic prior N(0, I).
    pub fn standard(dim: usize) -> Self {
        DiagonalGaussian {
            mean: vec![0.0; dim],
            log_variance: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_variance(&self) -> &[f64] {
        &self.log_variance
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_variance.iter().map(|v| v.exp()).collect()
    }

    fn canonical_cmp(&self, other: &Self) -> Ordering {
        let key = |g: &Self| {
            g.log_variance
                .iter()
                .chain(&g.mean)
                .copied()
                .collect::<Vec<f64>>()
        };
        key(self)
            .iter()
            .zip(key(other).iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    }
}

/// Non-empty set of view indices, stored as a bitmask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ViewSubset(u32);

impl ViewSubset {
    pub fn new(mask: u32) -> Result<Self> {
        if mask == 0 {
            return Err(Error::contract("empty view subset"));
        }
        Ok(ViewSubset(mask))
    }

    pub fn of(views: &[usize]) -> Result<Self> {
        if let Some(v) = views.iter().find(|&&v| v >= 32) {
            return Err(Error::contract(format!("view index {v} too large")));
        }
        Self::new(views.iter().fold(0, |m, &v| m | (1 << v)))
    }

    pub fn mask(self) -> u32 {
        self.0
    }

    pub fn contains(self, view: usize) -> bool {
        view < 32 && self.0 & (1 << view) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        false
    }

    /// Member views in ascending order.
    pub fn views(self) -> Vec<usize> {
        (0..32).filter(|&v| self.contains(v)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Product of experts over the full view set.
    Poe,
    /// Uniform mixture of the single-view posteriors.
    Moe,
    /// Uniform mixture of products over every non-empty subset.
    Mopoe,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Poe, FusionMode::Moe, FusionMode::Mopoe];
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Poe => "poe",
            FusionMode::Moe => "moe",
            FusionMode::Mopoe => "mopoe",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poe" => Ok(FusionMode::Poe),
            "moe" => Ok(FusionMode::Moe),
            "mopoe" => Ok(FusionMode::Mopoe),
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

/// Subsets whose products form the mixture components, in ascending bitmask order.
pub fn enumerate_subsets(num_views: usize, mode: FusionMode) -> Result<Vec<ViewSubset>> {
    if num_views < 1 {
        return Err(Error::contract("need at least one view"));
    }
    if num_views > 16 {
        return Err(Error::contract(format!("{num_views} views is too many to enumerate")));
    }
    let full = (1u32 << num_views) - 1;
    Ok(match mode {
        FusionMode::Poe => vec![ViewSubset(full)],
        FusionMode::Moe => (0..num_views).map(|v| ViewSubset(1 << v)).collect(),
        FusionMode::Mopoe => (1..=full).map(ViewSubset).collect(),
    })
}

/// Uniformly weighted mixture of diagonal Gaussians of one dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct MixturePosterior {
    components: Vec<DiagonalGaussian>,
}

impl MixturePosterior {
    pub fn new(components: Vec<DiagonalGaussian>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::contract("mixture needs at least one component"))?;
        if components.iter().any(|c| c.dim() != first.dim()) {
            return Err(Error::dim("mixture components differ in dimension"));
        }
        Ok(MixturePosterior { components })
    }

    pub fn components(&self) -> &[DiagonalGaussian] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    /// Mean of the mixture: the average of the component means.
    pub fn mean(&self) -> Vec<f64> {
        let k = self.components.len() as f64;
        let mut out = vec![0.0; self.dim()];
        for c in &self.components {
            for (o, m) in out.iter_mut().zip(c.mean()) {
                *o += m;
            }
        }
        out.iter_mut().for_each(|o| *o /= k);
        out
    }
}

/// A batch of diagonal Gaussians recorded on a tape; both fields are `[batch, dim]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GaussianNode {
    pub mean: Var,
    pub log_variance: Var,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixtureNode {
    pub components: Vec<GaussianNode>,
}

/// Precision-weighted product, optionally including the N(0, I) prior:
/// precision = Σ exp(-logvar_i) (+ 1), mean = Σ precision_i · mean_i / precision.
pub fn poe_node(tape: &mut Tape, experts: &[GaussianNode], include_prior: bool) -> Result<GaussianNode> {
    let first = experts
        .first()
        .ok_or_else(|| Error::contract("product of experts needs at least one expert"))?;
    let shape = tape.shape(first.mean).to_vec();
    for e in experts {
        if tape.shape(e.mean) != shape.as_slice() || tape.shape(e.log_variance) != shape.as_slice() {
            return Err(Error::dim(format!(
                "expert shapes differ: {:?} vs {:?}/{:?}",
                shape,
                tape.shape(e.mean),
                tape.shape(e.log_variance)
            )));
        }
    }
    let mut precision: Option<Var> = None;
    let mut weighted: Option<Var> = None;
    for e in experts {
        let neg = tape.neg(e.log_variance);
        let p = tape.exp(neg);
        let pm = tape.mul(p, e.mean)?;
        precision = Some(match precision {
            Some(acc) => tape.add(acc, p)?,
            None => p,
        });
        weighted = Some(match weighted {
            Some(acc) => tape.add(acc, pm)?,
            None => pm,
        });
    }
    let mut precision = precision.expect("non-empty");
    if include_prior {
        precision = tape.offset(precision, 1.0)?;
    }
    let log_precision = tape.log(precision)?;
    let log_variance = tape.neg(log_precision);
    let variance = tape.exp(log_variance);
    let mean = tape.mul(weighted.expect("non-empty"), variance)?;
    Ok(GaussianNode { mean, log_variance })
}

/// One prior-including product per subset, as a uniform mixture.
pub fn fuse_nodes(tape: &mut Tape, posteriors: &[GaussianNode], subsets: &[ViewSubset]) -> Result<MixtureNode> {
    if subsets.is_empty() {
        return Err(Error::contract("fusion needs at least one subset"));
    }
    let mut components = Vec::with_capacity(subsets.len());
    for s in subsets {
        let experts = s
            .views()
            .into_iter()
            .map(|v| {
                posteriors.get(v).copied().ok_or_else(|| {
                    Error::MissingView(format!(
                        "subset {:#b} references view {v}, only {} available",
                        s.mask(),
                        posteriors.len()
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        components.push(poe_node(tape, &experts, true)?);
    }
    Ok(MixtureNode { components })
}

/// Per-row KL(q ‖ N(0, I)) = ½ Σ_d (μ² + σ² − 1 − log σ²), shape `[batch]`.
pub fn kl_node(tape: &mut Tape, g: GaussianNode) -> Result<Var> {
    let mean_sq = tape.mul(g.mean, g.mean)?;
    let var = tape.exp(g.log_variance);
    let var_m1 = tape.offset(var, -1.0)?;
    let excess = tape.sub(var_m1, g.log_variance)?;
    let terms = tape.add(mean_sq, excess)?;
    let rank = tape.value(terms).rank();
    let summed = tape.sum(terms, Some(rank - 1))?;
    Ok(tape.scale(summed, 0.5))
}

/// Per-row convex upper bound (1/K) Σ_k KL(q_k ‖ p) on the mixture KL, shape `[batch]`.
pub fn mixture_kl_bound_node(tape: &mut Tape, m: &MixtureNode) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &c in &m.components {
        let kl = kl_node(tape, c)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, kl)?,
            None => kl,
        });
    }
    let acc = acc.ok_or_else(|| Error::contract("empty mixture"))?;
    Ok(tape.scale(acc, 1.0 / m.components.len() as f64))
}

/// Average of the component means, `[batch, dim]`.
pub fn mixture_mean_node(tape: &mut Tape, m: &MixtureNode) -> Result<Var> {
    let mut acc = m
        .components
        .first()
        .ok_or_else(|| Error::contract("empty mixture"))?
        .mean;
    for c in &m.components[1..] {
        acc = tape.add(acc, c.mean)?;
    }
    Ok(tape.scale(acc, 1.0 / m.components.len() as f64))
}

/// Reparameterized draw with one component per row: row `r` is
/// `μ_k + exp(½ clamp(logvar_k)) ⊙ ε_r` with `k = picks[r]`.
pub fn sample_node(tape: &mut Tape, m: &MixtureNode, picks: &[usize], noise: Tensor) -> Result<Var> {
    let first = m
        .components
        .first()
        .ok_or_else(|| Error::contract("empty mixture"))?;
    if noise.shape() != tape.shape(first.mean) {
        return Err(Error::dim(format!(
            "noise shape {:?} does not match posterior {:?}",
            noise.shape(),
            tape.shape(first.mean)
        )));
    }
    let eps = tape.constant(noise);
    let draws = m
        .components
        .iter()
        .map(|c| {
            let lv = tape.clamp(c.log_variance, LOG_VARIANCE_MIN, LOG_VARIANCE_MAX);
            let half = tape.scale(lv, 0.5);
            let std = tape.exp(half);
            let spread = tape.mul(std, eps)?;
            tape.add(c.mean, spread)
        })
        .collect::<Result<Vec<_>>>()?;
    if draws.len() == 1 {
        if picks.iter().any(|&p| p != 0) {
            return Err(Error::contract("pick out of range for single component"));
        }
        return Ok(draws[0]);
    }
    tape.pick_rows(picks, &draws)
}

/// Component index for a uniform draw `u ∈ [0, 1)`.
pub fn component_for(u: f64, k: usize) -> usize {
    ((u * k as f64).floor() as usize).min(k - 1)
}

fn record(tape: &mut Tape, g: &DiagonalGaussian) -> GaussianNode {
    let d = g.dim();
    let row = |v: &[f64]| Tensor::from_parts_unchecked(vec![1, d], v.to_vec());
    GaussianNode {
        mean: tape.constant(row(&g.mean)),
        log_variance: tape.constant(row(&g.log_variance)),
    }
}

fn read(tape: &Tape, n: GaussianNode) -> Result<DiagonalGaussian> {
    DiagonalGaussian::new(
        tape.value(n.mean).data().to_vec(),
        tape.value(n.log_variance).data().to_vec(),
    )
}

/// Product of `experts` (and the prior when `include_prior`). The result does not
/// depend on the order of `experts`.
pub fn product_of_experts(experts: &[DiagonalGaussian], include_prior: bool) -> Result<DiagonalGaussian> {
    let mut sorted: Vec<&DiagonalGaussian> = experts.iter().collect();
    sorted.sort_by(|a, b| a.canonical_cmp(b));
    if let Some(e) = sorted.iter().find(|e| e.dim() != sorted[0].dim()) {
        return Err(Error::dim(format!(
            "expert dimension {} differs from {}",
            e.dim(),
            sorted[0].dim()
        )));
    }
    let mut tape = Tape::new();
    let nodes: Vec<_> = sorted.iter().map(|g| record(&mut tape, g)).collect();
    let out = poe_node(&mut tape, &nodes, include_prior)?;
    read(&tape, out)
}

/// Mixture of prior-including products, one per subset of `single_view_posteriors`.
pub fn fuse(single_view_posteriors: &[DiagonalGaussian], subsets: &[ViewSubset]) -> Result<MixturePosterior> {
    let components = subsets
        .iter()
        .map(|s| {
            let experts = s
                .views()
                .into_iter()
                .map(|v| {
                    single_view_posteriors.get(v).cloned().ok_or_else(|| {
                        Error::MissingView(format!(
                            "subset {:#b} references view {v}, only {} available",
                            s.mask(),
                            single_view_posteriors.len()
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            product_of_experts(&experts, true)
        })
        .collect::<Result<Vec<_>>>()?;
    MixturePosterior::new(components)
}

pub fn kl_standard_normal(g: &DiagonalGaussian) -> f64 {
    let mut tape = Tape::new();
    let n = record(&mut tape, g);
    let kl = kl_node(&mut tape, n).expect("shapes agree by construction");
    tape.value(kl).data()[0]
}

pub fn mixture_kl_bound(m: &MixturePosterior) -> f64 {
    let k = m.len() as f64;
    m.components.iter().map(kl_standard_normal).sum::<f64>() / k
}

/// Draws from `m` using standard-normal `noise` and a uniform `subset_pick ∈ [0, 1)`.
/// Returns the draw and the chosen component index.
pub fn sample(m: &MixturePosterior, noise: &[f64], subset_pick: f64) -> Result<(Vec<f64>, usize)> {
    if noise.len() != m.dim() {
        return Err(Error::dim(format!(
            "noise has {} entries for a {}-dimensional posterior",
            noise.len(),
            m.dim()
        )));
    }
    if !(0.0..1.0).contains(&subset_pick) {
        return Err(Error::contract(format!("subset pick {subset_pick} outside [0, 1)")));
    }
    let k = component_for(subset_pick, m.len());
    let mut tape = Tape::new();
    let comp = record(&mut tape, &m.components[k]);
    let single = MixtureNode {
        components: vec![comp],
    };
    let eps = Tensor::from_parts_unchecked(vec![1, noise.len()], noise.to_vec());
    let z = sample_node(&mut tape, &single, &[0], eps)?;
    Ok((tape.value(z).data().to_vec(), k))
}
