//! Training objectives: reconstruction log-likelihood, ELBO, classifier BCE, the
//! task-related contrastive loss, and their weighted total.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Predictions are clamped into `[BCE_EPS, 1 - BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

/// Added to squared norms before the inverse square root so zero rows stay finite.
const NORM_FLOOR: f64 = 1e-24;

/// Scope name of every node recorded by [`tmc_node`].
pub const TMC_SCOPE: &str = "tmc";

fn batch_of(shape: &[usize]) -> usize {
    shape.first().copied().unwrap_or(1)
}

/// Unit-variance Gaussian log-likelihood up to a constant: `-½‖x - x̂‖²`, summed
/// over every non-batch axis and averaged over the leading batch axis. Rank-0
/// inputs count as a batch of one.
pub fn recon_log_likelihood(reconstruction: &Tensor, target: &Tensor) -> Result<f64> {
    if reconstruction.shape() != target.shape() {
        return Err(Error::dim(format!(
            "reconstruction {:?} vs target {:?}",
            reconstruction.shape(),
            target.shape()
        )));
    }
    let sq: f64 = reconstruction
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(-0.5 * sq / batch_of(target.shape()) as f64)
}

pub fn recon_node(tape: &mut Tape, reconstruction: Var, target: Var) -> Result<Var> {
    let diff = tape.sub(reconstruction, target)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq, None)?;
    let batch = batch_of(tape.shape(target)) as f64;
    Ok(tape.scale(total, -0.5 / batch))
}

pub fn elbo(recon_ll_total: f64, kl: f64) -> Result<f64> {
    if kl < 0.0 || kl.is_nan() {
        return Err(Error::contract(format!("KL must be non-negative, got {kl}")));
    }
    Ok(recon_ll_total - kl)
}

/// Mean binary cross-entropy of `predictions` against `targets` in `{0, 1}`.
pub fn bce(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::dim(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let total: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / predictions.len() as f64)
}

/// Differentiable [`bce`]; `predictions` may be `[B]` or `[B, 1]`.
pub fn bce_node(tape: &mut Tape, predictions: Var, targets: &[f64]) -> Result<Var> {
    let shape = tape.shape(predictions).to_vec();
    if shape.iter().product::<usize>() != targets.len() || targets.is_empty() {
        return Err(Error::dim(format!(
            "predictions {shape:?} for {} targets",
            targets.len()
        )));
    }
    let y = tape.constant(Tensor::new(shape.clone(), targets.to_vec())?);
    let not_y = tape.constant(Tensor::new(shape, targets.iter().map(|t| 1.0 - t).collect())?);
    let p = tape.clamp(predictions, BCE_EPS, 1.0 - BCE_EPS);
    let log_p = tape.log(p)?;
    let neg_p = tape.neg(p);
    let q = tape.offset(neg_p, 1.0)?;
    let log_q = tape.log(q)?;
    let a = tape.mul(y, log_p)?;
    let b = tape.mul(not_y, log_q)?;
    let ll = tape.add(a, b)?;
    let mean = tape.mean(ll, None)?;
    Ok(tape.neg(mean))
}

/// Cosine of the angle between `a` and `b`; zero when either vector is zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        log::warn!("cosine similarity of a zero vector treated as 0");
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TmcConfig {
    pub tau: f64,
    /// Adds the positive pair to the denominator, as in InfoNCE.
    pub infonce_denominator: bool,
}

impl Default for TmcConfig {
    fn default() -> Self {
        TmcConfig {
            tau: 1.5,
            infonce_denominator: false,
        }
    }
}

/// Paired complete (`z_c`) and task-related (`z_t`) representations, row per sample.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    complete: Tensor,
    task_related: Tensor,
    config: TmcConfig,
}

impl ContrastiveBatch {
    pub fn new(complete: Tensor, task_related: Tensor, config: TmcConfig) -> Result<Self> {
        if complete.rank() != 2 || complete.shape() != task_related.shape() {
            return Err(Error::dim(format!(
                "representations must be equal-shaped matrices, got {:?} and {:?}",
                complete.shape(),
                task_related.shape()
            )));
        }
        if !(config.tau > 0.0) {
            return Err(Error::contract(format!("temperature {} is not positive", config.tau)));
        }
        if complete.shape()[0] < 2 {
            return Err(Error::contract("contrastive batch needs at least two samples"));
        }
        Ok(ContrastiveBatch {
            complete,
            task_related,
            config,
        })
    }

    pub fn from_rows(complete: &[Vec<f64>], task_related: &[Vec<f64>], tau: f64) -> Result<Self> {
        Self::new(
            Tensor::from_rows(complete)?,
            Tensor::from_rows(task_related)?,
            TmcConfig {
                tau,
                ..TmcConfig::default()
            },
        )
    }

    pub fn complete(&self) -> &Tensor {
        &self.complete
    }

    pub fn task_related(&self) -> &Tensor {
        &self.task_related
    }

    pub fn config(&self) -> TmcConfig {
        self.config
    }
}

/// `[B, 1]` column of inverse row norms.
fn inverse_norms(tape: &mut Tape, z: Var) -> Result<Var> {
    let b = tape.shape(z)[0];
    let sq = tape.mul(z, z)?;
    let n2 = tape.sum(sq, Some(1))?;
    let n2 = tape.reshape(n2, &[b, 1])?;
    let n2 = tape.offset(n2, NORM_FLOOR)?;
    let log_n2 = tape.log(n2)?;
    let half = tape.scale(log_n2, -0.5);
    Ok(tape.exp(half))
}

/// `[B, B]` matrix of cosine similarities between rows of `a` and rows of `b`.
fn cosine_matrix(tape: &mut Tape, a: Var, ra: Var, b: Var, rb: Var) -> Result<Var> {
    let bt = tape.transpose(b)?;
    let dots = tape.matmul(a, bt)?;
    let rbt = tape.transpose(rb)?;
    let scale = tape.matmul(ra, rbt)?;
    tape.mul(dots, scale)
}

/// Contrastive loss over a batch. For anchor `i`:
/// `S_p = exp(sim(z_c^i, z_t^i)/τ)` and
/// `S_n = Σ_{j≠i} exp(sim(z_c^i, z_c^j)/τ) + exp(sim(z_c^i, z_t^j)/τ) + exp(sim(z_t^i, z_t^j)/τ)`;
/// the loss is the batch mean of `log S_n - log S_p`.
pub fn tmc_node(tape: &mut Tape, complete: Var, task_related: Var, config: TmcConfig) -> Result<Var> {
    let shape = tape.shape(complete).to_vec();
    if shape.len() != 2 || tape.shape(task_related) != shape.as_slice() {
        return Err(Error::dim(format!(
            "representations must be equal-shaped matrices, got {:?} and {:?}",
            shape,
            tape.shape(task_related)
        )));
    }
    if !(config.tau > 0.0) {
        return Err(Error::contract(format!("temperature {} is not positive", config.tau)));
    }
    let b = shape[0];
    if b < 2 {
        return Err(Error::contract("contrastive batch needs at least two samples"));
    }
    tape.scoped(TMC_SCOPE, |tape| {
        let inv_tau = 1.0 / config.tau;
        let rc = inverse_norms(tape, complete)?;
        let rt = inverse_norms(tape, task_related)?;
        let s_cc = cosine_matrix(tape, complete, rc, complete, rc)?;
        let s_ct = cosine_matrix(tape, complete, rc, task_related, rt)?;
        let s_tt = cosine_matrix(tape, task_related, rt, task_related, rt)?;

        let eye = tape.constant(Tensor::identity(b)?);
        let off = tape.constant(Tensor::identity(b)?.map(|v| 1.0 - v));

        let diag = tape.mul(s_ct, eye)?;
        let pos = tape.sum(diag, Some(1))?;
        let pos = tape.scale(pos, inv_tau);

        let mut neg: Option<Var> = None;
        for s in [s_cc, s_ct, s_tt] {
            let scaled = tape.scale(s, inv_tau);
            let e = tape.exp(scaled);
            neg = Some(match neg {
                Some(acc) => tape.add(acc, e)?,
                None => e,
            });
        }
        let masked = tape.mul(neg.expect("three terms"), off)?;
        let mut s_n = tape.sum(masked, Some(1))?;
        if config.infonce_denominator {
            let s_p = tape.exp(pos);
            s_n = tape.add(s_n, s_p)?;
        }
        let log_n = tape.log(s_n)?;
        let per_anchor = tape.sub(log_n, pos)?;
        tape.mean(per_anchor, None)
    })
}

pub fn tmc_loss(batch: &ContrastiveBatch) -> Result<f64> {
    let mut tape = Tape::new();
    let c = tape.constant(batch.complete.clone());
    let t = tape.constant(batch.task_related.clone());
    let loss = tmc_node(&mut tape, c, t, batch.config)?;
    tape.value(loss).item()
}

fn check_weights(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha >= 0.0) || !(beta >= 0.0) {
        return Err(Error::contract(format!(
            "loss weights must be non-negative, got alpha {alpha}, beta {beta}"
        )));
    }
    Ok(())
}

/// `-elbo + α·bce + β·tmc`.
pub fn total_loss(elbo: f64, bce: f64, tmc: f64, alpha: f64, beta: f64) -> Result<f64> {
    check_weights(alpha, beta)?;
    Ok(-elbo + alpha * bce + beta * tmc)
}

/// Every term of one loss evaluation, with the weights used to combine them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Reconstruction log-likelihood per view.
    pub recon: Vec<f64>,
    pub recon_total: f64,
    pub kl: f64,
    pub bce: f64,
    pub tmc: f64,
    pub alpha: f64,
    pub beta: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(recon: Vec<f64>, kl: f64, bce: f64, tmc: f64, alpha: f64, beta: f64) -> Result<Self> {
        let recon_total = recon.iter().sum();
        let total = total_loss(elbo(recon_total, kl)?, bce, tmc, alpha, beta)?;
        Ok(LossBreakdown {
            recon,
            recon_total,
            kl,
            bce,
            tmc,
            alpha,
            beta,
            total,
        })
    }

    pub fn elbo(&self) -> f64 {
        self.recon_total - self.kl
    }

    /// Recomputes the total from its parts.
    pub fn recompose(&self) -> f64 {
        -(self.recon_total - self.kl) + self.alpha * self.bce + self.beta * self.tmc
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recon_examples() {
        let x = Tensor::vector(vec![0.5, -1.0]).unwrap();
        assert_eq!(recon_log_likelihood(&x, &x).unwrap(), 0.0);
        let ll = recon_log_likelihood(&Tensor::scalar(2.0), &Tensor::scalar(0.0)).unwrap();
        assert_eq!(ll, -2.0);
        let y = Tensor::vector(vec![0.5]).unwrap();
        assert!(matches!(recon_log_likelihood(&x, &y), Err(Error::Dimension(_))));
    }

    #[test]
    fn recon_decreases_along_a_ray() {
        let target = Tensor::zeros(vec![2, 3]).unwrap();
        let dir = [0.3, -0.1, 0.7, 0.2, 0.0, -0.4];
        let mut last = 0.0;
        for step in 1..20 {
            let t = step as f64 * 0.25;
            let r = Tensor::new(vec![2, 3], dir.iter().map(|d| d * t).collect()).unwrap();
            let ll = recon_log_likelihood(&r, &target).unwrap();
            assert!(ll < last);
            last = ll;
        }
    }

    #[test]
    fn elbo_examples() {
        assert_eq!(elbo(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(elbo(-1.0, 0.5).unwrap(), -1.5);
        assert!(matches!(elbo(0.0, -0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn bce_examples() {
        assert!(bce(&[1.0], &[1.0]).unwrap() < 1e-6);
        assert!((bce(&[0.5], &[1.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(bce(&[0.0], &[1.0]).unwrap().is_finite());
        let mut last = f64::INFINITY;
        for i in 1..100 {
            let v = bce(&[i as f64 / 100.0], &[1.0]).unwrap();
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn bce_node_matches_value() {
        let preds = [0.2, 0.9, 0.55, 1.0];
        let ys = [0.0, 1.0, 1.0, 0.0];
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(preds.to_vec()).unwrap());
        let l = bce_node(&mut tape, p, &ys).unwrap();
        let expected = bce(&preds, &ys).unwrap();
        assert!((tape.value(l).item().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn cosine_examples() {
        let a = [1.0, 2.0, -0.5];
        let b = [0.3, -0.4, 2.0];
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        let a2: Vec<f64> = a.iter().map(|v| 2.0 * v).collect();
        let b3: Vec<f64> = b.iter().map(|v| 3.0 * v).collect();
        let base = cosine_similarity(&a, &b).unwrap();
        assert!((cosine_similarity(&a2, &b3).unwrap() - base).abs() < 1e-15);
    }

    #[test]
    fn tmc_orthogonal_pair() {
        let u = vec![1.0, 0.0];
        let v = vec![0.0, 1.0];
        let batch =
            ContrastiveBatch::from_rows(&[u.clone(), v.clone()], &[u, v], 1.5).unwrap();
        let loss = tmc_loss(&batch).unwrap();
        assert!((loss - (3f64.ln() - 2.0 / 3.0)).abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn tmc_rejects_single_sample() {
        let r = ContrastiveBatch::from_rows(&[vec![1.0]], &[vec![1.0]], 1.5);
        assert!(matches!(r, Err(Error::Contract(_))));
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        assert!(matches!(
            tmc_node(&mut tape, z, z, TmcConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn tmc_infonce_denominator_is_larger() {
        let zc = vec![vec![1.0, 0.2], vec![-0.3, 0.8], vec![0.4, -0.6]];
        let zt = vec![vec![0.9, 0.1], vec![-0.2, 1.0], vec![0.5, -0.5]];
        let plain = ContrastiveBatch::from_rows(&zc, &zt, 1.5).unwrap();
        let info = ContrastiveBatch::new(
            plain.complete().clone(),
            plain.task_related().clone(),
            TmcConfig {
                tau: 1.5,
                infonce_denominator: true,
            },
        )
        .unwrap();
        assert!(tmc_loss(&info).unwrap() > tmc_loss(&plain).unwrap());
    }

    #[test]
    fn tmc_nodes_are_scoped() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0]]).unwrap());
        let before = tape.count_in_scope(TMC_SCOPE);
        tmc_node(&mut tape, z, z, TmcConfig::default()).unwrap();
        assert_eq!(before, 0);
        assert!(tape.count_in_scope(TMC_SCOPE) > 0);
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_loss(0.0, 0.0, 0.0, 1.0, 1.0).unwrap(), 0.0);
        assert!((total_loss(-2.0, 0.7, 0.4, 1.0, 1.0).unwrap() - 3.1).abs() < 1e-12);
        assert!(total_loss(0.0, 0.0, 0.0, -1.0, 1.0).is_err());
        let b = LossBreakdown::new(vec![-1.5, -0.25, -3.0], 0.8, 0.69, 2.1, 1.0, 0.0).unwrap();
        assert!((b.total - b.recompose()).abs() < 1e-12);
        assert_eq!(b.total, 1.5 + 0.25 + 3.0 + 0.8 + 0.69);
    }
}
