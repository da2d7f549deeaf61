//! Central finite-difference checks of reverse-mode gradients.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Settings for [`max_relative_error`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Gradients smaller than this in magnitude are compared on an absolute scale.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: 1e-6, floor: 1e-3 }
    }
}

/// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)` over every
/// entry of every input. `f` records a scalar loss from leaves bound to `inputs`.
pub fn max_relative_error<F>(inputs: &[Tensor], check: GradCheck, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::contract("gradient check needs a scalar loss"));
    }
    let grads = tape.backward(loss)?;

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = values.iter().map(|v| t.constant(v.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).data()[0])
    };
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).cloned().unwrap_or_else(|| inputs[k].map(|_| 0.0));
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + check.step;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - check.step;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * check.step);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(check.floor);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Reduces any node to a scalar through fixed pseudo-random weights so every
/// output entry contributes a distinct gradient.
pub fn weighted_sum(tape: &mut Tape, x: Var, salt: u64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let weights = (0..n)
        .map(|i| {
            let h = (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt.wrapping_mul(0xBF58_476D_1CE4_E5B9);
            0.5 + (h >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect();
    let w = tape.constant(Tensor::new(shape, weights)?);
    let y = tape.mul(x, w)?;
    tape.sum(y, None)
}
