//! Inverted dropout.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, TensorError, Var};

/// Whether a forward pass is training (stochastic) or evaluating.
pub enum RunMode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

impl RunMode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, RunMode::Train(_))
    }
}

pub fn check_rate(rate: f64) -> Result<(), TensorError> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(TensorError::Usage(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )))
    }
}

/// In training mode every element is zeroed with probability `rate` and the
/// survivors are scaled by `1 / (1 - rate)`; evaluation is the identity.
pub fn apply_dropout(g: &mut Graph<'_>, x: Var, rate: f64, mode: &mut RunMode<'_>) -> Result<Var, TensorError> {
    check_rate(rate)?;
    let rng = match mode {
        RunMode::Train(rng) if rate > 0.0 => rng,
        _ => return Ok(x),
    };
    let keep = 1.0 / (1.0 - rate);
    let shape = g.shape(x).to_vec();
    let n = g.value(x).len();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let m = g.constant(shape, mask)?;
    g.mul(x, m)
}
