//! Load-balance auxiliary loss `E · Σ_i m_i · P̄_i`.
//!
//! `m_i` is the fraction of tokens whose top-k selection contains expert `i`
//! (counted before capacity dropping) and `P̄_i` is the token-mean routing
//! probability. Only `P̄` carries a gradient; `m` is a constant.

use super::routing::RoutingOutcome;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub fn balance_loss(outcome: &RoutingOutcome) -> f64 {
    let m = outcome.dispatch_fractions();
    let p = outcome.mean_probs();
    outcome.num_experts as f64 * m.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>()
}

/// The loss from explicit dispatch fractions and mean probabilities.
pub fn balance_loss_from_stats(m: &[f64], mean_probs: &[f64]) -> Result<f64> {
    if m.len() != mean_probs.len() || m.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "balance_loss",
            left: vec![m.len()],
            right: vec![mean_probs.len()],
        });
    }
    Ok(m.len() as f64 * m.iter().zip(mean_probs).map(|(a, b)| a * b).sum::<f64>())
}

/// Differentiable version; `probs` is the `T×E` probability node the
/// outcome was selected from.
pub fn balance_loss_on_tape(tape: &mut Tape, probs: Var, outcome: &RoutingOutcome) -> Result<Var> {
    let m = tape.constant(Tensor::vector(outcome.dispatch_fractions())?);
    let mean = tape.mean_axis(probs, 0)?;
    let weighted = tape.mul(mean, m)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, outcome.num_experts as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_is_one() {
        let u = vec![0.25; 4];
        assert!((balance_loss_from_stats(&u, &u).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn collapse_is_e() {
        let h = vec![1.0, 0.0, 0.0, 0.0];
        assert_eq!(balance_loss_from_stats(&h, &h).unwrap(), 4.0);
    }

    #[test]
    fn worked_two_expert_case() {
        // 2 * (0.75*0.6 + 0.25*0.4)
        let v = balance_loss_from_stats(&[0.75, 0.25], &[0.6, 0.4]).unwrap();
        assert!((v - 1.1).abs() < 1e-12);
    }

    #[test]
    fn tape_and_value_agree() {
        let probs = Tensor::new([3, 2], vec![0.7, 0.3, 0.2, 0.8, 0.55, 0.45]).unwrap();
        let o = RoutingOutcome::from_probs(&probs, 1).unwrap();
        let mut tape = Tape::new();
        let p = tape.constant(probs);
        let l = balance_loss_on_tape(&mut tape, p, &o).unwrap();
        assert!((tape.value(l).item().unwrap() - balance_loss(&o)).abs() < 1e-15);
    }
}
