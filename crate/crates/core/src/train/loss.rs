//! The training objective `l_main + λ · Σ_t l_balance^t`.

use crate::error::{Error, Result};
use crate::moe::{balance_loss_on_tape, RoutingPlan};
use crate::tensor::{Tape, Tensor, Var};

/// Mean label-smoothed cross-entropy of `logits (N × classes)`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize], smoothing: f64) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let x = tape.constant(logits.clone());
    let l = tape.cross_entropy(x, labels, smoothing)?;
    tape.value(l).item()
}

/// `l_main + λ · Σ balance_losses`.
pub fn total_loss(l_main: f64, balance_losses: &[f64], lambda: f64) -> f64 {
    l_main + lambda * balance_losses.iter().sum::<f64>()
}

/// Loss nodes recorded for one step.
pub struct LossVars {
    pub total: Var,
    pub main: Var,
    /// One per routing operation.
    pub balance: Vec<Var>,
}

/// Records the full objective on `tape`.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    smoothing: f64,
    plans: &[RoutingPlan],
    lambda: f64,
) -> Result<LossVars> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    let main = tape.cross_entropy(logits, labels, smoothing)?;
    let mut balance = Vec::with_capacity(plans.len());
    for p in plans {
        balance.push(balance_loss_on_tape(tape, p.probs, &p.outcome)?);
    }
    let mut total = main;
    if let Some((&first, rest)) = balance.split_first() {
        let mut sum = first;
        for &b in rest {
            sum = tape.add(sum, b)?;
        }
        let scaled = tape.scale(sum, lambda)?;
        total = tape.add(main, scaled)?;
    }
    Ok(LossVars { total, main, balance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_classes() {
        let l = cross_entropy(&Tensor::zeros([2, 5]), &[0, 3], 0.0).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn worked_case() {
        let l = cross_entropy(&Tensor::matrix(&[vec![1.0, 2.0, 0.0]]).unwrap(), &[1], 0.0).unwrap();
        assert!((l - 0.4076059644443803).abs() < 1e-12);
    }

    #[test]
    fn large_margin_goes_to_zero() {
        let l = cross_entropy(&Tensor::matrix(&[vec![-200.0, 200.0]]).unwrap(), &[1], 0.0).unwrap();
        assert!(l < 1e-150);
    }

    #[test]
    fn total_is_affine_in_lambda() {
        assert_eq!(total_loss(0.7, &[1.0, 1.0], 0.0), 0.7);
        assert!((total_loss(0.7, &[1.0, 1.0], 0.01) - 0.72).abs() < 1e-15);
        let gap = |l| total_loss(0.7, &[1.3, 2.1], l) - 0.7;
        assert!((gap(0.04) - 2.0 * gap(0.02)).abs() < 1e-15);
    }
}
