//! Central finite differences, used as the independent oracle for the tape.

use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference estimate of the gradient of scalar `f` at `x`:
/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` per coordinate.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    if !(step > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut probe = x.detached();
    let mut out = vec![0.0; x.numel()];
    for (i, slot) in out.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = scalar_of(f(&probe)?)?;
        probe.data_mut()[i] = orig - step;
        let minus = scalar_of(f(&probe)?)?;
        probe.data_mut()[i] = orig;
        *slot = (plus - minus) / (2.0 * step);
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn scalar_of(t: Tensor) -> Result<f64> {
    if t.numel() != 1 {
        return Err(Error::invalid(format!(
            "finite differences need a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both vanish below `floor`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < floor {
        diff / floor
    } else {
        diff / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_difference_gradient(|t| t.mul(t), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_sum_is_flat() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let g = finite_difference_gradient(|t| t.softmax(0)?.sum(), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn non_scalar_output_errors() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        assert!(finite_difference_gradient(|t| Ok(t.clone()), &x, 1e-5).is_err());
    }
}
