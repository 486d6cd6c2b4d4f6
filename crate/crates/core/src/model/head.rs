//! Classification heads: the class-token head and global average pooling.

use super::config::HeadType;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Reduces `h (N·L × d)` to one vector per sequence.
pub fn pool(tape: &mut Tape, h: Var, head: HeadType, batch: usize, has_class_token: bool) -> Result<Var> {
    let rows = tape.value(h).shape()[0];
    if batch == 0 || rows % batch != 0 {
        return Err(Error::invalid(format!("{rows} rows do not split into {batch} sequences")));
    }
    let len = rows / batch;
    match head {
        HeadType::TokenCls => {
            if !has_class_token {
                return Err(Error::invalid("token-cls head needs a class token"));
            }
            let idx: Vec<usize> = (0..batch).map(|s| s * len).collect();
            tape.gather_rows(h, &idx)
        }
        HeadType::GlobalAvgPool => {
            let mut avg = vec![0.0; batch * rows];
            for s in 0..batch {
                avg[s * rows + s * len..s * rows + (s + 1) * len].fill(1.0 / len as f64);
            }
            let avg = tape.constant(Tensor::new([batch, rows], avg)?);
            tape.matmul(avg, h)
        }
    }
}

/// Pooling followed by the linear classifier.
pub fn head_forward(
    tape: &mut Tape,
    h: Var,
    head: HeadType,
    batch: usize,
    has_class_token: bool,
    w: Var,
    b: Var,
) -> Result<Var> {
    let pooled = pool(tape, h, head, batch, has_class_token)?;
    let logits = tape.matmul(pooled, w)?;
    tape.add_row(logits, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_head_without_class_token_errors() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::zeros([2, 3]));
        assert!(pool(&mut tape, h, HeadType::TokenCls, 1, false).is_err());
    }

    #[test]
    fn gap_of_identical_rows_is_that_row() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::matrix(&[vec![1.0, -2.0], vec![1.0, -2.0], vec![1.0, -2.0]]).unwrap());
        let p = pool(&mut tape, h, HeadType::GlobalAvgPool, 1, false).unwrap();
        let v = tape.value(p).data();
        assert!((v[0] - 1.0).abs() < 1e-15 && (v[1] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn single_token_heads_coincide() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::matrix(&[vec![0.3, 0.7], vec![-1.0, 2.0]]).unwrap());
        let a = pool(&mut tape, h, HeadType::TokenCls, 2, true).unwrap();
        let b = pool(&mut tape, h, HeadType::GlobalAvgPool, 2, false).unwrap();
        assert_eq!(tape.value(a).data(), tape.value(b).data());
    }
}
