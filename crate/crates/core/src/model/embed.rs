//! Input embeddings: image patches or factorized token lookups, an optional
//! class token, and learned positions.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Cuts `N` images of `channels × size × size` (row-major, channel-major)
/// into non-overlapping `p × p` patches, one row per patch. Patches are
/// ordered row-major within an image; feature `c·p² + dy·p + dx`.
pub fn patch_matrix(pixels: &[f64], batch: usize, channels: usize, size: usize, p: usize) -> Result<Tensor> {
    if p == 0 || size % p != 0 {
        return Err(Error::invalid(format!("image size {size} is not divisible by patch size {p}")));
    }
    let per_image = channels * size * size;
    if pixels.len() != batch * per_image {
        return Err(Error::invalid(format!(
            "expected {batch} images of {per_image} values, got {} values",
            pixels.len()
        )));
    }
    let side = size / p;
    let feat = channels * p * p;
    let mut out = Vec::with_capacity(batch * side * side * feat);
    for n in 0..batch {
        let img = &pixels[n * per_image..(n + 1) * per_image];
        for py in 0..side {
            for px in 0..side {
                for c in 0..channels {
                    for dy in 0..p {
                        for dx in 0..p {
                            out.push(img[c * size * size + (py * p + dy) * size + px * p + dx]);
                        }
                    }
                }
            }
        }
    }
    Tensor::new([batch * side * side, feat], out)
}

/// Linear projection of patch rows to `d_model`.
pub fn patch_embed(tape: &mut Tape, patches: Tensor, w: Var, b: Var) -> Result<Var> {
    let x = tape.constant(patches);
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Lookup into `table (vocab × e)` followed by the `e × d_model` projection.
pub fn token_embed_factorized(tape: &mut Tape, ids: &[usize], table: Var, proj: Var) -> Result<Var> {
    let vocab = tape.value(table).shape()[0];
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(Error::invalid(format!("token id {bad} out of range for vocabulary {vocab}")));
    }
    let e = tape.gather_rows(table, ids)?;
    tape.matmul(e, proj)
}

/// Prepends `cls (1×d)` to each of the `batch` sequences in `x`.
pub fn prepend_class_token(tape: &mut Tape, x: Var, cls: Var, batch: usize) -> Result<Var> {
    let rows = tape.value(x).shape()[0];
    if batch == 0 || rows % batch != 0 {
        return Err(Error::invalid(format!("{rows} rows do not split into {batch} sequences")));
    }
    let len = rows / batch;
    let out_rows = rows + batch;
    let body: Vec<usize> = (0..rows).map(|r| (r / len) * (len + 1) + 1 + r % len).collect();
    let heads: Vec<usize> = (0..batch).map(|s| s * (len + 1)).collect();
    let placed = tape.scatter_rows(x, &body, out_rows)?;
    let tokens = tape.gather_rows(cls, &vec![0; batch])?;
    let tokens = tape.scatter_rows(tokens, &heads, out_rows)?;
    tape.add(placed, tokens)
}

/// Adds row `i mod L` of `positions (L×d)` to row `i` of `x`.
pub fn add_positions(tape: &mut Tape, x: Var, positions: Var) -> Result<Var> {
    let rows = tape.value(x).shape()[0];
    let len = tape.value(positions).shape()[0];
    if len == 0 || rows % len != 0 {
        return Err(Error::invalid(format!("{rows} tokens are not whole sequences of length {len}")));
    }
    let idx: Vec<usize> = (0..rows).map(|r| r % len).collect();
    let pos = tape.gather_rows(positions, &idx)?;
    tape.add(x, pos)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_by_eight_gives_four_patches() {
        let px: Vec<f64> = (0..64).map(f64::from).collect();
        let m = patch_matrix(&px, 1, 1, 8, 4).unwrap();
        assert_eq!(m.shape(), &[4, 16]);
        // second patch starts at column 4 of row 0
        assert_eq!(&m.data()[16..20], &[4.0, 5.0, 6.0, 7.0]);
        assert!(patch_matrix(&px, 1, 1, 8, 3).is_err());
    }

    #[test]
    fn class_token_lands_first() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([4, 2], 1.0));
        let cls = tape.constant(Tensor::full([1, 2], 9.0));
        let y = prepend_class_token(&mut tape, x, cls, 2).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[9.0, 9.0, 1.0, 1.0, 1.0, 1.0, 9.0, 9.0, 1.0, 1.0, 1.0, 1.0]
        );
    }

    #[test]
    fn bad_token_id_errors() {
        let mut tape = Tape::new();
        let table = tape.constant(Tensor::zeros([3, 2]));
        let proj = tape.constant(Tensor::zeros([2, 4]));
        assert!(token_embed_factorized(&mut tape, &[0, 3], table, proj).is_err());
    }
}
