use std::io::{Read, Write};

use super::kernels;
use crate::error::{Error, Result};

/// Dense row-major f64 tensor with an optional gradient buffer.
///
/// Every constructor and operation rejects NaN and infinities, so a tensor
/// that exists is finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        Self::checked("tensor", shape.into(), data)
    }

    pub(crate) fn checked(op: &'static str, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "{op}: shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        check_finite(op, &data)?;
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        assert!(value.is_finite(), "Tensor::full with non-finite value");
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Vec::<usize>::new(), value)
    }

    /// One-dimensional tensor.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    /// Two-dimensional tensor from nested rows.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("matrix rows have differing lengths"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    /// Marks the tensor as a differentiable leaf with a zeroed gradient buffer.
    pub fn with_grad(mut self) -> Self {
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, contribution: &[f64]) {
        if let Some(g) = &mut self.grad {
            for (a, b) in g.iter_mut().zip(contribution) {
                *a += b;
            }
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Replaces the values in place; the shape must match.
    pub fn assign(&mut self, other: &Tensor) -> Result<()> {
        if other.shape != self.shape {
            return Err(self.mismatch("assign", other));
        }
        self.data.copy_from_slice(&other.data);
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::invalid(format!(
                "item() needs one element, shape is {:?}",
                self.shape
            )))
        }
    }

    /// Copy without the gradient buffer.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            grad: None,
        }
    }

    fn mismatch(&self, op: &'static str, other: &Tensor) -> Error {
        Error::ShapeMismatch {
            op,
            left: self.shape.clone(),
            right: other.shape.clone(),
        }
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::invalid(format!(
                "{op} expects a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    // ----- operations ----------------------------------------------------

    /// `(m×k) · (k×n) → (m×n)`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", other));
        }
        let out = kernels::matmul(&self.data, &other.data, m, k, n);
        Tensor::checked("matmul", vec![m, n], out)
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(self.mismatch(op, other));
        }
        let out = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor::checked(op, self.shape.clone(), out)
    }

    fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        Tensor::checked(op, self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.map("add_scalar", |v| v + c)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.map("scale", |v| v * c)
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (_, c) = self.dims2("add_row")?;
        if row.shape != [c] {
            return Err(self.mismatch("add_row", row));
        }
        let out = self
            .data
            .chunks(c)
            .flat_map(|r| r.iter().zip(&row.data).map(|(a, b)| a + b))
            .collect();
        Tensor::checked("add_row", self.shape.clone(), out)
    }

    /// Multiplies row `i` of an `r×c` matrix by `scales[i]`.
    pub fn mul_rows(&self, scales: &Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2("mul_rows")?;
        if scales.shape != [r] {
            return Err(self.mismatch("mul_rows", scales));
        }
        let out = self
            .data
            .chunks(c.max(1))
            .zip(&scales.data)
            .flat_map(|(row, &s)| row.iter().map(move |v| v * s))
            .collect();
        Tensor::checked("mul_rows", self.shape.clone(), out)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.map("relu", |v| v.max(0.0))
    }

    pub fn gelu(&self) -> Result<Tensor> {
        self.map("gelu", kernels::gelu)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        Tensor::checked("transpose", vec![c, r], kernels::transpose(&self.data, r, c))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
            grad: None,
        })
    }

    pub fn sum(&self) -> Result<Tensor> {
        Tensor::checked("sum", vec![], vec![self.data.iter().sum()])
    }

    pub fn mean(&self) -> Result<Tensor> {
        if self.data.is_empty() {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        Tensor::checked("mean", vec![], vec![self.data.iter().sum::<f64>() / self.numel() as f64])
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            return Err(Error::invalid(format!(
                "{op}: axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        if self.shape[axis] == 0 {
            return Err(Error::invalid(format!("{op}: axis {axis} is empty")));
        }
        Ok(())
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.check_axis("sum_axis", axis)?;
        let (outer, len, inner) = kernels::axis_split(&self.shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += self.data[o * len * inner + j * inner + i];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Tensor::checked("sum_axis", shape, out)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.check_axis("mean_axis", axis)?;
        let n = self.shape[axis] as f64;
        let summed = self.sum_axis(axis)?;
        summed.scale(1.0 / n)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        self.check_axis("softmax", axis)?;
        check_finite("softmax", &self.data)?;
        let (outer, len, inner) = kernels::axis_split(&self.shape, axis);
        let out = kernels::softmax_strided(&self.data, outer, len, inner);
        Tensor::checked("softmax", self.shape.clone(), out)
    }

    /// Selects rows of a matrix by index; indices may repeat.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (r, c) = self.dims2("gather_rows")?;
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(Error::invalid(format!("gather_rows: row {i} out of {r}")));
            }
            out.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Tensor::checked("gather_rows", vec![indices.len(), c], out)
    }

    /// Adds row `k` of `self` into row `indices[k]` of an `out_rows×c` zero matrix.
    pub fn scatter_rows(&self, indices: &[usize], out_rows: usize) -> Result<Tensor> {
        let (r, c) = self.dims2("scatter_rows")?;
        if indices.len() != r {
            return Err(Error::invalid(format!(
                "scatter_rows: {} indices for {r} rows",
                indices.len()
            )));
        }
        let mut out = vec![0.0; out_rows * c];
        for (k, &i) in indices.iter().enumerate() {
            if i >= out_rows {
                return Err(Error::invalid(format!("scatter_rows: row {i} out of {out_rows}")));
            }
            for j in 0..c {
                out[i * c + j] += self.data[k * c + j];
            }
        }
        Tensor::checked("scatter_rows", vec![out_rows, c], out)
    }

    /// Picks elements by flat index into a one-dimensional tensor.
    pub fn gather_elems(&self, indices: &[usize]) -> Result<Tensor> {
        let n = self.numel();
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= n {
                return Err(Error::invalid(format!("gather_elems: index {i} out of {n}")));
            }
            out.push(self.data[i]);
        }
        Tensor::checked("gather_elems", vec![indices.len()], out)
    }

    // ----- serialization -------------------------------------------------

    /// Writes `rank`, the dims, then the values; all little-endian, 8 bytes each.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.rank() as u64).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Size in bytes of [`Tensor::write_to`]'s output.
    pub fn encoded_len(&self) -> usize {
        8 * (1 + self.rank() + self.numel())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let rank = u64::from_le_bytes(word);
        if rank > 16 {
            return Err(Error::invalid(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            r.read_exact(&mut word)?;
            shape.push(u64::from_le_bytes(word) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut word)?;
            data.push(f64::from_le_bytes(word));
        }
        Tensor::checked("read_from", shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let eye = Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(a.matmul(&eye).unwrap().data(), a.data());
    }

    #[test]
    fn add_zero_is_identity() {
        let a = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(a.add_scalar(0.0).unwrap().data(), &[1.0, 2.0, 3.0]);
        assert_eq!(a.add(&Tensor::zeros([3])).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn reduce_mean_matches_hand_arithmetic() {
        let a = Tensor::vector(vec![2.0, 4.0, 6.0]).unwrap();
        assert_eq!(a.mean().unwrap().item().unwrap(), 4.0);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let a = Tensor::zeros([2, 3]);
        let b = Tensor::zeros([2, 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_worked_values() {
        let x = Tensor::vector(vec![1.0, 2.0, 0.0]).unwrap();
        let p = x.softmax(0).unwrap();
        // high-precision reference values
        let expect = [0.24472847105479764, 0.6652409557748219, 0.09003057317038046];
        for (a, b) in p.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let half = Tensor::vector(vec![0.0, 0.0]).unwrap().softmax(0).unwrap();
        assert_eq!(half.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let p = Tensor::vector(vec![1000.0, 0.0]).unwrap().softmax(0).unwrap();
        assert!((p.data()[0] - 1.0).abs() < 1e-12);
        assert!(p.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_other_axis() {
        let x = Tensor::matrix(&[vec![0.0, 5.0], vec![0.0, 5.0]]).unwrap();
        let p = x.softmax(0).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn softmax_empty_axis_errors() {
        assert!(Tensor::zeros([2, 0]).softmax(1).is_err());
    }

    #[test]
    fn nan_is_rejected() {
        assert!(matches!(
            Tensor::vector(vec![f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
        let big = Tensor::vector(vec![1e308]).unwrap();
        assert!(big.scale(10.0).is_err());
    }

    #[test]
    fn gather_scatter_rows() {
        let a = Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let g = a.gather_rows(&[1, 1, 0]).unwrap();
        assert_eq!(g.data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let s = g.scatter_rows(&[0, 0, 2], 3).unwrap();
        assert_eq!(s.data(), &[6.0, 8.0, 0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn axis_reductions() {
        let a = Tensor::new([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(a.sum_axis(0).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(a.mean_axis(1).unwrap().data(), &[2.0, 5.0]);
        assert_eq!(a.transpose().unwrap().data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn serialization_layout() {
        let a = Tensor::new([1, 2], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), a.encoded_len());
        assert_eq!(&buf[..8], &2u64.to_le_bytes());
        assert_eq!(&buf[16..24], &2u64.to_le_bytes());
        assert_eq!(&buf[24..32], &1.5f64.to_le_bytes());
        let back = Tensor::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, a);
    }
}
