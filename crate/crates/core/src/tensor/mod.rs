//! Dense double-precision tensors and a define-by-run reverse-mode tape.
//!
//! A [`Tensor`] is a plain row-major array. Differentiation happens on a
//! [`Tape`]: values are pushed as leaves (trainable parameters or constants),
//! every primitive records its parents plus whatever it needs for the
//! backward rule, and [`Tape::backward`] walks the nodes in reverse.

mod fault;
pub mod gradcheck;
mod kernels;
mod tape;

pub use fault::{inject_fault, Fault};
pub use tape::{BatchStats, Gradients, Tape, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "Tensor::new",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("Tensor::from_rows", "ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Returns the single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Contract(format!(
                "expected a scalar tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Copies rows `[start, end)` along the leading axis.
    pub fn slice_outer(&self, start: usize, end: usize) -> Result<Self> {
        let outer = *self.shape.first().unwrap_or(&0);
        if start > end || end > outer {
            return Err(Error::dim(
                "slice_outer",
                format!("range {start}..{end} of leading extent {outer}"),
            ));
        }
        let inner = self.data.len() / outer.max(1);
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor {
            shape,
            data: self.data[start * inner..end * inner].to_vec(),
        })
    }

    /// Stacks the given leading-axis rows of `self` into a new batch.
    pub fn gather_outer(&self, indices: &[usize]) -> Result<Self> {
        let outer = *self.shape.first().unwrap_or(&0);
        let inner = self.data.len() / outer.max(1);
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= outer {
                return Err(Error::dim(
                    "gather_outer",
                    format!("index {i} out of leading extent {outer}"),
                ));
            }
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Tensor { shape, data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `tr(aᵀb)`, i.e. the sum of element-wise products of two matrices.
pub fn frobenius_inner(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rank() != 2 || a.shape() != b.shape() {
        return Err(Error::dim(
            "frobenius_inner",
            format!("{:?} vs {:?} (rank-2, equal shapes required)", a.shape(), b.shape()),
        ));
    }
    Ok(dot(a.data(), b.data()))
}

pub fn frobenius_norm(a: &Tensor) -> f64 {
    dot(a.data(), a.data()).sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn frobenius_inner_examples() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let eye = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(frobenius_inner(&a, &eye).unwrap(), 5.0);
        assert_eq!(frobenius_inner(&a, &Tensor::zeros(&[2, 2])).unwrap(), 0.0);
        let diag = m(&[&[3.0, 0.0], &[0.0, 4.0]]);
        let anti = m(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(frobenius_inner(&diag, &anti).unwrap(), 0.0);
    }

    #[test]
    fn frobenius_inner_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(frobenius_inner(&a, &b), Err(Error::Dimension { .. })));
        let v = Tensor::zeros(&[4]);
        assert!(frobenius_inner(&v, &v).is_err());
    }

    #[test]
    fn frobenius_norm_examples() {
        assert_eq!(frobenius_norm(&m(&[&[3.0, 0.0], &[0.0, 4.0]])), 5.0);
        assert_eq!(frobenius_norm(&Tensor::zeros(&[3, 3])), 0.0);
        assert_eq!(frobenius_norm(&m(&[&[1.0, 1.0], &[1.0, 1.0]])), 2.0);
    }

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn cauchy_schwarz(
            (r, c, a, b) in (1usize..5, 1usize..5).prop_flat_map(|(r, c)| {
                (Just(r), Just(c),
                 proptest::collection::vec(-10.0f64..10.0, r * c),
                 proptest::collection::vec(-10.0f64..10.0, r * c))
            })
        ) {
            let a = Tensor::new(vec![r, c], a).unwrap();
            let b = Tensor::new(vec![r, c], b).unwrap();
            let lhs = frobenius_inner(&a, &b).unwrap().abs();
            prop_assert!(lhs <= frobenius_norm(&a) * frobenius_norm(&b) + 1e-12 * (1.0 + lhs));
        }
    }
}
