//! Dense row-major `f64` tensors and the handful of linear-algebra kernels
//! the rest of the crate is built from.
//!
//! Everything downstream (encoder, context aggregation, responder, decoder,
//! losses) composes these kernels, so their contracts are deliberately
//! strict: shape mismatches are reported as errors, public constructors
//! reject non-finite entries, and masked attention guarantees exact zeros
//! outside the mask region.

use crate::error::{Error, Result};

/// Additive pre-softmax penalty for masked attention slots.
///
/// Large enough that `exp` underflows to exactly `+0.0` after the row-max
/// subtraction, so masked weights are bitwise zero.
pub const MASK_NEG: f64 = -1e30;

/// Dense row-major tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating that `data` matches `shape` and is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::InvalidArgument {
                op: "Tensor::new",
                msg: format!("shape {shape:?} wants {expect} values, got {}", data.len()),
            });
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument {
                op: "Tensor::new",
                msg: format!("non-finite entry {} at flat index {bad}", data[bad]),
            });
        }
        Ok(Self { shape, data })
    }

    /// 2-D convenience constructor.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Number of rows of a 2-D tensor. Panics on other ranks.
    pub fn nrows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "nrows on non-matrix {:?}", self.shape);
        self.shape[0]
    }

    /// Number of columns of a 2-D tensor. Panics on other ranks.
    pub fn ncols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "ncols on non-matrix {:?}", self.shape);
        self.shape[1]
    }

    /// Row `i` of a 2-D tensor as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.ncols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.ncols();
        &mut self.data[i * c..(i + 1) * c]
    }

    #[inline]
    pub fn get2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j] = v;
    }

    /// Matrix product `self · rhs` with an inner-dimension check.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![0.0; m * n];
        // i-k-j order keeps the inner loop contiguous in both rhs and out.
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &rhs.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Tensor {
        assert_eq!(self.shape.len(), 2, "transpose on non-matrix");
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape != rhs.shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Accumulates `rhs` into `self` in place; shapes must match exactly.
    pub fn add_assign(&mut self, rhs: &Tensor) -> Result<()> {
        if self.shape != rhs.shape {
            return Err(Error::ShapeMismatch {
                op: "add_assign",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Stacks 2-D tensors vertically; all must share a column count.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let cols = parts
            .first()
            .map(|t| t.ncols())
            .ok_or(Error::InvalidArgument {
                op: "concat_rows",
                msg: "no tensors given".into(),
            })?;
        let mut data = Vec::new();
        let mut rows = 0;
        for t in parts {
            if t.ncols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![rows, cols],
                    right: t.shape.clone(),
                });
            }
            rows += t.nrows();
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: vec![rows, cols],
            data,
        })
    }

    /// Copies the given rows (in the given order) into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.ncols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![idx.len(), c],
            data,
        }
    }

    /// Row-wise softmax with per-row max subtraction for stability.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::InvalidArgument {
                op: "softmax_rows",
                msg: format!("expected a matrix, got shape {:?}", self.shape),
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for (oj, &x) in o.iter_mut().zip(row) {
                let e = (x - max).exp();
                *oj = e;
                sum += e;
            }
            for oj in o.iter_mut() {
                *oj /= sum;
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Largest absolute entry (0 for empty tensors).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Scaled dot-product attention `softmax(q·kᵀ/√c [+ mask]) · v`.
///
/// `q` is `a×c`, `k` is `b×c`, `v` is `b×w`. The optional `mask` is a binary
/// `a×b` tensor where 1 marks an attendable slot; excluded slots receive an
/// additive [`MASK_NEG`] before the softmax, which makes their post-softmax
/// weight exactly zero. Returns `(output a×w, weights a×b)`.
///
/// A row whose mask excludes every slot is an error: callers that want a
/// fallback must widen the mask themselves before calling.
pub fn scaled_dot_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    if q.shape().len() != 2 || k.shape().len() != 2 || q.shape()[1] != k.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_attention(q,k)",
            left: q.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    if v.shape().len() != 2 || v.shape()[0] != k.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_attention(k,v)",
            left: k.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    }
    let (a, b) = (q.nrows(), k.nrows());
    if let Some(m) = mask {
        if m.shape() != [a, b] {
            return Err(Error::ShapeMismatch {
                op: "scaled_dot_attention(mask)",
                left: vec![a, b],
                right: m.shape().to_vec(),
            });
        }
        for i in 0..a {
            if m.row(i).iter().all(|&x| x <= 0.5) {
                return Err(Error::MaskedRow { row: i });
            }
        }
    }
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut scores = q.matmul(&k.transpose())?.scale(scale);
    if let Some(m) = mask {
        for (s, &keep) in scores.data_mut().iter_mut().zip(m.data()) {
            if keep <= 0.5 {
                *s += MASK_NEG;
            }
        }
    }
    let weights = scores.softmax_rows()?;
    let out = weights.matmul(v)?;
    Ok((out, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_matrix(rng: &mut ChaCha12Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_fn(&[r, c], |_| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn matmul_one_by_one() {
        let a = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let b = Tensor::matrix(1, 1, vec![3.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let a = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        match a.matmul(&b) {
            Err(Error::ShapeMismatch { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn matmul_is_associative_within_tolerance() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = random_matrix(&mut rng, 4, 3);
            let b = random_matrix(&mut rng, 3, 5);
            let c = random_matrix(&mut rng, 5, 2);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (l, r) in left.data().iter().zip(right.data()) {
                let rel = (l - r).abs() / l.abs().max(r.abs()).max(1e-8);
                assert!(rel < 1e-9, "associativity violated: {l} vs {r}");
            }
        }
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let t = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let s = t.softmax_rows().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one_for_large_magnitudes() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..50 {
            let t = Tensor::from_fn(&[3, 6], |_| rng.gen_range(-1e3..1e3));
            let s = t.softmax_rows().unwrap();
            for i in 0..3 {
                let sum: f64 = s.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "row sum {sum}");
            }
        }
    }

    #[test]
    fn attention_with_single_key_returns_that_value() {
        let q = Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap();
        let k = Tensor::matrix(1, 2, vec![5.0, 1.0]).unwrap();
        let v = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let (out, w) = scaled_dot_attention(&q, &k, &v, None).unwrap();
        assert_eq!(out.data(), v.data());
        assert_eq!(w.data(), &[1.0]);
    }

    #[test]
    fn masked_attention_weights_are_exactly_zero() {
        let q = Tensor::matrix(2, 2, vec![0.1, 0.2, -0.4, 0.6]).unwrap();
        let k = Tensor::matrix(3, 2, vec![0.5, -0.1, 0.7, 0.2, -0.3, 0.9]).unwrap();
        let v = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 2.0, 2.0]).unwrap();
        let mask = Tensor::matrix(2, 3, vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        let (_, w) = scaled_dot_attention(&q, &k, &v, Some(&mask)).unwrap();
        assert_eq!(w.get2(0, 1), 0.0);
        assert_eq!(w.get2(1, 0), 0.0);
        for i in 0..2 {
            let sum: f64 = w.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let q = Tensor::matrix(1, 2, vec![0.1, 0.2]).unwrap();
        let k = Tensor::matrix(2, 2, vec![0.5, -0.1, 0.7, 0.2]).unwrap();
        let v = k.clone();
        let mask = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        match scaled_dot_attention(&q, &k, &v, Some(&mask)) {
            Err(Error::MaskedRow { row: 0 }) => {}
            other => panic!("expected masked-row error, got {other:?}"),
        }
    }

    #[test]
    fn constructors_reject_non_finite_values() {
        assert!(Tensor::matrix(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::matrix(1, 2, vec![1.0, f64::INFINITY]).is_err());
    }
}
