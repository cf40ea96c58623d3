//! Attention maps and their entropy.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows within this distance of 1 are accepted (and renormalized).
pub const ROW_SUM_ACCEPT_TOL: f64 = 1e-6;
/// Tolerance used when checking the row-stochastic invariant.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Token-by-feature matrix, `N x d`, all entries finite.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix(Array2<f64>);

impl TokenMatrix {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (rows, cols) = data.dim();
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidInput(format!(
                "token matrix must be non-empty, got {rows}x{cols}"
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("token matrix has non-finite entries".into()));
        }
        Ok(Self(data))
    }

    pub fn from_shape_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let arr = Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(arr)
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Row-stochastic matrix. Self-attention maps are `N x N`; a rectangular
/// map holds one query distribution per row.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap(Array2<f64>);

impl AttentionMap {
    /// Validates a candidate map. Rows summing to 1 within
    /// [`ROW_SUM_ACCEPT_TOL`] are renormalized; anything else is rejected.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (rows, cols) = data.dim();
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!(
                "attention map must be non-empty, got {rows}x{cols}"
            )));
        }
        if let Some(x) = data
            .iter()
            .find(|x| !x.is_finite() || **x < 0.0 || **x > 1.0 + ROW_SUM_ACCEPT_TOL)
        {
            return Err(Error::InvalidInput(format!("attention entry {x} outside [0, 1]")));
        }
        let mut data = data;
        for (i, mut row) in data.axis_iter_mut(Axis(0)).enumerate() {
            let sum = row.sum();
            if (sum - 1.0).abs() > ROW_SUM_ACCEPT_TOL {
                return Err(Error::InvalidInput(format!("row {i} sums to {sum}, not 1")));
            }
            // rows already at float precision are kept bit for bit
            if (sum - 1.0).abs() > 1e-12 {
                row.mapv_inplace(|x| x / sum);
            }
        }
        Ok(Self(data))
    }

    pub fn from_shape_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let arr = Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(arr)
    }

    /// Caller guarantees the row-stochastic invariant.
    pub(crate) fn from_trusted(data: Array2<f64>) -> Self {
        debug_assert!(data.axis_iter(Axis(0)).all(|r| (r.sum() - 1.0).abs() <= ROW_SUM_TOL));
        Self(data)
    }

    pub fn uniform(n: usize) -> Self {
        Self(Array2::from_elem((n, n), 1.0 / n as f64))
    }

    pub fn identity(n: usize) -> Self {
        Self(Array2::eye(n))
    }

    /// One-hot rows: row `i` attends to `perm[i]`.
    pub fn permutation(perm: &[usize]) -> Result<Self> {
        let n = perm.len();
        let mut seen = vec![false; n];
        let mut data = Array2::zeros((n, n));
        for (i, &j) in perm.iter().enumerate() {
            if j >= n || std::mem::replace(&mut seen[j], true) {
                return Err(Error::InvalidInput(format!("{perm:?} is not a permutation")));
            }
            data[[i, j]] = 1.0;
        }
        Self::new(data)
    }

    /// Number of query rows.
    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i)
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("attention maps are stored contiguously")
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    /// `P A Pᵀ` for the token permutation `perm` (new token `i` is old
    /// token `perm[i]`). Square maps only.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n();
        assert_eq!(self.cols(), n, "token permutation needs a square map");
        Self(Array2::from_shape_fn((n, n), |(i, j)| self.0[[perm[i], perm[j]]]))
    }

    pub fn max_abs_diff(&self, other: &AttentionMap) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Mean row entropy of an attention map, in nats.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntropyValue(pub f64);

impl EntropyValue {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(scores: ArrayView2<'_, f64>) -> Result<AttentionMap> {
    let (rows, cols) = scores.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::Shape(format!(
            "score matrix must be non-empty, got {rows}x{cols}"
        )));
    }
    if scores.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("score matrix has non-finite entries".into()));
    }
    let mut out = scores.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    Ok(AttentionMap::from_trusted(out))
}

/// `softmax_rows(scale · q kᵀ)`.
pub fn attention_from_qk(q: &TokenMatrix, k: &TokenMatrix, scale: f64) -> Result<AttentionMap> {
    if q.cols() != k.cols() || q.rows() != k.rows() {
        return Err(Error::Shape(format!(
            "query {}x{} vs key {}x{}",
            q.rows(),
            q.cols(),
            k.rows(),
            k.cols()
        )));
    }
    if !scale.is_finite() {
        return Err(Error::InvalidInput(format!("attention scale {scale}")));
    }
    let logits = q.view().dot(&k.view().t()) * scale;
    softmax_rows(logits.view())
}

/// Default attention scale `1/√d`.
pub fn default_scale(width: usize) -> f64 {
    1.0 / (width as f64).sqrt()
}

/// Shannon entropy of one row (0·ln 0 = 0).
pub(crate) fn row_entropy(row: ArrayView1<'_, f64>) -> f64 {
    row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

pub fn entropy(a: &AttentionMap) -> EntropyValue {
    let n = a.n() as f64;
    let total: f64 = a.0.axis_iter(Axis(0)).map(row_entropy).sum();
    EntropyValue((total / n).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let a = softmax_rows(array![[0.0, 0.0], [3.0f64.ln(), 1.0f64.ln()]].view()).unwrap();
        assert_eq!(a.row(0).to_vec(), vec![0.5, 0.5]);
        assert_abs_diff_eq!(a.row(1)[0], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(a.row(1)[1], 0.25, epsilon = 1e-15);

        let c = 123.456;
        let u = softmax_rows(Array2::from_elem((3, 3), c).view()).unwrap();
        for x in u.as_slice() {
            assert_abs_diff_eq!(*x, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let err = softmax_rows(array![[0.0, f64::NAN], [0.0, 0.0]].view()).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
        let err = softmax_rows(array![[0.0, f64::INFINITY], [0.0, 0.0]].view()).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn qk_examples() {
        let zero = TokenMatrix::new(Array2::zeros((4, 3))).unwrap();
        let a = attention_from_qk(&zero, &zero, 0.7).unwrap();
        assert_eq!(a, AttentionMap::uniform(4));

        let eye = TokenMatrix::new(Array2::eye(2)).unwrap();
        let a = attention_from_qk(&eye, &eye, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(a.row(0)[0], e / (e + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(a.row(0)[1], 1.0 / (e + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(a.row(1)[1], e / (e + 1.0), epsilon = 1e-15);

        let q = TokenMatrix::from_shape_vec(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let k = TokenMatrix::from_shape_vec(2, 2, vec![0.1, 4.0, -1.0, 2.0]).unwrap();
        assert_eq!(attention_from_qk(&q, &k, 0.0).unwrap(), AttentionMap::uniform(2));
    }

    #[test]
    fn qk_shape_mismatch() {
        let q = TokenMatrix::new(Array2::zeros((2, 3))).unwrap();
        let k = TokenMatrix::new(Array2::zeros((2, 4))).unwrap();
        assert!(matches!(attention_from_qk(&q, &k, 1.0), Err(Error::Shape(_))));
        let k = TokenMatrix::new(Array2::zeros((3, 3))).unwrap();
        assert!(matches!(attention_from_qk(&q, &k, 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&AttentionMap::identity(5)).value(), 0.0);
        assert_abs_diff_eq!(entropy(&AttentionMap::uniform(7)).value(), 7f64.ln(), epsilon = 1e-14);
        let a = AttentionMap::new(array![[0.25, 0.75], [0.75, 0.25]]).unwrap();
        // -(0.25 ln 0.25 + 0.75 ln 0.75) = 0.562335...
        assert_abs_diff_eq!(entropy(&a).value(), 0.5623351446188083, epsilon = 1e-15);
    }

    #[test]
    fn construction_renormalizes_or_rejects() {
        let a = AttentionMap::new(array![[0.5 + 4e-7, 0.5], [0.0, 1.0]]).unwrap();
        assert_abs_diff_eq!(a.row(0).sum(), 1.0, epsilon = 1e-15);
        assert!(AttentionMap::new(array![[0.6, 0.5], [0.0, 1.0]]).is_err());
        assert!(AttentionMap::new(array![[1.5, -0.5], [0.0, 1.0]]).is_err());
        assert!(AttentionMap::new(Array2::zeros((2, 3))).is_err());
        assert!(AttentionMap::new(Array2::zeros((0, 3))).is_err());
        let rect = AttentionMap::new(array![[0.2, 0.3, 0.5]]).unwrap();
        assert_eq!(rect.dim(), (1, 3));
        assert!(AttentionMap::permutation(&[0, 0]).is_err());
    }

    fn map_strategy(max_n: usize) -> impl Strategy<Value = AttentionMap> {
        (1..=max_n).prop_flat_map(|n| {
            prop::collection::vec(-8.0f64..8.0, n * n)
                .prop_map(move |v| softmax_rows(Array2::from_shape_vec((n, n), v).unwrap().view()).unwrap())
        })
    }

    proptest! {
        #[test]
        fn entropy_bounds(a in map_strategy(12)) {
            let h = entropy(&a).value();
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (a.cols() as f64).ln() + 1e-12);
        }

        #[test]
        fn softmax_rows_sum_to_one(n in 1usize..20, v in prop::collection::vec(-700.0f64..700.0, 400)) {
            let s = Array2::from_shape_vec((n, n), v[..n * n].to_vec()).unwrap();
            let a = softmax_rows(s.view()).unwrap();
            for row in a.view().axis_iter(Axis(0)) {
                prop_assert!((row.sum() - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn softmax_shift_invariant(v in prop::collection::vec(-20.0f64..20.0, 9), c in -50.0f64..50.0) {
            let s = Array2::from_shape_vec((3, 3), v).unwrap();
            let a = softmax_rows(s.view()).unwrap();
            let b = softmax_rows((&s + c).view()).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }

        #[test]
        fn entropy_permutation_invariant(a in map_strategy(10), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut perm: Vec<usize> = (0..a.n()).collect();
            perm.shuffle(&mut crate::rng::Stream::new(seed).rng());
            let b = a.permuted(&perm);
            prop_assert!((entropy(&a).value() - entropy(&b).value()).abs() < 1e-12);
        }

        #[test]
        fn qk_rotation_invariant(qv in prop::collection::vec(-2.0f64..2.0, 12),
                                 kv in prop::collection::vec(-2.0f64..2.0, 12),
                                 theta in 0.0f64..6.3) {
            // 3 tokens x 4 dims, rotate in the (0, 2) plane
            let q = Array2::from_shape_vec((3, 4), qv).unwrap();
            let k = Array2::from_shape_vec((3, 4), kv).unwrap();
            let mut r = Array2::<f64>::eye(4);
            r[[0, 0]] = theta.cos();
            r[[0, 2]] = -theta.sin();
            r[[2, 0]] = theta.sin();
            r[[2, 2]] = theta.cos();
            let a = attention_from_qk(&TokenMatrix::new(q.clone()).unwrap(), &TokenMatrix::new(k.clone()).unwrap(), 0.5).unwrap();
            let b = attention_from_qk(&TokenMatrix::new(q.dot(&r)).unwrap(), &TokenMatrix::new(k.dot(&r)).unwrap(), 0.5).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-9);
        }
    }
}
