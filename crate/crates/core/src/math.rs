//! Dense row-major linear algebra and the scalar functions the network is
//! built from. Everything here is `f64`; the finite-difference checks in the
//! test suite need the extra precision.

use crate::error::{Error, Result};

/// Row-major dense matrix whose entries are always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// A dense vector of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector(Vec<f64>);

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// Copies the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        Vector(data)
    }

    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm_nn(&a.data, a.rows, a.cols, &b.data, b.cols, &mut out.data);
    if !out.is_finite() {
        return Err(Error::Numeric("matrix product overflowed".into()));
    }
    Ok(out)
}

// The three kernels below accumulate into `out`; callers zero it first when
// they want a plain product.

/// out(m×n) += a(m×k) · b(k×n)
pub(crate) fn gemm_nn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out(k×n) += aᵀ · b, with a(m×k) and b(m×n)
pub(crate) fn gemm_tn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out(m×k) += a · bᵀ, with a(m×n) and b(k×n)
pub(crate) fn gemm_nt(a: &[f64], m: usize, n: usize, b: &[f64], k: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            out[i * k + p] += a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

pub fn relu(v: &Vector) -> Vector {
    Vector(v.0.iter().map(|&x| x.max(0.0)).collect())
}

pub fn softmax(v: &Vector) -> Result<Vector> {
    if v.is_empty() {
        return Err(Error::Argument("softmax of an empty vector".into()));
    }
    if v.0.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("softmax input is not finite".into()));
    }
    let mut out = v.0.clone();
    softmax_in_place(&mut out);
    Ok(Vector(out))
}

/// Overflow-safe softmax over a non-empty slice of finite logits.
pub(crate) fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in z.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in z.iter_mut() {
        *x /= sum;
    }
}

/// Probabilities below this are clamped before taking the log.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

/// Categorical cross-entropy `-ln p[target]`.
pub fn cross_entropy(pred: &Vector, target_class: usize) -> Result<f64> {
    if target_class >= pred.len() {
        return Err(Error::Argument(format!(
            "target class {target_class} out of range for {} classes",
            pred.len()
        )));
    }
    Ok(cross_entropy_unchecked(pred.as_slice(), target_class))
}

pub(crate) fn cross_entropy_unchecked(pred: &[f64], target_class: usize) -> f64 {
    -pred[target_class].max(PROBABILITY_FLOOR).ln()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Central-difference gradient of `f` at `params`.
pub fn numerical_gradient<F>(mut f: F, params: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Argument(format!("step must be positive, got {step}")));
    }
    let mut p = params.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let plus = f(&p);
        p[i] = orig - step;
        let minus = f(&p);
        p[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "objective is not finite around coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let x = m(&[&[1.0, -2.0, 3.5], &[0.25, 4.0, -1.0], &[7.0, 0.0, 2.0]]);
        assert_eq!(matmul(&Matrix::identity(3), &x).unwrap(), x);

        let y = m(&[&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], &[9.0, 1.0, 2.0, 3.0]]);
        assert_eq!(matmul(&Matrix::zeros(2, 3), &y).unwrap(), Matrix::zeros(2, 4));
    }

    #[test]
    fn matmul_small_product() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[5.0], &[6.0]]);
        assert_eq!(a.matmul(&b).unwrap(), m(&[&[17.0], &[39.0]]));
    }

    #[test]
    fn matmul_shape_error_names_dims() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3 by 2x3"), "{msg}");
    }

    #[test]
    fn transposed_kernels_agree_with_transpose() {
        let a = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let b = m(&[&[0.5, -1.0], &[2.0, 3.0]]);
        let mut tn = vec![0.0; 3 * 2];
        gemm_tn(a.as_slice(), 2, 3, b.as_slice(), 2, &mut tn);
        assert_eq!(tn, a.transpose().matmul(&b).unwrap().into_vec());

        let c = m(&[&[1.0, 0.0, 2.0], &[-1.0, 1.0, 1.0]]);
        let mut nt = vec![0.0; 2 * 2];
        gemm_nt(a.as_slice(), 2, 3, c.as_slice(), 2, &mut nt);
        assert_eq!(nt, a.matmul(&c.transpose()).unwrap().into_vec());
    }

    #[test]
    fn from_vec_rejects_bad_input() {
        assert!(matches!(Matrix::from_vec(2, 2, vec![1.0; 3]), Err(Error::Shape(_))));
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&vec![0.0, 0.0].into()).into_vec(), vec![0.0, 0.0]);
        assert_eq!(relu(&vec![-1.0, 2.0].into()).into_vec(), vec![0.0, 2.0]);
        assert_eq!(
            relu(&vec![-5.0, -1.0, 0.0, 1.0, 5.0].into()).into_vec(),
            vec![0.0, 0.0, 0.0, 1.0, 5.0]
        );
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&vec![0.0; 3].into()).unwrap();
        for &p in s.as_slice() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&vec![2f64.ln(), 0.0].into()).unwrap();
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(softmax(&Vector::zeros(0)), Err(Error::Argument(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&vec![0.0, 1.0, 0.0].into(), 1).unwrap(), 0.0);
        let k = 7;
        let uniform = Vector::new(vec![1.0 / k as f64; k]);
        assert!((cross_entropy(&uniform, 3).unwrap() - (k as f64).ln()).abs() < 1e-12);
        let ce = cross_entropy(&vec![0.5, 0.5].into(), 0).unwrap();
        assert!((ce - 0.693147).abs() < 1e-6);
        assert!(matches!(
            cross_entropy(&vec![0.5, 0.5].into(), 2),
            Err(Error::Argument(_))
        ));
        // floor keeps a zero probability finite
        assert!((cross_entropy(&vec![1.0, 0.0].into(), 1).unwrap() - 1e-12f64.ln().abs()).abs() < 1e-9);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.3, 0.3, 0.2]), 1);
        assert_eq!(argmax(&[0.0, 0.0, 1.0]), 2);
    }

    #[test]
    fn numerical_gradient_examples() {
        let g = numerical_gradient(|p| p[0] * p[0], &[3.0], 1e-3).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);

        let g = numerical_gradient(|_| 4.2, &[1.0, -2.0, 9.0], 1e-3).unwrap();
        assert_eq!(g, vec![0.0; 3]);

        let g = numerical_gradient(|p| p[0] * p[1], &[2.0, 5.0], 1e-3).unwrap();
        assert!((g[0] - 5.0).abs() < 1e-6);
        assert!((g[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn numerical_gradient_errors() {
        assert!(matches!(
            numerical_gradient(|p| p[0], &[1.0], 0.0),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            numerical_gradient(|p| p[0].ln(), &[0.0], 1e-3),
            Err(Error::Numeric(_))
        ));
    }

    proptest! {
        #[test]
        fn identity_is_exact(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let data: Vec<f64> = (0..rows * cols)
                .map(|i| ((seed.wrapping_mul(i as u64 + 1) % 1000) as f64 - 500.0) / 7.0)
                .collect();
            let x = Matrix::from_vec(rows, cols, data).unwrap();
            prop_assert_eq!(&Matrix::identity(rows).matmul(&x).unwrap(), &x);
            prop_assert_eq!(&x.matmul(&Matrix::identity(cols)).unwrap(), &x);
        }

        #[test]
        fn softmax_sums_to_one(v in prop::collection::vec(-700.0f64..700.0, 1..32)) {
            let s = softmax(&Vector::new(v)).unwrap();
            let sum: f64 = s.as_slice().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(s.as_slice().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }

        #[test]
        fn softmax_shift_invariant(
            v in prop::collection::vec(-50.0f64..50.0, 1..16),
            c in -100.0f64..100.0,
        ) {
            let a = softmax(&Vector::new(v.clone())).unwrap();
            let b = softmax(&Vector::new(v.iter().map(|x| x + c).collect())).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn cross_entropy_nonnegative(v in prop::collection::vec(0.0f64..1.0, 1..10), t in 0usize..10) {
            let sum: f64 = v.iter().sum();
            prop_assume!(sum > 0.0);
            let p = Vector::new(v.iter().map(|x| x / sum).collect());
            let t = t % p.len();
            prop_assert!(cross_entropy(&p, t).unwrap() >= 0.0);
        }

        #[test]
        fn relu_idempotent(v in prop::collection::vec(-1e6f64..1e6, 0..32)) {
            let once = relu(&Vector::new(v));
            prop_assert_eq!(relu(&once), once);
        }
    }
}
