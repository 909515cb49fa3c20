// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense numeric primitives: a row-major matrix, the ridge solver and the
//! rank statistics used to score probes.
//!
//! Everything here is a pure function over borrowed inputs and runs in
//! double precision.

use crate::error::{Error, Result};

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting bad shapes and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::validation(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        check_finite(&data, "matrix")?;
        Ok(Self { rows, cols, data })
    }

    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Square identity.
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Stacks equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::validation("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copies the selected rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// `self · v`.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), v)).collect()
    }

    /// Accumulates `self · v` into `out`.
    pub fn mul_vec_add(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o += dot(self.row(r), v);
        }
    }

    /// `selfᵀ · v`.
    pub fn t_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &w) in v.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, &x) in out.iter_mut().zip(self.row(r)) {
                *o += w * x;
            }
        }
        out
    }

    /// `selfᵀ · self`, exploiting symmetry.
    pub fn gram(&self) -> Matrix {
        let d = self.cols;
        let mut g = Matrix::zeros(d, d);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..d {
                let xi = row[i];
                if xi == 0.0 {
                    continue;
                }
                let gi = &mut g.data[i * d..(i + 1) * d];
                for j in i..d {
                    gi[j] += xi * row[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                g.data[i * d + j] = g.data[j * d + i];
            }
        }
        g
    }
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::validation(format!(
            "{what} contains a non-finite value at index {i}"
        ))),
        None => Ok(()),
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; zero if either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = norm(a) * norm(b);
    if denom == 0.0 {
        0.0
    } else {
        dot(a, b) / denom
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation, `sqrt(mean((v - mean)^2))`. Zero for empty input.
pub fn population_std(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

// ---------------------------------------------------------------------------
// Ridge regression
// ---------------------------------------------------------------------------

/// Options for [`ridge_fit_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RidgeConfig {
    pub lambda: f64,
    /// Center labels and features before solving and report an intercept.
    pub center: bool,
}

impl Default for RidgeConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            center: false,
        }
    }
}

/// Coefficients plus the intercept (always 0 when not centering).
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeSolution {
    pub theta: Vec<f64>,
    pub intercept: f64,
}

/// Minimizes `Σ (yᵢ − θᵀxᵢ)² + λ‖θ‖²` with no intercept term.
pub fn ridge_fit(x: &Matrix, y: &[f64], lambda: f64) -> Result<Vec<f64>> {
    ridge_fit_with(
        x,
        y,
        RidgeConfig {
            lambda,
            center: false,
        },
    )
    .map(|s| s.theta)
}

/// Ridge regression with optional centering.
pub fn ridge_fit_with(x: &Matrix, y: &[f64], cfg: RidgeConfig) -> Result<RidgeSolution> {
    let (n, d) = (x.rows(), x.cols());
    if n == 0 || d == 0 {
        return Err(Error::validation("ridge_fit needs N >= 1 and d >= 1"));
    }
    if y.len() != n {
        return Err(Error::validation(format!(
            "label length {} does not match {n} rows",
            y.len()
        )));
    }
    if !(cfg.lambda >= 0.0) || !cfg.lambda.is_finite() {
        return Err(Error::validation(format!(
            "lambda must be finite and >= 0, got {}",
            cfg.lambda
        )));
    }
    check_finite(x.as_slice(), "design matrix")?;
    check_finite(y, "labels")?;

    if !cfg.center {
        let theta = solve_normal_equations(x, y, cfg.lambda)?;
        return Ok(RidgeSolution {
            theta,
            intercept: 0.0,
        });
    }

    let y_mean = mean(y);
    let mut col_mean = vec![0.0; d];
    for r in 0..n {
        for (m, &v) in col_mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    col_mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut xc = x.clone();
    for r in 0..n {
        for (v, m) in xc.row_mut(r).iter_mut().zip(&col_mean) {
            *v -= m;
        }
    }
    let yc: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
    let theta = solve_normal_equations(&xc, &yc, cfg.lambda)?;
    let intercept = y_mean - dot(&theta, &col_mean);
    Ok(RidgeSolution { theta, intercept })
}

fn solve_normal_equations(x: &Matrix, y: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let mut a = x.gram();
    let d = a.rows();
    for i in 0..d {
        a.data[i * d + i] += lambda;
    }
    let b = x.t_mul_vec(y);
    if let Some(theta) = cholesky_solve(&a, &b) {
        return Ok(theta);
    }
    // Cholesky only fails here for (numerically) semidefinite systems.
    lu_solve(a, b).ok_or(Error::SingularDesign)
}

/// Solves `A x = b` for symmetric positive definite `A`. `None` if a pivot
/// is not safely positive.
fn cholesky_solve(a: &Matrix, b: &[f64]) -> Option<Vec<f64>> {
    let n = a.rows();
    let max_diag = (0..n).map(|i| a.get(i, i).abs()).fold(0.0_f64, f64::max);
    let tol = max_diag * n as f64 * f64::EPSILON;
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut s = a.get(j, j);
        for k in 0..j {
            s -= l[j * n + k] * l[j * n + k];
        }
        if !(s > tol) {
            return None;
        }
        let ljj = s.sqrt();
        l[j * n + j] = ljj;
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / ljj;
        }
    }
    let mut z = b.to_vec();
    for i in 0..n {
        let mut s = z[i];
        for k in 0..i {
            s -= l[i * n + k] * z[k];
        }
        z[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = z[i];
        for k in i + 1..n {
            s -= l[k * n + i] * z[k];
        }
        z[i] = s / l[i * n + i];
    }
    Some(z)
}

/// Gaussian elimination with partial pivoting. `None` when singular.
fn lu_solve(mut a: Matrix, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = a.rows();
    let scale = a.as_slice().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let tol = scale * n as f64 * f64::EPSILON * 16.0;
    for col in 0..n {
        let (piv, pmax) = (col..n)
            .map(|r| (r, a.get(r, col).abs()))
            .fold((col, -1.0), |acc, c| if c.1 > acc.1 { c } else { acc });
        if !(pmax > tol) {
            return None;
        }
        if piv != col {
            for c in 0..n {
                a.data.swap(piv * n + c, col * n + c);
            }
            b.swap(piv, col);
        }
        let p = a.get(col, col);
        for r in col + 1..n {
            let f = a.get(r, col) / p;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a.data[r * n + c] -= f * a.data[col * n + c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= a.get(i, k) * x[k];
        }
        x[i] = s / a.get(i, i);
    }
    Some(x)
}

// ---------------------------------------------------------------------------
// Rank statistics
// ---------------------------------------------------------------------------

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let r = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::validation(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::validation("correlation needs at least 2 points"));
    }
    check_finite(a, "first argument")?;
    check_finite(b, "second argument")
}

/// Pearson product-moment correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "input vector is constant".into(),
        ));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Coefficient of determination `1 − SSE/SST` of `pred` against `obs`.
pub fn r_squared(pred: &[f64], obs: &[f64]) -> Result<f64> {
    check_pair(pred, obs)?;
    let m = mean(obs);
    let sst: f64 = obs.iter().map(|o| (o - m) * (o - m)).sum();
    if sst == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "observations are constant".into(),
        ));
    }
    let sse: f64 = pred.iter().zip(obs).map(|(p, o)| (o - p) * (o - p)).sum();
    Ok(1.0 - sse / sst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ridge_identity_design() {
        let x = Matrix::identity(2);
        let theta = ridge_fit(&x, &[3.0, 5.0], 0.0).unwrap();
        assert_eq!(theta, vec![3.0, 5.0]);
    }

    #[test]
    fn ridge_hand_normal_equations() {
        let x = Matrix::new(2, 1, vec![1.0, 1.0]).unwrap();
        let theta = ridge_fit(&x, &[1.0, 3.0], 2.0).unwrap();
        assert!((theta[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ridge_zero_labels() {
        let x = Matrix::new(3, 2, vec![1.0, 2.0, -0.5, 4.0, 3.0, 1.0]).unwrap();
        for lambda in [0.0, 0.1, 10.0] {
            assert!(ridge_fit(&x, &[0.0; 3], lambda)
                .unwrap()
                .iter()
                .all(|t| *t == 0.0));
        }
    }

    #[test]
    fn ridge_singular_at_zero_lambda() {
        let x = Matrix::new(3, 2, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]).unwrap();
        assert!(matches!(
            ridge_fit(&x, &[1.0, 2.0, 3.0], 0.0),
            Err(Error::SingularDesign)
        ));
        assert!(ridge_fit(&x, &[1.0, 2.0, 3.0], 0.5).is_ok());
    }

    #[test]
    fn ridge_rejects_non_finite() {
        let x = Matrix {
            rows: 1,
            cols: 1,
            data: vec![f64::NAN],
        };
        assert!(matches!(
            ridge_fit(&x, &[1.0], 1.0),
            Err(Error::Validation(_))
        ));
        let x = Matrix::identity(1);
        assert!(matches!(
            ridge_fit(&x, &[f64::INFINITY], 1.0),
            Err(Error::Validation(_))
        ));
        assert!(ridge_fit(&x, &[1.0], -1.0).is_err());
    }

    #[test]
    fn ridge_centering_recovers_intercept() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let y: Vec<f64> = rows
            .iter()
            .map(|r| 2.0 + 0.5 * r[0] - 0.25 * r[1])
            .collect();
        let sol = ridge_fit_with(
            &x,
            &y,
            RidgeConfig {
                lambda: 0.0,
                center: true,
            },
        )
        .unwrap();
        assert!((sol.intercept - 2.0).abs() < 1e-9);
        assert!((sol.theta[0] - 0.5).abs() < 1e-9);
        assert!((sol.theta[1] + 0.25).abs() < 1e-9);
    }

    #[test]
    fn spearman_hand_cases() {
        assert_eq!(spearman(&[1., 2., 3.], &[10., 20., 30.]).unwrap(), 1.0);
        assert_eq!(spearman(&[1., 2., 3.], &[3., 2., 1.]).unwrap(), -1.0);
        let r = spearman(&[1., 2., 3., 4.], &[1., 3., 2., 4.]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
    }

    #[test]
    fn spearman_constant_is_error() {
        assert!(matches!(
            spearman(&[1., 1., 1.], &[1., 2., 3.]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(spearman(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[10., 20., 20., 5.]), vec![2., 3.5, 3.5, 1.]);
        assert_eq!(average_ranks(&[3., 1., 2.]), vec![3., 1., 2.]);
    }

    #[test]
    fn r_squared_cases() {
        let obs = [1.0, 2.0, 4.0];
        assert_eq!(r_squared(&obs, &obs).unwrap(), 1.0);
        let m = mean(&obs);
        assert!(r_squared(&[m; 3], &obs).unwrap().abs() < 1e-15);
        assert_eq!(r_squared(&[0., 0.], &[-1., 1.]).unwrap(), 0.0);
        assert!(r_squared(&[1., 2.], &[3., 3.]).is_err());
    }

    #[test]
    fn population_std_cases() {
        assert_eq!(population_std(&[4.0, 4.0, 4.0]), 0.0);
        assert_eq!(population_std(&[1.0, 3.0]), 1.0);
    }

    #[test]
    fn pearson_constant_is_error() {
        assert!(pearson(&[1., 2.], &[5., 5.]).is_err());
    }

    fn finite_vec(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-100.0..100.0_f64, n)
    }

    proptest! {
        #[test]
        fn ridge_shrinks_with_lambda(
            rows in prop::collection::vec(finite_vec(3..4), 5..12),
            y in finite_vec(12..13),
            l1 in 0.01..10.0_f64,
            dl in 0.01..10.0_f64,
        ) {
            let x = Matrix::from_rows(&rows).unwrap();
            let y = &y[..x.rows()];
            let a = ridge_fit(&x, y, l1).unwrap();
            let b = ridge_fit(&x, y, l1 + dl).unwrap();
            prop_assert!(norm(&a) >= norm(&b) * (1.0 - 1e-9));
        }

        #[test]
        fn spearman_monotone_invariance(a in finite_vec(3..20), seed in any::<u64>()) {
            let b: Vec<f64> = a.iter().enumerate()
                .map(|(i, v)| v * 0.3 + ((i as u64 ^ seed) % 7) as f64).collect();
            if let Ok(r) = spearman(&a, &b) {
                let cubed: Vec<f64> = a.iter().map(|v| v * v * v).collect();
                let expd: Vec<f64> = b.iter().map(|v| (v / 50.0).exp()).collect();
                prop_assert!((spearman(&cubed, &b).unwrap() - r).abs() < 1e-12);
                prop_assert!((spearman(&a, &expd).unwrap() - r).abs() < 1e-12);
                prop_assert!((spearman(&b, &a).unwrap() - r).abs() < 1e-12);
            }
        }

        #[test]
        fn spearman_negation_without_ties(perm in Just((0..15).collect::<Vec<usize>>()).prop_shuffle()) {
            let a: Vec<f64> = (0..15).map(|i| i as f64).collect();
            let b: Vec<f64> = perm.iter().map(|&p| p as f64 * 1.5).collect();
            let neg: Vec<f64> = b.iter().map(|v| -v).collect();
            prop_assert!((spearman(&a, &neg).unwrap() + spearman(&a, &b).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn ranks_of_permutation(perm in Just((1..=20).collect::<Vec<usize>>()).prop_shuffle()) {
            let v: Vec<f64> = perm.iter().map(|&p| p as f64).collect();
            prop_assert_eq!(average_ranks(&v), v);
        }

        #[test]
        fn std_homogeneous(v in finite_vec(1..30), k in -10.0..10.0_f64) {
            let scaled: Vec<f64> = v.iter().map(|x| x * k).collect();
            let lhs = population_std(&scaled);
            let rhs = k.abs() * population_std(&v);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs));
        }
    }
}
