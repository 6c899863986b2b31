//! Small dense regression kernels: least squares through a Householder QR with
//! ordered pivoting, and logistic regression by iteratively reweighted least
//! squares.
//!
//! The QR processes columns left to right and moves a column to the end when
//! what remains of it after projecting out the earlier columns is below
//! `ALIAS_TOLERANCE` times its original norm. Such aliased columns get a zero
//! coefficient and zero rows/columns in the covariance, which is the same
//! answer as refitting without them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance below which a column counts as a linear combination of
/// the columns before it.
pub const ALIAS_TOLERANCE: f64 = 1e-7;

/// Dense column-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds from a slice of equally long columns.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::DimensionMismatch("columns differ in length".into()));
        }
        Ok(Self {
            rows,
            cols: columns.len(),
            data: columns.concat(),
        })
    }

    pub fn from_row_major(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m[(r, c)] = values[r * cols + c];
            }
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn column(&self, c: usize) -> &[f64] {
        &self.data[c * self.rows..(c + 1) * self.rows]
    }

    pub fn column_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.rows..(c + 1) * self.rows]
    }

    pub fn row(&self, r: usize) -> Vec<f64> {
        (0..self.cols).map(|c| self[(r, c)]).collect()
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        for (c, &b) in v.iter().enumerate().take(self.cols) {
            if b != 0.0 {
                for (o, &a) in out.iter_mut().zip(self.column(c)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `c' M c` for a square matrix.
    pub fn quadratic_form(&self, c: &[f64]) -> f64 {
        let mc = self.mul_vec(c);
        c.iter().zip(&mc).map(|(a, b)| a * b).sum()
    }

    fn all_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[c * self.rows + r]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[c * self.rows + r]
    }
}

impl Serialize for Matrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..self.rows).map(|r| self.row(r)).collect();
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let n = rows.len();
        let q = rows.first().map_or(0, Vec::len);
        let flat: Vec<f64> = rows.concat();
        Matrix::from_row_major(n, q, &flat).map_err(serde::de::Error::custom)
    }
}

struct Reflector {
    /// First row the reflector touches.
    start: usize,
    v: Vec<f64>,
    beta: f64,
}

impl Reflector {
    fn apply(&self, y: &mut [f64]) {
        let tail = &mut y[self.start..];
        let w: f64 = self.v.iter().zip(tail.iter()).map(|(a, b)| a * b).sum();
        let w = w * self.beta;
        if w != 0.0 {
            for (t, a) in tail.iter_mut().zip(&self.v) {
                *t -= w * a;
            }
        }
    }
}

/// Householder QR of a design matrix with ordered pivoting.
pub struct QrFactor {
    n: usize,
    q: usize,
    reflectors: Vec<Reflector>,
    /// Original indices of the non-aliased columns, in processing order.
    kept: Vec<usize>,
    /// `r[m]` holds rows `0..=m` of the m-th kept column of R.
    r: Vec<Vec<f64>>,
}

impl QrFactor {
    pub fn new(design: &Matrix) -> Result<Self> {
        let (n, q) = (design.rows, design.cols);
        if n == 0 || q == 0 {
            return Err(Error::EmptyDesign);
        }
        if !design.all_finite() {
            return Err(Error::NonFiniteInput);
        }
        let mut a = design.clone();
        let norms: Vec<f64> = (0..q).map(|j| norm(design.column(j))).collect();
        let mut reflectors: Vec<Reflector> = Vec::with_capacity(q.min(n));
        let mut kept = Vec::with_capacity(q);
        let mut r = Vec::with_capacity(q);
        for j in 0..q {
            let rank = kept.len();
            if rank == n {
                continue;
            }
            let col = a.column(j);
            let tail_norm = norm(&col[rank..]);
            if norms[j] == 0.0 || tail_norm <= ALIAS_TOLERANCE * norms[j] {
                continue;
            }
            let alpha = if col[rank] > 0.0 { -tail_norm } else { tail_norm };
            let mut v = col[rank..].to_vec();
            v[0] -= alpha;
            let vv: f64 = v.iter().map(|a| a * a).sum();
            let refl = Reflector {
                start: rank,
                v,
                beta: 2.0 / vv,
            };
            let mut r_col = col[..rank].to_vec();
            r_col.push(alpha);
            for later in j + 1..q {
                refl.apply(a.column_mut(later));
            }
            reflectors.push(refl);
            kept.push(j);
            r.push(r_col);
        }
        Ok(Self {
            n,
            q,
            reflectors,
            kept,
            r,
        })
    }

    pub fn rank(&self) -> usize {
        self.kept.len()
    }

    /// `true` for columns dropped as linear combinations of earlier ones.
    pub fn aliased(&self) -> Vec<bool> {
        let mut out = vec![true; self.q];
        for &j in &self.kept {
            out[j] = false;
        }
        out
    }

    /// Least-squares coefficients; aliased columns get 0.
    pub fn solve(&self, response: &[f64]) -> Result<Vec<f64>> {
        if response.len() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "response has {} rows, design has {}",
                response.len(),
                self.n
            )));
        }
        if response.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        let mut qty = response.to_vec();
        for refl in &self.reflectors {
            refl.apply(&mut qty);
        }
        let rank = self.rank();
        let mut b = vec![0.0; rank];
        for m in (0..rank).rev() {
            let mut acc = qty[m];
            for (l, bl) in b.iter().enumerate().skip(m + 1) {
                acc -= self.r[l][m] * bl;
            }
            b[m] = acc / self.r[m][m];
        }
        let mut coefficients = vec![0.0; self.q];
        for (m, &j) in self.kept.iter().enumerate() {
            coefficients[j] = b[m];
        }
        Ok(coefficients)
    }

    /// `(X'X)^-1` restricted to kept columns, embedded in a `q × q` matrix
    /// with zeros for aliased columns.
    pub fn unscaled_covariance(&self) -> Matrix {
        let rank = self.rank();
        // R^-1 by back substitution, column by column.
        let mut rinv = vec![vec![0.0; rank]; rank];
        for c in 0..rank {
            for m in (0..=c).rev() {
                let mut acc = if m == c { 1.0 } else { 0.0 };
                for l in m + 1..=c {
                    acc -= self.r[l][m] * rinv[l][c];
                }
                rinv[m][c] = acc / self.r[m][m];
            }
        }
        let mut out = Matrix::zeros(self.q, self.q);
        for a in 0..rank {
            for b in a..rank {
                let s: f64 = (b..rank).map(|l| rinv[a][l] * rinv[b][l]).sum();
                let (ja, jb) = (self.kept[a], self.kept[b]);
                out[(ja, jb)] = s;
                out[(jb, ja)] = s;
            }
        }
        out
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub coefficients: Vec<f64>,
    /// `σ̂² (X'X)^-1` over the non-aliased columns.
    pub coef_covariance: Matrix,
    /// RSS / (n − rank); zero when no residual degrees of freedom remain.
    pub residual_variance: f64,
    pub n: usize,
    pub rank: usize,
    pub full_rank: bool,
    pub aliased: Vec<bool>,
    pub residuals: Vec<f64>,
}

impl OlsFit {
    pub fn df_residual(&self) -> usize {
        self.n - self.rank
    }

    pub fn std_error(&self, j: usize) -> f64 {
        self.coef_covariance[(j, j)].max(0.0).sqrt()
    }
}

pub fn fit_ols(design: &Matrix, response: &[f64]) -> Result<OlsFit> {
    let qr = QrFactor::new(design)?;
    fit_with(&qr, design, response)
}

/// Several responses against one design, sharing the factorization.
pub fn fit_ols_multi(design: &Matrix, responses: &[&[f64]]) -> Result<Vec<OlsFit>> {
    let qr = QrFactor::new(design)?;
    responses.iter().map(|y| fit_with(&qr, design, y)).collect()
}

fn fit_with(qr: &QrFactor, design: &Matrix, response: &[f64]) -> Result<OlsFit> {
    let coefficients = qr.solve(response)?;
    let fitted = design.mul_vec(&coefficients);
    let residuals: Vec<f64> = response.iter().zip(&fitted).map(|(y, f)| y - f).collect();
    let rss: f64 = residuals.iter().map(|e| e * e).sum();
    let rank = qr.rank();
    let n = design.rows;
    let residual_variance = if n > rank { rss / (n - rank) as f64 } else { 0.0 };
    let mut coef_covariance = qr.unscaled_covariance();
    coef_covariance.data.iter_mut().for_each(|a| *a *= residual_variance);
    Ok(OlsFit {
        coefficients,
        coef_covariance,
        residual_variance,
        n,
        rank,
        full_rank: rank == design.cols,
        aliased: qr.aliased(),
        residuals,
    })
}

/// Linear predictor magnitude past which an unpenalized fit is treated as
/// separated (fitted probability within ~1e-13 of 0 or 1).
pub const SEPARATION_LINEAR_PREDICTOR: f64 = 30.0;
pub const LOGISTIC_TOLERANCE: f64 = 1e-8;
pub const LOGISTIC_MAX_ITERATIONS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub separation_detected: bool,
    /// Euclidean norm of the (penalized) score at the returned coefficients.
    pub score_norm: f64,
    pub ridge: f64,
}

impl LogisticFit {
    pub fn linear_predictor(&self, row: &[f64]) -> f64 {
        row.iter().zip(&self.coefficients).map(|(x, b)| x * b).sum()
    }

    pub fn probability(&self, row: &[f64]) -> f64 {
        logistic(self.linear_predictor(row))
    }
}

/// `1 / (1 + e^-t)`, evaluated without overflow.
pub fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Bernoulli log-likelihood minus `ridge/2 · |β|²`.
pub fn logistic_log_likelihood(design: &Matrix, response: &[bool], beta: &[f64], ridge: f64) -> f64 {
    let eta = design.mul_vec(beta);
    let ll: f64 = eta
        .iter()
        .zip(response)
        .map(|(&t, &y)| if y { -softplus(-t) } else { -softplus(t) })
        .sum();
    ll - 0.5 * ridge * beta.iter().map(|b| b * b).sum::<f64>()
}

/// Gradient of [`logistic_log_likelihood`].
pub fn logistic_score(design: &Matrix, response: &[bool], beta: &[f64], ridge: f64) -> Vec<f64> {
    let eta = design.mul_vec(beta);
    let resid: Vec<f64> = eta
        .iter()
        .zip(response)
        .map(|(&t, &y)| f64::from(u8::from(y)) - logistic(t))
        .collect();
    (0..design.cols)
        .map(|j| {
            let g: f64 = design.column(j).iter().zip(&resid).map(|(x, r)| x * r).sum();
            g - ridge * beta[j]
        })
        .collect()
}

/// Maximizes the (optionally ridge-penalized) Bernoulli log-likelihood by
/// Newton/IRLS with step halving.
pub fn fit_logistic(design: &Matrix, response: &[bool], ridge: f64) -> Result<LogisticFit> {
    let (n, q) = (design.rows, design.cols);
    if n == 0 || q == 0 {
        return Err(Error::EmptyDesign);
    }
    if response.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "response has {} rows, design has {n}",
            response.len()
        )));
    }
    if !design.all_finite() || !ridge.is_finite() || ridge < 0.0 {
        return Err(Error::NonFiniteInput);
    }

    let mut beta = vec![0.0; q];
    let mut ll = logistic_log_likelihood(design, response, &beta, ridge);
    let mut score = logistic_score(design, response, &beta, ridge);
    let mut iterations = 0;
    let mut converged = norm(&score) <= LOGISTIC_TOLERANCE;
    while !converged && iterations < LOGISTIC_MAX_ITERATIONS {
        iterations += 1;
        let eta = design.mul_vec(&beta);
        let w: Vec<f64> = eta
            .iter()
            .map(|&t| {
                let p = logistic(t);
                p * (1.0 - p)
            })
            .collect();
        let mut info = Matrix::zeros(q, q);
        for a in 0..q {
            for b in a..q {
                let s: f64 = design
                    .column(a)
                    .iter()
                    .zip(design.column(b))
                    .zip(&w)
                    .map(|((xa, xb), wi)| xa * xb * wi)
                    .sum();
                info[(a, b)] = s;
                info[(b, a)] = s;
            }
            info[(a, a)] += ridge;
        }
        let step = match QrFactor::new(&info) {
            Ok(qr) => qr.solve(&score)?,
            Err(_) => break,
        };
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + scale * s).collect();
            let trial_ll = logistic_log_likelihood(design, response, &trial, ridge);
            // Near the optimum the likelihood is flat to rounding; accept those steps.
            if trial_ll >= ll - 1e-12 * (1.0 + ll.abs()) {
                beta = trial;
                ll = trial_ll;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        score = logistic_score(design, response, &beta, ridge);
        converged = norm(&score) <= LOGISTIC_TOLERANCE;
        if !accepted {
            break;
        }
    }

    let max_eta = design.mul_vec(&beta).iter().fold(0.0f64, |m, t| m.max(t.abs()));
    Ok(LogisticFit {
        separation_detected: ridge == 0.0 && max_eta > SEPARATION_LINEAR_PREDICTOR,
        score_norm: norm(&score),
        coefficients: beta,
        converged,
        iterations,
        ridge,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn design_with_intercept(x: &[f64]) -> Matrix {
        Matrix::from_columns(&[vec![1.0; x.len()], x.to_vec()]).unwrap()
    }

    #[test]
    fn exact_line_is_recovered() {
        let x = [0.0, 1.0, 2.0, 5.0, -3.0];
        let y: Vec<f64> = x.iter().map(|x| 2.0 + 3.0 * x).collect();
        let fit = fit_ols(&design_with_intercept(&x), &y).unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-12);
        assert!((fit.coefficients[1] - 3.0).abs() < 1e-12);
        assert!(fit.residual_variance < 1e-24);
        assert!(fit.full_rank);
    }

    #[test]
    fn intercept_only_gives_mean_and_sample_variance() {
        let m = Matrix::from_columns(&[vec![1.0, 1.0]]).unwrap();
        let fit = fit_ols(&m, &[1.0, 3.0]).unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-12);
        assert!((fit.residual_variance - 2.0).abs() < 1e-12);
        assert!((fit.coef_covariance[(0, 0)] - 1.0).abs() < 1e-12);
    }

    /// Independent route: explicit 3x3 inverse of X'X by cofactors.
    fn normal_equations_3(x: &Matrix, y: &[f64]) -> [f64; 3] {
        let mut xtx = [[0.0; 3]; 3];
        let mut xty = [0.0; 3];
        for i in 0..x.rows() {
            for a in 0..3 {
                xty[a] += x[(i, a)] * y[i];
                for b in 0..3 {
                    xtx[a][b] += x[(i, a)] * x[(i, b)];
                }
            }
        }
        let m = xtx;
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        let cof = |r: usize, c: usize| {
            let rs: Vec<usize> = (0..3).filter(|&i| i != r).collect();
            let cs: Vec<usize> = (0..3).filter(|&i| i != c).collect();
            let minor = m[rs[0]][cs[0]] * m[rs[1]][cs[1]] - m[rs[0]][cs[1]] * m[rs[1]][cs[0]];
            if (r + c).is_multiple_of(2) {
                minor
            } else {
                -minor
            }
        };
        let mut out = [0.0; 3];
        for a in 0..3 {
            // inverse[a][b] = cof(b, a) / det
            out[a] = (0..3).map(|b| cof(b, a) / det * xty[b]).sum();
        }
        out
    }

    #[test]
    fn matches_normal_equations_on_random_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let vals: Vec<f64> = (0..18).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x = Matrix::from_row_major(6, 3, &vals).unwrap();
            let y: Vec<f64> = (0..6).map(|_| rng.random_range(-5.0..5.0)).collect();
            let fit = fit_ols(&x, &y).unwrap();
            let oracle = normal_equations_3(&x, &y);
            for j in 0..3 {
                assert!((fit.coefficients[j] - oracle[j]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn aliased_column_is_dropped_like_a_refit() {
        let x = [0.0, 1.0, 2.0, 3.0, 7.0];
        let dup: Vec<f64> = x.iter().map(|a| 2.0 * a).collect();
        let zero = vec![0.0; 5];
        let y = [1.0, 2.5, 2.9, 4.2, 8.0];
        let full = Matrix::from_columns(&[vec![1.0; 5], x.to_vec(), dup, zero]).unwrap();
        let fit = fit_ols(&full, &y).unwrap();
        let small = fit_ols(&design_with_intercept(&x), &y).unwrap();
        assert_eq!(fit.rank, 2);
        assert!(!fit.full_rank);
        assert_eq!(fit.aliased, vec![false, false, true, true]);
        assert!((fit.coefficients[1] - small.coefficients[1]).abs() < 1e-12);
        assert_eq!(fit.coefficients[2], 0.0);
        assert!((fit.residual_variance - small.residual_variance).abs() < 1e-12);
        assert_eq!(fit.coef_covariance[(2, 2)], 0.0);
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(matches!(fit_ols(&Matrix::zeros(0, 2), &[]), Err(Error::EmptyDesign)));
        let m = Matrix::from_columns(&[vec![1.0, f64::NAN]]).unwrap();
        assert!(matches!(fit_ols(&m, &[1.0, 2.0]), Err(Error::NonFiniteInput)));
        let m = Matrix::from_columns(&[vec![1.0, 1.0]]).unwrap();
        assert!(matches!(fit_ols(&m, &[1.0, f64::INFINITY]), Err(Error::NonFiniteInput)));
    }

    proptest! {
        #[test]
        fn residuals_orthogonal_to_design(
            rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 6..30),
        ) {
            let n = rows.len();
            let x: Vec<f64> = rows.iter().flat_map(|r| [1.0, r[0], r[1]]).collect();
            let y: Vec<f64> = rows.iter().map(|r| r[2] * r[3]).collect();
            let design = Matrix::from_row_major(n, 3, &x).unwrap();
            let fit = fit_ols(&design, &y).unwrap();
            let scale = y.iter().map(|a| a.abs()).fold(1.0, f64::max) * 10.0 * n as f64;
            for j in 0..3 {
                let dot: f64 = design.column(j).iter().zip(&fit.residuals).map(|(a, b)| a * b).sum();
                prop_assert!(dot.abs() <= 1e-8 * scale);
            }
            let cov = &fit.coef_covariance;
            for a in 0..3 {
                prop_assert!(cov[(a, a)] >= 0.0);
                for b in 0..3 {
                    prop_assert!((cov[(a, b)] - cov[(b, a)]).abs() <= 1e-10 * cov[(a, a)].abs().max(cov[(b, b)].abs()).max(1e-300));
                }
            }
        }

        #[test]
        fn binary_regressor_slope_is_mean_difference(
            y0 in prop::collection::vec(-100.0f64..100.0, 2..15),
            y1 in prop::collection::vec(-100.0f64..100.0, 2..15),
        ) {
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let g: Vec<f64> = y0.iter().map(|_| 0.0).chain(y1.iter().map(|_| 1.0)).collect();
            let y: Vec<f64> = y0.iter().chain(&y1).copied().collect();
            let fit = fit_ols(&design_with_intercept(&g), &y).unwrap();
            let (m0, m1) = (mean(&y0), mean(&y1));
            let tol = 1e-10 * (m0.abs() + m1.abs()).max(1.0);
            prop_assert!((fit.coefficients[0] - m0).abs() <= tol);
            prop_assert!((fit.coefficients[1] - (m1 - m0)).abs() <= tol);
        }
    }

    #[test]
    fn logistic_intercept_only() {
        let ones = Matrix::from_columns(&[vec![1.0; 4]]).unwrap();
        let fit = fit_logistic(&ones, &[true, false, true, false], 0.0).unwrap();
        assert!(fit.converged);
        assert!(fit.coefficients[0].abs() < 1e-10);
        let fit = fit_logistic(&ones, &[true, true, true, false], 0.0).unwrap();
        assert!((fit.coefficients[0] - 3f64.ln()).abs() < 1e-6);
        assert!(!fit.separation_detected);
    }

    #[test]
    fn logistic_flags_separation() {
        let x = [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0];
        let y: Vec<bool> = x.iter().map(|&a| a > 0.0).collect();
        let fit = fit_logistic(&design_with_intercept(&x), &y, 0.0).unwrap();
        assert!(fit.separation_detected);
        let ridged = fit_logistic(&design_with_intercept(&x), &y, 1e-4).unwrap();
        assert!(!ridged.separation_detected);
        assert!(ridged.converged);
    }

    #[test]
    fn logistic_score_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 60;
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<bool> = x
            .iter()
            .map(|&a| rng.random::<f64>() < logistic(0.3 + 1.2 * a))
            .collect();
        let design = design_with_intercept(&x);
        let fit = fit_logistic(&design, &y, 0.0).unwrap();
        assert!(fit.converged);
        assert!(fit.score_norm <= LOGISTIC_TOLERANCE);
        // At a generic point, the analytic score must agree with central differences.
        for ridge in [0.0, 0.5] {
            let beta = [0.2, -0.7];
            let analytic = logistic_score(&design, &y, &beta, ridge);
            for j in 0..2 {
                let h = 1e-5;
                let mut up = beta;
                let mut dn = beta;
                up[j] += h;
                dn[j] -= h;
                let fd = (logistic_log_likelihood(&design, &y, &up, ridge)
                    - logistic_log_likelihood(&design, &y, &dn, ridge))
                    / (2.0 * h);
                assert!((fd - analytic[j]).abs() <= 1e-5 * analytic[j].abs().max(1.0));
            }
        }
    }
}
