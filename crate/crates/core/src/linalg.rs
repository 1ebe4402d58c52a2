//! Deterministic numerical primitives shared by the estimators.
//!
//! Every reduction whose result feeds a reported number goes through
//! [`NeumaierSum`] in a fixed row order, so repeated runs on the same input
//! are bit-identical. Dense factorizations come from `nalgebra`.

use nalgebra::{DMatrix, DVector};

use crate::error::{EaseError, Result};

/// Relative tolerance used to decide numerical rank.
pub const RANK_TOL: f64 = 1e-10;

/// Compensated (Neumaier) summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Compensated sum of an iterator, in iteration order.
pub fn ordered_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut acc = NeumaierSum::new();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

/// Name of column `j` of an augmented design `(1, X')`.
pub fn design_column_name(j: usize) -> String {
    if j == 0 {
        "intercept".to_string()
    } else {
        format!("x{j}")
    }
}

/// Prepends a column of ones: rows become `(1, x')`.
pub fn augment(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, p) = x.shape();
    DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] })
}

/// Augmented row `(1, x')` for a single covariate vector.
pub fn augment_row(x: &[f64]) -> DVector<f64> {
    DVector::from_fn(x.len() + 1, |j, _| if j == 0 { 1.0 } else { x[j - 1] })
}

/// Copies the rows of a column-major matrix into a contiguous row-major buffer.
pub fn row_major(x: &DMatrix<f64>) -> Vec<f64> {
    let (n, p) = x.shape();
    let mut out = Vec::with_capacity(n * p);
    for i in 0..n {
        for j in 0..p {
            out.push(x[(i, j)]);
        }
    }
    out
}

/// Selects a subset of rows, in the given order.
pub fn select_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)])
}

pub fn select_entries(v: &DVector<f64>, rows: &[usize]) -> DVector<f64> {
    DVector::from_fn(rows.len(), |i, _| v[rows[i]])
}

/// Stacks two matrices with the same number of columns.
pub fn vstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    debug_assert_eq!(a.ncols(), b.ncols());
    let na = a.nrows();
    DMatrix::from_fn(na + b.nrows(), a.ncols(), |i, j| {
        if i < na {
            a[(i, j)]
        } else {
            b[(i - na, j)]
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GramSource {
    Labeled,
    Unlabeled,
    Pooled,
}

/// Second-moment matrix `mean(x⃗ x⃗')` of augmented covariate rows.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    pub matrix: DMatrix<f64>,
    pub source: GramSource,
    pub count: usize,
}

/// Averages `x⃗ x⃗'` over the rows of `x` (raw covariates; the intercept is added here).
pub fn assemble_gram(x: &DMatrix<f64>, source: GramSource) -> Result<GramMatrix> {
    let (n, p) = x.shape();
    if n == 0 {
        return Err(EaseError::InvalidData(
            "gram assembly needs at least one row".into(),
        ));
    }
    let d = p + 1;
    let at = |i: usize, j: usize| if j == 0 { 1.0 } else { x[(i, j - 1)] };
    let mut m = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let mut acc = NeumaierSum::new();
            for i in 0..n {
                acc.add(at(i, a) * at(i, b));
            }
            let v = acc.value() / n as f64;
            m[(a, b)] = v;
            m[(b, a)] = v;
        }
    }
    Ok(GramMatrix {
        matrix: m,
        source,
        count: n,
    })
}

/// Count-weighted average of two Gram matrices.
pub fn pooled_gram(a: &GramMatrix, b: &GramMatrix) -> GramMatrix {
    let total = (a.count + b.count) as f64;
    let wa = a.count as f64 / total;
    let wb = b.count as f64 / total;
    GramMatrix {
        matrix: &a.matrix * wa + &b.matrix * wb,
        source: GramSource::Pooled,
        count: a.count + b.count,
    }
}

/// Fails with [`EaseError::NotSymmetric`] when `max |a_ij - a_ji|` exceeds
/// `tol * max(1, max |a_ij|)`.
pub fn check_symmetric(a: &DMatrix<f64>, tol: f64) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(EaseError::DimensionMismatch {
            expected: a.nrows(),
            got: a.ncols(),
        });
    }
    let scale = a.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0_f64;
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    if worst > tol * scale || worst.is_nan() {
        return Err(EaseError::NotSymmetric(worst));
    }
    Ok(())
}

/// `(A + A') / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Flips each column so that its first entry that is not negligible is positive.
pub fn fix_column_signs(v: &mut DMatrix<f64>) {
    for mut col in v.column_iter_mut() {
        let scale = col.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        if scale == 0.0 {
            continue;
        }
        if let Some(first) = col.iter().copied().find(|x| x.abs() > 1e-10 * scale) {
            if first < 0.0 {
                col.neg_mut();
            }
        }
    }
}

/// Symmetric eigendecomposition with eigenvalues in descending order.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: DVector<f64>,
    /// Orthonormal eigenvectors as columns, matching `values`.
    pub vectors: DMatrix<f64>,
}

pub fn sym_eigen(a: &DMatrix<f64>) -> Result<SymEigen> {
    check_symmetric(a, 1e-10)?;
    let n = a.nrows();
    let eig = symmetrize(a).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let values = DVector::from_fn(n, |i, _| eig.eigenvalues[order[i]]);
    let mut vectors = DMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    fix_column_signs(&mut vectors);
    Ok(SymEigen { values, vectors })
}

/// Solves `A x = b` for a symmetric positive definite `A` (small systems).
///
/// Fails with [`EaseError::IllConditioned`] when the spectral condition
/// number exceeds `1e12` or `A` is not positive definite.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    check_symmetric(a, 1e-10)?;
    if b.len() != a.nrows() {
        return Err(EaseError::DimensionMismatch {
            expected: a.nrows(),
            got: b.len(),
        });
    }
    let sym = symmetrize(a);
    let ev = sym.clone().symmetric_eigenvalues();
    let max = ev.max();
    let min = ev.min();
    if min <= 0.0 || !min.is_finite() {
        return Err(EaseError::IllConditioned(f64::INFINITY));
    }
    let cond = max / min;
    if cond > 1e12 {
        return Err(EaseError::IllConditioned(cond));
    }
    let chol = sym
        .clone()
        .cholesky()
        .ok_or_else(|| EaseError::SingularSystem("cholesky factorization failed".into()))?;
    let mut x = chol.solve(b);
    // one step of iterative refinement
    let resid = b - &sym * &x;
    x += chol.solve(&resid);
    let resid = b - &sym * &x;
    let bnorm = b.norm();
    if bnorm > 0.0 && resid.norm() > 1e-10 * bnorm {
        return Err(EaseError::Numerical(format!(
            "spd solve residual {:.3e} exceeds tolerance",
            resid.norm() / bnorm
        )));
    }
    Ok(x)
}

/// Least-squares solver for a fixed design, via Householder QR followed by an
/// SVD of the triangular factor. The design is rejected when its numerical
/// rank (relative tolerance [`RANK_TOL`]) is below its column count.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    qr: nalgebra::QR<f64, nalgebra::Dyn, nalgebra::Dyn>,
    svd: nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>,
    ncols: usize,
    nrows: usize,
}

impl LeastSquares {
    pub fn new(design: &DMatrix<f64>) -> Result<Self> {
        let (m, k) = design.shape();
        if m < k {
            return Err(EaseError::RankDeficientDesign(
                (0..k).map(design_column_name).collect(),
            ));
        }
        if design.iter().any(|v| !v.is_finite()) {
            return Err(EaseError::InvalidData(
                "design contains non-finite values".into(),
            ));
        }
        let qr = design.clone().qr();
        let r = qr.r();
        let svd = r.svd(true, true);
        let smax = svd.singular_values.max();
        let tol = RANK_TOL * smax;
        let mut collinear: Vec<usize> = Vec::new();
        let v_t = svd.v_t.as_ref().expect("v_t requested");
        for (idx, s) in svd.singular_values.iter().enumerate() {
            if *s <= tol || smax == 0.0 {
                let row = v_t.row(idx);
                let rmax = row.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()));
                for j in 0..k {
                    if row[j].abs() > 1e-6 * rmax && !collinear.contains(&j) {
                        collinear.push(j);
                    }
                }
            }
        }
        if !collinear.is_empty() {
            collinear.sort_unstable();
            return Err(EaseError::RankDeficientDesign(
                collinear.into_iter().map(design_column_name).collect(),
            ));
        }
        Ok(Self {
            qr,
            svd,
            ncols: k,
            nrows: m,
        })
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        if rhs.len() != self.nrows {
            return Err(EaseError::DimensionMismatch {
                expected: self.nrows,
                got: rhs.len(),
            });
        }
        let mut qtb = rhs.clone();
        self.qr.q_tr_mul(&mut qtb);
        let head = qtb.rows(0, self.ncols).into_owned();
        self.svd
            .solve(&head, 0.0)
            .map_err(|e| EaseError::Numerical(e.to_string()))
    }
}

/// One-shot least squares `argmin ||design * theta - rhs||`.
pub fn least_squares(design: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    LeastSquares::new(design)?.solve(rhs)
}

/// Residual of the normal equations `design' (rhs - design * theta)`,
/// relative to `||design|| (||rhs|| + ||design|| ||theta||)`.
pub fn normal_equation_residual(
    design: &DMatrix<f64>,
    rhs: &DVector<f64>,
    theta: &DVector<f64>,
) -> f64 {
    let resid = rhs - design * theta;
    let score = design.tr_mul(&resid);
    let dn = design.norm();
    let scale = dn * (rhs.norm() + dn * theta.norm());
    if scale == 0.0 {
        score.norm()
    } else {
        score.norm() / scale
    }
}
