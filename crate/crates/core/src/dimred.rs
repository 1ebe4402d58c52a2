//! Projection bases for smoothing: SIR, semi-supervised SIR, principal
//! components, identity or a user matrix.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EaseError, Result};
use crate::kernels::nearest_row;
use crate::linalg::{fix_column_signs, row_major, sym_eigen, vstack, NeumaierSum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionOrigin {
    Identity,
    Pca,
    Sir,
    SsSir,
    User,
}

/// A `p x r` projection together with how it was obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionBasis {
    pub matrix: DMatrix<f64>,
    pub origin: ProjectionOrigin,
    pub slices_h: Option<usize>,
    pub per_fold: Option<usize>,
    /// Leading eigenvalues of the matrix the directions were extracted from.
    pub eigenvalues: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Serialize)]
struct BasisRecord<'a> {
    origin: ProjectionOrigin,
    p: usize,
    r: usize,
    matrix: Vec<Vec<f64>>,
    slices_h: Option<usize>,
    per_fold: Option<usize>,
    eigenvalues: &'a [f64],
    warnings: &'a [String],
}

impl ProjectionBasis {
    pub fn identity(p: usize) -> Self {
        Self {
            matrix: DMatrix::identity(p, p),
            origin: ProjectionOrigin::Identity,
            slices_h: None,
            per_fold: None,
            eigenvalues: Vec::new(),
            warnings: Vec::new(),
        }
    }

    /// Wraps a caller-supplied matrix after checking its column rank.
    pub fn user(matrix: DMatrix<f64>) -> Result<Self> {
        let basis = Self {
            matrix,
            origin: ProjectionOrigin::User,
            slices_h: None,
            per_fold: None,
            eigenvalues: Vec::new(),
            warnings: Vec::new(),
        };
        basis.check_rank()?;
        Ok(basis)
    }

    pub fn p(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn r(&self) -> usize {
        self.matrix.ncols()
    }

    /// Fails unless the matrix has full column rank.
    pub fn check_rank(&self) -> Result<()> {
        let r = self.r();
        if r == 0 || r > self.p() || self.matrix.iter().any(|v| !v.is_finite()) {
            return Err(EaseError::RankDeficientProjection {
                rank: 0,
                expected: r,
            });
        }
        let sv = self.matrix.clone().singular_values();
        let smax = sv.max();
        let rank = sv.iter().filter(|&&s| s > 1e-10 * smax && s > 0.0).count();
        if rank < r {
            return Err(EaseError::RankDeficientProjection { rank, expected: r });
        }
        Ok(())
    }

    pub fn with_fold(mut self, k: usize) -> Self {
        self.per_fold = Some(k);
        self
    }

    pub fn to_json(&self) -> serde_json::Value {
        let matrix = (0..self.p())
            .map(|i| self.matrix.row(i).iter().copied().collect())
            .collect();
        serde_json::to_value(BasisRecord {
            origin: self.origin,
            p: self.p(),
            r: self.r(),
            matrix,
            slices_h: self.slices_h,
            per_fold: self.per_fold,
            eigenvalues: &self.eigenvalues,
            warnings: &self.warnings,
        })
        .expect("basis serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SliceMode {
    EqualWidth,
    EqualCount,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceScheme {
    pub mode: SliceMode,
    pub h_slices: usize,
}

impl SliceScheme {
    pub fn equal_width(h_slices: usize) -> Self {
        Self {
            mode: SliceMode::EqualWidth,
            h_slices,
        }
    }

    pub fn equal_count(h_slices: usize) -> Self {
        Self {
            mode: SliceMode::EqualCount,
            h_slices,
        }
    }

    /// Slice index in `0..H` for each outcome.
    pub fn assign(&self, y: &[f64]) -> Vec<usize> {
        let h = self.h_slices.max(1);
        match self.mode {
            SliceMode::EqualWidth => {
                let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let width = (hi - lo) / h as f64;
                y.iter()
                    .map(|&v| {
                        if width > 0.0 {
                            (((v - lo) / width).floor() as usize).min(h - 1)
                        } else {
                            0
                        }
                    })
                    .collect()
            }
            SliceMode::EqualCount => {
                let n = y.len();
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| y[a].total_cmp(&y[b]).then(a.cmp(&b)));
                let mut out = vec![0; n];
                for (rank, &i) in order.iter().enumerate() {
                    out[i] = (rank * h / n).min(h - 1);
                }
                out
            }
        }
    }
}

/// `V diag(max(lambda, floor)^(-1/2)) V'` for a symmetric matrix.
pub fn matrix_inv_sqrt(sigma: &DMatrix<f64>, eigen_floor: f64) -> Result<DMatrix<f64>> {
    let eig = sym_eigen(sigma)?;
    let d = DVector::from_iterator(
        eig.values.len(),
        eig.values.iter().map(|&l| 1.0 / l.max(eigen_floor).sqrt()),
    );
    Ok(&eig.vectors * DMatrix::from_diagonal(&d) * eig.vectors.transpose())
}

/// Inverse square root with the floor set relative to the largest eigenvalue.
fn relative_inv_sqrt(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = sym_eigen(sigma)?;
    let floor = (1e-10 * eig.values[0]).max(f64::MIN_POSITIVE);
    matrix_inv_sqrt(sigma, floor)
}

/// Column means and `n - 1` sample covariance of the stacked row blocks.
pub fn mean_and_covariance(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, p) = x.shape();
    let mean = DVector::from_fn(p, |j, _| {
        let mut acc = NeumaierSum::new();
        for i in 0..n {
            acc.add(x[(i, j)]);
        }
        acc.value() / n as f64
    });
    let mut cov = DMatrix::zeros(p, p);
    let denom = (n.max(2) - 1) as f64;
    for a in 0..p {
        for b in a..p {
            let mut acc = NeumaierSum::new();
            for i in 0..n {
                acc.add((x[(i, a)] - mean[a]) * (x[(i, b)] - mean[b]));
            }
            let v = acc.value() / denom;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    (mean, cov)
}

fn standardize_rows(
    x: &DMatrix<f64>,
    mean: &DVector<f64>,
    inv_sqrt: &DMatrix<f64>,
) -> DMatrix<f64> {
    let centered = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - mean[j]);
    centered * inv_sqrt
}

/// Weighted slice-mean matrix shared by SIR and its semi-supervised variant.
/// Slice proportions come from the labeled rows; slice means average labeled
/// members together with any extra (imputed) members.
fn sliced_directions(
    z_lab: &DMatrix<f64>,
    lab_slices: &[usize],
    z_extra: &DMatrix<f64>,
    extra_slices: &[usize],
    inv_sqrt: &DMatrix<f64>,
    r: usize,
    scheme: &SliceScheme,
    origin: ProjectionOrigin,
) -> Result<ProjectionBasis> {
    let n = z_lab.nrows();
    let p = z_lab.ncols();
    let h = scheme.h_slices;
    let mut lab_counts = vec![0usize; h.max(1)];
    for &s in lab_slices {
        lab_counts[s] += 1;
    }
    let nonempty = lab_counts.iter().filter(|&&c| c > 0).count();
    if h < 2 || nonempty < r + 1 {
        return Err(EaseError::DegenerateSlicing {
            nonempty,
            needed: r + 1,
        });
    }
    let mut sums = vec![vec![NeumaierSum::new(); p]; h];
    let mut totals = vec![0usize; h];
    for (i, &s) in lab_slices.iter().enumerate() {
        totals[s] += 1;
        for j in 0..p {
            sums[s][j].add(z_lab[(i, j)]);
        }
    }
    for (i, &s) in extra_slices.iter().enumerate() {
        totals[s] += 1;
        for j in 0..p {
            sums[s][j].add(z_extra[(i, j)]);
        }
    }
    let mut m = DMatrix::<f64>::zeros(p, p);
    for s in 0..h {
        if lab_counts[s] == 0 {
            continue;
        }
        let weight = lab_counts[s] as f64 / n as f64;
        let mean = DVector::from_fn(p, |j, _| sums[s][j].value() / totals[s] as f64);
        m += (&mean * mean.transpose()) * weight;
    }
    let eig = sym_eigen(&m)?;
    let mut warnings = Vec::new();
    let lead = eig.values[0];
    let rank = eig
        .values
        .iter()
        .filter(|&&l| l > 1e-10 * lead && l > 0.0)
        .count();
    if rank < r {
        warnings.push(format!(
            "slice-mean matrix has rank {rank} < {r}; trailing directions are noise"
        ));
    }
    let top = eig.vectors.columns(0, r).into_owned();
    let mut matrix = inv_sqrt * top;
    fix_column_signs(&mut matrix);
    Ok(ProjectionBasis {
        matrix,
        origin,
        slices_h: Some(h),
        per_fold: None,
        eigenvalues: eig.values.iter().take(r).copied().collect(),
        warnings,
    })
}

fn check_sizes(n: usize, r: usize, p: usize) -> Result<()> {
    if r == 0 || r > p {
        return Err(EaseError::Config(format!(
            "target dimension r={r} must lie in 1..={p}"
        )));
    }
    if n < r + 2 {
        return Err(EaseError::InvalidData(format!(
            "{n} rows are too few to estimate {r} directions"
        )));
    }
    Ok(())
}

/// Sliced inverse regression on labeled rows.
pub fn sir_directions(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    r: usize,
    scheme: &SliceScheme,
) -> Result<ProjectionBasis> {
    check_sizes(x.nrows(), r, x.ncols())?;
    let (mean, cov) = mean_and_covariance(x);
    let inv_sqrt = relative_inv_sqrt(&cov)?;
    let z = standardize_rows(x, &mean, &inv_sqrt);
    let slices = scheme.assign(y.as_slice());
    let empty = DMatrix::zeros(0, x.ncols());
    sliced_directions(
        &z,
        &slices,
        &empty,
        &[],
        &inv_sqrt,
        r,
        scheme,
        ProjectionOrigin::Sir,
    )
}

/// Semi-supervised SIR: standardization uses labeled and unlabeled rows
/// together, and each unlabeled row joins the slice of its nearest labeled
/// neighbour (ties to the lower index). With no unlabeled rows this is
/// exactly [`sir_directions`].
pub fn ss_sir_directions(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    unlabeled: &DMatrix<f64>,
    r: usize,
    scheme: &SliceScheme,
) -> Result<ProjectionBasis> {
    if unlabeled.nrows() == 0 {
        let mut basis = sir_directions(x, y, r, scheme)?;
        basis.origin = ProjectionOrigin::SsSir;
        return Ok(basis);
    }
    check_sizes(x.nrows(), r, x.ncols())?;
    if unlabeled.ncols() != x.ncols() {
        return Err(EaseError::DimensionMismatch {
            expected: x.ncols(),
            got: unlabeled.ncols(),
        });
    }
    let pooled = vstack(x, unlabeled);
    let (mean, cov) = mean_and_covariance(&pooled);
    let inv_sqrt = relative_inv_sqrt(&cov)?;
    let z_lab = standardize_rows(x, &mean, &inv_sqrt);
    let z_unl = standardize_rows(unlabeled, &mean, &inv_sqrt);
    let lab_slices = scheme.assign(y.as_slice());
    let neighbours = nearest_labeled(&z_lab, &z_unl);
    let extra_slices: Vec<usize> = neighbours.iter().map(|&i| lab_slices[i]).collect();
    sliced_directions(
        &z_lab,
        &lab_slices,
        &z_unl,
        &extra_slices,
        &inv_sqrt,
        r,
        scheme,
        ProjectionOrigin::SsSir,
    )
}

/// Index of the nearest labeled row for every query row (exact search).
pub fn nearest_labeled(labeled: &DMatrix<f64>, queries: &DMatrix<f64>) -> Vec<usize> {
    let p = labeled.ncols();
    let train = row_major(labeled);
    let q = row_major(queries);
    q.par_chunks(p)
        .map(|row| nearest_row(&train, p, row).expect("labeled rows present"))
        .collect()
}

/// Leading principal directions of the pooled covariates.
pub fn pca_directions(pooled: &DMatrix<f64>, r: usize) -> Result<ProjectionBasis> {
    let p = pooled.ncols();
    if r == 0 || r > p {
        return Err(EaseError::Config(format!(
            "target dimension r={r} must lie in 1..={p}"
        )));
    }
    if pooled.nrows() < r + 1 {
        return Err(EaseError::InvalidData(format!(
            "{} rows are too few for {r} principal directions",
            pooled.nrows()
        )));
    }
    let (_, cov) = mean_and_covariance(pooled);
    let eig = sym_eigen(&cov)?;
    let lead = eig.values[0];
    let rank = eig
        .values
        .iter()
        .filter(|&&l| l > 1e-10 * lead && l > 0.0)
        .count();
    if rank < r {
        return Err(EaseError::RankDeficientProjection { rank, expected: r });
    }
    Ok(ProjectionBasis {
        matrix: eig.vectors.columns(0, r).into_owned(),
        origin: ProjectionOrigin::Pca,
        slices_h: None,
        per_fold: None,
        eigenvalues: eig.values.iter().take(r).copied().collect(),
        warnings: Vec::new(),
    })
}
