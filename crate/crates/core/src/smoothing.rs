//! Per-fold conditional-mean estimators: local-constant kernel smoothing over
//! projected covariates and Gaussian kernel ridge regression.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{derive_seed, FoldAssignment, SemiSupervisedDataset};
use crate::dimred::{
    matrix_inv_sqrt, mean_and_covariance, pca_directions, sir_directions, ss_sir_directions,
    ProjectionBasis, SliceScheme,
};
use crate::error::{EaseError, Result};
use crate::kernels::{
    default_grid, local_constant, select_bandwidth, BandwidthChoice, KernelSpec, TRIM_FLOOR,
};
use crate::linalg::{
    augment, least_squares, row_major, select_entries, select_rows, sym_eigen, vstack,
};

/// Affine map from covariates to whitened projected scores.
#[derive(Debug, Clone)]
pub struct ScoreMap {
    pub basis: ProjectionBasis,
    center: DVector<f64>,
    whiten: DMatrix<f64>,
}

impl ScoreMap {
    /// Centers the training scores and whitens them with the symmetric inverse
    /// square root of their covariance, which keeps radial kernels invariant
    /// to rotations of the basis.
    pub fn fit(x: &DMatrix<f64>, basis: ProjectionBasis) -> Result<Self> {
        basis.check_rank()?;
        if x.ncols() != basis.p() {
            return Err(EaseError::DimensionMismatch {
                expected: basis.p(),
                got: x.ncols(),
            });
        }
        let r = basis.r();
        let scores = x * &basis.matrix;
        let (center, whiten) = if scores.nrows() < 2 {
            let c = DVector::from_fn(r, |j, _| scores.column(j).mean());
            (c, DMatrix::identity(r, r))
        } else {
            let (mean, cov) = mean_and_covariance(&scores);
            let lead = sym_eigen(&cov)?.values[0];
            let w = if lead > 0.0 {
                matrix_inv_sqrt(&cov, 1e-10 * lead)?
            } else {
                DMatrix::identity(r, r)
            };
            (mean, w)
        };
        Ok(Self {
            basis,
            center,
            whiten,
        })
    }

    pub fn r(&self) -> usize {
        self.basis.r()
    }

    pub fn apply_row(&self, x: &[f64]) -> Vec<f64> {
        let p = self.basis.p();
        let r = self.r();
        let mut raw = vec![0.0; r];
        for (c, slot) in raw.iter_mut().enumerate() {
            let mut s = 0.0;
            for j in 0..p {
                s += x[j] * self.basis.matrix[(j, c)];
            }
            *slot = s - self.center[c];
        }
        (0..r)
            .map(|a| (0..r).map(|b| self.whiten[(a, b)] * raw[b]).sum())
            .collect()
    }

    /// Row-major `n x r` scores.
    pub fn apply(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let rows = row_major(x);
        rows.chunks_exact(x.ncols().max(1))
            .flat_map(|row| self.apply_row(row))
            .collect()
    }
}

/// Local-constant (Nadaraya-Watson) smoother over whitened projected scores.
#[derive(Debug, Clone)]
pub struct LocalConstantFit {
    pub spec: KernelSpec,
    pub h: f64,
    pub trim_floor: f64,
    pub bandwidth: Option<BandwidthChoice>,
    map: ScoreMap,
    scores: Vec<f64>,
    y: Vec<f64>,
}

impl LocalConstantFit {
    pub fn projection(&self) -> &ProjectionBasis {
        &self.map.basis
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let z = self.map.apply_row(x);
        local_constant(&self.spec, &self.scores, &self.y, self.h, &z)
            .expect("fit has training rows")
    }
}

pub fn fit_local_constant(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    basis: ProjectionBasis,
    spec: KernelSpec,
    h: f64,
) -> Result<LocalConstantFit> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(EaseError::Config(format!(
            "bandwidth must be positive, got {h}"
        )));
    }
    if y.is_empty() {
        return Err(EaseError::EmptyLabeled);
    }
    let map = ScoreMap::fit(x, basis)?;
    let spec = spec.with_dim(map.r());
    let scores = map.apply(x);
    Ok(LocalConstantFit {
        spec,
        h,
        trim_floor: TRIM_FLOOR,
        bandwidth: None,
        map,
        scores,
        y: y.iter().copied().collect(),
    })
}

/// Kernel ridge regression `a + sum_i c_i exp(-gamma |x - X_i|^2)` with
/// `a = mean(Y)` and `c = (K + lambda I)^-1 (Y - a)`.
#[derive(Debug, Clone)]
pub struct KernelRidgeFit {
    pub lambda: f64,
    pub gamma: f64,
    pub intercept: f64,
    coef: Vec<f64>,
    train: Vec<f64>,
    p: usize,
}

impl KernelRidgeFit {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut acc = self.intercept;
        for (row, c) in self.train.chunks_exact(self.p).zip(&self.coef) {
            let d2: f64 = row.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            acc += c * (-self.gamma * d2).exp();
        }
        acc
    }
}

fn rbf_gram(x: &DMatrix<f64>, gamma: f64) -> DMatrix<f64> {
    let n = x.nrows();
    let rows = row_major(x);
    let p = x.ncols();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = 1.0;
        for j in (i + 1)..n {
            let d2: f64 = (0..p)
                .map(|c| {
                    let d = rows[i * p + c] - rows[j * p + c];
                    d * d
                })
                .sum();
            let v = (-gamma * d2).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

pub fn fit_kernel_ridge(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda: f64,
    gamma: f64,
) -> Result<KernelRidgeFit> {
    let n = y.len();
    if n == 0 {
        return Err(EaseError::EmptyLabeled);
    }
    if !(lambda >= 0.0) || !(gamma > 0.0) {
        return Err(EaseError::Config(
            "ridge penalty must be >= 0 and scale > 0".into(),
        ));
    }
    let ybar = y.mean();
    let centered = y.map(|v| v - ybar);
    let mut k = rbf_gram(x, gamma);
    if lambda == 0.0 {
        let ev = k.clone().symmetric_eigenvalues();
        if ev.min() <= 1e-12 * ev.max() {
            return Err(EaseError::SingularSystem(
                "kernel Gram matrix is singular at zero penalty".into(),
            ));
        }
    }
    for i in 0..n {
        k[(i, i)] += lambda;
    }
    let chol = k
        .cholesky()
        .ok_or_else(|| EaseError::SingularSystem("regularized kernel system".into()))?;
    let coef = chol.solve(&centered);
    Ok(KernelRidgeFit {
        lambda,
        gamma,
        intercept: ybar,
        coef: coef.iter().copied().collect(),
        train: row_major(x),
        p: x.ncols(),
    })
}

/// Penalty and scale chosen by closed-form leave-one-out error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RidgeTuning {
    pub lambda: f64,
    pub gamma: f64,
    pub loo_error: f64,
}

/// Median of the pairwise squared distances between rows.
pub fn median_sq_distance(x: &DMatrix<f64>) -> f64 {
    let n = x.nrows();
    let p = x.ncols();
    let rows = row_major(x);
    let mut d = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            d.push(
                (0..p)
                    .map(|c| (rows[i * p + c] - rows[j * p + c]).powi(2))
                    .sum::<f64>(),
            );
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d[d.len() / 2];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

pub const RIDGE_SCALES: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];
pub const RIDGE_PENALTIES: usize = 8;

/// Searches `lambda` over 8 geometric points in `[1e-4, 1e2] * n` and
/// `gamma` over `{0.25, 0.5, 1, 2, 4} / median squared distance`, scoring
/// each pair by the leave-one-out residuals of the linear smoother
/// `H = J/n + S (I - J/n)` with `S = K (K + lambda I)^-1`.
pub fn tune_kernel_ridge(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<RidgeTuning> {
    let n = y.len();
    if n < 3 {
        return Err(EaseError::InvalidData(
            "kernel ridge tuning needs at least 3 rows".into(),
        ));
    }
    let nf = n as f64;
    let med = median_sq_distance(x);
    let ybar = y.mean();
    let yc = y.map(|v| v - ybar);
    let ones = DVector::from_element(n, 1.0);
    let lambdas: Vec<f64> = (0..RIDGE_PENALTIES)
        .map(|i| nf * 1e-4 * 1e6f64.powf(i as f64 / (RIDGE_PENALTIES - 1) as f64))
        .collect();
    let mut best: Option<RidgeTuning> = None;
    for scale in RIDGE_SCALES {
        let gamma = scale / med;
        let eig = sym_eigen(&rbf_gram(x, gamma))?;
        let v = &eig.vectors;
        let d: Vec<f64> = eig.values.iter().map(|&l| l.max(0.0)).collect();
        let vty = v.tr_mul(&yc);
        let vt1 = v.tr_mul(&ones);
        let vsq = v.map(|e| e * e);
        for &lambda in &lambdas {
            let shrink: Vec<f64> = d.iter().map(|&l| l / (l + lambda)).collect();
            let s_vec = DVector::from_vec(shrink);
            let fitted = v * vty.component_mul(&s_vec);
            let s1 = v * vt1.component_mul(&s_vec);
            let sdiag = &vsq * &s_vec;
            let mut sse = 0.0;
            for i in 0..n {
                let hii = 1.0 / nf + sdiag[i] - s1[i] / nf;
                let resid = yc[i] - fitted[i];
                let denom = 1.0 - hii;
                let e = if denom.abs() > 1e-12 {
                    resid / denom
                } else {
                    f64::INFINITY
                };
                sse += e * e;
            }
            let loo_error = sse / nf;
            if loo_error.is_finite() && best.map_or(true, |b| loo_error < b.loo_error) {
                best = Some(RidgeTuning {
                    lambda,
                    gamma,
                    loo_error,
                });
            }
        }
    }
    best.ok_or_else(|| EaseError::Numerical("kernel ridge tuning produced no finite error".into()))
}

/// Exact per-fold function supplied by the caller; receives the zero-based
/// fold index and a covariate row.
pub type FoldFunction = Arc<dyn Fn(usize, &[f64]) -> f64 + Send + Sync>;

type InjectedFactory =
    Arc<dyn Fn(&SemiSupervisedDataset, &FoldAssignment) -> Result<FoldFunction> + Send + Sync>;

/// Test seam that replaces the fitted smoothers by known functions.
#[derive(Clone)]
pub struct InjectedSmoother {
    label: String,
    factory: InjectedFactory,
}

impl fmt::Debug for InjectedSmoother {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "InjectedSmoother({})", self.label)
    }
}

impl InjectedSmoother {
    /// The same function for every dataset.
    pub fn fixed<F>(label: &str, f: F) -> Self
    where
        F: Fn(usize, &[f64]) -> f64 + Send + Sync + 'static,
    {
        let func: FoldFunction = Arc::new(f);
        Self {
            label: label.to_string(),
            factory: Arc::new(move |_, _| Ok(func.clone())),
        }
    }

    /// A function built from the data at fit time.
    pub fn from_data<F>(label: &str, f: F) -> Self
    where
        F: Fn(&SemiSupervisedDataset, &FoldAssignment) -> Result<FoldFunction>
            + Send
            + Sync
            + 'static,
    {
        Self {
            label: label.to_string(),
            factory: Arc::new(f),
        }
    }

    /// `m_k(x) = (1, x') theta_ols` with the full labeled-data OLS fit in every fold.
    pub fn ols_predictions() -> Self {
        Self::from_data("ols-predictions", |data, _| {
            let theta = least_squares(&augment(data.labeled_x()), data.labeled_y())?;
            Ok(Arc::new(move |_, x: &[f64]| {
                theta[0]
                    + x.iter()
                        .zip(theta.iter().skip(1))
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            }))
        })
    }

    /// `m_k = 0` in every fold.
    pub fn zero() -> Self {
        Self::fixed("zero", |_, _| 0.0)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn build(
        &self,
        data: &SemiSupervisedDataset,
        folds: &FoldAssignment,
    ) -> Result<FoldFunction> {
        (self.factory)(data, folds)
    }
}

/// A fitted conditional-mean estimator for one fold.
#[derive(Clone)]
pub enum SmootherFit {
    LocalConstant(LocalConstantFit),
    KernelRidge(KernelRidgeFit),
    Injected { fold: usize, f: FoldFunction },
}

impl fmt::Debug for SmootherFit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::LocalConstant(fit) => f
                .debug_struct("LocalConstant")
                .field("h", &fit.h)
                .field("origin", &fit.projection().origin)
                .finish(),
            Self::KernelRidge(fit) => f
                .debug_struct("KernelRidge")
                .field("lambda", &fit.lambda)
                .field("gamma", &fit.gamma)
                .finish(),
            Self::Injected { fold, .. } => write!(f, "Injected(fold {fold})"),
        }
    }
}

impl SmootherFit {
    pub fn predict(&self, x: &[f64]) -> f64 {
        match self {
            Self::LocalConstant(fit) => fit.predict(x),
            Self::KernelRidge(fit) => fit.predict(x),
            Self::Injected { fold, f } => f(*fold, x),
        }
    }

    /// Predictions at every row of `x`, in row order.
    pub fn predict_rows(&self, x: &DMatrix<f64>) -> DVector<f64> {
        let p = x.ncols().max(1);
        let rows = row_major(x);
        let out: Vec<f64> = rows.par_chunks(p).map(|row| self.predict(row)).collect();
        DVector::from_vec(out)
    }

    pub fn projection(&self) -> Option<&ProjectionBasis> {
        match self {
            Self::LocalConstant(fit) => Some(fit.projection()),
            _ => None,
        }
    }

    pub fn describe(&self) -> serde_json::Value {
        match self {
            Self::LocalConstant(fit) => serde_json::json!({
                "method": "local-constant-ks",
                "bandwidth": fit.h,
                "kernel_order": fit.spec.order,
                "r": fit.spec.dim,
                "projection": fit.projection().to_json(),
            }),
            Self::KernelRidge(fit) => serde_json::json!({
                "method": "kernel-ridge",
                "lambda": fit.lambda,
                "gamma": fit.gamma,
            }),
            Self::Injected { fold, .. } => {
                serde_json::json!({ "method": "injected", "fold": fold })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BandwidthPolicy {
    Fixed(f64),
    /// Least-squares CV with `cv_folds` inner folds over `grid`
    /// (the default grid when `None`).
    Cv {
        grid: Option<Vec<f64>>,
        cv_folds: usize,
    },
}

impl Default for BandwidthPolicy {
    fn default() -> Self {
        Self::Cv {
            grid: None,
            cv_folds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RidgePolicy {
    Fixed {
        lambda: f64,
        gamma: f64,
    },
    /// Leave-one-out tuning, once on the first fold's training rows and
    /// shared across folds unless `per_fold` is set.
    Cv {
        per_fold: bool,
    },
}

#[derive(Debug, Clone)]
pub enum SmootherPolicy {
    LocalConstant {
        kernel: KernelSpec,
        bandwidth: BandwidthPolicy,
    },
    KernelRidge(RidgePolicy),
    Injected(InjectedSmoother),
}

impl SmootherPolicy {
    /// Gaussian local-constant smoothing with CV bandwidth.
    pub fn ks() -> Self {
        Self::LocalConstant {
            kernel: KernelSpec::gaussian(2, 1).expect("valid kernel"),
            bandwidth: BandwidthPolicy::default(),
        }
    }

    /// Kernel ridge with shared leave-one-out tuning.
    pub fn km() -> Self {
        Self::KernelRidge(RidgePolicy::Cv { per_fold: false })
    }

    pub fn describe(&self) -> serde_json::Value {
        match self {
            Self::LocalConstant { kernel, bandwidth } => serde_json::json!({
                "smoother": "ks",
                "kernel_family": kernel.family,
                "kernel_order": kernel.order,
                "bandwidth": match bandwidth {
                    BandwidthPolicy::Fixed(h) => serde_json::json!(h),
                    BandwidthPolicy::Cv { grid, cv_folds } => serde_json::json!({
                        "cv_folds": cv_folds,
                        "grid": grid.clone().map_or(serde_json::json!("default"), |g| serde_json::json!(g)),
                    }),
                },
            }),
            Self::KernelRidge(RidgePolicy::Fixed { lambda, gamma }) => {
                serde_json::json!({ "smoother": "km", "lambda": lambda, "gamma": gamma })
            }
            Self::KernelRidge(RidgePolicy::Cv { per_fold }) => {
                serde_json::json!({ "smoother": "km", "tuning": "loo", "per_fold": per_fold })
            }
            Self::Injected(inj) => {
                serde_json::json!({ "smoother": "injected", "label": inj.label() })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DimRedPolicy {
    Identity,
    Pca { r: usize },
    Sir { r: usize, scheme: SliceScheme },
    SsSir { r: usize, scheme: SliceScheme },
    User(DMatrix<f64>),
}

impl DimRedPolicy {
    pub fn describe(&self) -> serde_json::Value {
        match self {
            Self::Identity => serde_json::json!({ "dimred": "identity" }),
            Self::Pca { r } => serde_json::json!({ "dimred": "pca", "r": r }),
            Self::Sir { r, scheme } => {
                serde_json::json!({ "dimred": "sir", "r": r, "slices": scheme.h_slices, "slice_mode": scheme.mode })
            }
            Self::SsSir { r, scheme } => {
                serde_json::json!({ "dimred": "ss-sir", "r": r, "slices": scheme.h_slices, "slice_mode": scheme.mode })
            }
            Self::User(m) => serde_json::json!({ "dimred": "user", "r": m.ncols() }),
        }
    }
}

/// Projection for one fold; `train` indexes the labeled rows used.
fn fold_projection(
    data: &SemiSupervisedDataset,
    train: &[usize],
    policy: &DimRedPolicy,
    pca: Option<&ProjectionBasis>,
    k: usize,
) -> Result<ProjectionBasis> {
    let basis = match policy {
        DimRedPolicy::Identity => ProjectionBasis::identity(data.p()),
        DimRedPolicy::User(m) => ProjectionBasis::user(m.clone())?,
        DimRedPolicy::Pca { .. } => pca.expect("pca basis precomputed").clone(),
        DimRedPolicy::Sir { r, scheme } => {
            let x = select_rows(data.labeled_x(), train);
            let y = select_entries(data.labeled_y(), train);
            sir_directions(&x, &y, *r, scheme)?
        }
        DimRedPolicy::SsSir { r, scheme } => {
            let x = select_rows(data.labeled_x(), train);
            let y = select_entries(data.labeled_y(), train);
            ss_sir_directions(&x, &y, data.unlabeled_x(), *r, scheme)?
        }
    };
    Ok(basis.with_fold(k + 1))
}

/// Fits one smoother per fold, fold `k` trained on every labeled row outside
/// fold `k` (all rows when there is a single fold).
pub fn fit_fold_smoothers(
    data: &SemiSupervisedDataset,
    folds: &FoldAssignment,
    smoother: &SmootherPolicy,
    dimred: &DimRedPolicy,
    seed: u64,
) -> Result<Vec<SmootherFit>> {
    if folds.n() != data.n() {
        return Err(EaseError::DimensionMismatch {
            expected: data.n(),
            got: folds.n(),
        });
    }
    let k_folds = folds.k();
    for k in 0..k_folds {
        if folds.complement(k).is_empty() {
            return Err(EaseError::InfeasiblePartition {
                n: data.n(),
                k: k_folds,
            });
        }
    }
    match smoother {
        SmootherPolicy::Injected(inj) => {
            let f = inj.build(data, folds)?;
            Ok((0..k_folds)
                .map(|fold| SmootherFit::Injected { fold, f: f.clone() })
                .collect())
        }
        SmootherPolicy::KernelRidge(policy) => {
            let shared = match policy {
                RidgePolicy::Fixed { lambda, gamma } => Some((*lambda, *gamma)),
                RidgePolicy::Cv { per_fold: false } => {
                    let train = folds.complement(0);
                    let t = tune_kernel_ridge(
                        &select_rows(data.labeled_x(), &train),
                        &select_entries(data.labeled_y(), &train),
                    )?;
                    Some((t.lambda, t.gamma))
                }
                RidgePolicy::Cv { per_fold: true } => None,
            };
            (0..k_folds)
                .into_par_iter()
                .map(|k| {
                    let train = folds.complement(k);
                    let x = select_rows(data.labeled_x(), &train);
                    let y = select_entries(data.labeled_y(), &train);
                    let (lambda, gamma) = match shared {
                        Some(pair) => pair,
                        None => {
                            let t = tune_kernel_ridge(&x, &y)?;
                            (t.lambda, t.gamma)
                        }
                    };
                    fit_kernel_ridge(&x, &y, lambda, gamma).map(SmootherFit::KernelRidge)
                })
                .collect()
        }
        SmootherPolicy::LocalConstant { kernel, bandwidth } => {
            let pca = match dimred {
                DimRedPolicy::Pca { r } => Some(pca_directions(
                    &vstack(data.labeled_x(), data.unlabeled_x()),
                    *r,
                )?),
                _ => None,
            };
            (0..k_folds)
                .into_par_iter()
                .map(|k| {
                    let train = folds.complement(k);
                    let basis = fold_projection(data, &train, dimred, pca.as_ref(), k)?;
                    let x = select_rows(data.labeled_x(), &train);
                    let y = select_entries(data.labeled_y(), &train);
                    let r = basis.r();
                    let spec = kernel.with_dim(r);
                    let (h, choice) = match bandwidth {
                        BandwidthPolicy::Fixed(h) => (*h, None),
                        BandwidthPolicy::Cv { grid, cv_folds } => {
                            let map = ScoreMap::fit(&x, basis.clone())?;
                            let scores = map.apply(&x);
                            let grid = grid
                                .clone()
                                .unwrap_or_else(|| default_grid(train.len(), spec.order, r));
                            let choice = select_bandwidth(
                                &scores,
                                y.as_slice(),
                                &spec,
                                &grid,
                                *cv_folds,
                                derive_seed(seed, k as u64),
                            )?;
                            (choice.h, Some(choice))
                        }
                    };
                    let mut fit = fit_local_constant(&x, &y, basis, spec, h)?;
                    fit.bandwidth = choice;
                    Ok(SmootherFit::LocalConstant(fit))
                })
                .collect()
        }
    }
}
