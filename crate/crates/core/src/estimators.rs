//! Point estimators of the least-squares coefficient: OLS, the fully
//! nonparametric imputation estimator, the cross-fitted refit-and-impute
//! estimator and the adaptive combination.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::{derive_seed, partition_folds, FoldAssignment, SemiSupervisedDataset};
use crate::dimred::ProjectionBasis;
use crate::error::{EaseError, Result};
use crate::kernels::KernelSpec;
use crate::linalg::{
    assemble_gram, augment, augment_row, normal_equation_residual, GramMatrix, GramSource,
    LeastSquares, NeumaierSum,
};
use crate::smoothing::{
    fit_fold_smoothers, fit_local_constant, DimRedPolicy, SmootherFit, SmootherPolicy,
};

/// Tolerance on the relative residual of every defining normal equation.
pub const NORMAL_EQ_TOL: f64 = 1e-8;

/// Stream indices for seeds derived from a fit seed.
pub const FOLD_STREAM: u64 = 0;
pub const SMOOTHER_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ols,
    Np,
    Snp,
    Ease,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Ols => "ols",
            Method::Np => "np",
            Method::Snp => "snp",
            Method::Ease => "ease",
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Provenance {
    pub k_folds: Option<usize>,
    pub seed: Option<u64>,
    pub smoother: Option<serde_json::Value>,
    pub dimred: Option<serde_json::Value>,
    pub bandwidth: Option<f64>,
    pub delta: Option<Vec<f64>>,
}

/// A coefficient vector `(intercept, slopes)` with the Gram matrices of the
/// data it was built from.
#[derive(Debug, Clone)]
pub struct ThetaEstimate {
    pub theta: DVector<f64>,
    pub method: Method,
    pub gram_labeled: GramMatrix,
    pub gram_unlabeled: Option<GramMatrix>,
    pub provenance: Provenance,
}

fn checked_solve(design: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let theta = LeastSquares::new(design)?.solve(rhs)?;
    let resid = normal_equation_residual(design, rhs, &theta);
    if !(resid <= NORMAL_EQ_TOL) {
        return Err(EaseError::Numerical(format!(
            "normal-equation residual {resid:.3e} exceeds {NORMAL_EQ_TOL:.0e}"
        )));
    }
    Ok(theta)
}

fn unlabeled_gram(data: &SemiSupervisedDataset) -> Result<GramMatrix> {
    if data.big_n() == 0 {
        return Err(EaseError::InvalidData("no unlabeled rows".into()));
    }
    assemble_gram(data.unlabeled_x(), GramSource::Unlabeled)
}

/// Ordinary least squares on the labeled rows.
pub fn fit_ols(data: &SemiSupervisedDataset) -> Result<ThetaEstimate> {
    let theta = checked_solve(&augment(data.labeled_x()), data.labeled_y())?;
    Ok(ThetaEstimate {
        theta,
        method: Method::Ols,
        gram_labeled: assemble_gram(data.labeled_x(), GramSource::Labeled)?,
        gram_unlabeled: if data.big_n() > 0 {
            Some(unlabeled_gram(data)?)
        } else {
            None
        },
        provenance: Provenance::default(),
    })
}

/// Least-squares fit of imputed outcomes on the unlabeled design.
pub fn fit_imputed(
    data: &SemiSupervisedDataset,
    imputed: &DVector<f64>,
    method: Method,
) -> Result<ThetaEstimate> {
    if imputed.len() != data.big_n() {
        return Err(EaseError::DimensionMismatch {
            expected: data.big_n(),
            got: imputed.len(),
        });
    }
    let theta = checked_solve(&augment(data.unlabeled_x()), imputed)?;
    Ok(ThetaEstimate {
        theta,
        method,
        gram_labeled: assemble_gram(data.labeled_x(), GramSource::Labeled)?,
        gram_unlabeled: Some(unlabeled_gram(data)?),
        provenance: Provenance::default(),
    })
}

/// Fully nonparametric estimator: a `p`-dimensional local-constant fit on all
/// labeled rows, imputed on the unlabeled rows. `h` defaults to `n^(-1/(q+p))`
/// on the whitened scale.
pub fn fit_np(
    data: &SemiSupervisedDataset,
    kernel: KernelSpec,
    h: Option<f64>,
) -> Result<ThetaEstimate> {
    let p = data.p();
    if (kernel.order as usize) <= p {
        log::warn!(
            "kernel order {} does not exceed the covariate dimension {p}; the nonparametric estimator may not be root-n consistent",
            kernel.order
        );
    }
    let h = h.unwrap_or_else(|| (data.n() as f64).powf(-1.0 / (kernel.order as f64 + p as f64)));
    let fit = fit_local_constant(
        data.labeled_x(),
        data.labeled_y(),
        ProjectionBasis::identity(p),
        kernel.with_dim(p),
        h,
    )?;
    let imputed = SmootherFit::LocalConstant(fit).predict_rows(data.unlabeled_x());
    let mut est = fit_imputed(data, &imputed, Method::Np)?;
    est.provenance.bandwidth = Some(h);
    Ok(est)
}

/// Fully nonparametric estimator with a caller-supplied regression function.
pub fn fit_np_with<F: Fn(&[f64]) -> f64 + Sync>(
    data: &SemiSupervisedDataset,
    m: F,
) -> Result<ThetaEstimate> {
    let imputed = DVector::from_fn(data.big_n(), |j, _| {
        let row: Vec<f64> = data.unlabeled_x().row(j).iter().copied().collect();
        m(&row)
    });
    fit_imputed(data, &imputed, Method::Np)
}

/// Refit coefficients `eta`; `per_fold_eta` holds the doubly cross-validated
/// versions once inference has run.
#[derive(Debug, Clone)]
pub struct RefitCoefficients {
    pub eta: DVector<f64>,
    pub per_fold_eta: Option<Vec<DVector<f64>>>,
}

/// Cross-fitted offsets `m_k(X_i)` for every labeled row, `k` being the fold of `i`.
pub fn cross_fitted_offsets(
    data: &SemiSupervisedDataset,
    fits: &[SmootherFit],
    folds: &FoldAssignment,
) -> Result<DVector<f64>> {
    if fits.len() != folds.k() || folds.n() != data.n() {
        return Err(EaseError::DimensionMismatch {
            expected: folds.k(),
            got: fits.len(),
        });
    }
    let mut offsets = DVector::zeros(data.n());
    for (k, fit) in fits.iter().enumerate() {
        let members = folds.members(k);
        if members.is_empty() {
            continue;
        }
        let rows = crate::linalg::select_rows(data.labeled_x(), &members);
        let pred = fit.predict_rows(&rows);
        for (idx, &i) in members.iter().enumerate() {
            offsets[i] = pred[idx];
        }
    }
    Ok(offsets)
}

/// Solves `sum_i X_i (Y_i - o_i - X_i' eta) = 0` over the labeled rows in `rows`.
pub fn offset_regression(
    data: &SemiSupervisedDataset,
    offsets: &DVector<f64>,
    rows: &[usize],
) -> Result<DVector<f64>> {
    let design = augment(&crate::linalg::select_rows(data.labeled_x(), rows));
    let rhs = DVector::from_fn(rows.len(), |r, _| {
        data.labeled_y()[rows[r]] - offsets[rows[r]]
    });
    checked_solve(&design, &rhs)
}

/// Refitting step: regresses `Y - m_k(X)` on `(1, X')` using cross-fitted offsets.
pub fn refit_eta(
    data: &SemiSupervisedDataset,
    fits: &[SmootherFit],
    folds: &FoldAssignment,
) -> Result<RefitCoefficients> {
    let offsets = cross_fitted_offsets(data, fits, folds)?;
    let all: Vec<usize> = (0..data.n()).collect();
    Ok(RefitCoefficients {
        eta: offset_regression(data, &offsets, &all)?,
        per_fold_eta: None,
    })
}

/// Fold smoothers plus refit coefficients: `mu(x) = K^-1 sum_k m_k(x) + (1, x') eta`.
#[derive(Debug, Clone)]
pub struct ImputationModel {
    pub fits: Vec<SmootherFit>,
    pub eta: RefitCoefficients,
    pub folds: FoldAssignment,
    /// Cross-fitted offsets at the labeled rows.
    pub labeled_offsets: DVector<f64>,
}

/// Evaluates the imputation function at every row of `x`.
pub fn impute_mu(model: &ImputationModel, x: &DMatrix<f64>) -> DVector<f64> {
    let k = model.fits.len() as f64;
    let preds: Vec<DVector<f64>> = model.fits.iter().map(|f| f.predict_rows(x)).collect();
    DVector::from_fn(x.nrows(), |i, _| {
        let mut acc = NeumaierSum::new();
        for p in &preds {
            acc.add(p[i]);
        }
        let row: Vec<f64> = x.row(i).iter().copied().collect();
        acc.value() / k + augment_row(&row).dot(&model.eta.eta)
    })
}

/// Builds the imputation model from already fitted fold smoothers and
/// returns it together with the unlabeled-data fit.
pub fn snp_from_smoothers(
    data: &SemiSupervisedDataset,
    folds: FoldAssignment,
    fits: Vec<SmootherFit>,
) -> Result<(ThetaEstimate, ImputationModel)> {
    let labeled_offsets = cross_fitted_offsets(data, &fits, &folds)?;
    let all: Vec<usize> = (0..data.n()).collect();
    let eta = RefitCoefficients {
        eta: offset_regression(data, &labeled_offsets, &all)?,
        per_fold_eta: None,
    };
    let model = ImputationModel {
        fits,
        eta,
        folds,
        labeled_offsets,
    };
    let mu = impute_mu(&model, data.unlabeled_x());
    let mut est = fit_imputed(data, &mu, Method::Snp)?;
    est.provenance.k_folds = Some(model.folds.k());
    Ok((est, model))
}

/// Smoothing, refitting and imputation with `k_folds`-fold cross-fitting;
/// the final fit uses only the unlabeled rows.
pub fn fit_snp(
    data: &SemiSupervisedDataset,
    smoother: &SmootherPolicy,
    dimred: &DimRedPolicy,
    k_folds: usize,
    seed: u64,
) -> Result<(ThetaEstimate, ImputationModel)> {
    if k_folds == 1 {
        log::warn!(
            "single-fold imputation reuses the labeled rows for smoothing and refitting; it needs a kernel order above r/2 and can be biased in finite samples"
        );
    }
    let folds = partition_folds(data.n(), k_folds, derive_seed(seed, FOLD_STREAM))?;
    let fits = fit_fold_smoothers(
        data,
        &folds,
        smoother,
        dimred,
        derive_seed(seed, SMOOTHER_STREAM),
    )?;
    let (mut est, model) = snp_from_smoothers(data, folds, fits)?;
    est.provenance.seed = Some(seed);
    est.provenance.smoother = Some(smoother.describe());
    est.provenance.dimred = Some(dimred.describe());
    Ok((est, model))
}

/// Coordinate-wise `theta_l + delta_l (theta_snp_l - theta_l)`.
pub fn combine_ease(
    ols: &ThetaEstimate,
    snp: &ThetaEstimate,
    delta: &[f64],
) -> Result<ThetaEstimate> {
    let d = ols.theta.len();
    if snp.theta.len() != d {
        return Err(EaseError::DimensionMismatch {
            expected: d,
            got: snp.theta.len(),
        });
    }
    if delta.len() != d {
        return Err(EaseError::DimensionMismatch {
            expected: d,
            got: delta.len(),
        });
    }
    let theta = DVector::from_fn(d, |l, _| {
        ols.theta[l] + delta[l] * (snp.theta[l] - ols.theta[l])
    });
    let mut provenance = snp.provenance.clone();
    provenance.delta = Some(delta.to_vec());
    Ok(ThetaEstimate {
        theta,
        method: Method::Ease,
        gram_labeled: ols.gram_labeled.clone(),
        gram_unlabeled: snp
            .gram_unlabeled
            .clone()
            .or_else(|| ols.gram_unlabeled.clone()),
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smoothing::InjectedSmoother;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset(n: usize, big_n: usize, p: usize, seed: u64) -> SemiSupervisedDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lx = DMatrix::from_fn(n, p, |_, _| rng.gen_range(-2.0..2.0));
        let ux = DMatrix::from_fn(big_n, p, |_, _| rng.gen_range(-2.0..2.0));
        let y = DVector::from_fn(n, |i, _| {
            let s: f64 = (0..p).map(|j| lx[(i, j)]).sum();
            s + s * s + rng.gen_range(-0.5..0.5)
        });
        SemiSupervisedDataset::new(y, lx, ux).unwrap()
    }

    #[test]
    fn ols_exact_line() {
        let x = DMatrix::from_fn(10, 1, |i, _| i as f64 * 0.3 - 1.0);
        let y = DVector::from_fn(10, |i, _| 1.0 + 2.0 * x[(i, 0)]);
        let d = SemiSupervisedDataset::new(y, x, DMatrix::zeros(0, 1)).unwrap();
        let est = fit_ols(&d).unwrap();
        assert_abs_diff_eq!(est.theta[0], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(est.theta[1], 2.0, epsilon = 1e-10);
    }

    #[test]
    fn ols_residuals_orthogonal() {
        let d = dataset(50, 0, 3, 1);
        let est = fit_ols(&d).unwrap();
        let design = augment(d.labeled_x());
        let score = design.tr_mul(&(d.labeled_y() - &design * &est.theta));
        let scale = d.labeled_y().amax() * 50.0;
        assert!(score.amax() <= 1e-9 * scale);
    }

    #[test]
    fn ols_rank_deficient_names_columns() {
        let x = DMatrix::from_fn(8, 2, |i, j| if j == 0 { i as f64 } else { 3.0 * i as f64 });
        let d = SemiSupervisedDataset::new(
            DVector::from_fn(8, |i, _| i as f64),
            x,
            DMatrix::zeros(0, 2),
        )
        .unwrap();
        match fit_ols(&d).unwrap_err() {
            EaseError::RankDeficientDesign(cols) => assert_eq!(cols, vec!["x1", "x2"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn np_with_linear_function_recovers_coefficients() {
        let d = dataset(20, 200, 2, 2);
        let beta = [0.5, -1.0, 2.0];
        let est = fit_np_with(&d, |x| beta[0] + beta[1] * x[0] + beta[2] * x[1]).unwrap();
        for l in 0..3 {
            assert_abs_diff_eq!(est.theta[l], beta[l], epsilon = 1e-10);
        }
    }

    #[test]
    fn np_satisfies_unlabeled_normal_equations() {
        let d = dataset(200, 800, 2, 3);
        let est = fit_np(&d, KernelSpec::gaussian(4, 2).unwrap(), None).unwrap();
        assert_eq!(est.method, Method::Np);
        let fit = fit_local_constant(
            d.labeled_x(),
            d.labeled_y(),
            ProjectionBasis::identity(2),
            KernelSpec::gaussian(4, 2).unwrap(),
            est.provenance.bandwidth.unwrap(),
        )
        .unwrap();
        let m = SmootherFit::LocalConstant(fit).predict_rows(d.unlabeled_x());
        let design = augment(d.unlabeled_x());
        let score = design.tr_mul(&(&m - &design * &est.theta));
        assert!(score.norm() <= 1e-8 * design.tr_mul(&m).norm());
    }

    #[test]
    fn zero_offsets_reduce_to_ols() {
        let d = dataset(30, 10, 2, 4);
        let folds = partition_folds(30, 3, 1).unwrap();
        let fits = fit_fold_smoothers(
            &d,
            &folds,
            &SmootherPolicy::Injected(InjectedSmoother::zero()),
            &DimRedPolicy::Identity,
            0,
        )
        .unwrap();
        let eta = refit_eta(&d, &fits, &folds).unwrap();
        assert_eq!(eta.eta, fit_ols(&d).unwrap().theta);
    }

    #[test]
    fn ols_offsets_give_zero_eta() {
        let d = dataset(30, 10, 2, 5);
        let folds = partition_folds(30, 3, 1).unwrap();
        let fits = fit_fold_smoothers(
            &d,
            &folds,
            &SmootherPolicy::Injected(InjectedSmoother::ols_predictions()),
            &DimRedPolicy::Identity,
            0,
        )
        .unwrap();
        let eta = refit_eta(&d, &fits, &folds).unwrap();
        assert!(eta.eta.amax() < 1e-10);
    }

    #[test]
    fn impute_mu_examples() {
        let d = dataset(12, 15, 2, 6);
        let ols = fit_ols(&d).unwrap();
        let folds1 = partition_folds(12, 1, 0).unwrap();
        let model = ImputationModel {
            fits: vec![SmootherFit::Injected {
                fold: 0,
                f: std::sync::Arc::new(|_, _| 0.0),
            }],
            eta: RefitCoefficients {
                eta: refit_eta(
                    &d,
                    &[SmootherFit::Injected {
                        fold: 0,
                        f: std::sync::Arc::new(|_, _| 0.0),
                    }],
                    &folds1,
                )
                .unwrap()
                .eta,
                per_fold_eta: None,
            },
            folds: folds1,
            labeled_offsets: DVector::zeros(12),
        };
        let mu = impute_mu(&model, d.unlabeled_x());
        let expected = augment(d.unlabeled_x()) * &ols.theta;
        assert!((mu - expected).amax() < 1e-10);

        let folds2 = partition_folds(12, 2, 0).unwrap();
        let f: crate::smoothing::FoldFunction =
            std::sync::Arc::new(|k, _| if k == 0 { 1.0 } else { 3.0 });
        let model = ImputationModel {
            fits: vec![
                SmootherFit::Injected {
                    fold: 0,
                    f: f.clone(),
                },
                SmootherFit::Injected { fold: 1, f },
            ],
            eta: RefitCoefficients {
                eta: DVector::zeros(3),
                per_fold_eta: None,
            },
            folds: folds2,
            labeled_offsets: DVector::zeros(12),
        };
        assert!(impute_mu(&model, d.unlabeled_x()).iter().all(|&v| v == 2.0));
    }

    #[test]
    fn snp_with_ols_smoother_reduces_to_ols() {
        let d = dataset(60, 300, 3, 7);
        let ols = fit_ols(&d).unwrap();
        let (snp, model) = fit_snp(
            &d,
            &SmootherPolicy::Injected(InjectedSmoother::ols_predictions()),
            &DimRedPolicy::Identity,
            5,
            11,
        )
        .unwrap();
        assert!((snp.theta.clone() - &ols.theta).amax() < 1e-8);
        let mu = impute_mu(&model, d.unlabeled_x());
        assert!((mu - augment(d.unlabeled_x()) * &ols.theta).amax() < 1e-8);
        let ease = combine_ease(&ols, &snp, &[0.3, 0.9, -0.2, 1.0]).unwrap();
        assert!((ease.theta - &ols.theta).amax() < 1e-8);
    }

    #[test]
    fn snp_with_linear_mu_recovers_beta() {
        let d = dataset(40, 100, 2, 8);
        let beta = [1.0, 2.0, -3.0];
        let folds = partition_folds(40, 4, 0).unwrap();
        let fits: Vec<SmootherFit> = (0..4)
            .map(|fold| SmootherFit::Injected {
                fold,
                f: std::sync::Arc::new(move |_, x: &[f64]| {
                    beta[0] + beta[1] * x[0] + beta[2] * x[1]
                }),
            })
            .collect();
        let model = ImputationModel {
            fits,
            eta: RefitCoefficients {
                eta: DVector::zeros(3),
                per_fold_eta: None,
            },
            folds,
            labeled_offsets: DVector::zeros(40),
        };
        let mu = impute_mu(&model, d.unlabeled_x());
        let est = fit_imputed(&d, &mu, Method::Snp).unwrap();
        for l in 0..3 {
            assert_abs_diff_eq!(est.theta[l], beta[l], epsilon = 1e-10);
        }
    }

    #[test]
    fn snp_is_deterministic_and_orthogonal() {
        let d = dataset(150, 600, 4, 9);
        let dimred = DimRedPolicy::Sir {
            r: 2,
            scheme: crate::dimred::SliceScheme::equal_width(10),
        };
        let (a, model) = fit_snp(&d, &SmootherPolicy::ks(), &dimred, 5, 3).unwrap();
        let (b, _) = fit_snp(&d, &SmootherPolicy::ks(), &dimred, 5, 3).unwrap();
        assert_eq!(a.theta, b.theta);
        let mu = impute_mu(&model, d.unlabeled_x());
        let design = augment(d.unlabeled_x());
        let score = design.tr_mul(&(&mu - &design * &a.theta));
        assert!(score.norm() <= 1e-8 * design.tr_mul(&mu).norm());
    }

    #[test]
    fn ease_combination_examples() {
        let d = dataset(10, 10, 1, 10);
        let mut ols = fit_ols(&d).unwrap();
        let mut snp = ols.clone();
        ols.theta = DVector::from_vec(vec![0.0, 1.0]);
        snp.theta = DVector::from_vec(vec![1.0, 3.0]);
        let e = combine_ease(&ols, &snp, &[0.5, 0.25]).unwrap();
        assert_eq!(e.theta.as_slice(), &[0.5, 1.5]);
        assert_eq!(
            combine_ease(&ols, &snp, &[0.0, 0.0]).unwrap().theta,
            ols.theta
        );
        assert_eq!(
            combine_ease(&ols, &snp, &[1.0, 1.0]).unwrap().theta,
            snp.theta
        );
        assert!(matches!(
            combine_ease(&ols, &snp, &[1.0]),
            Err(EaseError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn column_permutation_equivariance() {
        let d = dataset(80, 200, 3, 12);
        let perm = [2, 0, 1];
        let dp = d.permute_columns(&perm).unwrap();
        let a = fit_ols(&d).unwrap();
        let b = fit_ols(&dp).unwrap();
        for (j, &src) in perm.iter().enumerate() {
            assert_abs_diff_eq!(b.theta[j + 1], a.theta[src + 1], epsilon = 1e-10);
        }
        let km = SmootherPolicy::KernelRidge(crate::smoothing::RidgePolicy::Fixed {
            lambda: 1.0,
            gamma: 0.5,
        });
        let (sa, _) = fit_snp(&d, &km, &DimRedPolicy::Identity, 4, 5).unwrap();
        let (sb, _) = fit_snp(&dp, &km, &DimRedPolicy::Identity, 4, 5).unwrap();
        for (j, &src) in perm.iter().enumerate() {
            assert_abs_diff_eq!(sb.theta[j + 1], sa.theta[src + 1], epsilon = 1e-10);
        }
    }
}
