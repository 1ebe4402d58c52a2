//! Influence-function inference with doubly cross-validated refit
//! coefficients, combination weights and normal confidence intervals.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::SemiSupervisedDataset;
use crate::error::{EaseError, Result};
use crate::estimators::{
    combine_ease, fit_ols, fit_snp, offset_regression, ImputationModel, Method, ThetaEstimate,
};
use crate::linalg::{augment, solve_spd, sym_eigen, symmetrize, NeumaierSum};
use crate::smoothing::{DimRedPolicy, SmootherPolicy};

/// Which Gram matrix stands in for `E[X X']` in the influence functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GammaChoice {
    LabeledGram,
    #[default]
    UnlabeledGram,
}

/// `eta^k` solving the offset normal equations over every fold except `k`.
pub fn double_cv_eta(
    data: &SemiSupervisedDataset,
    model: &ImputationModel,
) -> Result<Vec<DVector<f64>>> {
    let folds = &model.folds;
    if folds.k() < 2 {
        return Err(EaseError::Unsupported(
            "doubly cross-validated inference needs at least two folds".into(),
        ));
    }
    (0..folds.k())
        .map(|k| offset_regression(data, &model.labeled_offsets, &folds.complement(k)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct InfluenceEstimates {
    /// Rows `Gamma^-1 X_i (Y_i - X_i' theta_ols)`.
    pub psi0: DMatrix<f64>,
    /// Rows `Gamma^-1 X_i (Y_i - mu_k(X_i))`.
    pub psi_snp: DMatrix<f64>,
    pub gamma_hat: DMatrix<f64>,
    pub per_fold_eta: Vec<DVector<f64>>,
}

fn inverse_spd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    let mut inv = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut e = DVector::zeros(d);
        e[j] = 1.0;
        inv.set_column(j, &solve_spd(a, &e)?);
    }
    Ok(symmetrize(&inv))
}

/// Influence rows from explicit labeled-row imputations `mu_labeled`.
pub fn influences_from_mu(
    data: &SemiSupervisedDataset,
    mu_labeled: &DVector<f64>,
    theta_ols: &DVector<f64>,
    gamma_hat: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = data.n();
    if mu_labeled.len() != n {
        return Err(EaseError::DimensionMismatch {
            expected: n,
            got: mu_labeled.len(),
        });
    }
    let inv = inverse_spd(gamma_hat)?;
    let design = augment(data.labeled_x());
    let y = data.labeled_y();
    let fitted = &design * theta_ols;
    let d = design.ncols();
    let mut psi0 = DMatrix::zeros(n, d);
    let mut psi = DMatrix::zeros(n, d);
    for i in 0..n {
        let xi = design.row(i).transpose();
        let g = &inv * xi;
        let r0 = y[i] - fitted[i];
        let r1 = y[i] - mu_labeled[i];
        for l in 0..d {
            psi0[(i, l)] = g[l] * r0;
            psi[(i, l)] = g[l] * r1;
        }
    }
    Ok((psi0, psi))
}

/// Influence rows for OLS and for the imputation estimator, the latter using
/// `mu_k(X_i) = m_k(X_i) + X_i' eta^k` with the doubly cross-validated `eta^k`.
pub fn estimate_influences(
    data: &SemiSupervisedDataset,
    model: &ImputationModel,
    theta_ols: &ThetaEstimate,
    gamma: GammaChoice,
) -> Result<InfluenceEstimates> {
    let per_fold_eta = double_cv_eta(data, model)?;
    let design = augment(data.labeled_x());
    let mu = DVector::from_fn(data.n(), |i, _| {
        let k = model.folds.fold_of(i);
        model.labeled_offsets[i] + design.row(i).transpose().dot(&per_fold_eta[k])
    });
    let gamma_hat = match gamma {
        GammaChoice::LabeledGram => theta_ols.gram_labeled.matrix.clone(),
        GammaChoice::UnlabeledGram => theta_ols
            .gram_unlabeled
            .as_ref()
            .ok_or_else(|| EaseError::InvalidData("unlabeled Gram matrix unavailable".into()))?
            .matrix
            .clone(),
    };
    let (psi0, psi_snp) = influences_from_mu(data, &mu, &theta_ols.theta, &gamma_hat)?;
    Ok(InfluenceEstimates {
        psi0,
        psi_snp,
        gamma_hat,
        per_fold_eta,
    })
}

/// Uncentered second moment `n^-1 sum_i psi_i psi_i'`.
pub fn estimate_sigma(psi: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, d) = psi.shape();
    let mut s = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let mut acc = NeumaierSum::new();
            for i in 0..n {
                acc.add(psi[(i, a)] * psi[(i, b)]);
            }
            let v = acc.value() / n.max(1) as f64;
            s[(a, b)] = v;
            s[(b, a)] = v;
        }
    }
    s
}

/// Default regularizer `n^(-1/4)`.
pub fn default_epsilon(n: usize) -> f64 {
    (n as f64).powf(-0.25)
}

/// Per-coordinate weights `sigma12 / (sigma22 + eps)` with
/// `sigma12 = -mean(psi0 (psi - psi0))` and `sigma22 = mean((psi - psi0)^2)`.
pub fn estimate_delta(
    psi0: &DMatrix<f64>,
    psi_snp: &DMatrix<f64>,
    epsilon_n: f64,
) -> Result<Vec<f64>> {
    if psi0.shape() != psi_snp.shape() {
        return Err(EaseError::DimensionMismatch {
            expected: psi0.len(),
            got: psi_snp.len(),
        });
    }
    let (n, d) = psi0.shape();
    Ok((0..d)
        .map(|l| {
            let mut s12 = NeumaierSum::new();
            let mut s22 = NeumaierSum::new();
            for i in 0..n {
                let diff = psi_snp[(i, l)] - psi0[(i, l)];
                s12.add(-psi0[(i, l)] * diff);
                s22.add(diff * diff);
            }
            let nf = n as f64;
            (s12.value() / nf) / (s22.value() / nf + epsilon_n)
        })
        .collect())
}

/// Rows `psi0 + diag(delta) (psi - psi0)`.
pub fn combined_influence(
    psi0: &DMatrix<f64>,
    psi_snp: &DMatrix<f64>,
    delta: &[f64],
) -> DMatrix<f64> {
    DMatrix::from_fn(psi0.nrows(), psi0.ncols(), |i, l| {
        psi0[(i, l)] + delta[l] * (psi_snp[(i, l)] - psi0[(i, l)])
    })
}

/// Symmetrizes and checks that the smallest eigenvalue is at least `-1e-10 * trace`.
pub fn check_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s = symmetrize(a);
    let trace = s.trace().abs();
    let min = sym_eigen(&s)?.values.min();
    if min < -1e-10 * trace.max(f64::MIN_POSITIVE) {
        return Err(EaseError::NotPsd(min));
    }
    Ok(s)
}

/// Two-sided standard normal quantile `z_{1 - alpha/2}` for coverage `level`.
pub fn z_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(EaseError::Config(format!(
            "confidence level {level} must lie in (0, 1)"
        )));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(0.5 + level / 2.0))
}

#[derive(Debug, Clone, Serialize)]
pub struct CovarianceReport {
    #[serde(serialize_with = "ser_matrix")]
    pub sigma_ols: DMatrix<f64>,
    #[serde(serialize_with = "ser_matrix")]
    pub sigma_mu: DMatrix<f64>,
    #[serde(serialize_with = "ser_matrix")]
    pub sigma_ease: DMatrix<f64>,
    pub delta: Vec<f64>,
    pub epsilon_n: f64,
    pub level: f64,
    pub z: f64,
    pub method: Method,
    pub se: Vec<f64>,
    pub ci: Vec<(f64, f64)>,
}

pub fn ser_matrix<S: serde::Serializer>(
    m: &DMatrix<f64>,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(m.nrows()))?;
    for i in 0..m.nrows() {
        let row: Vec<f64> = m.row(i).iter().copied().collect();
        seq.serialize_element(&row)?;
    }
    seq.end()
}

/// Covariance matrices for OLS, imputation and combined estimators, with
/// standard errors and intervals for `theta` according to its method.
pub fn confidence_report(
    theta: &ThetaEstimate,
    influences: &InfluenceEstimates,
    delta: &[f64],
    epsilon_n: f64,
    level: f64,
) -> Result<CovarianceReport> {
    let z = z_quantile(level)?;
    let n = influences.psi0.nrows();
    let d = influences.psi0.ncols();
    if delta.len() != d || theta.theta.len() != d {
        return Err(EaseError::DimensionMismatch {
            expected: d,
            got: delta.len(),
        });
    }
    let sigma_ols = check_psd(&estimate_sigma(&influences.psi0))?;
    let sigma_mu = check_psd(&estimate_sigma(&influences.psi_snp))?;
    let sigma_ease = check_psd(&estimate_sigma(&combined_influence(
        &influences.psi0,
        &influences.psi_snp,
        delta,
    )))?;
    let chosen = match theta.method {
        Method::Ols => &sigma_ols,
        Method::Snp => &sigma_mu,
        Method::Ease => &sigma_ease,
        Method::Np => {
            return Err(EaseError::Unsupported(
                "no influence-function variance for the nonparametric estimator".into(),
            ))
        }
    };
    let se: Vec<f64> = (0..d)
        .map(|j| (chosen[(j, j)].max(0.0) / n as f64).sqrt())
        .collect();
    let ci = (0..d)
        .map(|j| (theta.theta[j] - z * se[j], theta.theta[j] + z * se[j]))
        .collect();
    Ok(CovarianceReport {
        sigma_ols,
        sigma_mu,
        sigma_ease,
        delta: delta.to_vec(),
        epsilon_n,
        level,
        z,
        method: theta.method,
        se,
        ci,
    })
}

/// Heteroskedasticity-robust (HC0) standard errors for OLS with `Gamma_n`.
pub fn ols_sandwich_se(data: &SemiSupervisedDataset, ols: &ThetaEstimate) -> Result<Vec<f64>> {
    let mu = augment(data.labeled_x()) * &ols.theta;
    let (psi0, _) = influences_from_mu(data, &mu, &ols.theta, &ols.gram_labeled.matrix)?;
    let sigma = check_psd(&estimate_sigma(&psi0))?;
    let n = data.n() as f64;
    Ok((0..sigma.nrows())
        .map(|j| (sigma[(j, j)] / n).sqrt())
        .collect())
}

/// Settings for the full estimate-and-infer pipeline.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub smoother: SmootherPolicy,
    pub dimred: DimRedPolicy,
    pub k_folds: usize,
    pub seed: u64,
    pub level: f64,
    pub gamma: GammaChoice,
    pub epsilon_n: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub ols: ThetaEstimate,
    pub snp: ThetaEstimate,
    pub ease: ThetaEstimate,
    pub model: ImputationModel,
    pub influences: InfluenceEstimates,
    pub ols_se: Vec<f64>,
    pub snp_report: CovarianceReport,
    pub ease_report: CovarianceReport,
}

/// OLS, imputation estimator, combination weights and the combined estimator,
/// each with standard errors.
pub fn run_pipeline(
    data: &SemiSupervisedDataset,
    config: &PipelineConfig,
) -> Result<PipelineResult> {
    let ols = fit_ols(data)?;
    let (snp, mut model) = fit_snp(
        data,
        &config.smoother,
        &config.dimred,
        config.k_folds,
        config.seed,
    )?;
    let influences = estimate_influences(data, &model, &ols, config.gamma)?;
    model.eta.per_fold_eta = Some(influences.per_fold_eta.clone());
    let eps = config
        .epsilon_n
        .unwrap_or_else(|| default_epsilon(data.n()));
    let delta = estimate_delta(&influences.psi0, &influences.psi_snp, eps)?;
    let ease = combine_ease(&ols, &snp, &delta)?;
    let snp_report = confidence_report(&snp, &influences, &delta, eps, config.level)?;
    let ease_report = confidence_report(&ease, &influences, &delta, eps, config.level)?;
    let ols_se = ols_sandwich_se(data, &ols)?;
    Ok(PipelineResult {
        ols,
        snp,
        ease,
        model,
        influences,
        ols_se,
        snp_report,
        ease_report,
    })
}
