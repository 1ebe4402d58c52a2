//! Data-generating models, true coefficients, the Monte Carlo driver and
//! cross-validated prediction error.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{derive_seed, SemiSupervisedDataset};
use crate::dimred::SliceScheme;
use crate::error::{EaseError, Result};
use crate::estimators::{fit_np, fit_ols, impute_mu};
use crate::inference::{
    influences_from_mu, ols_sandwich_se, run_pipeline, z_quantile, GammaChoice, PipelineConfig,
};
use crate::kernels::KernelSpec;
use crate::linalg::{assemble_gram, augment, augment_row, least_squares, GramSource, NeumaierSum};
use crate::smoothing::{fit_local_constant, DimRedPolicy, SmootherFit, SmootherPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Model {
    Linear,
    Nl1c,
    Nl2c,
    Nl3c,
    P2Linear,
    P2Nli,
    P2Nlq,
}

impl FromStr for Model {
    type Err = EaseError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "linear" => Model::Linear,
            "nl1c" => Model::Nl1c,
            "nl2c" => Model::Nl2c,
            "nl3c" => Model::Nl3c,
            "p2-linear" => Model::P2Linear,
            "p2-nli" => Model::P2Nli,
            "p2-nlq" => Model::P2Nlq,
            other => return Err(EaseError::Config(format!("unknown model '{other}'"))),
        })
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Model::Linear => "linear",
            Model::Nl1c => "nl1c",
            Model::Nl2c => "nl2c",
            Model::Nl3c => "nl3c",
            Model::P2Linear => "p2-linear",
            Model::P2Nli => "p2-nli",
            Model::P2Nlq => "p2-nlq",
        };
        f.write_str(s)
    }
}

/// Coefficient setting: `b = (1_{p/2}, 0_{p/2})` or `b = 1_p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Setting {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

impl FromStr for Setting {
    type Err = EaseError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "I" | "i" | "setting-1" => Ok(Setting::One),
            "2" | "II" | "ii" | "setting-2" => Ok(Setting::Two),
            other => Err(EaseError::Config(format!("unknown setting '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DgpSpec {
    pub model: Model,
    pub p: usize,
    pub setting: Setting,
    /// Interaction or quadratic strength for the two-covariate models.
    pub nl_param: Option<f64>,
    pub noise_sd: f64,
    /// Covariates are restricted to `[-bound, bound]^p` by redrawing.
    pub bound: f64,
}

impl DgpSpec {
    pub fn new(model: Model, p: usize, setting: Setting, nl_param: Option<f64>) -> Result<Self> {
        let spec = Self {
            model,
            p,
            setting,
            nl_param,
            noise_sd: 1.0,
            bound: 5.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self.model {
            Model::P2Linear | Model::P2Nli | Model::P2Nlq => {
                if self.p != 2 {
                    return Err(EaseError::Config(format!(
                        "model {} requires p = 2",
                        self.model
                    )));
                }
                let allowed: &[f64] = match self.model {
                    Model::P2Nli => &[0.5, 1.0],
                    Model::P2Nlq => &[0.3, 1.0],
                    _ => &[],
                };
                if !allowed.is_empty() && !self.nl_param.is_some_and(|v| allowed.contains(&v)) {
                    return Err(EaseError::Config(format!(
                        "model {} needs a strength in {allowed:?}",
                        self.model
                    )));
                }
            }
            _ => {
                if self.p < 2 || self.p % 2 != 0 {
                    return Err(EaseError::Config(format!(
                        "model {} needs an even p >= 2, got {}",
                        self.model, self.p
                    )));
                }
            }
        }
        if !(self.noise_sd >= 0.0) || !(self.bound > 0.0) {
            return Err(EaseError::Config(
                "noise sd must be >= 0 and bound > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn b(&self) -> Vec<f64> {
        let p = self.p;
        match (self.model, self.setting) {
            (Model::P2Linear | Model::P2Nli | Model::P2Nlq, _) | (_, Setting::Two) => vec![1.0; p],
            (_, Setting::One) => (0..p).map(|j| if j < p / 2 { 1.0 } else { 0.0 }).collect(),
        }
    }

    fn delta(&self) -> Vec<f64> {
        (0..self.p)
            .map(|j| if j < self.p / 2 { 0.0 } else { 1.0 })
            .collect()
    }

    fn omega(&self) -> Vec<f64> {
        (0..self.p)
            .map(|j| if j % 2 == 0 { 1.0 } else { 0.0 })
            .collect()
    }

    /// Compiled regression function.
    pub fn regression(&self) -> RegressionFn {
        RegressionFn {
            model: self.model,
            b: self.b(),
            delta: self.delta(),
            omega: self.omega(),
            nl: self.nl_param.unwrap_or(0.0),
        }
    }

    pub fn label(&self) -> String {
        match self.nl_param {
            Some(v) => format!("{}({v})", self.model),
            None => self.model.to_string(),
        }
    }
}

/// `m(x)` for a data-generating model.
#[derive(Debug, Clone)]
pub struct RegressionFn {
    model: Model,
    b: Vec<f64>,
    delta: Vec<f64>,
    omega: Vec<f64>,
    nl: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl RegressionFn {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let s = dot(x, &self.b);
        match self.model {
            Model::Linear | Model::P2Linear => s,
            Model::Nl1c => s + s * s,
            Model::Nl2c => s * (1.0 + dot(x, &self.delta)),
            Model::Nl3c => {
                let w = dot(x, &self.omega);
                s * (1.0 + dot(x, &self.delta)) + w * w
            }
            Model::P2Nli => s + self.nl * x[0] * x[1],
            Model::P2Nlq => s + self.nl * (x[0] * x[0] + x[1] * x[1]),
        }
    }
}

/// Rows of independent standard normals restricted to `[-bound, bound]^p`;
/// rows with any coordinate outside the box are redrawn. Returns the number
/// of redrawn rows alongside.
pub fn truncated_normal_rows(
    rng: &mut ChaCha8Rng,
    rows: usize,
    p: usize,
    bound: f64,
) -> (DMatrix<f64>, usize) {
    let mut out = DMatrix::zeros(rows, p);
    let mut redraws = 0;
    let mut buf = vec![0.0; p];
    for i in 0..rows {
        loop {
            for v in buf.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            if buf.iter().all(|v: &f64| v.abs() <= bound) {
                break;
            }
            redraws += 1;
        }
        for j in 0..p {
            out[(i, j)] = buf[j];
        }
    }
    (out, redraws)
}

/// Draws `n` labeled and `big_n` unlabeled rows.
pub fn generate_data(
    spec: &DgpSpec,
    n: usize,
    big_n: usize,
    seed: u64,
) -> Result<SemiSupervisedDataset> {
    spec.validate()?;
    if n == 0 {
        return Err(EaseError::Config("n must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = spec.regression();
    let (lx, _) = truncated_normal_rows(&mut rng, n, spec.p, spec.bound);
    let y = DVector::from_fn(n, |i, _| {
        let row: Vec<f64> = lx.row(i).iter().copied().collect();
        let e: f64 = StandardNormal.sample(&mut rng);
        m.eval(&row) + spec.noise_sd * e
    });
    let (ux, _) = truncated_normal_rows(&mut rng, big_n, spec.p, spec.bound);
    SemiSupervisedDataset::new(y, lx, ux)
}

/// Monte Carlo approximation of the least-squares coefficient.
#[derive(Debug, Clone, Serialize)]
pub struct TrueTheta {
    pub theta: Vec<f64>,
    pub mc_se: Vec<f64>,
    pub mc_size: usize,
    pub seed: u64,
}

/// Fixed seed for the coefficient approximation.
pub const THETA0_SEED: u64 = 0x7EE7_A000_0000_0001;
/// Draws used for the coefficient approximation.
pub const THETA0_MC_SIZE: usize = 50_000;

/// OLS of the noiseless `m(X)` on `(1, X')` over `mc_size` truncated draws.
pub fn true_theta(spec: &DgpSpec, mc_size: usize, seed: u64) -> Result<TrueTheta> {
    spec.validate()?;
    if mc_size < 10_000 {
        return Err(EaseError::Config("mc_size must be at least 10000".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, _) = truncated_normal_rows(&mut rng, mc_size, spec.p, spec.bound);
    let m = spec.regression();
    let mx = DVector::from_fn(mc_size, |i, _| {
        let row: Vec<f64> = x.row(i).iter().copied().collect();
        m.eval(&row)
    });
    let theta = least_squares(&augment(&x), &mx)?;
    let gram = assemble_gram(&x, GramSource::Pooled)?;
    let data = SemiSupervisedDataset::new(mx, x, DMatrix::zeros(0, spec.p))?;
    let fitted = augment(data.labeled_x()) * &theta;
    let (psi, _) = influences_from_mu(&data, &fitted, &theta, &gram.matrix)?;
    let mc_se = (0..theta.len())
        .map(|l| {
            let mut acc = NeumaierSum::new();
            for i in 0..mc_size {
                acc.add(psi[(i, l)] * psi[(i, l)]);
            }
            (acc.value() / mc_size as f64 / mc_size as f64).sqrt()
        })
        .collect();
    Ok(TrueTheta {
        theta: theta.iter().copied().collect(),
        mc_se,
        mc_size,
        seed,
    })
}

/// Estimators available to the Monte Carlo driver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum EstimatorId {
    #[serde(rename = "ols")]
    Ols,
    #[serde(rename = "np")]
    Np,
    #[serde(rename = "snp-ks-sir")]
    SnpKsSir,
    #[serde(rename = "ease-ks-sir")]
    EaseKsSir,
    #[serde(rename = "snp-ks-ssir")]
    SnpKsSsir,
    #[serde(rename = "ease-ks-ssir")]
    EaseKsSsir,
    #[serde(rename = "snp-ks-pca")]
    SnpKsPca,
    #[serde(rename = "ease-ks-pca")]
    EaseKsPca,
    #[serde(rename = "snp-ks-id")]
    SnpKsId,
    #[serde(rename = "ease-ks-id")]
    EaseKsId,
    #[serde(rename = "snp-km")]
    SnpKm,
    #[serde(rename = "ease-km")]
    EaseKm,
}

pub const ALL_ESTIMATORS: [EstimatorId; 12] = [
    EstimatorId::Ols,
    EstimatorId::Np,
    EstimatorId::SnpKsSir,
    EstimatorId::EaseKsSir,
    EstimatorId::SnpKsSsir,
    EstimatorId::EaseKsSsir,
    EstimatorId::SnpKsPca,
    EstimatorId::EaseKsPca,
    EstimatorId::SnpKsId,
    EstimatorId::EaseKsId,
    EstimatorId::SnpKm,
    EstimatorId::EaseKm,
];

/// Smoothing configuration shared by an imputation/combination pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Family {
    KsSir,
    KsSsir,
    KsPca,
    KsId,
    Km,
}

impl EstimatorId {
    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorId::Ols => "ols",
            EstimatorId::Np => "np",
            EstimatorId::SnpKsSir => "snp-ks-sir",
            EstimatorId::EaseKsSir => "ease-ks-sir",
            EstimatorId::SnpKsSsir => "snp-ks-ssir",
            EstimatorId::EaseKsSsir => "ease-ks-ssir",
            EstimatorId::SnpKsPca => "snp-ks-pca",
            EstimatorId::EaseKsPca => "ease-ks-pca",
            EstimatorId::SnpKsId => "snp-ks-id",
            EstimatorId::EaseKsId => "ease-ks-id",
            EstimatorId::SnpKm => "snp-km",
            EstimatorId::EaseKm => "ease-km",
        }
    }

    fn family(&self) -> Option<(Family, bool)> {
        use EstimatorId::*;
        Some(match self {
            Ols | Np => return None,
            SnpKsSir => (Family::KsSir, false),
            EaseKsSir => (Family::KsSir, true),
            SnpKsSsir => (Family::KsSsir, false),
            EaseKsSsir => (Family::KsSsir, true),
            SnpKsPca => (Family::KsPca, false),
            EaseKsPca => (Family::KsPca, true),
            SnpKsId => (Family::KsId, false),
            EaseKsId => (Family::KsId, true),
            SnpKm => (Family::Km, false),
            EaseKm => (Family::Km, true),
        })
    }
}

impl FromStr for EstimatorId {
    type Err = EaseError;

    fn from_str(s: &str) -> Result<Self> {
        ALL_ESTIMATORS
            .iter()
            .copied()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| EaseError::Config(format!("unknown estimator '{s}'")))
    }
}

impl fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parses a comma-separated roster.
pub fn parse_roster(s: &str) -> Result<Vec<EstimatorId>> {
    let mut out: Vec<EstimatorId> = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let id: EstimatorId = part.parse()?;
        if !out.contains(&id) {
            out.push(id);
        }
    }
    if out.is_empty() {
        return Err(EaseError::Config("estimator roster is empty".into()));
    }
    Ok(out)
}

/// Settings shared by every replication of a Monte Carlo study.
#[derive(Debug, Clone)]
pub struct McConfig {
    pub n: usize,
    pub big_n: usize,
    pub k_folds: usize,
    /// Projected dimension for the SIR, SS-SIR and PCA configurations.
    pub r: usize,
    pub slices: usize,
    pub level: f64,
    pub ks: SmootherPolicy,
    pub km: SmootherPolicy,
    pub np_kernel_order: u32,
    pub gamma: GammaChoice,
    pub mc_size: usize,
    pub jobs: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n: 500,
            big_n: 10_000,
            k_folds: 5,
            r: 2,
            slices: 100,
            level: 0.95,
            ks: SmootherPolicy::ks(),
            km: SmootherPolicy::km(),
            np_kernel_order: 2,
            gamma: GammaChoice::UnlabeledGram,
            mc_size: THETA0_MC_SIZE,
            jobs: 1,
        }
    }
}

impl McConfig {
    fn pipeline(&self, family: Family, seed: u64) -> PipelineConfig {
        let scheme = SliceScheme::equal_width(self.slices);
        let (smoother, dimred) = match family {
            Family::KsSir => (self.ks.clone(), DimRedPolicy::Sir { r: self.r, scheme }),
            Family::KsSsir => (self.ks.clone(), DimRedPolicy::SsSir { r: self.r, scheme }),
            Family::KsPca => (self.ks.clone(), DimRedPolicy::Pca { r: self.r }),
            Family::KsId => (self.ks.clone(), DimRedPolicy::Identity),
            Family::Km => (self.km.clone(), DimRedPolicy::Identity),
        };
        PipelineConfig {
            smoother,
            dimred,
            k_folds: self.k_folds,
            seed,
            level: self.level,
            gamma: self.gamma,
            epsilon_n: None,
        }
    }

    pub fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "n": self.n,
            "big_n": self.big_n,
            "k_folds": self.k_folds,
            "r": self.r,
            "slices": self.slices,
            "level": self.level,
            "ks": self.ks.describe(),
            "km": self.km.describe(),
            "np_kernel_order": self.np_kernel_order,
            "gamma": self.gamma,
            "mc_size": self.mc_size,
        })
    }
}

/// One estimator's output in one replication.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum EstimatorOutcome {
    Ok {
        theta: Vec<f64>,
        se: Option<Vec<f64>>,
    },
    Failed {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationResult {
    pub seed: u64,
    pub outcomes: BTreeMap<EstimatorId, EstimatorOutcome>,
}

fn failed(e: &EaseError) -> EstimatorOutcome {
    EstimatorOutcome::Failed {
        reason: format!("{}: {e}", e.tag()),
    }
}

/// Simulates one dataset and fits every estimator in `roster` to it.
pub fn run_replication(
    spec: &DgpSpec,
    roster: &[EstimatorId],
    config: &McConfig,
    seed: u64,
) -> Result<ReplicationResult> {
    let data = generate_data(spec, config.n, config.big_n, derive_seed(seed, 0))?;
    replicate_on(&data, roster, config, seed)
}

/// Fits every estimator in `roster` to `data`.
pub fn replicate_on(
    data: &SemiSupervisedDataset,
    roster: &[EstimatorId],
    config: &McConfig,
    seed: u64,
) -> Result<ReplicationResult> {
    let fit_seed = derive_seed(seed, 1);
    let mut outcomes = BTreeMap::new();
    let mut sorted: Vec<EstimatorId> = roster.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.contains(&EstimatorId::Ols) {
        let out = fit_ols(data).and_then(|ols| {
            let se = ols_sandwich_se(data, &ols)?;
            Ok(EstimatorOutcome::Ok {
                theta: ols.theta.iter().copied().collect(),
                se: Some(se),
            })
        });
        outcomes.insert(EstimatorId::Ols, out.unwrap_or_else(|e| failed(&e)));
    }
    if sorted.contains(&EstimatorId::Np) {
        let out = KernelSpec::gaussian(config.np_kernel_order, data.p())
            .and_then(|k| fit_np(data, k, None))
            .map(|est| EstimatorOutcome::Ok {
                theta: est.theta.iter().copied().collect(),
                se: None,
            });
        outcomes.insert(EstimatorId::Np, out.unwrap_or_else(|e| failed(&e)));
    }
    let mut families: BTreeMap<Family, Vec<(EstimatorId, bool)>> = BTreeMap::new();
    for id in &sorted {
        if let Some((fam, is_ease)) = id.family() {
            families.entry(fam).or_default().push((*id, is_ease));
        }
    }
    for (fam, members) in families {
        match run_pipeline(data, &config.pipeline(fam, fit_seed)) {
            Ok(res) => {
                for (id, is_ease) in members {
                    let (est, rep) = if is_ease {
                        (&res.ease, &res.ease_report)
                    } else {
                        (&res.snp, &res.snp_report)
                    };
                    outcomes.insert(
                        id,
                        EstimatorOutcome::Ok {
                            theta: est.theta.iter().copied().collect(),
                            se: Some(rep.se.clone()),
                        },
                    );
                }
            }
            Err(e) => {
                for (id, _) in members {
                    outcomes.insert(id, failed(&e));
                }
            }
        }
    }
    Ok(ReplicationResult { seed, outcomes })
}

/// Per-coordinate and aggregate summaries for one estimator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorSummary {
    pub estimator: EstimatorId,
    pub successes: usize,
    pub failures: usize,
    pub bias: Vec<f64>,
    pub ese: Vec<f64>,
    pub ase: Option<Vec<f64>>,
    pub covp: Option<Vec<f64>>,
    pub mse: f64,
    pub re: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McSummary {
    pub spec: DgpSpec,
    pub reps: usize,
    pub master_seed: u64,
    pub theta0: Vec<f64>,
    pub theta0_mc_se: Vec<f64>,
    pub level: f64,
    pub estimators: Vec<EstimatorSummary>,
    pub seeds: Vec<u64>,
    pub replications: Vec<ReplicationResult>,
}

impl McSummary {
    pub fn get(&self, id: EstimatorId) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|e| e.estimator == id)
    }
}

fn mean(v: &[f64]) -> f64 {
    let mut acc = NeumaierSum::new();
    for &x in v {
        acc.add(x);
    }
    acc.value() / v.len() as f64
}

fn sample_sd(v: &[f64]) -> f64 {
    let m = mean(v);
    let mut acc = NeumaierSum::new();
    for &x in v {
        acc.add((x - m) * (x - m));
    }
    (acc.value() / (v.len().max(2) - 1) as f64).sqrt()
}

/// Summarizes replications against `theta0`, in roster order.
pub fn summarize(
    roster: &[EstimatorId],
    replications: &[ReplicationResult],
    theta0: &[f64],
    level: f64,
) -> Result<Vec<EstimatorSummary>> {
    let z = z_quantile(level)?;
    let d = theta0.len();
    let mut out = Vec::new();
    for &id in roster {
        let mut thetas: Vec<&Vec<f64>> = Vec::new();
        let mut ses: Vec<&Vec<f64>> = Vec::new();
        let mut has_se = true;
        let mut failures = 0;
        for rep in replications {
            match rep.outcomes.get(&id) {
                Some(EstimatorOutcome::Ok { theta, se }) => {
                    thetas.push(theta);
                    match se {
                        Some(s) => ses.push(s),
                        None => has_se = false,
                    }
                }
                _ => failures += 1,
            }
        }
        let successes = thetas.len();
        let coord = |l: usize| -> Vec<f64> { thetas.iter().map(|t| t[l]).collect() };
        let (bias, ese, ase, covp, mse) = if successes == 0 {
            let nan = vec![f64::NAN; d];
            (nan.clone(), nan.clone(), None, None, f64::NAN)
        } else {
            let bias: Vec<f64> = (0..d).map(|l| mean(&coord(l)) - theta0[l]).collect();
            let ese: Vec<f64> = (0..d).map(|l| sample_sd(&coord(l))).collect();
            let (ase, covp) = if has_se {
                let ase = (0..d)
                    .map(|l| mean(&ses.iter().map(|s| s[l]).collect::<Vec<_>>()))
                    .collect();
                let covp = (0..d)
                    .map(|l| {
                        let hits = thetas
                            .iter()
                            .zip(&ses)
                            .filter(|(t, s)| (t[l] - theta0[l]).abs() <= z * s[l])
                            .count();
                        hits as f64 / successes as f64
                    })
                    .collect();
                (Some(ase), Some(covp))
            } else {
                (None, None)
            };
            let sq: Vec<f64> = thetas
                .iter()
                .map(|t| t.iter().zip(theta0).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect();
            (bias, ese, ase, covp, mean(&sq))
        };
        out.push(EstimatorSummary {
            estimator: id,
            successes,
            failures,
            bias,
            ese,
            ase,
            covp,
            mse,
            re: f64::NAN,
        });
    }
    let ols_mse = out
        .iter()
        .find(|s| s.estimator == EstimatorId::Ols)
        .map(|s| s.mse);
    for s in &mut out {
        s.re = match ols_mse {
            Some(m) if s.estimator == EstimatorId::Ols && m.is_finite() => 1.0,
            Some(m) => m / s.mse,
            None => f64::NAN,
        };
    }
    Ok(out)
}

/// Runs `reps` replications with seeds derived from `master_seed` and
/// summarizes them. Output does not depend on `config.jobs`.
pub fn monte_carlo(
    spec: &DgpSpec,
    roster: &[EstimatorId],
    config: &McConfig,
    reps: usize,
    master_seed: u64,
) -> Result<McSummary> {
    if reps < 2 {
        return Err(EaseError::Config(
            "at least two replications are required".into(),
        ));
    }
    let truth = true_theta(spec, config.mc_size, THETA0_SEED)?;
    let seeds: Vec<u64> = (0..reps as u64)
        .map(|r| derive_seed(master_seed, r))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs.max(1))
        .build()
        .map_err(|e| EaseError::Config(format!("thread pool: {e}")))?;
    let replications: Vec<ReplicationResult> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&s| run_replication(spec, roster, config, s))
            .collect::<Result<Vec<_>>>()
    })?;
    let estimators = summarize(roster, &replications, &truth.theta, config.level)?;
    Ok(McSummary {
        spec: spec.clone(),
        reps,
        master_seed,
        theta0: truth.theta,
        theta0_mc_se: truth.mc_se,
        level: config.level,
        estimators,
        seeds,
        replications,
    })
}

/// Coordinate labels `alpha0, beta0_1, ..., beta0_p`.
pub fn coordinate_labels(p: usize) -> Vec<String> {
    std::iter::once("alpha0".to_string())
        .chain((1..=p).map(|j| format!("beta0_{j}")))
        .collect()
}

fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        let s = format!("{v:.6}");
        if s == "-0.000000" {
            "0.000000".to_string()
        } else {
            s
        }
    } else {
        "NA".to_string()
    }
}

/// One row per estimator: `model,p,setting,estimator,reps,successes,failures,mse,re`.
pub fn write_table1_csv<W: std::io::Write>(summary: &McSummary, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "model",
        "p",
        "setting",
        "estimator",
        "reps",
        "successes",
        "failures",
        "mse",
        "re",
    ])
    .map_err(csv_err)?;
    for s in &summary.estimators {
        w.write_record([
            summary.spec.label(),
            summary.spec.p.to_string(),
            setting_str(summary.spec.setting).to_string(),
            s.estimator.to_string(),
            summary.reps.to_string(),
            s.successes.to_string(),
            s.failures.to_string(),
            fmt_num(s.mse),
            fmt_num(s.re),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per estimator and coordinate:
/// `estimator,coordinate,theta0,bias,ese,ase,covp,re`.
pub fn write_table2_csv<W: std::io::Write>(summary: &McSummary, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "estimator",
        "coordinate",
        "theta0",
        "bias",
        "ese",
        "ase",
        "covp",
        "re",
    ])
    .map_err(csv_err)?;
    let labels = coordinate_labels(summary.spec.p);
    for s in &summary.estimators {
        for (l, label) in labels.iter().enumerate() {
            w.write_record([
                s.estimator.to_string(),
                label.clone(),
                fmt_num(summary.theta0[l]),
                fmt_num(s.bias[l]),
                fmt_num(s.ese[l]),
                s.ase.as_ref().map_or("NA".into(), |v| fmt_num(v[l])),
                s.covp.as_ref().map_or("NA".into(), |v| fmt_num(v[l])),
                fmt_num(s.re),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Replication seeds: `replication,seed`.
pub fn write_seeds_csv<W: std::io::Write>(summary: &McSummary, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["replication", "seed"]).map_err(csv_err)?;
    for (i, s) in summary.seeds.iter().enumerate() {
        w.write_record([(i + 1).to_string(), s.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn setting_str(s: Setting) -> &'static str {
    match s {
        Setting::One => "1",
        Setting::Two => "2",
    }
}

pub(crate) fn csv_err(e: csv::Error) -> EaseError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => EaseError::Io(io),
        other => EaseError::InvalidData(format!("csv output: {other:?}")),
    }
}

/// What is evaluated on the held-out labeled rows.
#[derive(Debug, Clone)]
pub enum Predictor {
    /// `(1, x') theta_ols`.
    Ols,
    /// `(1, x') theta` for the imputation estimator.
    SnpLinear(PipelineConfig),
    /// `(1, x') theta` for the combined estimator.
    EaseLinear(PipelineConfig),
    /// The imputation function `mu(x)` itself.
    Mu(PipelineConfig),
    /// Full-dimensional local-constant smoother with the given kernel order.
    Nonparametric { order: u32 },
}

/// Mean squared error on `holdout` random labeled rows, averaged over `reps`
/// splits; every fit uses the remaining labeled rows and all unlabeled rows.
pub fn prediction_error_cv(
    data: &SemiSupervisedDataset,
    predictor: &Predictor,
    holdout: usize,
    reps: usize,
    seed: u64,
) -> Result<f64> {
    let n = data.n();
    if holdout == 0 || holdout >= n {
        return Err(EaseError::Config(format!(
            "holdout size {holdout} must lie in 1..{n}"
        )));
    }
    if reps == 0 {
        return Err(EaseError::Config("at least one split is required".into()));
    }
    let mut total = NeumaierSum::new();
    for rep in 0..reps {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, rep as u64));
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let mut test: Vec<usize> = idx[..holdout].to_vec();
        let mut train: Vec<usize> = idx[holdout..].to_vec();
        test.sort_unstable();
        train.sort_unstable();
        let fit_data = data.labeled_subset(&train)?;
        let test_x = crate::linalg::select_rows(data.labeled_x(), &test);
        let preds = predict(&fit_data, predictor, &test_x)?;
        let mut sse = NeumaierSum::new();
        for (t, &i) in test.iter().enumerate() {
            let e = data.labeled_y()[i] - preds[t];
            sse.add(e * e);
        }
        total.add(sse.value() / holdout as f64);
    }
    Ok(total.value() / reps as f64)
}

fn linear_predictions(theta: &DVector<f64>, x: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(x.nrows(), |i, _| {
        let row: Vec<f64> = x.row(i).iter().copied().collect();
        augment_row(&row).dot(theta)
    })
}

fn predict(
    data: &SemiSupervisedDataset,
    predictor: &Predictor,
    x: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    Ok(match predictor {
        Predictor::Ols => linear_predictions(&fit_ols(data)?.theta, x),
        Predictor::SnpLinear(cfg) => linear_predictions(&run_pipeline(data, cfg)?.snp.theta, x),
        Predictor::EaseLinear(cfg) => linear_predictions(&run_pipeline(data, cfg)?.ease.theta, x),
        Predictor::Mu(cfg) => {
            let (_, model) = crate::estimators::fit_snp(
                data,
                &cfg.smoother,
                &cfg.dimred,
                cfg.k_folds,
                cfg.seed,
            )?;
            impute_mu(&model, x)
        }
        Predictor::Nonparametric { order } => {
            let p = data.p();
            let kernel = KernelSpec::gaussian(*order, p)?;
            let h = (data.n() as f64).powf(-1.0 / (*order as f64 + p as f64));
            let fit = fit_local_constant(
                data.labeled_x(),
                data.labeled_y(),
                crate::dimred::ProjectionBasis::identity(p),
                kernel,
                h,
            )?;
            SmootherFit::LocalConstant(fit).predict_rows(x)
        }
    })
}
