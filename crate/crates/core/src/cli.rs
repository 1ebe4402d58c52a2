//! Command-line front end: `fit`, `predict`, `simulate` and `diagnose`.
//!
//! Every flag may also come from a flat `key=value` file given with
//! `--config` (keys are flag names without the leading dashes); flags on the
//! command line win. A JSON report written by this tool is accepted as a
//! config file too, in which case its embedded `config` object is used.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::data::{load_dataset, load_split, Schema, SemiSupervisedDataset};
use crate::diagnostics::mcar_tests;
use crate::dimred::SliceScheme;
use crate::error::{EaseError, ErrorClass, Result};
use crate::estimators::{fit_np, impute_mu, Method};
use crate::inference::{run_pipeline, GammaChoice, PipelineConfig, PipelineResult};
use crate::kernels::KernelSpec;
use crate::linalg::{augment, design_column_name};
use crate::simulation::{
    coordinate_labels, monte_carlo, parse_roster, write_seeds_csv, write_table1_csv,
    write_table2_csv, DgpSpec, McConfig, McSummary, Model, Setting,
};
use crate::smoothing::{BandwidthPolicy, DimRedPolicy, SmootherPolicy};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_SEED: u64 = 1;

/// Recognised configuration keys.
pub const KEYS: &[&str] = &[
    "labeled",
    "unlabeled",
    "method",
    "smoother",
    "dimred",
    "r",
    "slices",
    "folds",
    "kernel-order",
    "bandwidth",
    "level",
    "seed",
    "reps",
    "model",
    "p",
    "setting",
    "n",
    "big-n",
    "nl-param",
    "jobs",
    "out",
    "format",
    "log1p-cols",
];

#[derive(Debug, Parser)]
#[command(
    name = "ease",
    version,
    about = "Semi-supervised linear regression with unlabeled covariates"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate coefficients, standard errors and intervals from data.
    Fit(Flags),
    /// Fit, then write predictions for the unlabeled rows.
    Predict(Flags),
    /// Monte Carlo study on a built-in model.
    Simulate(Flags),
    /// Labeled-versus-unlabeled covariate comparisons.
    Diagnose(Flags),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// Labeled CSV (rows with a blank or NA outcome count as unlabeled).
    #[arg(long)]
    pub labeled: Option<String>,
    /// Covariate-only CSV.
    #[arg(long)]
    pub unlabeled: Option<String>,
    /// Comma-separated methods (ols, np, snp, ease) or, for simulate, estimators.
    #[arg(long)]
    pub method: Option<String>,
    /// ks or km.
    #[arg(long)]
    pub smoother: Option<String>,
    /// auto, identity, pca, sir or ss-sir.
    #[arg(long)]
    pub dimred: Option<String>,
    #[arg(long)]
    pub r: Option<String>,
    #[arg(long)]
    pub slices: Option<String>,
    #[arg(long)]
    pub folds: Option<String>,
    #[arg(long = "kernel-order")]
    pub kernel_order: Option<String>,
    /// cv or a positive number.
    #[arg(long)]
    pub bandwidth: Option<String>,
    #[arg(long)]
    pub level: Option<String>,
    /// Master seed; falls back to EASE_SEED.
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub reps: Option<String>,
    /// linear, nl1c, nl2c, nl3c, p2-linear, p2-nli or p2-nlq.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub p: Option<String>,
    /// 1 or 2.
    #[arg(long)]
    pub setting: Option<String>,
    #[arg(long)]
    pub n: Option<String>,
    #[arg(long = "big-n")]
    pub big_n: Option<String>,
    /// Interaction or quadratic strength for p2-nli and p2-nlq.
    #[arg(long = "nl-param")]
    pub nl_param: Option<String>,
    /// Worker threads (default: available cores). Does not affect results.
    #[arg(long)]
    pub jobs: Option<String>,
    /// Output file (simulate: output directory).
    #[arg(long)]
    pub out: Option<String>,
    /// json or csv.
    #[arg(long)]
    pub format: Option<String>,
    /// Comma-separated covariates replaced by ln(1 + x).
    #[arg(long = "log1p-cols")]
    pub log1p_cols: Option<String>,
    /// key=value file or an earlier JSON report.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl Flags {
    fn to_map(&self) -> BTreeMap<String, String> {
        let pairs = [
            ("labeled", &self.labeled),
            ("unlabeled", &self.unlabeled),
            ("method", &self.method),
            ("smoother", &self.smoother),
            ("dimred", &self.dimred),
            ("r", &self.r),
            ("slices", &self.slices),
            ("folds", &self.folds),
            ("kernel-order", &self.kernel_order),
            ("bandwidth", &self.bandwidth),
            ("level", &self.level),
            ("seed", &self.seed),
            ("reps", &self.reps),
            ("model", &self.model),
            ("p", &self.p),
            ("setting", &self.setting),
            ("n", &self.n),
            ("big-n", &self.big_n),
            ("nl-param", &self.nl_param),
            ("jobs", &self.jobs),
            ("out", &self.out),
            ("format", &self.format),
            ("log1p-cols", &self.log1p_cols),
        ];
        pairs
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect()
    }
}

/// Parses a flat `key=value` file; `#` starts a comment line.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        return parse_report_config(trimmed);
    }
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            EaseError::Config(format!("config line {}: expected key=value", i + 1))
        })?;
        let key = k.trim().to_string();
        check_key(&key)?;
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

fn parse_report_config(text: &str) -> Result<BTreeMap<String, String>> {
    let v: Value =
        serde_json::from_str(text).map_err(|e| EaseError::Config(format!("config json: {e}")))?;
    let obj = v
        .get("config")
        .and_then(Value::as_object)
        .ok_or_else(|| EaseError::Config("json config has no 'config' object".into()))?;
    let mut out = BTreeMap::new();
    for (k, v) in obj {
        check_key(k)?;
        let s = match v {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        out.insert(k.clone(), s);
    }
    Ok(out)
}

fn check_key(key: &str) -> Result<()> {
    if KEYS.contains(&key) {
        Ok(())
    } else {
        Err(EaseError::Config(format!("unknown config key '{key}'")))
    }
}

/// Raw settings after merging the config file and flags.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn from_flags(flags: &Flags) -> Result<Self> {
        let mut values = match &flags.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    EaseError::Config(format!("cannot read config {}: {e}", path.display()))
                })?;
                parse_config_text(&text)?
            }
            None => BTreeMap::new(),
        };
        values.extend(flags.to_map());
        Ok(Self { values })
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| EaseError::Config(format!("invalid value '{s}' for {key}"))),
        }
    }

    fn list(&self, key: &str) -> Vec<String> {
        self.raw(key)
            .map(|s| {
                s.split(',')
                    .map(|t| t.trim().to_string())
                    .filter(|t| !t.is_empty())
                    .collect()
            })
            .unwrap_or_default()
    }

    fn seed(&self) -> Result<u64> {
        if let Some(s) = self.raw("seed") {
            return s
                .parse()
                .map_err(|_| EaseError::Config(format!("invalid seed '{s}'")));
        }
        match std::env::var("EASE_SEED") {
            Ok(s) => s
                .trim()
                .parse()
                .map_err(|_| EaseError::Config(format!("invalid EASE_SEED '{s}'"))),
            Err(_) => Ok(DEFAULT_SEED),
        }
    }

    fn jobs(&self) -> Result<usize> {
        let default = std::thread::available_parallelism().map_or(1, |n| n.get());
        let j: usize = self.parse("jobs", default)?;
        if j == 0 {
            return Err(EaseError::Config("jobs must be at least 1".into()));
        }
        Ok(j)
    }

    fn format(&self, default: &str) -> Result<String> {
        let f = self.raw("format").unwrap_or(default).to_string();
        match f.as_str() {
            "json" | "csv" => Ok(f),
            other => Err(EaseError::Config(format!("unknown format '{other}'"))),
        }
    }

    fn out(&self) -> Option<PathBuf> {
        self.raw("out").map(PathBuf::from)
    }
}

/// Estimation settings shared by `fit` and `predict`.
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub labeled: String,
    pub unlabeled: Option<String>,
    pub methods: Vec<Method>,
    pub smoother: String,
    pub dimred: String,
    pub r: usize,
    pub slices: usize,
    pub folds: usize,
    pub kernel_order: u32,
    pub bandwidth: Option<f64>,
    pub level: f64,
    pub seed: u64,
    pub log1p: Vec<String>,
}

fn parse_methods(list: &[String]) -> Result<Vec<Method>> {
    let mut out = Vec::new();
    for m in list {
        let method = match m.as_str() {
            "ols" => Method::Ols,
            "np" => Method::Np,
            "snp" => Method::Snp,
            "ease" => Method::Ease,
            other => return Err(EaseError::Config(format!("unknown method '{other}'"))),
        };
        if !out.contains(&method) {
            out.push(method);
        }
    }
    if out.is_empty() {
        return Err(EaseError::Config("no method requested".into()));
    }
    Ok(out)
}

fn validate_level(level: f64) -> Result<f64> {
    if level > 0.0 && level < 1.0 {
        Ok(level)
    } else {
        Err(EaseError::Config(format!(
            "level {level} must lie in (0, 1)"
        )))
    }
}

impl FitConfig {
    pub fn resolve(s: &Settings) -> Result<Self> {
        let labeled = s
            .raw("labeled")
            .ok_or_else(|| EaseError::Config("--labeled is required".into()))?
            .to_string();
        let methods_raw = s.list("method");
        let methods = if methods_raw.is_empty() {
            vec![Method::Ols, Method::Snp, Method::Ease]
        } else {
            parse_methods(&methods_raw)?
        };
        let smoother = s.raw("smoother").unwrap_or("ks").to_string();
        if !matches!(smoother.as_str(), "ks" | "km") {
            return Err(EaseError::Config(format!("unknown smoother '{smoother}'")));
        }
        let dimred = s.raw("dimred").unwrap_or("auto").to_string();
        if !matches!(
            dimred.as_str(),
            "auto" | "identity" | "pca" | "sir" | "ss-sir"
        ) {
            return Err(EaseError::Config(format!(
                "unknown dimension reduction '{dimred}'"
            )));
        }
        let bandwidth = match s.raw("bandwidth").unwrap_or("cv") {
            "cv" => None,
            v => match v.parse::<f64>() {
                Ok(h) if h > 0.0 && h.is_finite() => Some(h),
                _ => return Err(EaseError::Config(format!("invalid bandwidth '{v}'"))),
            },
        };
        let cfg = Self {
            labeled,
            unlabeled: s.raw("unlabeled").map(str::to_string),
            methods,
            smoother,
            dimred,
            r: s.parse("r", 2)?,
            slices: s.parse("slices", 100)?,
            folds: s.parse("folds", 5)?,
            kernel_order: s.parse("kernel-order", 2)?,
            bandwidth,
            level: validate_level(s.parse("level", 0.95)?)?,
            seed: s.seed()?,
            log1p: s.list("log1p-cols"),
        };
        if cfg.r == 0 || cfg.slices == 0 || cfg.folds == 0 {
            return Err(EaseError::Config(
                "r, slices and folds must be positive".into(),
            ));
        }
        KernelSpec::gaussian(cfg.kernel_order, 1)?;
        Ok(cfg)
    }

    /// `dimred` with `auto` replaced by its value for `p` covariates.
    pub fn resolved_dimred(&self, p: usize) -> &str {
        match self.dimred.as_str() {
            "auto" if p > self.r && self.smoother == "ks" => "sir",
            "auto" => "identity",
            other => other,
        }
    }

    pub fn pipeline(&self, p: usize) -> Result<PipelineConfig> {
        let smoother = match self.smoother.as_str() {
            "km" => SmootherPolicy::km(),
            _ => SmootherPolicy::LocalConstant {
                kernel: KernelSpec::gaussian(self.kernel_order, 1)?,
                bandwidth: match self.bandwidth {
                    Some(h) => BandwidthPolicy::Fixed(h),
                    None => BandwidthPolicy::default(),
                },
            },
        };
        let scheme = SliceScheme::equal_width(self.slices);
        let dimred = match self.resolved_dimred(p) {
            "identity" => DimRedPolicy::Identity,
            "pca" => DimRedPolicy::Pca { r: self.r },
            "sir" => DimRedPolicy::Sir { r: self.r, scheme },
            _ => DimRedPolicy::SsSir { r: self.r, scheme },
        };
        Ok(PipelineConfig {
            smoother,
            dimred,
            k_folds: self.folds,
            seed: self.seed,
            level: self.level,
            gamma: GammaChoice::UnlabeledGram,
            epsilon_n: None,
        })
    }

    pub fn echo(&self, p: usize) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("labeled".into(), self.labeled.clone());
        if let Some(u) = &self.unlabeled {
            m.insert("unlabeled".into(), u.clone());
        }
        m.insert(
            "method".into(),
            self.methods
                .iter()
                .map(|m| m.as_str())
                .collect::<Vec<_>>()
                .join(","),
        );
        m.insert("smoother".into(), self.smoother.clone());
        m.insert("dimred".into(), self.resolved_dimred(p).to_string());
        m.insert("r".into(), self.r.to_string());
        m.insert("slices".into(), self.slices.to_string());
        m.insert("folds".into(), self.folds.to_string());
        m.insert("kernel-order".into(), self.kernel_order.to_string());
        m.insert(
            "bandwidth".into(),
            self.bandwidth.map_or("cv".to_string(), |h| h.to_string()),
        );
        m.insert("level".into(), self.level.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m.insert("log1p-cols".into(), self.log1p.join(","));
        m
    }

    pub fn load(&self) -> Result<SemiSupervisedDataset> {
        load_data(&self.labeled, self.unlabeled.as_deref(), &self.log1p)
    }
}

fn open(path: &str) -> Result<File> {
    File::open(path)
        .map_err(|e| EaseError::Io(std::io::Error::new(e.kind(), format!("{path}: {e}"))))
}

fn load_data(
    labeled: &str,
    unlabeled: Option<&str>,
    log1p: &[String],
) -> Result<SemiSupervisedDataset> {
    let schema = Schema {
        log1p: log1p.to_vec(),
        ..Schema::default()
    };
    match unlabeled {
        Some(u) => load_split(open(labeled)?, open(u)?, &schema),
        None => load_dataset(open(labeled)?, &schema),
    }
}

fn coordinate_names(data: &SemiSupervisedDataset) -> Vec<String> {
    std::iter::once(design_column_name(0))
        .chain(data.names().iter().cloned())
        .collect()
}

struct Fitted {
    pipeline: Option<PipelineResult>,
    np: Option<Vec<f64>>,
    ols: crate::estimators::ThetaEstimate,
    ols_se: Vec<f64>,
}

fn fit_all(cfg: &FitConfig, data: &SemiSupervisedDataset) -> Result<Fitted> {
    let needs_pipeline = cfg
        .methods
        .iter()
        .any(|m| matches!(m, Method::Snp | Method::Ease));
    let pipeline = if needs_pipeline {
        Some(run_pipeline(data, &cfg.pipeline(data.p())?)?)
    } else {
        None
    };
    let (ols, ols_se) = match &pipeline {
        Some(p) => (p.ols.clone(), p.ols_se.clone()),
        None => {
            let ols = crate::estimators::fit_ols(data)?;
            let se = crate::inference::ols_sandwich_se(data, &ols)?;
            (ols, se)
        }
    };
    let np = if cfg.methods.contains(&Method::Np) {
        let kernel = KernelSpec::gaussian(cfg.kernel_order, data.p())?;
        Some(
            fit_np(data, kernel, cfg.bandwidth)?
                .theta
                .iter()
                .copied()
                .collect(),
        )
    } else {
        None
    };
    Ok(Fitted {
        pipeline,
        np,
        ols,
        ols_se,
    })
}

fn method_block(theta: &[f64], se: Option<&[f64]>, z: f64) -> Value {
    match se {
        Some(se) => json!({
            "theta": theta,
            "se": se,
            "ci": theta.iter().zip(se).map(|(t, s)| [t - z * s, t + z * s]).collect::<Vec<_>>(),
        }),
        None => json!({ "theta": theta }),
    }
}

/// The JSON report for `fit`.
pub fn fit_report(cfg: &FitConfig, data: &SemiSupervisedDataset) -> Result<Value> {
    let fitted = fit_all(cfg, data)?;
    let z = crate::inference::z_quantile(cfg.level)?;
    let ols_theta: Vec<f64> = fitted.ols.theta.iter().copied().collect();
    let mut estimates = serde_json::Map::new();
    let mut efficiency = serde_json::Map::new();
    estimates.insert(
        "ols".into(),
        method_block(&ols_theta, Some(&fitted.ols_se), z),
    );
    let mut extra = serde_json::Map::new();
    if let Some(p) = &fitted.pipeline {
        let ols_var = p.ease_report.sigma_ols.trace();
        for (method, est, rep) in [
            (Method::Snp, &p.snp, &p.snp_report),
            (Method::Ease, &p.ease, &p.ease_report),
        ] {
            if !cfg.methods.contains(&method) {
                continue;
            }
            let theta: Vec<f64> = est.theta.iter().copied().collect();
            estimates.insert(
                method.as_str().into(),
                method_block(&theta, Some(&rep.se), z),
            );
            let var = match method {
                Method::Snp => rep.sigma_mu.trace(),
                _ => rep.sigma_ease.trace(),
            };
            efficiency.insert(method.as_str().into(), json!(ols_var / var));
        }
        extra.insert("delta".into(), json!(p.ease_report.delta));
        extra.insert("epsilon_n".into(), json!(p.ease_report.epsilon_n));
        extra.insert(
            "smoothers".into(),
            Value::Array(p.model.fits.iter().map(|f| f.describe()).collect()),
        );
        extra.insert(
            "eta".into(),
            json!(p.model.eta.eta.iter().copied().collect::<Vec<_>>()),
        );
    }
    if let Some(np) = &fitted.np {
        estimates.insert("np".into(), method_block(np, None, z));
    }
    let primary = cfg.methods.last().expect("non-empty").as_str();
    let primary_block = estimates[primary].clone();
    let mut report = json!({
        "schema": SCHEMA_VERSION,
        "command": "fit",
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg.echo(data.p()),
        "seed": cfg.seed,
        "data": { "n": data.n(), "big_n": data.big_n(), "p": data.p() },
        "coordinates": coordinate_names(data),
        "method": primary,
        "theta": primary_block["theta"],
        "estimates": estimates,
        "relative_efficiency": efficiency,
        "level": cfg.level,
    });
    if let Some(se) = primary_block.get("se") {
        report["se"] = se.clone();
        report["ci"] = primary_block["ci"].clone();
    }
    let obj = report.as_object_mut().expect("object");
    obj.extend(extra);
    Ok(report)
}

/// Prediction table for `predict`: one row per target row.
pub struct Predictions {
    pub columns: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub target: &'static str,
}

pub fn predictions(cfg: &FitConfig, data: &SemiSupervisedDataset) -> Result<Predictions> {
    let fitted = fit_all(cfg, data)?;
    let (x, target) = if data.big_n() > 0 {
        (data.unlabeled_x().clone(), "unlabeled")
    } else {
        (data.labeled_x().clone(), "labeled")
    };
    let design = augment(&x);
    let mut columns = vec!["ols".to_string()];
    let mut values = vec![(&design * &fitted.ols.theta)
        .iter()
        .copied()
        .collect::<Vec<_>>()];
    if let Some(p) = &fitted.pipeline {
        for (method, est) in [(Method::Snp, &p.snp), (Method::Ease, &p.ease)] {
            if cfg.methods.contains(&method) {
                columns.push(method.as_str().into());
                values.push((&design * &est.theta).iter().copied().collect());
            }
        }
        columns.push("mu".into());
        values.push(impute_mu(&p.model, &x).iter().copied().collect());
    }
    if let Some(np) = &fitted.np {
        let theta = nalgebra::DVector::from_column_slice(np);
        columns.push("np".into());
        values.push((&design * theta).iter().copied().collect());
    }
    Ok(Predictions {
        columns,
        values,
        target,
    })
}

/// Settings for `simulate`.
#[derive(Debug, Clone)]
pub struct SimulateConfig {
    pub spec: DgpSpec,
    pub roster: Vec<crate::simulation::EstimatorId>,
    pub mc: McConfig,
    pub reps: usize,
    pub seed: u64,
}

impl SimulateConfig {
    pub fn resolve(s: &Settings) -> Result<Self> {
        let model: Model = s.raw("model").unwrap_or("nl1c").parse()?;
        let is_p2 = matches!(model, Model::P2Linear | Model::P2Nli | Model::P2Nlq);
        let p: usize = s.parse("p", if is_p2 { 2 } else { 10 })?;
        let setting: Setting = s.raw("setting").unwrap_or("1").parse()?;
        let nl_param = match model {
            Model::P2Nli | Model::P2Nlq => Some(s.parse("nl-param", 1.0)?),
            _ => None,
        };
        let spec = DgpSpec::new(model, p, setting, nl_param)?;
        let roster = parse_roster(s.raw("method").unwrap_or(if p <= 2 {
            "ols,np,snp-ks-id,ease-ks-id,snp-km,ease-km"
        } else {
            "ols,np,snp-ks-sir,ease-ks-sir,snp-km,ease-km"
        }))?;
        let kernel_order: u32 = s.parse("kernel-order", 2)?;
        let bandwidth = match s.raw("bandwidth").unwrap_or("cv") {
            "cv" => BandwidthPolicy::default(),
            v => match v.parse::<f64>() {
                Ok(h) if h > 0.0 && h.is_finite() => BandwidthPolicy::Fixed(h),
                _ => return Err(EaseError::Config(format!("invalid bandwidth '{v}'"))),
            },
        };
        let mc = McConfig {
            n: s.parse("n", 500)?,
            big_n: s.parse("big-n", 10_000)?,
            k_folds: s.parse("folds", 5)?,
            r: s.parse("r", 2)?,
            slices: s.parse("slices", 100)?,
            level: validate_level(s.parse("level", 0.95)?)?,
            ks: SmootherPolicy::LocalConstant {
                kernel: KernelSpec::gaussian(kernel_order, 1)?,
                bandwidth,
            },
            km: SmootherPolicy::km(),
            np_kernel_order: kernel_order,
            jobs: s.jobs()?,
            ..McConfig::default()
        };
        if mc.n == 0 || mc.k_folds == 0 || mc.r == 0 || mc.slices == 0 {
            return Err(EaseError::Config(
                "n, folds, r and slices must be positive".into(),
            ));
        }
        let reps: usize = s.parse("reps", 500)?;
        if reps < 2 {
            return Err(EaseError::Config("reps must be at least 2".into()));
        }
        Ok(Self {
            spec,
            roster,
            mc,
            reps,
            seed: s.seed()?,
        })
    }

    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("model".into(), self.spec.model.to_string());
        m.insert("p".into(), self.spec.p.to_string());
        m.insert(
            "setting".into(),
            match self.spec.setting {
                Setting::One => "1",
                Setting::Two => "2",
            }
            .into(),
        );
        if let Some(v) = self.spec.nl_param {
            m.insert("nl-param".into(), v.to_string());
        }
        m.insert(
            "method".into(),
            self.roster
                .iter()
                .map(|e| e.as_str())
                .collect::<Vec<_>>()
                .join(","),
        );
        m.insert("n".into(), self.mc.n.to_string());
        m.insert("big-n".into(), self.mc.big_n.to_string());
        m.insert("folds".into(), self.mc.k_folds.to_string());
        m.insert("r".into(), self.mc.r.to_string());
        m.insert("slices".into(), self.mc.slices.to_string());
        m.insert("kernel-order".into(), self.mc.np_kernel_order.to_string());
        let bw = match &self.mc.ks {
            SmootherPolicy::LocalConstant {
                bandwidth: BandwidthPolicy::Fixed(h),
                ..
            } => h.to_string(),
            _ => "cv".into(),
        };
        m.insert("bandwidth".into(), bw);
        m.insert("level".into(), self.mc.level.to_string());
        m.insert("reps".into(), self.reps.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m
    }
}

fn summary_json(cfg: &SimulateConfig, summary: &McSummary) -> Value {
    json!({
        "schema": SCHEMA_VERSION,
        "command": "simulate",
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg.echo(),
        "seed": cfg.seed,
        "spec": summary.spec,
        "reps": summary.reps,
        "theta0": summary.theta0,
        "theta0_mc_se": summary.theta0_mc_se,
        "coordinates": coordinate_labels(summary.spec.p),
        "level": summary.level,
        "estimators": summary.estimators,
        "seeds": summary.seeds,
    })
}

fn json_bytes(v: &Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("json");
    s.push('\n');
    s.into_bytes()
}

fn write_output(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => {
            let mut f = BufWriter::new(File::create(path)?);
            f.write_all(bytes)?;
            f.flush()?;
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(bytes)?;
            stdout.flush()?;
        }
    }
    Ok(())
}

fn csv_table(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(crate::simulation::csv_err)?;
    for r in rows {
        w.write_record(r).map_err(crate::simulation::csv_err)?;
    }
    w.into_inner()
        .map_err(|e| EaseError::Io(std::io::Error::other(e.to_string())))
}

fn fit_csv(report: &Value) -> Result<Vec<u8>> {
    let coords: Vec<String> = serde_json::from_value(report["coordinates"].clone()).expect("names");
    let header: Vec<String> = [
        "method",
        "coordinate",
        "estimate",
        "se",
        "ci_lower",
        "ci_upper",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut rows = Vec::new();
    let cell = |v: &Value| v.as_f64().map_or("NA".to_string(), |x| x.to_string());
    for (method, block) in report["estimates"].as_object().expect("estimates") {
        for (j, name) in coords.iter().enumerate() {
            rows.push(vec![
                method.clone(),
                name.clone(),
                cell(&block["theta"][j]),
                cell(&block["se"][j]),
                cell(&block["ci"][j][0]),
                cell(&block["ci"][j][1]),
            ]);
        }
    }
    csv_table(&header, &rows)
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| EaseError::Config(format!("thread pool: {e}")))?
        .install(f)
}

fn cmd_fit(s: &Settings) -> Result<()> {
    let cfg = FitConfig::resolve(s)?;
    let format = s.format("json")?;
    let jobs = s.jobs()?;
    let data = cfg.load()?;
    let report = with_pool(jobs, || fit_report(&cfg, &data))?;
    let bytes = if format == "json" {
        json_bytes(&report)
    } else {
        fit_csv(&report)?
    };
    write_output(s.out().as_deref(), &bytes)
}

fn cmd_predict(s: &Settings) -> Result<()> {
    let cfg = FitConfig::resolve(s)?;
    let format = s.format("csv")?;
    let jobs = s.jobs()?;
    let data = cfg.load()?;
    let preds = with_pool(jobs, || predictions(&cfg, &data))?;
    let bytes = if format == "json" {
        let cols: serde_json::Map<String, Value> = preds
            .columns
            .iter()
            .zip(&preds.values)
            .map(|(c, v)| (c.clone(), json!(v)))
            .collect();
        json_bytes(&json!({
            "schema": SCHEMA_VERSION,
            "command": "predict",
            "version": env!("CARGO_PKG_VERSION"),
            "config": cfg.echo(data.p()),
            "target": preds.target,
            "predictions": cols,
        }))
    } else {
        let header: Vec<String> = std::iter::once("row".to_string())
            .chain(preds.columns.clone())
            .collect();
        let rows: Vec<Vec<String>> = (0..preds.values[0].len())
            .map(|i| {
                std::iter::once((i + 1).to_string())
                    .chain(preds.values.iter().map(|c| c[i].to_string()))
                    .collect()
            })
            .collect();
        csv_table(&header, &rows)?
    };
    write_output(s.out().as_deref(), &bytes)
}

fn cmd_simulate(s: &Settings) -> Result<()> {
    let cfg = SimulateConfig::resolve(s)?;
    let format = s.format("csv")?;
    let summary = monte_carlo(&cfg.spec, &cfg.roster, &cfg.mc, cfg.reps, cfg.seed)?;
    match s.out() {
        Some(dir) => {
            std::fs::create_dir_all(&dir)?;
            write_table1_csv(
                &summary,
                BufWriter::new(File::create(dir.join("table1.csv"))?),
            )?;
            write_table2_csv(
                &summary,
                BufWriter::new(File::create(dir.join("table2.csv"))?),
            )?;
            write_seeds_csv(
                &summary,
                BufWriter::new(File::create(dir.join("seeds.csv"))?),
            )?;
            write_output(
                Some(&dir.join("summary.json")),
                &json_bytes(&summary_json(&cfg, &summary)),
            )
        }
        None if format == "json" => write_output(None, &json_bytes(&summary_json(&cfg, &summary))),
        None => write_table1_csv(&summary, std::io::stdout().lock()),
    }
}

fn cmd_diagnose(s: &Settings) -> Result<()> {
    let labeled = s
        .raw("labeled")
        .ok_or_else(|| EaseError::Config("--labeled is required".into()))?;
    let format = s.format("csv")?;
    let log1p = s.list("log1p-cols");
    let data = load_data(labeled, s.raw("unlabeled"), &log1p)?;
    let report = mcar_tests(&data)?;
    let bytes = if format == "json" {
        let mut config = BTreeMap::new();
        config.insert("labeled".to_string(), labeled.to_string());
        if let Some(u) = s.raw("unlabeled") {
            config.insert("unlabeled".to_string(), u.to_string());
        }
        config.insert("log1p-cols".to_string(), log1p.join(","));
        json_bytes(&json!({
            "schema": SCHEMA_VERSION,
            "command": "diagnose",
            "version": env!("CARGO_PKG_VERSION"),
            "config": config,
            "report": report,
        }))
    } else {
        let mut buf = Vec::new();
        report.write_csv(&mut buf)?;
        buf
    };
    write_output(s.out().as_deref(), &bytes)
}

pub fn exit_code(e: &EaseError) -> i32 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numerical => 4,
    }
}

/// Runs one command and returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Fit(f) => Settings::from_flags(f).and_then(|s| cmd_fit(&s)),
        Command::Predict(f) => Settings::from_flags(f).and_then(|s| cmd_predict(&s)),
        Command::Simulate(f) => Settings::from_flags(f).and_then(|s| cmd_simulate(&s)),
        Command::Diagnose(f) => Settings::from_flags(f).and_then(|s| cmd_diagnose(&s)),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let reason = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {reason}", e.tag());
            exit_code(&e)
        }
    }
}
