//! Dataset containers, fold partitioning and covariate standardization.

use std::io::Read;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EaseError, Result};
use crate::linalg::{ordered_sum, select_entries, select_rows};

/// Labeled pairs `(Y_i, X_i)` together with unlabeled covariate rows `X_j`.
#[derive(Debug, Clone)]
pub struct SemiSupervisedDataset {
    labeled_y: DVector<f64>,
    labeled_x: DMatrix<f64>,
    unlabeled_x: DMatrix<f64>,
    names: Vec<String>,
}

impl SemiSupervisedDataset {
    pub fn new(
        labeled_y: DVector<f64>,
        labeled_x: DMatrix<f64>,
        unlabeled_x: DMatrix<f64>,
    ) -> Result<Self> {
        let p = labeled_x.ncols();
        let names = (1..=p).map(|j| format!("x{j}")).collect();
        Self::with_names(labeled_y, labeled_x, unlabeled_x, names)
    }

    pub fn with_names(
        labeled_y: DVector<f64>,
        labeled_x: DMatrix<f64>,
        unlabeled_x: DMatrix<f64>,
        names: Vec<String>,
    ) -> Result<Self> {
        let p = labeled_x.ncols();
        if labeled_y.is_empty() {
            return Err(EaseError::EmptyLabeled);
        }
        if labeled_x.nrows() != labeled_y.len() {
            return Err(EaseError::DimensionMismatch {
                expected: labeled_y.len(),
                got: labeled_x.nrows(),
            });
        }
        if unlabeled_x.ncols() != p && unlabeled_x.nrows() > 0 {
            return Err(EaseError::DimensionMismatch {
                expected: p,
                got: unlabeled_x.ncols(),
            });
        }
        if names.len() != p {
            return Err(EaseError::DimensionMismatch {
                expected: p,
                got: names.len(),
            });
        }
        if p == 0 {
            return Err(EaseError::InvalidData(
                "at least one covariate is required".into(),
            ));
        }
        if labeled_y
            .iter()
            .chain(labeled_x.iter())
            .chain(unlabeled_x.iter())
            .any(|v| !v.is_finite())
        {
            return Err(EaseError::InvalidData("non-finite value in dataset".into()));
        }
        let unlabeled_x = if unlabeled_x.nrows() == 0 {
            DMatrix::zeros(0, p)
        } else {
            unlabeled_x
        };
        Ok(Self {
            labeled_y,
            labeled_x,
            unlabeled_x,
            names,
        })
    }

    pub fn labeled_y(&self) -> &DVector<f64> {
        &self.labeled_y
    }

    pub fn labeled_x(&self) -> &DMatrix<f64> {
        &self.labeled_x
    }

    pub fn unlabeled_x(&self) -> &DMatrix<f64> {
        &self.unlabeled_x
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Number of labeled rows.
    pub fn n(&self) -> usize {
        self.labeled_y.len()
    }

    /// Number of unlabeled rows.
    pub fn big_n(&self) -> usize {
        self.unlabeled_x.nrows()
    }

    pub fn p(&self) -> usize {
        self.labeled_x.ncols()
    }

    /// Labeled subset restricted to `rows`, keeping the unlabeled block.
    pub fn labeled_subset(&self, rows: &[usize]) -> Result<Self> {
        Self::with_names(
            select_entries(&self.labeled_y, rows),
            select_rows(&self.labeled_x, rows),
            self.unlabeled_x.clone(),
            self.names.clone(),
        )
    }

    /// Same data with covariate columns reordered by `perm` (new column `j` is old column `perm[j]`).
    pub fn permute_columns(&self, perm: &[usize]) -> Result<Self> {
        let p = self.p();
        if perm.len() != p {
            return Err(EaseError::DimensionMismatch {
                expected: p,
                got: perm.len(),
            });
        }
        let lx = DMatrix::from_fn(self.n(), p, |i, j| self.labeled_x[(i, perm[j])]);
        let ux = DMatrix::from_fn(self.big_n(), p, |i, j| self.unlabeled_x[(i, perm[j])]);
        let names = perm.iter().map(|&j| self.names[j].clone()).collect();
        Self::with_names(self.labeled_y.clone(), lx, ux, names)
    }
}

/// Derives an independent stream seed from a master seed and a stream index
/// (SplitMix64 finalizer over their combination).
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random partition of `0..n` into `K` folds of near-equal size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    k_folds: usize,
    /// Fold index in `1..=K` for each observation.
    membership: Vec<usize>,
    seed: u64,
}

impl FoldAssignment {
    pub fn k(&self) -> usize {
        self.k_folds
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn membership(&self) -> &[usize] {
        &self.membership
    }

    pub fn n(&self) -> usize {
        self.membership.len()
    }

    /// Zero-based fold of observation `i`.
    pub fn fold_of(&self, i: usize) -> usize {
        self.membership[i] - 1
    }

    /// Sorted members of zero-based fold `k` (the set `I_k`).
    pub fn members(&self, k: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.fold_of(i) == k).collect()
    }

    /// Sorted training indices for zero-based fold `k`. With one fold this is every index.
    pub fn complement(&self, k: usize) -> Vec<usize> {
        if self.k_folds == 1 {
            return (0..self.n()).collect();
        }
        (0..self.n()).filter(|&i| self.fold_of(i) != k).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k_folds];
        for &m in &self.membership {
            s[m - 1] += 1;
        }
        s
    }

    /// JSON array of 1-based fold labels.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.membership).expect("integer array serializes")
    }

    /// Builds an assignment from explicit 1-based labels.
    pub fn from_membership(membership: Vec<usize>, k_folds: usize) -> Result<Self> {
        if k_folds == 0 || membership.iter().any(|&m| m == 0 || m > k_folds) {
            return Err(EaseError::Config("fold labels must lie in 1..=K".into()));
        }
        Ok(Self {
            k_folds,
            membership,
            seed: 0,
        })
    }
}

/// Shuffles `0..n` with a seeded ChaCha stream and deals the permutation into
/// `k_folds` consecutive blocks; the first `n % K` folds receive one extra row.
pub fn partition_folds(n: usize, k_folds: usize, seed: u64) -> Result<FoldAssignment> {
    if k_folds == 0 || k_folds > n {
        return Err(EaseError::InfeasiblePartition { n, k: k_folds });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let base = n / k_folds;
    let extra = n % k_folds;
    let mut membership = vec![0; n];
    let mut pos = 0;
    for fold in 0..k_folds {
        let size = base + usize::from(fold < extra);
        for &i in &order[pos..pos + size] {
            membership[i] = fold + 1;
        }
        pos += size;
    }
    Ok(FoldAssignment {
        k_folds,
        membership,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StandardizeScope {
    LabeledOnly,
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationParams {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl StandardizationParams {
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            (x[(i, j)] - self.means[j]) / self.scales[j]
        })
    }

    pub fn invert(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| {
            z[(i, j)] * self.scales[j] + self.means[j]
        })
    }
}

/// Column means and sample standard deviations over the chosen rows.
pub fn column_moments(blocks: &[&DMatrix<f64>], names: &[String]) -> Result<StandardizationParams> {
    let p = names.len();
    let count: usize = blocks.iter().map(|b| b.nrows()).sum();
    if count < 2 {
        return Err(EaseError::InvalidData(
            "standardization needs at least two rows".into(),
        ));
    }
    let mut means = Vec::with_capacity(p);
    let mut scales = Vec::with_capacity(p);
    for j in 0..p {
        let col = || {
            blocks
                .iter()
                .flat_map(move |b| b.column(j).iter().copied().collect::<Vec<_>>())
        };
        let mean = ordered_sum(col()) / count as f64;
        let var = ordered_sum(col().map(|v| (v - mean) * (v - mean))) / (count - 1) as f64;
        let sd = var.sqrt();
        if !(sd > 1e-12 * mean.abs().max(1.0)) {
            return Err(EaseError::DegenerateColumn(names[j].clone()));
        }
        means.push(mean);
        scales.push(sd);
    }
    Ok(StandardizationParams { means, scales })
}

/// Centers and scales every covariate to mean 0 and sample variance 1 within `scope`.
pub fn standardize(
    dataset: &SemiSupervisedDataset,
    scope: StandardizeScope,
) -> Result<(SemiSupervisedDataset, StandardizationParams)> {
    let params = match scope {
        StandardizeScope::LabeledOnly => column_moments(&[dataset.labeled_x()], dataset.names())?,
        StandardizeScope::Pooled => column_moments(
            &[dataset.labeled_x(), dataset.unlabeled_x()],
            dataset.names(),
        )?,
    };
    let out = SemiSupervisedDataset::with_names(
        dataset.labeled_y().clone(),
        params.apply(dataset.labeled_x()),
        params.apply(dataset.unlabeled_x()),
        dataset.names().to_vec(),
    )?;
    Ok((out, params))
}

/// Column roles for delimited input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub outcome: String,
    /// Covariate columns in order; `None` means every non-outcome column.
    pub covariates: Option<Vec<String>>,
    /// Covariates replaced by `ln(1 + x)` after parsing.
    pub log1p: Vec<String>,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            outcome: "y".into(),
            covariates: None,
            log1p: Vec::new(),
        }
    }
}

fn is_missing(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan")
}

struct ParsedTable {
    names: Vec<String>,
    labeled_y: Vec<f64>,
    labeled_x: Vec<Vec<f64>>,
    unlabeled_x: Vec<Vec<f64>>,
}

fn parse_table<R: Read>(source: R, schema: &Schema, outcome_required: bool) -> Result<ParsedTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(e, 0))?
        .iter()
        .map(str::to_string)
        .collect();
    let outcome_idx = headers.iter().position(|h| *h == schema.outcome);
    if outcome_required && outcome_idx.is_none() && !headers.is_empty() {
        return Err(EaseError::InvalidData(format!(
            "outcome column '{}' not found",
            schema.outcome
        )));
    }
    let names: Vec<String> = match &schema.covariates {
        Some(c) => c.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != outcome_idx)
            .map(|(_, h)| h.clone())
            .collect(),
    };
    let mut cov_idx = Vec::with_capacity(names.len());
    for name in &names {
        let idx = headers.iter().position(|h| h == name).ok_or_else(|| {
            EaseError::InvalidData(format!("covariate column '{name}' not found"))
        })?;
        cov_idx.push(idx);
    }
    for name in &schema.log1p {
        if !names.contains(name) {
            return Err(EaseError::Config(format!(
                "log1p column '{name}' is not a covariate"
            )));
        }
    }
    let log_mask: Vec<bool> = names.iter().map(|n| schema.log1p.contains(n)).collect();

    let mut table = ParsedTable {
        names,
        labeled_y: Vec::new(),
        labeled_x: Vec::new(),
        unlabeled_x: Vec::new(),
    };
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| csv_error(e, row))?;
        let mut x = Vec::with_capacity(cov_idx.len());
        for (c, &idx) in cov_idx.iter().enumerate() {
            let cell = record.get(idx).unwrap_or("");
            let column = table.names[c].clone();
            if is_missing(cell) {
                return Err(EaseError::Parse {
                    row,
                    column,
                    reason: "missing covariate value".into(),
                });
            }
            let mut v: f64 = cell.trim().parse().map_err(|_| EaseError::Parse {
                row,
                column: column.clone(),
                reason: format!("'{cell}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(EaseError::Parse {
                    row,
                    column,
                    reason: "non-finite value".into(),
                });
            }
            if log_mask[c] {
                if v <= -1.0 {
                    return Err(EaseError::Parse {
                        row,
                        column,
                        reason: "log1p requires values above -1".into(),
                    });
                }
                v = v.ln_1p();
            }
            x.push(v);
        }
        let y_cell = outcome_idx.and_then(|i| record.get(i)).unwrap_or("");
        if is_missing(y_cell) {
            table.unlabeled_x.push(x);
        } else {
            let y: f64 = y_cell.trim().parse().map_err(|_| EaseError::Parse {
                row,
                column: schema.outcome.clone(),
                reason: format!("'{y_cell}' is not a number"),
            })?;
            if !y.is_finite() {
                return Err(EaseError::Parse {
                    row,
                    column: schema.outcome.clone(),
                    reason: "non-finite value".into(),
                });
            }
            table.labeled_y.push(y);
            table.labeled_x.push(x);
        }
    }
    Ok(table)
}

fn csv_error(e: csv::Error, row: usize) -> EaseError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => EaseError::Io(io),
        other => EaseError::Parse {
            row,
            column: String::new(),
            reason: format!("{other:?}"),
        },
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j])
}

/// Reads one delimited table; rows whose outcome cell is blank or `NA` become unlabeled.
pub fn load_dataset<R: Read>(source: R, schema: &Schema) -> Result<SemiSupervisedDataset> {
    let t = parse_table(source, schema, false)?;
    if t.labeled_y.is_empty() {
        return Err(EaseError::EmptyLabeled);
    }
    let p = t.names.len();
    SemiSupervisedDataset::with_names(
        DVector::from_vec(t.labeled_y),
        rows_to_matrix(&t.labeled_x, p),
        rows_to_matrix(&t.unlabeled_x, p),
        t.names,
    )
}

/// Reads a labeled table and a separate covariate-only table. Any outcome
/// values present in the second table are ignored.
pub fn load_split<R1: Read, R2: Read>(
    labeled: R1,
    unlabeled: R2,
    schema: &Schema,
) -> Result<SemiSupervisedDataset> {
    let lab = parse_table(labeled, schema, false)?;
    if lab.labeled_y.is_empty() {
        return Err(EaseError::EmptyLabeled);
    }
    let unl_schema = Schema {
        covariates: Some(lab.names.clone()),
        ..schema.clone()
    };
    let unl = parse_table(unlabeled, &unl_schema, false)?;
    let p = lab.names.len();
    let mut u_rows = lab.unlabeled_x;
    u_rows.extend(unl.labeled_x);
    u_rows.extend(unl.unlabeled_x);
    SemiSupervisedDataset::with_names(
        DVector::from_vec(lab.labeled_y),
        rows_to_matrix(&lab.labeled_x, p),
        rows_to_matrix(&u_rows, p),
        lab.names,
    )
}
