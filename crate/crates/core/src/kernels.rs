//! Kernel functions and least-squares cross-validated bandwidth selection.

use serde::{Deserialize, Serialize};

use crate::data::partition_folds;
use crate::error::{EaseError, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Raw kernel-weight sum below which a local-constant prediction falls back to
/// the nearest training point.
pub const TRIM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    Gaussian,
    GaussianHigherOrder,
    Epanechnikov,
}

/// Product kernel of a given order over `dim` coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub order: u32,
    pub dim: usize,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, order: u32, dim: usize) -> Result<Self> {
        let ok = match family {
            KernelFamily::Gaussian => order == 2,
            KernelFamily::GaussianHigherOrder => matches!(order, 2 | 4 | 6),
            KernelFamily::Epanechnikov => order == 2,
        };
        if !ok {
            return Err(EaseError::Config(format!(
                "kernel order {order} is not available for the {family:?} family"
            )));
        }
        if dim == 0 {
            return Err(EaseError::Config(
                "kernel dimension must be positive".into(),
            ));
        }
        Ok(Self { family, order, dim })
    }

    /// Gaussian-based kernel of order `q` (2, 4 or 6).
    pub fn gaussian(order: u32, dim: usize) -> Result<Self> {
        let family = if order == 2 {
            KernelFamily::Gaussian
        } else {
            KernelFamily::GaussianHigherOrder
        };
        Self::new(family, order, dim)
    }

    pub fn with_dim(self, dim: usize) -> Self {
        Self { dim, ..self }
    }

    /// Radially symmetric kernels depend on `z` only through `|z|`.
    pub fn is_radial(&self) -> bool {
        self.family == KernelFamily::Gaussian
            || (self.family == KernelFamily::GaussianHigherOrder && self.order == 2)
    }

    /// Univariate factor `k(z)`.
    #[inline]
    pub fn univariate(&self, z: f64) -> f64 {
        match self.family {
            KernelFamily::Epanechnikov => {
                if z.abs() <= 1.0 {
                    0.75 * (1.0 - z * z)
                } else {
                    0.0
                }
            }
            KernelFamily::Gaussian | KernelFamily::GaussianHigherOrder => {
                let z2 = z * z;
                let phi = INV_SQRT_2PI * (-0.5 * z2).exp();
                match self.order {
                    4 => 0.5 * (3.0 - z2) * phi,
                    6 => (15.0 - 10.0 * z2 + z2 * z2) * phi / 8.0,
                    _ => phi,
                }
            }
        }
    }

    /// Product kernel at `z`, without checking the dimension.
    #[inline]
    pub fn weight(&self, z: &[f64]) -> f64 {
        if self.is_radial() {
            let d2: f64 = z.iter().map(|v| v * v).sum();
            return INV_SQRT_2PI.powi(z.len() as i32) * (-0.5 * d2).exp();
        }
        z.iter().map(|&v| self.univariate(v)).product()
    }
}

/// `K(z)` for a length-`dim` argument.
pub fn kernel_eval(spec: &KernelSpec, z: &[f64]) -> Result<f64> {
    if z.len() != spec.dim {
        return Err(EaseError::DimensionMismatch {
            expected: spec.dim,
            got: z.len(),
        });
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(EaseError::InvalidData(
            "kernel argument must be finite".into(),
        ));
    }
    Ok(spec.weight(z))
}

/// Index of the training row nearest to `point` in squared Euclidean
/// distance; ties go to the lower index.
pub fn nearest_row(train: &[f64], dim: usize, point: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, row) in train.chunks_exact(dim).enumerate() {
        let d: f64 = row.iter().zip(point).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

/// Nadaraya-Watson estimate at `point` from row-major training scores.
/// Falls back to the nearest training outcome when the kernel-weight sum is
/// below [`TRIM_FLOOR`]; `None` only when there are no training rows.
pub fn local_constant(
    spec: &KernelSpec,
    train: &[f64],
    y: &[f64],
    h: f64,
    point: &[f64],
) -> Option<f64> {
    let dim = point.len();
    if y.is_empty() {
        return None;
    }
    // offsets relative to y[0]
    let base = y[0];
    let mut num = 0.0;
    let mut den = 0.0;
    let mut z = vec![0.0; dim];
    for (row, &yi) in train.chunks_exact(dim).zip(y) {
        for c in 0..dim {
            z[c] = (point[c] - row[c]) / h;
        }
        let w = spec.weight(&z);
        num += w * (yi - base);
        den += w;
    }
    let pred = base + num / den;
    if den < TRIM_FLOOR || !pred.is_finite() {
        return nearest_row(train, dim, point).map(|i| y[i]);
    }
    Some(pred)
}

/// Outcome of a bandwidth search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthChoice {
    pub h: f64,
    pub cv_error: f64,
    /// Candidates in descending order.
    pub grid: Vec<f64>,
    /// CV error for each entry of `grid`; infinite where undefined.
    pub cv_errors: Vec<f64>,
}

/// Number of points in the default bandwidth grid.
pub const GRID_POINTS: usize = 13;

/// Geometric grid `c * 4^((i-6)/6)`, `i = 0..13`, centred on `c = n^(-1/(2q+r))`.
pub fn default_grid(n: usize, order: u32, r: usize) -> Vec<f64> {
    let c = (n as f64).powf(-1.0 / (2.0 * order as f64 + r as f64));
    (0..GRID_POINTS)
        .map(|i| c * 4f64.powf((i as f64 - 6.0) / 6.0))
        .collect()
}

/// Cross-validated squared prediction error of the local-constant smoother at `h`.
pub fn cv_error(
    spec: &KernelSpec,
    scores: &[f64],
    y: &[f64],
    h: f64,
    cv_folds: usize,
    seed: u64,
) -> Result<f64> {
    let dim = spec.dim;
    let n = y.len();
    let folds = partition_folds(n, cv_folds, seed)?;
    let mut sse = 0.0;
    for k in 0..folds.k() {
        let train = folds.complement(k);
        let tx: Vec<f64> = train
            .iter()
            .flat_map(|&i| scores[i * dim..(i + 1) * dim].iter().copied())
            .collect();
        let ty: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        for i in folds.members(k) {
            match local_constant(spec, &tx, &ty, h, &scores[i * dim..(i + 1) * dim]) {
                Some(pred) => sse += (y[i] - pred) * (y[i] - pred),
                None => return Ok(f64::INFINITY),
            }
        }
    }
    Ok(sse / n as f64)
}

/// Picks the grid bandwidth with minimal cross-validated error over row-major
/// `scores` (`n x spec.dim`). Ties go to the largest bandwidth, and the
/// result does not depend on the order of `grid`.
pub fn select_bandwidth(
    scores: &[f64],
    y: &[f64],
    spec: &KernelSpec,
    grid: &[f64],
    cv_folds: usize,
    seed: u64,
) -> Result<BandwidthChoice> {
    if grid.is_empty() || grid.iter().any(|h| !(*h > 0.0) || !h.is_finite()) {
        return Err(EaseError::Config(
            "bandwidth grid must be non-empty and positive".into(),
        ));
    }
    if scores.len() != y.len() * spec.dim {
        return Err(EaseError::DimensionMismatch {
            expected: y.len() * spec.dim,
            got: scores.len(),
        });
    }
    if y.len() < cv_folds.max(2) {
        return Err(EaseError::InfeasiblePartition {
            n: y.len(),
            k: cv_folds,
        });
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite grid"));
    sorted.dedup();
    let mut errors = Vec::with_capacity(sorted.len());
    let mut best: Option<(f64, f64)> = None;
    for &h in &sorted {
        let e = cv_error(spec, scores, y, h, cv_folds, seed)?;
        errors.push(e);
        if e.is_finite() && best.map_or(true, |(_, be)| e < be) {
            best = Some((h, e));
        }
    }
    let (h, cv_error) = best.ok_or(EaseError::NoValidBandwidth)?;
    Ok(BandwidthChoice {
        h,
        cv_error,
        grid: sorted,
        cv_errors: errors,
    })
}
