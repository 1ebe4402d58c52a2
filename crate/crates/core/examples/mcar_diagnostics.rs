//! Checks whether labels are missing completely at random: per-covariate
//! Welch and rank-sum tests plus a logistic propensity model.
//!
//! cargo run --example mcar_diagnostics

use ease::data::SemiSupervisedDataset;
use ease::diagnostics::mcar_tests;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> ease::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut z = || -> f64 { StandardNormal.sample(&mut rng) };
    // The second covariate is shifted among labeled rows.
    let x = DMatrix::from_fn(400, 3, |_, j| z() + if j == 1 { 0.4 } else { 0.0 });
    let u = DMatrix::from_fn(2000, 3, |_, _| z());
    let y = DVector::from_fn(400, |i, _| x[(i, 0)] + z());
    let data = SemiSupervisedDataset::new(y, x, u)?;
    let report = mcar_tests(&data)?;
    let fmt = |p: Option<f64>| p.map_or("NA".to_string(), |v| format!("{v:.2e}"));
    println!("propensity fit: {:?}", report.propensity.status);
    for c in &report.covariates {
        println!(
            "{:<4} mean {:+.3} vs {:+.3}  welch p {}  rank-sum p {}  propensity p {}",
            c.name,
            c.labeled_mean,
            c.unlabeled_mean,
            fmt(c.welch.as_ref().map(|w| w.p_value)),
            fmt(c.rank_sum.as_ref().map(|w| w.p_value)),
            fmt(c.propensity_p)
        );
    }
    Ok(())
}
