//! Gaussian kernel ridge regression tuned by leave-one-out error.
//!
//! cargo run --release --example kernel_ridge

use ease::smoothing::{fit_kernel_ridge, tune_kernel_ridge};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> ease::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 300;
    let x = DMatrix::from_fn(n, 2, |_, _| rng.gen_range(-2.0..2.0));
    let truth = |a: f64, b: f64| a * b + (2.0 * a).cos();
    let y = DVector::from_fn(n, |i, _| {
        truth(x[(i, 0)], x[(i, 1)]) + 0.2 * rng.gen_range(-1.0..1.0)
    });
    let tuning = tune_kernel_ridge(&x, &y)?;
    println!(
        "lambda = {:.4}  gamma = {:.4}  loo = {:.5}",
        tuning.lambda, tuning.gamma, tuning.loo_error
    );
    let fit = fit_kernel_ridge(&x, &y, tuning.lambda, tuning.gamma)?;
    let mut sq = 0.0;
    let m = 500;
    for _ in 0..m {
        let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        sq += (fit.predict(&[a, b]) - truth(a, b)).powi(2);
    }
    println!(
        "test mean squared error against the truth: {:.5}",
        sq / m as f64
    );
    Ok(())
}
