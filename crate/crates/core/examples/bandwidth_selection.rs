//! Cross-validated bandwidth for a one-dimensional local-constant smoother.
//!
//! cargo run --example bandwidth_selection

use ease::kernels::{default_grid, local_constant, select_bandwidth, KernelSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> ease::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 200;
    let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|v| (4.0 * v).sin() + 0.3 * rng.gen_range(-1.0..1.0))
        .collect();
    let spec = KernelSpec::gaussian(2, 1)?;
    let grid = default_grid(n, 2, 1);
    let choice = select_bandwidth(&x, &y, &spec, &grid, 5, 1)?;
    for (h, e) in choice.grid.iter().zip(&choice.cv_errors) {
        println!(
            "h = {h:.4}  cv = {e:.5}{}",
            if *h == choice.h { "  <- selected" } else { "" }
        );
    }
    for t in [-0.5, 0.0, 0.5] {
        let fit = local_constant(&spec, &x, &y, choice.h, &[t]).unwrap_or(f64::NAN);
        println!(
            "m({t:+.1}) = {fit:.3}  (sin(4x) = {:.3})",
            (4.0f64 * t).sin()
        );
    }
    Ok(())
}
