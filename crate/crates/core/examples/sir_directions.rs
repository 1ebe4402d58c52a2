//! Recovers the index direction of a single-index model with SIR and with
//! semi-supervised SIR.
//!
//! cargo run --release --example sir_directions

use ease::dimred::{sir_directions, ss_sir_directions, SliceScheme};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> ease::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = 6;
    let beta = DVector::from_vec(vec![1.0, -1.0, 0.0, 0.0, 0.5, 0.0]).normalize();
    let mut draw = |rows: usize| DMatrix::from_fn(rows, p, |_, _| StandardNormal.sample(&mut rng));
    let x = draw(300);
    let u = draw(5000);
    let y = DVector::from_fn(300, |i, _| {
        let t = x.row(i).transpose().dot(&beta);
        t * t * t + 0.2 * t
    });
    let scheme = SliceScheme::equal_width(20);
    for (label, basis) in [
        ("sir", sir_directions(&x, &y, 1, &scheme)?),
        ("ss-sir", ss_sir_directions(&x, &y, &u, 1, &scheme)?),
    ] {
        let d = basis.matrix.column(0);
        let cos = (d.dot(&beta) / d.norm()).abs();
        println!(
            "{label:<7} |cos| = {cos:.4}  eigenvalue = {:.4}",
            basis.eigenvalues[0]
        );
    }
    Ok(())
}
