//! Hold-out prediction error of OLS, the imputation function and the
//! linear fits it induces, relative to the outcome variance.
//!
//! cargo run --release --example prediction_error -- [model]

use ease::inference::{GammaChoice, PipelineConfig};
use ease::simulation::{generate_data, prediction_error_cv, DgpSpec, Model, Predictor, Setting};
use ease::smoothing::{DimRedPolicy, SmootherPolicy};

fn main() -> ease::Result<()> {
    let model: Model = std::env::args()
        .nth(1)
        .as_deref()
        .unwrap_or("nl2c")
        .parse()?;
    let spec = DgpSpec::new(model, 10, Setting::One, None)?;
    let data = generate_data(&spec, 500, 2000, 21)?;
    let y = data.labeled_y();
    let var = y.variance() * y.len() as f64 / (y.len() as f64 - 1.0);
    let km = PipelineConfig {
        smoother: SmootherPolicy::km(),
        dimred: DimRedPolicy::Identity,
        k_folds: 5,
        seed: 1,
        level: 0.95,
        gamma: GammaChoice::UnlabeledGram,
        epsilon_n: None,
    };
    for (label, predictor) in [
        ("ols", Predictor::Ols),
        ("ease (km)", Predictor::EaseLinear(km.clone())),
        ("mu (km)", Predictor::Mu(km)),
    ] {
        let pe = prediction_error_cv(&data, &predictor, 100, 2, 3)?;
        println!("{label:<10} PE/Var(Y) = {:.3}", pe / var);
    }
    Ok(())
}
