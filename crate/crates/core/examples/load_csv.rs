//! Loads a single table in which blank or NA outcomes mark unlabeled rows,
//! then compares OLS with the combined estimator.
//!
//! cargo run --release --example load_csv

use ease::data::{load_dataset, Schema};
use ease::inference::{run_pipeline, GammaChoice, PipelineConfig};
use ease::smoothing::{DimRedPolicy, SmootherPolicy};

fn main() -> ease::Result<()> {
    let mut text = String::from("y,income,age\n");
    for i in 0..400u32 {
        let income = ((i * 37) % 101) as f64 / 10.0;
        let age = 20.0 + ((i * 13) % 47) as f64;
        let y = 0.5 * income + 0.02 * age + (income / 3.0).sin();
        if i % 4 == 0 {
            text += &format!("{y:.4},{income},{age}\n");
        } else {
            text += &format!("NA,{income},{age}\n");
        }
    }
    let schema = Schema {
        log1p: vec!["income".into()],
        ..Schema::default()
    };
    let data = load_dataset(text.as_bytes(), &schema)?;
    println!(
        "labeled {}  unlabeled {}  covariates {:?}",
        data.n(),
        data.big_n(),
        data.names()
    );
    let fit = run_pipeline(
        &data,
        &PipelineConfig {
            smoother: SmootherPolicy::ks(),
            dimred: DimRedPolicy::Identity,
            k_folds: 5,
            seed: 4,
            level: 0.95,
            gamma: GammaChoice::UnlabeledGram,
            epsilon_n: None,
        },
    )?;
    println!("ols  {:.4?}", fit.ols.theta.as_slice());
    println!("ease {:.4?}", fit.ease.theta.as_slice());
    println!("ease 95% intervals {:.4?}", fit.ease_report.ci);
    Ok(())
}
