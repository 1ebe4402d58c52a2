//! Small Monte Carlo study of the NL1C model at p = 10.
//!
//! cargo run --release --example monte_carlo -- [reps] [jobs]

use ease::simulation::{
    monte_carlo, parse_roster, write_table1_csv, DgpSpec, McConfig, Model, Setting,
};

fn main() -> ease::Result<()> {
    let mut args = std::env::args().skip(1);
    let reps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(4);
    let jobs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let spec = DgpSpec::new(Model::Nl1c, 10, Setting::One, None)?;
    let roster = parse_roster("ols,np,snp-ks-sir,ease-ks-sir,snp-km,ease-km")?;
    let config = McConfig {
        jobs,
        ..McConfig::default()
    };
    let start = std::time::Instant::now();
    let summary = monte_carlo(&spec, &roster, &config, reps, 2024)?;
    write_table1_csv(&summary, std::io::stdout().lock())?;
    eprintln!("{reps} replications in {:.1?}", start.elapsed());
    Ok(())
}
