//! Writes a simulated labeled CSV and an unlabeled CSV for the command-line tool.
//!
//! cargo run --example write_dataset -- <dir> [model] [n] [big_n] [seed]

use std::io::Write;

use ease::simulation::{generate_data, DgpSpec, Model, Setting};

fn main() -> ease::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let dir = std::path::PathBuf::from(args.first().map_or("data", String::as_str));
    let model: Model = args.get(1).map_or("nl2c", String::as_str).parse()?;
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(500);
    let big_n: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(10_000);
    let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1);
    let p = if model.to_string().starts_with("p2") {
        2
    } else {
        10
    };
    let nl = matches!(model, Model::P2Nli | Model::P2Nlq).then_some(1.0);
    let data = generate_data(&DgpSpec::new(model, p, Setting::One, nl)?, n, big_n, seed)?;
    std::fs::create_dir_all(&dir)?;
    let header: Vec<String> = (1..=p).map(|j| format!("x{j}")).collect();
    let mut lab = std::fs::File::create(dir.join("labeled.csv"))?;
    writeln!(lab, "y,{}", header.join(","))?;
    for i in 0..data.n() {
        let row: Vec<String> = data
            .labeled_x()
            .row(i)
            .iter()
            .map(|v| v.to_string())
            .collect();
        writeln!(lab, "{},{}", data.labeled_y()[i], row.join(","))?;
    }
    let mut unl = std::fs::File::create(dir.join("unlabeled.csv"))?;
    writeln!(unl, "{}", header.join(","))?;
    for i in 0..data.big_n() {
        let row: Vec<String> = data
            .unlabeled_x()
            .row(i)
            .iter()
            .map(|v| v.to_string())
            .collect();
        writeln!(unl, "{}", row.join(","))?;
    }
    println!(
        "wrote {} labeled and {} unlabeled rows to {}",
        data.n(),
        data.big_n(),
        dir.display()
    );
    Ok(())
}
