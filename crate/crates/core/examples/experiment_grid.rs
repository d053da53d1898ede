//! Grid search from a spec file, writing raw and aggregate CSVs.
//!
//! `cargo run --release --example experiment_grid -- [spec] [out_dir]`

use std::path::PathBuf;

use htbilevel::harness::{grid_search, ExperimentSpec, RunOptions, Selection};

fn main() -> htbilevel::Result<()> {
    let mut args = std::env::args().skip(1);
    let spec_path = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("specs/smoke.toml"));
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("htbilevel_grid"));

    let spec = ExperimentSpec::from_file(&spec_path)?;
    let opts = RunOptions {
        out_dir: Some(out.clone()),
        ..RunOptions::default()
    };
    let (report, selections) = grid_search(&spec, &opts)?;
    println!("{}: {} grid points, CSVs in {}", report.name, report.points.len(), out.display());
    for sel in selections {
        match sel {
            Selection::Best { algo, label, params, score, .. } => {
                println!("{algo:<15} {label:<15} {params:?} final |grad| {score:.4}")
            }
            Selection::NoStableConfiguration { algo } => println!("{algo:<15} no stable configuration"),
        }
    }
    Ok(())
}
