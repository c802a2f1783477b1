//! Runs a reduced child-family grid (the 64-wide configs) on a synthetic
//! task suite, persists trials, and applies the efficiency-first selection rule.
//!
//! `cargo run --example grid_search -- [store_dir]`

use kilosound::app::synthetic_suite;
use kilosound::finetune::FinetuneConfig;
use kilosound::gridsearch::{enumerate_grid, run_grid, select_config, write_results_csv, GridSpec, SelectionPolicy, TrialOptions};

fn main() -> kilosound::Result<()> {
    let store = std::env::args().nth(1).map(std::path::PathBuf::from);
    let spec = GridSpec { embed_dims: vec![64], layers: vec![2, 4], expansions: vec![1, 2], ..GridSpec::child_family() };
    let entries = enumerate_grid(&spec)?;
    let suite = synthetic_suite(6, 4, 21)?;
    let opts = TrialOptions { finetune: FinetuneConfig { epochs: 10, ..Default::default() }, latency_runs: 5, ..Default::default() };
    let results = run_grid(&entries, &suite, &opts, store.as_deref())?;
    write_results_csv(std::io::stdout(), &results)?;
    println!("selected: {}", select_config(&results, &SelectionPolicy::child_family())?);
    Ok(())
}
