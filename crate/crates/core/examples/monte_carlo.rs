//! Nominal Monte Carlo comparison of the three variants on identical seeds.
//!
//! ```text
//! cargo run --release --example monte_carlo -- [runs] [base_seed]
//! ```

use pcca::metrics::{aggregate, render_table};
use pcca::scenario::{run_monte_carlo, ScenarioConfig, Variant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let runs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(20);
    let base_seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);

    let base = ScenarioConfig::default();
    let mut rows = Vec::new();
    for variant in [Variant::IdaFast, Variant::IdaSlow, Variant::Vgr] {
        let started = std::time::Instant::now();
        let results = run_monte_carlo(&base.with_variant(variant), runs, base_seed)?;
        let metrics: Vec<_> = results.iter().map(|r| r.metrics).collect();
        eprintln!("{}: {runs} runs in {:.1} s", variant.label(), started.elapsed().as_secs_f64());
        rows.push((variant.label().to_string(), aggregate(&metrics)));
    }
    print!("{}", render_table(&rows).text);
    Ok(())
}
