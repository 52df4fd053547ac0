//! One randomly chosen vehicle per run ignores everybody else. The others
//! are not told and keep treating it as a cooperating agent.

use pcca::metrics::{aggregate, render_table};
use pcca::scenario::{run_monte_carlo, ScenarioConfig, Variant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let runs: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(30);
    let mut rows = Vec::new();
    for variant in [Variant::IdaFast, Variant::Vgr] {
        let mut cfg = ScenarioConfig::default().with_variant(variant);
        cfg.nra_enabled = true;
        let results = run_monte_carlo(&cfg, runs, 0)?;
        for r in results.iter().filter(|r| r.metrics.collision_count > 0 || r.metrics.incomplete_ls_count > 0) {
            println!(
                "{} seed {:3}: collisions {} incomplete {} min h0 {:.2}",
                variant.label(),
                r.seed,
                r.metrics.collision_count,
                r.metrics.incomplete_ls_count,
                r.metrics.min_h0
            );
        }
        let metrics: Vec<_> = results.iter().map(|r| r.metrics).collect();
        rows.push((format!("{} + NRA", variant.label()), aggregate(&metrics)));
    }
    print!("{}", render_table(&rows).text);
    Ok(())
}
