//! Effect of V2V range and update period on IDA-fast and VGR.

use pcca::metrics::{aggregate, render_table};
use pcca::scenario::{run_monte_carlo, ScenarioConfig, Variant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let runs: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(20);
    let mut rows = Vec::new();
    for variant in [Variant::IdaFast, Variant::Vgr] {
        let base = ScenarioConfig::default().with_variant(variant);
        let cases = [("unlimited", None, 0.1), ("80 m", Some(80.0), 0.1), ("50 m", Some(50.0), 0.1), ("0.2 s", None, 0.2)];
        for (label, range, period) in cases {
            let mut cfg = base.clone();
            cfg.v2v.range = range;
            cfg.ctrl_period = period;
            let metrics: Vec<_> = run_monte_carlo(&cfg, runs, 0)?.into_iter().map(|r| r.metrics).collect();
            rows.push((format!("{} {label}", variant.label()), aggregate(&metrics)));
        }
    }
    print!("{}", render_table(&rows).text);
    Ok(())
}
