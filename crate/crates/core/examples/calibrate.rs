//! Fits the acceleration weight s_a(v) so the inter-agent instability hits
//! chosen rates, then prints the resulting eigenvalue curve.

use pcca::pcca::sensitivity;
use pcca::scenario::{ScenarioConfig, Variant};
use pcca::stability::{calibrate_sensitivity, unstable_eigenvalue, InstabilityTargets, MPH};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ScenarioConfig::default();
    let spec = cfg.spec()?;
    let kappa = cfg.controller.kappa;

    for variant in [Variant::IdaFast, Variant::IdaSlow, Variant::Vgr] {
        let targets = variant.targets();
        let c = calibrate_sensitivity(&targets, kappa, &cfg.vehicle, &spec)?;
        println!("{}: 1/s_a = {:.4} + {:.4} v^2 + {:.5} v^3", variant.label(), c.c0, c.c2, c.c3);
        for mph in [5.0, 10.0, 20.0, 30.0, 40.0, 55.0] {
            let v = mph * MPH;
            let l = unstable_eigenvalue(v, sensitivity(v, &c), targets.delta0, kappa, &cfg.vehicle, &spec);
            let mark = if targets.points.iter().any(|p| (p.0 - v).abs() < 1e-9) { "  <- target" } else { "" };
            println!("  {mph:4.0} mph  s_a {:.3e}  lambda {l:.3} 1/s{mark}", sensitivity(v, &c));
        }
    }

    // A custom, gentler target set.
    let custom = InstabilityTargets { points: vec![(10.0 * MPH, 1.0), (20.0 * MPH, 1.5), (30.0 * MPH, 2.0)], delta0: 0.015 };
    match calibrate_sensitivity(&custom, kappa, &cfg.vehicle, &spec) {
        Ok(c) => println!("custom: c0 {:.3} c2 {:.4} c3 {:.5}", c.c0, c.c2, c.c3),
        Err(e) => println!("custom targets rejected: {e}"),
    }
    Ok(())
}
