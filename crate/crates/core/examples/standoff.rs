//! Two cars abreast that want each other's lane. The pair is an unstable
//! equilibrium of the filtered loop; a 5 cm head start is enough for the
//! instability to pick an order. Prints the longitudinal separation and its
//! measured growth rate next to the closed-form prediction.

use pcca::baseline::{DrivingIntent, Lane};
use pcca::scenario::{simulate, AgentInfo, ScenarioConfig, Variant, World};
use pcca::stability::{implemented_loop_eigenvalue, unstable_eigenvalue};
use pcca::pcca::sensitivity;
use pcca::metrics::compute_metrics;
use pcca::vehicle::AgentState;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let variant: Variant = std::env::args().nth(1).as_deref().unwrap_or("ida-fast").parse()?;
    let v: f64 = 20.0;
    let cfg = ScenarioConfig::default().with_variant(variant);
    let lanes = cfg.lanes();
    let x0 = -40.0;
    let agents = vec![
        (
            AgentInfo { id: 0, intent: DrivingIntent::change_to(Lane::Left, v, 0.0), nra: false },
            AgentState::new(x0 + 0.05, lanes.center(Lane::Right), 0.0, v),
        ),
        (
            AgentInfo { id: 1, intent: DrivingIntent::change_to(Lane::Right, v, 0.0), nra: false },
            AgentState::new(x0, lanes.center(Lane::Left), 0.0, v),
        ),
    ];
    let log = simulate(&cfg, World::new(agents))?;

    let dx: Vec<(f64, f64)> = log.ticks.iter().map(|t| (t.t, t.agents[0].state.x - t.agents[1].state.x)).collect();
    for (t, d) in dx.iter().step_by(5) {
        println!("t {t:5.1} s  dx {d:+9.4} m");
    }

    // Growth rate over the part where |dx| goes from 0.1 m to 2 m.
    let a = dx.iter().find(|p| p.1.abs() > 0.1);
    let b = dx.iter().find(|p| p.1.abs() > 2.0);
    if let (Some(a), Some(b)) = (a, b) {
        let rate = (b.1.abs() / a.1.abs()).ln() / (b.0 - a.0);
        let pcca = cfg.pcca()?;
        let s_a = sensitivity(v, &pcca.sensitivity);
        let delta0 = 0.015;
        let formula = unstable_eigenvalue(v, s_a, delta0, cfg.controller.kappa, &cfg.vehicle, &pcca.spec);
        let lp = implemented_loop_eigenvalue(v, s_a, delta0, cfg.controller.kappa, &cfg.vehicle, &pcca.spec);
        println!("measured growth {rate:.2} 1/s, closed form {formula:.2} 1/s, loop model {lp:.2} 1/s");
    } else {
        println!("separation never grew past 2 m");
    }
    let m = compute_metrics(&log, &cfg)?;
    println!("incomplete {}, min h0 {:.3} m, collisions {}", m.incomplete_ls_count, m.min_h0, m.collision_count);
    Ok(())
}
