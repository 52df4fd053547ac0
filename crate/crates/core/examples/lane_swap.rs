//! Six vehicles, three per lane, all swapping lanes inside the 120 m zone.
//!
//! ```text
//! cargo run --release --example lane_swap -- [ida-fast|ida-slow|vgr] [episode.csv]
//! ```

use pcca::baseline::{DrivingIntent, Lane};
use pcca::scenario::{log_to_csv, simulate, AgentInfo, ScenarioConfig, Variant, World};
use pcca::metrics::compute_metrics;
use pcca::vehicle::AgentState;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let variant: Variant = args.next().as_deref().unwrap_or("ida-fast").parse()?;
    let csv_path = args.next();

    let cfg = ScenarioConfig::default().with_variant(variant);
    let lanes = cfg.lanes();
    let v = 22.0;
    let mut agents = Vec::new();
    for k in 0..3 {
        // Lanes offset by half a slot so nobody starts exactly abreast.
        for (lane, shift) in [(Lane::Right, 0.0), (Lane::Left, 1.0)] {
            let id = agents.len();
            let x = -30.0 - 14.0 * k as f64 - shift;
            let intent = DrivingIntent::change_to(lane.other(), v, cfg.road.zone_start);
            agents.push((AgentInfo { id, intent, nra: false }, AgentState::new(x, lanes.center(lane), 0.0, v)));
        }
    }

    let log = simulate(&cfg, World::new(agents))?;
    let m = compute_metrics(&log, &cfg)?;

    println!("variant {}  ticks {}", variant.label(), log.ticks.len());
    for info in &log.agents {
        let target = lanes.center(info.intent.target_lane);
        let at_finish = log
            .ticks
            .iter()
            .map(|t| t.agents[info.id].state)
            .find(|s| s.x >= cfg.zone_end())
            .map(|s| s.y - target);
        match at_finish {
            Some(err) => println!("  vehicle {}: lateral error at finish line {:+.2} m", info.id, err),
            None => println!("  vehicle {}: never reached the finish line", info.id),
        }
    }
    println!(
        "min h0 {:.3} m, incomplete {}, collisions {}, max da_c {:.2} m/s^2, mean speed {:.2} m/s",
        m.min_h0, m.incomplete_ls_count, m.collision_count, m.max_delta_ac, m.avg_speed
    );

    if let Some(path) = csv_path {
        std::fs::write(&path, log_to_csv(&log))?;
        println!("wrote {path}");
    }
    Ok(())
}
