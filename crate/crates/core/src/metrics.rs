//! Episode metrics and summary tables.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{body_corners, collision_check, h0_metric, reporting_ellipse, EllipseSpec, REPORTING_ALPHA};
use crate::scenario::{EpisodeLog, ScenarioConfig};

pub const MPS_TO_MPH: f64 = 1.0 / 0.44704;
/// J/m to Wh/km.
const J_PER_M_TO_WH_PER_KM: f64 = 1000.0 / 3600.0;
pub const DELTA_AC_EVENT: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Mean speed of samples inside the zone [m/s].
    pub avg_speed: f64,
    /// Mean desired speed of the population [m/s].
    pub desired_speed: f64,
    /// Energy dissipated by braking per distance travelled [Wh/km].
    pub brake_loss: f64,
    pub min_h0: f64,
    /// Worst body-corner excursion beyond the road edges [m].
    pub oob_max: f64,
    pub lane_changers: usize,
    pub incomplete_ls_count: usize,
    pub max_delta_ac: f64,
    pub count_delta_ac_gt2: usize,
    /// Distinct vehicle pairs whose bodies overlapped at some tick.
    pub collision_count: usize,
    pub fallback_count: usize,
    pub timed_out: bool,
    pub mean_loop_time: f64,
    pub max_loop_time: f64,
}

impl RunMetrics {
    pub fn all_lane_changes_complete(&self) -> bool {
        self.incomplete_ls_count == 0 && !self.timed_out
    }
}

/// Metrics with the default reporting ellipse.
pub fn compute_metrics(log: &EpisodeLog, cfg: &ScenarioConfig) -> Result<RunMetrics> {
    let spec0 = reporting_ellipse(&cfg.vehicle, REPORTING_ALPHA)?;
    Ok(compute_metrics_with(log, cfg, &spec0))
}

pub fn compute_metrics_with(log: &EpisodeLog, cfg: &ScenarioConfig, spec0: &EllipseSpec) -> RunMetrics {
    let params = &cfg.vehicle;
    let lanes = cfg.lanes();
    let (z0, z1) = (cfg.road.zone_start, cfg.zone_end());
    let n = log.agents.len();
    let ticks = &log.ticks;

    let (mut speed_sum, mut speed_n) = (0.0, 0usize);
    let mut min_h0 = f64::INFINITY;
    let mut oob: f64 = 0.0;
    let mut colliding = vec![false; n * n];
    for tick in ticks {
        for (i, si) in tick.agents.iter().enumerate() {
            let s = &si.state;
            if (z0..=z1).contains(&s.x) {
                speed_sum += s.v;
                speed_n += 1;
            }
            for c in body_corners(s, params) {
                oob = oob.max(lanes.right_edge() - c[1]).max(c[1] - lanes.left_edge());
            }
            for (j, sj) in tick.agents.iter().enumerate() {
                if i == j {
                    continue;
                }
                min_h0 = min_h0.min(h0_metric(s, &sj.state, spec0));
                if i < j && !colliding[i * n + j] && collision_check(s, &sj.state, params).overlap {
                    colliding[i * n + j] = true;
                }
            }
        }
    }

    let mut energy = 0.0;
    let mut distance = 0.0;
    let mut max_dac: f64 = 0.0;
    let mut count_gt2 = 0;
    for pair in ticks.windows(2) {
        let dt = pair[1].t - pair[0].t;
        for (a, b) in pair[0].agents.iter().zip(&pair[1].agents) {
            let v_mean = 0.5 * (a.state.v + b.state.v);
            energy += params.mass * (-a.applied.a_c).max(0.0) * v_mean * dt;
            distance += v_mean * dt;
            let dac = (b.applied.a_c - a.applied.a_c).abs();
            max_dac = max_dac.max(dac);
            if dac > DELTA_AC_EVENT {
                count_gt2 += 1;
            }
        }
    }

    let tol = 0.5 * (lanes.lane_width - params.body_width);
    let mut incomplete = 0;
    let mut changers = 0;
    for (id, info) in log.agents.iter().enumerate() {
        if !info.intent.change_lane {
            continue;
        }
        changers += 1;
        let target = lanes.center(info.intent.target_lane);
        match crossing_y(log, id, z1) {
            Some(y) if (y - target).abs() <= tol => {}
            _ => incomplete += 1,
        }
    }

    RunMetrics {
        avg_speed: if speed_n > 0 { speed_sum / speed_n as f64 } else { 0.0 },
        desired_speed: if n > 0 { log.agents.iter().map(|a| a.intent.desired_speed).sum::<f64>() / n as f64 } else { 0.0 },
        brake_loss: if distance > 0.0 { energy / distance * J_PER_M_TO_WH_PER_KM } else { 0.0 },
        min_h0: if min_h0.is_finite() { min_h0 } else { 0.0 },
        oob_max: oob.max(0.0),
        lane_changers: changers,
        incomplete_ls_count: incomplete,
        max_delta_ac: max_dac,
        count_delta_ac_gt2: count_gt2,
        collision_count: colliding.iter().filter(|c| **c).count(),
        fallback_count: log.fallback_count(),
        timed_out: log.timed_out(),
        mean_loop_time: log.timing.mean_ms(),
        max_loop_time: log.timing.max_ms,
    }
}

/// Lateral position where agent `id` crosses `x_line`, linearly interpolated.
fn crossing_y(log: &EpisodeLog, id: usize, x_line: f64) -> Option<f64> {
    let first = &log.ticks.first()?.agents[id].state;
    if first.x >= x_line {
        return Some(first.y);
    }
    log.ticks.windows(2).find_map(|w| {
        let a = &w[0].agents[id].state;
        let b = &w[1].agents[id].state;
        (a.x < x_line && b.x >= x_line).then(|| a.y + (b.y - a.y) * (x_line - a.x) / (b.x - a.x))
    })
}

/// Fraction of flagged samples, handy for checking variant plumbing.
pub fn flagged_fraction(log: &EpisodeLog, flag: u32) -> f64 {
    let total: usize = log.ticks.iter().map(|t| t.agents.len()).sum();
    let hit: usize = log.ticks.iter().map(|t| t.agents.iter().filter(|s| s.flags & flag != 0).count()).sum();
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Per-variant roll-up over Monte Carlo runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub runs: usize,
    /// Mean over runs.
    pub avg_speed: f64,
    pub desired_speed: f64,
    pub brake_loss: f64,
    /// Minimum over runs.
    pub min_h0: f64,
    /// Maximum over runs.
    pub oob_max: f64,
    pub max_delta_ac: f64,
    /// Mean over runs of the per-run event count.
    pub avg_count_delta_ac_gt2: f64,
    pub incomplete_ls_total: usize,
    pub runs_with_incomplete_ls: usize,
    pub oob_runs: usize,
    pub collision_total: usize,
    pub fallback_total: usize,
    pub timeouts: usize,
    pub mean_loop_time: f64,
    pub max_loop_time: f64,
}

impl AggregateMetrics {
    pub fn runs_all_complete(&self) -> usize {
        self.runs - self.runs_with_incomplete_ls
    }
}

pub fn aggregate(runs: &[RunMetrics]) -> AggregateMetrics {
    let n = runs.len();
    let mean = |f: &dyn Fn(&RunMetrics) -> f64| if n == 0 { 0.0 } else { runs.iter().map(f).sum::<f64>() / n as f64 };
    let max = |f: &dyn Fn(&RunMetrics) -> f64| runs.iter().map(f).fold(0.0, f64::max);
    AggregateMetrics {
        runs: n,
        avg_speed: mean(&|r| r.avg_speed),
        desired_speed: mean(&|r| r.desired_speed),
        brake_loss: mean(&|r| r.brake_loss),
        min_h0: if n == 0 { 0.0 } else { runs.iter().map(|r| r.min_h0).fold(f64::INFINITY, f64::min) },
        oob_max: max(&|r| r.oob_max),
        max_delta_ac: max(&|r| r.max_delta_ac),
        avg_count_delta_ac_gt2: mean(&|r| r.count_delta_ac_gt2 as f64),
        incomplete_ls_total: runs.iter().map(|r| r.incomplete_ls_count).sum(),
        runs_with_incomplete_ls: runs.iter().filter(|r| !r.all_lane_changes_complete()).count(),
        oob_runs: runs.iter().filter(|r| r.oob_max > 0.0).count(),
        collision_total: runs.iter().map(|r| r.collision_count).sum(),
        fallback_total: runs.iter().map(|r| r.fallback_count).sum(),
        timeouts: runs.iter().filter(|r| r.timed_out).count(),
        mean_loop_time: mean(&|r| r.mean_loop_time),
        max_loop_time: max(&|r| r.max_loop_time),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub text: String,
    pub csv: String,
}

const COLUMNS: [&str; 13] = [
    "variant",
    "runs",
    "speed [m/s]",
    "speed [mph]",
    "brake loss [Wh/km]",
    "min h0 [m]",
    "max OOB [m]",
    "incomplete LS",
    "max da_c [m/s2]",
    "avg #da_c>2",
    "collisions",
    "mean loop [ms]",
    "max loop [ms]",
];

pub fn render_table(rows: &[(String, AggregateMetrics)]) -> Table {
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|(label, a)| {
            vec![
                label.clone(),
                a.runs.to_string(),
                format!("{:.2}", a.avg_speed),
                format!("{:.1}", a.avg_speed * MPS_TO_MPH),
                format!("{:.1}", a.brake_loss),
                format!("{:.3}", a.min_h0),
                format!("{:.2}", a.oob_max),
                a.incomplete_ls_total.to_string(),
                format!("{:.2}", a.max_delta_ac),
                format!("{:.2}", a.avg_count_delta_ac_gt2),
                a.collision_total.to_string(),
                format!("{:.3}", a.mean_loop_time),
                format!("{:.3}", a.max_loop_time),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..COLUMNS.len())
        .map(|c| cells.iter().map(|r| r[c].len()).chain([COLUMNS[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |r: &[String]| -> String {
        r.iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let header: Vec<String> = COLUMNS.iter().map(|s| s.to_string()).collect();
    let mut text = line(&header);
    text.push('\n');
    text.push_str(&"-".repeat(text.len() - 1));
    text.push('\n');
    for r in &cells {
        text.push_str(&line(r));
        text.push('\n');
    }
    let mut csv = COLUMNS.join(",");
    csv.push('\n');
    for r in &cells {
        csv.push_str(&r.join(","));
        csv.push('\n');
    }
    Table { text, csv }
}
