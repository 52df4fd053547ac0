//! Pure-pursuit lane tracking with a proportional speed hold.

use serde::{Deserialize, Serialize};

use crate::vehicle::{clamp_control, AgentState, ControlBox, ControlInput, VehicleParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lane {
    Right,
    Left,
}

impl Lane {
    pub fn other(self) -> Lane {
        match self {
            Lane::Right => Lane::Left,
            Lane::Left => Lane::Right,
        }
    }
}

/// Two straight parallel lanes along the x axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaneGeometry {
    pub lane_width: f64,
    /// Centerline of the right lane; the left lane sits one lane width above.
    pub right_center: f64,
}

impl Default for LaneGeometry {
    fn default() -> Self {
        Self { lane_width: 3.5, right_center: 0.0 }
    }
}

impl LaneGeometry {
    pub fn center(&self, lane: Lane) -> f64 {
        match lane {
            Lane::Right => self.right_center,
            Lane::Left => self.right_center + self.lane_width,
        }
    }

    pub fn divider(&self) -> f64 {
        self.right_center + 0.5 * self.lane_width
    }

    pub fn right_edge(&self) -> f64 {
        self.right_center - 0.5 * self.lane_width
    }

    pub fn left_edge(&self) -> f64 {
        self.right_center + 1.5 * self.lane_width
    }

    pub fn lane_of(&self, y: f64) -> Lane {
        if y < self.divider() {
            Lane::Right
        } else {
            Lane::Left
        }
    }
}

/// Private to the ego vehicle; never broadcast.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrivingIntent {
    pub target_lane: Lane,
    pub change_lane: bool,
    pub desired_speed: f64,
    /// Longitudinal position where the lane change may begin.
    pub change_from_x: f64,
}

impl DrivingIntent {
    pub fn straight(lane: Lane, desired_speed: f64) -> Self {
        Self { target_lane: lane, change_lane: false, desired_speed, change_from_x: 0.0 }
    }

    pub fn change_to(lane: Lane, desired_speed: f64, change_from_x: f64) -> Self {
        Self { target_lane: lane, change_lane: true, desired_speed, change_from_x }
    }

    pub fn source_lane(&self) -> Lane {
        if self.change_lane {
            self.target_lane.other()
        } else {
            self.target_lane
        }
    }

    /// Lane currently being tracked at longitudinal position `x`.
    pub fn tracked_lane(&self, x: f64) -> Lane {
        if self.change_lane && x < self.change_from_x {
            self.source_lane()
        } else {
            self.target_lane
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PurePursuit {
    /// Speed-hold gain [1/s].
    pub kappa: f64,
    pub lookahead_time: f64,
    pub lookahead_offset: f64,
}

impl Default for PurePursuit {
    fn default() -> Self {
        Self { kappa: 0.7, lookahead_time: 1.0, lookahead_offset: 5.0 }
    }
}

impl PurePursuit {
    pub fn lookahead(&self, v: f64) -> f64 {
        v * self.lookahead_time + self.lookahead_offset
    }

    /// Unclamped steering and acceleration commands.
    ///
    /// The path is the source lane up to the change point and the target lane
    /// after it; the target point sits on that path one look-ahead ahead.
    pub fn command(&self, state: &AgentState, intent: &DrivingIntent, lanes: &LaneGeometry, params: &VehicleParams) -> ControlInput {
        let ld = self.lookahead(state.v);
        let lateral = lanes.center(intent.tracked_lane(state.x + ld)) - state.y;
        let eta = lateral.atan2(ld) - state.theta;
        ControlInput {
            delta: 2.0 * params.wheelbase * eta.sin() / ld,
            a_c: -self.kappa * (state.v - intent.desired_speed),
        }
    }
}

pub fn pure_pursuit(
    state: &AgentState,
    intent: &DrivingIntent,
    params: &VehicleParams,
    lanes: &LaneGeometry,
    tracker: &PurePursuit,
    bx: &ControlBox,
) -> ControlInput {
    clamp_control(tracker.command(state, intent, lanes, params), bx)
}
