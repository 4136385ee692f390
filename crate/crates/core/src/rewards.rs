//! Per-step reward terms and their stage-weighted sum.

use serde::{Deserialize, Serialize};

use crate::dynamics::ActionVector;
use crate::geom::Vec2;
use crate::perception::BallObservation;

/// Stage-dependent weights on each reward term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub w_ball_vel: f64,
    pub w_chase: f64,
    pub w_in_view: f64,
    pub w_gait: f64,
    pub w_upright_proxy: f64,
    pub w_action_rate: f64,
    pub w_alive: f64,
}

impl RewardWeights {
    /// Locomotion and ball-chasing emphasis, no ball-velocity tracking.
    pub fn stage1() -> Self {
        Self {
            w_ball_vel: 0.0,
            w_chase: 1.5,
            w_in_view: 0.5,
            w_gait: 0.8,
            w_upright_proxy: 0.2,
            w_action_rate: 0.05,
            w_alive: 0.2,
        }
    }

    /// Dribbling emphasis, reference-motion term removed.
    pub fn stage2() -> Self {
        Self {
            w_ball_vel: 2.0,
            w_chase: 0.5,
            w_in_view: 0.5,
            w_gait: 0.0,
            w_upright_proxy: 0.05,
            w_action_rate: 0.05,
            w_alive: 0.2,
        }
    }

    pub fn zero() -> Self {
        Self::scaled(&Self::stage1(), 0.0)
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            w_ball_vel: self.w_ball_vel * k,
            w_chase: self.w_chase * k,
            w_in_view: self.w_in_view * k,
            w_gait: self.w_gait * k,
            w_upright_proxy: self.w_upright_proxy * k,
            w_action_rate: self.w_action_rate * k,
            w_alive: self.w_alive * k,
        }
    }

    fn as_array(&self) -> [f64; 7] {
        [
            self.w_ball_vel,
            self.w_chase,
            self.w_in_view,
            self.w_gait,
            self.w_upright_proxy,
            self.w_action_rate,
            self.w_alive,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|w| w.is_finite())
    }
}

/// Raw (unweighted) value of each reward term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardTerms {
    pub ball_vel: f64,
    pub chase: f64,
    pub in_view: f64,
    pub gait: f64,
    pub upright_proxy: f64,
    pub action_rate: f64,
    pub alive: f64,
}

impl RewardTerms {
    pub const NAMES: [&'static str; 7] =
        ["ball_vel", "chase", "in_view", "gait", "upright_proxy", "action_rate", "alive"];

    pub fn as_array(&self) -> [f64; 7] {
        [self.ball_vel, self.chase, self.in_view, self.gait, self.upright_proxy, self.action_rate, self.alive]
    }

    fn from_array(a: [f64; 7]) -> Self {
        Self {
            ball_vel: a[0],
            chase: a[1],
            in_view: a[2],
            gait: a[3],
            upright_proxy: a[4],
            action_rate: a[5],
            alive: a[6],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub terms: RewardTerms,
    /// `weight × term` for each term.
    pub weighted: RewardTerms,
    pub total: f64,
}

/// How the ball-velocity error is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BallVelocityMode {
    /// Full 2D velocity error.
    #[default]
    Full,
    /// Error of the ball velocity projected onto the command direction.
    Projected,
}

/// Kernel widths and gait-proxy constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardShaping {
    /// Ball-velocity kernel width, m/s.
    pub velocity_sigma: f64,
    /// Chase kernel length scale, m.
    pub chase_scale: f64,
    pub ball_velocity_mode: BallVelocityMode,
    /// Amplitude of the stepping reference, in u_fx units.
    pub gait_kappa: f64,
    /// Gait kernel width, in u_fx units.
    pub gait_sigma: f64,
    /// Body speed at which the stepping reference reaches full amplitude, m/s.
    pub gait_speed_gate: f64,
}

impl Default for RewardShaping {
    fn default() -> Self {
        Self {
            velocity_sigma: 0.5,
            chase_scale: 2.0,
            ball_velocity_mode: BallVelocityMode::Full,
            gait_kappa: 0.5,
            gait_sigma: 0.5,
            gait_speed_gate: 0.5,
        }
    }
}

/// `exp(-‖ball_vel − cmd‖² / sigma²)`.
pub fn r_ball_velocity(ball_vel: Vec2, cmd: Vec2, sigma: f64) -> f64 {
    (-(ball_vel - cmd).norm_sq() / (sigma * sigma)).exp()
}

/// Like [`r_ball_velocity`] but only the component along the command counts.
/// Falls back to the full error for a zero command.
pub fn r_ball_velocity_projected(ball_vel: Vec2, cmd: Vec2, sigma: f64) -> f64 {
    match cmd.normalized() {
        Some(dir) => {
            let e = ball_vel.dot(dir) - cmd.norm();
            (-(e * e) / (sigma * sigma)).exp()
        }
        None => r_ball_velocity(ball_vel, cmd, sigma),
    }
}

/// `exp(-‖robot − ball‖ / d_scale)`.
pub fn r_chase(robot_pos: Vec2, ball_pos: Vec2, d_scale: f64) -> f64 {
    (-robot_pos.distance(ball_pos) / d_scale).exp()
}

/// 1 while the ball is actually in view; remembered positions earn nothing.
pub fn r_in_view(obs: &BallObservation) -> f64 {
    if obs.visible {
        1.0
    } else {
        0.0
    }
}

/// Stepping reference at this gait phase: `κ·sin(φ)·s(v)`, with
/// `s(v) = min(v / v_gate, 1)` so the reference vanishes at standstill.
pub fn gait_reference(gait_phase: f64, body_speed: f64, shaping: &RewardShaping) -> f64 {
    let gate = (body_speed / shaping.gait_speed_gate).clamp(0.0, 1.0);
    shaping.gait_kappa * gait_phase.sin() * gate
}

/// Agreement between the clock reference and the forward-drive channel used as
/// the stepping proxy.
pub fn r_gait(gait_phase: f64, body_speed: f64, action: &ActionVector, shaping: &RewardShaping) -> f64 {
    let proxy = action.clamped().u_fx;
    let e = proxy - gait_reference(gait_phase, body_speed, shaping);
    (-(e * e) / (shaping.gait_sigma * shaping.gait_sigma)).exp()
}

/// `-‖action − prev_action‖²`.
pub fn r_action_rate(action: &ActionVector, prev_action: &ActionVector) -> f64 {
    let (a, b) = (action.to_array(), prev_action.to_array());
    -a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
}

/// Lateral-thrust penalty standing in for torso tilt: `-|u_fy|`.
pub fn r_upright_proxy(action: &ActionVector) -> f64 {
    -action.clamped().u_fy.abs()
}

/// Weighted sum of the terms, accumulated in a fixed order.
pub fn total_reward(weights: &RewardWeights, terms: &RewardTerms) -> RewardBreakdown {
    let w = weights.as_array();
    let t = terms.as_array();
    let mut weighted = [0.0; 7];
    let mut total = 0.0;
    for i in 0..7 {
        weighted[i] = w[i] * t[i];
        total += weighted[i];
    }
    RewardBreakdown { terms: *terms, weighted: RewardTerms::from_array(weighted), total }
}
