//! Fixed-timestep planar physics for the abstracted biped and the ball.
//!
//! The robot is a disc with a commanded body acceleration, a yaw-rate channel,
//! a two-joint head and a gait clock. Leg contacts are reduced to a foot point
//! that alternates sides every half gait cycle and can impart one impulse on
//! the ball per contact window.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{body_to_world, wrap_phase, Vec2};

/// Number of action channels.
pub const ACTION_DIM: usize = 6;

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("non-finite simulation state: {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub position: Vec2,
    pub yaw: f64,
    pub linear_velocity: Vec2,
    pub yaw_rate: f64,
    pub head_pan: f64,
    pub head_tilt: f64,
    pub head_pan_rate: f64,
    pub head_tilt_rate: f64,
    pub gait_phase: f64,
}

impl RobotState {
    pub fn at(position: Vec2, yaw: f64) -> Self {
        Self { position, yaw, ..Default::default() }
    }

    pub fn heading(&self) -> Vec2 {
        Vec2::from_angle(self.yaw)
    }

    fn is_finite(&self) -> bool {
        self.position.is_finite()
            && self.linear_velocity.is_finite()
            && [
                self.yaw,
                self.yaw_rate,
                self.head_pan,
                self.head_tilt,
                self.head_pan_rate,
                self.head_tilt_rate,
                self.gait_phase,
            ]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BallState {
    pub position: Vec2,
    pub velocity: Vec2,
}

impl BallState {
    pub fn at_rest(position: Vec2) -> Self {
        Self { position, velocity: Vec2::ZERO }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub robot: RobotState,
    pub ball: BallState,
    /// Simulated time in seconds.
    pub t: f64,
    /// Velocity change imparted by the most recent kick (zero if none yet).
    pub last_kick: Vec2,
    /// Cleared by a kick, re-armed once the gait phase leaves the contact window.
    pub kick_armed: bool,
}

impl WorldState {
    pub fn new(robot: RobotState, ball: BallState) -> Self {
        Self { robot, ball, t: 0.0, last_kick: Vec2::ZERO, kick_armed: true }
    }
}

/// Normalized policy action. Every channel is clamped to [-1, 1] before scaling.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionVector {
    pub u_fx: f64,
    pub u_fy: f64,
    pub u_yaw: f64,
    pub u_pan: f64,
    pub u_tilt: f64,
    pub u_kick: f64,
}

impl ActionVector {
    pub const ZERO: ActionVector =
        ActionVector { u_fx: 0.0, u_fy: 0.0, u_yaw: 0.0, u_pan: 0.0, u_tilt: 0.0, u_kick: 0.0 };

    pub fn from_slice<T: Copy + Into<f64>>(v: &[T]) -> Self {
        assert_eq!(v.len(), ACTION_DIM, "action must have {ACTION_DIM} channels");
        Self {
            u_fx: v[0].into(),
            u_fy: v[1].into(),
            u_yaw: v[2].into(),
            u_pan: v[3].into(),
            u_tilt: v[4].into(),
            u_kick: v[5].into(),
        }
    }

    pub fn to_array(self) -> [f64; ACTION_DIM] {
        [self.u_fx, self.u_fy, self.u_yaw, self.u_pan, self.u_tilt, self.u_kick]
    }

    pub fn clamped(self) -> Self {
        let c = |v: f64| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
        Self {
            u_fx: c(self.u_fx),
            u_fy: c(self.u_fy),
            u_yaw: c(self.u_yaw),
            u_pan: c(self.u_pan),
            u_tilt: c(self.u_tilt),
            u_kick: c(self.u_kick),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Fixed body and contact geometry. All values are configuration defaults, not
/// measurements of a particular robot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BodyModel {
    /// Body acceleration at full throttle, m/s².
    pub accel_scale: f64,
    /// Linear velocity damping, 1/s.
    pub linear_drag: f64,
    pub v_max: f64,
    pub yaw_rate_max: f64,
    pub head_rate_max: f64,
    pub head_pan_limits: (f64, f64),
    pub head_tilt_limits: (f64, f64),
    /// Gait angular frequency, rad/s.
    pub gait_omega: f64,
    /// Kick base magnitude, m/s.
    pub kick_k0: f64,
    /// Kick modulated magnitude, m/s.
    pub kick_k1: f64,
    pub kick_dv_max: f64,
    pub reach_radius: f64,
    pub foot_lateral: f64,
    pub foot_forward: f64,
    pub body_radius: f64,
    /// Rolling deceleration per unit terrain friction, m/s².
    pub rolling_decel_per_friction: f64,
    /// Robot velocity jitter per unit roughness, m/s per step.
    pub jitter_scale: f64,
}

impl Default for BodyModel {
    fn default() -> Self {
        Self {
            accel_scale: 2.0,
            linear_drag: 1.0,
            v_max: 2.0,
            yaw_rate_max: 2.0,
            head_rate_max: 3.0,
            head_pan_limits: (-1.57, 1.57),
            head_tilt_limits: (-0.8, 0.4),
            gait_omega: 2.0 * PI * 1.5,
            kick_k0: 0.3,
            kick_k1: 1.2,
            kick_dv_max: 2.0,
            reach_radius: 0.25,
            foot_lateral: 0.12,
            foot_forward: 0.10,
            body_radius: 0.2,
            rolling_decel_per_friction: 0.35,
            jitter_scale: 0.05,
        }
    }
}

/// Per-episode physical parameters (the domain-randomized analog of the
/// full robot's mass, friction and gain perturbations).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicsParams {
    pub terrain_friction: f64,
    /// m/s², derived from `terrain_friction`.
    pub rolling_decel: f64,
    pub robot_accel_gain: f64,
    pub head_rate_gain: f64,
    pub action_scale: f64,
    pub kick_gain: f64,
    /// Acceleration is divided by `1 + mass_offset`.
    pub mass_offset: f64,
    /// Body-frame shift of the effective foot point, m.
    pub com_offset: Vec2,
    /// Std-dev of the angular perturbation on kicked balls, rad.
    pub roughness_sigma: f64,
    pub restitution: f64,
    pub body: BodyModel,
}

impl Default for PhysicsParams {
    fn default() -> Self {
        Self::nominal(BodyModel::default())
    }
}

impl PhysicsParams {
    /// Unperturbed parameters (friction 1, unit gains, flat terrain).
    pub fn nominal(body: BodyModel) -> Self {
        Self::with_friction(1.0, body)
    }

    pub fn with_friction(terrain_friction: f64, body: BodyModel) -> Self {
        Self {
            terrain_friction,
            rolling_decel: body.rolling_decel_per_friction * terrain_friction,
            robot_accel_gain: 1.0,
            head_rate_gain: 1.0,
            action_scale: 1.0,
            kick_gain: 1.0,
            mass_offset: 0.0,
            com_offset: Vec2::ZERO,
            roughness_sigma: 0.0,
            restitution: 0.5,
            body,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Foot {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KickImpulse {
    /// Velocity change applied to the ball, m/s.
    pub delta_v: Vec2,
    pub foot: Foot,
    pub foot_point: Vec2,
}

/// The foot that can touch the ball in the current half gait cycle and its
/// world-frame position.
pub fn active_foot(robot: &RobotState, body: &BodyModel) -> (Foot, Vec2) {
    let (foot, lateral) = if robot.gait_phase < PI {
        (Foot::Left, body.foot_lateral)
    } else {
        (Foot::Right, -body.foot_lateral)
    };
    let offset = body_to_world(Vec2::new(body.foot_forward, lateral), robot.yaw);
    (foot, robot.position + offset)
}

/// True in `[0, 0.3π] ∪ [π, 1.3π]`, the first 30% of each half cycle.
pub fn in_contact_window(gait_phase: f64) -> bool {
    let p = wrap_phase(gait_phase);
    p <= 0.3 * PI || (PI..=1.3 * PI).contains(&p)
}

/// Impulse the active foot would impart, if the ball is within reach during a
/// contact window. Does not consult the per-window kick latch.
pub fn foot_ball_contact(
    robot: &RobotState,
    ball: &BallState,
    params: &PhysicsParams,
    u_kick: f64,
) -> Option<KickImpulse> {
    let body = &params.body;
    if !in_contact_window(robot.gait_phase) {
        return None;
    }
    let (foot, foot_point) = active_foot(robot, body);
    if ball.position.distance(foot_point) > body.reach_radius {
        return None;
    }
    let u = if u_kick.is_nan() { 0.0 } else { u_kick.clamp(-1.0, 1.0) };
    let magnitude = (params.kick_gain * (body.kick_k0 + body.kick_k1 * (u + 1.0) * 0.5))
        .clamp(0.0, body.kick_dv_max);
    let effective_foot = foot_point + body_to_world(params.com_offset, robot.yaw);
    let dir = (ball.position - effective_foot).normalized().unwrap_or_else(|| robot.heading());
    Some(KickImpulse { delta_v: dir * magnitude, foot, foot_point })
}

/// Friction decay of a free-rolling ball. Speed drops by `rolling_decel·dt`
/// and stops at zero without reversing.
pub fn ball_roll(ball: &BallState, params: &PhysicsParams, dt: f64) -> BallState {
    let speed = ball.velocity.norm();
    let velocity = if speed > 0.0 {
        let new_speed = (speed - params.rolling_decel * dt).max(0.0);
        ball.velocity * (new_speed / speed)
    } else {
        Vec2::ZERO
    };
    BallState { position: ball.position + velocity * dt, velocity }
}

/// One control step of the coupled robot/ball system.
pub fn step_dynamics<R: Rng + ?Sized>(
    state: &WorldState,
    action: &ActionVector,
    params: &PhysicsParams,
    dt: f64,
    rng: &mut R,
) -> Result<WorldState, DynamicsError> {
    if !state.robot.is_finite() {
        return Err(DynamicsError::NonFinite("robot"));
    }
    if !(state.ball.position.is_finite() && state.ball.velocity.is_finite()) {
        return Err(DynamicsError::NonFinite("ball"));
    }
    if !state.t.is_finite() {
        return Err(DynamicsError::NonFinite("clock"));
    }
    let body = &params.body;
    let a = action.clamped();
    let scale = params.action_scale;
    let mut robot = state.robot;

    // Body: acceleration -> velocity -> position.
    let accel_body = Vec2::new(a.u_fx, a.u_fy)
        * (scale * body.accel_scale * params.robot_accel_gain / (1.0 + params.mass_offset));
    let accel = body_to_world(accel_body, robot.yaw);
    let mut v = robot.linear_velocity + (accel - robot.linear_velocity * body.linear_drag) * dt;
    if params.roughness_sigma > 0.0 {
        let jitter = Vec2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
        v += jitter * (params.roughness_sigma * body.jitter_scale);
    }
    robot.linear_velocity = v.clamp_norm(body.v_max);
    robot.position += robot.linear_velocity * dt;

    robot.yaw_rate = (a.u_yaw * scale * body.yaw_rate_max).clamp(-body.yaw_rate_max, body.yaw_rate_max);
    robot.yaw = crate::geom::wrap_pi(robot.yaw + robot.yaw_rate * dt);

    let head_rate = body.head_rate_max * params.head_rate_gain * scale;
    let (pan_lo, pan_hi) = body.head_pan_limits;
    let (tilt_lo, tilt_hi) = body.head_tilt_limits;
    let pan = (robot.head_pan + a.u_pan * head_rate * dt).clamp(pan_lo, pan_hi);
    let tilt = (robot.head_tilt + a.u_tilt * head_rate * dt).clamp(tilt_lo, tilt_hi);
    robot.head_pan_rate = (pan - robot.head_pan) / dt;
    robot.head_tilt_rate = (tilt - robot.head_tilt) / dt;
    robot.head_pan = pan;
    robot.head_tilt = tilt;

    robot.gait_phase = wrap_phase(robot.gait_phase + body.gait_omega * dt);

    // Ball: kick, roll, body pushback.
    let mut ball = state.ball;
    let mut last_kick = state.last_kick;
    let mut kick_armed = state.kick_armed || !in_contact_window(robot.gait_phase);
    if kick_armed {
        if let Some(kick) = foot_ball_contact(&robot, &ball, params, a.u_kick) {
            let mut v = ball.velocity + kick.delta_v;
            if params.roughness_sigma > 0.0 {
                let dtheta: f64 = rng.sample::<f64, _>(StandardNormal) * params.roughness_sigma;
                v = v.rotate(dtheta);
            }
            ball.velocity = v;
            last_kick = kick.delta_v;
            kick_armed = false;
        }
    }
    ball = ball_roll(&ball, params, dt);

    let offset = ball.position - robot.position;
    let dist = offset.norm();
    if dist < body.body_radius {
        let n = offset.normalized().unwrap_or_else(|| robot.heading());
        ball.position = robot.position + n * body.body_radius;
        let vn = (ball.velocity - robot.linear_velocity).dot(n);
        if vn < 0.0 {
            ball.velocity -= n * ((1.0 + params.restitution) * vn);
        }
    }

    let next = WorldState { robot, ball, t: state.t + dt, last_kick, kick_armed };
    if !(next.robot.is_finite() && next.ball.position.is_finite() && next.ball.velocity.is_finite()) {
        return Err(DynamicsError::NonFinite("successor"));
    }
    Ok(next)
}
