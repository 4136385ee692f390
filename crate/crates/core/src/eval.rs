//! Evaluation protocols: the turn-tracking experiment with its line-fit
//! direction metric and speed metric, and the dribble-to-target and
//! obstacle-avoidance task evaluators.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{ActionVector, BallState, BodyModel, RobotState, WorldState};
use crate::env::{Env, EnvConfig, EnvError, StageConfig};
use crate::geom::{body_to_world, point_in_polygon, polygon_area, world_to_body, wrap_pi, Aabb, Vec2};
use crate::policy::{Policy, PolicyError, Scalar};
use crate::randomization::{keyed_rng, sample_episode_params, EpisodeParams, RandomizationRanges};

/// Minimum points per fitted segment.
pub const MIN_SEGMENT_POINTS: usize = 10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{segment} segment has {got} points, need at least {MIN_SEGMENT_POINTS}")]
    InsufficientPoints { segment: &'static str, got: usize },
    #[error("{segment} segment is degenerate (all points coincide), direction undefined")]
    DegenerateSegment { segment: &'static str },
    #[error("trajectory spans {span:.3} s, need at least {need} s")]
    TrajectoryTooShort { span: f64, need: f64 },
    #[error("invalid evaluation spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

impl TrajectoryPoint {
    pub fn new(t: f64, p: Vec2) -> Self {
        Self { t, x: p.x, y: p.y }
    }

    pub fn pos(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

// ---------------------------------------------------------------------------
// Metrics

/// Total-least-squares direction of a point set, oriented along the motion
/// from its first to its last point.
pub fn fit_line_direction(points: &[Vec2], segment: &'static str) -> Result<Vec2, EvalError> {
    if points.len() < MIN_SEGMENT_POINTS {
        return Err(EvalError::InsufficientPoints { segment, got: points.len() });
    }
    let n = points.len() as f64;
    let c = points.iter().fold(Vec2::ZERO, |a, &p| a + p) * (1.0 / n);
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in points {
        let d = *p - c;
        sxx += d.x * d.x;
        syy += d.y * d.y;
        sxy += d.x * d.y;
    }
    let scale = points.iter().map(|p| p.x.abs().max(p.y.abs())).fold(1.0, f64::max);
    if sxx + syy <= n * (1e-12 * scale).powi(2) {
        return Err(EvalError::DegenerateSegment { segment });
    }
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let mut dir = Vec2::from_angle(theta);
    let travel = points[points.len() - 1] - points[0];
    if travel.dot(dir) < 0.0 {
        dir = -dir;
    }
    Ok(dir)
}

/// Signed angle in degrees from the pre-trigger line to the post-trigger line.
/// Positive is counter-clockwise. Points inside `(trigger_time, trigger_time + blackout)`
/// belong to neither segment.
pub fn fit_direction_change(trajectory: &[TrajectoryPoint], trigger_time: f64, blackout: f64) -> Result<f64, EvalError> {
    let before: Vec<Vec2> = trajectory.iter().filter(|p| p.t <= trigger_time).map(|p| p.pos()).collect();
    let after: Vec<Vec2> = trajectory.iter().filter(|p| p.t >= trigger_time + blackout).map(|p| p.pos()).collect();
    let d1 = fit_line_direction(&before, "before")?;
    let d2 = fit_line_direction(&after, "after")?;
    Ok(d1.cross(d2).atan2(d1.dot(d2)).to_degrees())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedMetrics {
    pub mean_speed: f64,
    /// Percent.
    pub rel_error: f64,
}

/// Time-weighted mean of finite-difference speeds. Intervals that overlap
/// `exclude` are skipped.
pub fn speed_metrics(
    trajectory: &[TrajectoryPoint],
    target_speed: f64,
    exclude: Option<(f64, f64)>,
) -> Result<SpeedMetrics, EvalError> {
    const MIN_SPAN: f64 = 2.0;
    let span = match (trajectory.first(), trajectory.last()) {
        (Some(a), Some(b)) => b.t - a.t,
        _ => 0.0,
    };
    if span + 1e-9 < MIN_SPAN {
        return Err(EvalError::TrajectoryTooShort { span, need: MIN_SPAN });
    }
    let (mut dist, mut time) = (0.0, 0.0);
    for w in trajectory.windows(2) {
        let (a, b) = (w[0], w[1]);
        if let Some((lo, hi)) = exclude {
            if b.t > lo && a.t < hi {
                continue;
            }
        }
        dist += a.pos().distance(b.pos());
        time += b.t - a.t;
    }
    let mean_speed = if time > 0.0 { dist / time } else { 0.0 };
    Ok(SpeedMetrics { mean_speed, rel_error: 100.0 * (mean_speed - target_speed).abs() / target_speed })
}

// ---------------------------------------------------------------------------
// Controllers and command sources

/// Maps the current environment state to an action.
pub trait Controller {
    fn act(&mut self, env: &Env) -> Result<ActionVector, EvalError>;
}

/// Deterministic deployment: the actor's mean action on the policy observation.
#[derive(Debug, Clone)]
pub struct PolicyController<T: Scalar> {
    policy: Policy<T>,
    obs: Vec<T>,
}

impl<T: Scalar> PolicyController<T> {
    pub fn new(policy: Policy<T>) -> Self {
        Self { policy, obs: Vec::new() }
    }

    pub fn policy(&self) -> &Policy<T> {
        &self.policy
    }
}

impl<T: Scalar> Controller for PolicyController<T> {
    fn act(&mut self, env: &Env) -> Result<ActionVector, EvalError> {
        self.obs.clear();
        self.obs.extend(env.observation().iter().map(|&v| T::from_f64(v)));
        let dist = self.policy.forward_actor(&self.obs)?;
        Ok(ActionVector::from_slice(&dist.mean))
    }
}

/// Hand-written dribbler that reads the true world state. Used as a baseline
/// and to exercise the evaluators without a trained network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScriptedDribbler {
    /// Stand-off behind the ball while lining up, m.
    pub approach_offset: f64,
    /// Lateral misalignment tolerated before re-approaching, m.
    pub align_tolerance: f64,
    /// Extra closing speed per metre of gap, 1/s.
    pub gap_gain: f64,
}

impl Default for ScriptedDribbler {
    fn default() -> Self {
        Self { approach_offset: 0.35, align_tolerance: 0.12, gap_gain: 1.5 }
    }
}

impl ScriptedDribbler {
    /// Body-frame lateral offset of the foot that strikes next.
    fn next_foot_lateral(phase: f64, foot_lateral: f64) -> f64 {
        let p = crate::geom::wrap_phase(phase);
        if p <= 0.3 * PI || p > 1.3 * PI {
            foot_lateral
        } else {
            -foot_lateral
        }
    }

    fn desired_motion(&self, world: &WorldState, cmd: Vec2, body: &BodyModel) -> (Vec2, f64, f64) {
        let r = &world.robot;
        let b = &world.ball;
        let speed = cmd.norm();
        if speed < 0.05 {
            // Hold a short distance from the ball without touching it.
            let away = (r.position - b.position).normalized().unwrap_or(-r.heading());
            let goal = b.position + away * 0.6;
            return (((goal - r.position) * 1.5).clamp_norm(1.0), (b.position - r.position).angle(), 0.0);
        }
        let d = cmd * (1.0 / speed);
        // Strike along the velocity change that turns the ball onto the command.
        let dv = cmd - b.velocity;
        let k = if dv.norm() > 0.2 { dv.normalized().unwrap_or(d) } else { d };
        let foot = r.position + body_to_world(Vec2::new(0.0, Self::next_foot_lateral(r.gait_phase, body.foot_lateral)), r.yaw);
        let rel = foot - b.position;
        let along = rel.dot(k);
        let lateral = k.cross(rel);
        let perp = Vec2::new(-k.y, k.x);
        let ball_along = b.velocity.dot(d);
        let wanted_dv = dv.norm();
        if along < -0.1 && lateral.abs() < self.align_tolerance {
            let gap = (-along - 0.25).max(0.0);
            let v = d * (speed.min(ball_along.max(0.0)) + 0.3 + self.gap_gain * gap) - perp * (3.0 * lateral);
            return (v, k.angle(), wanted_dv);
        }
        let mut goal = b.position - k * self.approach_offset;
        if along > -0.2 {
            // Beside or ahead of the ball: swing wide around it.
            let side = if lateral >= 0.0 { 1.0 } else { -1.0 };
            goal = goal + perp * (0.5 * side);
        }
        let v = (goal - (foot - r.position) - r.position) * 3.0 + b.velocity;
        (v.clamp_norm(1.8), k.angle(), 0.0)
    }
}

impl Controller for ScriptedDribbler {
    fn act(&mut self, env: &Env) -> Result<ActionVector, EvalError> {
        let w = env.world();
        let body = &env.config().body;
        let r = &w.robot;
        let (v_des, face, wanted_dv) = self.desired_motion(w, env.command(), body);
        let accel = v_des * body.linear_drag + (v_des - r.linear_velocity) * 4.0;
        let u = world_to_body(accel * (1.0 / body.accel_scale), r.yaw);
        let u_yaw = 3.0 * wrap_pi(face - r.yaw) / body.yaw_rate_max;
        let bearing = wrap_pi((w.ball.position - r.position).angle() - r.yaw);
        let u_pan = 4.0 * (bearing - r.head_pan) / body.head_rate_max;
        let u_kick = 2.0 * (wanted_dv - body.kick_k0) / body.kick_k1 - 1.0;
        Ok(ActionVector { u_fx: u.x, u_fy: u.y, u_yaw, u_pan, u_tilt: 0.0, u_kick }.clamped())
    }
}

/// Supplies the global-frame ball-velocity command each control step.
pub trait CommandSource {
    fn command(&mut self, world: &WorldState) -> Vec2;
}

/// Always points from the ball at the target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StraightToTarget {
    pub target: Vec2,
    pub speed: f64,
}

impl CommandSource for StraightToTarget {
    fn command(&mut self, world: &WorldState) -> Vec2 {
        (self.target - world.ball.position).normalized().map(|d| d * self.speed).unwrap_or(Vec2::ZERO)
    }
}

/// Visits waypoints in order, switching when the ball is within `switch_radius`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaypointCommand {
    pub waypoints: Vec<Vec2>,
    pub speed: f64,
    pub switch_radius: f64,
    pub next: usize,
}

impl WaypointCommand {
    pub fn new(waypoints: Vec<Vec2>, speed: f64, switch_radius: f64) -> Self {
        Self { waypoints, speed, switch_radius, next: 0 }
    }
}

impl CommandSource for WaypointCommand {
    fn command(&mut self, world: &WorldState) -> Vec2 {
        while self.next + 1 < self.waypoints.len()
            && world.ball.position.distance(self.waypoints[self.next]) < self.switch_radius
        {
            self.next += 1;
        }
        match self.waypoints.get(self.next) {
            Some(&w) => StraightToTarget { target: w, speed: self.speed }.command(world),
            None => Vec2::ZERO,
        }
    }
}

/// Piecewise-constant command keyed by simulated time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedCommands {
    /// `(start_time, command)`, sorted by time.
    pub segments: Vec<(f64, Vec2)>,
}

impl CommandSource for TimedCommands {
    fn command(&mut self, world: &WorldState) -> Vec2 {
        self.segments.iter().take_while(|(t, _)| *t <= world.t + 1e-9).last().map(|s| s.1).unwrap_or(Vec2::ZERO)
    }
}

/// Environment constants for evaluation runs: the task logic decides when a
/// run ends, so the training timeout and arena limits are lifted.
pub fn eval_env_config(base: &EnvConfig, horizon: f64) -> EnvConfig {
    let mut c = *base;
    c.t_max = horizon + 1.0;
    c.d_lost = 1e6;
    c.arena_half_size = 1e6;
    c
}

fn eval_params(config: &EnvConfig, randomize: bool, tag: &[u8], key: &[u64]) -> Result<EpisodeParams, EvalError> {
    let ranges = if randomize { config.randomization } else { RandomizationRanges::nominal() };
    let mut rng = keyed_rng(tag, key);
    sample_episode_params(&ranges, &config.body, &mut rng).map_err(|e| EvalError::Env(e.into()))
}

// ---------------------------------------------------------------------------
// Turn-tracking experiment

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TurnExperimentSpec {
    pub trigger_center: Vec2,
    pub trigger_radius: f64,
    /// Positive turns are counter-clockwise (to the left of +x).
    pub turn_angles_deg: Vec<f64>,
    pub target_speed: f64,
    /// Half-width of the uniform speed perturbation, m/s.
    pub perturbation: f64,
    pub rollouts_per_cell: usize,
    /// Logging window after the trigger, s.
    pub post_window: f64,
    /// Excluded from the post-turn fit and the speed metric, s.
    pub blackout: f64,
    /// A trial with no trigger by this time is invalid, s.
    pub trigger_timeout: f64,
    pub ball_start: Vec2,
    pub robot_start: Vec2,
    pub robot_yaw: f64,
    /// Sample physics from the training ranges instead of nominal values.
    pub randomize: bool,
}

impl Default for TurnExperimentSpec {
    fn default() -> Self {
        Self {
            trigger_center: Vec2::new(1.5, 0.0),
            trigger_radius: 0.4,
            turn_angles_deg: vec![45.0, -45.0, 90.0, -90.0],
            target_speed: 1.0,
            perturbation: 0.1,
            rollouts_per_cell: 5,
            post_window: 4.0,
            blackout: 0.5,
            trigger_timeout: 15.0,
            ball_start: Vec2::ZERO,
            robot_start: Vec2::new(-0.35, 0.0),
            robot_yaw: 0.0,
            randomize: false,
        }
    }
}

impl TurnExperimentSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::Spec(m.into()));
        if !(self.trigger_radius > 0.0 && self.trigger_radius.is_finite()) {
            return bad("trigger_radius must be positive");
        }
        if self.turn_angles_deg.is_empty() || self.rollouts_per_cell == 0 {
            return bad("need at least one cell and one rollout");
        }
        if !(self.target_speed > 0.0 && self.perturbation >= 0.0 && self.perturbation < self.target_speed) {
            return bad("target_speed must be positive and exceed the perturbation");
        }
        if !(self.post_window > self.blackout && self.blackout >= 0.0 && self.trigger_timeout > 0.0) {
            return bad("post_window must exceed blackout; timeouts must be positive");
        }
        if self.ball_start.distance(self.trigger_center) <= self.trigger_radius {
            return bad("ball must start outside the trigger circle");
        }
        Ok(())
    }

    pub fn trial_count(&self) -> usize {
        self.turn_angles_deg.len() * self.rollouts_per_cell
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommandEvent {
    pub t: f64,
    pub vx: f64,
    pub vy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub cell: usize,
    pub turn_angle_deg: f64,
    pub rollout: usize,
    pub commanded_speed: f64,
    /// Ball positions at control rate, from the first step the ball moves.
    pub trajectory: Vec<TrajectoryPoint>,
    pub commands: Vec<CommandEvent>,
    pub trigger_time: Option<f64>,
    pub trigger_position: Option<Vec2>,
    /// Ball position one step before the trigger fired.
    pub pre_trigger_position: Option<Vec2>,
    pub fitted_direction_change: Option<f64>,
    /// Percent, against the commanded turn angle.
    pub direction_rel_error: Option<f64>,
    pub mean_speed: Option<f64>,
    /// Percent, against the target speed.
    pub speed_rel_error: Option<f64>,
    pub invalid_reason: Option<String>,
}

impl TrialResult {
    pub fn is_valid(&self) -> bool {
        self.invalid_reason.is_none()
    }
}

/// Runs one trial of one cell.
pub fn run_turn_trial<C: Controller>(
    controller: &mut C,
    spec: &TurnExperimentSpec,
    base: &EnvConfig,
    seed: u64,
    cell: usize,
    rollout: usize,
) -> Result<TrialResult, EvalError> {
    spec.validate()?;
    let angle = spec.turn_angles_deg[cell];
    let index = (cell * spec.rollouts_per_cell + rollout) as u64;
    let mut rng = keyed_rng(b"turn-trial", &[seed, index]);
    let speed = spec.target_speed + spec.perturbation * (2.0 * rng.random::<f64>() - 1.0);
    let cmd0 = Vec2::new(speed, 0.0);

    let horizon = spec.trigger_timeout + spec.post_window;
    let config = eval_env_config(base, horizon);
    let mut env = Env::new(config, StageConfig::stage2(), seed, index)?;
    let world = WorldState::new(RobotState::at(spec.robot_start, spec.robot_yaw), BallState::at_rest(spec.ball_start));
    let params = eval_params(&config, spec.randomize, b"turn-params", &[seed, index])?;
    env.set_command_override(Some(cmd0));
    env.reset_to(world, params)?;

    let mut result = TrialResult {
        cell,
        turn_angle_deg: angle,
        rollout,
        commanded_speed: speed,
        trajectory: Vec::new(),
        commands: vec![CommandEvent { t: 0.0, vx: cmd0.x, vy: cmd0.y }],
        trigger_time: None,
        trigger_position: None,
        pre_trigger_position: None,
        fitted_direction_change: None,
        direction_rel_error: None,
        mean_speed: None,
        speed_rel_error: None,
        invalid_reason: None,
    };
    let mut moving = false;
    let mut prev_ball = spec.ball_start;
    loop {
        let action = controller.act(&env)?;
        let out = env.step(action)?;
        let t = env.world().t;
        let p = env.world().ball.position;
        if !moving && p != spec.ball_start {
            moving = true;
            result.trajectory.push(TrajectoryPoint::new(t - config.dt, prev_ball));
        }
        if moving {
            result.trajectory.push(TrajectoryPoint::new(t, p));
        }
        match result.trigger_time {
            None if p.distance(spec.trigger_center) <= spec.trigger_radius => {
                let cmd1 = cmd0.rotate(angle.to_radians());
                env.set_command_override(Some(cmd1));
                result.trigger_time = Some(t);
                result.trigger_position = Some(p);
                result.pre_trigger_position = Some(prev_ball);
                result.commands.push(CommandEvent { t, vx: cmd1.x, vy: cmd1.y });
            }
            None if t >= spec.trigger_timeout - 1e-9 => {
                result.invalid_reason = Some(format!("ball never entered the trigger circle within {} s", spec.trigger_timeout));
                return Ok(result);
            }
            Some(tt) if t >= tt + spec.post_window - 1e-9 => break,
            _ => {}
        }
        if out.status.done {
            result.invalid_reason = Some(format!("episode ended early ({:?})", out.status.reason));
            return Ok(result);
        }
        prev_ball = p;
    }

    let tt = result.trigger_time.expect("loop exits only after the trigger");
    match fit_direction_change(&result.trajectory, tt, spec.blackout) {
        Ok(change) => {
            result.fitted_direction_change = Some(change);
            result.direction_rel_error = Some(100.0 * (change - angle).abs() / angle.abs().max(1e-12));
        }
        Err(e) => result.invalid_reason = Some(format!("direction fit failed: {e}")),
    }
    match speed_metrics(&result.trajectory, spec.target_speed, Some((tt, tt + spec.blackout))) {
        Ok(m) => {
            result.mean_speed = Some(m.mean_speed);
            result.speed_rel_error = Some(m.rel_error);
        }
        Err(e) => {
            if result.invalid_reason.is_none() {
                result.invalid_reason = Some(format!("speed metric failed: {e}"));
            }
        }
    }
    Ok(result)
}

/// All cells × rollouts. Trials are independent; with the `parallel` feature
/// they run concurrently, each on its own controller clone.
pub fn run_turn_experiment<C: Controller + Clone + Send + Sync>(
    controller: &C,
    spec: &TurnExperimentSpec,
    base: &EnvConfig,
    seed: u64,
) -> Result<Vec<TrialResult>, EvalError> {
    spec.validate()?;
    let jobs: Vec<(usize, usize)> =
        (0..spec.turn_angles_deg.len()).flat_map(|c| (0..spec.rollouts_per_cell).map(move |k| (c, k))).collect();
    let work = |&(c, k): &(usize, usize)| run_turn_trial(&mut controller.clone(), spec, base, seed, c, k);
    #[cfg(feature = "parallel")]
    let results: Vec<Result<TrialResult, EvalError>> = {
        use rayon::prelude::*;
        jobs.par_iter().map(work).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<TrialResult, EvalError>> = jobs.iter().map(work).collect();
    results.into_iter().collect()
}

/// Published hardware results for the same protocol, shown for context:
/// `(turn angle, mean direction change, relative error %)`.
pub const REFERENCE_DIRECTION: [(f64, f64, f64); 4] =
    [(45.0, 43.58, 3.16), (90.0, 88.06, 2.16), (-45.0, -46.44, 3.20), (-90.0, -87.98, 2.24)];

/// Published hardware speed results: `(side, mean speed m/s, relative error %)`.
pub const REFERENCE_SPEED: [(&str, f64, f64); 2] = [("left", 0.898, 10.3), ("right", 0.896, 10.4)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub turn_angle_deg: f64,
    pub requested: usize,
    pub valid: usize,
    pub invalid: usize,
    pub mean_direction_change: Option<f64>,
    /// Relative error of the mean direction change, percent.
    pub direction_rel_error: Option<f64>,
    pub mean_speed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideSummary {
    pub side: String,
    pub valid: usize,
    pub mean_speed: Option<f64>,
    /// Relative error of the mean speed, percent.
    pub speed_rel_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnSummary {
    pub cells: Vec<CellSummary>,
    pub sides: Vec<SideSummary>,
    pub requested: usize,
    pub valid: usize,
    pub invalid: usize,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn summarize_turns(spec: &TurnExperimentSpec, trials: &[TrialResult]) -> TurnSummary {
    let cells = spec
        .turn_angles_deg
        .iter()
        .enumerate()
        .map(|(c, &angle)| {
            let mine: Vec<&TrialResult> = trials.iter().filter(|t| t.cell == c).collect();
            let valid: Vec<&&TrialResult> = mine.iter().filter(|t| t.is_valid()).collect();
            let changes: Vec<f64> = valid.iter().filter_map(|t| t.fitted_direction_change).collect();
            let speeds: Vec<f64> = valid.iter().filter_map(|t| t.mean_speed).collect();
            let m = mean(&changes);
            CellSummary {
                turn_angle_deg: angle,
                requested: mine.len(),
                valid: valid.len(),
                invalid: mine.len() - valid.len(),
                mean_direction_change: m,
                direction_rel_error: m.map(|m| 100.0 * (m - angle).abs() / angle.abs().max(1e-12)),
                mean_speed: mean(&speeds),
            }
        })
        .collect();
    let side = |name: &str, left: bool| {
        let speeds: Vec<f64> = trials
            .iter()
            .filter(|t| t.is_valid() && (t.turn_angle_deg > 0.0) == left)
            .filter_map(|t| t.mean_speed)
            .collect();
        let m = mean(&speeds);
        SideSummary {
            side: name.to_string(),
            valid: speeds.len(),
            mean_speed: m,
            speed_rel_error: m.map(|m| 100.0 * (m - spec.target_speed).abs() / spec.target_speed),
        }
    };
    let valid = trials.iter().filter(|t| t.is_valid()).count();
    TurnSummary {
        cells,
        sides: vec![side("left", true), side("right", false)],
        requested: trials.len(),
        valid,
        invalid: trials.len() - valid,
    }
}

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map(|v| format!("{v:.prec$}")).unwrap_or_else(|| "-".into())
}

/// Plain-text table: one row per cell, then one row per side for speed.
pub fn format_turn_summary(s: &TurnSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:>8} {:>6} {:>8} {:>10} {:>8} {:>10} | {:>10} {:>8}", "turn", "valid", "invalid", "mean_deg", "err_%", "speed", "ref_deg", "ref_err%");
    for c in &s.cells {
        let reference = REFERENCE_DIRECTION.iter().find(|r| (r.0 - c.turn_angle_deg).abs() < 1e-9);
        let _ = writeln!(
            out,
            "{:>8.1} {:>6} {:>8} {:>10} {:>8} {:>10} | {:>10} {:>8}",
            c.turn_angle_deg,
            c.valid,
            c.invalid,
            opt(c.mean_direction_change, 2),
            opt(c.direction_rel_error, 2),
            opt(c.mean_speed, 3),
            opt(reference.map(|r| r.1), 2),
            opt(reference.map(|r| r.2), 2),
        );
    }
    let _ = writeln!(out, "{:>8} {:>6} {:>10} {:>8} | {:>10} {:>8}", "side", "valid", "speed", "err_%", "ref_speed", "ref_err%");
    for sd in &s.sides {
        let reference = REFERENCE_SPEED.iter().find(|r| r.0 == sd.side);
        let _ = writeln!(
            out,
            "{:>8} {:>6} {:>10} {:>8} | {:>10} {:>8}",
            sd.side,
            sd.valid,
            opt(sd.mean_speed, 3),
            opt(sd.speed_rel_error, 2),
            opt(reference.map(|r| r.1), 3),
            opt(reference.map(|r| r.2), 1),
        );
    }
    let _ = writeln!(out, "trials: {} requested, {} valid, {} invalid", s.requested, s.valid, s.invalid);
    out
}

/// Ball trajectories as a static SVG, one polyline per trial, with the
/// trigger circle. World +x points right, +y up.
pub fn trajectories_svg(spec: &TurnExperimentSpec, trials: &[TrialResult]) -> String {
    let pts = trials.iter().flat_map(|t| t.trajectory.iter().map(|p| p.pos()));
    let (mut lo, mut hi) = (Vec2::new(-0.5, -0.5), Vec2::new(2.0, 0.5));
    for p in pts {
        lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
        hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
    }
    let pad = 0.3;
    let (w, h) = (hi.x - lo.x + 2.0 * pad, hi.y - lo.y + 2.0 * pad);
    let scale = 200.0;
    let tx = |p: Vec2| ((p.x - lo.x + pad) * scale, (hi.y - p.y + pad) * scale);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" viewBox="0 0 {:.0} {:.0}">"#,
        w * scale,
        h * scale,
        w * scale,
        h * scale
    );
    let (cx, cy) = tx(spec.trigger_center);
    let _ = writeln!(
        s,
        r##"<circle cx="{cx:.1}" cy="{cy:.1}" r="{:.1}" fill="none" stroke="#888" stroke-dasharray="6 4"/>"##,
        spec.trigger_radius * scale
    );
    for t in trials {
        if t.trajectory.is_empty() {
            continue;
        }
        let line: Vec<String> = t.trajectory.iter().map(|p| tx(p.pos())).map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"><title>turn {} rollout {}</title></polyline>"#,
            colors[t.cell % colors.len()],
            line.join(" "),
            t.turn_angle_deg,
            t.rollout
        );
    }
    s.push_str("</svg>\n");
    s
}

// ---------------------------------------------------------------------------
// Task evaluators

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    DribbleToTarget,
    ObstacleAvoidance,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::DribbleToTarget => "dribble_to_target",
            TaskKind::ObstacleAvoidance => "obstacle_avoidance",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: Vec2,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub ball_start: Vec2,
    pub robot_start: Vec2,
    pub robot_yaw: f64,
    /// Target point; for obstacle avoidance the centre of `target_box`.
    pub target: Vec2,
    pub target_box: Option<Aabb>,
    pub success_radius: f64,
    pub failure_radius: f64,
    /// Field boundary, counter-clockwise polygon.
    pub field: Vec<Vec2>,
    pub obstacles: Vec<Obstacle>,
    pub region: Option<Aabb>,
    pub ball_radius: f64,
    pub timeout: f64,
}

/// Target positions of the dribble-to-target course, 6 m from the start at
/// bearings of −30°, 0° and +30°.
pub fn dribble_targets() -> [Vec2; 3] {
    [-30.0f64, 0.0, 30.0].map(|deg| Vec2::from_angle(deg.to_radians()) * 6.0)
}

impl TaskSpec {
    pub fn dribble_to_target(target: Vec2) -> Self {
        let field = Aabb::new(Vec2::new(-3.0, -6.0), Vec2::new(10.0, 6.0));
        Self {
            kind: TaskKind::DribbleToTarget,
            ball_start: Vec2::ZERO,
            robot_start: Vec2::new(-0.35, 0.0),
            robot_yaw: 0.0,
            target,
            target_box: None,
            success_radius: 1.0,
            failure_radius: 3.0,
            field: field.corners().to_vec(),
            obstacles: Vec::new(),
            region: None,
            ball_radius: 0.11,
            timeout: 60.0,
        }
    }

    pub fn obstacle_avoidance() -> Self {
        let target_box = Aabb::new(Vec2::new(5.5, -1.0), Vec2::new(7.0, 1.0));
        let region = Aabb::new(Vec2::new(-2.0, -3.0), Vec2::new(8.0, 3.0));
        Self {
            kind: TaskKind::ObstacleAvoidance,
            ball_start: Vec2::ZERO,
            robot_start: Vec2::new(-0.35, 0.0),
            robot_yaw: 0.0,
            target: (target_box.min + target_box.max) * 0.5,
            target_box: Some(target_box),
            success_radius: 1.0,
            failure_radius: 3.0,
            field: region.corners().to_vec(),
            obstacles: vec![Obstacle { center: Vec2::new(3.0, 0.0), radius: 0.5 }],
            region: Some(region),
            ball_radius: 0.11,
            timeout: 60.0,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::Spec(m));
        if !(self.success_radius > 0.0 && self.success_radius < self.failure_radius) {
            return bad(format!(
                "need 0 < success_radius < failure_radius, got {} and {}",
                self.success_radius, self.failure_radius
            ));
        }
        if !(self.timeout > 0.0 && self.timeout.is_finite()) || !(self.ball_radius >= 0.0) {
            return bad("timeout must be positive and ball_radius non-negative".into());
        }
        if self.field.len() < 3 || polygon_area(&self.field).abs() <= 0.0 {
            return bad("field polygon needs at least 3 vertices and positive area".into());
        }
        if !point_in_polygon(self.ball_start, &self.field) {
            return bad("ball must start inside the field".into());
        }
        if self.obstacles.iter().any(|o| !(o.radius > 0.0 && o.center.is_finite())) {
            return bad("obstacle radii must be positive".into());
        }
        if self.kind == TaskKind::ObstacleAvoidance {
            match (self.target_box, self.region) {
                (Some(b), Some(r)) if b.is_well_formed() && r.is_well_formed() => {
                    if !r.contains(self.ball_start) || !r.contains(self.robot_start) {
                        return bad("ball and robot must start inside the task region".into());
                    }
                }
                _ => return bad("obstacle_avoidance needs a well-formed target_box and region".into()),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    Timeout,
    ZoneExit,
    OutOfField,
    Collision,
    LeftRegion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskOutcome {
    Success,
    Failure(FailureReason),
}

/// Live task status, also streamed by the server.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskStatus {
    pub kind: TaskKind,
    pub elapsed: f64,
    pub ball_to_target: f64,
    pub entered_failure_zone: bool,
    pub outcome: Option<TaskOutcome>,
}

/// Incremental success/failure rules, fed one world state per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMonitor {
    spec: TaskSpec,
    start_t: f64,
    entered_zone: bool,
    status: TaskStatus,
}

impl TaskMonitor {
    pub fn new(spec: TaskSpec, start_t: f64) -> Result<Self, EvalError> {
        spec.validate()?;
        let status = TaskStatus {
            kind: spec.kind,
            elapsed: 0.0,
            ball_to_target: spec.ball_start.distance(spec.target),
            entered_failure_zone: false,
            outcome: None,
        };
        Ok(Self { spec, start_t, entered_zone: false, status })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn status(&self) -> TaskStatus {
        self.status
    }

    /// Returns the outcome once decided; later calls keep returning it.
    pub fn update(&mut self, world: &WorldState) -> Option<TaskOutcome> {
        if let Some(o) = self.status.outcome {
            return Some(o);
        }
        let ball = world.ball.position;
        let d = ball.distance(self.spec.target);
        self.status.elapsed = world.t - self.start_t;
        self.status.ball_to_target = d;
        let outcome = match self.spec.kind {
            TaskKind::DribbleToTarget => self.dribble_rules(ball, d),
            TaskKind::ObstacleAvoidance => self.obstacle_rules(world),
        };
        let outcome = outcome.or_else(|| {
            (self.status.elapsed >= self.spec.timeout - 1e-9).then_some(TaskOutcome::Failure(FailureReason::Timeout))
        });
        self.status.entered_failure_zone = self.entered_zone;
        self.status.outcome = outcome;
        outcome
    }

    fn dribble_rules(&mut self, ball: Vec2, d: f64) -> Option<TaskOutcome> {
        if d < self.spec.success_radius {
            return Some(TaskOutcome::Success);
        }
        if !point_in_polygon(ball, &self.spec.field) {
            return Some(TaskOutcome::Failure(FailureReason::OutOfField));
        }
        if d <= self.spec.failure_radius {
            self.entered_zone = true;
        } else if self.entered_zone {
            return Some(TaskOutcome::Failure(FailureReason::ZoneExit));
        }
        None
    }

    fn obstacle_rules(&mut self, world: &WorldState) -> Option<TaskOutcome> {
        let ball = world.ball.position;
        let robot = world.robot.position;
        // Only the robot radius from the body model matters here; the default
        // matches the simulator's body.
        let robot_radius = crate::dynamics::BodyModel::default().body_radius;
        for o in &self.spec.obstacles {
            if robot.distance(o.center) < o.radius + robot_radius || ball.distance(o.center) < o.radius + self.spec.ball_radius {
                return Some(TaskOutcome::Failure(FailureReason::Collision));
            }
        }
        let region = self.spec.region.expect("validated");
        if !region.contains(ball) || !region.contains(robot) {
            return Some(TaskOutcome::Failure(FailureReason::LeftRegion));
        }
        if self.spec.target_box.expect("validated").contains(ball) {
            return Some(TaskOutcome::Success);
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub kind: TaskKind,
    pub seed: u64,
    pub success: bool,
    /// Simulated seconds to the outcome.
    pub elapsed: f64,
    pub failure_reason: Option<FailureReason>,
    pub target: Vec2,
}

/// Runs one task trial. Physics are nominal unless `randomize`; the seed
/// drives camera noise and, when randomizing, the episode parameters.
pub fn evaluate_task<C: Controller, S: CommandSource>(
    controller: &mut C,
    commands: &mut S,
    task: &TaskSpec,
    base: &EnvConfig,
    seed: u64,
    randomize: bool,
) -> Result<TaskResult, EvalError> {
    task.validate()?;
    let config = eval_env_config(base, task.timeout);
    let mut env = Env::new(config, StageConfig::stage2(), seed, 0)?;
    let world = WorldState::new(RobotState::at(task.robot_start, task.robot_yaw), BallState::at_rest(task.ball_start));
    let params = eval_params(&config, randomize, b"task-params", &[seed])?;
    env.set_command_override(Some(commands.command(&world)));
    env.reset_to(world, params)?;
    let mut monitor = TaskMonitor::new(task.clone(), 0.0)?;
    loop {
        env.set_command_override(Some(commands.command(env.world())));
        let action = controller.act(&env)?;
        env.step(action)?;
        if let Some(outcome) = monitor.update(env.world()) {
            let failure_reason = match outcome {
                TaskOutcome::Success => None,
                TaskOutcome::Failure(r) => Some(r),
            };
            return Ok(TaskResult {
                kind: task.kind,
                seed,
                success: failure_reason.is_none(),
                elapsed: monitor.status().elapsed,
                failure_reason,
                target: task.target,
            });
        }
    }
}

/// Default command source for a task: straight at the target, or around the
/// first obstacle on its +y side.
pub fn default_command_source(task: &TaskSpec, speed: f64) -> WaypointCommand {
    let mut waypoints = Vec::new();
    if task.kind == TaskKind::ObstacleAvoidance {
        for o in &task.obstacles {
            waypoints.push(o.center + Vec2::new(-o.radius, o.radius + 1.0));
            waypoints.push(o.center + Vec2::new(o.radius, o.radius + 1.0));
        }
    }
    waypoints.push(task.target);
    WaypointCommand::new(waypoints, speed, 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub kind: TaskKind,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Mean over all trials, s.
    pub mean_elapsed: f64,
}

pub fn summarize_tasks(kind: TaskKind, results: &[TaskResult]) -> TaskSummary {
    let successes = results.iter().filter(|r| r.success).count();
    let n = results.len().max(1) as f64;
    TaskSummary {
        kind,
        trials: results.len(),
        successes,
        success_rate: successes as f64 / n,
        mean_elapsed: results.iter().map(|r| r.elapsed).sum::<f64>() / n,
    }
}

/// Dribble-to-target trials cycling through the three course targets, each
/// with a straight-to-target command at `speed`. Seeds are `seed + i`.
pub fn run_dribble_trials<C: Controller + Clone + Send + Sync>(
    controller: &C,
    base: &EnvConfig,
    trials: usize,
    speed: f64,
    seed: u64,
    randomize: bool,
) -> Result<Vec<TaskResult>, EvalError> {
    let targets = dribble_targets();
    let work = |i: &usize| {
        let task = TaskSpec::dribble_to_target(targets[i % targets.len()]);
        let mut src = StraightToTarget { target: task.target, speed };
        evaluate_task(&mut controller.clone(), &mut src, &task, base, seed + *i as u64, randomize)
    };
    let idx: Vec<usize> = (0..trials).collect();
    #[cfg(feature = "parallel")]
    let results: Vec<Result<TaskResult, EvalError>> = {
        use rayon::prelude::*;
        idx.par_iter().map(work).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<TaskResult, EvalError>> = idx.iter().map(work).collect();
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn traj(points: &[Vec2], dt: f64) -> Vec<TrajectoryPoint> {
        points.iter().enumerate().map(|(i, &p)| TrajectoryPoint::new(i as f64 * dt, p)).collect()
    }

    /// `n` evenly spaced points from `a` to `b` inclusive of `a`, exclusive of `b`.
    fn segment(a: Vec2, b: Vec2, n: usize) -> Vec<Vec2> {
        (0..n).map(|i| a + (b - a) * (i as f64 / n as f64)).collect()
    }

    #[test]
    fn straight_trajectory_has_zero_change() {
        let pts = segment(Vec2::ZERO, Vec2::new(4.0, 0.0), 200);
        let tr = traj(&pts, 0.02);
        let change = fit_direction_change(&tr, 2.0, 0.5).unwrap();
        assert!(change.abs() < 1e-9, "{change}");
    }

    #[test]
    fn right_angle_polyline_fits_ninety() {
        // 2 m along +x then 2 m along +y at 1 m/s, 50 Hz; trigger at the corner.
        let mut pts = segment(Vec2::ZERO, Vec2::new(2.0, 0.0), 100);
        pts.extend(segment(Vec2::new(2.0, 0.0), Vec2::new(2.0, 2.0), 100));
        pts.push(Vec2::new(2.0, 2.0));
        let tr = traj(&pts, 0.02);
        let change = fit_direction_change(&tr, 2.0, 0.5).unwrap();
        assert!((change - 90.0).abs() < 0.1, "{change}");
        let reversed: Vec<TrajectoryPoint> = tr.iter().map(|p| TrajectoryPoint { y: -p.y, ..*p }).collect();
        let change = fit_direction_change(&reversed, 2.0, 0.5).unwrap();
        assert!((change + 90.0).abs() < 0.1, "{change}");
    }

    fn noisy_turn(seed: u64, angle_deg: f64, sigma: f64) -> Vec<TrajectoryPoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).unwrap();
        let d2 = Vec2::from_angle(angle_deg.to_radians());
        let corner = Vec2::new(1.5, 0.0);
        let mut pts = segment(Vec2::ZERO, corner, 75);
        pts.extend(segment(corner, corner + d2 * 4.0, 200));
        let clean = traj(&pts, 0.02);
        clean
            .into_iter()
            .map(|p| TrajectoryPoint { x: p.x + noise.sample(&mut rng), y: p.y + noise.sample(&mut rng), ..p })
            .collect()
    }

    #[test]
    fn noisy_forty_five_degree_turn_within_one_degree() {
        for seed in 0..100 {
            let tr = noisy_turn(seed, 45.0, 0.01);
            let change = fit_direction_change(&tr, 1.5, 0.5).unwrap();
            assert!((change - 45.0).abs() < 1.0, "seed {seed}: {change}");
        }
    }

    #[test]
    fn fit_is_rotation_invariant() {
        let tr = noisy_turn(3, 60.0, 0.01);
        let base = fit_direction_change(&tr, 1.5, 0.5).unwrap();
        for k in 0..12 {
            let th = 0.1 + k as f64 * 0.5;
            let rot: Vec<TrajectoryPoint> = tr.iter().map(|p| TrajectoryPoint::new(p.t, p.pos().rotate(th))).collect();
            let c = fit_direction_change(&rot, 1.5, 0.5).unwrap();
            assert!((c - base).abs() < 1e-6, "theta {th}: {c} vs {base}");
        }
    }

    /// A rounded turn: straight, then a circular arc of radius 0.5 m, then
    /// straight, traversed at 1 m/s. Position as a function of time.
    fn rounded_turn(t: f64, angle: f64) -> Vec2 {
        let (t1, r) = (1.5, 0.5);
        let arc_t = r * angle.abs();
        let sgn = angle.signum();
        if t <= t1 {
            return Vec2::new(t, 0.0);
        }
        let centre = Vec2::new(t1, sgn * r);
        if t <= t1 + arc_t {
            let phi = (t - t1) / r;
            return centre + Vec2::from_angle(-sgn * PI / 2.0 + sgn * phi) * r;
        }
        let end = centre + Vec2::from_angle(-sgn * PI / 2.0 + sgn * angle.abs()) * r;
        end + Vec2::from_angle(angle) * (t - t1 - arc_t)
    }

    #[test]
    fn fit_is_invariant_to_time_resampling() {
        let angle = 70f64.to_radians();
        let sample = |dt: f64| -> Vec<TrajectoryPoint> {
            let n = (5.5 / dt).round() as usize;
            (0..=n).map(|i| i as f64 * dt).map(|t| TrajectoryPoint::new(t, rounded_turn(t, angle))).collect()
        };
        let reference = fit_direction_change(&sample(0.02), 1.5, 0.5).unwrap();
        for dt in [0.005, 0.01, 0.04, 0.05, 0.1] {
            let c = fit_direction_change(&sample(dt), 1.5, 0.5).unwrap();
            assert!((c - reference).abs() < 0.5, "dt {dt}: {c} vs {reference}");
        }
    }

    #[test]
    fn fit_errors() {
        let few = traj(&segment(Vec2::ZERO, Vec2::new(1.0, 0.0), 12), 0.1);
        assert!(matches!(fit_direction_change(&few, 0.5, 0.5), Err(EvalError::InsufficientPoints { .. })));
        let mut pts = segment(Vec2::ZERO, Vec2::new(2.0, 0.0), 100);
        pts.extend(std::iter::repeat_n(Vec2::new(2.0, 0.0), 100));
        let tr = traj(&pts, 0.02);
        assert!(matches!(
            fit_direction_change(&tr, 2.0, 0.5),
            Err(EvalError::DegenerateSegment { segment: "after" })
        ));
    }

    #[test]
    fn constant_speed_metric() {
        let pts = segment(Vec2::ZERO, Vec2::new(3.0, 0.0), 150);
        let m = speed_metrics(&traj(&pts, 0.02), 1.0, None).unwrap();
        assert!((m.mean_speed - 1.0).abs() < 1e-9 && m.rel_error < 1e-7);
        let short = traj(&segment(Vec2::ZERO, Vec2::new(1.0, 0.0), 50), 0.02);
        assert!(matches!(speed_metrics(&short, 1.0, None), Err(EvalError::TrajectoryTooShort { .. })));
    }

    #[test]
    fn decaying_speed_matches_closed_form() {
        // v(t) = v0·exp(-k t): mean over [0, T] is v0 (1 - e^{-kT}) / (k T).
        let (v0, k, big_t) = (1.2, 0.4, 4.0);
        let x = |t: f64| v0 / k * (1.0 - (-k * t).exp());
        let n = 200;
        let tr: Vec<TrajectoryPoint> =
            (0..=n).map(|i| i as f64 * big_t / n as f64).map(|t| TrajectoryPoint::new(t, Vec2::new(x(t), 0.0))).collect();
        let analytic = v0 * (1.0 - (-k * big_t).exp()) / (k * big_t);
        let m = speed_metrics(&tr, 1.0, None).unwrap();
        assert!((m.mean_speed - analytic).abs() < 1e-3, "{} vs {analytic}", m.mean_speed);
        assert!((m.rel_error - 100.0 * (analytic - 1.0f64).abs()).abs() < 0.1);
    }

    #[test]
    fn speed_metric_skips_blackout() {
        // 1 m/s everywhere except a fast jump inside the excluded window.
        let mut pts: Vec<TrajectoryPoint> = (0..=150).map(|i| TrajectoryPoint::new(i as f64 * 0.02, Vec2::new(i as f64 * 0.02, 0.0))).collect();
        for p in pts.iter_mut().filter(|p| p.t > 1.0 + 1e-9) {
            p.x += 5.0;
        }
        let m = speed_metrics(&pts, 1.0, Some((1.0, 1.5))).unwrap();
        assert!((m.mean_speed - 1.0).abs() < 1e-9, "{}", m.mean_speed);
    }

    fn world_with_ball(ball: Vec2, t: f64) -> WorldState {
        let mut w = WorldState::new(RobotState::at(ball - Vec2::new(0.3, 0.0), 0.0), BallState::at_rest(ball));
        w.t = t;
        w
    }

    #[test]
    fn dribble_monitor_success_and_zone_exit() {
        let task = TaskSpec::dribble_to_target(Vec2::new(6.0, 0.0));
        let mut m = TaskMonitor::new(task.clone(), 0.0).unwrap();
        for (i, x) in [1.0, 2.5, 3.5, 4.5, 5.5].iter().enumerate() {
            let o = m.update(&world_with_ball(Vec2::new(*x, 0.0), i as f64));
            if *x < 5.0 {
                assert_eq!(o, None);
            } else {
                assert_eq!(o, Some(TaskOutcome::Success));
            }
        }
        // Enters the 3 m zone, stops at 2 m, rolls back out.
        let mut m = TaskMonitor::new(task.clone(), 0.0).unwrap();
        assert_eq!(m.update(&world_with_ball(Vec2::new(3.5, 0.0), 1.0)), None);
        assert_eq!(m.update(&world_with_ball(Vec2::new(4.0, 0.0), 2.0)), None);
        assert!(m.status().entered_failure_zone);
        assert_eq!(m.update(&world_with_ball(Vec2::new(2.9, 0.0), 3.0)), Some(TaskOutcome::Failure(FailureReason::ZoneExit)));
        // Outcome is latched.
        assert_eq!(m.update(&world_with_ball(Vec2::new(6.0, 0.0), 4.0)), Some(TaskOutcome::Failure(FailureReason::ZoneExit)));
        // Field exit and timeout.
        let mut m = TaskMonitor::new(task.clone(), 0.0).unwrap();
        assert_eq!(m.update(&world_with_ball(Vec2::new(2.0, 7.0), 1.0)), Some(TaskOutcome::Failure(FailureReason::OutOfField)));
        let mut m = TaskMonitor::new(task, 0.0).unwrap();
        assert_eq!(m.update(&world_with_ball(Vec2::new(1.0, 0.0), 60.0)), Some(TaskOutcome::Failure(FailureReason::Timeout)));
    }

    #[test]
    fn obstacle_monitor_rules() {
        let task = TaskSpec::obstacle_avoidance();
        let mut m = TaskMonitor::new(task.clone(), 0.0).unwrap();
        // Straight line along y = 0 runs through the obstacle.
        let mut outcome = None;
        for i in 0..70 {
            outcome = m.update(&world_with_ball(Vec2::new(i as f64 * 0.1, 0.0), i as f64 * 0.1));
            if outcome.is_some() {
                break;
            }
        }
        assert_eq!(outcome, Some(TaskOutcome::Failure(FailureReason::Collision)));
        // Detour on the +y side clears it.
        let mut m = TaskMonitor::new(task.clone(), 0.0).unwrap();
        let path = [(0.0, 0.0), (2.0, 1.5), (4.0, 1.5), (6.0, 0.0)];
        let mut outcome = None;
        'outer: for w in path.windows(2) {
            let (a, b) = (Vec2::new(w[0].0, w[0].1), Vec2::new(w[1].0, w[1].1));
            for p in segment(a, b, 20) {
                outcome = m.update(&world_with_ball(p, 1.0));
                if outcome.is_some() {
                    break 'outer;
                }
            }
        }
        assert_eq!(outcome, Some(TaskOutcome::Success));
        let mut m = TaskMonitor::new(task, 0.0).unwrap();
        assert_eq!(m.update(&world_with_ball(Vec2::new(1.0, 3.5), 1.0)), Some(TaskOutcome::Failure(FailureReason::LeftRegion)));
    }

    #[test]
    fn task_spec_validation() {
        let mut t = TaskSpec::dribble_to_target(Vec2::new(6.0, 0.0));
        t.success_radius = 3.0;
        assert!(t.validate().is_err());
        let mut t = TaskSpec::obstacle_avoidance();
        t.region = None;
        assert!(t.validate().is_err());
        assert!(TaskSpec::obstacle_avoidance().validate().is_ok());
    }

    #[test]
    fn command_sources() {
        let w = world_with_ball(Vec2::ZERO, 0.0);
        let c = StraightToTarget { target: Vec2::new(0.0, 3.0), speed: 0.8 }.command(&w);
        assert!((c - Vec2::new(0.0, 0.8)).norm() < 1e-12);
        let mut wp = WaypointCommand::new(vec![Vec2::new(0.2, 0.0), Vec2::new(5.0, 0.0)], 1.0, 0.5);
        let c = wp.command(&w);
        assert_eq!(wp.next, 1);
        assert!((c - Vec2::new(1.0, 0.0)).norm() < 1e-12);
        let mut tc = TimedCommands { segments: vec![(0.0, Vec2::new(1.0, 0.0)), (2.0, Vec2::new(0.0, 1.0))] };
        assert_eq!(tc.command(&world_with_ball(Vec2::ZERO, 1.99)), Vec2::new(1.0, 0.0));
        assert_eq!(tc.command(&world_with_ball(Vec2::ZERO, 2.0)), Vec2::new(0.0, 1.0));
    }

    #[test]
    fn scripted_dribbler_reaches_a_straight_target() {
        let task = TaskSpec::dribble_to_target(Vec2::new(6.0, 0.0));
        let mut src = StraightToTarget { target: task.target, speed: 1.0 };
        let r = evaluate_task(&mut ScriptedDribbler::default(), &mut src, &task, &EnvConfig::default(), 1, false).unwrap();
        assert!(r.success, "{r:?}");
        assert!(r.elapsed > 3.0 && r.elapsed < 30.0, "{r:?}");
    }

    #[test]
    fn task_evaluation_is_deterministic() {
        let task = TaskSpec::dribble_to_target(dribble_targets()[0]);
        let run = || {
            let mut src = StraightToTarget { target: task.target, speed: 1.0 };
            evaluate_task(&mut ScriptedDribbler::default(), &mut src, &task, &EnvConfig::default(), 9, true).unwrap()
        };
        assert_eq!(run(), run());
    }

    /// Controller that never moves.
    #[derive(Clone)]
    struct Idle;

    impl Controller for Idle {
        fn act(&mut self, _: &Env) -> Result<ActionVector, EvalError> {
            Ok(ActionVector::ZERO)
        }
    }

    #[test]
    fn idle_controller_times_out_and_turn_trials_are_invalid() {
        let task = TaskSpec::dribble_to_target(Vec2::new(6.0, 0.0));
        let mut task_short = task.clone();
        task_short.timeout = 2.0;
        let mut src = StraightToTarget { target: task.target, speed: 1.0 };
        let r = evaluate_task(&mut Idle, &mut src, &task_short, &EnvConfig::default(), 0, false).unwrap();
        assert_eq!(r.failure_reason, Some(FailureReason::Timeout));
        assert!((r.elapsed - 2.0).abs() < 1e-9);

        let spec = TurnExperimentSpec { trigger_timeout: 1.0, rollouts_per_cell: 2, ..Default::default() };
        let trials = run_turn_experiment(&Idle, &spec, &EnvConfig::default(), 0).unwrap();
        assert_eq!(trials.len(), 8);
        let s = summarize_turns(&spec, &trials);
        assert_eq!(s.valid + s.invalid, s.requested);
        assert_eq!(s.invalid, 8);
        assert!(trials.iter().all(|t| t.invalid_reason.as_deref().unwrap().contains("trigger")));
    }

    #[test]
    fn turn_protocol_with_scripted_dribbler() {
        let spec = TurnExperimentSpec::default();
        let trials = run_turn_experiment(&ScriptedDribbler::default(), &spec, &EnvConfig::default(), 4).unwrap();
        assert_eq!(trials.len(), 20);
        for t in &trials {
            assert!((t.commanded_speed - 1.0).abs() <= 0.1 + 1e-12);
            let c0 = t.commands[0];
            assert_eq!((c0.t, c0.vy), (0.0, 0.0));
            assert!((c0.vx - t.commanded_speed).abs() < 1e-12);
            let tp = t.trigger_position.expect("scripted dribbler reaches the circle");
            assert!(tp.distance(spec.trigger_center) <= spec.trigger_radius);
            assert!(t.pre_trigger_position.unwrap().distance(spec.trigger_center) > spec.trigger_radius);
            let c1 = t.commands[1];
            let expected = Vec2::new(c0.vx, c0.vy).rotate(t.turn_angle_deg.to_radians());
            assert!((Vec2::new(c1.vx, c1.vy) - expected).norm() < 1e-12);
        }
        let s = summarize_turns(&spec, &trials);
        let table = format_turn_summary(&s);
        assert_eq!(table.lines().count(), 1 + 4 + 1 + 2 + 1, "{table}");
        let svg = trajectories_svg(&spec, &trials);
        assert_eq!(svg.matches("<polyline").count(), 20);
    }
}
