//! Tele-operation wire protocol: single-line JSON documents tagged by
//! `"type"`. The message catalog with examples is in `docs/protocol.md`.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dynamics::{BallState, RobotState, WorldState};
use crate::env::{Env, TerminationReason};
use crate::eval::{dribble_targets, FailureReason, TaskSpec, TaskStatus};
use crate::geom::Vec2;
use crate::perception::fov_polygon;
use crate::rewards::{RewardBreakdown, RewardTerms};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    #[default]
    OpenField,
    DribbleToTarget,
    ObstacleAvoidance,
}

impl Scenario {
    /// Task rules for the scenario; `target` picks one of the three
    /// dribble-to-target course targets (default the middle one).
    pub fn task(self, target: Option<usize>) -> Option<TaskSpec> {
        match self {
            Scenario::OpenField => None,
            Scenario::DribbleToTarget => {
                let targets = dribble_targets();
                Some(TaskSpec::dribble_to_target(targets[target.unwrap_or(1).min(targets.len() - 1)]))
            }
            Scenario::ObstacleAvoidance => Some(TaskSpec::obstacle_avoidance()),
        }
    }

    /// Robot behind the ball at the origin, facing +x.
    pub fn initial_world(self, task: Option<&TaskSpec>) -> WorldState {
        let (robot, yaw, ball) = match task {
            Some(t) => (t.robot_start, t.robot_yaw, t.ball_start),
            None => (Vec2::new(-0.35, 0.0), 0.0, Vec2::ZERO),
        };
        WorldState::new(RobotState::at(robot, yaw), BallState::at_rest(ball))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    /// Global-frame ball-velocity command, m/s. Already scaled by the client.
    Command { vx: f64, vy: f64 },
    Reset {
        scenario: Scenario,
        #[serde(default)]
        target: Option<usize>,
    },
    Pause,
    Resume,
}

impl ClientMessage {
    pub fn parse(line: &str) -> Result<Self, String> {
        let m: ClientMessage = serde_json::from_str(line).map_err(|e| format!("malformed message: {e}"))?;
        if let ClientMessage::Command { vx, vy } = m {
            if !(vx.is_finite() && vy.is_finite()) {
                return Err("command components must be finite".into());
            }
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Controller,
    Spectator,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotSnapshot {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub vx: f64,
    pub vy: f64,
    pub yaw_rate: f64,
    pub head_pan: f64,
    pub head_tilt: f64,
    pub gait_phase: f64,
}

impl From<&RobotState> for RobotSnapshot {
    fn from(r: &RobotState) -> Self {
        Self {
            x: r.position.x,
            y: r.position.y,
            yaw: r.yaw,
            vx: r.linear_velocity.x,
            vy: r.linear_velocity.y,
            yaw_rate: r.yaw_rate,
            head_pan: r.head_pan,
            head_tilt: r.head_tilt,
            gait_phase: r.gait_phase,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BallSnapshot {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

impl From<&BallState> for BallSnapshot {
    fn from(b: &BallState) -> Self {
        Self { x: b.position.x, y: b.position.y, vx: b.velocity.x, vy: b.velocity.y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommandEcho {
    pub vx: f64,
    pub vy: f64,
}

impl From<Vec2> for CommandEcho {
    fn from(v: Vec2) -> Self {
        Self { vx: v.x, vy: v.y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardSnapshot {
    pub total: f64,
    /// Unweighted term values.
    pub terms: RewardTerms,
}

impl From<&RewardBreakdown> for RewardSnapshot {
    fn from(r: &RewardBreakdown) -> Self {
        Self { total: r.total, terms: r.terms }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMessage {
    /// Simulated time since the last reset, s.
    pub t: f64,
    /// Increments by one per state message.
    pub seq: u64,
    pub paused: bool,
    pub scenario: Scenario,
    pub robot: RobotSnapshot,
    pub ball: BallSnapshot,
    /// Ground footprint of the camera frustum, counter-clockwise `[x, y]` vertices.
    pub fov: Vec<[f64; 2]>,
    pub ball_visible: bool,
    /// The command currently in the policy observation.
    pub command: CommandEcho,
    pub reward: RewardSnapshot,
    pub task: Option<TaskStatus>,
}

impl StateMessage {
    pub fn capture(env: &Env, seq: u64, paused: bool, scenario: Scenario, reward: RewardSnapshot, task: Option<TaskStatus>) -> Self {
        let w = env.world();
        Self {
            t: w.t,
            seq,
            paused,
            scenario,
            robot: (&w.robot).into(),
            ball: (&w.ball).into(),
            fov: fov_polygon(env.camera(), &w.robot).into_iter().map(|p| [p.x, p.y]).collect(),
            ball_visible: env.ball_observation().visible,
            command: env.command().into(),
            reward,
            task,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    EpisodeEnd { t: f64, reason: TerminationReason },
    TaskResult { t: f64, scenario: Scenario, success: bool, elapsed: f64, failure_reason: Option<FailureReason> },
    Reset { t: f64, scenario: Scenario },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello {
        protocol_version: u32,
        role: Role,
        rate_hz: f64,
        dt: f64,
        /// Commands are clamped to this magnitude, m/s.
        v_cmd_max: f64,
        layout: String,
    },
    State(StateMessage),
    Event(Event),
    Error { message: String },
}

impl ServerMessage {
    /// Compact single-line JSON.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }
}

const ROBOT_KEYS: &[&str] = &["x", "y", "yaw", "vx", "vy", "yaw_rate", "head_pan", "head_tilt", "gait_phase"];
const BALL_KEYS: &[&str] = &["x", "y", "vx", "vy"];
const TERM_KEYS: &[&str] = &RewardTerms::NAMES;
const TASK_KEYS: &[&str] = &["kind", "elapsed", "ball_to_target", "entered_failure_zone", "outcome"];

fn keys_exactly(v: &Value, keys: &[&str], what: &str) -> Result<(), String> {
    let obj = v.as_object().ok_or_else(|| format!("{what} must be an object"))?;
    for k in keys {
        if !obj.contains_key(*k) {
            return Err(format!("{what} is missing `{k}`"));
        }
    }
    if let Some(extra) = obj.keys().find(|k| !keys.contains(&k.as_str())) {
        return Err(format!("{what} has unexpected key `{extra}`"));
    }
    Ok(())
}

fn numbers(v: &Value, keys: &[&str], what: &str) -> Result<(), String> {
    for k in keys {
        if !v[*k].is_number() {
            return Err(format!("{what}.{k} must be a number"));
        }
    }
    Ok(())
}

/// Checks a server message against the published catalog: known type tag,
/// exact key sets and value kinds.
pub fn validate_server_message(line: &str) -> Result<(), String> {
    if line.contains('\n') {
        return Err("message spans more than one line".into());
    }
    let v: Value = serde_json::from_str(line).map_err(|e| format!("not JSON: {e}"))?;
    let ty = v["type"].as_str().ok_or("missing string `type`")?;
    match ty {
        "hello" => {
            keys_exactly(&v, &["type", "protocol_version", "role", "rate_hz", "dt", "v_cmd_max", "layout"], "hello")?;
            numbers(&v, &["protocol_version", "rate_hz", "dt", "v_cmd_max"], "hello")?;
            matches!(v["role"].as_str(), Some("controller" | "spectator")).then_some(()).ok_or("hello.role invalid")?;
        }
        "state" => {
            let keys = [
                "type", "t", "seq", "paused", "scenario", "robot", "ball", "fov", "ball_visible", "command", "reward", "task",
            ];
            keys_exactly(&v, &keys, "state")?;
            numbers(&v, &["t", "seq"], "state")?;
            keys_exactly(&v["robot"], ROBOT_KEYS, "state.robot")?;
            numbers(&v["robot"], ROBOT_KEYS, "state.robot")?;
            keys_exactly(&v["ball"], BALL_KEYS, "state.ball")?;
            numbers(&v["ball"], BALL_KEYS, "state.ball")?;
            keys_exactly(&v["command"], &["vx", "vy"], "state.command")?;
            numbers(&v["command"], &["vx", "vy"], "state.command")?;
            keys_exactly(&v["reward"], &["total", "terms"], "state.reward")?;
            keys_exactly(&v["reward"]["terms"], TERM_KEYS, "state.reward.terms")?;
            let fov = v["fov"].as_array().ok_or("state.fov must be an array")?;
            if fov.iter().any(|p| p.as_array().is_none_or(|a| a.len() != 2 || !a.iter().all(Value::is_number))) {
                return Err("state.fov must hold [x, y] pairs".into());
            }
            if !v["ball_visible"].is_boolean() || !v["paused"].is_boolean() {
                return Err("state.ball_visible and state.paused must be booleans".into());
            }
            if !v["task"].is_null() {
                keys_exactly(&v["task"], TASK_KEYS, "state.task")?;
            }
        }
        "event" => {
            let ev = v["event"].as_str().ok_or("event needs a string `event`")?;
            let keys: &[&str] = match ev {
                "episode_end" => &["type", "event", "t", "reason"],
                "task_result" => &["type", "event", "t", "scenario", "success", "elapsed", "failure_reason"],
                "reset" => &["type", "event", "t", "scenario"],
                other => return Err(format!("unknown event `{other}`")),
            };
            keys_exactly(&v, keys, "event")?;
        }
        "error" => {
            keys_exactly(&v, &["type", "message"], "error")?;
            v["message"].as_str().ok_or("error.message must be a string")?;
        }
        other => return Err(format!("unknown message type `{other}`")),
    }
    Ok(())
}
