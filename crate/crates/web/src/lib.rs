//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Three operations: the camera footprint for a robot pose, a live dribbling
//! sandbox driven by the scripted dribbler, and the two-segment turn fit.

use dribble_core::dynamics::{BallState, RobotState, WorldState};
use dribble_core::env::{Env, EnvConfig, StageConfig};
use dribble_core::eval::{eval_env_config, fit_line_direction, Controller, ScriptedDribbler, TaskMonitor};
use dribble_core::geom::Vec2;
use dribble_core::interface::wire::{RewardSnapshot, Scenario, ServerMessage, StateMessage};
use dribble_core::perception::{fov_polygon, in_fov, CameraModel};
use dribble_core::randomization::EpisodeParams;
use wasm_bindgen::prelude::*;

fn posed_robot(x: f64, y: f64, yaw: f64, head_pan: f64, head_tilt: f64) -> RobotState {
    RobotState { head_pan, head_tilt, ..RobotState::at(Vec2::new(x, y), yaw) }
}

/// Ground footprint of the camera view as flat `[x0, y0, x1, y1, ...]`.
#[wasm_bindgen]
pub fn fov_footprint(x: f64, y: f64, yaw: f64, head_pan: f64, head_tilt: f64, fov_scale: f64) -> Vec<f64> {
    let cam = CameraModel::default().with_fov_scale(fov_scale);
    fov_polygon(&cam, &posed_robot(x, y, yaw, head_pan, head_tilt)).iter().flat_map(|p| [p.x, p.y]).collect()
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn ball_in_view(x: f64, y: f64, yaw: f64, head_pan: f64, head_tilt: f64, fov_scale: f64, bx: f64, by: f64) -> bool {
    let cam = CameraModel::default().with_fov_scale(fov_scale);
    in_fov(&cam, &posed_robot(x, y, yaw, head_pan, head_tilt), Vec2::new(bx, by))
}

fn parse_scenario(name: &str) -> Result<Scenario, String> {
    serde_json::from_value(serde_json::Value::String(name.into())).map_err(|_| format!("unknown scenario `{name}`"))
}

/// Real-time world stepped from JavaScript, one state line per frame.
#[wasm_bindgen]
pub struct Sandbox {
    env: Env,
    ctrl: ScriptedDribbler,
    scenario: Scenario,
    monitor: Option<TaskMonitor>,
    reward: RewardSnapshot,
    seq: u64,
}

#[wasm_bindgen]
impl Sandbox {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> Result<Sandbox, String> {
        let config = eval_env_config(&EnvConfig::default(), 1e6);
        let env = Env::new(config, StageConfig::stage2(), seed, 0).map_err(|e| e.to_string())?;
        let mut s =
            Sandbox { env, ctrl: ScriptedDribbler::default(), scenario: Scenario::OpenField, monitor: None, reward: RewardSnapshot::default(), seq: 0 };
        s.env.set_command_override(Some(Vec2::ZERO));
        s.reset("open_field")?;
        Ok(s)
    }

    /// `open_field`, `dribble_to_target` or `obstacle_avoidance`.
    pub fn reset(&mut self, scenario: &str) -> Result<(), String> {
        let scenario = parse_scenario(scenario)?;
        let task = scenario.task(None);
        let world = scenario.initial_world(task.as_ref());
        let body = self.env.config().body;
        self.env.reset_to(world, EpisodeParams::nominal(body)).map_err(|e| e.to_string())?;
        self.monitor = task.map(|t| TaskMonitor::new(t, 0.0)).transpose().map_err(|e| e.to_string())?;
        self.scenario = scenario;
        self.reward = RewardSnapshot::default();
        Ok(())
    }

    /// Ball-velocity command, m/s; clamped to the command limit.
    pub fn set_command(&mut self, vx: f64, vy: f64) {
        self.env.set_command_override(Some(Vec2::new(vx, vy)));
    }

    /// Advances `n` control steps. The scenario restarts when an episode ends
    /// or the task is decided.
    pub fn step(&mut self, n: u32) -> Result<(), String> {
        for _ in 0..n {
            let a = self.ctrl.act(&self.env).map_err(|e| e.to_string())?;
            let out = self.env.step(a).map_err(|e| e.to_string())?;
            self.reward = (&out.reward).into();
            let decided = self.monitor.as_mut().and_then(|m| m.update(self.env.world())).is_some();
            if out.status.done || decided {
                let name = serde_json::to_value(self.scenario).map_err(|e| e.to_string())?;
                self.reset(name.as_str().unwrap_or("open_field"))?;
            }
        }
        Ok(())
    }

    pub fn time(&self) -> f64 {
        self.env.world().t
    }

    /// The same state line the tele-operation server streams.
    pub fn state_json(&mut self) -> String {
        self.seq += 1;
        let task = self.monitor.as_ref().map(|m| m.status());
        ServerMessage::State(StateMessage::capture(&self.env, self.seq, false, self.scenario, self.reward, task)).to_line()
    }

    /// Moves the ball, keeping the robot where it is.
    pub fn place_ball(&mut self, x: f64, y: f64) -> Result<(), String> {
        let w = self.env.world();
        let world = WorldState::new(w.robot, BallState::at_rest(Vec2::new(x, y)));
        let body = self.env.config().body;
        self.env.reset_to(world, EpisodeParams::nominal(body)).map(|_| ()).map_err(|e| e.to_string())
    }
}

/// Fits a line to points `[..=split]` and another to points `[split + skip..]`
/// of a flat `[x0, y0, ...]` polyline. Returns `[angle_deg, c1x, c1y, d1x, d1y,
/// c2x, c2y, d2x, d2y]` with centroids `c` and unit directions `d`; the angle is
/// counter-clockwise positive.
#[wasm_bindgen]
pub fn fit_turn(points: &[f64], split: usize, skip: usize) -> Result<Vec<f64>, String> {
    let pts: Vec<Vec2> = points.chunks_exact(2).map(|c| Vec2::new(c[0], c[1])).collect();
    if split >= pts.len() {
        return Err(format!("split {split} is past the last of {} points", pts.len()));
    }
    let before = &pts[..=split];
    let after = pts.get(split + skip..).unwrap_or(&[]);
    let d1 = fit_line_direction(before, "before").map_err(|e| e.to_string())?;
    let d2 = fit_line_direction(after, "after").map_err(|e| e.to_string())?;
    let centroid = |s: &[Vec2]| s.iter().fold(Vec2::ZERO, |a, &p| a + p) * (1.0 / s.len() as f64);
    let (c1, c2) = (centroid(before), centroid(after));
    let angle = d1.cross(d2).atan2(d1.dot(d2)).to_degrees();
    Ok(vec![angle, c1.x, c1.y, d1.x, d1.y, c2.x, c2.y, d2.x, d2.y])
}
