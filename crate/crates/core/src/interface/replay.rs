//! Headless scripted-command rollouts written as line-delimited JSON.
//!
//! The first line is a header; each following line is one control step:
//! `{"t", "state": {"robot", "ball", "ball_visible"}, "action", "reward", "command"}`.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{layout_descriptor, Env, EnvConfig, StageConfig};
use crate::eval::{eval_env_config, CommandSource, Controller, EvalError};
use crate::geom::Vec2;
use crate::interface::wire::{BallSnapshot, CommandEcho, RewardSnapshot, RobotSnapshot, Scenario};
use crate::randomization::EpisodeParams;

pub const REPLAY_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("replay write failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("replay record error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayHeader {
    pub replay_version: u32,
    pub layout: String,
    pub seed: u64,
    pub dt: f64,
    pub scenario: Scenario,
    pub duration: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayState {
    pub robot: RobotSnapshot,
    pub ball: BallSnapshot,
    pub ball_visible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    /// Time after the step, s.
    pub t: f64,
    /// State after the step.
    pub state: ReplayState,
    /// Action applied at this step (before delay and clamping).
    pub action: [f64; 6],
    pub reward: RewardSnapshot,
    /// Command in force during the step.
    pub command: CommandEcho,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaySummary {
    pub steps: u64,
    pub total_reward: f64,
    pub final_ball: Vec2,
}

/// Runs `duration` seconds from the scenario's start pose with nominal
/// physics, writing a header and one record per step.
pub fn play<C: Controller, S: CommandSource, W: Write>(
    controller: &mut C,
    commands: &mut S,
    scenario: Scenario,
    base: &EnvConfig,
    seed: u64,
    duration: f64,
    mut out: W,
) -> Result<PlaySummary, ReplayError> {
    let config = eval_env_config(base, duration);
    let header = ReplayHeader { replay_version: REPLAY_VERSION, layout: layout_descriptor(), seed, dt: config.dt, scenario, duration };
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    let mut env = Env::new(config, StageConfig::stage2(), seed, 0).map_err(EvalError::from)?;
    let task = scenario.task(None);
    let world = scenario.initial_world(task.as_ref());
    env.set_command_override(Some(commands.command(&world)));
    env.reset_to(world, EpisodeParams::nominal(config.body)).map_err(EvalError::from)?;
    let steps = (duration / config.dt).round() as u64;
    let mut total = 0.0;
    for _ in 0..steps {
        let cmd = commands.command(env.world());
        env.set_command_override(Some(cmd));
        let action = controller.act(&env)?;
        let o = env.step(action).map_err(EvalError::from)?;
        total += o.reward.total;
        let w = env.world();
        let rec = ReplayRecord {
            t: w.t,
            state: ReplayState { robot: (&w.robot).into(), ball: (&w.ball).into(), ball_visible: env.ball_observation().visible },
            action: action.to_array(),
            reward: (&o.reward).into(),
            command: cmd.into(),
        };
        writeln!(out, "{}", serde_json::to_string(&rec)?)?;
    }
    out.flush()?;
    Ok(PlaySummary { steps, total_reward: total, final_ball: env.world().ball.position })
}

/// Parses `"t:vx,vy;t:vx,vy;..."` into a timed command schedule.
pub fn parse_command_script(s: &str) -> Result<crate::eval::TimedCommands, String> {
    let mut segments = Vec::new();
    for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (t, v) = part.split_once(':').ok_or_else(|| format!("`{part}`: expected t:vx,vy"))?;
        let (vx, vy) = v.split_once(',').ok_or_else(|| format!("`{part}`: expected t:vx,vy"))?;
        let num = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("`{part}`: {e}"));
        segments.push((num(t)?, Vec2::new(num(vx)?, num(vy)?)));
    }
    if segments.is_empty() {
        return Err("empty command script".into());
    }
    if segments.windows(2).any(|w| w[1].0 < w[0].0) {
        return Err("command script times must be non-decreasing".into());
    }
    Ok(crate::eval::TimedCommands { segments })
}

/// Straight, left, back, then stop.
pub const DEFAULT_COMMAND_SCRIPT: &str = "0:1,0;5:0,1;10:-1,0;15:0,0";
