//! The dribbling MDP: reset, step, observation layout, command schedule,
//! termination and the two-stage curriculum.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{step_dynamics, ActionVector, BallState, BodyModel, DynamicsError, RobotState, WorldState};
use crate::geom::{world_to_body, Aabb, Vec2};
use crate::perception::{BallObservation, BallTracker, CameraError, CameraModel};
use crate::randomization::{lane_rng, sample_episode_params, DelayQueue, EpisodeParams, RandomizationError, RandomizationRanges, Range};
use crate::rewards::{
    r_action_rate, r_ball_velocity, r_ball_velocity_projected, r_chase, r_gait, r_in_view, r_upright_proxy,
    total_reward, BallVelocityMode, RewardBreakdown, RewardShaping, RewardTerms, RewardWeights,
};

pub const OBS_DIM: usize = 23;
pub const PRIV_DIM: usize = 32;

/// Bumped whenever the observation or privileged layout changes.
pub const OBS_LAYOUT_VERSION: u32 = 1;

/// `(name, width)` of each observation block, in order.
pub const OBS_LAYOUT: [(&str, usize); 10] = [
    ("v_cmd_world", 2),
    ("body_velocity", 2),
    ("yaw_rate", 1),
    ("sin_cos_yaw", 2),
    ("head_pan_tilt_rates", 4),
    ("ball_rel_position", 2),
    ("ball_visible", 1),
    ("ball_age_norm", 1),
    ("clock_sin_negsin", 2),
    ("prev_action", 6),
];

/// Blocks appended to the observation to form the critic input.
pub const PRIV_EXTRA_LAYOUT: [(&str, usize); 6] = [
    ("true_ball_rel_position", 2),
    ("true_ball_velocity_world", 2),
    ("terrain_friction", 1),
    ("kick_gain", 1),
    ("rolling_decel", 1),
    ("last_kick_world", 2),
];

pub type Observation = [f64; OBS_DIM];
pub type Privileged = [f64; PRIV_DIM];

/// Index of the first head-joint entry in the observation.
const HEAD_OFFSET: usize = 7;

/// Text form of the layout, stored in checkpoints and echoed by the server.
pub fn layout_descriptor() -> String {
    let block = |l: &[(&str, usize)]| l.iter().map(|(n, w)| format!("{n}:{w}")).collect::<Vec<_>>().join(",");
    format!("v{OBS_LAYOUT_VERSION}|obs[{}]|priv+[{}]", block(&OBS_LAYOUT), block(&PRIV_EXTRA_LAYOUT))
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("step called on a finished episode (reset first)")]
    EpisodeDone,
    #[error("config error: {0}")]
    Config(String),
    #[error("lane {lane}: {source}")]
    Lane { lane: usize, source: Box<EnvError> },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Randomization(#[from] RandomizationError),
    #[error(transparent)]
    Camera(#[from] CameraError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CommandConfig {
    pub resample_period: f64,
    pub speed: Range,
    pub v_cmd_max: f64,
    /// Probability that a freshly sampled command is zero.
    pub zero_prob: f64,
}

impl Default for CommandConfig {
    fn default() -> Self {
        Self { resample_period: 4.0, speed: Range::new(0.3, 1.5), v_cmd_max: 1.5, zero_prob: 0.1 }
    }
}

impl CommandConfig {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec2 {
        let zero = rng.random::<f64>() < self.zero_prob;
        let dir = Vec2::from_angle(rng.random::<f64>() * std::f64::consts::TAU);
        let speed = self.speed.sample(rng);
        if zero {
            Vec2::ZERO
        } else {
            (dir * speed).clamp_norm(self.v_cmd_max)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage_id: u8,
    /// Ball spawn distance from the robot, m.
    pub ball_spawn_range: Range,
    pub fov_scale: f64,
    pub weights: RewardWeights,
    pub gait_reference_enabled: bool,
}

impl StageConfig {
    pub fn stage1() -> Self {
        Self {
            stage_id: 1,
            ball_spawn_range: Range::new(8.0, 12.0),
            fov_scale: 2.0,
            weights: RewardWeights::stage1(),
            gait_reference_enabled: true,
        }
    }

    pub fn stage2() -> Self {
        Self {
            stage_id: 2,
            ball_spawn_range: Range::new(0.5, 2.0),
            fov_scale: 1.0,
            weights: RewardWeights::stage2(),
            gait_reference_enabled: false,
        }
    }

    pub fn defaults_for(stage_id: u8) -> Result<Self, EnvError> {
        match stage_id {
            1 => Ok(Self::stage1()),
            2 => Ok(Self::stage2()),
            other => Err(EnvError::Config(format!("unknown stage_id {other}"))),
        }
    }

    /// Weights as applied: the gait weight is forced to zero when the
    /// reference is disabled.
    pub fn effective_weights(&self) -> RewardWeights {
        let mut w = self.weights;
        if !self.gait_reference_enabled {
            w.w_gait = 0.0;
        }
        w
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if !matches!(self.stage_id, 1 | 2) {
            return Err(EnvError::Config(format!("unknown stage_id {}", self.stage_id)));
        }
        let r = self.ball_spawn_range;
        if !(r.min.is_finite() && r.max.is_finite() && 0.0 <= r.min && r.min <= r.max) {
            return Err(EnvError::Config(format!("stage {} ball_spawn_range invalid", self.stage_id)));
        }
        if !(self.fov_scale.is_finite() && self.fov_scale > 0.0) {
            return Err(EnvError::Config(format!("stage {} fov_scale must be positive", self.stage_id)));
        }
        if !self.weights.is_finite() {
            return Err(EnvError::Config(format!("stage {} weights must be finite", self.stage_id)));
        }
        Ok(())
    }
}

/// Episode constants shared by every lane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub dt: f64,
    /// Episode timeout, s.
    pub t_max: f64,
    /// Ball farther than this from the robot ends the episode, m.
    pub d_lost: f64,
    /// Half side of the square arena centred on the origin, m.
    pub arena_half_size: f64,
    pub command: CommandConfig,
    pub camera: CameraModel,
    pub body: BodyModel,
    pub shaping: RewardShaping,
    pub randomization: RandomizationRanges,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            dt: 0.02,
            t_max: 20.0,
            d_lost: 15.0,
            arena_half_size: 20.0,
            command: CommandConfig::default(),
            camera: CameraModel::default(),
            body: BodyModel::default(),
            shaping: RewardShaping::default(),
            randomization: RandomizationRanges::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let positive = [
            ("dt", self.dt),
            ("t_max", self.t_max),
            ("d_lost", self.d_lost),
            ("arena_half_size", self.arena_half_size),
            ("command.resample_period", self.command.resample_period),
            ("shaping.velocity_sigma", self.shaping.velocity_sigma),
            ("shaping.chase_scale", self.shaping.chase_scale),
            ("shaping.gait_sigma", self.shaping.gait_sigma),
            ("shaping.gait_speed_gate", self.shaping.gait_speed_gate),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(EnvError::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.command.zero_prob) {
            return Err(EnvError::Config("command.zero_prob must be in [0, 1]".into()));
        }
        let s = self.command.speed;
        if !(s.min >= 0.0 && s.min <= s.max && s.max <= self.command.v_cmd_max) {
            return Err(EnvError::Config("command.speed must lie within [0, v_cmd_max]".into()));
        }
        self.camera.validate()?;
        self.randomization.validate()?;
        Ok(())
    }

    pub fn resample_steps(&self) -> u64 {
        (self.command.resample_period / self.dt).round().max(1.0) as u64
    }

    pub fn max_steps(&self) -> u64 {
        (self.t_max / self.dt).round().max(1.0) as u64
    }

    pub fn arena(&self) -> Aabb {
        let h = self.arena_half_size;
        Aabb::new(Vec2::new(-h, -h), Vec2::new(h, h))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    #[default]
    None,
    Timeout,
    BallLost,
    OutOfBounds,
}

impl TerminationReason {
    /// Timeouts cut an episode short; the others end it.
    pub fn is_truncation(self) -> bool {
        self == TerminationReason::Timeout
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeStatus {
    pub done: bool,
    pub reason: TerminationReason,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    pub obs: Observation,
    pub privileged: Privileged,
    pub reward: RewardBreakdown,
    pub status: EpisodeStatus,
}

/// Assembles the policy observation. Body-frame entries are rotated by −yaw;
/// the ball age is divided by `memory_horizon` and clamped to [0, 1].
pub fn build_observation(
    world: &WorldState,
    ball: &BallObservation,
    cmd: Vec2,
    prev_action: &ActionVector,
    memory_horizon: f64,
) -> Observation {
    let r = &world.robot;
    let v_body = world_to_body(r.linear_velocity, r.yaw);
    let age = if memory_horizon > 0.0 { (ball.age / memory_horizon).clamp(0.0, 1.0) } else { 1.0 };
    let s = r.gait_phase.sin();
    let a = prev_action.to_array();
    [
        cmd.x,
        cmd.y,
        v_body.x,
        v_body.y,
        r.yaw_rate,
        r.yaw.sin(),
        r.yaw.cos(),
        r.head_pan,
        r.head_tilt,
        r.head_pan_rate,
        r.head_tilt_rate,
        ball.rel_position.x,
        ball.rel_position.y,
        if ball.visible { 1.0 } else { 0.0 },
        age,
        s,
        -s,
        a[0],
        a[1],
        a[2],
        a[3],
        a[4],
        a[5],
    ]
}

/// Observation followed by the critic-only extras.
pub fn build_privileged(obs: &Observation, world: &WorldState, params: &EpisodeParams) -> Privileged {
    let mut p = [0.0; PRIV_DIM];
    p[..OBS_DIM].copy_from_slice(obs);
    let rel = world_to_body(world.ball.position - world.robot.position, world.robot.yaw);
    let extra = [
        rel.x,
        rel.y,
        world.ball.velocity.x,
        world.ball.velocity.y,
        params.physics.terrain_friction,
        params.physics.kick_gain,
        params.physics.rolling_decel,
        world.last_kick.x,
        world.last_kick.y,
    ];
    p[OBS_DIM..].copy_from_slice(&extra);
    p
}

/// Robot at the origin with random yaw; ball at a uniform bearing and a
/// uniform distance within the stage spawn range.
pub fn spawn_world<R: Rng + ?Sized>(stage: &StageConfig, rng: &mut R) -> WorldState {
    let tau = std::f64::consts::TAU;
    let yaw = crate::geom::wrap_pi(rng.random::<f64>() * tau);
    let bearing = rng.random::<f64>() * tau;
    let dist = stage.ball_spawn_range.sample(rng);
    let robot = RobotState::at(Vec2::ZERO, yaw);
    WorldState::new(robot, BallState::at_rest(Vec2::from_angle(bearing) * dist))
}

/// Running totals for the current episode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub steps: u64,
    pub total_reward: f64,
    pub chase_sum: f64,
    pub ball_vel_sum: f64,
    pub in_view_steps: u64,
}

impl EpisodeStats {
    pub fn mean_chase(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.chase_sum / self.steps as f64
        }
    }
}

/// A finished episode as reported by the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub lane: usize,
    pub stage_id: u8,
    pub reason: TerminationReason,
    pub stats: EpisodeStats,
}

/// One environment lane.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Env {
    config: EnvConfig,
    stage: StageConfig,
    pending_stage: Option<StageConfig>,
    run_seed: u64,
    lane: u64,
    episode: u64,
    rng: ChaCha8Rng,
    world: WorldState,
    params: EpisodeParams,
    delay: DelayQueue,
    tracker: BallTracker,
    ball_obs: BallObservation,
    cmd: Vec2,
    command_override: Option<Vec2>,
    command_resamples: u64,
    prev_action: ActionVector,
    steps: u64,
    status: EpisodeStatus,
    stats: EpisodeStats,
    randomize: bool,
}

impl Env {
    pub fn new(config: EnvConfig, stage: StageConfig, run_seed: u64, lane: u64) -> Result<Self, EnvError> {
        config.validate()?;
        stage.validate()?;
        let mut rng = lane_rng(run_seed, lane, 0);
        let params = sample_episode_params(&RandomizationRanges::nominal(), &config.body, &mut rng)?;
        let tracker = BallTracker::new(config.camera.with_fov_scale(stage.fov_scale), config.dt);
        let ball_obs = *tracker.memory();
        Ok(Self {
            config,
            stage,
            pending_stage: None,
            run_seed,
            lane,
            episode: 0,
            rng,
            world: WorldState::default(),
            params,
            delay: DelayQueue::new(0.0),
            tracker,
            ball_obs,
            cmd: Vec2::ZERO,
            command_override: None,
            command_resamples: 0,
            prev_action: ActionVector::ZERO,
            steps: 0,
            status: EpisodeStatus { done: true, reason: TerminationReason::None, t: 0.0 },
            stats: EpisodeStats::default(),
            randomize: true,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn stage(&self) -> &StageConfig {
        &self.stage
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn params(&self) -> &EpisodeParams {
        &self.params
    }

    pub fn ball_observation(&self) -> &BallObservation {
        &self.ball_obs
    }

    pub fn camera(&self) -> &CameraModel {
        self.tracker.camera()
    }

    pub fn command(&self) -> Vec2 {
        self.cmd
    }

    pub fn command_resamples(&self) -> u64 {
        self.command_resamples
    }

    pub fn status(&self) -> EpisodeStatus {
        self.status
    }

    pub fn stats(&self) -> &EpisodeStats {
        &self.stats
    }

    pub fn episode_index(&self) -> u64 {
        self.episode
    }

    /// When off, episodes use nominal physics with no delay or observation bias.
    pub fn set_randomize(&mut self, on: bool) {
        self.randomize = on;
    }

    /// Adopted at the next reset; the running episode keeps its stage.
    pub fn set_stage(&mut self, stage: StageConfig) -> Result<(), EnvError> {
        stage.validate()?;
        self.pending_stage = Some(stage);
        Ok(())
    }

    /// Pins the command (external control). `None` returns to the sampled schedule.
    pub fn set_command_override(&mut self, cmd: Option<Vec2>) {
        self.command_override = cmd.map(|c| c.clamp_norm(self.config.command.v_cmd_max));
        if let Some(c) = self.command_override {
            self.cmd = c;
        }
    }

    pub fn observation(&self) -> Observation {
        let mut o =
            build_observation(&self.world, &self.ball_obs, self.cmd, &self.prev_action, self.tracker.camera().memory_horizon);
        o[HEAD_OFFSET] += self.params.head_obs_bias.0;
        o[HEAD_OFFSET + 1] += self.params.head_obs_bias.1;
        o
    }

    pub fn privileged(&self) -> Privileged {
        build_privileged(&self.observation(), &self.world, &self.params)
    }

    /// Starts the next episode with a freshly spawned world.
    pub fn reset(&mut self) -> Result<(Observation, Privileged), EnvError> {
        self.begin_episode();
        let world = spawn_world(&self.stage, &mut self.rng);
        let params = self.draw_params()?;
        self.install(world, params)
    }

    /// Starts an episode from an explicit world and parameters.
    pub fn reset_to(&mut self, world: WorldState, params: EpisodeParams) -> Result<(Observation, Privileged), EnvError> {
        self.begin_episode();
        self.install(world, params)
    }

    fn begin_episode(&mut self) {
        if let Some(s) = self.pending_stage.take() {
            self.stage = s;
        }
        self.episode += 1;
        self.rng = lane_rng(self.run_seed, self.lane, self.episode);
    }

    fn draw_params(&mut self) -> Result<EpisodeParams, EnvError> {
        let ranges = if self.randomize { self.config.randomization } else { RandomizationRanges::nominal() };
        Ok(sample_episode_params(&ranges, &self.config.body, &mut self.rng)?)
    }

    fn install(&mut self, world: WorldState, params: EpisodeParams) -> Result<(Observation, Privileged), EnvError> {
        self.world = world;
        self.params = params;
        self.delay = DelayQueue::new(params.actuation_delay);
        self.tracker = BallTracker::new(self.config.camera.with_fov_scale(self.stage.fov_scale), self.config.dt);
        self.ball_obs = self.tracker.reset(&self.world, &mut self.rng);
        self.cmd = match self.command_override {
            Some(c) => c,
            None => self.config.command.sample(&mut self.rng),
        };
        self.command_resamples = 0;
        self.prev_action = ActionVector::ZERO;
        self.steps = 0;
        self.status = EpisodeStatus { done: false, reason: TerminationReason::None, t: self.world.t };
        self.stats = EpisodeStats::default();
        let obs = self.observation();
        Ok((obs, build_privileged(&obs, &self.world, &self.params)))
    }

    pub fn step(&mut self, action: ActionVector) -> Result<StepOutput, EnvError> {
        if self.status.done {
            return Err(EnvError::EpisodeDone);
        }
        let action = action.clamped();
        let applied = self.delay.delayed_action(action, self.world.t)?;
        self.world = step_dynamics(&self.world, &applied, &self.params.physics, self.config.dt, &mut self.rng)?;
        self.steps += 1;
        // Keep time an exact multiple of dt so boundaries do not drift.
        self.world.t = self.steps as f64 * self.config.dt;
        self.ball_obs = self.tracker.observe(&self.world, &mut self.rng);

        let cmd_for_reward = self.cmd;
        if self.steps % self.config.resample_steps() == 0 {
            self.command_resamples += 1;
            self.cmd = match self.command_override {
                Some(c) => c,
                None => self.config.command.sample(&mut self.rng),
            };
        }

        let reward = self.reward(&action, cmd_for_reward);
        self.prev_action = action;

        let reason = self.termination();
        self.status = EpisodeStatus { done: reason != TerminationReason::None, reason, t: self.world.t };

        self.stats.steps += 1;
        self.stats.total_reward += reward.total;
        self.stats.chase_sum += reward.terms.chase;
        self.stats.ball_vel_sum += reward.terms.ball_vel;
        self.stats.in_view_steps += self.ball_obs.visible as u64;

        let obs = self.observation();
        let privileged = build_privileged(&obs, &self.world, &self.params);
        Ok(StepOutput { obs, privileged, reward, status: self.status })
    }

    fn reward(&self, action: &ActionVector, cmd: Vec2) -> RewardBreakdown {
        let sh = &self.config.shaping;
        let w = &self.world;
        let ball_vel = match sh.ball_velocity_mode {
            BallVelocityMode::Full => r_ball_velocity(w.ball.velocity, cmd, sh.velocity_sigma),
            BallVelocityMode::Projected => r_ball_velocity_projected(w.ball.velocity, cmd, sh.velocity_sigma),
        };
        let terms = RewardTerms {
            ball_vel,
            chase: r_chase(w.robot.position, w.ball.position, sh.chase_scale),
            in_view: r_in_view(&self.ball_obs),
            gait: r_gait(w.robot.gait_phase, w.robot.linear_velocity.norm(), action, sh),
            upright_proxy: r_upright_proxy(action),
            action_rate: r_action_rate(action, &self.prev_action),
            alive: 1.0,
        };
        total_reward(&self.stage.effective_weights(), &terms)
    }

    fn termination(&self) -> TerminationReason {
        let w = &self.world;
        if !self.config.arena().contains(w.ball.position) {
            TerminationReason::OutOfBounds
        } else if w.ball.position.distance(w.robot.position) > self.config.d_lost {
            TerminationReason::BallLost
        } else if self.steps >= self.config.max_steps() {
            TerminationReason::Timeout
        } else {
            TerminationReason::None
        }
    }
}

/// Output buffers for one lockstep batch step, row-major per lane.
#[derive(Debug, Clone, Default)]
pub struct BatchStep {
    /// Observation after auto-reset.
    pub obs: Vec<f32>,
    pub privileged: Vec<f32>,
    pub rewards: Vec<f32>,
    /// Unweighted reward terms per lane.
    pub terms: Vec<RewardTerms>,
    pub dones: Vec<bool>,
    /// Done because of the timeout rather than a terminal event.
    pub truncated: Vec<bool>,
    /// Pre-reset critic input of lanes that finished this step.
    pub final_privileged: Vec<f32>,
    pub finished: Vec<EpisodeSummary>,
}

impl BatchStep {
    pub fn new(lanes: usize) -> Self {
        Self {
            obs: vec![0.0; lanes * OBS_DIM],
            privileged: vec![0.0; lanes * PRIV_DIM],
            rewards: vec![0.0; lanes],
            terms: vec![RewardTerms::default(); lanes],
            dones: vec![false; lanes],
            truncated: vec![false; lanes],
            final_privileged: vec![0.0; lanes * PRIV_DIM],
            finished: Vec::new(),
        }
    }
}

/// N independent lanes advanced in lockstep with automatic reset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvBatch {
    lanes: Vec<Env>,
}

fn write_f32(dst: &mut [f32], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *s as f32;
    }
}

struct LaneOut {
    reward: f32,
    terms: RewardTerms,
    done: bool,
    truncated: bool,
    summary: Option<EpisodeSummary>,
}

impl EnvBatch {
    pub fn new(config: EnvConfig, stage: StageConfig, lanes: usize, run_seed: u64) -> Result<Self, EnvError> {
        let lanes = (0..lanes)
            .map(|l| Env::new(config, stage, run_seed, l as u64))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { lanes })
    }

    pub fn len(&self) -> usize {
        self.lanes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lanes.is_empty()
    }

    pub fn lanes(&self) -> &[Env] {
        &self.lanes
    }

    pub fn lane_mut(&mut self, i: usize) -> &mut Env {
        &mut self.lanes[i]
    }

    /// Every lane adopts `stage` at its next reset.
    pub fn set_stage(&mut self, stage: StageConfig) -> Result<(), EnvError> {
        stage.validate()?;
        for lane in &mut self.lanes {
            lane.set_stage(stage)?;
        }
        Ok(())
    }

    pub fn reset_all(&mut self, out: &mut BatchStep) -> Result<(), EnvError> {
        for (i, lane) in self.lanes.iter_mut().enumerate() {
            let (o, p) = lane.reset()?;
            write_f32(&mut out.obs[i * OBS_DIM..(i + 1) * OBS_DIM], &o);
            write_f32(&mut out.privileged[i * PRIV_DIM..(i + 1) * PRIV_DIM], &p);
        }
        Ok(())
    }

    /// Steps every lane with its row of `actions` (length `len() * ACTION_DIM`).
    pub fn step(&mut self, actions: &[f32], out: &mut BatchStep) -> Result<(), EnvError> {
        use crate::dynamics::ACTION_DIM;
        assert_eq!(actions.len(), self.lanes.len() * ACTION_DIM);
        let work = |(i, ((((lane, act), obs), privileged), fin)): (
            usize,
            ((((&mut Env, &[f32]), &mut [f32]), &mut [f32]), &mut [f32]),
        )|
         -> Result<LaneOut, EnvError> {
            let wrap = |e: EnvError| EnvError::Lane { lane: i, source: Box::new(e) };
            let s = lane.step(ActionVector::from_slice(act)).map_err(wrap)?;
            let mut summary = None;
            if s.status.done {
                write_f32(fin, &s.privileged);
                summary = Some(EpisodeSummary {
                    lane: i,
                    stage_id: lane.stage.stage_id,
                    reason: s.status.reason,
                    stats: lane.stats,
                });
                let (o, p) = lane.reset().map_err(wrap)?;
                write_f32(obs, &o);
                write_f32(privileged, &p);
            } else {
                write_f32(obs, &s.obs);
                write_f32(privileged, &s.privileged);
            }
            Ok(LaneOut {
                reward: s.reward.total as f32,
                terms: s.reward.terms,
                done: s.status.done,
                truncated: s.status.reason.is_truncation(),
                summary,
            })
        };

        let items = self
            .lanes
            .iter_mut()
            .zip(actions.chunks_exact(ACTION_DIM))
            .zip(out.obs.chunks_exact_mut(OBS_DIM))
            .zip(out.privileged.chunks_exact_mut(PRIV_DIM))
            .zip(out.final_privileged.chunks_exact_mut(PRIV_DIM))
            .enumerate();

        #[cfg(feature = "parallel")]
        let results: Vec<Result<LaneOut, EnvError>> = {
            use rayon::prelude::*;
            items.collect::<Vec<_>>().into_par_iter().map(work).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let results: Vec<Result<LaneOut, EnvError>> = items.map(work).collect();

        out.finished.clear();
        for (i, r) in results.into_iter().enumerate() {
            let r = r?;
            out.rewards[i] = r.reward;
            out.terms[i] = r.terms;
            out.dones[i] = r.done;
            out.truncated[i] = r.truncated;
            out.finished.extend(r.summary);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ACTION_DIM;
    use crate::perception::in_fov;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::{FRAC_PI_2, TAU};

    fn env(stage: StageConfig, seed: u64) -> Env {
        let mut e = Env::new(EnvConfig::default(), stage, seed, 0).unwrap();
        e.reset().unwrap();
        e
    }

    #[test]
    fn dimensions_match_layout() {
        assert_eq!(OBS_LAYOUT.iter().map(|b| b.1).sum::<usize>(), OBS_DIM);
        assert_eq!(OBS_DIM + PRIV_EXTRA_LAYOUT.iter().map(|b| b.1).sum::<usize>(), PRIV_DIM);
        assert_eq!(OBS_LAYOUT[..4].iter().map(|b| b.1).sum::<usize>(), HEAD_OFFSET);
        assert!(layout_descriptor().starts_with("v1|obs[v_cmd_world:2,"));
    }

    #[test]
    fn spawn_distance_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (stage, lo, hi) in [(StageConfig::stage1(), 8.0, 12.0), (StageConfig::stage2(), 0.5, 2.0)] {
            for _ in 0..10_000 {
                let w = spawn_world(&stage, &mut rng);
                let d = w.ball.position.norm();
                assert!(d >= lo && d <= hi, "{d}");
                assert_eq!(w.robot.position, Vec2::ZERO);
            }
        }
    }

    #[test]
    fn initial_visibility_matches_fov() {
        for seed in 0..200 {
            let e = env(StageConfig::stage2(), seed);
            let vis = in_fov(e.camera(), &e.world().robot, e.world().ball.position);
            assert_eq!(e.observation()[13] == 1.0, vis);
            if !vis {
                assert_eq!(e.observation()[14], 1.0);
                assert_eq!(e.ball_observation().rel_position, Vec2::ZERO);
            }
        }
    }

    #[test]
    fn one_resample_in_two_hundred_steps() {
        let mut e = env(StageConfig::stage2(), 1);
        for k in 1..=200 {
            e.step(ActionVector::ZERO).unwrap();
            assert_eq!(e.command_resamples(), u64::from(k >= 200));
        }
        for k in 201..=800 {
            e.step(ActionVector::ZERO).unwrap();
            assert_eq!(e.command_resamples(), k / 200);
        }
    }

    #[test]
    fn timeout_after_twenty_seconds() {
        let mut e = env(StageConfig::stage2(), 2);
        let mut last = None;
        for _ in 0..1000 {
            let s = e.step(ActionVector::ZERO).unwrap();
            if s.status.done {
                last = Some(s.status);
                break;
            }
        }
        let st = last.unwrap();
        assert_eq!(st.reason, TerminationReason::Timeout);
        assert!((st.t - 20.0).abs() < 1e-9);
        assert!(matches!(e.step(ActionVector::ZERO), Err(EnvError::EpisodeDone)));
    }

    #[test]
    fn distant_ball_is_lost() {
        let mut e = env(StageConfig::stage2(), 3);
        let mut w = WorldState::new(RobotState::default(), BallState::at_rest(Vec2::new(15.5, 0.0)));
        w.t = 0.0;
        e.reset_to(w, *e.params()).unwrap();
        let s = e.step(ActionVector::ZERO).unwrap();
        assert!(s.status.done);
        assert_eq!(s.status.reason, TerminationReason::BallLost);

        let w = WorldState::new(RobotState::at(Vec2::new(15.0, 0.0), 0.0), BallState::at_rest(Vec2::new(20.5, 0.0)));
        e.reset_to(w, *e.params()).unwrap();
        assert_eq!(e.step(ActionVector::ZERO).unwrap().status.reason, TerminationReason::OutOfBounds);
    }

    #[test]
    fn body_frame_rotation() {
        let mut w = WorldState::new(RobotState::at(Vec2::ZERO, 0.0), BallState::default());
        w.robot.linear_velocity = Vec2::new(0.3, -0.7);
        let ball = BallObservation { rel_position: Vec2::ZERO, visible: false, age: 0.0, stale: false };
        let o = build_observation(&w, &ball, Vec2::ZERO, &ActionVector::ZERO, 0.3);
        assert_eq!((o[2], o[3]), (0.3, -0.7));
        w.robot.yaw = FRAC_PI_2;
        w.robot.linear_velocity = Vec2::new(1.0, 0.0);
        let o = build_observation(&w, &ball, Vec2::ZERO, &ActionVector::ZERO, 0.3);
        assert!(o[2].abs() < 1e-15 && (o[3] + 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn clock_entries_cancel(phase in 0.0..TAU, age in 0.0..5.0f64) {
            let mut w = WorldState::default();
            w.robot.gait_phase = phase;
            let ball = BallObservation { rel_position: Vec2::ZERO, visible: true, age, stale: false };
            let o = build_observation(&w, &ball, Vec2::ZERO, &ActionVector::ZERO, 0.3);
            prop_assert_eq!(o[15] + o[16], 0.0);
            prop_assert!((0.0..=1.0).contains(&o[14]));
            prop_assert!(o[13] == 0.0 || o[13] == 1.0);
        }
    }

    #[test]
    fn privileged_prefix_is_observation() {
        let mut e = env(StageConfig::stage1(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..300 {
            let a: Vec<f64> = (0..ACTION_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = e.step(ActionVector::from_slice(&a)).unwrap();
            assert_eq!(&s.privileged[..OBS_DIM], &s.obs[..]);
            if s.status.done {
                e.reset().unwrap();
            }
        }
    }

    #[test]
    fn stage_switch_applies_at_next_reset() {
        let mut e = env(StageConfig::stage1(), 6);
        assert_eq!(e.camera().fov_scale, 2.0);
        e.set_stage(StageConfig::stage2()).unwrap();
        assert_eq!(e.stage().stage_id, 1);
        let s = e.step(ActionVector::ZERO).unwrap();
        assert!(s.reward.weighted.gait != 0.0);
        e.reset().unwrap();
        assert_eq!(e.stage().stage_id, 2);
        assert_eq!(e.camera().fov_scale, 1.0);
        assert!(e.world().ball.position.norm() <= 2.0);
        let s = e.step(ActionVector::ZERO).unwrap();
        assert_eq!(s.reward.weighted.gait, 0.0);

        let bad = StageConfig { stage_id: 3, ..StageConfig::stage1() };
        assert!(matches!(e.set_stage(bad), Err(EnvError::Config(_))));
    }

    #[test]
    fn disabled_gait_reference_zeroes_weight() {
        let stage = StageConfig { gait_reference_enabled: false, ..StageConfig::stage1() };
        let mut e = env(stage, 7);
        assert_eq!(e.step(ActionVector::ZERO).unwrap().reward.weighted.gait, 0.0);
    }

    fn run_episode(seed: u64, policy: &mut dyn FnMut(&Env) -> ActionVector) -> (Vec<Observation>, Vec<f64>, f64) {
        let mut e = env(StageConfig::stage1(), seed);
        let (mut obs, mut rew) = (Vec::new(), Vec::new());
        loop {
            let a = policy(&e);
            let s = e.step(a).unwrap();
            obs.push(s.obs);
            rew.push(s.reward.total);
            if s.status.done {
                return (obs, rew, e.stats().mean_chase());
            }
        }
    }

    /// Turns toward the ball and drives at it using true state.
    fn chaser(e: &Env) -> ActionVector {
        let w = e.world();
        let rel = world_to_body(w.ball.position - w.robot.position, w.robot.yaw);
        let bearing = rel.angle();
        ActionVector {
            u_fx: if bearing.abs() < 0.5 { 1.0 } else { 0.2 },
            u_yaw: (2.0 * bearing).clamp(-1.0, 1.0),
            ..ActionVector::ZERO
        }
    }

    #[test]
    fn chaser_beats_random_on_chase_reward() {
        for seed in 0..50 {
            let (_, _, chase) = run_episode(seed, &mut chaser);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let mut random = |_: &Env| {
                let a: Vec<f64> = (0..ACTION_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
                ActionVector::from_slice(&a)
            };
            let (_, _, chase_rand) = run_episode(seed, &mut random);
            assert!(chase > chase_rand, "seed {seed}: {chase} vs {chase_rand}");
        }
    }

    #[test]
    fn episodes_are_deterministic_per_seed() {
        let a = run_episode(11, &mut chaser);
        let b = run_episode(11, &mut chaser);
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let c = run_episode(12, &mut chaser);
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn batch_auto_resets_and_reports() {
        let cfg = EnvConfig { t_max: 0.2, ..Default::default() };
        let mut b = EnvBatch::new(cfg, StageConfig::stage2(), 3, 9).unwrap();
        let mut out = BatchStep::new(3);
        b.reset_all(&mut out).unwrap();
        let acts = vec![0.0f32; 3 * ACTION_DIM];
        for _ in 0..9 {
            b.step(&acts, &mut out).unwrap();
            assert!(out.finished.is_empty());
        }
        b.step(&acts, &mut out).unwrap();
        assert!(out.dones.iter().all(|&d| d));
        assert!(out.truncated.iter().all(|&d| d));
        assert_eq!(out.finished.len(), 3);
        assert!(b.lanes().iter().all(|l| l.episode_index() == 2 && !l.status().done));
    }

    #[test]
    fn lane_snapshot_round_trips() {
        let mut b = EnvBatch::new(EnvConfig::default(), StageConfig::stage1(), 2, 1).unwrap();
        let mut out = BatchStep::new(2);
        b.reset_all(&mut out).unwrap();
        let acts = vec![0.3f32; 2 * ACTION_DIM];
        for _ in 0..17 {
            b.step(&acts, &mut out).unwrap();
        }
        let text = serde_json::to_string(&b).unwrap();
        let mut c: EnvBatch = serde_json::from_str(&text).unwrap();
        let mut out_c = BatchStep::new(2);
        for _ in 0..50 {
            b.step(&acts, &mut out).unwrap();
            c.step(&acts, &mut out_c).unwrap();
            assert_eq!(out.obs, out_c.obs);
            assert_eq!(out.rewards, out_c.rewards);
        }
    }
}
