//! Episode-level domain randomization, actuation delay and per-lane random streams.
//!
//! Full-robot parameters are mapped onto the planar model as follows:
//!
//! | range             | planar analog                                   |
//! |-------------------|-------------------------------------------------|
//! | `action_scale`    | `PhysicsParams::action_scale` (all channels)    |
//! | `terrain_friction`| `terrain_friction`, `rolling_decel`             |
//! | `mass_drag`       | `mass_offset` (acceleration divided by 1 + m)   |
//! | `com_offset`      | `com_offset` (x and y drawn independently)      |
//! | `gain_p_scale`    | `robot_accel_gain`                              |
//! | `gain_d_scale`    | `head_rate_gain`                                |
//! | `torque_scale`    | `kick_gain`                                     |
//! | `joint_pos_noise` | per-episode head pan/tilt observation bias      |
//! | `actuation_delay` | [`DelayQueue`] delay, fixed for the episode     |
//! | `roughness_sigma` | kicked-ball angular noise + body jitter         |
//! | `restitution`     | ball/body pushback restitution                  |

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dynamics::{ActionVector, BodyModel, PhysicsParams};
use crate::geom::Vec2;

#[derive(Debug, Error, PartialEq)]
pub enum RandomizationError {
    #[error("range `{name}` is inverted or non-finite: [{min}, {max}]")]
    BadRange { name: &'static str, min: f64, max: f64 },
    #[error("delay queue time went backwards: {now} < {last}")]
    TimeRegression { now: f64, last: f64 },
}

/// Closed interval `[min, max]`, serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub const fn point(v: f64) -> Self {
        Self { min: v, max: v }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }

    fn check(&self, name: &'static str) -> Result<(), RandomizationError> {
        if self.min.is_finite() && self.max.is_finite() && self.min <= self.max {
            Ok(())
        } else {
            Err(RandomizationError::BadRange { name, min: self.min, max: self.max })
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        (self.min + (self.max - self.min) * u).min(self.max)
    }
}

impl From<[f64; 2]> for Range {
    fn from(v: [f64; 2]) -> Self {
        Range::new(v[0], v[1])
    }
}

impl From<Range> for [f64; 2] {
    fn from(r: Range) -> Self {
        [r.min, r.max]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomizationRanges {
    pub action_scale: Range,
    pub terrain_friction: Range,
    pub mass_drag: Range,
    /// m, per axis.
    pub com_offset: Range,
    pub gain_p_scale: Range,
    pub gain_d_scale: Range,
    pub torque_scale: Range,
    /// rad, per head joint.
    pub joint_pos_noise: Range,
    /// s.
    pub actuation_delay: Range,
    /// rad.
    pub roughness_sigma: Range,
    pub restitution: Range,
}

impl Default for RandomizationRanges {
    fn default() -> Self {
        Self {
            action_scale: Range::new(0.95, 1.05),
            terrain_friction: Range::new(0.5, 1.5),
            mass_drag: Range::new(-0.1, 0.1),
            com_offset: Range::new(-0.04, 0.04),
            gain_p_scale: Range::new(0.7, 1.3),
            gain_d_scale: Range::new(0.8, 1.2),
            torque_scale: Range::new(0.95, 1.00),
            joint_pos_noise: Range::new(-0.02, 0.02),
            actuation_delay: Range::new(0.0, 0.020),
            roughness_sigma: Range::new(0.0, 0.1),
            restitution: Range::new(0.3, 0.6),
        }
    }
}

impl RandomizationRanges {
    /// Every range collapsed to its midpoint.
    pub fn midpoints(&self) -> Self {
        let mut out = *self;
        for (_, r) in out.named_mut() {
            *r = Range::point(0.5 * (r.min + r.max));
        }
        out
    }

    /// Ranges that reproduce [`PhysicsParams::nominal`] with no delay or bias.
    pub fn nominal() -> Self {
        Self {
            action_scale: Range::point(1.0),
            terrain_friction: Range::point(1.0),
            mass_drag: Range::point(0.0),
            com_offset: Range::point(0.0),
            gain_p_scale: Range::point(1.0),
            gain_d_scale: Range::point(1.0),
            torque_scale: Range::point(1.0),
            joint_pos_noise: Range::point(0.0),
            actuation_delay: Range::point(0.0),
            roughness_sigma: Range::point(0.0),
            restitution: Range::point(0.5),
        }
    }

    pub fn named(&self) -> [(&'static str, Range); 11] {
        [
            ("action_scale", self.action_scale),
            ("terrain_friction", self.terrain_friction),
            ("mass_drag", self.mass_drag),
            ("com_offset", self.com_offset),
            ("gain_p_scale", self.gain_p_scale),
            ("gain_d_scale", self.gain_d_scale),
            ("torque_scale", self.torque_scale),
            ("joint_pos_noise", self.joint_pos_noise),
            ("actuation_delay", self.actuation_delay),
            ("roughness_sigma", self.roughness_sigma),
            ("restitution", self.restitution),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Range); 11] {
        [
            ("action_scale", &mut self.action_scale),
            ("terrain_friction", &mut self.terrain_friction),
            ("mass_drag", &mut self.mass_drag),
            ("com_offset", &mut self.com_offset),
            ("gain_p_scale", &mut self.gain_p_scale),
            ("gain_d_scale", &mut self.gain_d_scale),
            ("torque_scale", &mut self.torque_scale),
            ("joint_pos_noise", &mut self.joint_pos_noise),
            ("actuation_delay", &mut self.actuation_delay),
            ("roughness_sigma", &mut self.roughness_sigma),
            ("restitution", &mut self.restitution),
        ]
    }

    pub fn validate(&self) -> Result<(), RandomizationError> {
        for (name, r) in self.named() {
            r.check(name)?;
        }
        if self.actuation_delay.min < 0.0 {
            return Err(RandomizationError::BadRange {
                name: "actuation_delay",
                min: self.actuation_delay.min,
                max: self.actuation_delay.max,
            });
        }
        if self.restitution.min < 0.0 || self.restitution.max > 1.0 {
            return Err(RandomizationError::BadRange {
                name: "restitution",
                min: self.restitution.min,
                max: self.restitution.max,
            });
        }
        Ok(())
    }
}

/// Everything drawn at the start of an episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeParams {
    pub physics: PhysicsParams,
    /// Actuation delay, s.
    pub actuation_delay: f64,
    /// Added to the observed head (pan, tilt), rad.
    pub head_obs_bias: (f64, f64),
}

impl EpisodeParams {
    /// Unperturbed physics, no delay, no observation bias.
    pub fn nominal(body: BodyModel) -> Self {
        Self { physics: PhysicsParams::nominal(body), actuation_delay: 0.0, head_obs_bias: (0.0, 0.0) }
    }
}

/// Draws every parameter independently and uniformly from its range.
pub fn sample_episode_params<R: Rng + ?Sized>(
    ranges: &RandomizationRanges,
    body: &BodyModel,
    rng: &mut R,
) -> Result<EpisodeParams, RandomizationError> {
    ranges.validate()?;
    let action_scale = ranges.action_scale.sample(rng);
    let friction = ranges.terrain_friction.sample(rng);
    let mass = ranges.mass_drag.sample(rng);
    let com = Vec2::new(ranges.com_offset.sample(rng), ranges.com_offset.sample(rng));
    let kp = ranges.gain_p_scale.sample(rng);
    let kd = ranges.gain_d_scale.sample(rng);
    let torque = ranges.torque_scale.sample(rng);
    let bias = (ranges.joint_pos_noise.sample(rng), ranges.joint_pos_noise.sample(rng));
    let delay = ranges.actuation_delay.sample(rng);
    let roughness = ranges.roughness_sigma.sample(rng);
    let restitution = ranges.restitution.sample(rng);

    let mut physics = PhysicsParams::with_friction(friction, *body);
    physics.action_scale = action_scale;
    physics.mass_offset = mass;
    physics.com_offset = com;
    physics.robot_accel_gain = kp;
    physics.head_rate_gain = kd;
    physics.kick_gain = torque;
    physics.roughness_sigma = roughness;
    physics.restitution = restitution;
    Ok(EpisodeParams { physics, actuation_delay: delay, head_obs_bias: bias })
}

/// Holds back actions by a fixed delay. Emits the newest action whose
/// timestamp is at most `now - delay`, or the zero action before any matures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DelayQueue {
    delay: f64,
    pending: VecDeque<(f64, ActionVector)>,
    active: ActionVector,
    last_time: Option<f64>,
}

/// Slack for comparing timestamps built from repeated `k·dt` products.
const TIME_EPS: f64 = 1e-9;

impl DelayQueue {
    pub fn new(delay: f64) -> Self {
        Self { delay, pending: VecDeque::new(), active: ActionVector::ZERO, last_time: None }
    }

    pub fn delay(&self) -> f64 {
        self.delay
    }

    pub fn delayed_action(&mut self, action: ActionVector, now: f64) -> Result<ActionVector, RandomizationError> {
        if let Some(last) = self.last_time {
            if now < last {
                return Err(RandomizationError::TimeRegression { now, last });
            }
        }
        self.last_time = Some(now);
        self.pending.push_back((now, action));
        let cutoff = now - self.delay + TIME_EPS;
        while let Some(&(ts, a)) = self.pending.front() {
            if ts <= cutoff {
                self.active = a;
                self.pending.pop_front();
            } else {
                break;
            }
        }
        Ok(self.active)
    }
}

/// Counter-based per-lane stream keyed by `(run_seed, lane, episode)`, so a
/// lane's randomness does not depend on how many other lanes exist.
pub fn lane_rng(run_seed: u64, lane: u64, episode: u64) -> ChaCha8Rng {
    keyed_rng(b"lane", &[run_seed, lane, episode])
}

/// Deterministic stream for an arbitrary tag and key tuple.
pub fn keyed_rng(tag: &[u8], key: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(tag);
    for k in key {
        h.update(k.to_le_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}
