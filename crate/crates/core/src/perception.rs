//! Virtual head camera: field-of-view membership, latency, noise and the
//! short last-known-position memory that the policy sees in place of images.

use std::collections::VecDeque;
use std::f64::consts::{FRAC_PI_2, PI, TAU};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{RobotState, WorldState};
use crate::geom::{body_to_world, clip_half_plane, world_to_body, Vec2};

#[derive(Debug, Error, PartialEq)]
pub enum CameraError {
    #[error("horizontal field of view {0} rad out of range (0, 2π)")]
    Horizontal(f64),
    #[error("vertical field of view {0} rad out of range (0, π)")]
    Vertical(f64),
    #[error("invalid camera parameter: {0}")]
    Invalid(&'static str),
}

/// Which axes the curriculum FOV multiplier applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FovScaleAxes {
    #[default]
    Both,
    Horizontal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraModel {
    /// Full horizontal field of view, rad.
    pub hfov: f64,
    /// Full vertical field of view, rad.
    pub vfov: f64,
    /// Optical center height above the ground, m.
    pub mount_height: f64,
    /// Optical center offset ahead of the base, m.
    pub mount_forward: f64,
    /// Fixed pitch of the camera relative to the head, rad (positive up).
    pub mount_pitch: f64,
    /// Detection latency, s.
    pub latency: f64,
    /// Std-dev of the observed ball position per axis, m.
    pub noise_sigma: f64,
    pub fov_scale: f64,
    pub fov_scale_axes: FovScaleAxes,
    /// Time after the last sighting at which the memory is flagged stale, s.
    pub memory_horizon: f64,
    /// Ground footprint clipping radius, m.
    pub max_range: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        // Horizontal/vertical FOV from the RealSense D455 datasheet (87° × 58°).
        Self {
            hfov: 1.518,
            vfov: 1.012,
            mount_height: 1.1,
            mount_forward: 0.05,
            mount_pitch: -0.35,
            latency: 0.033,
            noise_sigma: 0.03,
            fov_scale: 1.0,
            fov_scale_axes: FovScaleAxes::Both,
            memory_horizon: 0.3,
            max_range: 15.0,
        }
    }
}

impl CameraModel {
    pub fn with_fov_scale(mut self, fov_scale: f64) -> Self {
        self.fov_scale = fov_scale;
        self
    }

    /// Effective half-angles `(horizontal, vertical)` after the FOV multiplier.
    pub fn half_angles(&self) -> (f64, f64) {
        let v_scale = match self.fov_scale_axes {
            FovScaleAxes::Both => self.fov_scale,
            FovScaleAxes::Horizontal => 1.0,
        };
        (0.5 * self.hfov * self.fov_scale, 0.5 * self.vfov * v_scale)
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        let (h, v) = self.half_angles();
        if !(h > 0.0 && 2.0 * h < TAU) {
            return Err(CameraError::Horizontal(2.0 * h));
        }
        if !(v > 0.0 && 2.0 * v < PI) {
            return Err(CameraError::Vertical(2.0 * v));
        }
        if !(self.latency >= 0.0 && self.latency.is_finite()) {
            return Err(CameraError::Invalid("latency"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(CameraError::Invalid("noise_sigma"));
        }
        if !(self.memory_horizon >= 0.0 && self.memory_horizon.is_finite()) {
            return Err(CameraError::Invalid("memory_horizon"));
        }
        if !(self.mount_height.is_finite() && self.max_range > 0.0) {
            return Err(CameraError::Invalid("mount"));
        }
        Ok(())
    }

    /// Camera ground point, yaw and pitch for a robot pose.
    fn pose(&self, robot: &RobotState) -> (Vec2, f64, f64) {
        let origin = robot.position + body_to_world(Vec2::new(self.mount_forward, 0.0), robot.yaw);
        (origin, robot.yaw + robot.head_pan, self.mount_pitch + robot.head_tilt)
    }
}

/// Whether a ground point is inside the camera frustum. A point is visible when
/// its horizontal angle `atan2(left, forward)` and vertical angle
/// `atan2(up, forward)`, both measured in the camera frame, lie within the
/// half-angles.
pub fn in_fov(camera: &CameraModel, robot: &RobotState, ball_pos: Vec2) -> bool {
    let (origin, yaw, pitch) = camera.pose(robot);
    let d = world_to_body(ball_pos - origin, yaw);
    let dz = -camera.mount_height;
    if d.x == 0.0 && d.y == 0.0 && dz == 0.0 {
        return false;
    }
    let (sp, cp) = pitch.sin_cos();
    let forward = d.x * cp + dz * sp;
    let up = -d.x * sp + dz * cp;
    let left = d.y;
    let (h, v) = camera.half_angles();
    left.atan2(forward).abs() <= h && up.atan2(forward).abs() <= v
}

/// Ground-plane footprint of the view frustum, clipped to `max_range` around
/// the camera. Every point strictly inside the polygon satisfies [`in_fov`].
/// Empty when the whole frustum lies above the horizon.
pub fn fov_polygon(camera: &CameraModel, robot: &RobotState) -> Vec<Vec2> {
    const RANGE_SIDES: usize = 32;
    let (origin, yaw, pitch) = camera.pose(robot);
    let (h, v) = camera.half_angles();
    // The half-space description below is only a cone for half-angles under π/2;
    // narrower planes give a subset of the true visible region.
    let h = h.min(FRAC_PI_2 - 1e-6);
    let v = v.min(FRAC_PI_2 - 1e-6);

    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    let f = [cp * cy, cp * sy, sp];
    let l = [-sy, cy, 0.0];
    let u = [-sp * cy, -sp * sy, cp];
    let comb = |a: [f64; 3], ka: f64, b: [f64; 3], kb: f64| {
        [a[0] * ka + b[0] * kb, a[1] * ka + b[1] * kb, a[2] * ka + b[2] * kb]
    };
    let (sh, ch) = h.sin_cos();
    let (sv, cv) = v.sin_cos();
    let normals = [
        comb(f, sh, l, -ch),
        comb(f, sh, l, ch),
        comb(f, sv, u, -cv),
        comb(f, sv, u, cv),
    ];

    let mut poly: Vec<Vec2> = (0..RANGE_SIDES)
        .map(|i| origin + Vec2::from_angle(TAU * i as f64 / RANGE_SIDES as f64) * camera.max_range)
        .collect();
    for n in normals {
        // n·(p - origin, -height) >= 0 restricted to the ground plane.
        let nxy = Vec2::new(n[0], n[1]);
        let offset = -nxy.dot(origin) - camera.mount_height * n[2];
        if nxy.norm() < 1e-12 {
            if offset < 0.0 {
                return Vec::new();
            }
            continue;
        }
        poly = clip_half_plane(&poly, nxy, offset);
        if poly.len() < 3 {
            return Vec::new();
        }
    }
    poly
}

/// What the policy knows about the ball.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BallObservation {
    /// Ball position relative to the robot base, body frame, m.
    pub rel_position: Vec2,
    pub visible: bool,
    /// Seconds since the last sighting.
    pub age: f64,
    pub stale: bool,
}

/// Per-environment perception state: latency ring buffer plus frozen memory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BallTracker {
    camera: CameraModel,
    dt: f64,
    latency_steps: usize,
    horizon_steps: u32,
    history: VecDeque<(RobotState, Vec2)>,
    memory: BallObservation,
    missed_steps: u32,
}

impl BallTracker {
    pub fn new(camera: CameraModel, dt: f64) -> Self {
        let latency_steps = (camera.latency / dt).round() as usize;
        let horizon_steps = (camera.memory_horizon / dt).round() as u32;
        let mut tracker = Self {
            camera,
            dt,
            latency_steps,
            horizon_steps,
            history: VecDeque::with_capacity(latency_steps + 1),
            memory: BallObservation { rel_position: Vec2::ZERO, visible: false, age: 0.0, stale: true },
            missed_steps: 0,
        };
        tracker.clear();
        tracker
    }

    pub fn camera(&self) -> &CameraModel {
        &self.camera
    }

    pub fn memory(&self) -> &BallObservation {
        &self.memory
    }

    pub fn horizon_steps(&self) -> u32 {
        self.horizon_steps
    }

    /// Empty memory: stale, zero position, age just past the horizon.
    fn clear(&mut self) {
        self.history.clear();
        self.missed_steps = self.horizon_steps + 1;
        self.memory = BallObservation {
            rel_position: Vec2::ZERO,
            visible: false,
            age: self.missed_steps as f64 * self.dt,
            stale: true,
        };
    }

    /// Clears memory and history at the start of an episode. If the ball is
    /// in view at the spawn pose the returned observation is a sighting.
    pub fn reset<R: Rng + ?Sized>(&mut self, world: &WorldState, rng: &mut R) -> BallObservation {
        self.clear();
        for _ in 0..=self.latency_steps {
            self.history.push_back((world.robot, world.ball.position));
        }
        if in_fov(&self.camera, &world.robot, world.ball.position) {
            self.sight(&world.robot, world.ball.position, rng);
        }
        self.memory
    }

    /// Advances one control step with the current true world state.
    pub fn observe<R: Rng + ?Sized>(&mut self, world: &WorldState, rng: &mut R) -> BallObservation {
        self.history.push_back((world.robot, world.ball.position));
        while self.history.len() > self.latency_steps + 1 {
            self.history.pop_front();
        }
        let (robot, ball) = self.history[0];
        if in_fov(&self.camera, &robot, ball) {
            self.sight(&robot, ball, rng);
        } else {
            self.missed_steps = self.missed_steps.saturating_add(1);
            self.memory.visible = false;
            self.memory.age = self.missed_steps as f64 * self.dt;
            self.memory.stale = self.missed_steps > self.horizon_steps;
        }
        self.memory
    }

    fn sight<R: Rng + ?Sized>(&mut self, robot: &RobotState, ball: Vec2, rng: &mut R) {
        let mut rel = world_to_body(ball - robot.position, robot.yaw);
        if self.camera.noise_sigma > 0.0 {
            let n = Vec2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
            rel += n * self.camera.noise_sigma;
        }
        self.missed_steps = 0;
        self.memory = BallObservation { rel_position: rel, visible: true, age: 0.0, stale: false };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::BallState;
    use crate::geom::point_in_polygon;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn level_camera(full_hfov: f64) -> CameraModel {
        CameraModel {
            hfov: full_hfov,
            vfov: 1.0,
            mount_height: 1.0,
            mount_forward: 0.0,
            mount_pitch: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn center_of_frustum_is_visible() {
        let cam = level_camera(1.0);
        let robot = RobotState::default();
        // elevation atan(1/2) ≈ 0.46 < 0.5
        assert!(in_fov(&cam, &robot, Vec2::new(2.0, 0.0)));
    }

    #[test]
    fn just_outside_horizontal_half_angle() {
        let cam = level_camera(1.0);
        let robot = RobotState::default();
        let inside = Vec2::from_angle(0.49) * 3.0;
        let outside = Vec2::from_angle(0.51) * 3.0;
        assert!(in_fov(&cam, &robot, inside));
        assert!(!in_fov(&cam, &robot, outside));
        assert!(!in_fov(&cam, &robot, Vec2::from_angle(-0.51) * 3.0));
    }

    #[test]
    fn doubled_fov_reveals_extra_bearings() {
        let base = CameraModel::default();
        let robot = RobotState::default();
        let (h1, _) = base.half_angles();
        // bearing between the two half-angles, far enough that elevation is fine
        let p = Vec2::from_angle(1.2 * h1) * 4.0;
        assert!(!in_fov(&base, &robot, p));
        assert!(in_fov(&base.with_fov_scale(2.0), &robot, p));
    }

    #[test]
    fn coincident_ball_is_not_visible() {
        let cam = CameraModel { mount_height: 0.0, mount_forward: 0.0, ..level_camera(1.0) };
        assert!(!in_fov(&cam, &RobotState::default(), Vec2::ZERO));
    }

    #[test]
    fn validation_bounds() {
        assert!(CameraModel::default().validate().is_ok());
        assert!(CameraModel::default().with_fov_scale(2.0).validate().is_ok());
        assert!(matches!(
            CameraModel { vfov: 2.0, ..Default::default() }.with_fov_scale(2.0).validate(),
            Err(CameraError::Vertical(_))
        ));
        assert!(matches!(
            CameraModel { hfov: 0.0, ..Default::default() }.validate(),
            Err(CameraError::Horizontal(_))
        ));
    }

    #[test]
    fn nadir_footprint_is_centered_rectangle() {
        let cam = CameraModel { mount_pitch: -FRAC_PI_2, mount_forward: 0.0, ..Default::default() };
        let robot = RobotState::at(Vec2::new(1.0, -2.0), 0.7);
        let poly = fov_polygon(&cam, &robot);
        assert_eq!(poly.len(), 4);
        let centroid = poly.iter().fold(Vec2::ZERO, |a, &p| a + p) / 4.0;
        assert!(centroid.distance(robot.position) < 1e-9);
        let (h, v) = cam.half_angles();
        let area = crate::geom::polygon_area(&poly).abs();
        let expected = 4.0 * cam.mount_height.powi(2) * h.tan() * v.tan();
        assert!((area - expected).abs() < 1e-9, "{area} vs {expected}");
    }

    #[test]
    fn frustum_above_horizon_has_no_footprint() {
        let cam = CameraModel::default();
        let (_, v) = cam.half_angles();
        // lower frustum edge above the horizon
        let robot = RobotState { head_tilt: v + 0.05 - cam.mount_pitch, ..Default::default() };
        assert!(fov_polygon(&cam, &robot).is_empty());
    }

    #[test]
    fn footprint_points_are_visible() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let cam = CameraModel::default().with_fov_scale(if rng.random() { 1.0 } else { 2.0 });
            let robot = RobotState {
                position: Vec2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)),
                yaw: rng.random_range(-PI..PI),
                head_pan: rng.random_range(-1.57..1.57),
                head_tilt: rng.random_range(-0.8..0.4),
                ..Default::default()
            };
            let poly = fov_polygon(&cam, &robot);
            if poly.is_empty() {
                continue;
            }
            let (lo, hi) = poly.iter().fold(
                (Vec2::new(f64::MAX, f64::MAX), Vec2::new(f64::MIN, f64::MIN)),
                |(lo, hi), p| (Vec2::new(lo.x.min(p.x), lo.y.min(p.y)), Vec2::new(hi.x.max(p.x), hi.y.max(p.y))),
            );
            let mut found = 0;
            while found < 100 {
                let p = Vec2::new(rng.random_range(lo.x..hi.x), rng.random_range(lo.y..hi.y));
                if point_in_polygon(p, &poly) {
                    assert!(in_fov(&cam, &robot, p), "{p:?} inside footprint but not visible");
                    found += 1;
                }
            }
        }
    }

    fn tracker_world(ball: Vec2) -> WorldState {
        WorldState::new(RobotState::default(), BallState::at_rest(ball))
    }

    #[test]
    fn noiseless_sighting_is_exact_body_frame_position() {
        let cam = CameraModel { noise_sigma: 0.0, latency: 0.0, ..Default::default() };
        let mut tracker = BallTracker::new(cam, 0.02);
        let robot = RobotState::at(Vec2::new(1.0, 1.0), 0.5);
        let ball = robot.position + Vec2::from_angle(0.6) * 3.0;
        let world = WorldState::new(robot, BallState::at_rest(ball));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        tracker.reset(&world, &mut rng);
        let obs = tracker.observe(&world, &mut rng);
        assert!(obs.visible);
        let expected = world_to_body(ball - robot.position, robot.yaw);
        assert!(obs.rel_position.distance(expected) < 1e-12);
    }

    #[test]
    fn memory_freezes_then_goes_stale() {
        let cam = CameraModel { noise_sigma: 0.0, latency: 0.0, ..Default::default() };
        let dt = 0.02;
        let mut tracker = BallTracker::new(cam, dt);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seen = tracker_world(Vec2::new(3.0, 0.0));
        tracker.reset(&seen, &mut rng);
        let last = tracker.observe(&seen, &mut rng);
        assert!(last.visible);
        let hidden = tracker_world(Vec2::new(-3.0, 0.0));
        let mut obs = last;
        for step in 1..=20 {
            obs = tracker.observe(&hidden, &mut rng);
            assert!(!obs.visible);
            assert_eq!(obs.rel_position, last.rel_position);
            if step == 10 {
                // 0.2 s after exit
                assert!(!obs.stale);
            }
        }
        // 0.4 s after exit
        assert!(obs.stale);
        assert!((obs.age - 0.4).abs() < 1e-9);
    }

    #[test]
    fn reset_clears_memory() {
        let mut tracker = BallTracker::new(CameraModel::default(), 0.02);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let obs = tracker.reset(&tracker_world(Vec2::new(-4.0, 0.0)), &mut rng);
        assert!(!obs.visible && obs.stale);
        assert_eq!(obs.rel_position, Vec2::ZERO);
        assert!((obs.age - (0.3 + 0.02)).abs() < 1e-12);
    }

    #[test]
    fn latency_delays_sightings() {
        let cam = CameraModel { noise_sigma: 0.0, latency: 0.04, ..Default::default() };
        let mut tracker = BallTracker::new(cam, 0.02);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        tracker.reset(&tracker_world(Vec2::new(-4.0, 0.0)), &mut rng);
        let visible = tracker_world(Vec2::new(3.0, 0.0));
        assert!(!tracker.observe(&visible, &mut rng).visible);
        assert!(!tracker.observe(&visible, &mut rng).visible);
        assert!(tracker.observe(&visible, &mut rng).visible);
    }
}
