//! On-policy training: rollouts over the lane batch, GAE, clipped-surrogate
//! updates and the curriculum schedule.

use std::collections::VecDeque;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::ACTION_DIM;
use crate::env::{BatchStep, EnvBatch, EnvConfig, EnvError, StageConfig, OBS_DIM, PRIV_DIM};
use crate::policy::{clip_grad_norm, gaussian_entropy, Adam, MlpCache, MlpSpec, Policy, PolicyError, Scalar};
use crate::randomization::keyed_rng;
use crate::rewards::RewardTerms;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("non-finite loss at epoch {epoch}, minibatch {minibatch}: policy {policy_loss}, value {value_loss}, entropy {entropy}")]
    NonFinite { epoch: usize, minibatch: usize, policy_loss: f64, value_loss: f64, entropy: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoHyperparams {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_epsilon: f64,
    pub learning_rate: f64,
    /// Decay the learning rate linearly to zero over the run.
    pub lr_linear_decay: bool,
    pub epochs_per_update: usize,
    pub minibatch_count: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub rollout_horizon: usize,
    pub num_lanes: usize,
}

impl Default for PpoHyperparams {
    fn default() -> Self {
        Self {
            gamma: 0.994,
            gae_lambda: 0.95,
            clip_epsilon: 0.2,
            learning_rate: 3e-4,
            lr_linear_decay: true,
            epochs_per_update: 5,
            minibatch_count: 4,
            value_coef: 0.5,
            entropy_coef: 0.005,
            max_grad_norm: 1.0,
            rollout_horizon: 64,
            num_lanes: 512,
        }
    }
}

impl PpoHyperparams {
    pub fn validate(&self) -> Result<(), PpoError> {
        let err = |m: &str| Err(PpoError::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return err("gamma must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return err("gae_lambda must be in [0, 1]");
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return err("clip_epsilon must be in (0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err("learning_rate must be positive");
        }
        if self.epochs_per_update == 0 || self.minibatch_count == 0 || self.rollout_horizon == 0 || self.num_lanes == 0 {
            return err("epochs, minibatches, horizon and lanes must be >= 1");
        }
        if (self.rollout_horizon * self.num_lanes) % self.minibatch_count != 0 {
            return err("rollout_horizon * num_lanes must be divisible by minibatch_count");
        }
        if !(self.value_coef >= 0.0 && self.entropy_coef >= 0.0 && self.max_grad_norm > 0.0) {
            return err("value_coef, entropy_coef must be >= 0 and max_grad_norm > 0");
        }
        Ok(())
    }
}

/// GAE over one lane's sequence in time order.
///
/// `δₜ = rₜ + γ·Vₜ₊₁·(1−doneₜ) − Vₜ`, `Aₜ = δₜ + γλ(1−doneₜ)·Aₜ₊₁`, with
/// `V_T = bootstrap`. Returns `(advantages, returns)` before normalization.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert_eq!(values.len(), n, "values length");
    assert_eq!(dones.len(), n, "dones length");
    let mut adv = vec![0.0; n];
    let mut next_value = bootstrap;
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Shifts and scales to mean 0, std 1 (population std, ε = 1e-8).
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = (*a - mean) / (std + 1e-8);
    }
}

/// Transitions from one rollout, stored step-major: row `t·lanes + lane`.
#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub lanes: usize,
    pub horizon: usize,
    pub obs: Vec<f32>,
    pub privileged: Vec<f32>,
    pub actions: Vec<f32>,
    pub logprobs: Vec<f64>,
    /// Includes the bootstrap term folded in at timeouts.
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub values: Vec<f64>,
    /// Value of each lane's state after the last step.
    pub bootstrap: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Sums of the unweighted reward terms over all transitions.
    pub term_sums: [f64; 7],
    pub finished: Vec<crate::env::EpisodeSummary>,
}

impl RolloutBuffer {
    pub fn new(lanes: usize, horizon: usize) -> Self {
        let n = lanes * horizon;
        Self {
            lanes,
            horizon,
            obs: vec![0.0; n * OBS_DIM],
            privileged: vec![0.0; n * PRIV_DIM],
            actions: vec![0.0; n * ACTION_DIM],
            logprobs: vec![0.0; n],
            rewards: vec![0.0; n],
            dones: vec![false; n],
            values: vec![0.0; n],
            bootstrap: vec![0.0; lanes],
            advantages: vec![0.0; n],
            returns: vec![0.0; n],
            term_sums: [0.0; 7],
            finished: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.lanes * self.horizon
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, lane: usize, t: usize) -> usize {
        t * self.lanes + lane
    }

    /// Runs GAE per lane, then normalizes the advantages across the buffer.
    pub fn compute_advantages(&mut self, gamma: f64, lambda: f64) {
        for lane in 0..self.lanes {
            let idx: Vec<usize> = (0..self.horizon).map(|t| self.row(lane, t)).collect();
            let r: Vec<f64> = idx.iter().map(|&i| self.rewards[i]).collect();
            let v: Vec<f64> = idx.iter().map(|&i| self.values[i]).collect();
            let d: Vec<bool> = idx.iter().map(|&i| self.dones[i]).collect();
            let (adv, ret) = compute_gae(&r, &v, &d, self.bootstrap[lane], gamma, lambda);
            for (k, &i) in idx.iter().enumerate() {
                self.advantages[i] = adv[k];
                self.returns[i] = ret[k];
            }
        }
        normalize_advantages(&mut self.advantages);
    }

    pub fn mean_terms(&self) -> RewardTerms {
        let n = self.len().max(1) as f64;
        let t = self.term_sums;
        RewardTerms {
            ball_vel: t[0] / n,
            chase: t[1] / n,
            in_view: t[2] / n,
            gait: t[3] / n,
            upright_proxy: t[4] / n,
            action_rate: t[5] / n,
            alive: t[6] / n,
        }
    }
}

/// Current observations of every lane, carried between rollouts.
#[derive(Debug, Clone)]
pub struct LaneInputs {
    pub obs: Vec<f32>,
    pub privileged: Vec<f32>,
}

impl LaneInputs {
    /// Reads the live observation of each lane.
    pub fn from_batch(envs: &EnvBatch) -> Self {
        let mut obs = Vec::with_capacity(envs.len() * OBS_DIM);
        let mut privileged = Vec::with_capacity(envs.len() * PRIV_DIM);
        for lane in envs.lanes() {
            obs.extend(lane.observation().iter().map(|&v| v as f32));
            privileged.extend(lane.privileged().iter().map(|&v| v as f32));
        }
        Self { obs, privileged }
    }
}

/// Scratch space reused across rollouts.
#[derive(Debug, Default)]
pub struct RolloutScratch {
    actor: MlpCache<f32>,
    critic: MlpCache<f32>,
    step: Option<BatchStep>,
}

/// Steps every lane `horizon` times with actions sampled from the policy.
pub fn collect_rollout<R: Rng + ?Sized>(
    envs: &mut EnvBatch,
    policy: &Policy<f32>,
    inputs: &mut LaneInputs,
    horizon: usize,
    gamma: f64,
    rng: &mut R,
    scratch: &mut RolloutScratch,
) -> Result<RolloutBuffer, PpoError> {
    let n = envs.len();
    let mut buf = RolloutBuffer::new(n, horizon);
    let log_std: Vec<f64> = policy.log_std().iter().map(|v| v.to_f64()).collect();
    let std: Vec<f64> = log_std.iter().map(|l| l.exp()).collect();
    let step = scratch.step.get_or_insert_with(|| BatchStep::new(n));
    if step.rewards.len() != n {
        *step = BatchStep::new(n);
    }
    let mut actions = vec![0.0f32; n * ACTION_DIM];

    for t in 0..horizon {
        let base = t * n;
        buf.obs[base * OBS_DIM..(base + n) * OBS_DIM].copy_from_slice(&inputs.obs);
        buf.privileged[base * PRIV_DIM..(base + n) * PRIV_DIM].copy_from_slice(&inputs.privileged);

        policy.actor_batch(&inputs.obs, n, &mut scratch.actor)?;
        policy.critic_batch(&inputs.privileged, n, &mut scratch.critic)?;
        let means = scratch.actor.output();
        for lane in 0..n {
            let mut lp = 0.0;
            for d in 0..ACTION_DIM {
                let k = lane * ACTION_DIM + d;
                let mu = means[k] as f64;
                let eps: f64 = rng.sample(StandardNormal);
                let a = (mu + std[d] * eps) as f32;
                actions[k] = a;
                let z = (a as f64 - mu) / std[d];
                lp += -0.5 * z * z - log_std[d] - 0.918_938_533_204_672_8;
            }
            buf.logprobs[base + lane] = lp;
            buf.values[base + lane] = scratch.critic.output()[lane] as f64;
        }
        buf.actions[base * ACTION_DIM..(base + n) * ACTION_DIM].copy_from_slice(&actions);

        envs.step(&actions, step)?;

        let truncated: Vec<usize> = (0..n).filter(|&l| step.truncated[l]).collect();
        let mut boot = vec![0.0; n];
        if !truncated.is_empty() {
            let rows: Vec<f32> = truncated
                .iter()
                .flat_map(|&l| step.final_privileged[l * PRIV_DIM..(l + 1) * PRIV_DIM].iter().copied())
                .collect();
            policy.critic_batch(&rows, truncated.len(), &mut scratch.critic)?;
            for (k, &l) in truncated.iter().enumerate() {
                boot[l] = gamma * scratch.critic.output()[k] as f64;
            }
        }
        for lane in 0..n {
            buf.rewards[base + lane] = step.rewards[lane] as f64 + boot[lane];
            buf.dones[base + lane] = step.dones[lane];
            for (s, v) in buf.term_sums.iter_mut().zip(step.terms[lane].as_array()) {
                *s += v;
            }
        }
        buf.finished.extend(step.finished.iter().copied());
        inputs.obs.copy_from_slice(&step.obs);
        inputs.privileged.copy_from_slice(&step.privileged);
    }

    policy.critic_batch(&inputs.privileged, n, &mut scratch.critic)?;
    for lane in 0..n {
        buf.bootstrap[lane] = scratch.critic.output()[lane] as f64;
    }
    Ok(buf)
}

/// A set of transitions for one gradient step.
#[derive(Debug, Clone)]
pub struct Minibatch<T> {
    pub len: usize,
    pub obs: Vec<T>,
    pub privileged: Vec<T>,
    pub actions: Vec<T>,
    pub old_logprobs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Minibatch<f32> {
    pub fn gather(buf: &RolloutBuffer, rows: &[usize]) -> Self {
        let mut mb = Minibatch {
            len: rows.len(),
            obs: Vec::with_capacity(rows.len() * OBS_DIM),
            privileged: Vec::with_capacity(rows.len() * PRIV_DIM),
            actions: Vec::with_capacity(rows.len() * ACTION_DIM),
            old_logprobs: Vec::with_capacity(rows.len()),
            advantages: Vec::with_capacity(rows.len()),
            returns: Vec::with_capacity(rows.len()),
        };
        for &i in rows {
            mb.obs.extend_from_slice(&buf.obs[i * OBS_DIM..(i + 1) * OBS_DIM]);
            mb.privileged.extend_from_slice(&buf.privileged[i * PRIV_DIM..(i + 1) * PRIV_DIM]);
            mb.actions.extend_from_slice(&buf.actions[i * ACTION_DIM..(i + 1) * ACTION_DIM]);
            mb.old_logprobs.push(buf.logprobs[i]);
            mb.advantages.push(buf.advantages[i]);
            mb.returns.push(buf.returns[i]);
        }
        mb
    }
}

/// Scalar pieces of the PPO loss for one minibatch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    /// `−mean(min(ρA, clip(ρ)A))`.
    pub policy_loss: f64,
    /// `mean((V − R)²)`.
    pub value_loss: f64,
    pub entropy: f64,
    /// `policy_loss + c_v·value_loss − c_e·entropy`.
    pub total: f64,
    pub clip_fraction: f64,
    /// `mean((ρ − 1) − ln ρ)`.
    pub approx_kl: f64,
}

impl LossParts {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.policy_loss.is_finite() && self.value_loss.is_finite() && self.entropy.is_finite()
    }
}

/// PPO loss and its exact gradient, accumulated into `grad` (same layout as
/// the policy parameters).
pub fn ppo_loss_grad<T: Scalar>(
    policy: &Policy<T>,
    mb: &Minibatch<T>,
    clip_epsilon: f64,
    value_coef: f64,
    entropy_coef: f64,
    grad: &mut [T],
) -> Result<LossParts, PpoError> {
    let b = mb.len;
    let adim = policy.actor_spec().output_dim;
    let inv_b = 1.0 / b as f64;
    let log_std: Vec<f64> = policy.log_std().iter().map(|v| v.to_f64()).collect();
    let inv_var: Vec<f64> = log_std.iter().map(|l| (-2.0 * l).exp()).collect();

    let mut actor_cache = MlpCache::default();
    policy.actor_batch(&mb.obs, b, &mut actor_cache)?;
    let means = actor_cache.output();

    let mut d_mean = vec![T::ZERO; b * adim];
    let mut d_log_std = vec![0.0; adim];
    let (mut surr_sum, mut clipped, mut kl_sum) = (0.0, 0usize, 0.0);
    for i in 0..b {
        let mut lp = 0.0;
        for d in 0..adim {
            let diff = mb.actions[i * adim + d].to_f64() - means[i * adim + d].to_f64();
            lp += -0.5 * diff * diff * inv_var[d] - log_std[d] - 0.918_938_533_204_672_8;
        }
        let log_ratio = lp - mb.old_logprobs[i];
        let ratio = log_ratio.exp();
        let a = mb.advantages[i];
        let unclipped = ratio * a;
        let clipped_ratio = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
        let clipped_obj = clipped_ratio * a;
        // d(surrogate)/d(logp): zero when the clipped branch is the minimum.
        let g = if clipped_obj < unclipped { 0.0 } else { unclipped };
        surr_sum += unclipped.min(clipped_obj);
        if (ratio - 1.0).abs() > clip_epsilon {
            clipped += 1;
        }
        kl_sum += (ratio - 1.0) - log_ratio;
        for d in 0..adim {
            let diff = mb.actions[i * adim + d].to_f64() - means[i * adim + d].to_f64();
            d_mean[i * adim + d] = T::from_f64(-inv_b * g * diff * inv_var[d]);
            d_log_std[d] += -inv_b * g * (diff * diff * inv_var[d] - 1.0);
        }
    }
    let entropy = gaussian_entropy(&log_std);
    for v in d_log_std.iter_mut() {
        *v -= entropy_coef;
    }

    let mut critic_cache = MlpCache::default();
    policy.critic_batch(&mb.privileged, b, &mut critic_cache)?;
    let values = critic_cache.output();
    let mut value_loss = 0.0;
    let mut d_value = vec![T::ZERO; b];
    for i in 0..b {
        let e = values[i].to_f64() - mb.returns[i];
        value_loss += e * e * inv_b;
        d_value[i] = T::from_f64(value_coef * 2.0 * e * inv_b);
    }

    let (ga, gl, gc) = policy.split_grad(grad);
    policy.actor_mlp().backward(policy.actor_params(), &actor_cache, &d_mean, ga);
    for (g, d) in gl.iter_mut().zip(&d_log_std) {
        *g += T::from_f64(*d);
    }
    policy.critic_mlp().backward(policy.critic_params(), &critic_cache, &d_value, gc);

    let policy_loss = -surr_sum * inv_b;
    Ok(LossParts {
        policy_loss,
        value_loss,
        entropy,
        total: policy_loss + value_coef * value_loss - entropy_coef * entropy,
        clip_fraction: clipped as f64 * inv_b,
        approx_kl: kl_sum * inv_b,
    })
}

/// Averages over all minibatch steps of one update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub grad_norm: f64,
}

/// Epochs × minibatches of clipped-surrogate steps. On a non-finite loss the
/// parameters and optimizer are restored and the error carries diagnostics.
pub fn ppo_update<R: Rng + ?Sized>(
    policy: &mut Policy<f32>,
    adam: &mut Adam<f32>,
    buf: &RolloutBuffer,
    hyper: &PpoHyperparams,
    lr: f64,
    rng: &mut R,
) -> Result<UpdateStats, PpoError> {
    let backup = (policy.params().to_vec(), adam.clone());
    let n = buf.len();
    let mb_size = n / hyper.minibatch_count;
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = UpdateStats::default();
    let mut count = 0.0;
    let mut grad = vec![0.0f32; policy.param_count()];
    for epoch in 0..hyper.epochs_per_update {
        order.shuffle(rng);
        for (k, rows) in order.chunks(mb_size).enumerate() {
            let mb = Minibatch::gather(buf, rows);
            grad.fill(0.0);
            let parts = ppo_loss_grad(policy, &mb, hyper.clip_epsilon, hyper.value_coef, hyper.entropy_coef, &mut grad)?;
            if !parts.is_finite() || !grad.iter().all(|g| g.is_finite()) {
                policy.params_mut().copy_from_slice(&backup.0);
                *adam = backup.1;
                return Err(PpoError::NonFinite {
                    epoch,
                    minibatch: k,
                    policy_loss: parts.policy_loss,
                    value_loss: parts.value_loss,
                    entropy: parts.entropy,
                });
            }
            let gn = clip_grad_norm(&mut grad, hyper.max_grad_norm);
            adam.step(policy.params_mut(), &grad, lr);
            policy.clamp_log_std();
            stats.policy_loss += parts.policy_loss;
            stats.value_loss += parts.value_loss;
            stats.entropy += parts.entropy;
            stats.clip_fraction += parts.clip_fraction;
            stats.approx_kl += parts.approx_kl;
            stats.grad_norm += gn;
            count += 1.0;
        }
    }
    if count > 0.0 {
        stats.policy_loss /= count;
        stats.value_loss /= count;
        stats.entropy /= count;
        stats.clip_fraction /= count;
        stats.approx_kl /= count;
        stats.grad_norm /= count;
    }
    Ok(stats)
}

/// Optional automatic stage switch on sustained chase reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricTrigger {
    pub enabled: bool,
    /// Mean unweighted chase term that must be exceeded.
    pub threshold: f64,
    /// Number of recent updates averaged.
    pub window: usize,
}

impl Default for MetricTrigger {
    fn default() -> Self {
        Self { enabled: false, threshold: 0.5, window: 50 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub total_updates: u64,
    /// Updates after which stage 2 starts, unless triggered earlier.
    pub stage1_updates: u64,
    /// Write a checkpoint every this many updates (0 = only at the end).
    pub checkpoint_every: u64,
    pub metric_trigger: MetricTrigger,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { total_updates: 2000, stage1_updates: 500, checkpoint_every: 50, metric_trigger: MetricTrigger::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub actor: MlpSpecConfig,
    pub critic: MlpSpecConfig,
}

/// Hidden sizes and activation; input/output widths come from the layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpecConfig {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: crate::policy::Activation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            actor: MlpSpecConfig { hidden: vec![512, 256, 128], activation: Default::default() },
            critic: MlpSpecConfig { hidden: vec![768, 256, 128], activation: Default::default() },
        }
    }
}

impl NetworkConfig {
    pub fn actor_spec(&self) -> MlpSpec {
        MlpSpec {
            input_dim: OBS_DIM,
            hidden_dims: self.actor.hidden.clone(),
            output_dim: ACTION_DIM,
            activation: self.actor.activation,
        }
    }

    pub fn critic_spec(&self) -> MlpSpec {
        MlpSpec {
            input_dim: PRIV_DIM,
            hidden_dims: self.critic.hidden.clone(),
            output_dim: 1,
            activation: self.critic.activation,
        }
    }
}

/// Everything a training run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub env: EnvConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub ppo: PpoHyperparams,
    pub network: NetworkConfig,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            env: EnvConfig::default(),
            stage1: StageConfig::stage1(),
            stage2: StageConfig::stage2(),
            ppo: PpoHyperparams::default(),
            network: NetworkConfig::default(),
            schedule: Schedule::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        self.env.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.stage1.stage_id != 1 || self.stage2.stage_id != 2 {
            return Err(PpoError::Config("stage1/stage2 must carry stage_id 1 and 2".into()));
        }
        self.ppo.validate()?;
        self.network.actor_spec().validate()?;
        self.network.critic_spec().validate()?;
        if self.schedule.total_updates == 0 {
            return Err(PpoError::Config("schedule.total_updates must be >= 1".into()));
        }
        if self.schedule.metric_trigger.enabled && self.schedule.metric_trigger.window == 0 {
            return Err(PpoError::Config("metric_trigger.window must be >= 1".into()));
        }
        Ok(())
    }
}

/// One metrics-log row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetrics {
    pub schema_version: u32,
    pub update: u64,
    pub stage: u8,
    /// Fraction of lanes whose running episode uses stage 2.
    pub lanes_in_stage2: f64,
    /// Gait weight of the stage being trained (after the reference toggle).
    pub w_gait: f64,
    pub spawn_range: [f64; 2],
    pub fov_scale: f64,
    pub learning_rate: f64,
    pub env_steps: u64,
    pub episodes_finished: usize,
    pub mean_episode_return: Option<f64>,
    pub mean_episode_length: Option<f64>,
    pub reward_terms: RewardTerms,
    pub mean_step_reward: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub grad_norm: f64,
    pub steps_per_second: f64,
}

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Serializable training state beyond the network parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainerProgress {
    pub update: u64,
    pub env_steps: u64,
    pub stage: u8,
    pub chase_history: VecDeque<f64>,
    pub envs: EnvBatch,
}

/// Owns the policy, optimizer and lanes for a run.
pub struct Trainer {
    config: TrainConfig,
    policy: Policy<f32>,
    adam: Adam<f32>,
    envs: EnvBatch,
    inputs: LaneInputs,
    update: u64,
    env_steps: u64,
    stage: u8,
    chase_history: VecDeque<f64>,
    scratch: RolloutScratch,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, PpoError> {
        config.validate()?;
        let policy = Policy::init(config.network.actor_spec(), config.network.critic_spec(), &mut keyed_rng(b"init", &[config.seed]))?;
        let adam = Adam::new(policy.param_count());
        let mut envs = EnvBatch::new(config.env, config.stage1, config.ppo.num_lanes, config.seed)?;
        let mut step = BatchStep::new(envs.len());
        envs.reset_all(&mut step)?;
        let inputs = LaneInputs { obs: step.obs, privileged: step.privileged };
        Ok(Self {
            config,
            policy,
            adam,
            envs,
            inputs,
            update: 0,
            env_steps: 0,
            stage: 1,
            chase_history: VecDeque::new(),
            scratch: RolloutScratch::default(),
        })
    }

    /// Rebuilds a trainer from saved parameters, optimizer and progress.
    pub fn restore(config: TrainConfig, policy: Policy<f32>, adam: Adam<f32>, progress: TrainerProgress) -> Result<Self, PpoError> {
        config.validate()?;
        if policy.actor_spec() != &config.network.actor_spec() || policy.critic_spec() != &config.network.critic_spec() {
            return Err(PpoError::Config("checkpoint network shape differs from the run config".into()));
        }
        if adam.m.len() != policy.param_count() {
            return Err(PpoError::Config("optimizer state size differs from parameter count".into()));
        }
        if progress.envs.len() != config.ppo.num_lanes {
            return Err(PpoError::Config("checkpoint lane count differs from the run config".into()));
        }
        let inputs = LaneInputs::from_batch(&progress.envs);
        Ok(Self {
            config,
            policy,
            adam,
            envs: progress.envs,
            inputs,
            update: progress.update,
            env_steps: progress.env_steps,
            stage: progress.stage,
            chase_history: progress.chase_history,
            scratch: RolloutScratch::default(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn policy(&self) -> &Policy<f32> {
        &self.policy
    }

    pub fn adam(&self) -> &Adam<f32> {
        &self.adam
    }

    pub fn envs(&self) -> &EnvBatch {
        &self.envs
    }

    pub fn update_count(&self) -> u64 {
        self.update
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn stage(&self) -> u8 {
        self.stage
    }

    pub fn is_finished(&self) -> bool {
        self.update >= self.config.schedule.total_updates
    }

    pub fn progress(&self) -> TrainerProgress {
        TrainerProgress {
            update: self.update,
            env_steps: self.env_steps,
            stage: self.stage,
            chase_history: self.chase_history.clone(),
            envs: self.envs.clone(),
        }
    }

    fn active_stage(&self) -> &StageConfig {
        if self.stage == 1 {
            &self.config.stage1
        } else {
            &self.config.stage2
        }
    }

    pub fn learning_rate(&self) -> f64 {
        let p = &self.config.ppo;
        if p.lr_linear_decay {
            let frac = self.update as f64 / self.config.schedule.total_updates as f64;
            p.learning_rate * (1.0 - frac).max(0.0)
        } else {
            p.learning_rate
        }
    }

    /// Switches to stage 2 (lanes adopt it at their next reset). Returns
    /// false if already there.
    pub fn advance_stage(&mut self) -> Result<bool, PpoError> {
        if self.stage >= 2 {
            return Ok(false);
        }
        self.envs.set_stage(self.config.stage2)?;
        self.stage = 2;
        Ok(true)
    }

    /// Whether the schedule or metric trigger asks for stage 2 now.
    pub fn auto_advance_due(&self) -> bool {
        if self.stage != 1 {
            return false;
        }
        if self.update >= self.config.schedule.stage1_updates {
            return true;
        }
        let trig = &self.config.schedule.metric_trigger;
        if trig.enabled && self.chase_history.len() >= trig.window {
            let mean = self.chase_history.iter().sum::<f64>() / self.chase_history.len() as f64;
            return mean > trig.threshold;
        }
        false
    }

    /// Collects one rollout and runs one PPO update.
    pub fn step_update(&mut self) -> Result<TrainingMetrics, PpoError> {
        let started = Instant::now();
        let hp = self.config.ppo;
        let lr = self.learning_rate();
        let mut rng = keyed_rng(b"update", &[self.config.seed, self.update]);
        let mut buf = collect_rollout(
            &mut self.envs,
            &self.policy,
            &mut self.inputs,
            hp.rollout_horizon,
            hp.gamma,
            &mut rng,
            &mut self.scratch,
        )?;
        buf.compute_advantages(hp.gamma, hp.gae_lambda);
        let stats = ppo_update(&mut self.policy, &mut self.adam, &buf, &hp, lr, &mut rng)?;

        let transitions = buf.len() as u64;
        self.env_steps += transitions;
        let terms = buf.mean_terms();
        if self.stage == 1 {
            self.chase_history.push_back(terms.chase);
            let window = self.config.schedule.metric_trigger.window.max(1);
            while self.chase_history.len() > window {
                self.chase_history.pop_front();
            }
        }
        let finished = buf.finished.len();
        let mean_ret = (finished > 0)
            .then(|| buf.finished.iter().map(|e| e.stats.total_reward).sum::<f64>() / finished as f64);
        let mean_len =
            (finished > 0).then(|| buf.finished.iter().map(|e| e.stats.steps as f64).sum::<f64>() / finished as f64);
        let in_stage2 = self.envs.lanes().iter().filter(|l| l.stage().stage_id == 2).count();
        let stage = *self.active_stage();
        let mean_step_reward = buf.rewards.iter().sum::<f64>() / buf.len().max(1) as f64;
        self.update += 1;
        let elapsed = started.elapsed().as_secs_f64();
        Ok(TrainingMetrics {
            schema_version: METRICS_SCHEMA_VERSION,
            update: self.update,
            stage: self.stage,
            lanes_in_stage2: in_stage2 as f64 / self.envs.len() as f64,
            w_gait: stage.effective_weights().w_gait,
            spawn_range: [stage.ball_spawn_range.min, stage.ball_spawn_range.max],
            fov_scale: stage.fov_scale,
            learning_rate: lr,
            env_steps: self.env_steps,
            episodes_finished: finished,
            mean_episode_return: mean_ret,
            mean_episode_length: mean_len,
            reward_terms: terms,
            mean_step_reward,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            clip_fraction: stats.clip_fraction,
            approx_kl: stats.approx_kl,
            grad_norm: stats.grad_norm,
            steps_per_second: if elapsed > 0.0 { transitions as f64 / elapsed } else { 0.0 },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct evaluation of `A_t = Σ_l (γλ)^l · Π_{j<l}(1−done_{t+j}) · δ_{t+l}`.
    fn gae_oracle(r: &[f64], v: &[f64], d: &[bool], boot: f64, g: f64, l: f64) -> Vec<f64> {
        let n = r.len();
        let value_at = |k: usize| if k == n { boot } else { v[k] };
        let delta = |k: usize| r[k] + if d[k] { 0.0 } else { g * value_at(k + 1) } - v[k];
        (0..n)
            .map(|t| {
                let mut total = 0.0;
                let mut weight = 1.0;
                for k in t..n {
                    total += weight * delta(k);
                    if d[k] {
                        break;
                    }
                    weight *= g * l;
                }
                total
            })
            .collect()
    }

    #[test]
    fn gae_examples() {
        let (adv, ret) = compute_gae(&[1.0], &[0.0], &[true], 5.0, 0.994, 0.95);
        assert_eq!(adv, vec![1.0]);
        assert_eq!(ret, vec![1.0]);

        let (adv, _) = compute_gae(&[1.0; 3], &[0.0; 3], &[false; 3], 0.0, 0.994, 0.95);
        let gl = 0.994 * 0.95;
        let expected = [1.0 + gl + gl * gl, 1.0 + gl, 1.0];
        for (a, e) in adv.iter().zip(expected) {
            assert!((a - e).abs() < 1e-6);
        }

        let (adv, _) = compute_gae(&[0.0; 5], &[0.0; 5], &[false, true, false, false, false], 0.0, 0.994, 0.95);
        assert!(adv.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn gae_matches_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let n = rng.random_range(1..=16);
            let r: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let d: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.15).collect();
            let boot = rng.random_range(-5.0..5.0);
            let (adv, ret) = compute_gae(&r, &v, &d, boot, 0.994, 0.95);
            let oracle = gae_oracle(&r, &v, &d, boot, 0.994, 0.95);
            for k in 0..n {
                worst = worst.max((adv[k] - oracle[k]).abs());
                assert_eq!(ret[k], adv[k] + v[k]);
            }
        }
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn advantage_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [256, 1000, 4096] {
            let mut a: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..7.0)).collect();
            normalize_advantages(&mut a);
            let mean = a.iter().sum::<f64>() / n as f64;
            let std = (a.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64).sqrt();
            assert!(mean.abs() < 1e-6);
            assert!((std - 1.0).abs() < 1e-3);
        }
    }

    fn tiny_policy(seed: u64) -> Policy<f64> {
        let actor = MlpSpec { input_dim: 3, hidden_dims: vec![5], output_dim: 2, activation: Activation::Elu };
        let critic = MlpSpec { input_dim: 4, hidden_dims: vec![4], output_dim: 1, activation: Activation::Elu };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Policy::<f64>::zeros(actor.clone(), critic.clone()).unwrap().param_count();
        let params = (0..n).map(|_| rng.random_range(-0.8..0.8)).collect();
        Policy::from_params(actor, critic, params).unwrap()
    }

    fn tiny_batch(policy: &Policy<f64>, seed: u64, b: usize, ratio_spread: f64) -> Minibatch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs: Vec<f64> = (0..b * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let privileged: Vec<f64> = (0..b * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let actions: Vec<f64> = (0..b * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut old = Vec::new();
        for i in 0..b {
            let d = policy.forward_actor(&obs[i * 3..i * 3 + 3]).unwrap();
            let shift = if ratio_spread > 0.0 { rng.random_range(-ratio_spread..ratio_spread) } else { 0.0 };
            old.push(d.logprob_of(&actions[i * 2..i * 2 + 2]) + shift);
        }
        Minibatch {
            len: b,
            obs,
            privileged,
            actions,
            old_logprobs: old,
            advantages: (0..b).map(|_| rng.random_range(-2.0..2.0)).collect(),
            returns: (0..b).map(|_| rng.random_range(-2.0..2.0)).collect(),
        }
    }

    fn loss(policy: &Policy<f64>, mb: &Minibatch<f64>) -> f64 {
        let mut g = vec![0.0; policy.param_count()];
        ppo_loss_grad(policy, mb, 0.2, 0.5, 0.01, &mut g).unwrap().total
    }

    #[test]
    fn ppo_loss_gradient_matches_finite_differences() {
        let policy = tiny_policy(1);
        // Spread of 0.5 in log-ratio puts some samples on the clipped branch.
        let mb = tiny_batch(&policy, 2, 12, 0.5);
        let mut grad = vec![0.0; policy.param_count()];
        let parts = ppo_loss_grad(&policy, &mb, 0.2, 0.5, 0.01, &mut grad).unwrap();
        assert!(parts.clip_fraction > 0.0 && parts.clip_fraction < 1.0);
        let eps = 1e-6;
        for i in 0..policy.param_count() {
            let mut p = policy.clone();
            p.params_mut()[i] += eps;
            let up = loss(&p, &mb);
            p.params_mut()[i] -= 2.0 * eps;
            let down = loss(&p, &mb);
            let fd = (up - down) / (2.0 * eps);
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "param {i}: analytic {} vs fd {fd}", grad[i]);
        }
    }

    #[test]
    fn unit_ratio_means_no_clipping() {
        let policy = tiny_policy(3);
        let mb = tiny_batch(&policy, 4, 16, 0.0);
        let mut g = vec![0.0; policy.param_count()];
        let parts = ppo_loss_grad(&policy, &mb, 0.2, 0.0, 0.0, &mut g).unwrap();
        assert_eq!(parts.clip_fraction, 0.0);
        let mean_adv = mb.advantages.iter().sum::<f64>() / 16.0;
        assert!((parts.policy_loss + mean_adv).abs() < 1e-12);
        assert!(parts.approx_kl.abs() < 1e-12);
    }

    #[test]
    fn clipped_sample_contributes_no_policy_gradient() {
        let policy = tiny_policy(5);
        let mut mb = tiny_batch(&policy, 6, 1, 0.0);
        mb.advantages[0] = 1.5;
        // ρ = e^0.5 > 1.2 with A > 0: clipped branch.
        mb.old_logprobs[0] -= 0.5;
        let mut g = vec![0.0; policy.param_count()];
        let parts = ppo_loss_grad(&policy, &mb, 0.2, 0.0, 0.0, &mut g).unwrap();
        assert_eq!(parts.clip_fraction, 1.0);
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(parts.approx_kl > 0.0);

        // Same ratio, negative advantage: unclipped branch keeps its gradient.
        mb.advantages[0] = -1.5;
        let mut g = vec![0.0; policy.param_count()];
        ppo_loss_grad(&policy, &mb, 0.2, 0.0, 0.0, &mut g).unwrap();
        assert!(g.iter().any(|&v| v != 0.0));
    }

    fn small_config(lanes: usize, updates: u64) -> TrainConfig {
        let mut c = TrainConfig::default();
        c.seed = 3;
        c.ppo.num_lanes = lanes;
        c.ppo.rollout_horizon = 16;
        c.ppo.epochs_per_update = 2;
        c.ppo.minibatch_count = 2;
        c.network.actor.hidden = vec![16, 16];
        c.network.critic.hidden = vec![16, 16];
        c.schedule.total_updates = updates;
        c.schedule.stage1_updates = 3;
        c
    }

    #[test]
    fn zero_objective_leaves_parameters_unchanged() {
        let c = small_config(2, 1);
        let mut t = Trainer::new(c.clone()).unwrap();
        let mut buf = collect_rollout(
            &mut t.envs,
            &t.policy,
            &mut t.inputs,
            8,
            0.994,
            &mut ChaCha8Rng::seed_from_u64(0),
            &mut RolloutScratch::default(),
        )
        .unwrap();
        buf.advantages.fill(0.0);
        let hp = PpoHyperparams { entropy_coef: 0.0, value_coef: 0.0, ..c.ppo };
        let before = t.policy.params().to_vec();
        ppo_update(&mut t.policy, &mut t.adam, &buf, &hp, 3e-4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(t.policy.params(), &before[..]);
    }

    #[test]
    fn rollout_shape_and_determinism() {
        let c = small_config(2, 1);
        let collect = || {
            let mut t = Trainer::new(c.clone()).unwrap();
            collect_rollout(
                &mut t.envs,
                &t.policy,
                &mut t.inputs,
                1,
                0.994,
                &mut ChaCha8Rng::seed_from_u64(9),
                &mut RolloutScratch::default(),
            )
            .unwrap()
        };
        let a = collect();
        assert_eq!((a.lanes, a.horizon, a.len()), (2, 1, 2));
        assert_eq!(a.rewards.len(), 2);
        let b = collect();
        assert_eq!(a.obs, b.obs);
        assert_eq!(a.actions, b.actions);
        assert_eq!(a.rewards, b.rewards);
        assert_eq!(a.logprobs, b.logprobs);
    }

    #[test]
    fn forced_done_blocks_advantage_flow() {
        let c = small_config(2, 1);
        let mut t = Trainer::new(c).unwrap();
        let mut buf = collect_rollout(
            &mut t.envs,
            &t.policy,
            &mut t.inputs,
            8,
            0.994,
            &mut ChaCha8Rng::seed_from_u64(2),
            &mut RolloutScratch::default(),
        )
        .unwrap();
        let k = 3;
        let row = buf.row(1, k);
        buf.dones[row] = true;
        let before: Vec<f64> = (0..=k).map(|t| buf.row(1, t)).map(|i| buf.rewards[i]).collect();
        let mut changed = buf.clone();
        for t in k + 1..8 {
            let i = changed.row(1, t);
            changed.rewards[i] += 100.0;
        }
        changed.bootstrap[1] += 100.0;
        let lane_adv = |b: &RolloutBuffer| {
            let idx: Vec<usize> = (0..8).map(|t| b.row(1, t)).collect();
            let r: Vec<f64> = idx.iter().map(|&i| b.rewards[i]).collect();
            let v: Vec<f64> = idx.iter().map(|&i| b.values[i]).collect();
            let d: Vec<bool> = idx.iter().map(|&i| b.dones[i]).collect();
            (compute_gae(&r, &v, &d, b.bootstrap[1], 0.994, 0.95).0, gae_oracle(&r, &v, &d, b.bootstrap[1], 0.994, 0.95))
        };
        let (a, oa) = lane_adv(&buf);
        let (b, ob) = lane_adv(&changed);
        assert_eq!(&a[..=k], &b[..=k]);
        for t in 0..8 {
            assert!((a[t] - oa[t]).abs() < 1e-9 && (b[t] - ob[t]).abs() < 1e-9);
        }
        assert_eq!(before.len(), k + 1);
    }

    #[test]
    fn trainer_runs_and_switches_stage() {
        let c = small_config(4, 6);
        let mut t = Trainer::new(c).unwrap();
        let mut rows = Vec::new();
        while !t.is_finished() {
            if t.auto_advance_due() {
                assert!(t.advance_stage().unwrap());
            }
            let m = t.step_update().unwrap();
            assert!((0.0..=1.0).contains(&m.clip_fraction));
            assert!(m.approx_kl > -1e-3);
            rows.push(m);
        }
        assert_eq!(rows.len(), 6);
        assert!(rows[..3].iter().all(|m| m.stage == 1 && m.w_gait == 0.8 && m.fov_scale == 2.0));
        assert!(rows[3..].iter().all(|m| m.stage == 2 && m.w_gait == 0.0 && m.fov_scale == 1.0));
        assert_eq!(rows[3].spawn_range, [0.5, 2.0]);
        assert!(!t.advance_stage().unwrap());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let c = small_config(3, 6);
        let run = |t: &mut Trainer, n: usize| {
            for _ in 0..n {
                if t.auto_advance_due() {
                    t.advance_stage().unwrap();
                }
                t.step_update().unwrap();
            }
        };
        let mut straight = Trainer::new(c.clone()).unwrap();
        run(&mut straight, 6);

        let mut first = Trainer::new(c.clone()).unwrap();
        run(&mut first, 2);
        let progress: TrainerProgress = serde_json::from_str(&serde_json::to_string(&first.progress()).unwrap()).unwrap();
        let mut resumed = Trainer::restore(c, first.policy().clone(), first.adam().clone(), progress).unwrap();
        run(&mut resumed, 4);
        let bits = |p: &Policy<f32>| p.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(straight.policy()), bits(resumed.policy()));
        assert_eq!(straight.env_steps(), resumed.env_steps());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.ppo.minibatch_count = 3;
        c.ppo.num_lanes = 5;
        assert!(matches!(c.validate(), Err(PpoError::Config(_))));
        let text = toml::to_string(&TrainConfig::default()).unwrap();
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, TrainConfig::default());
        assert!(toml::from_str::<TrainConfig>("seed = 1\nbogus = 2\n").is_err());
    }
}
