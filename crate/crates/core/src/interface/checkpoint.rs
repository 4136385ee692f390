//! Binary checkpoint container.
//!
//! Byte layout (all integers little-endian):
//!
//! | field | encoding |
//! |---|---|
//! | magic | 8 bytes `DRBLCKPT` |
//! | format version | u32 |
//! | observation layout version | u32 |
//! | layout descriptor | u32 length + UTF-8 |
//! | actor spec, critic spec | u32 length + UTF-8 JSON each |
//! | stage id | u8 |
//! | update count, env steps | u64 each |
//! | parameter count n | u64 |
//! | parameters | n × f32, flat `[actor | log_std | critic]`, row-major weights |
//! | Adam step, beta1, beta2, eps | u64, f64, f64, f64 |
//! | Adam first and second moments | n × f32 each |
//! | run-config digest | 32 bytes SHA-256 of the effective config text |
//! | run config | u32 length + UTF-8 TOML |
//! | trainer progress | u32 length + UTF-8 JSON (empty if absent) |
//! | trailer | 32 bytes SHA-256 of every preceding byte |

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::{layout_descriptor, OBS_DIM, OBS_LAYOUT_VERSION, PRIV_DIM};
use crate::interface::config::{ConfigError, RunConfig};
use crate::policy::{Adam, MlpSpec, Policy, PolicyError};
use crate::ppo::{Trainer, TrainerProgress};

pub const MAGIC: &[u8; 8] = b"DRBLCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint format version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("observation layout mismatch: {0}")]
    Layout(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub layout_version: u32,
    pub layout: String,
    pub actor: MlpSpec,
    pub critic: MlpSpec,
    pub stage: u8,
    pub update: u64,
    pub env_steps: u64,
    pub params: Vec<f32>,
    pub adam: Adam<f32>,
    pub config_digest: [u8; 32],
    pub config_toml: String,
    /// Serialized `TrainerProgress`, needed only to resume training.
    pub progress_json: String,
}

impl Checkpoint {
    /// Snapshot of a trainer, including lane states for exact resumption.
    pub fn from_trainer(trainer: &Trainer, config: &RunConfig) -> Result<Self, CheckpointError> {
        let progress = serde_json::to_string(&trainer.progress())
            .map_err(|e| CheckpointError::Corrupt(format!("cannot encode progress: {e}")))?;
        let mut c = Self::from_policy(trainer.policy(), config)?;
        c.stage = trainer.stage();
        c.update = trainer.update_count();
        c.env_steps = trainer.env_steps();
        c.adam = trainer.adam().clone();
        c.progress_json = progress;
        Ok(c)
    }

    /// Parameters only, with a fresh optimizer state and no progress.
    pub fn from_policy(policy: &Policy<f32>, config: &RunConfig) -> Result<Self, CheckpointError> {
        Ok(Self {
            layout_version: OBS_LAYOUT_VERSION,
            layout: layout_descriptor(),
            actor: policy.actor_spec().clone(),
            critic: policy.critic_spec().clone(),
            stage: 1,
            update: 0,
            env_steps: 0,
            params: policy.params().to_vec(),
            adam: Adam::new(policy.param_count()),
            config_digest: config.digest()?,
            config_toml: config.to_toml()?,
            progress_json: String::new(),
        })
    }

    pub fn policy(&self) -> Result<Policy<f32>, CheckpointError> {
        Ok(Policy::from_params(self.actor.clone(), self.critic.clone(), self.params.clone())?)
    }

    pub fn run_config(&self) -> Result<RunConfig, CheckpointError> {
        Ok(RunConfig::from_toml_str(&self.config_toml)?)
    }

    pub fn progress(&self) -> Result<Option<TrainerProgress>, CheckpointError> {
        if self.progress_json.is_empty() {
            return Ok(None);
        }
        serde_json::from_str(&self.progress_json)
            .map(Some)
            .map_err(|e| CheckpointError::Corrupt(format!("bad trainer progress: {e}")))
    }

    /// Rebuilds the trainer exactly as it was when saved.
    pub fn into_trainer(&self) -> Result<Trainer, CheckpointError> {
        let config = self.run_config()?;
        let progress = self
            .progress()?
            .ok_or_else(|| CheckpointError::Corrupt("checkpoint has no trainer progress to resume".into()))?;
        Trainer::restore(config.train_config(), self.policy()?, self.adam.clone(), progress)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(16 + self.params.len() * 12 + self.progress_json.len());
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        b.extend_from_slice(&self.layout_version.to_le_bytes());
        put_str(&mut b, &self.layout);
        put_str(&mut b, &serde_json::to_string(&self.actor).expect("spec serializes"));
        put_str(&mut b, &serde_json::to_string(&self.critic).expect("spec serializes"));
        b.push(self.stage);
        b.extend_from_slice(&self.update.to_le_bytes());
        b.extend_from_slice(&self.env_steps.to_le_bytes());
        b.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        put_f32s(&mut b, &self.params);
        b.extend_from_slice(&self.adam.t.to_le_bytes());
        for v in [self.adam.beta1, self.adam.beta2, self.adam.eps] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        put_f32s(&mut b, &self.adam.m);
        put_f32s(&mut b, &self.adam.v);
        b.extend_from_slice(&self.config_digest);
        put_str(&mut b, &self.config_toml);
        put_str(&mut b, &self.progress_json);
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        b
    }

    /// Parses and checks integrity, format version and observation layout.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::Corrupt("missing magic header (not a checkpoint, or truncated)".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(CheckpointError::Corrupt("digest mismatch (truncated or modified file)".into()));
        }
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version { found: version, expected: FORMAT_VERSION });
        }
        let layout_version = r.u32()?;
        let layout = r.string()?;
        let actor: MlpSpec = r.json()?;
        let critic: MlpSpec = r.json()?;
        let stage = r.u8()?;
        let update = r.u64()?;
        let env_steps = r.u64()?;
        let n = r.u64()? as usize;
        let params = r.f32s(n)?;
        let t = r.u64()?;
        let beta1 = r.f64()?;
        let beta2 = r.f64()?;
        let eps = r.f64()?;
        let m = r.f32s(n)?;
        let v = r.f32s(n)?;
        let config_digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let config_toml = r.string()?;
        let progress_json = r.string()?;
        if r.pos != body.len() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", body.len() - r.pos)));
        }
        let c = Self {
            layout_version,
            layout,
            actor,
            critic,
            stage,
            update,
            env_steps,
            params,
            adam: Adam { beta1, beta2, eps, t, m, v },
            config_digest,
            config_toml,
            progress_json,
        };
        c.check_layout()?;
        Ok(c)
    }

    fn check_layout(&self) -> Result<(), CheckpointError> {
        if self.layout_version != OBS_LAYOUT_VERSION || self.layout != layout_descriptor() {
            return Err(CheckpointError::Layout(format!(
                "checkpoint layout v{} `{}`, this build expects v{} `{}`",
                self.layout_version,
                self.layout,
                OBS_LAYOUT_VERSION,
                layout_descriptor()
            )));
        }
        if self.actor.input_dim != OBS_DIM || self.critic.input_dim != PRIV_DIM {
            return Err(CheckpointError::Layout(format!(
                "checkpoint networks take observation dim {} / privileged dim {}, this build produces {OBS_DIM} / {PRIV_DIM}",
                self.actor.input_dim, self.critic.input_dim
            )));
        }
        let expected = self.actor.param_count() + self.actor.output_dim + self.critic.param_count();
        if self.params.len() != expected {
            return Err(CheckpointError::Corrupt(format!(
                "{} parameters for networks that need {expected}",
                self.params.len()
            )));
        }
        Ok(())
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

fn put_f32s(b: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        b.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Corrupt(format!("unexpected end of data at byte {}", self.pos))),
        }
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| CheckpointError::Corrupt("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Corrupt("invalid UTF-8 string".into()))
    }

    fn json<T: serde::de::DeserializeOwned>(&mut self) -> Result<T, CheckpointError> {
        let s = self.string()?;
        serde_json::from_str(&s).map_err(|e| CheckpointError::Corrupt(format!("bad network spec: {e}")))
    }
}

/// Writes to a temporary sibling then renames, so readers never see a
/// half-written file.
pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io { path: path.display().to_string(), source };
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(&checkpoint.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Activation;
    use crate::randomization::keyed_rng;
    use rand::Rng;

    fn small_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.network.actor.hidden = vec![16, 8];
        c.network.critic.hidden = vec![16, 8];
        c.ppo.num_lanes = 2;
        c.ppo.rollout_horizon = 8;
        c
    }

    fn policy_for(c: &RunConfig, seed: u64) -> Policy<f32> {
        Policy::init(c.network.actor_spec(), c.network.critic_spec(), &mut keyed_rng(b"test", &[seed])).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = small_config();
        let p = policy_for(&c, 1);
        let ck = Checkpoint::from_policy(&p, &c).unwrap();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let q = back.policy().unwrap();
        let mut rng = keyed_rng(b"inputs", &[0]);
        for _ in 0..100 {
            let x: Vec<f32> = (0..OBS_DIM).map(|_| rng.random_range(-2.0..2.0)).collect();
            let a = p.forward_actor(&x).unwrap();
            let b = q.forward_actor(&x).unwrap();
            assert_eq!(a.mean.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.mean.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn truncation_and_tampering_are_detected() {
        let c = small_config();
        let bytes = Checkpoint::from_policy(&policy_for(&c, 2), &c).unwrap().to_bytes();
        for cut in [0, 4, 8, 100, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(CheckpointError::Corrupt(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[200] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(CheckpointError::Corrupt(_))));
    }

    /// Re-signs a modified body so only the semantic check can reject it.
    fn resign(mut body: Vec<u8>) -> Vec<u8> {
        body.truncate(body.len() - DIGEST_LEN);
        let d = Sha256::digest(&body);
        body.extend_from_slice(&d);
        body
    }

    #[test]
    fn version_mismatch_is_refused() {
        let c = small_config();
        let mut bytes = Checkpoint::from_policy(&policy_for(&c, 3), &c).unwrap().to_bytes();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        let e = Checkpoint::from_bytes(&resign(bytes)).unwrap_err();
        assert!(matches!(e, CheckpointError::Version { found: 2, expected: 1 }), "{e}");
    }

    #[test]
    fn observation_dimension_mismatch_is_refused() {
        let c = small_config();
        let actor = MlpSpec { input_dim: OBS_DIM + 1, hidden_dims: vec![16, 8], output_dim: 6, activation: Activation::Elu };
        let p = Policy::<f32>::init(actor, c.network.critic_spec(), &mut keyed_rng(b"x", &[0])).unwrap();
        let bytes = Checkpoint::from_policy(&p, &c).unwrap().to_bytes();
        let e = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(matches!(e, CheckpointError::Layout(_)), "{e}");
        assert!(e.to_string().contains("24"), "{e}");
    }

    #[test]
    fn layout_descriptor_mismatch_is_refused() {
        let c = small_config();
        let mut ck = Checkpoint::from_policy(&policy_for(&c, 4), &c).unwrap();
        ck.layout = ck.layout.replace("prev_action:6", "prev_action:7");
        assert!(matches!(Checkpoint::from_bytes(&ck.to_bytes()), Err(CheckpointError::Layout(_))));
    }

    #[test]
    fn file_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let c = small_config();
        let ck = Checkpoint::from_policy(&policy_for(&c, 5), &c).unwrap();
        save_checkpoint(&path, &ck).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck);
        assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(CheckpointError::Io { .. })));
        assert_eq!(ck.run_config().unwrap(), c);
    }
}
