//! Training driver that writes a run directory:
//!
//! ```text
//! <out>/config.toml          effective run config
//! <out>/metrics.jsonl        one TrainingMetrics record per update
//! <out>/checkpoints/*.ckpt   periodic checkpoints
//! <out>/latest.ckpt          most recent checkpoint
//! <out>/ADVANCE_STAGE        create to request the stage-2 switch
//! ```

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::interface::checkpoint::{save_checkpoint, Checkpoint, CheckpointError};
use crate::interface::config::{ConfigError, RunConfig};
use crate::ppo::{PpoError, Trainer, TrainingMetrics};

pub const ADVANCE_STAGE_FILE: &str = "ADVANCE_STAGE";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training failed: {0}")]
    Ppo(#[from] PpoError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.display().to_string(), source }
}

pub enum TrainStart {
    Fresh(RunConfig),
    Resume(Checkpoint),
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    /// Stop after this many updates in this invocation, even if the schedule
    /// has more.
    pub max_updates: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub updates: u64,
    pub stage: u8,
    /// Update count at which stage 2 was switched on during this invocation.
    pub stage_switch_at: Option<u64>,
    pub latest_checkpoint: PathBuf,
}

/// Asks a running trainer writing to `out_dir` to switch to stage 2 before
/// its next update.
pub fn request_stage_advance(out_dir: &Path) -> std::io::Result<PathBuf> {
    let p = out_dir.join(ADVANCE_STAGE_FILE);
    File::create(&p)?;
    Ok(p)
}

pub fn checkpoint_path(out_dir: &Path, update: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("update_{update:06}.ckpt"))
}

pub fn train_to_dir(
    start: TrainStart,
    opts: &TrainOptions,
    mut on_update: impl FnMut(&TrainingMetrics),
) -> Result<TrainReport, TrainError> {
    let out = &opts.out_dir;
    std::fs::create_dir_all(out.join("checkpoints")).map_err(io_err(out))?;
    let (config, mut trainer, resuming) = match start {
        TrainStart::Fresh(config) => {
            config.validate()?;
            let trainer = Trainer::new(config.train_config())?;
            (config, trainer, false)
        }
        TrainStart::Resume(ck) => (ck.run_config()?, ck.into_trainer()?, true),
    };
    let config_path = out.join("config.toml");
    std::fs::write(&config_path, config.to_toml()?).map_err(io_err(&config_path))?;

    let metrics_path = out.join(METRICS_FILE);
    let file = OpenOptions::new()
        .create(true)
        .append(resuming)
        .write(true)
        .truncate(!resuming)
        .open(&metrics_path)
        .map_err(io_err(&metrics_path))?;
    let mut metrics = BufWriter::new(file);

    let control = out.join(ADVANCE_STAGE_FILE);
    let every = config.schedule.checkpoint_every;
    let mut done_here = 0u64;
    let mut stage_switch_at = None;
    let latest = out.join(LATEST_CHECKPOINT);
    while !trainer.is_finished() && opts.max_updates.is_none_or(|m| done_here < m) {
        let requested = control.exists();
        if requested {
            std::fs::remove_file(&control).map_err(io_err(&control))?;
        }
        if (requested || trainer.auto_advance_due()) && trainer.advance_stage()? {
            stage_switch_at = Some(trainer.update_count());
        }
        let m = trainer.step_update()?;
        let line = serde_json::to_string(&m).expect("metrics serialize");
        writeln!(metrics, "{line}").map_err(io_err(&metrics_path))?;
        metrics.flush().map_err(io_err(&metrics_path))?;
        on_update(&m);
        done_here += 1;
        if every > 0 && trainer.update_count() % every == 0 {
            let ck = Checkpoint::from_trainer(&trainer, &config)?;
            save_checkpoint(&checkpoint_path(out, trainer.update_count()), &ck)?;
            save_checkpoint(&latest, &ck)?;
        }
    }
    save_checkpoint(&latest, &Checkpoint::from_trainer(&trainer, &config)?)?;
    Ok(TrainReport { updates: trainer.update_count(), stage: trainer.stage(), stage_switch_at, latest_checkpoint: latest })
}

/// Reads a metrics log back.
pub fn read_metrics(path: &Path) -> Result<Vec<TrainingMetrics>, TrainError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| TrainError::Io {
                path: path.display().to_string(),
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
            })
        })
        .collect()
}
