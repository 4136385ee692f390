//! Run configuration, checkpoints, the training driver, replays and the
//! tele-operation wire protocol.

pub mod checkpoint;
pub mod config;
pub mod replay;
#[cfg(feature = "serve")]
pub mod serve;
pub mod train;
pub mod wire;
