//! Dual-actor reinforcement-learning fine-tuning with human-in-the-loop
//! corrections, on a simulated bolt-handling workcell.

pub mod actors;
pub mod cli;
pub mod codec;
pub mod config;
pub mod critics;
pub mod domain;
pub mod env;
pub mod error;
pub mod net;
pub mod numerics;
pub mod replay;
pub mod talk_tweak;
pub mod trainer;
pub mod ui;

pub use error::{Error, Result};
