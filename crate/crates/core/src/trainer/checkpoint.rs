//! Checkpoint directory layout:
//!
//! ```text
//! <dir>/learner.ckpt     snapshot, critics, optimizer and rng state
//! <dir>/buffers/*.httd   replay contents
//! ```

use std::path::Path;

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::replay::ReplayBuffer;

use super::{Learner, TrainConfig};

pub const CHECKPOINT_FILE: &str = "learner.ckpt";
const CKPT_MAGIC: &[u8; 4] = b"HTCK";

pub fn save_checkpoint(dir: impl AsRef<Path>, learner: &Learner, buffer: &ReplayBuffer) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut w = ByteWriter::new();
    w.buf.extend_from_slice(CKPT_MAGIC);
    learner.write_state(&mut w);
    let tmp = dir.join(format!("{CHECKPOINT_FILE}.tmp"));
    std::fs::write(&tmp, &w.buf)?;
    std::fs::rename(&tmp, dir.join(CHECKPOINT_FILE))?;
    buffer.save(dir.join("buffers"))
}

pub fn load_checkpoint(dir: impl AsRef<Path>, cfg: TrainConfig) -> Result<(Learner, ReplayBuffer)> {
    let dir = dir.as_ref();
    let bytes = std::fs::read(dir.join(CHECKPOINT_FILE))?;
    if bytes.len() < 4 || &bytes[..4] != CKPT_MAGIC {
        return Err(Error::Codec("not a learner checkpoint".into()));
    }
    let mut r = ByteReader::new(&bytes[4..]);
    let n_tasks = cfg.n_tasks();
    let gamma = cfg.gamma;
    let learner = Learner::read_state(cfg, &mut r)?;
    if !r.is_empty() {
        return Err(Error::Codec("trailing bytes in checkpoint".into()));
    }
    let buffer = ReplayBuffer::load(dir.join("buffers"), n_tasks, gamma)?;
    Ok((learner, buffer))
}
