//! Framed messages between the learner and its actors.
//!
//! ```text
//! frame   := length u32 BE | tag u16 BE | payload        (length = 2 + payload bytes)
//! tag 1  Hello            actor_id u32 | protocol u16 | n u32 | task_id u32 × n
//! tag 2  TransitionBatch  task_id u32 | episode_id u64 | snapshot_version u64
//!                         | success u8 | length u32 | interventions u32
//!                         | n u32 | transition × n
//! tag 3  TalkTweakBatch   episode_id u64 | n u32 | record × n
//! tag 4  SnapshotRequest  have_version u64
//! tag 5  Snapshot         version u64 | noise_scale f64 | n_tasks u32
//!                         | (spec | params) for encoder, primary, refiner
//! tag 6  Metrics          actor_id u32 | n u32 | (name str | value u64) × n
//! tag 7  Shutdown         reason str
//! tag 8  EpisodeAck       episode_id u64
//! ```
//!
//! Payload fields use the little-endian `.httd` record encoding
//! (`transition`, `record`, `spec`, `params`, `str` = u32 length + UTF-8).
//! A `TalkTweakBatch` precedes the `TransitionBatch` of the same episode;
//! the learner ingests both when the transitions arrive and answers with
//! `EpisodeAck`. `Metrics` doubles as the heartbeat.

use std::io::{Read, Write};

use crate::codec::{ByteReader, ByteWriter, MAX_RECORD_LEN};
use crate::domain::{TalkTweakRecord, Transition};
use crate::env::EpisodeResult;
use crate::error::{Error, Result};
use crate::trainer::PolicySnapshot;

pub const PROTOCOL_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    Hello {
        actor_id: u32,
        task_ids: Vec<u32>,
        protocol_version: u16,
    },
    TransitionBatch {
        task_id: u32,
        episode_id: u64,
        snapshot_version: u64,
        result: EpisodeResult,
        transitions: Vec<Transition>,
    },
    TalkTweakBatch {
        episode_id: u64,
        records: Vec<TalkTweakRecord>,
    },
    SnapshotRequest {
        have_version: u64,
    },
    Snapshot(Box<PolicySnapshot>),
    Metrics {
        actor_id: u32,
        counters: Vec<(String, u64)>,
    },
    Shutdown {
        reason: String,
    },
    EpisodeAck {
        episode_id: u64,
    },
}

impl WireMessage {
    pub fn tag(&self) -> u16 {
        match self {
            Self::Hello { .. } => 1,
            Self::TransitionBatch { .. } => 2,
            Self::TalkTweakBatch { .. } => 3,
            Self::SnapshotRequest { .. } => 4,
            Self::Snapshot(_) => 5,
            Self::Metrics { .. } => 6,
            Self::Shutdown { .. } => 7,
            Self::EpisodeAck { .. } => 8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Hello { .. } => "Hello",
            Self::TransitionBatch { .. } => "TransitionBatch",
            Self::TalkTweakBatch { .. } => "TalkTweakBatch",
            Self::SnapshotRequest { .. } => "SnapshotRequest",
            Self::Snapshot(_) => "Snapshot",
            Self::Metrics { .. } => "Metrics",
            Self::Shutdown { .. } => "Shutdown",
            Self::EpisodeAck { .. } => "EpisodeAck",
        }
    }

    fn write_payload(&self, w: &mut ByteWriter) {
        match self {
            Self::Hello {
                actor_id,
                task_ids,
                protocol_version,
            } => {
                w.u32(*actor_id);
                w.u16(*protocol_version);
                w.u32(task_ids.len() as u32);
                for t in task_ids {
                    w.u32(*t);
                }
            }
            Self::TransitionBatch {
                task_id,
                episode_id,
                snapshot_version,
                result,
                transitions,
            } => {
                w.u32(*task_id);
                w.u64(*episode_id);
                w.u64(*snapshot_version);
                w.bool(result.success);
                w.u32(result.length);
                w.u32(result.interventions);
                w.u32(transitions.len() as u32);
                for t in transitions {
                    w.transition(t);
                }
            }
            Self::TalkTweakBatch { episode_id, records } => {
                w.u64(*episode_id);
                w.u32(records.len() as u32);
                for r in records {
                    w.talk_tweak(r);
                }
            }
            Self::SnapshotRequest { have_version } => w.u64(*have_version),
            Self::Snapshot(s) => s.write(w),
            Self::Metrics { actor_id, counters } => {
                w.u32(*actor_id);
                w.u32(counters.len() as u32);
                for (k, v) in counters {
                    w.str(k);
                    w.u64(*v);
                }
            }
            Self::Shutdown { reason } => w.str(reason),
            Self::EpisodeAck { episode_id } => w.u64(*episode_id),
        }
    }

    fn read_payload(tag: u16, r: &mut ByteReader<'_>) -> Result<Self> {
        let count = |r: &mut ByteReader<'_>, min_item: usize| -> Result<usize> {
            let n = r.u32()? as usize;
            if n.saturating_mul(min_item) > r.remaining() {
                return Err(Error::Protocol(format!("count {n} exceeds payload")));
            }
            Ok(n)
        };
        Ok(match tag {
            1 => {
                let actor_id = r.u32()?;
                let protocol_version = r.u16()?;
                let n = count(r, 4)?;
                let task_ids = (0..n).map(|_| r.u32()).collect::<Result<_>>()?;
                Self::Hello {
                    actor_id,
                    task_ids,
                    protocol_version,
                }
            }
            2 => {
                let task_id = r.u32()?;
                let episode_id = r.u64()?;
                let snapshot_version = r.u64()?;
                let result = EpisodeResult {
                    success: r.bool()?,
                    length: r.u32()?,
                    interventions: r.u32()?,
                };
                let n = count(r, 1)?;
                let transitions = (0..n).map(|_| r.transition()).collect::<Result<_>>()?;
                Self::TransitionBatch {
                    task_id,
                    episode_id,
                    snapshot_version,
                    result,
                    transitions,
                }
            }
            3 => {
                let episode_id = r.u64()?;
                let n = count(r, 1)?;
                let records = (0..n).map(|_| r.talk_tweak()).collect::<Result<_>>()?;
                Self::TalkTweakBatch { episode_id, records }
            }
            4 => Self::SnapshotRequest { have_version: r.u64()? },
            5 => Self::Snapshot(Box::new(PolicySnapshot::read(r)?)),
            6 => {
                let actor_id = r.u32()?;
                let n = count(r, 12)?;
                let counters = (0..n)
                    .map(|_| Ok((r.string()?, r.u64()?)))
                    .collect::<Result<_>>()?;
                Self::Metrics { actor_id, counters }
            }
            7 => Self::Shutdown { reason: r.string()? },
            8 => Self::EpisodeAck { episode_id: r.u64()? },
            other => return Err(Error::Protocol(format!("unknown message tag {other}"))),
        })
    }

    /// The complete frame, length prefix included.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        self.write_payload(&mut w);
        let len = (w.buf.len() + 2) as u32;
        let mut out = Vec::with_capacity(w.buf.len() + 6);
        out.extend_from_slice(&len.to_be_bytes());
        out.extend_from_slice(&self.tag().to_be_bytes());
        out.extend_from_slice(&w.buf);
        out
    }

    /// Decodes the bytes following the length prefix (tag and payload).
    pub fn decode_body(body: &[u8]) -> Result<Self> {
        if body.len() < 2 {
            return Err(Error::Protocol("frame shorter than its tag".into()));
        }
        let tag = u16::from_be_bytes([body[0], body[1]]);
        let mut r = ByteReader::new(&body[2..]);
        let msg = Self::read_payload(tag, &mut r)?;
        if !r.is_empty() {
            return Err(Error::Protocol(format!("{} trailing bytes after {}", r.remaining(), msg.name())));
        }
        Ok(msg)
    }
}

pub fn write_message(w: &mut impl Write, msg: &WireMessage) -> Result<()> {
    w.write_all(&msg.encode())?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. A clean end of stream before the length prefix gives
/// `Ok(None)`.
pub fn read_message(r: &mut impl Read) -> Result<Option<WireMessage>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Protocol("stream ended inside a frame header".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(len) as usize;
    if !(2..=MAX_RECORD_LEN).contains(&len) {
        return Err(Error::Protocol(format!("frame length {len} out of range")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    WireMessage::decode_body(&body).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{collect_demos, Learner, TrainConfig};

    fn samples() -> Vec<WireMessage> {
        let cfg = TrainConfig {
            demos_per_task: 1,
            ..Default::default()
        };
        let ep = collect_demos(&cfg).unwrap().remove(0);
        let mut intervened = ep.clone();
        for t in intervened.iter_mut().take(8) {
            t.intervened = true;
        }
        let records = crate::talk_tweak::annotate(&intervened, &cfg.talk);
        let mut snap = Learner::new(cfg).unwrap().snapshot();
        snap.version = 42;
        vec![
            WireMessage::Hello {
                actor_id: 3,
                task_ids: vec![0, 1, 2],
                protocol_version: PROTOCOL_VERSION,
            },
            WireMessage::TransitionBatch {
                task_id: 0,
                episode_id: 1 << 40 | 7,
                snapshot_version: 9,
                result: EpisodeResult {
                    success: true,
                    length: ep.len() as u32,
                    interventions: 0,
                },
                transitions: ep,
            },
            WireMessage::TalkTweakBatch { episode_id: 5, records },
            WireMessage::SnapshotRequest { have_version: 17 },
            WireMessage::Snapshot(Box::new(snap)),
            WireMessage::Metrics {
                actor_id: 1,
                counters: vec![("episodes".into(), 4), ("env_steps".into(), 120)],
            },
            WireMessage::Shutdown { reason: "done".into() },
            WireMessage::EpisodeAck { episode_id: 77 },
        ]
    }

    #[test]
    fn every_message_round_trips() {
        for m in samples() {
            let bytes = m.encode();
            let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
            assert_eq!(len, bytes.len() - 4);
            assert_eq!(u16::from_be_bytes([bytes[4], bytes[5]]), m.tag());
            let back = read_message(&mut bytes.as_slice()).unwrap().unwrap();
            assert_eq!(back, m, "{}", m.name());
        }
    }

    #[test]
    fn stream_of_frames() {
        let msgs = samples();
        let mut stream = Vec::new();
        for m in &msgs {
            write_message(&mut stream, m).unwrap();
        }
        let mut r = stream.as_slice();
        for m in &msgs {
            assert_eq!(&read_message(&mut r).unwrap().unwrap(), m);
        }
        assert!(read_message(&mut r).unwrap().is_none());
    }

    #[test]
    fn hello_bytes_are_exact() {
        let m = WireMessage::Hello {
            actor_id: 2,
            task_ids: vec![1],
            protocol_version: 1,
        };
        assert_eq!(
            m.encode(),
            vec![0, 0, 0, 16, 0, 1, 2, 0, 0, 0, 1, 0, 1, 0, 0, 0, 1, 0, 0, 0]
        );
    }

    #[test]
    fn malformed_frames_rejected() {
        let good = WireMessage::EpisodeAck { episode_id: 1 }.encode();
        // Truncated body.
        assert!(read_message(&mut &good[..good.len() - 1]).is_err());
        // Truncated header.
        assert!(read_message(&mut &good[..2]).is_err());
        // Unknown tag.
        let mut bad = good.clone();
        bad[5] = 99;
        assert!(read_message(&mut bad.as_slice()).is_err());
        // Trailing payload bytes.
        let mut long = WireMessage::SnapshotRequest { have_version: 1 }.encode();
        long.push(0);
        long[3] += 1;
        assert!(read_message(&mut long.as_slice()).is_err());
        // Absurd length.
        assert!(read_message(&mut [0xff, 0xff, 0xff, 0xff, 0, 1].as_slice()).is_err());
        // Count larger than the payload.
        let mut w = vec![0, 0, 0, 14, 0, 3];
        w.extend_from_slice(&5u64.to_le_bytes());
        w.extend_from_slice(&1000u32.to_le_bytes());
        assert!(read_message(&mut w.as_slice()).is_err());
    }
}
