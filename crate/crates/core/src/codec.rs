//! The `.httd` dataset format and the shared binary record encoding.
//!
//! ```text
//! file    := magic "HTTD" | version u16 LE | record*
//! record  := length u32 LE | payload (length bytes)
//! payload := tag u8 | body
//!   tag 1 = Transition      body = obs | action | reward f64 | next_obs | done u8 | intervened u8 | task u32
//!   tag 2 = TalkTweakRecord body = obs | action | command
//! obs     := ee_pos 3×f64 | ee_rpy 3×f64 | grip u8 (0 open, 1 closed) | object 6×f64 | goal 6×f64
//!            | attached u8 | step u32 | task u32
//! action  := dpos 3×f64 | drot 3×f64 | grip f64
//! command := axes 3×i8 | is_null u8
//! ```
//!
//! All reals are IEEE-754 `f64` little-endian, so decoding is bit-exact.
//! The text export (`.httd.txt`) holds one JSON object per line with a
//! `kind` field; `serde_json` prints shortest round-trip floats, so it is
//! lossless as well.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{Action, GripState, Observation, RefinementCommand, TalkTweakRecord, Transition};
use crate::error::{Error, Result};
use crate::numerics::{Activation, MlpSpec, ParamVector};

pub const MAGIC: &[u8; 4] = b"HTTD";
pub const FORMAT_VERSION: u16 = 1;
const TAG_TRANSITION: u8 = 1;
const TAG_TALK_TWEAK: u8 = 2;
/// Upper bound on one record or frame; guards against corrupt lengths.
pub const MAX_RECORD_LEN: usize = 256 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Transition(Transition),
    TalkTweak(TalkTweakRecord),
}

#[derive(Debug, Default)]
pub struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn i8(&mut self, v: i8) {
        self.buf.push(v as u8);
    }

    pub fn bool(&mut self, v: bool) {
        self.buf.push(v as u8);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        vs.iter().for_each(|&v| self.f64(v));
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
    }

    pub fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }

    pub fn observation(&mut self, o: &Observation) {
        self.f64s(&o.ee_pos);
        self.f64s(&o.ee_rpy);
        self.u8(matches!(o.grip_state, GripState::Closed) as u8);
        self.f64s(&o.object_pose);
        self.f64s(&o.goal_pose);
        self.bool(o.attached);
        self.u32(o.step_index);
        self.u32(o.task_id as u32);
    }

    pub fn action(&mut self, a: &Action) {
        self.f64s(&a.to_array());
    }

    pub fn command(&mut self, c: &RefinementCommand) {
        c.axes.iter().for_each(|&a| self.i8(a));
        self.bool(c.is_null);
    }

    pub fn transition(&mut self, t: &Transition) {
        self.observation(&t.obs);
        self.action(&t.action);
        self.f64(t.reward);
        self.observation(&t.next_obs);
        self.bool(t.done);
        self.bool(t.intervened);
        self.u32(t.task_id as u32);
    }

    pub fn talk_tweak(&mut self, r: &TalkTweakRecord) {
        self.observation(&r.obs);
        self.action(&r.action);
        self.command(&r.command);
    }

    pub fn params(&mut self, p: &ParamVector) {
        write_params(self, p);
    }
}

pub struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.remaining() == 0
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Codec(format!(
                "truncated input: need {n} bytes at offset {}, have {}",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn i8(&mut self) -> Result<i8> {
        Ok(self.u8()? as i8)
    }

    pub fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Codec(format!("invalid bool byte {v}"))),
        }
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64_array<const N: usize>(&mut self) -> Result<[f64; N]> {
        let mut out = [0.0; N];
        for v in &mut out {
            *v = self.f64()?;
        }
        Ok(out)
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub fn string(&mut self) -> Result<String> {
        let b = self.bytes()?;
        String::from_utf8(b.to_vec()).map_err(|e| Error::Codec(format!("invalid utf-8: {e}")))
    }

    pub fn observation(&mut self) -> Result<Observation> {
        let ee_pos = self.f64_array()?;
        let ee_rpy = self.f64_array()?;
        let grip_state = match self.u8()? {
            0 => GripState::Open,
            1 => GripState::Closed,
            v => return Err(Error::Codec(format!("invalid grip state {v}"))),
        };
        Ok(Observation {
            ee_pos,
            ee_rpy,
            grip_state,
            object_pose: self.f64_array()?,
            goal_pose: self.f64_array()?,
            attached: self.bool()?,
            step_index: self.u32()?,
            task_id: self.u32()? as usize,
        })
    }

    pub fn action(&mut self) -> Result<Action> {
        let a: [f64; 7] = self.f64_array()?;
        Ok(Action::from_array(&a))
    }

    pub fn command(&mut self) -> Result<RefinementCommand> {
        let axes = [self.i8()?, self.i8()?, self.i8()?];
        let is_null = self.bool()?;
        if axes.iter().any(|a| !(-1..=1).contains(a)) || (is_null && axes != [0, 0, 0]) {
            return Err(Error::Codec(format!("invalid command axes {axes:?} null={is_null}")));
        }
        Ok(RefinementCommand { axes, is_null })
    }

    pub fn transition(&mut self) -> Result<Transition> {
        Ok(Transition {
            obs: self.observation()?,
            action: self.action()?,
            reward: self.f64()?,
            next_obs: self.observation()?,
            done: self.bool()?,
            intervened: self.bool()?,
            task_id: self.u32()? as usize,
        })
    }

    pub fn talk_tweak(&mut self) -> Result<TalkTweakRecord> {
        Ok(TalkTweakRecord {
            obs: self.observation()?,
            action: self.action()?,
            command: self.command()?,
        })
    }

    pub fn params(&mut self) -> Result<ParamVector> {
        read_params(self)
    }
}

pub fn encode_record(rec: &Record) -> Vec<u8> {
    let mut w = ByteWriter::new();
    match rec {
        Record::Transition(t) => {
            w.u8(TAG_TRANSITION);
            w.transition(t);
        }
        Record::TalkTweak(r) => {
            w.u8(TAG_TALK_TWEAK);
            w.talk_tweak(r);
        }
    }
    w.buf
}

pub fn decode_record(payload: &[u8]) -> Result<Record> {
    let mut r = ByteReader::new(payload);
    let rec = match r.u8()? {
        TAG_TRANSITION => Record::Transition(r.transition()?),
        TAG_TALK_TWEAK => Record::TalkTweak(r.talk_tweak()?),
        t => return Err(Error::Codec(format!("unknown record tag {t}"))),
    };
    if !r.is_empty() {
        return Err(Error::Codec(format!("{} trailing bytes after record", r.remaining())));
    }
    Ok(rec)
}

/// Serialize a whole dataset (header plus records) into memory.
pub fn encode_dataset(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + records.len() * 256);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for rec in records {
        let payload = encode_record(rec);
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&payload);
    }
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Codec(format!("bad magic {magic:?}")));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Codec(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let mut records = Vec::new();
    while !r.is_empty() {
        let len = r.u32()? as usize;
        if len > MAX_RECORD_LEN {
            return Err(Error::Codec(format!("record length {len} exceeds limit")));
        }
        records.push(decode_record(r.take(len)?)?);
    }
    Ok(records)
}

pub fn write_dataset(path: impl AsRef<Path>, records: &[Record]) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&encode_dataset(records))?;
    f.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_dataset(&bytes)
}

/// Appends records to a dataset file, writing the header when the file is
/// new and checking it otherwise.
pub struct DatasetAppender {
    file: BufWriter<std::fs::File>,
}

impl DatasetAppender {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(path.as_ref())?;
        if f.metadata()?.len() == 0 {
            f.write_all(MAGIC)?;
            f.write_all(&FORMAT_VERSION.to_le_bytes())?;
        } else {
            let mut head = [0u8; 6];
            f.read_exact(&mut head)
                .map_err(|e| Error::Codec(format!("{}: {e}", path.as_ref().display())))?;
            if &head[..4] != MAGIC || head[4..] != FORMAT_VERSION.to_le_bytes() {
                return Err(Error::Codec(format!(
                    "{} is not a version {FORMAT_VERSION} dataset",
                    path.as_ref().display()
                )));
            }
        }
        Ok(Self { file: BufWriter::new(f) })
    }

    pub fn append(&mut self, rec: &Record) -> Result<()> {
        let payload = encode_record(rec);
        self.file.write_all(&(payload.len() as u32).to_le_bytes())?;
        self.file.write_all(&payload)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.file.flush()?;
        Ok(())
    }
}

pub fn record_to_text(rec: &Record) -> String {
    serde_json::to_string(rec).expect("records serialize to JSON")
}

pub fn record_from_text(line: &str) -> Result<Record> {
    serde_json::from_str(line).map_err(|e| Error::Parse(format!("text record: {e}")))
}

pub fn write_text_export(path: impl AsRef<Path>, records: &[Record]) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        writeln!(f, "{}", record_to_text(rec))?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_text_export(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(record_from_text(&line)?);
    }
    Ok(out)
}

/// `u32 layer count | (u32 rows, u32 cols) per layer | f64 values`.
pub fn write_params(w: &mut ByteWriter, p: &ParamVector) {
    w.u32(p.layout.len() as u32);
    for &(r, c) in &p.layout {
        w.u32(r as u32);
        w.u32(c as u32);
    }
    w.f64s(&p.values);
}

pub fn read_params(r: &mut ByteReader<'_>) -> Result<ParamVector> {
    let n = r.u32()? as usize;
    if n > 1024 {
        return Err(Error::Codec(format!("implausible layer count {n}")));
    }
    let mut layout = Vec::with_capacity(n);
    for _ in 0..n {
        layout.push((r.u32()? as usize, r.u32()? as usize));
    }
    let len = ParamVector::expected_len(&layout);
    if len * 8 > r.remaining() {
        return Err(Error::Codec(format!("parameter block needs {len} values")));
    }
    let mut values = Vec::with_capacity(len);
    for _ in 0..len {
        values.push(r.f64()?);
    }
    Ok(ParamVector { values, layout })
}

pub fn params_to_bytes(p: &ParamVector) -> Vec<u8> {
    let mut w = ByteWriter::new();
    write_params(&mut w, p);
    w.buf
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<ParamVector> {
    let mut r = ByteReader::new(bytes);
    let p = read_params(&mut r)?;
    if !r.is_empty() {
        return Err(Error::Codec("trailing bytes after parameters".into()));
    }
    Ok(p)
}

/// `u32 dim count | u32 dims | u8 hidden activation codes | u8 output code`.
pub fn write_spec(w: &mut ByteWriter, s: &MlpSpec) {
    w.u32(s.layer_dims.len() as u32);
    s.layer_dims.iter().for_each(|&d| w.u32(d as u32));
    s.hidden_activations.iter().for_each(|a| w.u8(a.code()));
    w.u8(s.output_activation.code());
}

pub fn read_spec(r: &mut ByteReader<'_>) -> Result<MlpSpec> {
    let n = r.u32()? as usize;
    if !(2..=1024).contains(&n) {
        return Err(Error::Codec(format!("implausible layer count {n}")));
    }
    let mut layer_dims = Vec::with_capacity(n);
    for _ in 0..n {
        layer_dims.push(r.u32()? as usize);
    }
    let mut hidden_activations = Vec::with_capacity(n - 2);
    for _ in 0..n - 2 {
        hidden_activations.push(Activation::from_code(r.u8()?)?);
    }
    let spec = MlpSpec {
        layer_dims,
        hidden_activations,
        output_activation: Activation::from_code(r.u8()?)?,
    };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::TaskId;
    use proptest::prelude::*;

    fn arb_obs() -> impl Strategy<Value = Observation> {
        (
            prop::array::uniform3(-1.0f64..1.0),
            prop::array::uniform3(-3.0f64..3.0),
            any::<bool>(),
            prop::array::uniform6(-1.0f64..1.0),
            prop::array::uniform6(-1.0f64..1.0),
            any::<bool>(),
            0u32..=50,
            0usize..3,
        )
            .prop_map(|(ee_pos, ee_rpy, g, object_pose, goal_pose, attached, step_index, task_id)| Observation {
                ee_pos,
                ee_rpy,
                grip_state: if g { GripState::Closed } else { GripState::Open },
                object_pose,
                goal_pose,
                attached,
                step_index,
                task_id: task_id as TaskId,
            })
    }

    fn arb_action() -> impl Strategy<Value = Action> {
        prop::array::uniform7(-1.0f64..1.0).prop_map(|a| Action::from_array(&a))
    }

    fn arb_record() -> impl Strategy<Value = Record> {
        let transition = (arb_obs(), arb_action(), any::<bool>(), arb_obs(), any::<bool>(), any::<bool>())
            .prop_map(|(obs, action, r, next_obs, done, intervened)| {
                Record::Transition(Transition {
                    task_id: obs.task_id,
                    obs,
                    action,
                    reward: if r { 1.0 } else { 0.0 },
                    next_obs,
                    done,
                    intervened,
                })
            });
        let command = prop_oneof![
            Just(RefinementCommand::NULL),
            prop::array::uniform3(-1i8..=1).prop_map(|axes| RefinementCommand { axes, is_null: false }),
        ];
        let tt = (arb_obs(), arb_action(), command)
            .prop_map(|(obs, action, command)| Record::TalkTweak(TalkTweakRecord { obs, action, command }));
        prop_oneof![transition, tt]
    }

    proptest! {
        #[test]
        fn binary_roundtrip_is_bit_exact(records in prop::collection::vec(arb_record(), 0..8)) {
            let bytes = encode_dataset(&records);
            let back = decode_dataset(&bytes).unwrap();
            prop_assert_eq!(&back, &records);
            prop_assert_eq!(encode_dataset(&back), bytes);
        }

        #[test]
        fn text_roundtrip_is_lossless(rec in arb_record()) {
            let back = record_from_text(&record_to_text(&rec)).unwrap();
            prop_assert_eq!(encode_record(&back), encode_record(&rec));
        }
    }

    #[test]
    fn appender_matches_whole_file_encoding() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.httd");
        let recs: Vec<Record> = (0..3)
            .map(|i| {
                let obs = crate::env::Scene::reset(&crate::env::EnvConfig::default(), i % 3, i as u64).unwrap().observation();
                Record::TalkTweak(TalkTweakRecord {
                    obs,
                    action: Action::ZERO,
                    command: RefinementCommand::NULL,
                })
            })
            .collect();
        let mut a = DatasetAppender::open(&path).unwrap();
        a.append(&recs[0]).unwrap();
        drop(a);
        let mut a = DatasetAppender::open(&path).unwrap();
        a.append(&recs[1]).unwrap();
        a.append(&recs[2]).unwrap();
        a.flush().unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), encode_dataset(&recs));
        std::fs::write(&path, b"nope!!").unwrap();
        assert!(DatasetAppender::open(&path).is_err());
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let bytes = encode_dataset(&[]);
        assert!(decode_dataset(&bytes).unwrap().is_empty());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_dataset(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode_dataset(&bad).unwrap_err().to_string().contains("version"));
        let mut truncated = bytes;
        truncated.extend_from_slice(&10u32.to_le_bytes());
        truncated.push(1);
        assert!(decode_dataset(&truncated).is_err());
    }

    #[test]
    fn params_roundtrip() {
        let spec = MlpSpec::new(vec![3, 4, 2], Activation::Tanh, Activation::Identity).unwrap();
        let p = crate::numerics::mlp_init(&spec, 3).unwrap();
        let back = params_from_bytes(&params_to_bytes(&p)).unwrap();
        assert_eq!(back, p);
        let mut w = ByteWriter::new();
        write_spec(&mut w, &spec);
        assert_eq!(read_spec(&mut ByteReader::new(&w.buf)).unwrap(), spec);
    }
}
