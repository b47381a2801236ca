//! Per-task demo / rollout / intervention stores, the pooled talk-and-tweak
//! store, and the warm-up and online sampling schedules.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{read_dataset, write_dataset, Record};
use crate::domain::{TalkTweakRecord, TaskId, Transition};
use crate::error::{Error, Result};
use crate::numerics::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Demo,
    Rollout,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sampled {
    pub transition: Transition,
    pub provenance: Provenance,
    /// Monte-Carlo return for demo-side draws.
    pub mc_return: Option<f64>,
}

fn continues(transitions: &[Transition], i: usize) -> bool {
    let t = &transitions[i];
    !t.done && i + 1 < transitions.len() && transitions[i + 1].obs == t.next_obs
}

/// Splits a flat transition log into contiguous segments, with the same
/// boundaries [`segment_returns`] uses.
pub fn split_segments(transitions: &[Transition]) -> Vec<&[Transition]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 0..transitions.len() {
        if !continues(transitions, i) {
            out.push(&transitions[start..=i]);
            start = i + 1;
        }
    }
    out
}

/// Discounted returns computed per contiguous segment. A segment ends at a
/// `done` step or where `next_obs` does not chain into the next `obs`.
pub fn segment_returns(transitions: &[Transition], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; transitions.len()];
    let mut acc = 0.0;
    for i in (0..transitions.len()).rev() {
        acc = transitions[i].reward + if continues(transitions, i) { gamma * acc } else { 0.0 };
        out[i] = acc;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskBuffers {
    pub task: TaskId,
    demos: Vec<Transition>,
    demo_returns: Vec<f64>,
    rollouts: Vec<Transition>,
    intv: Vec<Transition>,
}

impl TaskBuffers {
    pub fn new(task: TaskId) -> Self {
        Self {
            task,
            demos: Vec::new(),
            demo_returns: Vec::new(),
            rollouts: Vec::new(),
            intv: Vec::new(),
        }
    }

    fn check_task(&self, t: &Transition) -> Result<()> {
        if t.task_id != self.task || t.obs.task_id != self.task {
            return Err(Error::Replay(format!(
                "transition for task {} offered to task {} buffer",
                t.task_id, self.task
            )));
        }
        Ok(())
    }

    pub fn demos(&self) -> &[Transition] {
        &self.demos
    }

    pub fn demo_returns(&self) -> &[f64] {
        &self.demo_returns
    }

    pub fn rollouts(&self) -> &[Transition] {
        &self.rollouts
    }

    pub fn intv(&self) -> &[Transition] {
        &self.intv
    }

    /// Appends a demonstration segment and its returns.
    pub fn append_demos(&mut self, segment: &[Transition], gamma: f64) -> Result<()> {
        for t in segment {
            self.check_task(t)?;
        }
        self.demo_returns.extend(segment_returns(segment, gamma));
        self.demos.extend_from_slice(segment);
        Ok(())
    }

    pub fn append_rollout(&mut self, t: Transition) -> Result<()> {
        self.check_task(&t)?;
        self.rollouts.push(t);
        Ok(())
    }

    pub fn append_intv(&mut self, t: Transition) -> Result<()> {
        self.check_task(&t)?;
        if !t.intervened {
            return Err(Error::Replay("intervention buffer only takes intervened transitions".into()));
        }
        self.intv.push(t);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct IngestSummary {
    pub rollouts: usize,
    pub interventions: usize,
    pub talk_tweak: usize,
}

/// All per-task stores plus the pooled talk-and-tweak records.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    tasks: Vec<TaskBuffers>,
    talk_tweak: Vec<TalkTweakRecord>,
    merged_episodes: BTreeSet<u64>,
    gamma: f64,
}

impl ReplayBuffer {
    pub fn new(n_tasks: usize, gamma: f64) -> Self {
        Self {
            tasks: (0..n_tasks).map(TaskBuffers::new).collect(),
            talk_tweak: Vec::new(),
            merged_episodes: BTreeSet::new(),
            gamma,
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task(&self, id: TaskId) -> Result<&TaskBuffers> {
        self.tasks
            .get(id)
            .ok_or_else(|| Error::Replay(format!("no buffers for task {id}")))
    }

    fn task_mut(&mut self, id: TaskId) -> Result<&mut TaskBuffers> {
        self.tasks
            .get_mut(id)
            .ok_or_else(|| Error::Replay(format!("no buffers for task {id}")))
    }

    pub fn talk_tweak(&self) -> &[TalkTweakRecord] {
        &self.talk_tweak
    }

    pub fn add_demo_episode(&mut self, episode: &[Transition]) -> Result<()> {
        let Some(first) = episode.first() else {
            return Ok(());
        };
        let gamma = self.gamma;
        self.task_mut(first.task_id)?.append_demos(episode, gamma)
    }

    pub fn append_rollout(&mut self, t: Transition) -> Result<()> {
        self.task_mut(t.task_id)?.append_rollout(t)
    }

    pub fn append_intv(&mut self, t: Transition) -> Result<()> {
        self.task_mut(t.task_id)?.append_intv(t)
    }

    pub fn append_talk_tweak(&mut self, r: TalkTweakRecord) -> Result<()> {
        if r.obs.task_id >= self.tasks.len() {
            return Err(Error::Replay(format!("talk-tweak record for unknown task {}", r.obs.task_id)));
        }
        self.talk_tweak.push(r);
        Ok(())
    }

    /// Moves every pending intervention into its task's demos and appends
    /// the episode's annotated records. An episode merges once.
    pub fn merge_interventions(&mut self, episode_id: u64, records: &[TalkTweakRecord]) -> Result<usize> {
        if self.merged_episodes.contains(&episode_id) {
            return Err(Error::Replay(format!("episode {episode_id} already merged")));
        }
        for r in records {
            if r.obs.task_id >= self.tasks.len() {
                return Err(Error::Replay(format!("talk-tweak record for unknown task {}", r.obs.task_id)));
            }
        }
        let gamma = self.gamma;
        let mut moved = 0;
        for tb in &mut self.tasks {
            let pending = std::mem::take(&mut tb.intv);
            moved += pending.len();
            tb.demo_returns.extend(segment_returns(&pending, gamma));
            tb.demos.extend(pending);
        }
        self.talk_tweak.extend_from_slice(records);
        self.merged_episodes.insert(episode_id);
        Ok(moved)
    }

    pub fn is_merged(&self, episode_id: u64) -> bool {
        self.merged_episodes.contains(&episode_id)
    }

    /// Routes one finished episode: intervened steps through the
    /// intervention store into demos, the rest into rollouts.
    pub fn ingest_episode(
        &mut self,
        episode_id: u64,
        transitions: &[Transition],
        records: &[TalkTweakRecord],
    ) -> Result<IngestSummary> {
        if self.merged_episodes.contains(&episode_id) {
            return Err(Error::Replay(format!("episode {episode_id} already merged")));
        }
        for t in transitions {
            self.task(t.task_id)?.check_task(t)?;
        }
        let mut summary = IngestSummary::default();
        for t in transitions {
            if t.intervened {
                self.append_intv(*t)?;
                summary.interventions += 1;
            } else {
                self.append_rollout(*t)?;
                summary.rollouts += 1;
            }
        }
        self.merge_interventions(episode_id, records)?;
        summary.talk_tweak = records.len();
        Ok(summary)
    }

    pub fn min_rollouts(&self) -> usize {
        self.tasks.iter().map(|t| t.rollouts.len()).min().unwrap_or(0)
    }

    /// Every stored transition across all stores.
    pub fn total_transitions(&self) -> usize {
        self.tasks
            .iter()
            .map(|t| t.demos.len() + t.rollouts.len() + t.intv.len())
            .sum()
    }

    fn per_task_size(&self, batch_size: usize, parts: usize) -> Result<usize> {
        let n = self.tasks.len();
        if n == 0 || batch_size == 0 || batch_size % (parts * n) != 0 {
            return Err(Error::InvalidArgument(format!(
                "batch size {batch_size} must be a positive multiple of {}",
                parts * n.max(1)
            )));
        }
        Ok(batch_size / (parts * n))
    }

    /// `B / N` uniform draws with replacement from every task's demos.
    pub fn sample_warmup(&self, batch_size: usize, rng: &mut SimRng) -> Result<Vec<Vec<Sampled>>> {
        let m = self.per_task_size(batch_size, 1)?;
        self.tasks
            .iter()
            .map(|tb| {
                if tb.demos.is_empty() {
                    return Err(Error::Replay(format!("task {} has no demos", tb.task)));
                }
                Ok((0..m).map(|_| draw_demo(tb, rng)).collect())
            })
            .collect()
    }

    /// `B / 2N` demo-side then `B / 2N` rollout-side draws per task.
    pub fn sample_online(&self, batch_size: usize, rng: &mut SimRng) -> Result<Vec<Vec<Sampled>>> {
        let m = self.per_task_size(batch_size, 2)?;
        self.tasks
            .iter()
            .map(|tb| {
                if tb.demos.is_empty() {
                    return Err(Error::Replay(format!("task {} has no demos", tb.task)));
                }
                if tb.rollouts.is_empty() {
                    return Err(Error::Replay(format!("task {} has no rollouts", tb.task)));
                }
                let mut batch: Vec<Sampled> = (0..m).map(|_| draw_demo(tb, rng)).collect();
                batch.extend((0..m).map(|_| Sampled {
                    transition: tb.rollouts[rng.below(tb.rollouts.len())],
                    provenance: Provenance::Rollout,
                    mc_return: None,
                }));
                Ok(batch)
            })
            .collect()
    }

    /// Uniform draws with replacement from the pooled records.
    pub fn sample_talk_tweak(&self, n: usize, rng: &mut SimRng) -> Result<Vec<TalkTweakRecord>> {
        if self.talk_tweak.is_empty() {
            return Err(Error::Replay("talk-tweak buffer is empty".into()));
        }
        Ok((0..n)
            .map(|_| self.talk_tweak[rng.below(self.talk_tweak.len())])
            .collect())
    }

    /// Writes `demos`, `rollouts`, `intv` and `talk_tweak` datasets into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let collect = |f: fn(&TaskBuffers) -> &[Transition]| -> Vec<Record> {
            self.tasks
                .iter()
                .flat_map(|tb| f(tb).iter().map(|t| Record::Transition(*t)))
                .collect()
        };
        write_dataset(dir.join("demos.httd"), &collect(|t| &t.demos))?;
        write_dataset(dir.join("rollouts.httd"), &collect(|t| &t.rollouts))?;
        write_dataset(dir.join("intv.httd"), &collect(|t| &t.intv))?;
        let tt: Vec<Record> = self.talk_tweak.iter().map(|r| Record::TalkTweak(*r)).collect();
        write_dataset(dir.join("talk_tweak.httd"), &tt)?;
        let merged: Vec<String> = self.merged_episodes.iter().map(u64::to_string).collect();
        std::fs::write(dir.join("merged_episodes.txt"), merged.join("\n"))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, n_tasks: usize, gamma: f64) -> Result<Self> {
        let dir = dir.as_ref();
        let mut buf = Self::new(n_tasks, gamma);
        let transitions = |name: &str| -> Result<Vec<Transition>> {
            read_dataset(dir.join(name))?
                .into_iter()
                .map(|r| match r {
                    Record::Transition(t) => Ok(t),
                    Record::TalkTweak(_) => Err(Error::Replay(format!("{name} holds a talk-tweak record"))),
                })
                .collect()
        };
        let demos = transitions("demos.httd")?;
        for task in 0..n_tasks {
            let seg: Vec<Transition> = demos.iter().filter(|t| t.task_id == task).copied().collect();
            buf.task_mut(task)?.append_demos(&seg, gamma)?;
        }
        if let Some(t) = demos.iter().find(|t| t.task_id >= n_tasks) {
            return Err(Error::Replay(format!("stored demo for unknown task {}", t.task_id)));
        }
        for t in transitions("rollouts.httd")? {
            buf.append_rollout(t)?;
        }
        for t in transitions("intv.httd")? {
            buf.append_intv(t)?;
        }
        for r in read_dataset(dir.join("talk_tweak.httd"))? {
            match r {
                Record::TalkTweak(r) => buf.append_talk_tweak(r)?,
                Record::Transition(_) => return Err(Error::Replay("talk_tweak.httd holds a transition".into())),
            }
        }
        let merged_path = dir.join("merged_episodes.txt");
        if merged_path.exists() {
            for line in std::fs::read_to_string(merged_path)?.lines().filter(|l| !l.trim().is_empty()) {
                let id = line
                    .trim()
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad episode id {line:?}")))?;
                buf.merged_episodes.insert(id);
            }
        }
        Ok(buf)
    }
}

fn draw_demo(tb: &TaskBuffers, rng: &mut SimRng) -> Sampled {
    let i = rng.below(tb.demos.len());
    Sampled {
        transition: tb.demos[i],
        provenance: Provenance::Demo,
        mc_return: Some(tb.demo_returns[i]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{rollout, EnvConfig, ExpertPolicy, Scene};
    use crate::talk_tweak::{annotate, TalkTweakConfig};

    fn episode(task: usize, seed: u64) -> Vec<Transition> {
        let c = EnvConfig::default();
        let mut s = Scene::reset(&c, task, seed).unwrap();
        rollout(&mut s, &mut ExpertPolicy::noiseless(&c), None).unwrap().transitions
    }

    fn filled() -> ReplayBuffer {
        let mut b = ReplayBuffer::new(3, 0.97);
        for task in 0..3 {
            b.add_demo_episode(&episode(task, 1)).unwrap();
        }
        b
    }

    #[test]
    fn segments_split_at_episode_boundaries() {
        let (a, b) = (episode(0, 1), episode(1, 2));
        let flat: Vec<Transition> = a.iter().chain(&b).copied().collect();
        let parts = split_segments(&flat);
        assert_eq!(parts, vec![&a[..], &b[..]]);
        assert!(split_segments(&[]).is_empty());
    }

    #[test]
    fn append_and_sample_single() {
        let mut b = ReplayBuffer::new(1, 0.97);
        let t = episode(0, 3)[0];
        b.append_rollout(t).unwrap();
        b.add_demo_episode(&[t]).unwrap();
        let s = b.sample_online(2, &mut SimRng::seed_from(0)).unwrap();
        assert_eq!(s[0][0].transition, t);
        assert_eq!(s[0][1].transition, t);
        let w = b.sample_warmup(4, &mut SimRng::seed_from(0)).unwrap();
        assert!(w[0].iter().all(|x| x.transition == t));
    }

    #[test]
    fn intv_rejects_plain_and_wrong_task() {
        let mut b = ReplayBuffer::new(3, 0.97);
        let t = episode(1, 3)[0];
        assert!(b.append_intv(t).is_err());
        let mut bad = t;
        bad.task_id = 0;
        assert!(b.append_rollout(bad).is_err());
        let mut tb = TaskBuffers::new(2);
        assert!(tb.append_rollout(t).is_err());
        for (i, t) in episode(1, 3).into_iter().enumerate() {
            b.append_rollout(t).unwrap();
            assert_eq!(b.task(1).unwrap().rollouts().len(), i + 1);
        }
    }

    #[test]
    fn warmup_batch_shapes() {
        let b = filled();
        let s = b.sample_warmup(96, &mut SimRng::seed_from(2)).unwrap();
        assert_eq!(s.len(), 3);
        for (task, batch) in s.iter().enumerate() {
            assert_eq!(batch.len(), 32);
            assert!(batch.iter().all(|x| x.transition.task_id == task && x.mc_return.is_some()));
        }
        assert!(b.sample_warmup(95, &mut SimRng::seed_from(2)).is_err());
        assert!(ReplayBuffer::new(3, 0.97).sample_warmup(96, &mut SimRng::seed_from(2)).is_err());
    }

    #[test]
    fn online_batch_provenance_halves() {
        let mut b = filled();
        assert!(b.sample_online(96, &mut SimRng::seed_from(2)).is_err());
        for task in 0..3 {
            for t in episode(task, 9) {
                b.append_rollout(t).unwrap();
            }
        }
        let s = b.sample_online(96, &mut SimRng::seed_from(2)).unwrap();
        for batch in s {
            assert_eq!(batch.len(), 32);
            assert_eq!(batch.iter().filter(|x| x.provenance == Provenance::Demo).count(), 16);
            assert!(batch[..16].iter().all(|x| x.provenance == Provenance::Demo));
        }
    }

    #[test]
    fn merge_moves_interventions() {
        let mut b = filled();
        let mut ep = episode(0, 5);
        for t in ep.iter_mut().take(5) {
            t.intervened = true;
        }
        let before = b.task(0).unwrap().demos().len();
        let records = annotate(&ep, &TalkTweakConfig::default());
        assert!(records.len() <= 1);
        let s = b.ingest_episode(7, &ep, &records).unwrap();
        assert_eq!(s.interventions, 5);
        assert_eq!(s.rollouts, ep.len() - 5);
        assert_eq!(b.task(0).unwrap().demos().len(), before + 5);
        assert!(b.task(0).unwrap().intv().is_empty());
        assert_eq!(b.talk_tweak().len(), records.len());
        assert!(b.ingest_episode(7, &ep, &records).is_err());
        assert!(b.merge_interventions(7, &[]).is_err());
        assert_eq!(b.merge_interventions(8, &[]).unwrap(), 0);
    }

    #[test]
    fn conservation() {
        let mut b = ReplayBuffer::new(3, 0.97);
        let mut steps = 0;
        for (k, task) in [0, 1, 2, 1].into_iter().enumerate() {
            let mut ep = episode(task, k as u64);
            for t in ep.iter_mut().skip(2).take(6) {
                t.intervened = true;
            }
            steps += ep.len();
            b.ingest_episode(k as u64, &ep, &[]).unwrap();
            assert_eq!(b.total_transitions(), steps);
        }
    }

    #[test]
    fn segment_returns_split_on_breaks() {
        let ep = episode(2, 4);
        let n = ep.len();
        let g = segment_returns(&ep, 0.5);
        assert_eq!(g[n - 1], 1.0);
        assert_eq!(g[n - 2], 0.5);
        let mut two = ep.clone();
        two.extend(episode(2, 5));
        let g2 = segment_returns(&two, 0.5);
        assert_eq!(&g2[..n], &g[..]);
        // A cut that breaks chaining restarts the return.
        let cut: Vec<Transition> = ep[..3].iter().chain(&ep[4..]).copied().collect();
        assert_eq!(segment_returns(&cut, 0.5)[2], 0.0);
    }

    #[test]
    fn save_load_round_trip() {
        let mut b = filled();
        let mut ep = episode(1, 5);
        for t in ep.iter_mut().skip(3).take(7) {
            t.intervened = true;
        }
        let recs = annotate(&ep, &TalkTweakConfig::default());
        b.ingest_episode(11, &ep, &recs).unwrap();
        let mut pending = episode(2, 6)[0];
        pending.intervened = true;
        b.append_intv(pending).unwrap();
        let dir = tempfile::tempdir().unwrap();
        b.save(dir.path()).unwrap();
        let back = ReplayBuffer::load(dir.path(), 3, 0.97).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn talk_tweak_sampling() {
        let mut b = ReplayBuffer::new(3, 0.97);
        assert!(b.sample_talk_tweak(4, &mut SimRng::seed_from(0)).is_err());
        let mut ep = episode(0, 2);
        for t in ep.iter_mut() {
            t.intervened = true;
        }
        let recs = annotate(&ep, &TalkTweakConfig::default());
        assert!(!recs.is_empty());
        b.ingest_episode(0, &ep, &recs).unwrap();
        assert_eq!(b.sample_talk_tweak(10, &mut SimRng::seed_from(0)).unwrap().len(), 10);
    }
}
