//! Learner/actor service: equivalence with in-process training, refusal,
//! recovery from dropped connections and snapshot handling.

use std::sync::atomic::Ordering;
use std::time::{Duration, Instant};

use dual_actor_rl::net::{
    probe, run_actor, train_networked, ActorOptions, Faults, LearnerServer, Schedule, WireMessage, PROTOCOL_VERSION,
};
use dual_actor_rl::replay::ReplayBuffer;
use dual_actor_rl::trainer::{
    collect_demos, online_phase, warmup_phase, Learner, MetricsLog, OnlineMode, StopRule, TrainConfig,
};

fn small_cfg() -> TrainConfig {
    TrainConfig {
        demos_per_task: 2,
        warmup_steps: 5,
        max_env_steps: 500,
        eval_every: 1_000_000,
        ..Default::default()
    }
}

fn prepared(cfg: &TrainConfig) -> (Learner, ReplayBuffer) {
    let mut buf = ReplayBuffer::new(cfg.n_tasks(), cfg.gamma);
    for ep in collect_demos(cfg).unwrap() {
        buf.add_demo_episode(&ep).unwrap();
    }
    let mut l = Learner::new(cfg.clone()).unwrap();
    warmup_phase(&mut l, &buf, cfg.warmup_steps, &mut MetricsLog::discard()).unwrap();
    (l, buf)
}

fn buffer_bytes(buf: &ReplayBuffer) -> Vec<(String, Vec<u8>)> {
    let dir = tempfile::tempdir().unwrap();
    buf.save(dir.path()).unwrap();
    let mut files: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn lockstep_matches_in_process_training() {
    let cfg = TrainConfig {
        max_env_steps: 1_500,
        ..small_cfg()
    };
    let (mut a, buf_a) = prepared(&cfg);
    let (mut b, buf_b) = (a.clone(), buf_a.clone());
    let (rep_a, out_a) = online_phase(
        &mut a,
        buf_a,
        OnlineMode::Deterministic { actors: 1 },
        StopRule::Never,
        &mut MetricsLog::discard(),
    )
    .unwrap();
    let (rep_b, out_b, actors) = train_networked(
        &mut b,
        buf_b,
        1,
        Schedule::Lockstep,
        None,
        StopRule::Never,
        &mut MetricsLog::discard(),
    )
    .unwrap();
    assert!(rep_a.online_updates > 0, "run should pass the gate");
    assert_eq!(rep_a.env_steps, rep_b.env_steps);
    assert_eq!(rep_a.online_updates, rep_b.online_updates);
    assert_eq!(out_a, out_b);
    assert_eq!(buffer_bytes(&out_a), buffer_bytes(&out_b));
    assert_eq!(rep_a.snapshot, rep_b.snapshot);
    assert_eq!(actors[0].episodes, rep_b.episodes);
}

#[test]
fn wrong_protocol_version_refused() {
    let cfg = small_cfg();
    let (l, buf) = prepared(&cfg);
    let server = LearnerServer::bind("127.0.0.1:0", &l, buf).unwrap();
    let addr = server.local_addr().unwrap().to_string();
    let shared = server.shared();
    let handle = std::thread::spawn(move || {
        let mut l = l;
        server
            .run(&mut l, Schedule::Concurrent { max_lag: 100 }, StopRule::Never, &mut MetricsLog::discard())
            .map(|(r, _)| r.online_updates)
    });
    match probe(&addr, 7, PROTOCOL_VERSION + 1).unwrap() {
        WireMessage::Shutdown { reason } => assert!(reason.contains("protocol version"), "{reason}"),
        other => panic!("expected refusal, got {}", other.name()),
    }
    match probe(&addr, 7, PROTOCOL_VERSION).unwrap() {
        WireMessage::Snapshot(s) => assert_eq!(s.version, l_version(&shared)),
        other => panic!("expected a snapshot, got {}", other.name()),
    }
    shared.stop.store(true, Ordering::SeqCst);
    handle.join().unwrap().unwrap();
}

fn l_version(shared: &dual_actor_rl::trainer::SharedState) -> u64 {
    shared.snapshots.version()
}

#[test]
fn idle_learner_waits_at_gate() {
    let cfg = small_cfg();
    let (l, buf) = prepared(&cfg);
    let server = LearnerServer::bind("127.0.0.1:0", &l, buf).unwrap();
    let shared = server.shared();
    let handle = std::thread::spawn(move || {
        let mut l = l;
        server
            .run(&mut l, Schedule::Concurrent { max_lag: 100 }, StopRule::Never, &mut MetricsLog::discard())
            .map(|(r, _)| r.online_updates)
    });
    std::thread::sleep(Duration::from_millis(300));
    assert_eq!(shared.online_updates.load(Ordering::SeqCst), 0);
    assert_eq!(shared.env_steps.load(Ordering::SeqCst), 0);
    shared.stop.store(true, Ordering::SeqCst);
    assert_eq!(handle.join().unwrap().unwrap(), 0);
}

#[test]
fn dropped_connections_deliver_each_episode_once() {
    let cfg = TrainConfig {
        online_gate: 1_000_000,
        ..small_cfg()
    };
    let (l, buf) = prepared(&cfg);
    let server = LearnerServer::bind("127.0.0.1:0", &l, buf).unwrap();
    let addr = server.local_addr().unwrap().to_string();
    let shared = server.shared();
    let handle = std::thread::spawn(move || {
        let mut l = l;
        server
            .run(&mut l, Schedule::Concurrent { max_lag: 100 }, StopRule::Never, &mut MetricsLog::discard())
            .map(|(_, b)| b)
    });
    let opts = ActorOptions {
        actor_id: 3,
        max_episodes: Some(6),
        backoff_initial: Duration::from_millis(5),
        faults: Faults {
            offline_episodes: [2].into(),
            drop_after_send: [1, 4].into(),
        },
        ..Default::default()
    };
    let rep = run_actor(&addr, &cfg, &cfg.env, &opts, None).unwrap();
    assert_eq!(rep.episodes, 6);
    // Two forced resends on top of six first uploads (the offline episode
    // is uploaded only once, after reconnecting).
    assert_eq!(rep.uploads, 8);
    assert_eq!(rep.connects, 3, "{rep:?}");
    let deadline = Instant::now() + Duration::from_secs(5);
    while shared.episodes.load(Ordering::SeqCst) < 6 && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(10));
    }
    shared.stop.store(true, Ordering::SeqCst);
    let buf = handle.join().unwrap().unwrap();
    assert_eq!(shared.episodes.load(Ordering::SeqCst), 6);
    assert_eq!(shared.env_steps.load(Ordering::SeqCst), rep.env_steps);
    let rollouts: usize = (0..cfg.n_tasks()).map(|i| buf.task(i).unwrap().rollouts().len()).sum();
    let demos_added: usize = (0..cfg.n_tasks()).map(|i| buf.task(i).unwrap().demos().len()).sum();
    let (_, base) = prepared(&cfg);
    let base_demos: usize = (0..cfg.n_tasks()).map(|i| base.task(i).unwrap().demos().len()).sum();
    assert_eq!((rollouts + demos_added - base_demos) as u64, rep.env_steps);
    for id in rep.episode_versions.iter().map(|(id, _)| *id) {
        assert!(buf.is_merged(id));
    }
}

#[test]
fn snapshot_versions_never_regress() {
    let cfg = TrainConfig {
        max_env_steps: 900,
        snapshot_period: 10,
        ..small_cfg()
    };
    let (mut l, buf) = prepared(&cfg);
    let (rep, _, actors) = train_networked(
        &mut l,
        buf,
        2,
        Schedule::Concurrent { max_lag: 50 },
        None,
        StopRule::Never,
        &mut MetricsLog::discard(),
    )
    .unwrap();
    assert!(rep.online_updates > 0);
    let mut newest = 0;
    for a in &actors {
        assert!(a.episodes > 0);
        let versions: Vec<u64> = a.episode_versions.iter().map(|(_, v)| *v).collect();
        assert!(versions.windows(2).all(|w| w[0] <= w[1]), "{versions:?}");
        newest = newest.max(*versions.last().unwrap());
    }
    assert!(newest > 0, "actors should have received a trained snapshot");
}

#[test]
fn two_actors_collect_about_twice_as_fast() {
    let cfg = TrainConfig {
        online_gate: 1_000_000,
        max_env_steps: 1_000_000,
        ..small_cfg()
    };
    let (l, buf) = prepared(&cfg);
    let rate = |actors: u32| -> f64 {
        let server = LearnerServer::bind("127.0.0.1:0", &l, buf.clone()).unwrap();
        let addr = server.local_addr().unwrap().to_string();
        let shared = server.shared();
        let mut l = l.clone();
        let handle = std::thread::spawn(move || {
            server
                .run(&mut l, Schedule::Concurrent { max_lag: 100 }, StopRule::Never, &mut MetricsLog::discard())
                .map(|_| ())
        });
        let actor_threads: Vec<_> = (0..actors)
            .map(|id| {
                let addr = addr.clone();
                let cfg = cfg.clone();
                std::thread::spawn(move || {
                    let opts = ActorOptions {
                        actor_id: id,
                        pace: Some(Duration::from_millis(4)),
                        ..Default::default()
                    };
                    run_actor(&addr, &cfg, &cfg.env, &opts, None)
                })
            })
            .collect();
        std::thread::sleep(Duration::from_millis(300));
        let s0 = shared.env_steps.load(Ordering::SeqCst);
        let t0 = Instant::now();
        std::thread::sleep(Duration::from_millis(4000));
        let s1 = shared.env_steps.load(Ordering::SeqCst);
        let dt = t0.elapsed().as_secs_f64();
        shared.stop.store(true, Ordering::SeqCst);
        handle.join().unwrap().unwrap();
        for t in actor_threads {
            t.join().unwrap().unwrap();
        }
        (s1 - s0) as f64 / dt
    };
    let one = rate(1);
    let two = rate(2);
    let ratio = two / one;
    assert!((ratio - 2.0).abs() <= 0.2, "one {one:.1}/s two {two:.1}/s ratio {ratio:.2}");
}
