//! The `dual-actor` command line.
//!
//! Every subcommand resolves its configuration (defaults, `--config` file,
//! `DUAL_ACTOR_*` variables, then `--set` and `--seed`) and writes it to
//! `resolved.cfg` in the output location before doing any work. Run
//! directories look like
//!
//! ```text
//! <out>/resolved.cfg
//! <out>/metrics.log
//! <out>/checkpoints/{warmup,online}/
//! <out>/datasets/
//! ```
//!
//! Failures print one JSON line `{"error":"<kind>","message":"..."}` to
//! stderr and exit with status 1; usage errors exit with status 2.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::codec::{encode_record, read_dataset, write_dataset, Record};
use crate::config;
use crate::domain::Transition;
use crate::error::{Error, Result};
use crate::net::{run_actor, scaling_benchmark, ActorOptions, LearnerServer, Schedule};
use crate::replay::{split_segments, ReplayBuffer};
use crate::talk_tweak::{annotate, summarize};
use crate::trainer::{
    collect_demos, evaluate, load_checkpoint, long_horizon, online_phase, save_checkpoint, warmup_phase, CommandSource,
    Learner, MetricsLog, OnlineMode, OnlineReport, StopRule, TrainConfig,
};
use crate::ui::{evaluate_with_operator, UiConfig, UiServer};

#[derive(Debug, Parser)]
#[command(name = "dual-actor", version, about = "Dual-actor RL fine-tuning with human-in-the-loop corrections")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Root seed for every random stream.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Run directory.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stop {
    Never,
    Mean,
    All,
}

impl From<Stop> for StopRule {
    fn from(s: Stop) -> Self {
        match s {
            Stop::Never => StopRule::Never,
            Stop::Mean => StopRule::MeanOverTasks,
            Stop::All => StopRule::AllTasks,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Commands {
    Oracle,
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InProcessMode {
    Deterministic,
    Threaded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScheduleArg {
    Concurrent,
    Lockstep,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record scripted demonstrations into `datasets/demos.httd`.
    CollectDemos(RunArgs),
    /// Offline warm-up on demonstrations; writes `checkpoints/warmup`.
    Warmup {
        #[command(flatten)]
        run: RunArgs,
        /// Demonstration dataset (default: `<out>/datasets/demos.httd`, collected if absent).
        #[arg(long)]
        demos: Option<PathBuf>,
    },
    /// In-process online training; writes `checkpoints/online`.
    TrainOnline {
        #[command(flatten)]
        run: RunArgs,
        /// Starting checkpoint (default: `<out>/checkpoints/warmup`).
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "deterministic")]
        mode: InProcessMode,
        #[arg(long, default_value_t = 1)]
        actors: u32,
        /// Sleep before every control step (threaded mode).
        #[arg(long, default_value_t = 0)]
        pace_ms: u64,
        #[arg(long, default_value_t = 200)]
        max_lag: u64,
        #[arg(long, value_enum, default_value = "all")]
        stop: Stop,
    },
    /// Learner service for networked actors; writes `checkpoints/online`.
    ServeLearner {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, env = "DUAL_ACTOR_LEARNER_ADDR", default_value = "127.0.0.1:7878")]
        bind: String,
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "concurrent")]
        schedule: ScheduleArg,
        #[arg(long, default_value_t = 200)]
        max_lag: u64,
        #[arg(long, value_enum, default_value = "all")]
        stop: Stop,
    },
    /// Actor client; logs its episodes to `datasets/episodes-<id>.httd`.
    RunActor {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, env = "DUAL_ACTOR_LEARNER_ADDR", default_value = "127.0.0.1:7878")]
        learner: String,
        #[arg(long, default_value_t = 0)]
        actor_id: u32,
        #[arg(long)]
        lockstep: bool,
        #[arg(long)]
        episodes: Option<u64>,
        #[arg(long, default_value_t = 0)]
        pace_ms: u64,
        /// Serve the operator page here; the operator replaces the oracle.
        #[arg(long, env = "DUAL_ACTOR_UI_ADDR")]
        ui: Option<String>,
    },
    /// Success rates per task.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint (default: `<out>/checkpoints/online`).
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long, default_value_t = 25)]
        trials: usize,
        #[arg(long, value_enum, default_value = "off")]
        refinement: Switch,
        #[arg(long, value_enum, default_value = "oracle")]
        commands: Commands,
        /// Operator page address for `--commands human`.
        #[arg(long, env = "DUAL_ACTOR_UI_ADDR", default_value = "127.0.0.1:8765")]
        ui: String,
    },
    /// Chain success over 1..=max-bolts chained place/pick/assemble runs.
    LongHorizon {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 4)]
        max_bolts: usize,
    },
    /// Annotate every trajectory dataset under `--in` and write the
    /// talk-and-tweak records to `--out`.
    ExportTalkTweak {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Wall time to the target success for several actor counts.
    ScalingBenchmark {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2")]
        actors: Vec<u32>,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 10)]
        pace_ms: u64,
        #[arg(long, default_value_t = 200)]
        max_lag: u64,
    },
    /// Replay buffer inspection.
    ReplayViewer {
        #[command(subcommand)]
        action: ViewerAction,
    },
}

#[derive(Debug, Subcommand)]
pub enum ViewerAction {
    /// Write every stored record as JSON lines to `<out>/datasets/replay.jsonl`.
    Dump {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        from: Option<PathBuf>,
        /// Keep at most this many records per task and store.
        #[arg(long)]
        limit: Option<usize>,
    },
}

/// Parses `argv`, runs the command and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            1
        }
    }
}

pub fn error_line(e: &Error) -> String {
    serde_json::json!({ "error": e.kind(), "message": e.to_string() }).to_string()
}

/// Configuration with every override applied.
pub fn resolve(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = config::load(args.config.as_deref())?;
    for s in &args.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        cfg = config::apply(&cfg, [(k.trim(), v.trim())])?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare(run: &RunArgs) -> Result<TrainConfig> {
    let cfg = resolve(&run.cfg)?;
    std::fs::create_dir_all(&run.out)?;
    config::write_resolved(&cfg, run.out.join("resolved.cfg"))?;
    Ok(cfg)
}

fn checkpoint_dir(run: &RunArgs, from: &Option<PathBuf>, default: &str) -> PathBuf {
    from.clone().unwrap_or_else(|| run.out.join("checkpoints").join(default))
}

fn load(dir: &Path, cfg: &TrainConfig) -> Result<(Learner, ReplayBuffer)> {
    if !dir.join(crate::trainer::CHECKPOINT_FILE).exists() {
        return Err(Error::InvalidArgument(format!("missing checkpoint {}", dir.display())));
    }
    let (mut l, b) = load_checkpoint(dir, cfg.clone())?;
    l.cfg = cfg.clone();
    Ok((l, b))
}

fn metrics(run: &RunArgs) -> Result<MetricsLog> {
    MetricsLog::append_to(run.out.join("metrics.log"))
}

fn datasets(run: &RunArgs) -> Result<PathBuf> {
    let d = run.out.join("datasets");
    std::fs::create_dir_all(&d)?;
    Ok(d)
}

fn transitions_of(records: &[Record]) -> Vec<Transition> {
    records
        .iter()
        .filter_map(|r| match r {
            Record::Transition(t) => Some(*t),
            Record::TalkTweak(_) => None,
        })
        .collect()
}

fn print_online(rep: &OnlineReport) {
    for e in &rep.evals {
        let s: Vec<String> = e.success.iter().map(|v| format!("{:.2}", v)).collect();
        println!("eval step {:>7} wall {:>7.1}s success [{}]", e.env_steps, e.wall_s, s.join(", "));
    }
    println!(
        "env steps {} updates {} episodes {} intervention fraction {:.3} wall {:.1}s",
        rep.env_steps, rep.online_updates, rep.episodes, rep.intervention_fraction, rep.wall_s
    );
    match &rep.reached_all {
        Some(p) => println!("every task reached the target at step {} ({:.1}s)", p.env_steps, p.wall_s),
        None => println!("target not reached by every task"),
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::CollectDemos(run) => {
            let cfg = prepare(&run)?;
            let demos = collect_demos(&cfg)?;
            let records: Vec<Record> = demos.iter().flatten().map(|t| Record::Transition(*t)).collect();
            let path = datasets(&run)?.join("demos.httd");
            write_dataset(&path, &records)?;
            println!("{} demonstrations, {} transitions -> {}", demos.len(), records.len(), path.display());
        }
        Command::Warmup { run, demos } => {
            let cfg = prepare(&run)?;
            let path = demos.unwrap_or_else(|| run.out.join("datasets").join("demos.httd"));
            let transitions = if path.exists() {
                transitions_of(&read_dataset(&path)?)
            } else {
                let eps = collect_demos(&cfg)?;
                let t: Vec<Transition> = eps.into_iter().flatten().collect();
                write_dataset(datasets(&run)?.join("demos.httd"), &t.iter().map(|t| Record::Transition(*t)).collect::<Vec<_>>())?;
                t
            };
            let mut buf = ReplayBuffer::new(cfg.n_tasks(), cfg.gamma);
            for ep in split_segments(&transitions) {
                buf.add_demo_episode(ep)?;
            }
            let mut l = Learner::new(cfg.clone())?;
            warmup_phase(&mut l, &buf, cfg.warmup_steps, &mut metrics(&run)?)?;
            let dir = run.out.join("checkpoints").join("warmup");
            save_checkpoint(&dir, &l, &buf)?;
            let rep = evaluate(&l.snapshot(), &cfg.env, cfg.eval_trials, false, CommandSource::Oracle, cfg.seed)?;
            print!("{}", rep.to_table());
            println!("checkpoint -> {}", dir.display());
        }
        Command::TrainOnline {
            run,
            from,
            mode,
            actors,
            pace_ms,
            max_lag,
            stop,
        } => {
            let cfg = prepare(&run)?;
            let (mut l, buf) = load(&checkpoint_dir(&run, &from, "warmup"), &cfg)?;
            let mode = match mode {
                InProcessMode::Deterministic => OnlineMode::Deterministic { actors },
                InProcessMode::Threaded => OnlineMode::Threaded {
                    actors,
                    pace: Duration::from_millis(pace_ms),
                    max_lag,
                },
            };
            let (rep, buf) = online_phase(&mut l, buf, mode, stop.into(), &mut metrics(&run)?)?;
            let dir = run.out.join("checkpoints").join("online");
            save_checkpoint(&dir, &l, &buf)?;
            print_online(&rep);
            println!("checkpoint -> {}", dir.display());
        }
        Command::ServeLearner {
            run,
            bind,
            from,
            schedule,
            max_lag,
            stop,
        } => {
            let cfg = prepare(&run)?;
            let (mut l, buf) = load(&checkpoint_dir(&run, &from, "warmup"), &cfg)?;
            let server = LearnerServer::bind(&bind, &l, buf)?;
            println!("learner listening on {}", server.local_addr()?);
            let _ = std::io::stdout().flush();
            let schedule = match schedule {
                ScheduleArg::Concurrent => Schedule::Concurrent { max_lag },
                ScheduleArg::Lockstep => Schedule::Lockstep,
            };
            let (rep, buf) = server.run(&mut l, schedule, stop.into(), &mut metrics(&run)?)?;
            let dir = run.out.join("checkpoints").join("online");
            save_checkpoint(&dir, &l, &buf)?;
            print_online(&rep);
            println!("checkpoint -> {}", dir.display());
        }
        Command::RunActor {
            run,
            learner,
            actor_id,
            lockstep,
            episodes,
            pace_ms,
            ui,
        } => {
            let cfg = prepare(&run)?;
            let opts = ActorOptions {
                actor_id,
                lockstep,
                pace: (pace_ms > 0).then(|| Duration::from_millis(pace_ms)),
                max_episodes: episodes,
                episode_log: Some(datasets(&run)?.join(format!("episodes-{actor_id}.httd"))),
                ..Default::default()
            };
            let server = match ui {
                Some(addr) => {
                    let s = UiServer::start(UiConfig {
                        addr,
                        session_log: Some(run.out.join(format!("session-{actor_id}.log"))),
                        ..Default::default()
                    })?;
                    println!("operator page at http://{}/", s.local_addr());
                    Some(s)
                }
                None => None,
            };
            let mut sup = server.as_ref().map(|s| s.handle().supervisor());
            let rep = run_actor(&learner, &cfg, &cfg.env, &opts, sup.as_mut().map(|s| s as &mut dyn crate::env::Supervisor))?;
            println!(
                "actor {actor_id}: {} episodes, {} env steps, {} uploads, {} acknowledged{}",
                rep.episodes,
                rep.env_steps,
                rep.uploads,
                rep.acked,
                rep.shutdown_reason.map(|r| format!(", stopped: {r}")).unwrap_or_default()
            );
        }
        Command::Eval {
            run,
            from,
            trials,
            refinement,
            commands,
            ui,
        } => {
            let cfg = prepare(&run)?;
            let (l, _) = load(&checkpoint_dir(&run, &from, "online"), &cfg)?;
            let snap = l.snapshot();
            let rep = if refinement == Switch::On && commands == Commands::Human {
                let server = UiServer::start(UiConfig {
                    addr: ui,
                    session_log: Some(run.out.join("session-eval.log")),
                    ..Default::default()
                })?;
                println!("operator page at http://{}/ (waiting for a session)", server.local_addr());
                let _ = std::io::stdout().flush();
                let handle = server.handle();
                while !handle.wait_for_session(Duration::from_secs(60)) {}
                evaluate_with_operator(&snap, &cfg.env, trials, cfg.seed, &handle)?
            } else {
                evaluate(&snap, &cfg.env, trials, refinement == Switch::On, CommandSource::Oracle, cfg.seed)?
            };
            print!("{}", rep.to_table());
            if rep.use_refinement {
                println!("commands issued: {}", rep.commands_issued);
            }
        }
        Command::LongHorizon {
            run,
            from,
            seeds,
            max_bolts,
        } => {
            let cfg = prepare(&run)?;
            let (l, _) = load(&checkpoint_dir(&run, &from, "online"), &cfg)?;
            let seeds: Vec<u64> = (0..seeds).map(|s| cfg.seed.wrapping_add(s)).collect();
            let rep = long_horizon(&l.snapshot(), &cfg.env, max_bolts, &seeds)?;
            print!("{}", rep.to_table());
        }
        Command::ExportTalkTweak { cfg, input, out } => {
            let resolved = resolve(&cfg)?;
            let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            std::fs::create_dir_all(parent)?;
            config::write_resolved(&resolved, parent.join("resolved.cfg"))?;
            let records = export_talk_tweak(&input, &out, &resolved)?;
            let summary = summarize(&records);
            let text = summary.to_text();
            std::fs::write(summary_path(&out), &text)?;
            print!("{text}");
        }
        Command::ScalingBenchmark {
            run,
            from,
            actors,
            seeds,
            pace_ms,
            max_lag,
        } => {
            let cfg = prepare(&run)?;
            let (l, buf) = load(&checkpoint_dir(&run, &from, "warmup"), &cfg)?;
            let seeds: Vec<u64> = (0..seeds).map(|s| cfg.seed.wrapping_add(s)).collect();
            let rep = scaling_benchmark(&l, &buf, &actors, &seeds, Duration::from_millis(pace_ms), max_lag)?;
            std::fs::write(
                run.out.join("scaling.json"),
                serde_json::to_string_pretty(&rep).expect("report serializes"),
            )?;
            print!("{}", rep.to_table());
        }
        Command::ReplayViewer {
            action: ViewerAction::Dump { run, from, limit },
        } => {
            let cfg = prepare(&run)?;
            let (_, buf) = load(&checkpoint_dir(&run, &from, "online"), &cfg)?;
            let path = datasets(&run)?.join("replay.jsonl");
            let counts = dump_replay(&buf, &path, limit)?;
            for (task, store, n) in counts {
                println!("task {task} {store:<10} {n}");
            }
            println!("dump -> {}", path.display());
        }
    }
    Ok(())
}

fn summary_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".summary.txt");
    PathBuf::from(s)
}

fn httd_files(root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if root.is_file() {
        out.push(root.to_path_buf());
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(root)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            httd_files(&p, out)?;
        } else if p.extension().is_some_and(|e| e == "httd") {
            out.push(p);
        }
    }
    Ok(())
}

/// Annotates each trajectory dataset under `input` independently and
/// writes the distinct records to `out`. Intervened steps are stored in
/// more than one place inside a run, so identical records are kept once.
pub fn export_talk_tweak(input: &Path, out: &Path, cfg: &TrainConfig) -> Result<Vec<crate::domain::TalkTweakRecord>> {
    if !input.exists() {
        return Err(Error::InvalidArgument(format!("input {} does not exist", input.display())));
    }
    let mut files = Vec::new();
    httd_files(input, &mut files)?;
    let out_canon = out.canonicalize().ok();
    let mut seen = BTreeSet::new();
    let mut records = Vec::new();
    for f in files {
        if out_canon.is_some() && f.canonicalize().ok() == out_canon {
            continue;
        }
        let transitions = transitions_of(&read_dataset(&f)?);
        for seg in split_segments(&transitions) {
            for r in annotate(seg, &cfg.talk) {
                if seen.insert(encode_record(&Record::TalkTweak(r))) {
                    records.push(r);
                }
            }
        }
    }
    let recs: Vec<Record> = records.iter().map(|r| Record::TalkTweak(*r)).collect();
    write_dataset(out, &recs)?;
    Ok(records)
}

/// One JSON line per stored record, tagged with task and store.
pub fn dump_replay(buf: &ReplayBuffer, path: &Path, limit: Option<usize>) -> Result<Vec<(usize, &'static str, usize)>> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut counts = Vec::new();
    for task in 0..buf.n_tasks() {
        let tb = buf.task(task)?;
        let stores: [(&'static str, &[Transition]); 3] =
            [("demos", tb.demos()), ("rollouts", tb.rollouts()), ("intv", tb.intv())];
        for (store, items) in stores {
            let n = limit.map_or(items.len(), |l| l.min(items.len()));
            for (i, t) in items[..n].iter().enumerate() {
                let line = serde_json::json!({ "task": task, "store": store, "index": i, "transition": t });
                writeln!(w, "{line}")?;
            }
            counts.push((task, store, items.len()));
        }
    }
    let tt = buf.talk_tweak();
    let n = limit.map_or(tt.len(), |l| l.min(tt.len()));
    for (i, r) in tt[..n].iter().enumerate() {
        let line = serde_json::json!({ "task": r.obs.task_id, "store": "talk_tweak", "index": i, "record": r });
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_subcommand_parses() {
        for args in [
            vec!["collect-demos", "--out", "x"],
            vec!["warmup", "--set", "warmup_steps=5"],
            vec!["train-online", "--mode", "threaded", "--actors", "2", "--stop", "mean"],
            vec!["serve-learner", "--bind", "127.0.0.1:0", "--schedule", "lockstep"],
            vec!["run-actor", "--learner", "127.0.0.1:1", "--actor-id", "3", "--lockstep"],
            vec!["eval", "--trials", "25", "--refinement", "off"],
            vec!["long-horizon", "--seeds", "10"],
            vec!["export-talk-tweak", "--in", "run1/", "--out", "tt.httd"],
            vec!["scaling-benchmark", "--actors", "1,2", "--seeds", "3"],
            vec!["replay-viewer", "dump", "--limit", "5"],
        ] {
            let argv = std::iter::once("dual-actor").chain(args.iter().copied());
            assert!(Cli::try_parse_from(argv).is_ok(), "{args:?}");
        }
        assert!(Cli::try_parse_from(["dual-actor", "fly"]).is_err());
    }

    #[test]
    fn set_overrides_and_seed() {
        let args = ConfigArgs {
            config: None,
            set: vec!["actor_lr = 0.01".into(), "env.expert_noise=0.002".into()],
            seed: Some(9),
        };
        let cfg = resolve(&args).unwrap();
        assert_eq!((cfg.actor_lr, cfg.env.expert_noise, cfg.seed), (0.01, 0.002, 9));
        let bad = ConfigArgs {
            set: vec!["no_such_key=1".into()],
            ..args
        };
        let e = resolve(&bad).unwrap_err();
        let line = error_line(&e);
        assert!(line.starts_with("{\"error\":\"config\""), "{line}");
        assert!(!line.contains('\n'));
    }
}
