//! Argument parsing and the subcommands.

use std::fmt::Write as _;
use std::io::Write as _;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use surgisim::demos::{collect_demos, env_config_hash, load_demos, read_demo_file, write_demos, DemoSet};
use surgisim::envs::{TaskConfig, TaskEnv, TaskId, TransitionRecord};
use surgisim::physics::GraspMode;
use surgisim_rl::train::{
    grasp_mode_label, parse_grasp_mode, read_metrics_csv, run_episode, write_metrics_csv, Greedy, Policy,
    RandomPolicy, Scripted, EVAL_SEED_BASE,
};
use surgisim_rl::{cross_eval_matrix, Agent, Algo, Checkpoint, EpochMetrics, EvalResult, TrainConfig, Trainer};

use crate::manifest::RunManifest;
use crate::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "surgisim", version, about = "Surgical robot learning simulator")]
#[command(args_conflicts_with_subcommands = true, arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Option<Command>,

    /// Serve environments over TCP at HOST:PORT (one environment per connection).
    #[arg(long, value_name = "HOST:PORT", requires = "task")]
    pub serve: Option<String>,

    #[arg(long, value_parser = parse_task)]
    pub task: Option<TaskId>,

    #[arg(long, value_parser = parse_mode)]
    pub grasp_mode: Option<GraspMode>,

    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train agents, one run per seed.
    Train(TrainArgs),
    /// Evaluate checkpoints or a baseline policy.
    Eval(EvalArgs),
    /// Record successful scripted episodes as a demonstration file.
    Collect(CollectArgs),
    /// Measure random-action stepping throughput.
    Bench(BenchArgs),
    /// Evaluate policies trained under each grasp mode under every test mode.
    CrossEval(CrossEvalArgs),
    /// Re-simulate a demonstration or episode file and compare bit for bit.
    Replay(ReplayArgs),
    /// Run a command again from the manifest in its output directory.
    Rerun {
        dir: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct EnvArgs {
    #[arg(long, value_parser = parse_task)]
    pub task: TaskId,

    /// `approx:<mm>` or `interact`.
    #[arg(long, value_parser = parse_mode)]
    pub grasp_mode: Option<GraspMode>,

    /// JSON file with optional `task` (environment) and `train` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[arg(long, value_parser = parse_algo)]
    pub algo: Option<Algo>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Training episodes per epoch.
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub demos: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from existing checkpoints (the replay buffer starts empty).
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Scripted,
    Random,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long, value_enum, conflicts_with = "checkpoints")]
    pub policy: Option<Baseline>,
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    #[arg(long, default_value_t = EVAL_SEED_BASE)]
    pub seed_base: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write every episode as a replayable file.
    #[arg(long)]
    pub log: bool,
}

#[derive(Debug, Args)]
pub struct CollectArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    /// First reset seed; later episodes use the following seeds.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[arg(long, default_value_t = 10_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 3)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CrossEvalArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    /// Training output directory; each one is a row of the matrix.
    #[arg(long = "run", required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', value_parser = parse_mode, default_value = "approx:1,approx:2,approx:3,interact")]
    pub test_modes: Vec<GraspMode>,
    #[arg(long, default_value_t = 200)]
    pub episodes: usize,
    #[arg(long, default_value_t = EVAL_SEED_BASE)]
    pub seed_base: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub file: PathBuf,
    /// Replay under this grasp mode instead of the recorded one.
    #[arg(long, value_parser = parse_mode)]
    pub grasp_mode: Option<GraspMode>,
    /// Environment configuration, needed when the recording used a non-default one.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV of the replayed steps.
    #[arg(long)]
    pub dump: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_task(s: &str) -> std::result::Result<TaskId, String> {
    s.parse::<TaskId>().map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<GraspMode, String> {
    parse_grasp_mode(s).map_err(|e| e.to_string())
}

fn parse_algo(s: &str) -> std::result::Result<Algo, String> {
    s.parse::<Algo>().map_err(|e| e.to_string())
}

/// `NeedlePick` → `needle_pick`.
pub fn snake(task: TaskId) -> String {
    let mut out = String::new();
    for (i, c) in task.name().chars().enumerate() {
        if c.is_ascii_uppercase() && i > 0 {
            out.push('_');
        }
        out.push(c.to_ascii_lowercase());
    }
    out
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub task: Option<TaskConfig>,
    pub train: Option<TrainConfig>,
}

fn read_config(path: &Path) -> Result<ConfigFile> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

impl EnvArgs {
    /// Environment configuration after applying the config file and flags.
    pub fn resolve(&self) -> Result<(TaskConfig, Option<TrainConfig>)> {
        let file = match &self.config {
            Some(p) => read_config(p)?,
            None => ConfigFile::default(),
        };
        let mut task = match file.task {
            Some(t) if t.task != self.task => {
                return Err(CliError::Usage(format!(
                    "config file describes {}, but --task is {}",
                    t.task, self.task
                )))
            }
            Some(t) => t,
            None => TaskConfig::new(self.task),
        };
        if let Some(m) = self.grasp_mode {
            task = task.with_grasp_mode(m);
        }
        task.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok((task, file.train))
    }
}

fn out_dir(out: &Option<PathBuf>, command: &str, task: TaskId) -> PathBuf {
    out.clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("{command}-{}", snake(task))))
}

/// Parses `args` (program name first) and runs; returns the exit code.
pub fn main_with(args: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli, &args[1..]) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, argv: &[String]) -> Result<()> {
    if let Some(addr) = cli.serve {
        let env = EnvArgs {
            task: cli.task.ok_or_else(|| CliError::Usage("--serve needs --task".into()))?,
            grasp_mode: cli.grasp_mode,
            config: cli.config,
        };
        return cmd_serve(&env, &addr);
    }
    match cli.command {
        Some(Command::Train(a)) => cmd_train(a, argv),
        Some(Command::Eval(a)) => cmd_eval(a, argv),
        Some(Command::Collect(a)) => cmd_collect(a, argv),
        Some(Command::Bench(a)) => cmd_bench(a, argv).map(|_| ()),
        Some(Command::CrossEval(a)) => cmd_cross_eval(a, argv),
        Some(Command::Replay(a)) => cmd_replay(a, argv),
        Some(Command::Rerun { dir }) => cmd_rerun(&dir),
        None => Err(CliError::Usage("no command given (see --help)".into())),
    }
}

fn cmd_rerun(dir: &Path) -> Result<()> {
    let m = RunManifest::load(dir)?;
    let mut args = vec!["surgisim".to_string()];
    args.extend(m.args.iter().cloned());
    let cli = Cli::try_parse_from(&args).map_err(|e| CliError::Usage(format!("stored arguments: {e}")))?;
    if matches!(cli.command, Some(Command::Rerun { .. })) || cli.serve.is_some() {
        return Err(CliError::Usage("manifest does not describe a rerunnable command".into()));
    }
    run(cli, &m.args)
}

fn cmd_serve(env: &EnvArgs, addr: &str) -> Result<()> {
    let (task, _) = env.resolve()?;
    TaskEnv::new(task.clone())?;
    let listener = TcpListener::bind(addr).map_err(|e| CliError::Usage(format!("cannot listen on {addr}: {e}")))?;
    println!("listening on {} ({})", listener.local_addr()?, task.task);
    std::io::stdout().flush()?;
    crate::bridge::serve(listener, task)?;
    Ok(())
}

fn cmd_train(a: TrainArgs, argv: &[String]) -> Result<()> {
    let (task, file_train) = a.env.resolve()?;
    let mut base = file_train.unwrap_or_else(|| TrainConfig::new(a.algo.unwrap_or(Algo::Her), 0));
    if let Some(algo) = a.algo {
        base.algo = algo;
    }
    if let Some(n) = a.epochs {
        base.epochs = n;
    }
    if let Some(n) = a.episodes {
        base.episodes_per_epoch = n;
    }
    if let Some(n) = a.workers {
        base.n_workers = n;
    }
    base.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if a.seeds.is_empty() {
        return Err(CliError::Usage("--seeds is empty".into()));
    }
    let demos = match (&a.demos, base.algo) {
        (None, Algo::HerDemo) => return Err(CliError::Usage("her_demo needs --demos <file>".into())),
        (None, _) => None,
        (Some(p), _) if !p.is_file() => {
            return Err(CliError::Usage(format!("demo file {} not found", p.display())))
        }
        (Some(p), _) => Some(load_demos(p, &task).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?),
    };
    if let Some(d) = &demos {
        if d.header.task != task.task {
            return Err(CliError::Usage(format!("demonstrations are for {}, not {}", d.header.task, task.task)));
        }
    }

    let out = out_dir(&a.out, "train", task.task);
    let mut manifest = RunManifest::new("train", &out, argv).with_task(&task);
    manifest.config_path = a.env.config.clone();
    manifest.seeds = a.seeds.clone();
    manifest.train_config = Some(TrainConfig {
        seed: a.seeds[0],
        ..base.clone()
    });
    manifest.write()?;

    let mut summary = Vec::with_capacity(a.seeds.len());
    for &seed in &a.seeds {
        let dir = out.join(format!("seed_{seed}"));
        std::fs::create_dir_all(&dir)?;
        let ckpt_path = dir.join("checkpoint.json");
        let metrics_path = dir.join("metrics.csv");
        let config = TrainConfig { seed, ..base.clone() };
        let (mut trainer, mut rows) = if a.resume && ckpt_path.is_file() {
            let ckpt = Checkpoint::load(&ckpt_path)?;
            let done = ckpt.epoch;
            let mut rows = if metrics_path.is_file() { read_metrics_csv(&metrics_path)? } else { Vec::new() };
            rows.truncate(done);
            let mut t = Trainer::resume(ckpt, demos.as_ref())?;
            t.config.epochs = config.epochs;
            (t, rows)
        } else {
            (Trainer::new(task.clone(), config.clone(), demos.as_ref())?, Vec::new())
        };
        while trainer.epoch < trainer.config.epochs {
            let m = trainer.run_epoch()?;
            eprintln!(
                "{} {:?} seed {seed} epoch {:>3}: success {:.2}, return {:.2}, critic {:.4}",
                task.task, trainer.config.algo, m.epoch, m.success_rate, m.mean_return, m.critic_loss
            );
            rows.push(m);
            write_metrics_csv(&metrics_path, &rows)?;
            trainer.checkpoint().save(&ckpt_path)?;
        }
        summary.push((seed, rows));
    }
    let path = out.join("summary.csv");
    std::fs::write(&path, summary_csv(&summary))?;
    print!("{}", std::fs::read_to_string(&path)?);
    Ok(())
}

/// One row per seed plus the mean over seeds.
pub fn summary_csv(runs: &[(u64, Vec<EpochMetrics>)]) -> String {
    let mut s = String::from("seed,epochs,final_success_rate,best_success_rate,final_mean_return,final_mean_step_reward\n");
    let mut acc = [0.0; 4];
    for (seed, rows) in runs {
        let last = rows.last();
        let vals = [
            last.map_or(0.0, |m| m.success_rate),
            rows.iter().map(|m| m.success_rate).fold(0.0, f64::max),
            last.map_or(0.0, |m| m.mean_return),
            last.map_or(0.0, |m| m.mean_step_reward),
        ];
        let _ = writeln!(s, "{seed},{},{},{},{},{}", rows.len(), vals[0], vals[1], vals[2], vals[3]);
        for (a, v) in acc.iter_mut().zip(vals) {
            *a += v / runs.len() as f64;
        }
    }
    let epochs = runs.first().map_or(0, |(_, r)| r.len());
    let _ = writeln!(s, "mean,{epochs},{},{},{},{}", acc[0], acc[1], acc[2], acc[3]);
    s
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("checkpoint {} not found", path.display())));
    }
    Checkpoint::load(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    #[serde(flatten)]
    pub result: EvalResult,
}

fn cmd_eval(a: EvalArgs, argv: &[String]) -> Result<()> {
    let (task, _) = a.env.resolve()?;
    let mut named: Vec<(String, Agent)> = Vec::new();
    for p in &a.checkpoints {
        let c = load_checkpoint(p)?;
        if c.task.task != task.task {
            return Err(CliError::Usage(format!("{} was trained on {}", p.display(), c.task.task)));
        }
        named.push((p.display().to_string(), c.agent));
    }
    if named.is_empty() && a.policy.is_none() {
        return Err(CliError::Usage("give --checkpoint or --policy".into()));
    }
    let out = out_dir(&a.out, "eval", task.task);
    let mut manifest = RunManifest::new("eval", &out, argv).with_task(&task);
    manifest.config_path = a.env.config.clone();
    manifest.seeds = (0..a.episodes as u64).map(|k| a.seed_base + k).collect();
    manifest.write()?;

    let mut env = TaskEnv::new(task.clone())?;
    let mut reports = Vec::new();
    let mut policies: Vec<(String, Box<dyn Policy + '_>)> = named
        .iter()
        .map(|(n, agent)| (n.clone(), Box::new(Greedy(agent)) as Box<dyn Policy>))
        .collect();
    match a.policy {
        Some(Baseline::Scripted) => policies.push(("scripted".into(), Box::new(Scripted::default()))),
        Some(Baseline::Random) => policies.push((
            "random".into(),
            Box::new(RandomPolicy {
                rng: ChaCha8Rng::seed_from_u64(a.seed_base),
                dim: env.spec().action_dim,
            }),
        )),
        None => {}
    }
    for (i, (name, policy)) in policies.iter_mut().enumerate() {
        let (mut wins, mut ret, mut per_step) = (0usize, 0.0, 0.0);
        let mut episodes = Vec::new();
        for seed in &manifest.seeds {
            let o = run_episode(&mut env, policy.as_mut(), *seed)?;
            wins += o.success as usize;
            ret += o.ret;
            per_step += o.ret / o.records.len().max(1) as f64;
            if a.log {
                episodes.push(o.records);
            }
        }
        let n = a.episodes.max(1) as f64;
        let result = EvalResult {
            episodes: a.episodes,
            success_rate: wins as f64 / n,
            mean_return: ret / n,
            mean_step_reward: per_step / n,
        };
        println!(
            "{name}: success {:.3}, mean return {:.3}, mean step reward {:.4}",
            result.success_rate, result.mean_return, result.mean_step_reward
        );
        if a.log {
            let set = DemoSet::from_episodes(&task, manifest.seeds.clone(), episodes)?;
            write_demos(&out.join(format!("episodes_{i}.jsonl")), &set)?;
        }
        reports.push(EvalReport { policy: name.clone(), result });
    }
    std::fs::write(out.join("eval.json"), serde_json::to_string_pretty(&reports)?)?;
    Ok(())
}

fn cmd_collect(a: CollectArgs, argv: &[String]) -> Result<()> {
    let (task, _) = a.env.resolve()?;
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("demos"));
    let mut manifest = RunManifest::new("collect", &out, argv).with_task(&task);
    manifest.config_path = a.env.config.clone();
    manifest.seeds = vec![a.seed];
    manifest.write()?;
    let mut env = TaskEnv::new(task.clone())?;
    let demos = collect_demos(&mut env, a.episodes, a.seed)?;
    let path = out.join(format!("{}.jsonl", snake(task.task)));
    write_demos(&path, &demos)?;
    println!(
        "{} episodes, {} transitions -> {}",
        demos.episodes.len(),
        demos.transitions(),
        path.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchTrial {
    pub steps: usize,
    pub resets: usize,
    pub seconds: f64,
    pub hz: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Machine {
    pub cpu: String,
    pub logical_cpus: usize,
    pub os: String,
    pub arch: String,
}

impl Machine {
    pub fn detect() -> Self {
        let cpu = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split_once(':'))
                    .map(|(_, v)| v.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        Self {
            cpu,
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub task: TaskId,
    pub grasp_mode: GraspMode,
    pub trials: Vec<BenchTrial>,
    pub mean_hz: f64,
    pub machine: Machine,
}

/// Steps `steps` random actions per trial, resetting whenever an episode ends.
pub fn bench(task: &TaskConfig, steps: usize, trials: usize, seed: u64) -> Result<BenchReport> {
    let mut env = TaskEnv::new(task.clone())?;
    let dim = env.spec().action_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut episode_seed = seed;
    let mut out = Vec::with_capacity(trials);
    for _ in 0..trials {
        env.reset(episode_seed)?;
        episode_seed += 1;
        let mut resets = 0;
        let mut action = vec![0.0; dim];
        let t0 = Instant::now();
        let mut count = 0;
        while count < steps {
            for v in &mut action {
                *v = rng.random_range(-1.0..=1.0);
            }
            let s = env.step(&action)?;
            count += 1;
            if s.done && count < steps {
                env.reset(episode_seed)?;
                episode_seed += 1;
                resets += 1;
            }
        }
        let seconds = t0.elapsed().as_secs_f64();
        out.push(BenchTrial {
            steps: count,
            resets,
            seconds,
            hz: count as f64 / seconds.max(1e-12),
        });
    }
    let mean_hz = out.iter().map(|t| t.hz).sum::<f64>() / out.len().max(1) as f64;
    Ok(BenchReport {
        task: task.task,
        grasp_mode: task.grasp_mode,
        trials: out,
        mean_hz,
        machine: Machine::detect(),
    })
}

fn cmd_bench(a: BenchArgs, argv: &[String]) -> Result<BenchReport> {
    let (task, _) = a.env.resolve()?;
    if a.trials == 0 {
        return Err(CliError::Usage("--trials must be positive".into()));
    }
    let out = out_dir(&a.out, "bench", task.task);
    let mut manifest = RunManifest::new("bench", &out, argv).with_task(&task);
    manifest.config_path = a.env.config.clone();
    manifest.seeds = vec![a.seed];
    manifest.write()?;
    let report = bench(&task, a.steps, a.trials, a.seed)?;
    for (i, t) in report.trials.iter().enumerate() {
        println!("trial {}: {} steps in {:.3} s = {:.1} Hz", i + 1, t.steps, t.seconds, t.hz);
    }
    println!(
        "{}: mean {:.1} Hz on {} ({} logical CPUs, {}/{})",
        task.task, report.mean_hz, report.machine.cpu, report.machine.logical_cpus, report.machine.os, report.machine.arch
    );
    std::fs::write(out.join("bench.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

fn cmd_cross_eval(a: CrossEvalArgs, argv: &[String]) -> Result<()> {
    let (task, _) = a.env.resolve()?;
    let mut policies: Vec<(GraspMode, Vec<Agent>)> = Vec::new();
    let mut seeds = Vec::new();
    for run in &a.runs {
        let m = RunManifest::load(run)?;
        if m.seeds.is_empty() {
            return Err(CliError::Usage(format!("{} lists no seeds", run.display())));
        }
        let mut mode = None;
        let mut agents = Vec::new();
        for seed in &m.seeds {
            let c = load_checkpoint(&run.join(format!("seed_{seed}")).join("checkpoint.json"))?;
            if c.task.task != task.task {
                return Err(CliError::Usage(format!("{} was trained on {}", run.display(), c.task.task)));
            }
            if mode.is_some_and(|m| m != c.task.grasp_mode) {
                return Err(CliError::Usage(format!("{} mixes grasp modes", run.display())));
            }
            mode = Some(c.task.grasp_mode);
            agents.push(c.agent);
            seeds.push(*seed);
        }
        policies.push((mode.expect("at least one seed"), agents));
    }
    let out = out_dir(&a.out, "cross_eval", task.task);
    let mut manifest = RunManifest::new("cross-eval", &out, argv).with_task(&task);
    manifest.config_path = a.env.config.clone();
    manifest.seeds = seeds;
    manifest.write()?;
    let matrix = cross_eval_matrix(&task, &policies, &a.test_modes, a.episodes, a.seed_base)?;
    let csv = matrix.to_csv();
    std::fs::write(out.join("cross_eval.csv"), &csv)?;
    std::fs::write(out.join("cross_eval.json"), serde_json::to_string_pretty(&matrix)?)?;
    print!("{csv}");
    Ok(())
}

/// Where a replay first departed from its recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub episode: usize,
    pub seed: u64,
    pub step: usize,
    pub what: String,
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Re-runs every episode; returns the replayed records and the first divergence.
pub fn replay_demos(env: &mut TaskEnv, demos: &DemoSet) -> Result<(Vec<Vec<TransitionRecord>>, Option<Divergence>)> {
    let mut replayed = Vec::with_capacity(demos.episodes.len());
    for (episode, (seed, records)) in demos.header.seeds.iter().zip(&demos.episodes).enumerate() {
        let diverge = |step: usize, what: String| Divergence {
            episode,
            seed: *seed,
            step,
            what,
        };
        let mut obs = env.reset(*seed)?;
        let mut out = Vec::with_capacity(records.len());
        for (step, r) in records.iter().enumerate() {
            if step == 0 && !same_bits(&obs.observation, &r.obs.observation) {
                replayed.push(out);
                return Ok((replayed, Some(diverge(0, "initial observation differs".into()))));
            }
            let s = match env.step(&r.action) {
                Ok(s) => s,
                Err(e) => {
                    replayed.push(out);
                    return Ok((replayed, Some(diverge(step, format!("step failed: {e}")))));
                }
            };
            let what = if s.reward.to_bits() != r.reward.to_bits() {
                Some(format!("reward recorded {} replayed {}", r.reward, s.reward))
            } else if !same_bits(&s.obs.observation, &r.next_obs.observation)
                || !same_bits(&s.obs.achieved_goal, &r.next_obs.achieved_goal)
            {
                Some("next observation differs".to_string())
            } else if s.done != r.done || s.info.is_success != r.is_success {
                Some(format!("done/success recorded {}/{} replayed {}/{}", r.done, r.is_success, s.done, s.info.is_success))
            } else {
                None
            };
            out.push(TransitionRecord {
                t: step,
                obs,
                action: r.action.clone(),
                reward: s.reward,
                next_obs: s.obs.clone(),
                done: s.done,
                is_success: s.info.is_success,
            });
            obs = s.obs;
            if let Some(what) = what {
                replayed.push(out);
                return Ok((replayed, Some(diverge(step, what))));
            }
        }
        replayed.push(out);
    }
    Ok((replayed, None))
}

fn write_dump(path: &Path, demos: &DemoSet, replayed: &[Vec<TransitionRecord>]) -> Result<()> {
    let goal_dim = demos.header.task.goal_dim();
    let mut s = String::from("episode,seed,t,recorded_reward,replayed_reward,is_success");
    for i in 0..goal_dim {
        let _ = write!(s, ",achieved_{i}");
    }
    for i in 0..goal_dim {
        let _ = write!(s, ",desired_{i}");
    }
    s.push('\n');
    for (e, (seed, eps)) in demos.header.seeds.iter().zip(replayed).enumerate() {
        for (r, orig) in eps.iter().zip(&demos.episodes[e]) {
            let _ = write!(s, "{e},{seed},{},{},{},{}", r.t, orig.reward, r.reward, r.is_success);
            for v in r.next_obs.achieved_goal.iter().chain(&r.next_obs.desired_goal) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn cmd_replay(a: ReplayArgs, argv: &[String]) -> Result<()> {
    if !a.file.is_file() {
        return Err(CliError::Usage(format!("{} not found", a.file.display())));
    }
    let (demos, intact) = read_demo_file(&a.file).map_err(|e| CliError::Usage(format!("{}: {e}", a.file.display())))?;
    let h = &demos.header;
    let recorded = match &a.config {
        Some(p) => read_config(p)?
            .task
            .ok_or_else(|| CliError::Usage(format!("{} has no task section", p.display())))?,
        None => TaskConfig::new(h.task).with_grasp_mode(h.grasp_mode),
    };
    if env_config_hash(&recorded)? != h.env_config_hash {
        return Err(CliError::Usage(
            "the recording used a different environment configuration; pass it with --config".into(),
        ));
    }
    let task = match a.grasp_mode {
        Some(m) => recorded.clone().with_grasp_mode(m),
        None => recorded.clone(),
    };
    let out = out_dir(&a.out, "replay", task.task);
    let mut manifest = RunManifest::new("replay", &out, argv).with_task(&task);
    manifest.config_path = a.config.clone();
    manifest.seeds = h.seeds.clone();
    manifest.write()?;

    if task.grasp_mode != recorded.grasp_mode {
        println!(
            "replaying under {} (recorded under {})",
            grasp_mode_label(&task.grasp_mode),
            grasp_mode_label(&recorded.grasp_mode)
        );
    }
    if !intact {
        println!("warning: payload does not match the recorded hash; the file was modified");
    }
    let mut env = TaskEnv::new(task)?;
    let (replayed, divergence) = replay_demos(&mut env, &demos)?;
    if let Some(p) = &a.dump {
        write_dump(p, &demos, &replayed)?;
    }
    match divergence {
        Some(d) => Err(CliError::Mismatch(format!(
            "first divergence: episode {} (seed {}), step {}: {}",
            d.episode, d.seed, d.step, d.what
        ))),
        None if !intact => Err(CliError::Mismatch(
            "replay matches but the payload hash does not; the file was modified".into(),
        )),
        None => {
            println!(
                "exact match: {} episodes, {} steps",
                demos.episodes.len(),
                demos.transitions()
            );
            Ok(())
        }
    }
}

