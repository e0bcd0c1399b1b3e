//! Seeded training loop, evaluation protocol and grasp-mode cross evaluation.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use surgisim::demos::{plan_waypoints, DemoSet, ScriptedPolicy};
use surgisim::envs::{compute_reward, Observation, TaskConfig, TaskEnv, TransitionRecord};
use surgisim::physics::GraspMode;

use crate::ddpg::{Agent, AgentConfig, Losses};
use crate::error::{Result, RlError};
use crate::replay::{Episode, ReplayBuffer};

/// Evaluation episodes use seeds from here on, away from training seeds.
pub const EVAL_SEED_BASE: u64 = 1_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    Ddpg,
    Her,
    HerDemo,
}

impl std::str::FromStr for Algo {
    type Err = RlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpg" => Ok(Algo::Ddpg),
            "her" => Ok(Algo::Her),
            "her_demo" | "her+demo" => Ok(Algo::HerDemo),
            _ => Err(RlError::Config(format!("unknown algorithm '{s}' (ddpg, her, her_demo)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algo: Algo,
    pub seed: u64,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    /// Episodes collected between rounds of gradient updates.
    pub episodes_per_cycle: usize,
    pub updates_per_cycle: usize,
    pub n_workers: usize,
    pub batch_size: usize,
    /// Share of each batch drawn from demonstrations.
    pub demo_fraction: f64,
    pub buffer_capacity: usize,
    pub k_future: usize,
    /// Probability of a uniformly random exploration action.
    pub random_eps: f64,
    /// Gaussian action noise, as a fraction of the action bound.
    pub noise_eps: f64,
    pub eval_episodes: usize,
    pub agent: AgentConfig,
}

impl TrainConfig {
    pub fn new(algo: Algo, seed: u64) -> Self {
        Self {
            algo,
            seed,
            epochs: 50,
            episodes_per_epoch: 40,
            episodes_per_cycle: 2,
            updates_per_cycle: 40,
            n_workers: 1,
            batch_size: 256,
            demo_fraction: 0.125,
            buffer_capacity: 1_000_000,
            k_future: 4,
            random_eps: 0.3,
            noise_eps: 0.2,
            eval_episodes: 20,
            agent: AgentConfig {
                hidden: vec![64, 64, 64],
                gamma: 0.98,
                actor_lr: 1e-3,
                critic_lr: 1e-3,
                polyak: 0.95,
                action_l2: 1.0,
                bc_weight: 0.125,
                q_range: AgentConfig::q_range_for(0.98, -1.0, 0.0),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(RlError::Config(m.into()));
        if self.episodes_per_cycle == 0 || self.episodes_per_epoch % self.episodes_per_cycle != 0 {
            return bad("episodes_per_epoch must be a positive multiple of episodes_per_cycle");
        }
        if self.n_workers == 0 || self.batch_size == 0 || self.buffer_capacity == 0 {
            return bad("workers, batch size and buffer capacity must be positive");
        }
        if !(0.0..1.0).contains(&self.agent.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.agent.polyak) || !(0.0..1.0).contains(&self.demo_fraction) {
            return bad("polyak must lie in [0, 1] and demo_fraction in [0, 1)");
        }
        Ok(())
    }
}

/// Something that maps observations to actions over an episode.
pub trait Policy {
    fn begin_episode(&mut self, _env: &TaskEnv) -> Result<()> {
        Ok(())
    }
    fn act(&mut self, obs: &Observation) -> Result<Vec<f64>>;
}

/// The agent's deterministic actor.
pub struct Greedy<'a>(pub &'a Agent);

impl Policy for Greedy<'_> {
    fn act(&mut self, obs: &Observation) -> Result<Vec<f64>> {
        Ok(self.0.act(&obs.observation, &obs.desired_goal))
    }
}

/// The actor with random actions and Gaussian noise mixed in.
pub struct Exploring<'a> {
    pub agent: &'a Agent,
    pub rng: ChaCha8Rng,
    pub random_eps: f64,
    pub noise_eps: f64,
}

impl Policy for Exploring<'_> {
    fn act(&mut self, obs: &Observation) -> Result<Vec<f64>> {
        if self.rng.random::<f64>() < self.random_eps {
            return Ok((0..self.agent.action_dim).map(|_| self.rng.random_range(-1.0..=1.0)).collect());
        }
        let noise = Normal::new(0.0, self.noise_eps).map_err(|e| RlError::Config(e.to_string()))?;
        let mut a = self.agent.act(&obs.observation, &obs.desired_goal);
        for v in &mut a {
            *v = (*v + noise.sample(&mut self.rng)).clamp(-1.0, 1.0);
        }
        Ok(a)
    }
}

/// Uniform random actions.
pub struct RandomPolicy {
    pub rng: ChaCha8Rng,
    pub dim: usize,
}

impl Policy for RandomPolicy {
    fn act(&mut self, _obs: &Observation) -> Result<Vec<f64>> {
        Ok((0..self.dim).map(|_| self.rng.random_range(-1.0..=1.0)).collect())
    }
}

/// The scripted demonstrator, re-planned every episode.
#[derive(Default)]
pub struct Scripted(Option<ScriptedPolicy>);

impl Policy for Scripted {
    fn begin_episode(&mut self, env: &TaskEnv) -> Result<()> {
        self.0 = Some(plan_waypoints(env)?);
        Ok(())
    }

    fn act(&mut self, obs: &Observation) -> Result<Vec<f64>> {
        let p = self
            .0
            .as_mut()
            .ok_or_else(|| RlError::Config("scripted policy used before an episode began".into()))?;
        Ok(p.act(obs)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub records: Vec<TransitionRecord>,
    /// `is_success` at the last step.
    pub success: bool,
    pub ret: f64,
}

pub fn run_episode(env: &mut TaskEnv, policy: &mut dyn Policy, seed: u64) -> Result<EpisodeOutcome> {
    let mut obs = env.reset(seed)?;
    policy.begin_episode(env)?;
    let mut records = Vec::with_capacity(env.config().horizon);
    let mut ret = 0.0;
    for t in 0.. {
        let action = policy.act(&obs)?;
        let step = env.step(&action)?;
        ret += step.reward;
        records.push(TransitionRecord {
            t,
            obs,
            action,
            reward: step.reward,
            next_obs: step.obs.clone(),
            done: step.done,
            is_success: step.info.is_success,
        });
        obs = step.obs;
        if step.done {
            break;
        }
    }
    let success = records.last().is_some_and(|r| r.is_success);
    Ok(EpisodeOutcome { records, success, ret })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    /// Return divided by episode length, averaged over episodes.
    pub mean_step_reward: f64,
}

/// Runs `n_episodes` from seeds `seed_base..` without exploration.
pub fn evaluate(env: &mut TaskEnv, policy: &mut dyn Policy, n_episodes: usize, seed_base: u64) -> Result<EvalResult> {
    let (mut wins, mut ret, mut per_step) = (0usize, 0.0, 0.0);
    for k in 0..n_episodes as u64 {
        let out = run_episode(env, policy, seed_base + k)?;
        wins += out.success as usize;
        ret += out.ret;
        per_step += out.ret / out.records.len().max(1) as f64;
    }
    let n = n_episodes.max(1) as f64;
    Ok(EvalResult {
        episodes: n_episodes,
        success_rate: wins as f64 / n,
        mean_return: ret / n,
        mean_step_reward: per_step / n,
    })
}

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    pub mean_step_reward: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub bc_loss: f64,
    pub rejected_updates: usize,
    pub wall_time_s: f64,
}

pub fn write_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}

fn csv_error(e: csv::Error) -> RlError {
    RlError::Io(std::io::Error::other(e))
}

/// Seed for the `index`-th training episode of `epoch`.
fn episode_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64 | (1 << 63));
    rng
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub task: TaskConfig,
    pub config: TrainConfig,
    /// Epochs completed.
    pub epoch: usize,
    pub agent: Agent,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(self)?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(RlError::Checkpoint(format!(
                "version {} (expected {CHECKPOINT_VERSION})",
                c.version
            )));
        }
        Ok(c)
    }
}

pub struct Trainer {
    pub task: TaskConfig,
    pub config: TrainConfig,
    pub agent: Agent,
    pub buffer: ReplayBuffer,
    demo_buffer: Option<ReplayBuffer>,
    rng: ChaCha8Rng,
    pub epoch: usize,
    envs: Vec<TaskEnv>,
    eval_env: TaskEnv,
}

impl Trainer {
    pub fn new(task: TaskConfig, config: TrainConfig, demos: Option<&DemoSet>) -> Result<Self> {
        config.validate()?;
        let env = TaskEnv::new(task.clone())?;
        let spec = env.spec();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut agent_config = config.agent.clone();
        if !task.task.is_goal_based() {
            agent_config.q_range = AgentConfig::q_range_for(agent_config.gamma, -1.0, 1.0);
        }
        let agent = Agent::new(spec.obs_dim, spec.goal_dim, spec.action_dim, agent_config, &mut rng);
        Self::assemble(task, config, agent, rng, 0, demos)
    }

    /// Continues a run from its checkpoint with a fresh replay buffer.
    pub fn resume(ckpt: Checkpoint, demos: Option<&DemoSet>) -> Result<Self> {
        Self::assemble(ckpt.task, ckpt.config, ckpt.agent, ckpt.rng, ckpt.epoch, demos)
    }

    fn assemble(
        task: TaskConfig,
        config: TrainConfig,
        mut agent: Agent,
        rng: ChaCha8Rng,
        epoch: usize,
        demos: Option<&DemoSet>,
    ) -> Result<Self> {
        let demo_buffer = match (config.algo, demos) {
            (Algo::HerDemo, None) => return Err(RlError::Config("her_demo needs a demonstration file".into())),
            (Algo::HerDemo, Some(d)) => {
                if d.header.task != task.task {
                    return Err(RlError::Config(format!(
                        "demonstrations are for {}, not {}",
                        d.header.task, task.task
                    )));
                }
                let mut buf = ReplayBuffer::new(d.transitions().max(1), 0);
                for ep in &d.episodes {
                    let e = Episode::from_records(ep, task.horizon, true);
                    // Demos seed the statistics only on a fresh run.
                    if epoch == 0 {
                        update_normalizers(&mut agent, &e);
                    }
                    buf.push(e)?;
                }
                Some(buf)
            }
            _ => None,
        };
        let envs = (0..config.n_workers)
            .map(|_| TaskEnv::new(task.clone()))
            .collect::<surgisim::Result<Vec<_>>>()?;
        Ok(Self {
            eval_env: TaskEnv::new(task.clone())?,
            buffer: ReplayBuffer::new(config.buffer_capacity, config.k_future),
            demo_buffer,
            task,
            config,
            agent,
            rng,
            epoch,
            envs,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            task: self.task.clone(),
            config: self.config.clone(),
            epoch: self.epoch,
            agent: self.agent.clone(),
            rng: self.rng.clone(),
        }
    }

    /// Collects one cycle of episodes in parallel; results come back in
    /// episode order whatever the thread timing.
    fn collect(&mut self, first_index: usize) -> Result<Vec<Episode>> {
        let n = self.config.episodes_per_cycle;
        let workers = self.envs.len();
        let (agent, cfg, epoch) = (&self.agent, &self.config, self.epoch);
        let results: Vec<Vec<(usize, Result<Episode>)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = self
                .envs
                .iter_mut()
                .enumerate()
                .map(|(w, env)| {
                    scope.spawn(move || {
                        (w..n)
                            .step_by(workers)
                            .map(|k| {
                                let index = first_index + k;
                                let mut rng = episode_rng(cfg.seed, epoch, index);
                                let env_seed = rng.random::<u64>() >> 1;
                                let mut policy = Exploring {
                                    agent,
                                    rng,
                                    random_eps: cfg.random_eps,
                                    noise_eps: cfg.noise_eps,
                                };
                                let ep = run_episode(env, &mut policy, env_seed)
                                    .map(|o| Episode::from_records(&o.records, env.config().horizon, false));
                                (k, ep)
                            })
                            .collect()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("rollout worker panicked")).collect()
        });
        let mut ordered: Vec<Option<Result<Episode>>> = (0..n).map(|_| None).collect();
        for (k, ep) in results.into_iter().flatten() {
            ordered[k] = Some(ep);
        }
        ordered.into_iter().map(|e| e.expect("every episode assigned")).collect()
    }

    fn sample_and_update(&mut self) -> Result<Losses> {
        let task = self.task.clone();
        let reward = move |ag: &[f64], g: &[f64]| compute_reward(&task, ag, g);
        let relabel = self.config.algo != Algo::Ddpg && self.task.task.is_goal_based();
        let reward_fn: Option<&crate::replay::RewardFn> = if relabel { Some(&reward) } else { None };
        let batch = match &self.demo_buffer {
            Some(demos) => {
                let n_demo = ((self.config.batch_size as f64 * self.config.demo_fraction).round() as usize).max(1);
                let own = self.buffer.her_sample(self.config.batch_size - n_demo, reward_fn, &mut self.rng)?;
                own.concat(&demos.her_sample(n_demo, None, &mut self.rng)?)
            }
            None => self.buffer.her_sample(self.config.batch_size, reward_fn, &mut self.rng)?,
        };
        self.agent.update(&batch)
    }

    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let started = Instant::now();
        let cycles = self.config.episodes_per_epoch / self.config.episodes_per_cycle;
        let (mut losses, mut n_updates, mut rejected) = (Losses::default(), 0usize, 0usize);
        for c in 0..cycles {
            for ep in self.collect(c * self.config.episodes_per_cycle)? {
                update_normalizers(&mut self.agent, &ep);
                self.buffer.push(ep)?;
            }
            for _ in 0..self.config.updates_per_cycle {
                match self.sample_and_update() {
                    Ok(l) => {
                        losses.actor += l.actor;
                        losses.critic += l.critic;
                        losses.bc += l.bc;
                        n_updates += 1;
                    }
                    Err(RlError::NonFiniteUpdate { what }) => {
                        rejected += 1;
                        eprintln!("warning: epoch {} rejected an update: non-finite {what}", self.epoch);
                    }
                    Err(e) => return Err(e),
                }
            }
            self.agent.update_targets();
        }
        let eval = evaluate(
            &mut self.eval_env,
            &mut Greedy(&self.agent),
            self.config.eval_episodes,
            EVAL_SEED_BASE,
        )?;
        self.epoch += 1;
        let k = n_updates.max(1) as f64;
        Ok(EpochMetrics {
            epoch: self.epoch,
            episodes: self.epoch * self.config.episodes_per_epoch,
            success_rate: eval.success_rate,
            mean_return: eval.mean_return,
            mean_step_reward: eval.mean_step_reward,
            actor_loss: losses.actor / k,
            critic_loss: losses.critic / k,
            bc_loss: losses.bc / k,
            rejected_updates: rejected,
            wall_time_s: started.elapsed().as_secs_f64(),
        })
    }
}

fn update_normalizers(agent: &mut Agent, ep: &Episode) {
    agent.obs_norm.update(ep.obs.iter().map(Vec::as_slice));
    agent
        .goal_norm
        .update(ep.desired.iter().chain(&ep.achieved).map(Vec::as_slice));
}

/// Trains for `config.epochs`, calling `on_epoch` after each epoch.
pub fn train(
    task: &TaskConfig,
    config: &TrainConfig,
    demos: Option<&DemoSet>,
    mut on_epoch: impl FnMut(&Trainer, &EpochMetrics) -> Result<()>,
) -> Result<(Agent, Vec<EpochMetrics>)> {
    let mut trainer = Trainer::new(task.clone(), config.clone(), demos)?;
    let mut rows = Vec::with_capacity(config.epochs);
    while trainer.epoch < config.epochs {
        let m = trainer.run_epoch()?;
        on_epoch(&trainer, &m)?;
        rows.push(m);
    }
    Ok((trainer.agent, rows))
}

/// `approx:<mm>` or `interact`.
pub fn parse_grasp_mode(s: &str) -> Result<GraspMode> {
    let s = s.trim().to_ascii_lowercase();
    if s == "interact" {
        return Ok(GraspMode::Interact);
    }
    let mm = s
        .strip_prefix("approx:")
        .or_else(|| s.strip_prefix("approx@"))
        .and_then(|v| v.trim_end_matches("mm").parse::<f64>().ok())
        .filter(|v| *v > 0.0)
        .ok_or_else(|| RlError::Config(format!("unknown grasp mode '{s}' (approx:<mm> or interact)")))?;
    Ok(GraspMode::approx_mm(mm))
}

pub fn grasp_mode_label(mode: &GraspMode) -> String {
    match mode {
        GraspMode::Interact => "Interact".into(),
        GraspMode::Approx { threshold_m } => format!("Approx@{}mm", threshold_m * 1e3),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossEvalCell {
    /// Success rate of each policy.
    pub per_policy: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation across policies.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossEvalMatrix {
    pub train_modes: Vec<GraspMode>,
    pub test_modes: Vec<GraspMode>,
    /// `cells[train][test]`.
    pub cells: Vec<Vec<CrossEvalCell>>,
}

impl CrossEvalMatrix {
    /// Rows are training modes, columns test modes; cells are
    /// `mean±std` success in percent with one decimal.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("train\\test");
        for m in &self.test_modes {
            out.push(',');
            out.push_str(&grasp_mode_label(m));
        }
        out.push('\n');
        for (mode, row) in self.train_modes.iter().zip(&self.cells) {
            out.push_str(&grasp_mode_label(mode));
            for c in row {
                out.push_str(&format!(",{:.1}±{:.1}", 100.0 * c.mean, 100.0 * c.std));
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluates every policy set under every test grasp mode.
pub fn cross_eval_matrix(
    task: &TaskConfig,
    policies: &[(GraspMode, Vec<Agent>)],
    test_modes: &[GraspMode],
    episodes: usize,
    seed_base: u64,
) -> Result<CrossEvalMatrix> {
    let mut cells = Vec::with_capacity(policies.len());
    for (_, agents) in policies {
        let mut row = Vec::with_capacity(test_modes.len());
        for mode in test_modes {
            let mut env = TaskEnv::new(task.clone().with_grasp_mode(*mode))?;
            let per_policy = agents
                .iter()
                .map(|a| evaluate(&mut env, &mut Greedy(a), episodes, seed_base).map(|r| r.success_rate))
                .collect::<Result<Vec<f64>>>()?;
            let n = per_policy.len().max(1) as f64;
            let mean = per_policy.iter().sum::<f64>() / n;
            let std = (per_policy.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            row.push(CrossEvalCell { per_policy, mean, std });
        }
        cells.push(row);
    }
    Ok(CrossEvalMatrix {
        train_modes: policies.iter().map(|(m, _)| *m).collect(),
        test_modes: test_modes.to_vec(),
        cells,
    })
}
