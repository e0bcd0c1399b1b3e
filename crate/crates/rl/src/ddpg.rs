//! Goal-conditioned DDPG actor-critic.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RlError};
use crate::nn::{Activation, Adam, Grads, Mlp};
use crate::normalizer::Normalizer;
use crate::replay::Batch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Fraction of the target network kept per soft update.
    pub polyak: f64,
    /// Penalty on squared actions in the actor loss.
    pub action_l2: f64,
    /// Weight of the Q-filtered cloning term.
    pub bc_weight: f64,
    /// Bounds applied to critic targets.
    pub q_range: (f64, f64),
}

impl AgentConfig {
    /// Target range for rewards in `[r_min, r_max]` under discount `gamma`.
    pub fn q_range_for(gamma: f64, r_min: f64, r_max: f64) -> (f64, f64) {
        (r_min.min(0.0) / (1.0 - gamma), r_max.max(0.0) / (1.0 - gamma))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Losses {
    pub critic: f64,
    pub actor: f64,
    pub bc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub actor: Mlp,
    pub critic: Mlp,
    pub target_actor: Mlp,
    pub target_critic: Mlp,
    actor_opt: Adam,
    critic_opt: Adam,
    pub obs_norm: Normalizer,
    pub goal_norm: Normalizer,
    pub config: AgentConfig,
    pub action_dim: usize,
}

/// Q-filtered behavior cloning over a batch.
///
/// Rows count only when `mask` is set and the critic prefers the demo action
/// (`q_demo > q_pi`). Returns the summed squared error and its gradient with
/// respect to `pi`.
pub fn bc_q_filter_loss(
    pi: &Array2<f64>,
    a_demo: &Array2<f64>,
    q_pi: &Array1<f64>,
    q_demo: &Array1<f64>,
    mask: &[bool],
) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(pi.raw_dim());
    let mut loss = 0.0;
    for i in 0..pi.nrows() {
        if mask[i] && q_demo[i] > q_pi[i] {
            for j in 0..pi.ncols() {
                let d = pi[[i, j]] - a_demo[[i, j]];
                loss += d * d;
                grad[[i, j]] = 2.0 * d;
            }
        }
    }
    (loss, grad)
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, goal_dim: usize, action_dim: usize, config: AgentConfig, rng: &mut R) -> Self {
        let mut sizes = vec![obs_dim + goal_dim];
        sizes.extend(&config.hidden);
        sizes.push(action_dim);
        let actor = Mlp::new(&sizes, Activation::Tanh, rng);
        sizes[0] += action_dim;
        *sizes.last_mut().unwrap() = 1;
        let critic = Mlp::new(&sizes, Activation::Identity, rng);
        Self {
            actor_opt: Adam::new(&actor, config.actor_lr),
            critic_opt: Adam::new(&critic, config.critic_lr),
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            actor,
            critic,
            obs_norm: Normalizer::new(obs_dim),
            goal_norm: Normalizer::new(goal_dim),
            config,
            action_dim,
        }
    }

    /// Normalized `[obs, goal]` rows.
    pub fn policy_input(&self, obs: ArrayView2<f64>, goal: ArrayView2<f64>) -> Array2<f64> {
        let (od, gd) = (obs.ncols(), goal.ncols());
        let mut x = Array2::zeros((obs.nrows(), od + gd));
        for i in 0..obs.nrows() {
            let mut row = x.row_mut(i);
            let row = row.as_slice_mut().expect("standard layout");
            self.obs_norm.normalize_into(obs.row(i).as_slice().expect("standard layout"), &mut row[..od]);
            self.goal_norm.normalize_into(goal.row(i).as_slice().expect("standard layout"), &mut row[od..]);
        }
        x
    }

    /// Deterministic action in `[-1, 1]`.
    pub fn act(&self, obs: &[f64], goal: &[f64]) -> Vec<f64> {
        let o = ArrayView2::from_shape((1, obs.len()), obs).expect("row");
        let g = ArrayView2::from_shape((1, goal.len()), goal).expect("row");
        self.actor.predict(self.policy_input(o, g).view()).row(0).to_vec()
    }

    fn critic_input(x: &Array2<f64>, a: &Array2<f64>) -> Array2<f64> {
        concatenate![Axis(1), x.view(), a.view()]
    }

    /// Clipped TD targets from the target networks.
    pub fn td_targets(&self, batch: &Batch) -> Array1<f64> {
        let x2 = self.policy_input(batch.next_obs.view(), batch.goal.view());
        let a2 = self.target_actor.predict(x2.view());
        let q2 = self.target_critic.predict(Self::critic_input(&x2, &a2).view());
        let (lo, hi) = self.config.q_range;
        let mut y = Array1::zeros(batch.len());
        for i in 0..batch.len() {
            let boot = self.config.gamma * (1.0 - batch.terminal[i]) * q2[[i, 0]];
            y[i] = (batch.reward[i] + boot).clamp(lo, hi);
        }
        y
    }

    /// Mean squared TD error and its parameter gradient.
    pub fn critic_loss(&self, batch: &Batch, y: &Array1<f64>) -> (f64, Grads) {
        let x = self.policy_input(batch.obs.view(), batch.goal.view());
        let trace = self.critic.forward(Self::critic_input(&x, &batch.action).view());
        let q = trace.output().column(0).to_owned();
        let n = batch.len() as f64;
        let err = &q - y;
        let loss = err.mapv(|e| e * e).sum() / n;
        let d = (err * (2.0 / n)).insert_axis(Axis(1));
        let (grads, _) = self.critic.backward(&trace, &d);
        (loss, grads)
    }

    /// Actor loss `-mean Q(s, π) + l2·mean(π²) + bc·BC` and its gradient.
    /// Returns `(total, bc, grads)`.
    pub fn actor_loss(&self, batch: &Batch) -> (f64, f64, Grads) {
        let x = self.policy_input(batch.obs.view(), batch.goal.view());
        let actor_trace = self.actor.forward(x.view());
        let pi = actor_trace.output().clone();
        let critic_trace = self.critic.forward(Self::critic_input(&x, &pi).view());
        let q_pi = critic_trace.output().column(0).to_owned();
        let n = batch.len() as f64;
        let elems = (batch.len() * self.action_dim) as f64;

        let dq = Array2::from_elem((batch.len(), 1), -1.0 / n);
        let (_, d_in) = self.critic.backward(&critic_trace, &dq);
        let mut d_pi = d_in.slice(s![.., x.ncols()..]).to_owned();
        d_pi.scaled_add(2.0 * self.config.action_l2 / elems, &pi);
        let mut loss = -q_pi.mean().unwrap_or(0.0) + self.config.action_l2 * pi.mapv(|v| v * v).sum() / elems;

        let mut bc = 0.0;
        if self.config.bc_weight > 0.0 && batch.is_demo.iter().any(|d| *d) {
            let q_demo = self
                .critic
                .predict(Self::critic_input(&x, &batch.action).view())
                .column(0)
                .to_owned();
            let (l, g) = bc_q_filter_loss(&pi, &batch.action, &q_pi, &q_demo, &batch.is_demo);
            bc = l;
            loss += self.config.bc_weight * l;
            d_pi.scaled_add(self.config.bc_weight, &g);
        }
        let (grads, _) = self.actor.backward(&actor_trace, &d_pi);
        (loss, bc, grads)
    }

    /// One critic and one actor step. Nothing changes if any loss or
    /// gradient is non-finite.
    pub fn update(&mut self, batch: &Batch) -> Result<Losses> {
        let y = self.td_targets(batch);
        let (critic_loss, critic_grads) = self.critic_loss(batch, &y);
        if !critic_loss.is_finite() || !critic_grads.is_finite() {
            return Err(RlError::NonFiniteUpdate { what: "critic loss" });
        }
        let (actor_loss, bc, actor_grads) = self.actor_loss(batch);
        if !actor_loss.is_finite() || !actor_grads.is_finite() {
            return Err(RlError::NonFiniteUpdate { what: "actor loss" });
        }
        self.critic_opt.step(&mut self.critic, &critic_grads);
        self.actor_opt.step(&mut self.actor, &actor_grads);
        Ok(Losses {
            critic: critic_loss,
            actor: actor_loss,
            bc,
        })
    }

    pub fn update_targets(&mut self) {
        let tau = 1.0 - self.config.polyak;
        self.target_actor.soft_update(&self.actor, tau);
        self.target_critic.soft_update(&self.critic, tau);
    }

    /// Critic value of explicit actions (for diagnostics and tests).
    pub fn q_values(&self, obs: ArrayView2<f64>, goal: ArrayView2<f64>, action: &Array2<f64>) -> Array1<f64> {
        let x = self.policy_input(obs, goal);
        self.critic.predict(Self::critic_input(&x, action).view()).column(0).to_owned()
    }
}
