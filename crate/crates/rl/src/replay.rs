//! Whole-episode replay with hindsight goal relabeling.

use std::collections::VecDeque;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use surgisim::envs::TransitionRecord;

use crate::error::{Result, RlError};

/// One stored episode of `len()` transitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    /// `len() + 1` observations.
    pub obs: Vec<Vec<f64>>,
    /// `len() + 1` achieved goals.
    pub achieved: Vec<Vec<f64>>,
    /// Desired goal per transition.
    pub desired: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    /// True where the episode ended for a reason other than the time limit.
    pub terminal: Vec<bool>,
    pub is_demo: bool,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Builds an episode from consecutive env records; `horizon` separates
    /// time-limit ends from true terminations.
    pub fn from_records(records: &[TransitionRecord], horizon: usize, is_demo: bool) -> Self {
        let mut ep = Episode {
            obs: Vec::with_capacity(records.len() + 1),
            achieved: Vec::with_capacity(records.len() + 1),
            desired: Vec::with_capacity(records.len()),
            actions: Vec::with_capacity(records.len()),
            rewards: Vec::with_capacity(records.len()),
            terminal: Vec::with_capacity(records.len()),
            is_demo,
        };
        for r in records {
            ep.obs.push(r.obs.observation.clone());
            ep.achieved.push(r.obs.achieved_goal.clone());
            ep.desired.push(r.obs.desired_goal.clone());
            ep.actions.push(r.action.clone());
            ep.rewards.push(r.reward);
            ep.terminal.push(r.done && r.t + 1 < horizon);
        }
        if let Some(last) = records.last() {
            ep.obs.push(last.next_obs.observation.clone());
            ep.achieved.push(last.next_obs.achieved_goal.clone());
        }
        ep
    }
}

/// A sampled minibatch, one row per transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub obs: Array2<f64>,
    pub goal: Array2<f64>,
    pub action: Array2<f64>,
    pub reward: Array1<f64>,
    pub next_obs: Array2<f64>,
    /// Achieved goal after the transition.
    pub next_achieved: Array2<f64>,
    /// 1 for true terminations.
    pub terminal: Array1<f64>,
    pub relabeled: Vec<bool>,
    pub is_demo: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reward.is_empty()
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Batch) -> Batch {
        let stack = |a: &Array2<f64>, b: &Array2<f64>| ndarray::concatenate![ndarray::Axis(0), a.view(), b.view()];
        let stack1 = |a: &Array1<f64>, b: &Array1<f64>| ndarray::concatenate![ndarray::Axis(0), a.view(), b.view()];
        Batch {
            obs: stack(&self.obs, &other.obs),
            goal: stack(&self.goal, &other.goal),
            action: stack(&self.action, &other.action),
            reward: stack1(&self.reward, &other.reward),
            next_obs: stack(&self.next_obs, &other.next_obs),
            next_achieved: stack(&self.next_achieved, &other.next_achieved),
            terminal: stack1(&self.terminal, &other.terminal),
            relabeled: self.relabeled.iter().chain(&other.relabeled).copied().collect(),
            is_demo: self.is_demo.iter().chain(&other.is_demo).copied().collect(),
        }
    }
}

/// Reward for an achieved goal against a desired goal.
pub type RewardFn<'a> = dyn Fn(&[f64], &[f64]) -> surgisim::Result<f64> + 'a;

/// Ring buffer of whole episodes, bounded by a transition count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    episodes: VecDeque<Episode>,
    /// Running transition offset of each stored episode.
    starts: VecDeque<usize>,
    next_start: usize,
    capacity: usize,
    transitions: usize,
    /// Relabeled goals per original goal.
    pub k_future: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, k_future: usize) -> Self {
        Self {
            episodes: VecDeque::new(),
            starts: VecDeque::new(),
            next_start: 0,
            capacity,
            transitions: 0,
            k_future,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn transitions(&self) -> usize {
        self.transitions
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions == 0
    }

    /// Stores an episode, evicting the oldest whole episodes to make room.
    pub fn push(&mut self, episode: Episode) -> Result<()> {
        if episode.len() > self.capacity {
            return Err(RlError::Config(format!(
                "episode of {} transitions exceeds buffer capacity {}",
                episode.len(),
                self.capacity
            )));
        }
        if episode.is_empty() {
            return Ok(());
        }
        while self.transitions + episode.len() > self.capacity {
            let old = self.episodes.pop_front().expect("buffer over capacity holds episodes");
            self.starts.pop_front();
            self.transitions -= old.len();
        }
        self.transitions += episode.len();
        self.starts.push_back(self.next_start);
        self.next_start += episode.len();
        self.episodes.push_back(episode);
        Ok(())
    }

    /// Uniform transitions; each is relabeled with probability
    /// `k/(k+1)` to an achieved goal from a later step of its episode, with
    /// the reward recomputed by `reward`. `reward = None` disables relabeling.
    pub fn her_sample<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        reward: Option<&RewardFn>,
        rng: &mut R,
    ) -> Result<Batch> {
        if self.is_empty() {
            return Err(RlError::EmptyBuffer);
        }
        let first = self.episodes.front().expect("non-empty buffer");
        let (od, gd, ad) = (first.obs[0].len(), first.desired[0].len(), first.actions[0].len());
        let mut b = Batch {
            obs: Array2::zeros((batch_size, od)),
            goal: Array2::zeros((batch_size, gd)),
            action: Array2::zeros((batch_size, ad)),
            reward: Array1::zeros(batch_size),
            next_obs: Array2::zeros((batch_size, od)),
            next_achieved: Array2::zeros((batch_size, gd)),
            terminal: Array1::zeros(batch_size),
            relabeled: vec![false; batch_size],
            is_demo: vec![false; batch_size],
        };
        let future_p = if reward.is_some() {
            self.k_future as f64 / (self.k_future as f64 + 1.0)
        } else {
            0.0
        };
        for row in 0..batch_size {
            let (ep, t) = self.locate(rng.random_range(0..self.transitions));
            let relabel = future_p > 0.0 && rng.random::<f64>() < future_p;
            let copy = |dst: &mut Array2<f64>, src: &[f64]| {
                dst.row_mut(row).iter_mut().zip(src).for_each(|(d, s)| *d = *s);
            };
            copy(&mut b.obs, &ep.obs[t]);
            copy(&mut b.action, &ep.actions[t]);
            copy(&mut b.next_obs, &ep.obs[t + 1]);
            copy(&mut b.next_achieved, &ep.achieved[t + 1]);
            b.terminal[row] = if ep.terminal[t] { 1.0 } else { 0.0 };
            b.is_demo[row] = ep.is_demo;
            if relabel {
                let future = rng.random_range(t + 1..=ep.len());
                let goal = &ep.achieved[future];
                copy(&mut b.goal, goal);
                b.reward[row] = reward.expect("relabeling needs a reward")(&ep.achieved[t + 1], goal)?;
                b.relabeled[row] = true;
            } else {
                copy(&mut b.goal, &ep.desired[t]);
                b.reward[row] = ep.rewards[t];
            }
        }
        Ok(b)
    }

    fn locate(&self, k: usize) -> (&Episode, usize) {
        let absolute = self.starts[0] + k;
        let i = self.starts.partition_point(|s| *s <= absolute) - 1;
        (&self.episodes[i], absolute - self.starts[i])
    }
}
