//! Goal-conditioned off-policy learning for the simulator tasks: a small
//! dense-network core, DDPG, hindsight relabeling and demonstration cloning.

pub mod ddpg;
pub mod error;
pub mod nn;
pub mod normalizer;
pub mod replay;
pub mod train;

pub use ddpg::{bc_q_filter_loss, Agent, AgentConfig, Losses};
pub use error::{Result, RlError};
pub use replay::{Batch, Episode, ReplayBuffer};
pub use train::{
    cross_eval_matrix, evaluate, train, Algo, Checkpoint, CrossEvalMatrix, EpochMetrics, EvalResult, Policy,
    TrainConfig, Trainer,
};
