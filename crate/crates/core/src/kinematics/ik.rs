use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::chain::{jacobian_unchecked, tool_pose_unchecked};
use super::{pose_error, ChainSpec, JointType, JointVector, Pose};
use crate::error::{Result, SimError};

/// Damped least-squares solver settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IkConfig {
    /// Damping far from the target. Within 1 mm / 1 mrad it shrinks with the
    /// residual (down to 1e-3 of this value) so the last steps are nearly
    /// Gauss-Newton, which matters close to the RCM singularity.
    pub damping: f64,
    pub max_iterations: usize,
    pub max_step_revolute: f64,
    pub max_step_prismatic: f64,
    /// Iteration stops once both position (m) and orientation (rad) errors are below this.
    pub tolerance: f64,
    /// A solution whose residual exceeds this is reported as unreachable.
    pub accept: f64,
}

impl Default for IkConfig {
    fn default() -> Self {
        Self {
            damping: 1e-3,
            max_iterations: 200,
            max_step_revolute: 0.2,
            max_step_prismatic: 0.02,
            tolerance: 1e-10,
            accept: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IkSolution {
    pub q: JointVector,
    pub iterations: usize,
    /// Max of the position and orientation error norms.
    pub residual: f64,
}

/// Damped least-squares IK on the full tool pose, projecting onto the joint
/// limits after every update.
pub fn inverse_kinematics(
    chain: &ChainSpec,
    target: &Pose,
    q_seed: &JointVector,
    config: &IkConfig,
) -> Result<IkSolution> {
    chain.check_dims(q_seed)?;
    solve(chain, q_seed, config, &[true; 6], &[], |q| {
        let e = pose_error(&tool_pose_unchecked(chain, q), target);
        e.iter().copied().collect()
    })
}

/// Position-only IK; joints listed in `locked` keep their seed value.
pub fn inverse_kinematics_position(
    chain: &ChainSpec,
    target: &nalgebra::Vector3<f64>,
    q_seed: &JointVector,
    locked: &[usize],
    config: &IkConfig,
) -> Result<IkSolution> {
    chain.check_dims(q_seed)?;
    solve(
        chain,
        q_seed,
        config,
        &[true, true, true, false, false, false],
        locked,
        |q| {
            let p = tool_pose_unchecked(chain, q).translation.vector;
            let d = target - p;
            vec![d.x, d.y, d.z, 0.0, 0.0, 0.0]
        },
    )
}

const DAMPING_RESIDUAL: f64 = 1e-3;

fn residual_of(e: &[f64], rows: &[bool; 6]) -> f64 {
    let pos: f64 = (0..3).filter(|&i| rows[i]).map(|i| e[i] * e[i]).sum::<f64>().sqrt();
    let rot: f64 = (3..6).filter(|&i| rows[i]).map(|i| e[i] * e[i]).sum::<f64>().sqrt();
    pos.max(rot)
}

fn solve(
    chain: &ChainSpec,
    q_seed: &JointVector,
    config: &IkConfig,
    rows: &[bool; 6],
    locked: &[usize],
    error: impl Fn(&[f64]) -> Vec<f64>,
) -> Result<IkSolution> {
    let n = chain.dof();
    let row_ids: Vec<usize> = (0..6).filter(|&i| rows[i]).collect();
    let free: Vec<usize> = (0..n).filter(|i| !locked.contains(i)).collect();
    let mut q: Vec<f64> = q_seed
        .values
        .iter()
        .zip(&chain.limits)
        .map(|(v, [lo, hi])| v.clamp(*lo, *hi))
        .collect();

    let mut e = error(&q);
    let mut residual = residual_of(&e, rows);
    let mut best = (q.clone(), residual);
    let mut iterations = 0;

    while iterations < config.max_iterations && residual > config.tolerance {
        iterations += 1;
        let full = jacobian_unchecked(chain, &q);
        let m = row_ids.len();
        let j = DMatrix::from_fn(m, free.len(), |r, c| full[(row_ids[r], free[c])]);
        let ev = DVector::from_fn(m, |r, _| e[row_ids[r]]);
        let lambda = config.damping * (residual / DAMPING_RESIDUAL).clamp(1e-3, 1.0);
        let a = &j * j.transpose() + DMatrix::identity(m, m) * (lambda * lambda);
        let Some(y) = a.cholesky().map(|c| c.solve(&ev)) else {
            break;
        };
        let mut dq = j.transpose() * y;

        // Uniform scaling keeps the step direction while bounding each joint.
        let mut scale: f64 = 1.0;
        for (k, &i) in free.iter().enumerate() {
            let cap = match chain.joint_types[i] {
                JointType::Revolute => config.max_step_revolute,
                JointType::Prismatic => config.max_step_prismatic,
            };
            if dq[k].abs() > cap {
                scale = scale.min(cap / dq[k].abs());
            }
        }
        dq *= scale;
        for (k, &i) in free.iter().enumerate() {
            let [lo, hi] = chain.limits[i];
            q[i] = (q[i] + dq[k]).clamp(lo, hi);
        }
        e = error(&q);
        residual = residual_of(&e, rows);
        if residual < best.1 {
            best = (q.clone(), residual);
        }
    }

    let (q, residual) = best;
    let q = JointVector {
        values: q,
        arm: chain.arm,
    };
    if residual > config.accept {
        return Err(SimError::UnreachableTarget {
            residual,
            iterations,
            best: q,
        });
    }
    Ok(IkSolution {
        q,
        iterations,
        residual,
    })
}
