use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::body::{Collider, MaterialParams, RigidBody};
use super::collision::{body_gap, body_pair_contacts, ContactPoint};
use super::grasp::{point_distance, GraspMode, GraspPhase, GraspState, JawGeometry};
use super::solver::{self, ContactImpulse, PinchRow, SolverParams};
use crate::error::{Result, SimError};
use crate::kinematics::{clamp_joints, ArmModel, JointVector, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub gravity: Vector3<f64>,
    pub dt_sub: f64,
    pub substeps_per_control: usize,
    pub solver: SolverParams,
    /// Gap below which contacts enter the solver speculatively.
    pub speculative_margin: f64,
    /// Gap at which a pad counts as touching a body.
    pub touch_tolerance: f64,
    pub grasp_mode: GraspMode,
    pub lift_threshold: f64,
    pub stabilize_substeps: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            gravity: Vector3::new(0.0, 0.0, -9.81),
            dt_sub: 0.002,
            substeps_per_control: 5,
            solver: SolverParams::default(),
            speculative_margin: 0.002,
            touch_tolerance: 2e-4,
            grasp_mode: GraspMode::Interact,
            lift_threshold: 0.005,
            stabilize_substeps: 20,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt_sub > 0.0) || self.substeps_per_control == 0 {
            return Err(SimError::Config("dt_sub and substeps_per_control must be positive".into()));
        }
        self.grasp_mode.validate()
    }
}

/// Jaw attached to a PSM instrument.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Jaw {
    pub geometry: JawGeometry,
    /// Current half-angle, radians.
    pub opening: f64,
    pub pads: [usize; 2],
    pub grasp: GraspState,
    /// Last jaw command; negative closes.
    pub command: f64,
}

/// A kinematically driven arm, optionally carrying a jaw.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Instrument {
    pub name: String,
    pub arm: ArmModel,
    pub jaw: Option<Jaw>,
}

/// Per-arm command for one control step.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmCommand {
    pub q: JointVector,
    /// Jaw command: `>= 0` opens, `< 0` closes. Ignored for arms without a jaw.
    pub jaw: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct World {
    pub bodies: Vec<RigidBody>,
    pub instruments: Vec<Instrument>,
    pub config: WorldConfig,
    /// Height of the surface objects rest on; used by the lift check.
    pub support_height: f64,
    /// Bodies an Approx-mode jaw may attach to.
    pub graspable: Vec<usize>,
    pub substep_count: u64,
    pub valid: bool,
    /// Contact impulses from the most recent substep, in contact order.
    #[serde(skip)]
    pub last_impulses: Vec<ContactImpulse>,
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            bodies: Vec::new(),
            instruments: Vec::new(),
            config,
            support_height: 0.0,
            graspable: Vec::new(),
            substep_count: 0,
            valid: true,
            last_impulses: Vec::new(),
        })
    }

    pub fn add_body(&mut self, body: RigidBody) -> Result<usize> {
        body.validate()?;
        self.bodies.push(body);
        Ok(self.bodies.len() - 1)
    }

    pub fn body_index(&self, name: &str) -> Option<usize> {
        self.bodies.iter().position(|b| b.name == name)
    }

    /// Adds an instrument; a jaw creates two kinematic pad bodies.
    pub fn add_instrument(&mut self, name: &str, arm: ArmModel, jaw: Option<JawGeometry>) -> Result<usize> {
        let jaw = match jaw {
            None => None,
            Some(geometry) => {
                let tool = arm.tool_pose_world();
                let poses = geometry.pad_poses(geometry.max_half_angle);
                let mut pads = [0; 2];
                for (k, local) in poses.iter().enumerate() {
                    pads[k] = self.add_body(RigidBody::new_kinematic(
                        format!("{name}_pad{k}"),
                        tool * local,
                        Collider::cuboid(geometry.pad_half_extents()),
                        MaterialParams::with_friction(1.0),
                    ))?;
                }
                Some(Jaw {
                    geometry,
                    opening: geometry.max_half_angle,
                    pads,
                    grasp: GraspState::default(),
                    command: 1.0,
                })
            }
        };
        self.instruments.push(Instrument {
            name: name.to_string(),
            arm,
            jaw,
        });
        Ok(self.instruments.len() - 1)
    }

    pub fn tool_pose(&self, instrument: usize) -> Pose {
        self.instruments[instrument].arm.tool_pose_world()
    }

    pub fn grasp_state(&self, instrument: usize) -> Option<&GraspState> {
        self.instruments[instrument].jaw.as_ref().map(|j| &j.grasp)
    }

    /// Sets joints (clamped) and jaw opening directly and re-poses the pads.
    pub fn set_instrument_state(&mut self, instrument: usize, q: &JointVector, opening: Option<f64>) -> Result<()> {
        let inst = &mut self.instruments[instrument];
        inst.arm.chain.check_dims(q)?;
        inst.arm.current_q = clamp_joints(&inst.arm.chain, q);
        let tool = inst.arm.tool_pose_world();
        if let Some(jaw) = inst.jaw.as_mut() {
            if let Some(o) = opening {
                jaw.opening = o.clamp(0.0, jaw.geometry.max_half_angle);
            }
            let poses = jaw.geometry.pad_poses(jaw.opening);
            for (k, pad) in jaw.pads.iter().enumerate() {
                let b = &mut self.bodies[*pad];
                b.pose = tool * poses[k];
                b.linear_velocity = Vector3::zeros();
                b.angular_velocity = Vector3::zeros();
            }
        }
        Ok(())
    }

    /// Put `body` into the jaw's grasp directly, as if it had just been taken.
    pub fn force_grasp(&mut self, instrument: usize, body: usize) -> Result<()> {
        let tool = self.tool_pose(instrument);
        let mode = self.config.grasp_mode;
        let body_pose = self.bodies[body].pose;
        let jaw = self.instruments[instrument]
            .jaw
            .as_mut()
            .ok_or_else(|| SimError::Contract("instrument has no jaw".into()))?;
        jaw.command = -1.0;
        jaw.grasp.phase = match mode {
            GraspMode::Approx { .. } => GraspPhase::Attached {
                body,
                offset: tool.inverse() * body_pose,
            },
            GraspMode::Interact => {
                let anchor = tool.translation.vector;
                GraspPhase::PinchHold {
                    body,
                    pads: jaw.pads,
                    anchor_tool: Vector3::zeros(),
                    anchor_body: body_pose.inverse_transform_point(&anchor.into()).coords,
                    relative: tool.rotation.inverse() * body_pose.rotation,
                }
            }
        };
        Ok(())
    }

    fn free_dynamic(&self) -> Vec<bool> {
        let mut held = vec![false; self.bodies.len()];
        for inst in &self.instruments {
            if let Some(GraspPhase::Attached { body, .. }) = inst.jaw.as_ref().map(|j| &j.grasp.phase) {
                held[*body] = true;
            }
        }
        self.bodies
            .iter()
            .zip(held)
            .map(|(b, h)| b.is_dynamic() && !h)
            .collect()
    }

    fn pair_excluded(&self, a: usize, b: usize) -> bool {
        self.instruments.iter().filter_map(|i| i.jaw.as_ref()).any(|jaw| match &jaw.grasp.phase {
            GraspPhase::PinchHold { body, pads, .. } => {
                (pads.contains(&a) && *body == b) || (pads.contains(&b) && *body == a)
            }
            _ => false,
        })
    }

    fn contacts_with_margin(&self, margin: f64) -> Result<Vec<ContactPoint>> {
        let free = self.free_dynamic();
        let aabbs: Vec<_> = self.bodies.iter().map(RigidBody::aabb).collect();
        let mut out = Vec::new();
        for a in 0..self.bodies.len() {
            for b in (a + 1)..self.bodies.len() {
                if !(free[a] || free[b]) || self.pair_excluded(a, b) {
                    continue;
                }
                if let (Some((la, ha)), Some((lb, hb))) = (&aabbs[a], &aabbs[b]) {
                    if (0..3).any(|i| la[i] > hb[i] + margin || lb[i] > ha[i] + margin) {
                        continue;
                    }
                }
                for c in body_pair_contacts(&self.bodies[a], &self.bodies[b], margin)? {
                    out.push(ContactPoint {
                        body_a: a,
                        body_b: b,
                        point: c.point,
                        normal: c.normal,
                        depth: c.depth,
                    });
                }
            }
        }
        Ok(out)
    }

    /// Touching or penetrating contacts between pairs involving a dynamic body.
    pub fn detect_contacts(&self) -> Result<Vec<ContactPoint>> {
        Ok(self
            .contacts_with_margin(0.0)?
            .into_iter()
            .filter(|c| c.depth >= 0.0)
            .collect())
    }

    /// One solver pass over `contacts` with no pinch constraints.
    pub fn solve_impulses(&mut self, contacts: &[ContactPoint]) -> Vec<ContactImpulse> {
        solver::solve(&mut self.bodies, contacts, &mut [], &self.config.solver, self.config.dt_sub)
    }

    /// Advance one control step: every instrument moves from its current
    /// joints to its target over the substeps with a smooth (zero end
    /// velocity) profile.
    pub fn step_control(&mut self, commands: &[ArmCommand]) -> Result<()> {
        if !self.valid {
            return Err(SimError::Contract("world was flagged invalid after divergence".into()));
        }
        if commands.len() != self.instruments.len() {
            return Err(SimError::DimensionMismatch {
                expected: self.instruments.len(),
                got: commands.len(),
            });
        }
        let mut plans = Vec::with_capacity(commands.len());
        for (inst, cmd) in self.instruments.iter_mut().zip(commands) {
            inst.arm.chain.check_dims(&cmd.q)?;
            if !cmd.q.is_finite() || !cmd.jaw.is_finite() {
                return Err(SimError::Contract("non-finite arm command".into()));
            }
            if let Some(jaw) = inst.jaw.as_mut() {
                jaw.command = cmd.jaw;
            }
            plans.push((inst.arm.current_q.clone(), clamp_joints(&inst.arm.chain, &cmd.q)));
        }
        let n = self.config.substeps_per_control;
        for k in 1..=n {
            let u = k as f64 / n as f64;
            let s = u * u * (3.0 - 2.0 * u);
            let targets: Vec<JointVector> = plans
                .iter()
                .map(|(from, to)| JointVector {
                    values: from.values.iter().zip(&to.values).map(|(a, b)| a + (b - a) * s).collect(),
                    arm: from.arm,
                })
                .collect();
            self.substep(&targets)?;
        }
        Ok(())
    }

    /// Advance one substep with instruments moving to `targets` (one per instrument).
    pub fn substep(&mut self, targets: &[JointVector]) -> Result<()> {
        let dt = self.config.dt_sub;
        let mode = self.config.grasp_mode;

        // Instrument motion for this substep.
        let mut tool_motion = Vec::with_capacity(self.instruments.len());
        for (idx, target) in targets.iter().enumerate() {
            let inst = &mut self.instruments[idx];
            let start = inst.arm.tool_pose_world();
            inst.arm.current_q = clamp_joints(&inst.arm.chain, target);
            let end = inst.arm.tool_pose_world();
            let v = (end.translation.vector - start.translation.vector) / dt;
            let w = (end.rotation * start.rotation.inverse()).scaled_axis() / dt;
            tool_motion.push((start, end, v, w));
            if let Some(jaw) = inst.jaw.as_mut() {
                let holding = !jaw.grasp.phase.is_free() && matches!(mode, GraspMode::Interact);
                if jaw.command >= 0.0 {
                    jaw.opening = (jaw.opening + jaw.geometry.speed * dt).min(jaw.geometry.max_half_angle);
                } else if !holding {
                    jaw.opening = (jaw.opening - jaw.geometry.speed * dt).max(0.0);
                }
                let poses = jaw.geometry.pad_poses(jaw.opening);
                for (k, pad) in jaw.pads.iter().enumerate() {
                    set_kinematic_target(&mut self.bodies[*pad], &(end * poses[k]), dt);
                }
            }
        }

        // Release on open; attached bodies follow the tool.
        for (idx, inst) in self.instruments.iter_mut().enumerate() {
            let Some(jaw) = inst.jaw.as_mut() else { continue };
            if jaw.command >= 0.0 && !jaw.grasp.phase.is_free() {
                jaw.grasp = GraspState::default();
            }
            if let GraspPhase::Attached { body, offset } = &jaw.grasp.phase {
                let end = tool_motion[idx].1;
                set_kinematic_target(&mut self.bodies[*body], &(end * offset), dt);
            }
        }

        let attached = self.attached_bodies();
        for (i, b) in self.bodies.iter_mut().enumerate() {
            if b.is_dynamic() && !attached[i] {
                b.linear_velocity += self.config.gravity * dt;
            }
        }

        let contacts = self.contacts_with_margin(self.config.speculative_margin)?;
        let mut pinches = self.pinch_rows(&tool_motion);
        // Attached bodies are driven, so hide their mass from the solver.
        let saved: Vec<(usize, f64)> = attached
            .iter()
            .enumerate()
            .filter(|(_, a)| **a)
            .map(|(i, _)| (i, std::mem::replace(&mut self.bodies[i].mass, 0.0)))
            .collect();
        self.last_impulses = solver::solve(&mut self.bodies, &contacts, &mut pinches, &self.config.solver, dt);
        for (i, m) in saved {
            self.bodies[i].mass = m;
        }

        for b in self.bodies.iter_mut() {
            if b.is_dynamic() || b.kinematic {
                integrate(b, dt);
            }
        }

        self.substep_count += 1;
        if let Some(i) = self.bodies.iter().position(|b| !b.is_finite()) {
            self.valid = false;
            return Err(SimError::Diverged {
                substep: self.substep_count,
                body: self.bodies[i].name.clone(),
            });
        }

        self.reanchor_slipping(&pinches, &tool_motion);
        self.update_grasps();
        Ok(())
    }

    fn attached_bodies(&self) -> Vec<bool> {
        let mut out = vec![false; self.bodies.len()];
        for inst in &self.instruments {
            if let Some(GraspPhase::Attached { body, .. }) = inst.jaw.as_ref().map(|j| &j.grasp.phase) {
                out[*body] = true;
            }
        }
        out
    }

    fn pinch_rows(&self, motion: &[(Pose, Pose, Vector3<f64>, Vector3<f64>)]) -> Vec<PinchRow> {
        let beta = self.config.solver.baumgarte / self.config.dt_sub;
        let mut rows = Vec::new();
        for (idx, inst) in self.instruments.iter().enumerate() {
            let Some(jaw) = inst.jaw.as_ref() else { continue };
            let GraspPhase::PinchHold {
                body,
                anchor_tool,
                anchor_body,
                relative,
                ..
            } = &jaw.grasp.phase
            else {
                continue;
            };
            let (start, _, v, w) = &motion[idx];
            let b = &self.bodies[*body];
            // Drift is measured before this substep's motion; the tool's own
            // displacement enters through the velocity target only.
            let body_point = b.pose * nalgebra::Point3::from(*anchor_body);
            let tool_point = start * nalgebra::Point3::from(*anchor_tool);
            let r = body_point.coords - b.pose.translation.vector;
            let tool_point_v = v + w.cross(&(tool_point.coords - start.translation.vector));
            let rot_err = (start.rotation * relative * b.pose.rotation.inverse()).scaled_axis();
            let mu = (jaw_friction(self, jaw) * b.material.friction_mu).sqrt();
            let budget = 2.0 * mu * jaw.geometry.pinch_force * self.config.dt_sub;
            rows.push(PinchRow {
                body: *body,
                r,
                axis: start.rotation * Vector3::y(),
                target_v: tool_point_v + (tool_point - body_point) * beta,
                target_w: w + rot_err * beta,
                force_cap: budget,
                torque_cap: budget * jaw.geometry.patch_radius,
                lambda: Vector3::zeros(),
                lambda_ang: Vector3::zeros(),
                slipped: false,
                slipped_ang: false,
            });
        }
        rows
    }

    /// A saturated pinch slides: the anchor moves with the body instead of
    /// pulling it back.
    fn reanchor_slipping(&mut self, pinches: &[PinchRow], motion: &[(Pose, Pose, Vector3<f64>, Vector3<f64>)]) {
        let mut it = pinches.iter();
        for (idx, inst) in self.instruments.iter_mut().enumerate() {
            let Some(jaw) = inst.jaw.as_mut() else { continue };
            let GraspPhase::PinchHold {
                body,
                anchor_tool,
                anchor_body,
                relative,
                ..
            } = &mut jaw.grasp.phase
            else {
                continue;
            };
            let Some(row) = it.next() else { return };
            let end = motion[idx].1;
            let pose = self.bodies[*body].pose;
            if row.slipped {
                // Sliding happens in the pad plane; the pinch axis (tool y) stays put.
                let p = pose * nalgebra::Point3::from(*anchor_body);
                let moved = end.inverse_transform_point(&p).coords;
                *anchor_tool = Vector3::new(moved.x, anchor_tool.y, moved.z);
            }
            if row.slipped_ang {
                *relative = end.rotation.inverse() * pose.rotation;
            }
        }
    }

    fn update_grasps(&mut self) {
        let mode = self.config.grasp_mode;
        let tol = self.config.touch_tolerance;
        let lift = self.support_height + self.config.lift_threshold;
        let k_needed = self.config.stabilize_substeps;
        for idx in 0..self.instruments.len() {
            let tool = self.instruments[idx].arm.tool_pose_world();
            let Some(jaw) = self.instruments[idx].jaw.as_ref() else { continue };
            let closing = jaw.command < 0.0;
            let pads = jaw.pads;
            let mut phase = jaw.grasp.phase.clone();
            match (&phase, mode) {
                (GraspPhase::Free, GraspMode::Approx { threshold_m }) if closing => {
                    let taken: Vec<usize> = self.held_bodies();
                    let candidate = self
                        .graspable
                        .iter()
                        .copied()
                        .filter(|b| !taken.contains(b))
                        .map(|b| (b, point_distance(&self.bodies[b], &tool.translation.vector)))
                        .filter(|(_, d)| *d < threshold_m)
                        .min_by(|x, y| x.1.total_cmp(&y.1));
                    if let Some((body, _)) = candidate {
                        phase = GraspPhase::Attached {
                            body,
                            offset: tool.inverse() * self.bodies[body].pose,
                        };
                    }
                }
                (GraspPhase::Free, GraspMode::Interact) if closing => {
                    if let Some(body) = self.pinched_body(pads, tol) {
                        let anchor = self.pinch_center(pads, body, tol);
                        let b = &self.bodies[body];
                        phase = GraspPhase::PinchHold {
                            body,
                            pads,
                            anchor_tool: tool.inverse_transform_point(&anchor.into()).coords,
                            anchor_body: b.pose.inverse_transform_point(&anchor.into()).coords,
                            relative: tool.rotation.inverse() * b.pose.rotation,
                        };
                    }
                }
                (GraspPhase::PinchHold { body, .. }, _) => {
                    let slack = 4.0 * tol + 1e-4;
                    let lost = pads
                        .iter()
                        .any(|p| body_gap(&self.bodies[*p], &self.bodies[*body], slack).is_none());
                    if lost {
                        phase = GraspPhase::Free;
                    }
                }
                _ => {}
            }

            let lowest = phase
                .body()
                .and_then(|b| self.bodies[b].aabb())
                .map(|(lo, _)| lo.z);
            let jaw = self.instruments[idx].jaw.as_mut().expect("checked above");
            if phase != jaw.grasp.phase && phase.body() != jaw.grasp.phase.body() {
                jaw.grasp.lifted_substeps = 0;
            }
            jaw.grasp.phase = phase;
            match lowest {
                Some(z) if z >= lift => jaw.grasp.lifted_substeps += 1,
                _ => jaw.grasp.lifted_substeps = 0,
            }
            jaw.grasp.stabilized = !jaw.grasp.phase.is_free() && jaw.grasp.lifted_substeps >= k_needed;
        }
    }

    fn held_bodies(&self) -> Vec<usize> {
        self.instruments
            .iter()
            .filter_map(|i| i.jaw.as_ref().and_then(|j| j.grasp.phase.body()))
            .collect()
    }

    /// A dynamic body touched by both pads, if any.
    fn pinched_body(&self, pads: [usize; 2], tol: f64) -> Option<usize> {
        (0..self.bodies.len())
            .filter(|&b| self.bodies[b].is_dynamic() && !pads.contains(&b))
            .find(|&b| {
                pads.iter()
                    .all(|p| body_gap(&self.bodies[*p], &self.bodies[b], tol).is_some())
            })
    }

    fn pinch_center(&self, pads: [usize; 2], body: usize, tol: f64) -> Vector3<f64> {
        let mut sum = Vector3::zeros();
        let mut n = 0.0;
        for p in pads {
            if let Ok(cs) = body_pair_contacts(&self.bodies[p], &self.bodies[body], tol) {
                for c in cs {
                    sum += c.point;
                    n += 1.0;
                }
            }
        }
        if n > 0.0 {
            sum / n
        } else {
            self.bodies[body].pose.translation.vector
        }
    }

    /// Whether the jaw of `instrument` holds a body whose lowest point is at
    /// least `height_threshold` above the support surface, with the grasp kept
    /// and the body above the configured lift threshold for the configured
    /// number of consecutive substeps.
    pub fn check_stabilized(&self, instrument: usize, height_threshold: f64) -> bool {
        let Some(jaw) = self.instruments[instrument].jaw.as_ref() else {
            return false;
        };
        let Some(body) = jaw.grasp.phase.body() else {
            return false;
        };
        let lowest = self.bodies[body].aabb().map(|(lo, _)| lo.z).unwrap_or(f64::NEG_INFINITY);
        jaw.grasp.lifted_substeps >= self.config.stabilize_substeps
            && lowest >= self.support_height + height_threshold
    }

    /// Kinetic plus gravitational potential energy of dynamic bodies.
    pub fn mechanical_energy(&self) -> f64 {
        self.bodies
            .iter()
            .filter(|b| b.is_dynamic())
            .map(|b| b.kinetic_energy() - b.mass * self.config.gravity.dot(&b.pose.translation.vector))
            .sum()
    }
}

fn jaw_friction(world: &World, jaw: &Jaw) -> f64 {
    world.bodies[jaw.pads[0]].material.friction_mu
}

/// Velocity that carries a driven body to `target` in one substep.
fn set_kinematic_target(body: &mut RigidBody, target: &Pose, dt: f64) {
    body.linear_velocity = (target.translation.vector - body.pose.translation.vector) / dt;
    body.angular_velocity = (target.rotation * body.pose.rotation.inverse()).scaled_axis() / dt;
}

fn integrate(body: &mut RigidBody, dt: f64) {
    body.pose.translation.vector += body.linear_velocity * dt;
    let dq = UnitQuaternion::from_scaled_axis(body.angular_velocity * dt);
    body.pose.rotation = UnitQuaternion::new_normalize((dq * body.pose.rotation).into_inner());
}
