//! Sequential-impulse velocity solver for contacts and pinch grasps.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::body::RigidBody;
use super::collision::ContactPoint;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverParams {
    pub iterations: usize,
    /// Fraction of penetration removed per substep.
    pub baumgarte: f64,
    /// Penetration tolerated without correction, meters.
    pub slop: f64,
    /// Cap on the separation speed introduced by position correction.
    pub max_correction_speed: f64,
    /// Approach speed below which restitution is ignored.
    pub restitution_threshold: f64,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            iterations: 10,
            baumgarte: 0.2,
            slop: 1e-4,
            max_correction_speed: 0.1,
            restitution_threshold: 0.01,
        }
    }
}

/// Accumulated impulses on one contact after solving.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactImpulse {
    pub normal: f64,
    pub tangent: Vector2<f64>,
    pub mu: f64,
}

/// Bounded weld between a body point and a driven jaw frame. Linear impulse
/// along `axis` (the pinch direction) and angular impulse across it are
/// unbounded; the rest is capped by the friction budget.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PinchRow {
    pub body: usize,
    /// Anchor point minus body center, world frame.
    pub r: Vector3<f64>,
    pub axis: Vector3<f64>,
    pub target_v: Vector3<f64>,
    pub target_w: Vector3<f64>,
    pub force_cap: f64,
    pub torque_cap: f64,
    pub lambda: Vector3<f64>,
    pub lambda_ang: Vector3<f64>,
    pub slipped: bool,
    pub slipped_ang: bool,
}

struct Row {
    a: usize,
    b: usize,
    ra: Vector3<f64>,
    rb: Vector3<f64>,
    n: Vector3<f64>,
    t: [Vector3<f64>; 2],
    k_n: f64,
    k_t: [f64; 2],
    target: f64,
    mu: f64,
    lambda_n: f64,
    lambda_t: Vector2<f64>,
}

struct Vel {
    v: Vec<Vector3<f64>>,
    w: Vec<Vector3<f64>>,
    inv_m: Vec<f64>,
    inv_i: Vec<Matrix3<f64>>,
}

impl Vel {
    fn point(&self, i: usize, r: &Vector3<f64>) -> Vector3<f64> {
        self.v[i] + self.w[i].cross(r)
    }

    fn apply(&mut self, i: usize, r: &Vector3<f64>, p: &Vector3<f64>) {
        if self.inv_m[i] > 0.0 {
            self.v[i] += p * self.inv_m[i];
            self.w[i] += self.inv_i[i] * r.cross(p);
        }
    }

    fn eff(&self, i: usize, r: &Vector3<f64>, d: &Vector3<f64>) -> f64 {
        if self.inv_m[i] == 0.0 {
            return 0.0;
        }
        let rd = r.cross(d);
        self.inv_m[i] + rd.dot(&(self.inv_i[i] * rd))
    }
}

fn tangent_basis(n: &Vector3<f64>) -> [Vector3<f64>; 2] {
    let helper = if n.x.abs() < 0.57 { Vector3::x() } else { Vector3::y() };
    let t1 = n.cross(&helper).normalize();
    [t1, n.cross(&t1)]
}

/// Mixes per-body coefficients into a per-contact friction value.
pub fn combine_friction(a: f64, b: f64) -> f64 {
    (a * b).sqrt()
}

/// Resolve contact and pinch velocities in place. Returns the accumulated
/// impulse of every contact, in input order.
pub(crate) fn solve(
    bodies: &mut [RigidBody],
    contacts: &[ContactPoint],
    pinches: &mut [PinchRow],
    params: &SolverParams,
    dt: f64,
) -> Vec<ContactImpulse> {
    let mut vel = Vel {
        v: bodies.iter().map(|b| b.linear_velocity).collect(),
        w: bodies.iter().map(|b| b.angular_velocity).collect(),
        inv_m: bodies.iter().map(RigidBody::inverse_mass).collect(),
        inv_i: bodies.iter().map(RigidBody::inverse_inertia_world).collect(),
    };

    let mut rows: Vec<Row> = contacts
        .iter()
        .map(|c| {
            let (ba, bb) = (&bodies[c.body_a], &bodies[c.body_b]);
            let ra = c.point - ba.pose.translation.vector;
            let rb = c.point - bb.pose.translation.vector;
            let n = c.normal;
            let t = tangent_basis(&n);
            let k = |d: &Vector3<f64>| {
                let s = vel.eff(c.body_a, &ra, d) + vel.eff(c.body_b, &rb, d);
                if s > 0.0 {
                    1.0 / s
                } else {
                    0.0
                }
            };
            let vn0 = n.dot(&(vel.point(c.body_b, &rb) - vel.point(c.body_a, &ra)));
            let e = ba.material.restitution.max(bb.material.restitution);
            let stiffness = ba.material.contact_stiffness.min(bb.material.contact_stiffness);
            let bounce = vn0 < -params.restitution_threshold && e > 0.0;
            let target = if c.depth < 0.0 {
                let gap = -c.depth;
                if bounce && vn0 * dt + gap < 0.0 {
                    -e * vn0
                } else {
                    -gap / dt
                }
            } else {
                let push = ((params.baumgarte * stiffness).min(1.0) / dt * (c.depth - params.slop).max(0.0))
                    .min(params.max_correction_speed);
                if bounce {
                    push.max(-e * vn0)
                } else {
                    push
                }
            };
            Row {
                a: c.body_a,
                b: c.body_b,
                ra,
                rb,
                n,
                t,
                k_n: k(&n),
                k_t: [k(&t[0]), k(&t[1])],
                target,
                mu: combine_friction(ba.material.friction_mu, bb.material.friction_mu),
                lambda_n: 0.0,
                lambda_t: Vector2::zeros(),
            }
        })
        .collect();

    let pinch_k: Vec<(Matrix3<f64>, Matrix3<f64>)> = pinches
        .iter()
        .map(|p| {
            let i = p.body;
            let rx = p.r.cross_matrix();
            let k = Matrix3::identity() * vel.inv_m[i] - rx * vel.inv_i[i] * rx;
            let k_lin = k.try_inverse().unwrap_or_else(Matrix3::zeros);
            let k_ang = vel.inv_i[i].try_inverse().unwrap_or_else(Matrix3::zeros);
            (k_lin, k_ang)
        })
        .collect();

    for _ in 0..params.iterations {
        for (p, (k_lin, k_ang)) in pinches.iter_mut().zip(&pinch_k) {
            let i = p.body;
            let dv = p.target_v - vel.point(i, &p.r);
            let total = p.lambda + k_lin * dv;
            let along = p.axis * p.axis.dot(&total);
            let mut perp = total - along;
            let norm = perp.norm();
            p.slipped = norm > p.force_cap;
            if p.slipped {
                perp *= p.force_cap / norm;
            }
            let clamped = along + perp;
            let delta = clamped - p.lambda;
            p.lambda = clamped;
            vel.apply(i, &p.r, &delta);

            let dw = p.target_w - vel.w[i];
            let total = p.lambda_ang + k_ang * dw;
            let twist = p.axis.dot(&total);
            p.slipped_ang = twist.abs() > p.torque_cap;
            let twist_clamped = twist.clamp(-p.torque_cap, p.torque_cap);
            let clamped = total + p.axis * (twist_clamped - twist);
            let delta = clamped - p.lambda_ang;
            p.lambda_ang = clamped;
            if vel.inv_m[i] > 0.0 {
                vel.w[i] += vel.inv_i[i] * delta;
            }
        }
        for row in rows.iter_mut() {
            let rel = vel.point(row.b, &row.rb) - vel.point(row.a, &row.ra);
            // Friction, bounded by the current normal impulse.
            let mut lt = row.lambda_t;
            for k in 0..2 {
                lt[k] -= row.t[k].dot(&rel) * row.k_t[k];
            }
            let limit = row.mu * row.lambda_n;
            if lt.norm() > limit {
                lt *= if lt.norm() > 0.0 { limit / lt.norm() } else { 0.0 };
            }
            let d = lt - row.lambda_t;
            row.lambda_t = lt;
            let p = row.t[0] * d[0] + row.t[1] * d[1];
            vel.apply(row.a, &row.ra, &-p);
            vel.apply(row.b, &row.rb, &p);

            let rel = vel.point(row.b, &row.rb) - vel.point(row.a, &row.ra);
            let vn = row.n.dot(&rel);
            let new = (row.lambda_n + (row.target - vn) * row.k_n).max(0.0);
            let d = new - row.lambda_n;
            row.lambda_n = new;
            let p = row.n * d;
            vel.apply(row.a, &row.ra, &-p);
            vel.apply(row.b, &row.rb, &p);
        }
    }

    // The last normal update may have lowered the cone radius below the
    // accumulated friction; rescale so the returned impulses stay inside it.
    for row in rows.iter_mut() {
        let limit = row.mu * row.lambda_n;
        let norm = row.lambda_t.norm();
        if norm > limit {
            let keep = if norm > 0.0 { limit / norm } else { 0.0 };
            let d = row.lambda_t * keep - row.lambda_t;
            row.lambda_t *= keep;
            let p = row.t[0] * d[0] + row.t[1] * d[1];
            vel.apply(row.a, &row.ra, &-p);
            vel.apply(row.b, &row.rb, &p);
        }
    }

    for (i, b) in bodies.iter_mut().enumerate() {
        if b.is_dynamic() {
            b.linear_velocity = vel.v[i];
            b.angular_velocity = vel.w[i];
        }
    }
    rows.iter()
        .map(|r| ContactImpulse {
            normal: r.lambda_n,
            tangent: r.lambda_t,
            mu: r.mu,
        })
        .collect()
}
