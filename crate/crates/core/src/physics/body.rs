use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::kinematics::Pose;

/// Analytic collision primitive, expressed in its part frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    /// Half-space below the local xy plane; the surface normal is local +z.
    Plane,
    Box { half_extents: Vector3<f64> },
    /// Segment `a`-`b` swept by a sphere of `radius`.
    Capsule {
        radius: f64,
        a: Vector3<f64>,
        b: Vector3<f64>,
    },
    /// Cylinder along local z centered at the origin.
    Cylinder { radius: f64, half_height: f64 },
}

impl Shape {
    pub fn name(&self) -> &'static str {
        match self {
            Shape::Plane => "plane",
            Shape::Box { .. } => "box",
            Shape::Capsule { .. } => "capsule",
            Shape::Cylinder { .. } => "cylinder",
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Shape::Plane => true,
            Shape::Box { half_extents } => half_extents.iter().all(|h| *h > 0.0),
            Shape::Capsule { radius, a, b } => *radius > 0.0 && (a - b).norm() > 0.0,
            Shape::Cylinder { radius, half_height } => *radius > 0.0 && *half_height > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(SimError::Contract(format!("{} collider has non-positive dimensions", self.name())))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColliderPart {
    pub local: Pose,
    pub shape: Shape,
}

/// One or more primitives rigidly attached to a body. A capsule chain or a
/// box frame is a collider with several parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Collider {
    pub parts: Vec<ColliderPart>,
}

impl Collider {
    pub fn single(shape: Shape) -> Self {
        Self {
            parts: vec![ColliderPart {
                local: Pose::identity(),
                shape,
            }],
        }
    }

    pub fn plane() -> Self {
        Self::single(Shape::Plane)
    }

    pub fn cuboid(half_extents: Vector3<f64>) -> Self {
        Self::single(Shape::Box { half_extents })
    }

    pub fn capsule(radius: f64, a: Vector3<f64>, b: Vector3<f64>) -> Self {
        Self::single(Shape::Capsule { radius, a, b })
    }

    pub fn cylinder(radius: f64, half_height: f64) -> Self {
        Self::single(Shape::Cylinder { radius, half_height })
    }

    /// Consecutive capsules through `points`.
    pub fn capsule_chain(radius: f64, points: &[Vector3<f64>]) -> Self {
        Self {
            parts: points
                .windows(2)
                .map(|w| ColliderPart {
                    local: Pose::identity(),
                    shape: Shape::Capsule {
                        radius,
                        a: w[0],
                        b: w[1],
                    },
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.parts.is_empty() {
            return Err(SimError::Contract("collider has no parts".into()));
        }
        self.parts.iter().try_for_each(|p| p.shape.validate())
    }

    /// Volume-weighted center and inertia tensor about that center for a
    /// uniform-density body of total `mass`. Capsules are treated as rods of
    /// their swept cylinder.
    pub fn mass_properties(&self, mass: f64) -> (Vector3<f64>, Matrix3<f64>) {
        struct Piece {
            volume: f64,
            center: Vector3<f64>,
            // Unit-mass inertia about the piece center, in body frame.
            inertia: Matrix3<f64>,
        }
        let mut pieces = Vec::new();
        for part in &self.parts {
            let r = part.local.rotation.to_rotation_matrix().into_inner();
            let (volume, center_local, i_local) = match &part.shape {
                Shape::Plane => continue,
                Shape::Box { half_extents: h } => {
                    let [x, y, z] = [2.0 * h.x, 2.0 * h.y, 2.0 * h.z];
                    (
                        x * y * z,
                        Vector3::zeros(),
                        Matrix3::from_diagonal(&Vector3::new(y * y + z * z, x * x + z * z, x * x + y * y))
                            / 12.0,
                    )
                }
                Shape::Cylinder { radius, half_height } => {
                    let len = 2.0 * half_height;
                    let perp = (3.0 * radius * radius + len * len) / 12.0;
                    (
                        std::f64::consts::PI * radius * radius * len,
                        Vector3::zeros(),
                        Matrix3::from_diagonal(&Vector3::new(perp, perp, 0.5 * radius * radius)),
                    )
                }
                Shape::Capsule { radius, a, b } => {
                    let axis = b - a;
                    let len = axis.norm();
                    let u = axis / len;
                    let perp = (3.0 * radius * radius + len * len) / 12.0;
                    let along = 0.5 * radius * radius;
                    let i = Matrix3::identity() * perp + (u * u.transpose()) * (along - perp);
                    (std::f64::consts::PI * radius * radius * len, 0.5 * (a + b), i)
                }
            };
            pieces.push(Piece {
                volume,
                center: part.local.translation.vector + r * center_local,
                inertia: r * i_local * r.transpose(),
            });
        }
        let total: f64 = pieces.iter().map(|p| p.volume).sum();
        if pieces.is_empty() || total <= 0.0 {
            return (Vector3::zeros(), Matrix3::identity() * mass * 1e-6);
        }
        let com = pieces.iter().map(|p| p.center * p.volume).sum::<Vector3<f64>>() / total;
        let mut inertia = Matrix3::zeros();
        for p in &pieces {
            let m = mass * p.volume / total;
            let d = p.center - com;
            inertia += m * p.inertia + m * (Matrix3::identity() * d.dot(&d) - d * d.transpose());
        }
        (com, inertia)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialParams {
    pub friction_mu: f64,
    pub restitution: f64,
    /// Scales the position-correction rate of contacts involving this body.
    pub contact_stiffness: f64,
}

impl Default for MaterialParams {
    fn default() -> Self {
        Self {
            friction_mu: 0.5,
            restitution: 0.0,
            contact_stiffness: 1.0,
        }
    }
}

impl MaterialParams {
    pub fn with_friction(mu: f64) -> Self {
        Self {
            friction_mu: mu,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.friction_mu < 0.0 || !(0.0..=1.0).contains(&self.restitution) || self.contact_stiffness < 0.0 {
            return Err(SimError::Contract("material parameters out of range".into()));
        }
        Ok(())
    }
}

/// A rigid body. `mass == 0` marks a static or kinematic body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigidBody {
    pub name: String,
    pub pose: Pose,
    pub linear_velocity: Vector3<f64>,
    pub angular_velocity: Vector3<f64>,
    pub mass: f64,
    /// Body-frame inertia about the body origin (which is the center of mass).
    pub inertia: Matrix3<f64>,
    pub collider: Collider,
    pub material: MaterialParams,
    pub kinematic: bool,
}

impl RigidBody {
    pub fn new_static(name: impl Into<String>, pose: Pose, collider: Collider, material: MaterialParams) -> Self {
        Self {
            name: name.into(),
            pose,
            linear_velocity: Vector3::zeros(),
            angular_velocity: Vector3::zeros(),
            mass: 0.0,
            inertia: Matrix3::zeros(),
            collider,
            material,
            kinematic: false,
        }
    }

    pub fn new_kinematic(name: impl Into<String>, pose: Pose, collider: Collider, material: MaterialParams) -> Self {
        Self {
            kinematic: true,
            ..Self::new_static(name, pose, collider, material)
        }
    }

    /// Dynamic body whose inertia is derived from the collider. The collider
    /// must already be centered on its center of mass.
    pub fn new_dynamic(
        name: impl Into<String>,
        pose: Pose,
        collider: Collider,
        material: MaterialParams,
        mass: f64,
    ) -> Self {
        let (_, inertia) = collider.mass_properties(mass);
        Self {
            mass,
            inertia,
            ..Self::new_static(name, pose, collider, material)
        }
    }

    pub fn is_dynamic(&self) -> bool {
        self.mass > 0.0 && !self.kinematic
    }

    pub fn inverse_mass(&self) -> f64 {
        if self.is_dynamic() {
            1.0 / self.mass
        } else {
            0.0
        }
    }

    pub fn inverse_inertia_world(&self) -> Matrix3<f64> {
        if !self.is_dynamic() {
            return Matrix3::zeros();
        }
        let r = self.pose.rotation.to_rotation_matrix().into_inner();
        let inv = self.inertia.try_inverse().unwrap_or_else(Matrix3::zeros);
        r * inv * r.transpose()
    }

    pub fn velocity_at(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.linear_velocity + self.angular_velocity.cross(&(point - self.pose.translation.vector))
    }

    pub fn validate(&self) -> Result<()> {
        self.collider.validate()?;
        self.material.validate()?;
        if self.mass < 0.0 {
            return Err(SimError::Contract(format!("body {} has negative mass", self.name)));
        }
        if self.is_dynamic() && self.inertia.symmetric_eigenvalues().iter().any(|e| *e <= 0.0) {
            return Err(SimError::Contract(format!("body {} inertia is not positive definite", self.name)));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.pose.translation.vector.iter().all(|v| v.is_finite())
            && self.pose.rotation.coords.iter().all(|v| v.is_finite())
            && self.linear_velocity.iter().all(|v| v.is_finite())
            && self.angular_velocity.iter().all(|v| v.is_finite())
    }

    /// World-frame axis-aligned bounds of the collider (planes excluded).
    pub fn aabb(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let mut out: Option<(Vector3<f64>, Vector3<f64>)> = None;
        for part in &self.collider.parts {
            if let Some((lo, hi)) = super::collision::part_aabb(&(self.pose * part.local), &part.shape) {
                out = Some(match out {
                    None => (lo, hi),
                    Some((a, b)) => (a.inf(&lo), b.sup(&hi)),
                });
            }
        }
        out
    }

    pub fn kinetic_energy(&self) -> f64 {
        if !self.is_dynamic() {
            return 0.0;
        }
        let r = self.pose.rotation.to_rotation_matrix().into_inner();
        let i_world = r * self.inertia * r.transpose();
        0.5 * self.mass * self.linear_velocity.norm_squared()
            + 0.5 * self.angular_velocity.dot(&(i_world * self.angular_velocity))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_inertia_matches_closed_form() {
        let c = Collider::cuboid(Vector3::new(0.01, 0.02, 0.03));
        let (com, i) = c.mass_properties(2.0);
        assert!(com.norm() < 1e-15);
        let expected = 2.0 * (0.04f64.powi(2) + 0.06f64.powi(2)) / 12.0;
        assert!((i[(0, 0)] - expected).abs() < 1e-15);
    }

    #[test]
    fn offset_parts_shift_center() {
        let mut c = Collider::cuboid(Vector3::new(0.01, 0.01, 0.01));
        c.parts.push(ColliderPart {
            local: Pose::translation(0.04, 0.0, 0.0),
            shape: Shape::Box {
                half_extents: Vector3::new(0.01, 0.01, 0.01),
            },
        });
        let (com, _) = c.mass_properties(1.0);
        assert!((com - Vector3::new(0.02, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(Collider::cuboid(Vector3::new(0.0, 1.0, 1.0)).validate().is_err());
        assert!(Collider::capsule(0.001, Vector3::zeros(), Vector3::zeros()).validate().is_err());
        let mut b = RigidBody::new_dynamic(
            "b",
            Pose::identity(),
            Collider::cuboid(Vector3::new(0.01, 0.01, 0.01)),
            MaterialParams::default(),
            1.0,
        );
        assert!(b.validate().is_ok());
        b.mass = -1.0;
        assert!(b.validate().is_err());
    }
}
