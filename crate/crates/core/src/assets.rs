//! Manipulated objects built from analytic primitives, and seeded scene
//! spawning with rejection-sampled placement.

use std::f64::consts::PI;

use nalgebra::{Isometry3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::kinematics::Pose;
use crate::physics::{Collider, ColliderPart, MaterialParams, RigidBody, Shape, World, WorldConfig};

pub const NEEDLE_SEGMENTS: usize = 8;

/// Axis-aligned region in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Workspace {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] - 1e-12 && p[i] <= self.max[i] + 1e-12)
    }

    pub fn clamp(&self, p: &Vector3<f64>) -> Vector3<f64> {
        p.sup(&self.min).inf(&self.max)
    }

    pub fn center(&self) -> Vector3<f64> {
        0.5 * (self.min + self.max)
    }

    /// Uniform sample; degenerate axes return their single value.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vector3<f64> {
        Vector3::from_fn(|i, _| self.min[i] + rng.random::<f64>() * (self.max[i] - self.min[i]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectSpec {
    Needle {
        arc_length: f64,
        wire_radius: f64,
        mass: f64,
        material: MaterialParams,
    },
    GauzePad {
        half_extents: Vector3<f64>,
        mass: f64,
        material: MaterialParams,
    },
    /// Square block with a square through-hole, built from four walls.
    Block {
        outer_half: f64,
        hole_half: f64,
        height: f64,
        mass: f64,
        material: MaterialParams,
    },
    Cube {
        half: f64,
        /// Kinematic cubes are moved by the task, not by contacts.
        kinematic: bool,
        material: MaterialParams,
    },
    PegBoard {
        rows: usize,
        cols: usize,
        peg_height: f64,
        peg_radius: f64,
        spacing: f64,
        base_half: Vector3<f64>,
    },
    Tray {
        inner_half: f64,
        wall_height: f64,
        wall_thickness: f64,
    },
}

impl ObjectSpec {
    pub fn default_needle() -> Self {
        ObjectSpec::Needle {
            arc_length: 0.040,
            wire_radius: 0.0008,
            mass: 0.0002,
            material: MaterialParams::with_friction(0.5),
        }
    }

    pub fn default_gauze() -> Self {
        ObjectSpec::GauzePad {
            half_extents: Vector3::new(0.003, 0.003, 0.0015),
            mass: 0.0005,
            material: MaterialParams::with_friction(0.3),
        }
    }

    pub fn default_block() -> Self {
        ObjectSpec::Block {
            outer_half: 0.005,
            hole_half: 0.0025,
            height: 0.006,
            mass: 0.001,
            material: MaterialParams::with_friction(0.5),
        }
    }

    pub fn default_pegboard() -> Self {
        ObjectSpec::PegBoard {
            rows: 2,
            cols: 3,
            peg_height: 0.015,
            peg_radius: 0.0015,
            spacing: 0.03,
            base_half: Vector3::new(0.045, 0.03, 0.0025),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: &[f64]| v.iter().all(|x| *x > 0.0);
        let ok = match self {
            ObjectSpec::Needle {
                arc_length,
                wire_radius,
                mass,
                ..
            } => positive(&[*arc_length, *wire_radius, *mass]),
            ObjectSpec::GauzePad { half_extents, mass, .. } => positive(half_extents.as_slice()) && *mass > 0.0,
            ObjectSpec::Block {
                outer_half,
                hole_half,
                height,
                mass,
                ..
            } => positive(&[*outer_half, *hole_half, *height, *mass]) && hole_half < outer_half,
            ObjectSpec::Cube { half, .. } => *half > 0.0,
            ObjectSpec::PegBoard {
                rows,
                cols,
                peg_height,
                peg_radius,
                spacing,
                base_half,
            } => *rows > 0 && *cols > 0 && positive(&[*peg_height, *peg_radius, *spacing]) && positive(base_half.as_slice()),
            ObjectSpec::Tray {
                inner_half,
                wall_height,
                wall_thickness,
            } => positive(&[*inner_half, *wall_height, *wall_thickness]),
        };
        if ok {
            Ok(())
        } else {
            Err(SimError::Config(format!("object spec has invalid dimensions: {self:?}")))
        }
    }
}

/// Point on the needle arc, in the needle body frame. `fraction` runs from
/// the tip (0) to the tail (1). Returns the point and the unit tangent.
pub fn needle_arc_point(arc_length: f64, fraction: f64) -> (Vector3<f64>, Vector3<f64>) {
    let r = arc_length / PI;
    let phi = fraction * PI;
    let centroid = Vector3::new(0.0, 2.0 * r / PI, 0.0);
    (
        Vector3::new(r * phi.cos(), r * phi.sin(), 0.0) - centroid,
        Vector3::new(-phi.sin(), phi.cos(), 0.0),
    )
}

/// Semicircular needle lying in its local xy plane. The body origin is the
/// arc centroid; the arc center sits at `(0, -2R/π, 0)`.
pub fn build_needle(arc_length: f64) -> Result<RigidBody> {
    match ObjectSpec::default_needle() {
        ObjectSpec::Needle {
            wire_radius,
            mass,
            material,
            ..
        } => needle_body(arc_length, wire_radius, mass, material),
        _ => unreachable!("default needle spec"),
    }
}

fn needle_body(arc_length: f64, wire_radius: f64, mass: f64, material: MaterialParams) -> Result<RigidBody> {
    if !(arc_length > 0.0) {
        return Err(SimError::Config("needle arc length must be positive".into()));
    }
    let points: Vec<Vector3<f64>> = (0..=NEEDLE_SEGMENTS)
        .map(|k| needle_arc_point(arc_length, k as f64 / NEEDLE_SEGMENTS as f64).0)
        .collect();
    let collider = Collider::capsule_chain(wire_radius, &points);
    let mut body = RigidBody::new_dynamic("needle", Pose::identity(), collider, material, mass);
    // Inertia about the arc centroid (the body origin) rather than the
    // chord-weighted capsule center.
    let (com, inertia) = body.collider.mass_properties(mass);
    let d = com;
    body.inertia = inertia + mass * (nalgebra::Matrix3::identity() * d.dot(&d) - d * d.transpose());
    Ok(body)
}

/// Static base box plus `rows × cols` cylindrical pegs on a grid centered on
/// the origin; the base top is at `2 * base_half.z`.
pub fn build_pegboard(rows: usize, cols: usize, peg_height: f64, spacing: f64) -> Result<Vec<RigidBody>> {
    let ObjectSpec::PegBoard {
        peg_radius, base_half, ..
    } = ObjectSpec::default_pegboard()
    else {
        unreachable!("default pegboard spec")
    };
    pegboard_bodies(rows, cols, peg_height, peg_radius, spacing, base_half)
}

/// Peg axis positions (at the base top) for a board centered on `origin`.
pub fn peg_positions(rows: usize, cols: usize, spacing: f64, base_top: f64) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(Vector3::new(
                (j as f64 - (cols as f64 - 1.0) / 2.0) * spacing,
                (i as f64 - (rows as f64 - 1.0) / 2.0) * spacing,
                base_top,
            ));
        }
    }
    out
}

fn pegboard_bodies(
    rows: usize,
    cols: usize,
    peg_height: f64,
    peg_radius: f64,
    spacing: f64,
    base_half: Vector3<f64>,
) -> Result<Vec<RigidBody>> {
    ObjectSpec::PegBoard {
        rows,
        cols,
        peg_height,
        peg_radius,
        spacing,
        base_half,
    }
    .validate()?;
    let material = MaterialParams::with_friction(0.5);
    let top = 2.0 * base_half.z;
    let mut out = vec![RigidBody::new_static(
        "board_base",
        Pose::translation(0.0, 0.0, base_half.z),
        Collider::cuboid(base_half),
        material,
    )];
    for (k, p) in peg_positions(rows, cols, spacing, top).iter().enumerate() {
        out.push(RigidBody::new_static(
            format!("peg{k}"),
            Pose::translation(p.x, p.y, top + 0.5 * peg_height),
            Collider::cylinder(peg_radius, 0.5 * peg_height),
            material,
        ));
    }
    Ok(out)
}

fn block_collider(outer_half: f64, hole_half: f64, height: f64) -> Collider {
    let wall = outer_half - hole_half;
    let hz = 0.5 * height;
    let part = |x: f64, y: f64, hx: f64, hy: f64| ColliderPart {
        local: Pose::translation(x, y, 0.0),
        shape: Shape::Box {
            half_extents: Vector3::new(hx, hy, hz),
        },
    };
    let c = hole_half + 0.5 * wall;
    Collider {
        parts: vec![
            part(c, 0.0, 0.5 * wall, outer_half),
            part(-c, 0.0, 0.5 * wall, outer_half),
            part(0.0, c, hole_half, 0.5 * wall),
            part(0.0, -c, hole_half, 0.5 * wall),
        ],
    }
}

/// Static tray walls around a square floor region centered on the origin.
fn tray_bodies(inner_half: f64, wall_height: f64, wall_thickness: f64) -> Vec<RigidBody> {
    let t = 0.5 * wall_thickness;
    let h = 0.5 * wall_height;
    let span = inner_half + wall_thickness;
    let material = MaterialParams::with_friction(0.5);
    [
        (inner_half + t, 0.0, t, span),
        (-(inner_half + t), 0.0, t, span),
        (0.0, inner_half + t, inner_half, t),
        (0.0, -(inner_half + t), inner_half, t),
    ]
    .iter()
    .enumerate()
    .map(|(k, (x, y, hx, hy))| {
        RigidBody::new_static(
            format!("tray_wall{k}"),
            Pose::translation(*x, *y, h),
            Collider::cuboid(Vector3::new(*hx, *hy, h)),
            material,
        )
    })
    .collect()
}

/// Build the bodies for one object spec with identity placement.
pub fn build_object(name: &str, spec: &ObjectSpec) -> Result<Vec<RigidBody>> {
    spec.validate()?;
    let mut bodies = match spec {
        ObjectSpec::Needle {
            arc_length,
            wire_radius,
            mass,
            material,
        } => vec![needle_body(*arc_length, *wire_radius, *mass, *material)?],
        ObjectSpec::GauzePad {
            half_extents,
            mass,
            material,
        } => vec![RigidBody::new_dynamic(
            name,
            Pose::identity(),
            Collider::cuboid(*half_extents),
            *material,
            *mass,
        )],
        ObjectSpec::Block {
            outer_half,
            hole_half,
            height,
            mass,
            material,
        } => vec![RigidBody::new_dynamic(
            name,
            Pose::identity(),
            block_collider(*outer_half, *hole_half, *height),
            *material,
            *mass,
        )],
        ObjectSpec::Cube {
            half,
            kinematic,
            material,
        } => {
            let collider = Collider::cuboid(Vector3::repeat(*half));
            vec![if *kinematic {
                RigidBody::new_kinematic(name, Pose::identity(), collider, *material)
            } else {
                RigidBody::new_static(name, Pose::identity(), collider, *material)
            }]
        }
        ObjectSpec::PegBoard {
            rows,
            cols,
            peg_height,
            peg_radius,
            spacing,
            base_half,
        } => pegboard_bodies(*rows, *cols, *peg_height, *peg_radius, *spacing, *base_half)?,
        ObjectSpec::Tray {
            inner_half,
            wall_height,
            wall_thickness,
        } => tray_bodies(*inner_half, *wall_height, *wall_thickness),
    };
    if bodies.len() == 1 {
        bodies[0].name = name.to_string();
    }
    Ok(bodies)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Placement {
    /// Object origin at `position` (z measured from the support surface
    /// for resting objects) with the given yaw.
    Fixed { position: Vector3<f64>, yaw: f64 },
    /// Uniform over the workspace footprint, resting on the support.
    Uniform { yaw_range: [f64; 2] },
    /// Seated around a random peg of the board placed earlier in the scene.
    OnRandomPeg { yaw_range: [f64; 2] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub name: String,
    pub spec: ObjectSpec,
    pub placement: Placement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub workspace: Workspace,
    /// Height of the floor plane.
    pub floor_height: f64,
    pub objects: Vec<SceneObject>,
    pub rng_seed: u64,
}

impl SceneSpec {
    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        for o in &spec.objects {
            o.spec.validate()?;
        }
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// A spawned world plus the lookups tasks need.
#[derive(Debug, Clone)]
pub struct Scene {
    pub world: World,
    /// Scene object name → index of its (first) body.
    pub objects: Vec<(String, usize)>,
    /// Peg axis points at the board top, if the scene has a pegboard.
    pub pegs: Vec<Vector3<f64>>,
    /// Peg index each `OnRandomPeg` object was placed on, by object name.
    pub seated_on: Vec<(String, usize)>,
    pub peg_height: f64,
}

impl Scene {
    pub fn object(&self, name: &str) -> Option<usize> {
        self.objects.iter().find(|(n, _)| n == name).map(|(_, i)| *i)
    }
}

/// Scene files shipped with the crate, by name.
pub const DEFAULT_SCENES: [(&str, &str); 5] = [
    ("tray_needle", include_str!("../scenes/tray_needle.json")),
    ("tray_gauze", include_str!("../scenes/tray_gauze.json")),
    ("pegboard", include_str!("../scenes/pegboard.json")),
    ("ecm_cubes", include_str!("../scenes/ecm_cubes.json")),
    ("ecm_moving_cube", include_str!("../scenes/ecm_moving_cube.json")),
];

pub fn default_scene(name: &str) -> Result<SceneSpec> {
    let (_, text) = DEFAULT_SCENES
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| SimError::Config(format!("no default scene named '{name}'")))?;
    SceneSpec::from_json(text)
}

const MAX_ATTEMPTS: usize = 100;

fn yaw_pose(p: Vector3<f64>, yaw: f64) -> Pose {
    Isometry3::from_parts(p.into(), UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw))
}

/// Lowest point of a body relative to its origin when placed with `yaw`.
fn bottom_offset(body: &RigidBody, yaw: f64) -> f64 {
    let mut probe = body.clone();
    probe.pose = yaw_pose(Vector3::zeros(), yaw);
    probe.aabb().map(|(lo, _)| -lo.z).unwrap_or(0.0)
}

fn overlaps(a: &(Vector3<f64>, Vector3<f64>), b: &(Vector3<f64>, Vector3<f64>)) -> bool {
    (0..3).all(|i| a.0[i] < b.1[i] && b.0[i] < a.1[i])
}

/// Build the world for a scene. Deterministic in `spec.rng_seed`.
pub fn spawn_scene(spec: &SceneSpec, config: WorldConfig) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut world = World::new(config)?;
    world.add_body(RigidBody::new_static(
        "floor",
        Pose::translation(0.0, 0.0, spec.floor_height),
        Collider::plane(),
        MaterialParams::with_friction(0.5),
    ))?;
    world.support_height = spec.floor_height;

    let mut scene = Scene {
        world,
        objects: Vec::new(),
        pegs: Vec::new(),
        seated_on: Vec::new(),
        peg_height: 0.0,
    };
    // Footprints of movable objects placed so far.
    let mut placed: Vec<(Vector3<f64>, Vector3<f64>)> = Vec::new();

    for obj in &spec.objects {
        let bodies = build_object(&obj.name, &obj.spec)?;
        let fixture = matches!(obj.spec, ObjectSpec::PegBoard { .. } | ObjectSpec::Tray { .. });
        if fixture {
            let Placement::Fixed { position, .. } = obj.placement else {
                return Err(SimError::Config(format!("fixture {} needs a fixed placement", obj.name)));
            };
            let offset = Pose::translation(position.x, position.y, spec.floor_height + position.z);
            let first = scene.world.bodies.len();
            for mut b in bodies {
                b.pose = offset * b.pose;
                scene.world.add_body(b)?;
            }
            scene.objects.push((obj.name.clone(), first));
            if let ObjectSpec::PegBoard {
                rows,
                cols,
                spacing,
                base_half,
                peg_height,
                ..
            } = obj.spec
            {
                let top = spec.floor_height + position.z + 2.0 * base_half.z;
                scene.pegs = peg_positions(rows, cols, spacing, top)
                    .into_iter()
                    .map(|p| p + Vector3::new(position.x, position.y, 0.0))
                    .collect();
                scene.peg_height = peg_height;
                scene.world.support_height = top;
            }
            continue;
        }

        let mut body = bodies.into_iter().next().expect("movable objects are single bodies");
        let support = scene.world.support_height;
        let mut chosen = None;
        for _ in 0..MAX_ATTEMPTS {
            let (xy, yaw, peg) = match &obj.placement {
                Placement::Fixed { position, yaw } => (Vector3::new(position.x, position.y, position.z), *yaw, None),
                Placement::Uniform { yaw_range } => {
                    let p = spec.workspace.sample(&mut rng);
                    let yaw = yaw_range[0] + rng.random::<f64>() * (yaw_range[1] - yaw_range[0]);
                    (Vector3::new(p.x, p.y, 0.0), yaw, None)
                }
                Placement::OnRandomPeg { yaw_range } => {
                    if scene.pegs.is_empty() {
                        return Err(SimError::Config(format!("{} must be placed after a pegboard", obj.name)));
                    }
                    let k = rng.random_range(0..scene.pegs.len());
                    let yaw = yaw_range[0] + rng.random::<f64>() * (yaw_range[1] - yaw_range[0]);
                    (Vector3::new(scene.pegs[k].x, scene.pegs[k].y, 0.0), yaw, Some(k))
                }
            };
            let z = match (&obj.placement, body.kinematic || !body.is_dynamic()) {
                (Placement::Fixed { .. }, true) => support + xy.z,
                _ => support + bottom_offset(&body, yaw) + xy.z,
            };
            body.pose = yaw_pose(Vector3::new(xy.x, xy.y, z), yaw);
            let Some(bounds) = body.aabb() else { break };
            let inside = (0..2).all(|i| bounds.0[i] >= spec.workspace.min[i] - 1e-12 && bounds.1[i] <= spec.workspace.max[i] + 1e-12);
            let clear = placed.iter().all(|o| !overlaps(o, &bounds));
            if inside && clear {
                chosen = Some((bounds, peg));
                break;
            }
            if matches!(obj.placement, Placement::Fixed { .. }) {
                break;
            }
        }
        let Some((bounds, peg)) = chosen else {
            return Err(SimError::PlacementInfeasible {
                attempts: MAX_ATTEMPTS,
                what: obj.name.clone(),
            });
        };
        placed.push(bounds);
        if let Some(k) = peg {
            scene.seated_on.push((obj.name.clone(), k));
        }
        let idx = scene.world.add_body(body)?;
        scene.objects.push((obj.name.clone(), idx));
    }
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn needle_geometry() {
        let body = build_needle(0.040).unwrap();
        assert_eq!(body.collider.parts.len(), NEEDLE_SEGMENTS);
        let r = 0.040 / PI;
        let (tip, _) = needle_arc_point(0.040, 0.0);
        let (tail, _) = needle_arc_point(0.040, 1.0);
        assert!(((tip - tail).norm() - 2.0 * r).abs() < 1e-12);
        assert!(body.validate().is_ok());
    }

    #[test]
    fn block_hole_clears_peg() {
        let ObjectSpec::Block { hole_half, .. } = ObjectSpec::default_block() else {
            unreachable!()
        };
        let ObjectSpec::PegBoard { peg_radius, .. } = ObjectSpec::default_pegboard() else {
            unreachable!()
        };
        assert!(hole_half - peg_radius >= 1e-3 - 1e-12);
    }
}
