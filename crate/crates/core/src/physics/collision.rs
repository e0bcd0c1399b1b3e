//! Narrow-phase contact generation between analytic primitives.
//!
//! Every routine takes a `margin`: pairs whose separation is below it produce
//! contacts with negative depth. The solver uses these as speculative
//! contacts, while [`detect_contacts`](super::World::detect_contacts) reports
//! only touching or penetrating ones.

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use super::body::{RigidBody, Shape};
use crate::error::{Result, SimError};
use crate::kinematics::Pose;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactPoint {
    pub body_a: usize,
    pub body_b: usize,
    /// Midpoint between the two surfaces.
    pub point: Vector3<f64>,
    /// Unit normal pointing from `body_a` toward `body_b`.
    pub normal: Vector3<f64>,
    /// Penetration depth; negative values are gaps.
    pub depth: f64,
}

/// Primitive placed in the world.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Placed {
    Plane { point: Vector3<f64>, normal: Vector3<f64> },
    Box { pose: Pose, half: Vector3<f64> },
    Capsule { a: Vector3<f64>, b: Vector3<f64>, radius: f64 },
}

/// Local contact before body ids are attached; normal points from the first
/// shape to the second.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RawContact {
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub depth: f64,
}

impl RawContact {
    fn flipped(self) -> Self {
        Self {
            normal: -self.normal,
            ..self
        }
    }
}

pub(crate) fn place(pose: &Pose, shape: &Shape) -> Placed {
    match shape {
        Shape::Plane => Placed::Plane {
            point: pose.translation.vector,
            normal: pose.rotation * Vector3::z(),
        },
        Shape::Box { half_extents } => Placed::Box {
            pose: *pose,
            half: *half_extents,
        },
        Shape::Capsule { radius, a, b } => Placed::Capsule {
            a: pose.transform_point(&Point3::from(*a)).coords,
            b: pose.transform_point(&Point3::from(*b)).coords,
            radius: *radius,
        },
        // The segment is shortened so the rounded caps stay inside the
        // cylinder's height.
        Shape::Cylinder { radius, half_height } => {
            let h = (half_height - radius).max(0.0);
            let axis = pose.rotation * Vector3::z();
            Placed::Capsule {
                a: pose.translation.vector - axis * h,
                b: pose.translation.vector + axis * h,
                radius: *radius,
            }
        }
    }
}

pub(crate) fn part_aabb(pose: &Pose, shape: &Shape) -> Option<(Vector3<f64>, Vector3<f64>)> {
    match place(pose, shape) {
        Placed::Plane { .. } => None,
        Placed::Box { pose, half } => {
            let r = pose.rotation.to_rotation_matrix().into_inner().abs();
            let ext = r * half;
            let c = pose.translation.vector;
            Some((c - ext, c + ext))
        }
        Placed::Capsule { a, b, radius } => {
            let r = Vector3::repeat(radius);
            Some((a.inf(&b) - r, a.sup(&b) + r))
        }
    }
}

/// All contacts between two bodies whose separation is at most `margin`.
pub(crate) fn body_pair_contacts(a: &RigidBody, b: &RigidBody, margin: f64) -> Result<Vec<RawContact>> {
    let mut out = Vec::new();
    for pa in &a.collider.parts {
        let sa = place(&(a.pose * pa.local), &pa.shape);
        let box_a = part_aabb(&(a.pose * pa.local), &pa.shape);
        for pb in &b.collider.parts {
            let sb = place(&(b.pose * pb.local), &pb.shape);
            if let (Some((lo_a, hi_a)), Some((lo_b, hi_b))) = (box_a, part_aabb(&(b.pose * pb.local), &pb.shape)) {
                let apart = (0..3).any(|i| lo_a[i] > hi_b[i] + margin || lo_b[i] > hi_a[i] + margin);
                if apart {
                    continue;
                }
            }
            out.extend(shape_contacts(&sa, &sb, margin, (pa.shape.name(), pb.shape.name()))?);
        }
    }
    Ok(out)
}

/// Smallest gap between two bodies, or `None` if farther apart than `limit`.
pub(crate) fn body_gap(a: &RigidBody, b: &RigidBody, limit: f64) -> Option<f64> {
    body_pair_contacts(a, b, limit)
        .ok()?
        .iter()
        .map(|c| -c.depth)
        .fold(None, |acc: Option<f64>, g| Some(acc.map_or(g, |m| m.min(g))))
}

pub(crate) fn shape_contacts(
    a: &Placed,
    b: &Placed,
    margin: f64,
    names: (&'static str, &'static str),
) -> Result<Vec<RawContact>> {
    use Placed::*;
    let flip = |v: Vec<RawContact>| v.into_iter().map(RawContact::flipped).collect();
    Ok(match (a, b) {
        (Plane { .. }, Plane { .. }) => return Err(SimError::UnsupportedShapePair(names.0, names.1)),
        (Plane { point, normal }, Box { pose, half }) => plane_box(point, normal, pose, half, margin),
        (Box { pose, half }, Plane { point, normal }) => flip(plane_box(point, normal, pose, half, margin)),
        (Plane { point, normal }, Capsule { a, b, radius }) => plane_capsule(point, normal, a, b, *radius, margin),
        (Capsule { a, b, radius }, Plane { point, normal }) => {
            flip(plane_capsule(point, normal, a, b, *radius, margin))
        }
        (Box { pose: pa, half: ha }, Box { pose: pb, half: hb }) => box_box(pa, ha, pb, hb, margin),
        (Box { pose, half }, Capsule { a, b, radius }) => box_capsule(pose, half, a, b, *radius, margin),
        (Capsule { a, b, radius }, Box { pose, half }) => flip(box_capsule(pose, half, a, b, *radius, margin)),
        (Capsule { a: a1, b: b1, radius: r1 }, Capsule { a: a2, b: b2, radius: r2 }) => {
            capsule_capsule(a1, b1, *r1, a2, b2, *r2, margin)
        }
    })
}

fn plane_box(point: &Vector3<f64>, n: &Vector3<f64>, pose: &Pose, half: &Vector3<f64>, margin: f64) -> Vec<RawContact> {
    let mut out = Vec::new();
    for corner in box_corners(pose, half) {
        let s = n.dot(&(corner - point));
        if s <= margin {
            out.push(RawContact {
                point: corner - n * (0.5 * s),
                normal: *n,
                depth: -s,
            });
        }
    }
    out
}

fn plane_capsule(
    point: &Vector3<f64>,
    n: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    radius: f64,
    margin: f64,
) -> Vec<RawContact> {
    let mut out = Vec::new();
    for e in [a, b] {
        let s = n.dot(&(e - point)) - radius;
        if s <= margin {
            out.push(RawContact {
                point: e - n * (radius + 0.5 * s),
                normal: *n,
                depth: -s,
            });
        }
    }
    out
}

fn box_corners(pose: &Pose, half: &Vector3<f64>) -> [Vector3<f64>; 8] {
    let mut out = [Vector3::zeros(); 8];
    for (i, c) in out.iter_mut().enumerate() {
        let local = Vector3::new(
            if i & 1 == 0 { -half.x } else { half.x },
            if i & 2 == 0 { -half.y } else { half.y },
            if i & 4 == 0 { -half.z } else { half.z },
        );
        *c = pose * Point3::from(local) - Point3::origin();
    }
    out
}

/// Closest point on a box to `p`, and whether `p` is inside.
fn closest_on_box(pose: &Pose, half: &Vector3<f64>, p: &Vector3<f64>) -> (Vector3<f64>, bool) {
    let local = pose.inverse_transform_point(&Point3::from(*p)).coords;
    let clamped = Vector3::new(
        local.x.clamp(-half.x, half.x),
        local.y.clamp(-half.y, half.y),
        local.z.clamp(-half.z, half.z),
    );
    let inside = clamped == local;
    ((pose * Point3::from(clamped)).coords, inside)
}

/// Sphere against box; normal points from the box to the sphere.
fn sphere_box(pose: &Pose, half: &Vector3<f64>, c: &Vector3<f64>, radius: f64, margin: f64) -> Option<RawContact> {
    let (q, inside) = closest_on_box(pose, half, c);
    if !inside {
        let d = c - q;
        let dist = d.norm();
        let s = dist - radius;
        if s > margin || dist < 1e-12 {
            return None;
        }
        let n = d / dist;
        return Some(RawContact {
            point: q + n * (0.5 * s),
            normal: n,
            depth: -s,
        });
    }
    // Center inside: push out through the nearest face.
    let local = pose.inverse_transform_point(&Point3::from(*c)).coords;
    let mut axis = 0;
    let mut best = f64::INFINITY;
    for i in 0..3 {
        let d = half[i] - local[i].abs();
        if d < best {
            best = d;
            axis = i;
        }
    }
    let mut n_local = Vector3::zeros();
    n_local[axis] = if local[axis] >= 0.0 { 1.0 } else { -1.0 };
    let n = pose.rotation * n_local;
    let depth = best + radius;
    Some(RawContact {
        point: c + n * (best - 0.5 * depth),
        normal: n,
        depth,
    })
}

fn closest_param_on_segment(a: &Vector3<f64>, b: &Vector3<f64>, p: &Vector3<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 < 1e-24 {
        0.0
    } else {
        ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
    }
}

fn box_capsule(
    pose: &Pose,
    half: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    radius: f64,
    margin: f64,
) -> Vec<RawContact> {
    let mut out: Vec<RawContact> = Vec::new();
    let push = |c: Option<RawContact>, out: &mut Vec<RawContact>| {
        if let Some(c) = c {
            if out.iter().all(|o| (o.point - c.point).norm() > 0.25 * radius) {
                out.push(c);
            }
        }
    };
    // Closest segment point by alternating projection (both sets convex).
    let mut t = 0.5;
    for _ in 0..12 {
        let p = a + (b - a) * t;
        let (q, _) = closest_on_box(pose, half, &p);
        let next = closest_param_on_segment(a, b, &q);
        if (next - t).abs() < 1e-12 {
            break;
        }
        t = next;
    }
    let mid = a + (b - a) * t;
    push(sphere_box(pose, half, &mid, radius, margin), &mut out);
    push(sphere_box(pose, half, a, radius, margin), &mut out);
    push(sphere_box(pose, half, b, radius, margin), &mut out);
    out
}

/// Closest points between segments `p1-q1` and `p2-q2` as parameters.
fn segment_params(p1: &Vector3<f64>, q1: &Vector3<f64>, p2: &Vector3<f64>, q2: &Vector3<f64>) -> (f64, f64) {
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.norm_squared();
    let e = d2.norm_squared();
    let f = d2.dot(&r);
    if a < 1e-24 && e < 1e-24 {
        return (0.0, 0.0);
    }
    if a < 1e-24 {
        return (0.0, (f / e).clamp(0.0, 1.0));
    }
    let c = d1.dot(&r);
    if e < 1e-24 {
        return ((-c / a).clamp(0.0, 1.0), 0.0);
    }
    let b = d1.dot(&d2);
    let denom = a * e - b * b;
    let mut s = if denom > 1e-18 * a * e {
        ((b * f - c * e) / denom).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let mut t = (b * s + f) / e;
    if t < 0.0 {
        t = 0.0;
        s = (-c / a).clamp(0.0, 1.0);
    } else if t > 1.0 {
        t = 1.0;
        s = ((b - c) / a).clamp(0.0, 1.0);
    }
    (s, t)
}

fn sphere_sphere(c1: &Vector3<f64>, r1: f64, c2: &Vector3<f64>, r2: f64, margin: f64) -> Option<RawContact> {
    let d = c2 - c1;
    let dist = d.norm();
    let s = dist - r1 - r2;
    if s > margin || dist < 1e-12 {
        return None;
    }
    let n = d / dist;
    Some(RawContact {
        point: c1 + n * (r1 + 0.5 * s),
        normal: n,
        depth: -s,
    })
}

fn capsule_capsule(
    a1: &Vector3<f64>,
    b1: &Vector3<f64>,
    r1: f64,
    a2: &Vector3<f64>,
    b2: &Vector3<f64>,
    r2: f64,
    margin: f64,
) -> Vec<RawContact> {
    let mut out: Vec<RawContact> = Vec::new();
    let min_r = r1.min(r2);
    let mut push = |c: Option<RawContact>| {
        if let Some(c) = c {
            if out.iter().all(|o| (o.point - c.point).norm() > 0.25 * min_r) {
                out.push(c);
            }
        }
    };
    let (s, t) = segment_params(a1, b1, a2, b2);
    push(sphere_sphere(&(a1 + (b1 - a1) * s), r1, &(a2 + (b2 - a2) * t), r2, margin));
    // Endpoint tests keep near-parallel capsules from rocking on one point.
    for e in [a1, b1] {
        let t = closest_param_on_segment(a2, b2, e);
        push(sphere_sphere(e, r1, &(a2 + (b2 - a2) * t), r2, margin));
    }
    for e in [a2, b2] {
        let s = closest_param_on_segment(a1, b1, e);
        push(sphere_sphere(&(a1 + (b1 - a1) * s), r1, e, r2, margin));
    }
    out
}

fn box_box(pa: &Pose, ha: &Vector3<f64>, pb: &Pose, hb: &Vector3<f64>, margin: f64) -> Vec<RawContact> {
    let ra = pa.rotation.to_rotation_matrix().into_inner();
    let rb = pb.rotation.to_rotation_matrix().into_inner();
    let axes_a = [ra.column(0).into_owned(), ra.column(1).into_owned(), ra.column(2).into_owned()];
    let axes_b = [rb.column(0).into_owned(), rb.column(1).into_owned(), rb.column(2).into_owned()];
    let d = pb.translation.vector - pa.translation.vector;

    let radius = |axes: &[Vector3<f64>; 3], h: &Vector3<f64>, l: &Vector3<f64>| {
        (0..3).map(|i| h[i] * axes[i].dot(l).abs()).sum::<f64>()
    };
    // Separation along unit axis `l`; the returned axis points from A to B.
    let sep = |l: Vector3<f64>| {
        let dist = d.dot(&l);
        let s = dist.abs() - radius(&axes_a, ha, &l) - radius(&axes_b, hb, &l);
        (s, if dist >= 0.0 { l } else { -l })
    };

    let mut best_face: Option<(f64, Vector3<f64>, bool, usize)> = None;
    for (i, ax) in axes_a.iter().enumerate() {
        let (s, n) = sep(*ax);
        if s > margin {
            return Vec::new();
        }
        if best_face.is_none_or(|b| s > b.0) {
            best_face = Some((s, n, true, i));
        }
    }
    for (i, ax) in axes_b.iter().enumerate() {
        let (s, n) = sep(*ax);
        if s > margin {
            return Vec::new();
        }
        // Small bias keeps the reference face stable for resting contacts.
        if best_face.is_none_or(|b| s > b.0 + 1e-9) {
            best_face = Some((s, n, false, i));
        }
    }
    let mut best_edge: Option<(f64, Vector3<f64>, usize, usize)> = None;
    for (i, ea) in axes_a.iter().enumerate() {
        for (j, eb) in axes_b.iter().enumerate() {
            let c = ea.cross(eb);
            let len = c.norm();
            if len < 1e-6 {
                continue;
            }
            let (s, n) = sep(c / len);
            if s > margin {
                return Vec::new();
            }
            if best_edge.is_none_or(|b| s > b.0) {
                best_edge = Some((s, n, i, j));
            }
        }
    }
    let (face_sep, face_n, ref_is_a, face_axis) = best_face.expect("three face axes tested");
    if let Some((edge_sep, n, i, j)) = best_edge {
        if edge_sep > face_sep + 1e-6 * (ha.max() + hb.max()) {
            return edge_contact(pa, ha, &axes_a, pb, hb, &axes_b, &n, i, j, edge_sep);
        }
    }
    face_contacts(pa, ha, &axes_a, pb, hb, &axes_b, face_n, ref_is_a, face_axis, margin)
}

#[allow(clippy::too_many_arguments)]
fn edge_contact(
    pa: &Pose,
    ha: &Vector3<f64>,
    axes_a: &[Vector3<f64>; 3],
    pb: &Pose,
    hb: &Vector3<f64>,
    axes_b: &[Vector3<f64>; 3],
    n: &Vector3<f64>,
    i: usize,
    j: usize,
    separation: f64,
) -> Vec<RawContact> {
    // Support edge of A along +n and of B along -n.
    let support_edge = |center: Vector3<f64>, axes: &[Vector3<f64>; 3], h: &Vector3<f64>, dir: &Vector3<f64>, k: usize| {
        let mut mid = center;
        for m in 0..3 {
            if m != k {
                let sgn = if axes[m].dot(dir) >= 0.0 { 1.0 } else { -1.0 };
                mid += axes[m] * (h[m] * sgn);
            }
        }
        (mid - axes[k] * h[k], mid + axes[k] * h[k])
    };
    let (a0, a1) = support_edge(pa.translation.vector, axes_a, ha, n, i);
    let (b0, b1) = support_edge(pb.translation.vector, axes_b, hb, &-n, j);
    let (s, t) = segment_params(&a0, &a1, &b0, &b1);
    let pa_pt = a0 + (a1 - a0) * s;
    let pb_pt = b0 + (b1 - b0) * t;
    vec![RawContact {
        point: 0.5 * (pa_pt + pb_pt),
        normal: *n,
        depth: -separation,
    }]
}

#[allow(clippy::too_many_arguments)]
fn face_contacts(
    pa: &Pose,
    ha: &Vector3<f64>,
    axes_a: &[Vector3<f64>; 3],
    pb: &Pose,
    hb: &Vector3<f64>,
    axes_b: &[Vector3<f64>; 3],
    n_ab: Vector3<f64>,
    ref_is_a: bool,
    ref_axis: usize,
    margin: f64,
) -> Vec<RawContact> {
    // Reference box R, incident box I, normal n pointing from R to I.
    let (rc, rh, raxes, ic, ih, iaxes, n) = if ref_is_a {
        (pa.translation.vector, ha, axes_a, pb.translation.vector, hb, axes_b, n_ab)
    } else {
        (pb.translation.vector, hb, axes_b, pa.translation.vector, ha, axes_a, -n_ab)
    };
    let ref_center = rc + n * rh[ref_axis];

    // Incident face: most anti-parallel to n.
    let mut inc_axis = 0;
    let mut most = f64::INFINITY;
    for (k, ax) in iaxes.iter().enumerate() {
        let d = ax.dot(&n);
        if -d.abs() < most {
            most = -d.abs();
            inc_axis = k;
        }
    }
    let sgn = if iaxes[inc_axis].dot(&n) > 0.0 { -1.0 } else { 1.0 };
    let inc_center = ic + iaxes[inc_axis] * (sgn * ih[inc_axis]);
    let (u, v) = ((inc_axis + 1) % 3, (inc_axis + 2) % 3);
    let (eu, ev) = (iaxes[u] * ih[u], iaxes[v] * ih[v]);
    let mut poly = vec![
        inc_center + eu + ev,
        inc_center - eu + ev,
        inc_center - eu - ev,
        inc_center + eu - ev,
    ];

    // Clip against the four side planes of the reference face.
    for k in 0..3 {
        if k == ref_axis {
            continue;
        }
        for sign in [1.0, -1.0] {
            let plane_n = raxes[k] * sign;
            let offset = plane_n.dot(&rc) + rh[k];
            poly = clip(&poly, &plane_n, offset);
            if poly.is_empty() {
                return Vec::new();
            }
        }
    }

    let normal = if ref_is_a { n } else { -n };
    poly.into_iter()
        .filter_map(|p| {
            let s = n.dot(&(p - ref_center));
            (s <= margin).then(|| RawContact {
                point: p - n * (0.5 * s),
                normal,
                depth: -s,
            })
        })
        .collect()
}

/// Sutherland-Hodgman clip keeping `n·p <= offset`.
fn clip(poly: &[Vector3<f64>], n: &Vector3<f64>, offset: f64) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        let dp = n.dot(&p) - offset;
        let dq = n.dot(&q) - offset;
        if dp <= 0.0 {
            out.push(p);
        }
        if (dp <= 0.0) != (dq <= 0.0) {
            let t = dp / (dp - dq);
            out.push(p + (q - p) * t);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;

    fn boxed(x: f64, y: f64, z: f64, h: f64) -> Placed {
        Placed::Box {
            pose: Pose::translation(x, y, z),
            half: Vector3::repeat(h),
        }
    }

    #[test]
    fn stacked_boxes_give_face_manifold() {
        let c = shape_contacts(&boxed(0.0, 0.0, 0.0, 0.01), &boxed(0.002, 0.0, 0.019, 0.01), 0.0, ("box", "box")).unwrap();
        assert_eq!(c.len(), 4);
        for p in &c {
            assert!((p.normal - Vector3::z()).norm() < 1e-12);
            assert!((p.depth - 0.001).abs() < 1e-12);
        }
    }

    #[test]
    fn crossed_edges_give_single_contact() {
        let a = Placed::Box {
            pose: Pose::from_parts(
                Vector3::zeros().into(),
                UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::FRAC_PI_4),
            ),
            half: Vector3::repeat(0.01),
        };
        let b = Placed::Box {
            pose: Pose::from_parts(
                Vector3::new(0.0, 0.0, 0.028).into(),
                UnitQuaternion::from_axis_angle(&Vector3::y_axis(), std::f64::consts::FRAC_PI_4),
            ),
            half: Vector3::repeat(0.01),
        };
        let c = shape_contacts(&a, &b, 0.0, ("box", "box")).unwrap();
        assert_eq!(c.len(), 1);
        let expected = 2.0 * 0.01 * 2f64.sqrt() - 0.028;
        assert!((c[0].depth - expected).abs() < 1e-9);
        assert!((c[0].normal - Vector3::z()).norm() < 1e-9);
    }

    #[test]
    fn capsule_resting_on_box_top() {
        let b = boxed(0.0, 0.0, 0.0, 0.01);
        let cap = Placed::Capsule {
            a: Vector3::new(-0.005, 0.0, 0.0115),
            b: Vector3::new(0.005, 0.0, 0.0115),
            radius: 0.002,
        };
        let c = shape_contacts(&b, &cap, 0.0, ("box", "capsule")).unwrap();
        assert!(c.len() >= 2);
        for p in &c {
            assert!((p.depth - 0.0005).abs() < 1e-12);
            assert!((p.normal - Vector3::z()).norm() < 1e-12);
        }
    }

    #[test]
    fn crossing_capsules() {
        let c = capsule_capsule(
            &Vector3::new(-0.01, 0.0, 0.0),
            &Vector3::new(0.01, 0.0, 0.0),
            0.001,
            &Vector3::new(0.0, -0.01, 0.0015),
            &Vector3::new(0.0, 0.01, 0.0015),
            0.001,
            0.0,
        );
        assert_eq!(c.len(), 1);
        assert!((c[0].depth - 0.0005).abs() < 1e-12);
        assert!((c[0].normal - Vector3::z()).norm() < 1e-12);
    }

    #[test]
    fn margin_reports_gaps() {
        let c = shape_contacts(&boxed(0.0, 0.0, 0.0, 0.01), &boxed(0.0, 0.0, 0.021, 0.01), 0.002, ("box", "box")).unwrap();
        assert_eq!(c.len(), 4);
        assert!(c.iter().all(|p| (p.depth + 0.001).abs() < 1e-12));
    }
}
