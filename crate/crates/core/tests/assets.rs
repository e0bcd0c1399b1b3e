use std::f64::consts::PI;

use nalgebra::Vector3;
use surgisim::assets::{
    build_needle, build_object, build_pegboard, default_scene, needle_arc_point, spawn_scene, ObjectSpec, Placement,
    SceneObject, SceneSpec, Workspace, DEFAULT_SCENES, NEEDLE_SEGMENTS,
};
use surgisim::physics::{Shape, WorldConfig};
use surgisim::SimError;

#[test]
fn needle_radius_and_chord() {
    let needle = build_needle(0.040).unwrap();
    let r = 0.040 / PI;
    assert!((r - 0.01273).abs() < 1e-5);
    let (tip, _) = needle_arc_point(0.040, 0.0);
    let (tail, _) = needle_arc_point(0.040, 1.0);
    assert!(((tip - tail).norm() - 2.0 * r).abs() < 1e-6);
    assert!((needle.mass - 0.0002).abs() < 1e-12);

    // Every capsule endpoint lies on the arc, adjacent segments share endpoints.
    let center = Vector3::new(0.0, -2.0 * r / PI, 0.0);
    let segments: Vec<(Vector3<f64>, Vector3<f64>)> = needle
        .collider
        .parts
        .iter()
        .map(|p| match &p.shape {
            Shape::Capsule { a, b, .. } => (p.local * nalgebra::Point3::from(*a), p.local * nalgebra::Point3::from(*b)),
            other => panic!("unexpected shape {other:?}"),
        })
        .map(|(a, b)| (a.coords, b.coords))
        .collect();
    assert_eq!(segments.len(), NEEDLE_SEGMENTS);
    for (a, b) in &segments {
        assert!(((a - center).norm() - r).abs() < 1e-12);
        assert!(((b - center).norm() - r).abs() < 1e-12);
    }
    for w in segments.windows(2) {
        assert!((w[0].1 - w[1].0).norm() < 1e-12);
    }
}

#[test]
fn needle_origin_is_arc_centroid() {
    // Numerical centroid of the arc by dense sampling.
    let n = 100_000;
    let mean: Vector3<f64> =
        (0..n).map(|k| needle_arc_point(0.040, (k as f64 + 0.5) / n as f64).0).sum::<Vector3<f64>>() / n as f64;
    assert!(mean.norm() < 1e-9);
}

#[test]
fn pegboard_grid() {
    let bodies = build_pegboard(2, 3, 0.02, 0.03).unwrap();
    let pegs: Vec<_> = bodies.iter().filter(|b| b.name.starts_with("peg")).collect();
    assert_eq!(pegs.len(), 6);
    let first = pegs[0].pose.translation.vector;
    for p in &pegs {
        let d = p.pose.translation.vector - first;
        for v in [d.x, d.y] {
            let k = v / 0.03;
            assert!((k - k.round()).abs() < 1e-9);
        }
        assert!(!p.is_dynamic());
    }
}

#[test]
fn default_board_fits_workspace() {
    let spec = default_scene("pegboard").unwrap();
    let scene = spawn_scene(&spec, WorldConfig::default()).unwrap();
    for b in scene.world.bodies.iter().filter(|b| b.name.starts_with("peg")) {
        let (lo, hi) = b.aabb().unwrap();
        assert!(lo.x >= -0.05 && hi.x <= 0.05 && lo.y >= -0.05 && hi.y <= 0.05, "{}", b.name);
    }
}

#[test]
fn block_seats_fully_on_tall_peg() {
    use surgisim::physics::World;
    let mut world = World::new(WorldConfig::default()).unwrap();
    for b in build_pegboard(1, 1, 0.02, 0.03).unwrap() {
        world.add_body(b).unwrap();
    }
    let mut block = build_object("block", &ObjectSpec::default_block()).unwrap().remove(0);
    let ObjectSpec::Block { height, .. } = ObjectSpec::default_block() else {
        unreachable!()
    };
    let ObjectSpec::PegBoard { base_half, .. } = ObjectSpec::default_pegboard() else {
        unreachable!()
    };
    let top = 2.0 * base_half.z;
    // Dropped from above the peg tip.
    block.pose = surgisim::kinematics::Pose::translation(0.0, 0.0, top + 0.02 + height);
    let idx = world.add_body(block).unwrap();
    for _ in 0..1500 {
        world.substep(&[]).unwrap();
    }
    let bottom = world.bodies[idx].aabb().unwrap().0.z;
    assert!((bottom - top).abs() < 1e-3, "block bottom {bottom} vs board top {top}");
}

#[test]
fn same_seed_same_world() {
    let mut spec = default_scene("tray_needle").unwrap();
    spec.rng_seed = 7;
    let a = spawn_scene(&spec, WorldConfig::default()).unwrap();
    let b = spawn_scene(&spec, WorldConfig::default()).unwrap();
    assert_eq!(a.world.snapshot(), b.world.snapshot());
    spec.rng_seed = 8;
    let c = spawn_scene(&spec, WorldConfig::default()).unwrap();
    assert_ne!(a.world.snapshot(), c.world.snapshot());
}

#[test]
fn needle_always_inside_tray_without_overlap() {
    let mut spec = default_scene("tray_needle").unwrap();
    for seed in 0..100 {
        spec.rng_seed = seed;
        let scene = spawn_scene(&spec, WorldConfig::default()).unwrap();
        let needle = &scene.world.bodies[scene.object("needle").unwrap()];
        let (lo, hi) = needle.aabb().unwrap();
        assert!(lo.x >= -0.06 && hi.x <= 0.06 && lo.y >= -0.06 && hi.y <= 0.06, "seed {seed}");
        // Resting on the floor without penetrating it.
        assert!(lo.z.abs() < 1e-9, "seed {seed}: lowest point {}", lo.z);
        let deepest = scene
            .world
            .detect_contacts()
            .unwrap()
            .iter()
            .map(|c| c.depth)
            .fold(0.0, f64::max);
        assert!(deepest < 1e-9, "seed {seed}: depth {deepest}");
    }
}

#[test]
fn sampled_cubes_never_overlap() {
    let mut spec = default_scene("ecm_cubes").unwrap();
    for seed in 0..100 {
        spec.rng_seed = seed;
        let scene = spawn_scene(&spec, WorldConfig::default()).unwrap();
        let boxes: Vec<_> = scene
            .objects
            .iter()
            .map(|(_, i)| scene.world.bodies[*i].aabb().unwrap())
            .collect();
        for i in 0..boxes.len() {
            for j in (i + 1)..boxes.len() {
                let sep = (0..3).any(|k| boxes[i].1[k] <= boxes[j].0[k] || boxes[j].1[k] <= boxes[i].0[k]);
                assert!(sep, "seed {seed}: objects {i} and {j} overlap");
            }
        }
    }
}

#[test]
fn zero_area_workspace_is_infeasible() {
    let spec = SceneSpec {
        workspace: Workspace {
            min: Vector3::zeros(),
            max: Vector3::zeros(),
        },
        floor_height: 0.0,
        objects: vec![SceneObject {
            name: "needle".into(),
            spec: ObjectSpec::default_needle(),
            placement: Placement::Uniform { yaw_range: [0.0, 1.0] },
        }],
        rng_seed: 1,
    };
    match spawn_scene(&spec, WorldConfig::default()) {
        Err(SimError::PlacementInfeasible { attempts, .. }) => assert_eq!(attempts, 100),
        other => panic!("expected placement error, got {other:?}"),
    }
}

#[test]
fn shipped_scenes_parse_and_round_trip() {
    for (name, _) in DEFAULT_SCENES {
        let spec = default_scene(name).unwrap();
        let again = SceneSpec::from_json(&spec.to_json().unwrap()).unwrap();
        assert_eq!(spec, again, "{name}");
        spawn_scene(&spec, WorldConfig::default()).unwrap();
    }
}

#[test]
fn invalid_dimensions_rejected() {
    let bad = ObjectSpec::Block {
        outer_half: 0.002,
        hole_half: 0.003,
        height: 0.005,
        mass: 0.001,
        material: Default::default(),
    };
    assert!(build_object("b", &bad).is_err());
    assert!(build_needle(0.0).is_err());
}
