use nalgebra::{Point3, Vector2, Vector3};
use surgisim::demos::{
    collect_demos, load_demos, plan_waypoints, replay_matches, rollout, visual_servo_ecm, write_demos, PolicyKind,
    Reference, ServoConfig, WaypointLabel,
};
use surgisim::envs::{camera_twist_to_joints, ecm_arm_model, TaskConfig, TaskEnv, TaskId, IMAGE_CENTER};
use surgisim::kinematics::{ArmKind, JointVector};
use surgisim::SimError;

fn env(task: TaskId) -> TaskEnv {
    TaskEnv::new(TaskConfig::new(task)).unwrap()
}

fn waypoints(kind: &PolicyKind) -> &Vec<Vec<surgisim::demos::Waypoint>> {
    match kind {
        PolicyKind::Waypoints(w) => w,
        other => panic!("expected waypoints, got {other:?}"),
    }
}

#[test]
fn needle_pick_plan_follows_the_grasp_stages() {
    let mut e = env(TaskId::NeedlePick);
    e.reset(0).unwrap();
    let policy = plan_waypoints(&e).unwrap();
    let arms = waypoints(&policy.kind);
    assert_eq!(arms.len(), 1);
    assert!((4..=5).contains(&arms[0].len()));
    let mut labels: Vec<WaypointLabel> = arms[0].iter().map(|w| w.label).collect();
    labels.dedup();
    assert_eq!(
        labels,
        [WaypointLabel::Approach, WaypointLabel::Pick, WaypointLabel::Lift, WaypointLabel::Place]
    );
    assert!(arms[0].iter().all(|w| w.tolerance > 0.0));
    // The grasp waypoint is the needle's grasp point.
    let (g, _) = e.grasp_target(0).unwrap();
    assert!(arms[0].iter().any(|w| w.label == WaypointLabel::Pick && (w.position() - g).norm() < 1e-12));
}

#[test]
fn peg_transfer_lift_clears_the_pegs() {
    let mut e = env(TaskId::PegTransfer);
    for seed in 0..5 {
        e.reset(seed).unwrap();
        let policy = plan_waypoints(&e).unwrap();
        let object = e.object().unwrap();
        let (lo, hi) = e.world().bodies[object].aabb().unwrap();
        let block_height = hi.z - lo.z;
        let (g, _) = e.grasp_target(0).unwrap();
        let peg_top = e
            .world()
            .bodies
            .iter()
            .filter(|b| b.name.starts_with("peg"))
            .map(|b| b.aabb().unwrap().1.z)
            .fold(f64::MIN, f64::max);
        let peg_height = peg_top - e.world().support_height;
        let lift = waypoints(&policy.kind)[0]
            .iter()
            .find(|w| w.label == WaypointLabel::Lift)
            .unwrap();
        // The gripped point keeps its offset above the block bottom while lifted.
        let bottom_when_lifted = lift.position().z - (g.z - lo.z);
        assert!(bottom_when_lifted > peg_top, "seed {seed}");
        assert!(lift.position().z - e.world().support_height > peg_height + block_height);
    }
}

#[test]
fn waypoint_action_is_small_at_the_target_and_saturates_far_away() {
    let mut e = env(TaskId::NeedleReach);
    let mut obs = e.reset(2).unwrap();
    let mut policy = plan_waypoints(&e).unwrap();
    for _ in 0..30 {
        let a = policy.act(&obs).unwrap();
        obs = e.step(&a).unwrap().obs;
    }
    let a = policy.act(&obs).unwrap();
    assert!(a[..3].iter().all(|v| v.abs() < 0.1), "{a:?}");

    let far = match &mut policy.kind {
        PolicyKind::Waypoints(w) => &mut w[0][0],
        _ => unreachable!(),
    };
    far.tool_pose.translation.vector += Vector3::new(0.1, 0.0, 0.0);
    let a = policy.act(&obs).unwrap();
    assert_eq!(a[0], 1.0);
    assert!(a[1].abs() < 1.0);
}

#[test]
fn stage_index_advances_monotonically_and_only_on_reach() {
    let mut e = env(TaskId::NeedlePick);
    let mut obs = e.reset(4).unwrap();
    let mut policy = plan_waypoints(&e).unwrap();
    let plan = waypoints(&policy.kind).clone();
    let mut last = policy.index;
    for _ in 0..e.config().horizon {
        let tool = e.world().tool_pose(e.psms()[0]).translation.vector;
        let held = e.world().bodies[e.object().unwrap()].pose.translation.vector;
        let a = policy.act(&obs).unwrap();
        assert!(policy.index >= last);
        if policy.index > last {
            let wp = &plan[0][last];
            let reached = match wp.reference {
                Reference::Tool => (tool - wp.position()).norm(),
                Reference::Carry => (held - wp.position()).norm(),
                Reference::Stay => 0.0,
            };
            assert!(reached <= wp.tolerance + 1e-9, "stage {last}: {reached}");
            last = policy.index;
        }
        let r = e.step(&a).unwrap();
        obs = r.obs;
        if r.done {
            break;
        }
    }
    assert_eq!(last, plan[0].len() - 1);
}

#[test]
fn regrasp_tools_meet_at_the_rendezvous() {
    let mut e = env(TaskId::NeedleRegrasp);
    for seed in 0..5 {
        let mut obs = e.reset(seed).unwrap();
        let mut policy = plan_waypoints(&e).unwrap();
        let plan = waypoints(&policy.kind).clone();
        // Stage 1: PSM1 at the needle's free grasp point, PSM2 presenting it.
        let rendezvous = 1;
        assert_eq!(plan[0][rendezvous].label, WaypointLabel::Handover);
        assert_eq!(plan[1][rendezvous].label, WaypointLabel::Handover);
        let mut met = false;
        for _ in 0..e.config().horizon {
            let d: Vec<f64> = (0..2)
                .map(|arm| (e.world().tool_pose(e.psms()[arm]).translation.vector - plan[arm][rendezvous].position()).norm())
                .collect();
            let before = policy.index;
            let a = policy.act(&obs).unwrap();
            if before == rendezvous && policy.index > before {
                assert!(d[0] <= plan[0][rendezvous].tolerance && d[1] <= plan[1][rendezvous].tolerance, "{d:?}");
                met = true;
                break;
            }
            obs = e.step(&a).unwrap().obs;
        }
        assert!(met, "seed {seed}");
        // The rendezvous point sits on the needle PSM2 holds.
        let needle = e.object().unwrap();
        let (lo, hi) = e.world().bodies[needle].aabb().unwrap();
        let g = plan[0][rendezvous].position();
        assert!((0..3).all(|k| g[k] >= lo[k] - 1e-3 && g[k] <= hi[k] + 1e-3));
    }
}

#[test]
fn plan_rejects_goals_outside_the_workspace() {
    let mut e = env(TaskId::NeedlePick);
    e.reset(0).unwrap();
    e.set_goal(vec![0.5, 0.0, 0.1]).unwrap();
    assert!(matches!(plan_waypoints(&e), Err(SimError::NoFeasiblePlan(_))));
}

#[test]
fn exhausted_policy_returns_zero_action() {
    let mut e = env(TaskId::NeedleReach);
    let obs = e.reset(0).unwrap();
    let mut policy = plan_waypoints(&e).unwrap();
    policy.kind = PolicyKind::Waypoints(vec![Vec::new()]);
    assert!(policy.is_exhausted());
    assert!(policy.act(&obs).unwrap().iter().all(|v| *v == 0.0));
}

/// ECM configuration, target point and its camera-frame coordinates.
fn servo_setup(p_err: Vector2<f64>, depth: f64) -> (JointVector, Vector3<f64>, TaskEnv) {
    let mut e = env(TaskId::StaticTrack);
    let obs = e.reset(3).unwrap();
    let q = JointVector::new(ArmKind::Ecm, obs.observation[3..7].to_vec()).unwrap();
    let cam = e.camera().clone();
    let pose = cam.camera_pose(&ecm_arm_model(&q).unwrap().tool_pose_world());
    let uv = IMAGE_CENTER + p_err;
    let local = Vector3::new((uv.x - cam.cx) / cam.fx, (uv.y - cam.cy) / cam.fy, 1.0) * depth;
    let world = (pose * Point3::from(local)).coords;
    (q, world, e)
}

#[test]
fn servo_with_no_error_is_still() {
    let (q, _, e) = servo_setup(Vector2::zeros(), 0.1);
    let t = visual_servo_ecm(e.camera(), &q, &Vector2::zeros(), 0.0, 0.1, &ServoConfig::default()).unwrap();
    assert_eq!(t, nalgebra::Vector4::zeros());
}

#[test]
fn servo_rejects_targets_out_of_view() {
    let (q, _, e) = servo_setup(Vector2::zeros(), 0.1);
    let cfg = ServoConfig::default();
    assert!(matches!(
        visual_servo_ecm(e.camera(), &q, &Vector2::new(0.7, 0.0), 0.0, 0.1, &cfg),
        Err(SimError::TargetOutOfView)
    ));
    assert!(matches!(
        visual_servo_ecm(e.camera(), &q, &Vector2::new(0.1, 0.0), 0.0, -0.1, &cfg),
        Err(SimError::TargetOutOfView)
    ));
}

#[test]
fn servo_horizontal_error_pans_and_keeps_roll() {
    let p_err = Vector2::new(0.05, 0.0);
    let depth = 0.12;
    let (q, target, e) = servo_setup(p_err, depth);
    let cam = e.camera().clone();
    let cfg = ServoConfig::default();
    let t = visual_servo_ecm(&cam, &q, &p_err, 0.0, depth, &cfg).unwrap();
    assert!(t[0].abs() > 3.0 * t[1].abs() && t[0].abs() > 3.0 * t[2].abs(), "{t:?}");
    assert!(t.fixed_rows::<3>(0).norm() <= cfg.max_translation + 1e-12);
    assert!(t[3].abs() <= cfg.max_rotation + 1e-12);

    // Realize the twist through the joints and re-project the target.
    let arm = ecm_arm_model(&q).unwrap();
    let dq = camera_twist_to_joints(&arm.chain, &q, &[t[0], t[1], t[2], t[3]]).unwrap();
    let moved: Vec<f64> = q.values.iter().zip(&dq).map(|(a, b)| a + b).collect();
    let moved = JointVector::new(ArmKind::Ecm, moved).unwrap();
    let before_pose = cam.camera_pose(&arm.tool_pose_world());
    let after_pose = cam.camera_pose(&ecm_arm_model(&moved).unwrap().tool_pose_world());
    let after = cam.project(&after_pose, &target);
    let err_after = after.uv - IMAGE_CENTER;
    assert!(err_after.x.abs() < 0.6 * p_err.x, "{err_after:?}");
    assert!(err_after.y.abs() < 0.1 * p_err.x, "{err_after:?}");
    // No roll demanded: the misorientation is unchanged to first order.
    let roll_change = cam.misorientation(&after_pose).unwrap() - cam.misorientation(&before_pose).unwrap();
    assert!(roll_change.abs() < 1e-3, "{roll_change}");
}

#[test]
fn servo_roll_correction_leaves_the_image_point() {
    let depth = 0.1;
    let (q, target, e) = servo_setup(Vector2::zeros(), depth);
    let cam = e.camera().clone();
    let t = visual_servo_ecm(&cam, &q, &Vector2::zeros(), 0.05, depth, &ServoConfig::default()).unwrap();
    let arm = ecm_arm_model(&q).unwrap();
    let dq = camera_twist_to_joints(&arm.chain, &q, &[t[0], t[1], t[2], t[3]]).unwrap();
    let moved = JointVector::new(ArmKind::Ecm, q.values.iter().zip(&dq).map(|(a, b)| a + b).collect()).unwrap();
    let before = cam.camera_pose(&arm.tool_pose_world());
    let after = cam.camera_pose(&ecm_arm_model(&moved).unwrap().tool_pose_world());
    let dtheta = cam.misorientation(&after).unwrap() - cam.misorientation(&before).unwrap();
    assert!((dtheta + 0.6 * 0.05).abs() < 2e-3, "{dtheta}");
    let uv = cam.project(&after, &target).uv;
    assert!((uv - IMAGE_CENTER).norm() < 2e-3, "{uv:?}");
}

#[test]
fn reach_and_static_track_succeed_on_every_seed() {
    for (task, needed) in [(TaskId::NeedleReach, 100), (TaskId::StaticTrack, 95)] {
        let mut e = env(task);
        let wins = (0..100).filter(|s| rollout(&mut e, *s).unwrap().iter().any(|r| r.is_success)).count();
        assert!(wins >= needed, "{task}: {wins}/100");
    }
}

#[test]
fn demos_round_trip_and_replay_exactly() {
    let mut e = env(TaskId::NeedlePick);
    let demos = collect_demos(&mut e, 3, 20).unwrap();
    assert_eq!(demos.episodes.len(), 3);
    assert!(demos.episodes.iter().all(|ep| ep.last().unwrap().is_success));
    assert_eq!(demos.header.seeds.len(), 3);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("demos.jsonl");
    write_demos(&path, &demos).unwrap();
    let back = load_demos(&path, e.config()).unwrap();
    assert_eq!(back, demos);
    assert!(replay_matches(&mut e, &back).unwrap());

    // A flipped digit anywhere in the payload.
    let text = std::fs::read_to_string(&path).unwrap();
    let (head, body) = text.split_once('\n').unwrap();
    let k = body.find("\"reward\":").unwrap() + "\"reward\":".len();
    let mut bytes = body.as_bytes().to_vec();
    bytes[k + 1] = if bytes[k + 1] == b'1' { b'2' } else { b'1' };
    let corrupted = dir.path().join("corrupted.jsonl");
    std::fs::write(&corrupted, format!("{head}\n{}", String::from_utf8(bytes).unwrap())).unwrap();
    assert!(matches!(load_demos(&corrupted, e.config()), Err(SimError::DemoRejected(_))));

    let mut other = TaskConfig::new(TaskId::NeedlePick);
    other.epsilon = 0.004;
    assert!(matches!(load_demos(&path, &other), Err(SimError::DemoRejected(_))));
}

#[test]
fn collection_fails_when_the_policy_cannot_succeed() {
    let mut cfg = TaskConfig::new(TaskId::NeedleReach);
    cfg.horizon = 1;
    let mut e = TaskEnv::new(cfg).unwrap();
    match collect_demos(&mut e, 2, 0) {
        Err(SimError::InsufficientSuccess { successes, attempts, needed }) => {
            assert_eq!((successes, attempts, needed), (0, 6, 2));
        }
        other => panic!("{other:?}"),
    }
}
