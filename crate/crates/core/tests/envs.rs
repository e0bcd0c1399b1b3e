use nalgebra::{UnitQuaternion, Vector2, Vector3};
use surgisim::demos::{plan_waypoints, rollout};
use surgisim::envs::{
    active_track_reward, compute_reward, ecm_arm_model, generate_target_path, read_episode_jsonl, write_episode_jsonl,
    CameraModel, InitStage, TargetPath, TaskConfig, TaskEnv, TaskId, IMAGE_CENTER,
};
use surgisim::kinematics::{ArmKind, JointVector, Pose};
use surgisim::SimError;

fn env(task: TaskId) -> TaskEnv {
    TaskEnv::new(TaskConfig::new(task)).unwrap()
}

fn zeros(env: &TaskEnv) -> Vec<f64> {
    vec![0.0; env.spec().action_dim]
}

/// Camera at the origin looking along world +y, image up = world +z.
fn level_camera(roll: f64) -> Pose {
    let r = nalgebra::Rotation3::from_basis_unchecked(&[Vector3::x(), -Vector3::z(), Vector3::y()]);
    let base = UnitQuaternion::from_rotation_matrix(&r);
    Pose::from_parts(
        Vector3::zeros().into(),
        base * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), roll),
    )
}

#[test]
fn reset_is_seed_deterministic() {
    for task in TaskId::ALL {
        let (mut a, mut b) = (env(task), env(task));
        let oa = a.reset(11).unwrap();
        assert_eq!(oa, b.reset(11).unwrap(), "{task}");
        assert_ne!(oa, b.reset(12).unwrap(), "{task}");
        let spec = a.spec();
        assert_eq!(oa.observation.len(), spec.obs_dim);
        assert_eq!(oa.desired_goal.len(), spec.goal_dim);
    }
}

#[test]
fn needle_reach_goal_sits_above_the_needle() {
    let mut e = env(TaskId::NeedleReach);
    for seed in 0..10 {
        let obs = e.reset(seed).unwrap();
        let needle = e.world().bodies[e.object().unwrap()].pose.translation.vector;
        let expected = needle + Vector3::new(0.0, 0.0, 0.005);
        assert!((Vector3::from_column_slice(&obs.desired_goal) - expected).norm() < 1e-12);
    }
}

#[test]
fn bimanual_peg_transfer_starts_with_psm2_pinching() {
    let mut e = env(TaskId::BiPegTransfer);
    assert_eq!(e.config().init_stage, InitStage::Pick);
    e.reset(3).unwrap();
    assert!(e.is_pinch_hold(1));
    assert!(!e.holds_object(0));
}

#[test]
fn zero_action_holds_the_tool_and_episode_times_out() {
    let mut e = env(TaskId::NeedleReach);
    e.reset(5).unwrap();
    let start = e.world().tool_pose(e.psms()[0]).translation.vector;
    for t in 1..=50 {
        let r = e.step(&zeros(&e)).unwrap();
        let here = e.world().tool_pose(e.psms()[0]).translation.vector;
        assert!((here - start).norm() < 1e-5, "step {t}");
        assert_eq!(r.done, t == 50);
        assert_eq!(r.info.timeout, t == 50);
    }
    assert!(matches!(e.step(&zeros(&e)), Err(SimError::Contract(_))));
}

#[test]
fn step_contract_errors() {
    let mut e = env(TaskId::NeedlePick);
    assert!(matches!(e.step(&zeros(&e)), Err(SimError::Contract(_))));
    e.reset(0).unwrap();
    assert!(matches!(e.step(&[0.0]), Err(SimError::DimensionMismatch { .. })));
    let mut bad = zeros(&e);
    bad[0] = f64::NAN;
    assert!(e.step(&bad).is_err());
}

#[test]
fn actions_are_clipped_to_the_unit_box() {
    let (mut a, mut b) = (env(TaskId::EcmReach), env(TaskId::EcmReach));
    a.reset(2).unwrap();
    b.reset(2).unwrap();
    let ra = a.step(&[1.0, -1.0, 1.0]).unwrap();
    let rb = b.step(&[7.0, -3.0, 1.5]).unwrap();
    assert_eq!(ra.obs, rb.obs);
}

#[test]
fn goal_reward_examples() {
    let reach = TaskConfig::new(TaskId::NeedleReach);
    let g = [0.01, 0.02, 0.03];
    assert_eq!(compute_reward(&reach, &g, &g).unwrap(), 0.0);
    assert_eq!(compute_reward(&reach, &[0.014, 0.02, 0.03], &g).unwrap(), 0.0);
    assert_eq!(compute_reward(&reach, &[0.016, 0.02, 0.03], &g).unwrap(), -1.0);
    assert!(matches!(
        compute_reward(&reach, &[0.0, 0.0], &g),
        Err(SimError::DimensionMismatch { .. })
    ));

    let peg = TaskConfig::new(TaskId::PegTransfer);
    let seat = [0.03, 0.0, 0.008];
    assert_eq!(compute_reward(&peg, &[0.033, 0.0, 0.0085], &seat).unwrap(), 0.0);
    assert_eq!(compute_reward(&peg, &[0.03, 0.0, 0.011], &seat).unwrap(), -1.0);

    let mis = TaskConfig::new(TaskId::MisOrient);
    assert_eq!(compute_reward(&mis, &[0.005], &[0.0]).unwrap(), 0.0);
    assert_eq!(compute_reward(&mis, &[-0.02], &[0.0]).unwrap(), -1.0);

    let track = TaskConfig::new(TaskId::StaticTrack);
    let center = [0.5, 0.5, 0.0];
    assert_eq!(compute_reward(&track, &[0.505, 0.505, 0.0], &center).unwrap(), 0.0);
    assert_eq!(compute_reward(&track, &[0.505, 0.505, 0.02], &center).unwrap(), -1.0);
    assert_eq!(compute_reward(&track, &[0.52, 0.5, 0.0], &center).unwrap(), -1.0);

    let regrasp = TaskConfig::new(TaskId::NeedleRegrasp);
    let goal = [0.0, 0.0, 0.05, 1.0];
    assert_eq!(compute_reward(&regrasp, &[0.0, 0.0, 0.05, 1.0], &goal).unwrap(), 0.0);
    assert_eq!(compute_reward(&regrasp, &[0.0, 0.0, 0.05, 0.0], &goal).unwrap(), -1.0);
}

#[test]
fn active_track_reward_examples() {
    assert!((active_track_reward(&IMAGE_CENTER, 0.0) - 1.0).abs() < 1e-12);
    let r = active_track_reward(&Vector2::new(0.6, 0.5), 0.2);
    assert!((r - (1.0 - (0.1 + 0.1 * 0.2))).abs() < 1e-12);
    let cfg = TaskConfig::new(TaskId::ActiveTrack);
    let center = [0.5, 0.5, 0.0];
    assert!((compute_reward(&cfg, &[0.6, 0.5, 0.2], &center).unwrap() - 0.88).abs() < 1e-12);
    assert_eq!(compute_reward(&cfg, &[1.2, 0.5, 0.0], &center).unwrap(), -1.0);
    assert_eq!(compute_reward(&cfg, &[-1.0, -1.0, 0.0], &center).unwrap(), -1.0);
}

#[test]
fn pinhole_projection_matches_closed_form() {
    let cam = CameraModel::default();
    let f = 0.5 / 30f64.to_radians().tan();
    let pose = level_camera(0.0);
    for (d, z) in [(0.01, 0.1), (-0.02, 0.2), (0.05, 0.15)] {
        // World +x is image right, world +z is image up.
        let p = cam.project(&pose, &Vector3::new(d, z, 0.0));
        assert!((p.uv.x - (0.5 + f * d / z)).abs() < 1e-12);
        assert!((p.uv.y - 0.5).abs() < 1e-12);
        assert!((p.depth - z).abs() < 1e-12);
        let up = cam.project(&pose, &Vector3::new(0.0, z, d));
        assert!((up.uv.y - (0.5 - f * d / z)).abs() < 1e-12);
    }
    assert!(!cam.project(&pose, &Vector3::new(0.0, 0.1, 0.2)).in_view);
    assert!(!cam.project(&pose, &Vector3::new(0.0, -0.1, 0.0)).in_view);
}

#[test]
fn misorientation_tracks_camera_roll() {
    let cam = CameraModel::default();
    for roll in [0.3, -0.3, 1.0, -2.0] {
        let theta = cam.misorientation(&level_camera(roll)).unwrap();
        assert!((theta + roll).abs() < 1e-12, "roll {roll}: {theta}");
    }
    // Optical axis parallel to world z, up or down.
    let looking_down = Pose::from_parts(
        Vector3::zeros().into(),
        UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI),
    );
    assert!(matches!(
        cam.misorientation(&Pose::identity()),
        Err(SimError::UndefinedOrientation)
    ));
    assert!(matches!(cam.misorientation(&looking_down), Err(SimError::UndefinedOrientation)));
}

#[test]
fn ecm_outer_roll_shifts_misorientation_by_minus_delta() {
    let cam = CameraModel::default();
    let theta = |q: &[f64]| {
        let arm = ecm_arm_model(&JointVector::new(ArmKind::Ecm, q.to_vec()).unwrap()).unwrap();
        cam.misorientation(&cam.camera_pose(&arm.tool_pose_world())).unwrap()
    };
    for q in [[0.0, 0.0, 0.08, 0.0], [0.2, -0.1, 0.1, 0.3], [-0.3, 0.25, 0.06, -0.5]] {
        for delta in [0.05, -0.2, 0.4] {
            let mut moved = q;
            moved[3] += delta;
            let d = theta(&moved) - theta(&q);
            assert!((d + delta).abs() < 1e-9, "q {q:?} delta {delta}: {d}");
        }
    }
}

#[test]
fn misorient_roll_action_reduces_error_monotonically() {
    let mut e = env(TaskId::MisOrient);
    let obs = e.reset(4).unwrap();
    let mut theta = obs.achieved_goal[0];
    let sign = theta.signum();
    let mut last = theta.abs();
    for _ in 0..3 {
        if last < 0.1 {
            break;
        }
        let r = e.step(&[sign]).unwrap();
        theta = r.obs.achieved_goal[0];
        assert!(theta.abs() < last);
        assert!((last - theta.abs() - 0.1).abs() < 1e-6);
        last = theta.abs();
    }
}

#[test]
fn two_waypoint_path_is_a_constant_speed_line() {
    let a = Vector3::new(0.0, 0.0, 0.0);
    let b = Vector3::new(0.03, 0.04, 0.0);
    let path = TargetPath::new(vec![a, b], 0.01).unwrap();
    assert!((path.length() - 0.05).abs() < 1e-9);
    for k in 0..=50 {
        let t = k as f64 * 0.1;
        let p = path.position(t);
        let s = (0.01 * t).min(0.05);
        assert!((p - (a + (b - a) * (s / 0.05))).norm() < 1e-7, "t {t}");
    }
    // Turns around at the end.
    assert!((path.position(6.0) - (a + (b - a) * 0.8)).norm() < 1e-7);
}

#[test]
fn generated_path_moves_at_constant_speed() {
    let ws = surgisim::assets::Workspace {
        min: Vector3::new(-0.04, -0.04, 0.0),
        max: Vector3::new(0.04, 0.04, 0.0),
    };
    let path = generate_target_path(&ws, 6, 0.01, 9).unwrap();
    assert_eq!(path, generate_target_path(&ws, 6, 0.01, 9).unwrap());
    let dt = 0.01;
    let expected = 0.01 * dt;
    let steps = (path.length() / expected) as usize;
    for k in 0..steps.saturating_sub(1) {
        // Arc length of the step, from fine chords.
        let t0 = k as f64 * dt;
        let d: f64 = (0..50)
            .map(|j| {
                let a = path.position(t0 + dt * j as f64 / 50.0);
                (path.position(t0 + dt * (j + 1) as f64 / 50.0) - a).norm()
            })
            .sum();
        assert!((d - expected).abs() <= 0.01 * expected, "step {k}: {d}");
    }
    for w in path.waypoints.windows(2) {
        assert!((w[1] - w[0]).norm() >= 0.2 * (ws.max - ws.min).norm() - 1e-12);
    }
}

#[test]
fn floating_block_is_not_seated() {
    let mut e = env(TaskId::PegTransfer);
    let mut obs = e.reset(7).unwrap();
    let mut policy = plan_waypoints(&e).unwrap();
    // Stage 5 starts once the block hovers above the target peg.
    while policy.index < 5 {
        let a = policy.act(&obs).unwrap();
        obs = e.step(&a).unwrap().obs;
    }
    let (ach, des) = (&obs.achieved_goal, &obs.desired_goal);
    let lateral = ((ach[0] - des[0]).powi(2) + (ach[1] - des[1]).powi(2)).sqrt();
    assert!(lateral <= e.config().epsilon);
    assert!(ach[2] - des[2] > 0.01);
    assert!(!e.success_check().unwrap());
    assert_eq!(compute_reward(e.config(), ach, des).unwrap(), -1.0);
}

#[test]
fn gauze_pushed_to_a_floor_goal_is_not_retrieved() {
    let mut e = env(TaskId::GauzeRetrieve);
    e.reset(1).unwrap();
    let gauze = e.world().bodies[e.object().unwrap()].pose.translation.vector;
    let goal = gauze + Vector3::new(0.015, 0.0, 0.0);
    e.set_goal(vec![goal.x, goal.y, goal.z]).unwrap();
    let support = e.world().support_height;
    // Closed jaw: behind the pad at its mid height, then push along +x.
    let waypoints = [
        Vector3::new(gauze.x - 0.008, gauze.y, support + 0.02),
        Vector3::new(gauze.x - 0.008, gauze.y, support + 0.0015),
        Vector3::new(goal.x - 0.004, gauze.y, support + 0.0015),
    ];
    let mut done = false;
    for target in waypoints {
        for _ in 0..10 {
            let tool = e.world().tool_pose(e.psms()[0]).translation.vector;
            let d = (target - tool) / e.config().translation_scale;
            let a = [d.x.clamp(-1.0, 1.0), d.y.clamp(-1.0, 1.0), d.z.clamp(-1.0, 1.0), -1.0];
            done = e.step(&a).unwrap().done;
        }
    }
    assert!(!done);
    let obs = e.observe().unwrap();
    let moved = e.world().bodies[e.object().unwrap()].pose.translation.vector - gauze;
    assert!(moved.x > 0.005, "the push should move the gauze: {moved:?}");
    assert_eq!(compute_reward(e.config(), &obs.achieved_goal, &obs.desired_goal).unwrap(), 0.0);
    assert!(!e.ever_stabilized());
    assert!(!e.success_check().unwrap());
}

#[test]
fn reward_and_success_agree_along_rollouts() {
    let goal_based = TaskId::ALL.iter().copied().filter(|t| t.is_goal_based());
    for task in goal_based {
        let mut e = env(task);
        for seed in 0..3 {
            for record in rollout(&mut e, seed).unwrap() {
                assert_eq!(record.reward == 0.0, record.is_success, "{task} seed {seed} t {}", record.t);
            }
            // Random actions visit other states.
            let mut rng = surgisim_rng(seed);
            e.reset(seed + 100).unwrap();
            loop {
                let a: Vec<f64> = (0..e.spec().action_dim).map(|_| rng() * 2.0 - 1.0).collect();
                let r = e.step(&a).unwrap();
                assert_eq!(r.reward == 0.0, r.info.is_success, "{task} random t {}", e.steps());
                if r.done {
                    break;
                }
            }
        }
    }
}

/// Small deterministic generator for test actions.
fn surgisim_rng(seed: u64) -> impl FnMut() -> f64 {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    move || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 11) as f64 / (1u64 << 53) as f64
    }
}

#[test]
fn config_json_round_trip_and_validation() {
    for task in TaskId::ALL {
        let c = TaskConfig::new(task);
        assert_eq!(TaskConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
    }
    let mut bad = TaskConfig::new(TaskId::NeedleReach);
    bad.epsilon = 0.0;
    assert!(TaskConfig::from_json(&serde_json::to_string(&bad).unwrap()).is_err());
    let mut staged = TaskConfig::new(TaskId::NeedlePick);
    staged.init_stage = InitStage::Lift;
    assert!(staged.validate().is_err());
    assert_eq!("needle_pick".parse::<TaskId>().unwrap(), TaskId::NeedlePick);
    assert_eq!("BiPegTransfer".parse::<TaskId>().unwrap(), TaskId::BiPegTransfer);
}

#[test]
fn episode_log_round_trips() {
    let mut e = env(TaskId::NeedleReach);
    let records = rollout(&mut e, 3).unwrap();
    let mut buf = Vec::new();
    write_episode_jsonl(&mut buf, &records).unwrap();
    let back = read_episode_jsonl(std::str::from_utf8(&buf).unwrap()).unwrap();
    assert_eq!(back, records);
}

#[test]
fn active_track_target_follows_its_path() {
    let mut e = env(TaskId::ActiveTrack);
    e.reset(8).unwrap();
    let path = e.target_path().unwrap().clone();
    for k in 1..=5 {
        e.step(&[0.0; 4]).unwrap();
        let cube = e.world().bodies[e.target_cube().unwrap()].pose.translation.vector;
        assert!((cube - path.position(k as f64 * e.control_dt())).norm() < 1e-12);
    }
}
