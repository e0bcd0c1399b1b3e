//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `acceptance [--only name,name] [--out DIR]`. The learning criteria train
//! real agents and take on the order of an hour and a half on one core.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Parser;
use nalgebra::{Isometry3, UnitQuaternion, Vector3, Vector6};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use surgisim::demos::collect_demos;
use surgisim::envs::{compute_reward, TaskConfig, TaskEnv, TaskId};
use surgisim::kinematics::{
    ecm_chain, inverse_kinematics, jacobian, pose_error, psm_chain, tool_pose, top_down, ArmKind, ArmModel,
    ChainSpec, EcmParams, IkConfig, JointVector, Pose, PsmParams,
};
use surgisim::physics::{
    ArmCommand, Collider, GraspMode, GraspPhase, JawGeometry, MaterialParams, RigidBody, World, WorldConfig,
};
use surgisim_cli::commands::bench;
use surgisim_rl::train::{evaluate, grasp_mode_label, run_episode, write_metrics_csv, Greedy, RandomPolicy, Scripted, EVAL_SEED_BASE};
use surgisim_rl::{cross_eval_matrix, Agent, AgentConfig, Algo, Batch, EpochMetrics, Episode, ReplayBuffer, TrainConfig};

type Res<T> = Result<T, Box<dyn std::error::Error>>;

const G: f64 = 9.81;

#[derive(Parser)]
struct Args {
    /// Comma-separated subset of criteria to run.
    #[arg(long, value_delimiter = ',')]
    only: Vec<String>,
    /// Metrics and matrices are written here.
    #[arg(long, default_value = "acceptance-out")]
    out: PathBuf,
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

/// Training runs shared between criteria.
struct Ctx {
    out: PathBuf,
    pick_demo_runs: HashMap<String, Vec<(Agent, Vec<EpochMetrics>)>>,
}

const CRITERIA: [&str; 9] = [
    "kinematics",
    "physics",
    "grasp",
    "throughput",
    "scripted",
    "learning_internals",
    "rl_reproduction",
    "active_track",
    "cross_eval",
];

fn main() {
    let args = Args::parse();
    for name in &args.only {
        if !CRITERIA.contains(&name.as_str()) {
            eprintln!("unknown criterion '{name}'; choose from {}", CRITERIA.join(", "));
            std::process::exit(2);
        }
    }
    std::fs::create_dir_all(&args.out).expect("output directory");
    let mut ctx = Ctx {
        out: args.out.clone(),
        pick_demo_runs: HashMap::new(),
    };
    let t0 = Instant::now();
    let (mut passed, mut ran) = (0, 0);
    for name in CRITERIA {
        if !args.only.is_empty() && !args.only.iter().any(|n| n == name) {
            continue;
        }
        let start = Instant::now();
        let result = match name {
            "kinematics" => kinematics(),
            "physics" => physics(),
            "grasp" => grasp(),
            "throughput" => throughput(),
            "scripted" => scripted(),
            "learning_internals" => learning_internals(),
            "rl_reproduction" => rl_reproduction(&mut ctx),
            "active_track" => active_track(&ctx),
            "cross_eval" => cross_eval(&mut ctx),
            _ => unreachable!(),
        };
        let v = result.unwrap_or_else(|e| verdict(false, format!("error: {e}")));
        ran += 1;
        passed += v.pass as usize;
        println!(
            "{} {name}: {} [{:.0} s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("{passed}/{ran} criteria passed in {:.1} min", t0.elapsed().as_secs_f64() / 60.0);
    std::process::exit(if passed == ran { 0 } else { 1 });
}

fn random_q(chain: &ChainSpec, rng: &mut ChaCha8Rng) -> JointVector {
    JointVector {
        values: chain.limits.iter().map(|[lo, hi]| rng.random_range(*lo..=*hi)).collect(),
        arm: chain.arm,
    }
}

/// FK/IK round trip (< 1e-6), Jacobian against central differences (< 1e-5),
/// ECM roll leaves the camera position fixed (< 1e-9 m).
fn kinematics() -> Res<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut ik_worst, mut jac_worst, mut roll_worst) = (0.0f64, 0.0f64, 0.0f64);
    let ik = IkConfig::default();
    for chain in [psm_chain(&PsmParams::default()), ecm_chain(&EcmParams::default())] {
        for _ in 0..1000 {
            let q = random_q(&chain, &mut rng);
            let target = tool_pose(&chain, &q)?;
            let seed = JointVector {
                values: q.values.iter().map(|v| v + rng.random_range(-0.05..0.05)).collect(),
                arm: chain.arm,
            };
            let sol = inverse_kinematics(&chain, &target, &seed, &ik)?;
            let err = pose_error(&tool_pose(&chain, &sol.q)?, &target);
            ik_worst = ik_worst.max(err.fixed_rows::<3>(0).norm()).max(err.fixed_rows::<3>(3).norm());
        }
        let h = 1e-6;
        for _ in 0..200 {
            let q = random_q(&chain, &mut rng);
            let j = jacobian(&chain, &q)?;
            for i in 0..chain.dof() {
                let (mut qp, mut qm) = (q.clone(), q.clone());
                qp[i] += h;
                qm[i] -= h;
                let (tp, tm) = (tool_pose(&chain, &qp)?, tool_pose(&chain, &qm)?);
                let lin = (tp.translation.vector - tm.translation.vector) / (2.0 * h);
                let ang = (tp.rotation * tm.rotation.inverse()).scaled_axis() / (2.0 * h);
                let fd = Vector6::new(lin.x, lin.y, lin.z, ang.x, ang.y, ang.z);
                jac_worst = jac_worst.max((fd - j.column(i)).abs().max());
            }
        }
    }
    let ecm = ecm_chain(&EcmParams::default());
    for _ in 0..1000 {
        let mut q = random_q(&ecm, &mut rng);
        let a = tool_pose(&ecm, &q)?;
        q[3] = rng.random_range(ecm.limits[3][0]..=ecm.limits[3][1]);
        let b = tool_pose(&ecm, &q)?;
        roll_worst = roll_worst.max((a.translation.vector - b.translation.vector).norm());
    }
    Ok(verdict(
        ik_worst < 1e-6 && jac_worst < 1e-5 && roll_worst < 1e-9,
        format!("IK round trip {ik_worst:.1e} (<1e-6), Jacobian {jac_worst:.1e} (<1e-5), ECM roll shift {roll_worst:.1e} m (<1e-9)"),
    ))
}

fn floor(world: &mut World, tilt: f64, mu: f64) -> Res<usize> {
    let pose = Isometry3::from_parts(
        Vector3::zeros().into(),
        UnitQuaternion::from_axis_angle(&Vector3::x_axis(), tilt),
    );
    Ok(world.add_body(RigidBody::new_static("floor", pose, Collider::plane(), MaterialParams::with_friction(mu)))?)
}

fn cube(name: &str, pose: Pose, half: f64, mass: f64, material: MaterialParams) -> RigidBody {
    RigidBody::new_dynamic(name, pose, Collider::cuboid(Vector3::repeat(half)), material, mass)
}

/// Incline statics at 5° for μ ∈ {0, 0.05, 0.5}; resting penetration;
/// friction cone and energy over 10k substeps.
fn physics() -> Res<Verdict> {
    let tilt = 5f64.to_radians();
    let dt = WorldConfig::default().dt_sub;
    let mut notes = Vec::new();
    let mut ok = true;
    for mu in [0.0, 0.05, 0.5] {
        let mut w = World::new(WorldConfig::default())?;
        floor(&mut w, tilt, mu)?;
        let rot = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), tilt);
        let pose = Isometry3::from_parts((rot * Vector3::new(0.0, 0.0, 0.01)).into(), rot);
        let b = w.add_body(cube("b", pose, 0.01, 0.01, MaterialParams::with_friction(mu)))?;
        for _ in 0..200 {
            w.substep(&[])?;
        }
        let v = w.bodies[b].linear_velocity.norm();
        let slides = mu < tilt.tan();
        let good = if slides {
            // a = g (sin θ − μ cos θ)
            let expected = G * (tilt.sin() - mu * tilt.cos()) * dt * 200.0;
            (v - expected).abs() < 0.02 * expected
        } else {
            v < 1e-3
        };
        ok &= good;
        notes.push(format!("μ={mu}: |v|={v:.2e} {}", if slides { "slides" } else { "static" }));
    }

    let mut w = World::new(WorldConfig::default())?;
    floor(&mut w, 0.0, 0.5)?;
    let b = w.add_body(cube("b", Pose::translation(0.0, 0.0, 0.0105), 0.01, 0.01, MaterialParams::default()))?;
    for _ in 0..100 {
        w.step_control(&[])?;
    }
    let pen = -w.bodies[b].aabb().ok_or("no aabb")?.0.z;
    ok &= pen < 1e-3;

    let mut w = World::new(WorldConfig::default())?;
    floor(&mut w, 0.0, 0.6)?;
    let material = MaterialParams::with_friction(0.4);
    let tilted = |x: f64, z: f64, a: f64| {
        Isometry3::from_parts(Vector3::new(x, 0.0, z).into(), UnitQuaternion::from_euler_angles(a, 0.5 * a, 0.0))
    };
    w.add_body(cube("a", tilted(0.0, 0.03, 0.3), 0.01, 0.01, material))?;
    w.add_body(cube("b", tilted(0.05, 0.02, -0.2), 0.008, 0.005, material))?;
    let c = w.add_body(cube("c", tilted(-0.05, 0.012, 0.0), 0.01, 0.01, material))?;
    w.bodies[c].linear_velocity = Vector3::new(0.2, 0.1, 0.0);
    let scale = w.mechanical_energy().abs().max(1e-3);
    let mut prev = w.mechanical_energy();
    let (mut rises, mut cone) = (0, 0);
    for _ in 0..10_000 {
        w.substep(&[])?;
        let e = w.mechanical_energy();
        rises += (e > prev + 1e-6 * scale) as usize;
        prev = e;
        cone += w
            .last_impulses
            .iter()
            .filter(|i| i.normal < 0.0 || i.tangent.norm() > i.mu * i.normal + 1e-9)
            .count();
    }
    ok &= rises == 0 && cone == 0;
    Ok(verdict(
        ok,
        format!(
            "{}; resting penetration {:.2e} m (<1e-3); 10k substeps: {rises} energy rises, {cone} cone violations",
            notes.join(", "),
            pen
        ),
    ))
}

struct Rig {
    world: World,
    psm: usize,
    object: usize,
}

fn solve_q(world: &World, psm: usize, p: Vector3<f64>) -> Res<JointVector> {
    let target = Isometry3::from_parts(p.into(), top_down(0.0));
    Ok(world.instruments[psm].arm.solve_world(&target, &IkConfig::default())?.q)
}

/// Horizontal rod on the floor with the open jaw around it.
fn rod_rig(mode: GraspMode, mass: f64, mu: f64, tool_height: f64) -> Res<Rig> {
    let mut world = World::new(WorldConfig {
        grasp_mode: mode,
        ..WorldConfig::default()
    })?;
    floor(&mut world, 0.0, 0.5)?;
    let radius = 0.0008;
    let collider = Collider::capsule(radius, Vector3::new(-0.01, 0.0, 0.0), Vector3::new(0.01, 0.0, 0.0));
    let object = world.add_body(RigidBody::new_dynamic(
        "rod",
        Pose::translation(0.0, 0.0, radius),
        collider,
        MaterialParams::with_friction(mu),
        mass,
    ))?;
    world.graspable.push(object);
    let mut q = JointVector::zeros(ArmKind::Psm);
    q[2] = 0.05;
    let arm = ArmModel::new(psm_chain(&PsmParams::default()), Pose::translation(0.0, 0.0, 0.1), q)?;
    let psm = world.add_instrument("psm1", arm, Some(JawGeometry::default()))?;
    for pad in world.instruments[psm].jaw.as_ref().ok_or("no jaw")?.pads {
        world.bodies[pad].material.friction_mu = mu;
    }
    let q = solve_q(&world, psm, Vector3::new(0.0, 0.0, tool_height))?;
    world.set_instrument_state(psm, &q, None)?;
    Ok(Rig { world, psm, object })
}

fn hold(rig: &mut Rig, jaw: f64, steps: usize) -> Res<()> {
    let q = rig.world.instruments[rig.psm].arm.current_q.clone();
    for _ in 0..steps {
        rig.world.step_control(&[ArmCommand { q: q.clone(), jaw }])?;
    }
    Ok(())
}

fn phase(rig: &Rig) -> Res<GraspPhase> {
    Ok(rig.world.grasp_state(rig.psm).ok_or("no grasp state")?.phase.clone())
}

/// Pinch hold iff 2μN ≥ mg across the critical friction; Approx@2mm
/// attaches exactly below the 2 mm threshold.
fn grasp() -> Res<Verdict> {
    let mass = 0.02;
    let critical = mass * G / (2.0 * JawGeometry::default().pinch_force);
    let mut ok = true;
    let mut sweep = Vec::new();
    for factor in [0.5, 0.8, 0.95, 1.05, 1.25, 2.0, 4.0] {
        let mut rig = rod_rig(GraspMode::Interact, mass, critical * factor, 0.0008)?;
        hold(&mut rig, -1.0, 15)?;
        let pinched = matches!(phase(&rig)?, GraspPhase::PinchHold { .. });
        let start = rig.world.tool_pose(rig.psm).translation.vector;
        for k in 1..=400 {
            let q = solve_q(&rig.world, rig.psm, start + Vector3::new(0.0, 0.0, 0.01 * k as f64 / 400.0))?;
            rig.world.substep(&[q])?;
        }
        let z = rig.world.bodies[rig.object].pose.translation.z;
        let held = matches!(phase(&rig)?, GraspPhase::PinchHold { .. }) && z > 0.0008 + 0.009;
        let slipped = !matches!(phase(&rig)?, GraspPhase::PinchHold { .. }) && z < 0.0008 + 0.002;
        ok &= pinched && if factor > 1.0 { held } else { slipped };
        sweep.push(format!("{factor}×:{}", if held { "hold" } else if slipped { "slip" } else { "?" }));
    }
    let mut attach = Vec::new();
    for (gap, expect) in [(0.0015, true), (0.00199, true), (0.00201, false), (0.0025, false)] {
        let mut rig = rod_rig(GraspMode::approx_mm(2.0), 0.002, 0.5, 0.0016 + gap)?;
        hold(&mut rig, -1.0, 1)?;
        let got = matches!(phase(&rig)?, GraspPhase::Attached { .. });
        ok &= got == expect;
        attach.push(format!("{:.2}mm:{}", gap * 1e3, if got { "attach" } else { "free" }));
    }
    Ok(verdict(
        ok,
        format!("pinch μ/μc sweep [{}]; Approx@2mm [{}]", sweep.join(" "), attach.join(" ")),
    ))
}

fn throughput() -> Res<Verdict> {
    let r = bench(&TaskConfig::new(TaskId::NeedleReach), 10_000, 3, 0).map_err(|e| e.to_string())?;
    Ok(verdict(
        r.mean_hz >= 150.0,
        format!(
            "NeedleReach random actions {:.0} Hz over 3×10000 steps (target ≥150, floor ≥75) on {} ({} logical CPUs, {}/{})",
            r.mean_hz, r.machine.cpu, r.machine.logical_cpus, r.machine.os, r.machine.arch
        ),
    ))
}

/// Scripted policies over 100 seeded resets in Interact mode.
fn scripted() -> Res<Verdict> {
    let mut ok = true;
    let mut parts = Vec::new();
    for task in TaskId::ALL {
        let mut env = TaskEnv::new(TaskConfig::new(task))?;
        let horizon = env.config().horizon;
        let (mut wins, mut too_long) = (0, 0);
        for seed in 0..100 {
            let o = run_episode(&mut env, &mut Scripted::default(), seed)?;
            wins += o.success as usize;
            too_long += (o.records.len() > horizon) as usize;
        }
        let need = if matches!(task, TaskId::NeedleReach | TaskId::EcmReach) { 100 } else { 95 };
        ok &= wins >= need && too_long == 0;
        parts.push(format!("{task} {wins}"));
    }
    Ok(verdict(ok, format!("successes/100: {}", parts.join(", "))))
}

fn agent_fd_error(rng: &mut ChaCha8Rng) -> f64 {
    let cfg = AgentConfig {
        hidden: vec![6, 5],
        gamma: 0.98,
        actor_lr: 1e-3,
        critic_lr: 1e-3,
        polyak: 0.95,
        action_l2: 0.7,
        bc_weight: 0.3,
        q_range: AgentConfig::q_range_for(0.98, -1.0, 0.0),
    };
    let mut agent = Agent::new(4, 3, 2, cfg, rng);
    for net in [&mut agent.actor, &mut agent.critic] {
        let p: Vec<f64> = net.params().iter().map(|_| rng.random_range(-0.8..0.8)).collect();
        net.set_params(&p);
    }
    let n = 8;
    let mut m = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0));
    let batch = Batch {
        obs: m(n, 4),
        goal: m(n, 3),
        action: m(n, 2),
        reward: Array1::from_shape_fn(n, |i| if i % 3 == 0 { 0.0 } else { -1.0 }),
        next_obs: m(n, 4),
        next_achieved: m(n, 3),
        terminal: Array1::from_shape_fn(n, |i| if i % 4 == 0 { 1.0 } else { 0.0 }),
        relabeled: vec![false; n],
        is_demo: (0..n).map(|i| i % 2 == 0).collect(),
    };
    let h = 1e-6;
    let rel = |a: f64, num: f64| (a - num).abs() / (a.abs().max(num.abs()) + 1e-5);
    let mut worst = 0.0f64;
    let y = agent.td_targets(&batch);
    let (_, g) = agent.critic_loss(&batch, &y);
    let p0 = agent.critic.params();
    for (k, a) in g.flat().into_iter().enumerate() {
        let mut ag = agent.clone();
        let mut p = p0.clone();
        p[k] += h;
        ag.critic.set_params(&p);
        let up = ag.critic_loss(&batch, &y).0;
        p[k] -= 2.0 * h;
        ag.critic.set_params(&p);
        let down = ag.critic_loss(&batch, &y).0;
        worst = worst.max(rel(a, (up - down) / (2.0 * h)));
    }
    let (_, _, g) = agent.actor_loss(&batch);
    let p0 = agent.actor.params();
    for (k, a) in g.flat().into_iter().enumerate() {
        let mut ag = agent.clone();
        let mut p = p0.clone();
        p[k] += h;
        ag.actor.set_params(&p);
        let up = ag.actor_loss(&batch).0;
        p[k] -= 2.0 * h;
        ag.actor.set_params(&p);
        let down = ag.actor_loss(&batch).0;
        worst = worst.max(rel(a, (up - down) / (2.0 * h)));
    }
    worst
}

/// Relabeled rewards equal a fresh reward computation; analytic gradients
/// match central differences; seeded training repeats bit for bit.
fn learning_internals() -> Res<Verdict> {
    let cfg = TaskConfig::new(TaskId::NeedleReach);
    let mut env = TaskEnv::new(cfg.clone())?;
    let mut buf = ReplayBuffer::new(100_000, 4);
    let mut policy = RandomPolicy {
        rng: ChaCha8Rng::seed_from_u64(1),
        dim: env.spec().action_dim,
    };
    for seed in 0..30 {
        let o = run_episode(&mut env, &mut policy, seed)?;
        buf.push(Episode::from_records(&o.records, cfg.horizon, false))?;
    }
    let reward = |a: &[f64], g: &[f64]| compute_reward(&cfg, a, g);
    let b = buf.her_sample(4096, Some(&reward), &mut ChaCha8Rng::seed_from_u64(2))?;
    let mut mismatches = 0;
    for i in 0..b.len() {
        let r = compute_reward(&cfg, &b.next_achieved.row(i).to_vec(), &b.goal.row(i).to_vec())?;
        mismatches += (r.to_bits() != b.reward[i].to_bits()) as usize;
    }
    let relabeled = b.relabeled.iter().filter(|r| **r).count() as f64 / b.len() as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let fd = (0..3).map(|_| agent_fd_error(&mut rng)).fold(0.0, f64::max);

    let mut tc = TrainConfig::new(Algo::Her, 11);
    tc.epochs = 2;
    tc.episodes_per_epoch = 4;
    tc.updates_per_cycle = 5;
    tc.batch_size = 32;
    tc.eval_episodes = 3;
    tc.agent.hidden = vec![16, 16];
    let run = || -> Res<(Agent, Vec<EpochMetrics>)> {
        let (a, mut rows) = surgisim_rl::train(&cfg, &tc, None, |_, _| Ok(()))?;
        rows.iter_mut().for_each(|r| r.wall_time_s = 0.0);
        Ok((a, rows))
    };
    let same = run()? == run()?;
    Ok(verdict(
        mismatches == 0 && fd < 1e-4 && same,
        format!(
            "{mismatches}/{} reward mismatches ({:.1}% relabeled), gradient rel. error {fd:.1e} (<1e-4), repeat run identical: {same}",
            b.len(),
            100.0 * relabeled
        ),
    ))
}

/// Trains `seeds` runs and writes each metrics table under `out`.
fn train_runs(
    ctx: &Ctx,
    label: &str,
    task: &TaskConfig,
    config: &TrainConfig,
    seeds: &[u64],
    demos: Option<&surgisim::demos::DemoSet>,
) -> Res<Vec<(Agent, Vec<EpochMetrics>)>> {
    let mut out = Vec::new();
    for &seed in seeds {
        let c = TrainConfig { seed, ..config.clone() };
        let (agent, rows) = surgisim_rl::train(task, &c, demos, |_, m| {
            eprintln!("  {label} seed {seed} epoch {:>2}: success {:.2}, step reward {:.3}", m.epoch, m.success_rate, m.mean_step_reward);
            Ok(())
        })?;
        write_metrics_csv(&ctx.out.join(format!("{label}_seed{seed}.csv")), &rows)?;
        out.push((agent, rows));
    }
    Ok(out)
}

/// Success averaged over seeds, per epoch.
fn mean_curve(runs: &[(Agent, Vec<EpochMetrics>)]) -> Vec<f64> {
    let epochs = runs.iter().map(|(_, r)| r.len()).min().unwrap_or(0);
    (0..epochs)
        .map(|e| runs.iter().map(|(_, r)| r[e].success_rate).sum::<f64>() / runs.len() as f64)
        .collect()
}

/// First epoch (1-based) whose mean success reaches `level`.
fn first_reaching(curve: &[f64], level: f64) -> Option<usize> {
    curve.iter().position(|s| *s >= level).map(|i| i + 1)
}

fn pick_demo_runs(ctx: &mut Ctx, mode: GraspMode) -> Res<Vec<(Agent, Vec<EpochMetrics>)>> {
    let key = grasp_mode_label(&mode);
    if let Some(r) = ctx.pick_demo_runs.get(&key) {
        return Ok(r.clone());
    }
    let task = TaskConfig::new(TaskId::NeedlePick).with_grasp_mode(mode);
    let demos = collect_demos(&mut TaskEnv::new(task.clone())?, 100, 0)?;
    let config = TrainConfig::new(Algo::HerDemo, 0);
    let runs = train_runs(ctx, &format!("needle_pick_her_demo_{key}"), &task, &config, &[1, 2, 3], Some(&demos))?;
    ctx.pick_demo_runs.insert(key, runs.clone());
    Ok(runs)
}

/// Learning-curve properties: success is the mean over seeds of the
/// per-epoch evaluation (20 episodes, no exploration).
fn rl_reproduction(ctx: &mut Ctx) -> Res<Verdict> {
    let mut ok = true;
    let mut parts = Vec::new();
    for (task, seeds, epochs, level) in [
        (TaskId::NeedleReach, &[1u64, 2, 3][..], 30, 0.9),
        (TaskId::EcmReach, &[1, 2, 3][..], 30, 0.9),
        (TaskId::MisOrient, &[1][..], 30, 0.8),
        (TaskId::StaticTrack, &[1][..], 30, 0.8),
    ] {
        let mut c = TrainConfig::new(Algo::Her, 0);
        c.epochs = epochs;
        let runs = train_runs(ctx, &format!("{}_her", task.name()), &TaskConfig::new(task), &c, seeds, None)?;
        let curve = mean_curve(&runs);
        let hit = first_reaching(&curve, level);
        ok &= hit.is_some();
        parts.push(format!(
            "HER {task} ≥{level} at epoch {}",
            hit.map_or("never".into(), |e| e.to_string())
        ));
    }

    let mut c = TrainConfig::new(Algo::Ddpg, 0);
    c.epochs = 50;
    let runs = train_runs(ctx, "NeedlePick_ddpg", &TaskConfig::new(TaskId::NeedlePick), &c, &[1], None)?;
    let peak = mean_curve(&runs).into_iter().fold(0.0, f64::max);
    ok &= peak <= 0.1;
    parts.push(format!("DDPG NeedlePick max {peak:.2} (≤0.10)"));

    let runs = pick_demo_runs(ctx, GraspMode::Interact)?;
    let curve = mean_curve(&runs);
    let hit = first_reaching(&curve[..curve.len().min(50)], 0.5);
    ok &= hit.is_some();
    parts.push(format!(
        "HER+DEMO NeedlePick ≥0.5 at epoch {} (best {:.2})",
        hit.map_or("never".into(), |e| e.to_string()),
        curve.iter().cloned().fold(0.0, f64::max)
    ));
    Ok(verdict(ok, parts.join("; ")))
}

/// DDPG on the dense tracking reward; the trained actor is evaluated over
/// 20 full episodes.
fn active_track(ctx: &Ctx) -> Res<Verdict> {
    let task = TaskConfig::new(TaskId::ActiveTrack);
    let mut c = TrainConfig::new(Algo::Ddpg, 0);
    c.epochs = ACTIVE_TRACK_EPOCHS;
    let runs = train_runs(ctx, "ActiveTrack_ddpg", &task, &c, &[1], None)?;
    let mut env = TaskEnv::new(task)?;
    let r = evaluate(&mut env, &mut Greedy(&runs[0].0), 20, EVAL_SEED_BASE)?;
    Ok(verdict(
        r.mean_step_reward >= 0.7,
        format!(
            "mean per-step reward {:.3} (≥0.7) over 20 episodes after {ACTIVE_TRACK_EPOCHS} epochs, success {:.2}",
            r.mean_step_reward, r.success_rate
        ),
    ))
}

const ACTIVE_TRACK_EPOCHS: usize = 20;

/// Interact and Approx@2mm policies (3 seeds each) under four test modes,
/// 200 episodes per policy and cell.
fn cross_eval(ctx: &mut Ctx) -> Res<Verdict> {
    let interact = pick_demo_runs(ctx, GraspMode::Interact)?;
    let approx = pick_demo_runs(ctx, GraspMode::approx_mm(2.0))?;
    let policies = vec![
        (GraspMode::Interact, interact.into_iter().map(|(a, _)| a).collect()),
        (GraspMode::approx_mm(2.0), approx.into_iter().map(|(a, _)| a).collect()),
    ];
    let modes = [
        GraspMode::approx_mm(1.0),
        GraspMode::approx_mm(2.0),
        GraspMode::approx_mm(3.0),
        GraspMode::Interact,
    ];
    let m = cross_eval_matrix(&TaskConfig::new(TaskId::NeedlePick), &policies, &modes, 200, EVAL_SEED_BASE)?;
    let csv = m.to_csv();
    write_text(&ctx.out.join("cross_eval.csv"), &csv)?;
    let cell = |row: usize, col: usize| m.cells[row][col].mean;
    let drop_interact = cell(0, 3) - cell(0, 1);
    let drop_approx = cell(1, 1) - cell(1, 3);
    let a = drop_interact < drop_approx;
    let b = cell(1, 0) <= cell(1, 1) && cell(1, 1) <= cell(1, 2);
    Ok(verdict(
        a && b,
        format!(
            "(a) drop Interact→Approx@2mm {:.1} vs Approx@2mm→Interact {:.1}: {a}; (b) Approx@2mm row {:.1} ≤ {:.1} ≤ {:.1}: {b}; matrix {}",
            100.0 * drop_interact,
            100.0 * drop_approx,
            100.0 * cell(1, 0),
            100.0 * cell(1, 1),
            100.0 * cell(1, 2),
            csv.trim().replace('\n', " | ")
        ),
    ))
}

fn write_text(path: &Path, text: &str) -> Res<()> {
    std::fs::write(path, text)?;
    Ok(())
}
