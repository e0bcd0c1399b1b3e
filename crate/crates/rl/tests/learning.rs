use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use surgisim::envs::{compute_reward, TaskConfig, TaskEnv, TaskId};
use surgisim::physics::GraspMode;
use surgisim_rl::nn::{Activation, Mlp};
use surgisim_rl::train::{run_episode, RandomPolicy, Scripted, EVAL_SEED_BASE};
use surgisim_rl::{
    bc_q_filter_loss, cross_eval_matrix, evaluate, Agent, AgentConfig, Algo, Batch, Checkpoint, Episode,
    ReplayBuffer, RlError, TrainConfig, Trainer,
};

fn small_config() -> AgentConfig {
    AgentConfig {
        hidden: vec![6, 5],
        gamma: 0.98,
        actor_lr: 1e-3,
        critic_lr: 1e-3,
        polyak: 0.95,
        action_l2: 0.7,
        bc_weight: 0.3,
        q_range: AgentConfig::q_range_for(0.98, -1.0, 0.0),
    }
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, od: usize, gd: usize, ad: usize) -> Batch {
    let mut m = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0));
    Batch {
        obs: m(n, od),
        goal: m(n, gd),
        action: m(n, ad),
        reward: Array1::from_shape_fn(n, |i| if i % 3 == 0 { 0.0 } else { -1.0 }),
        next_obs: m(n, od),
        next_achieved: m(n, gd),
        terminal: Array1::from_shape_fn(n, |i| if i % 4 == 0 { 1.0 } else { 0.0 }),
        relabeled: vec![false; n],
        is_demo: (0..n).map(|i| i % 2 == 0).collect(),
    }
}

fn agent_with_stats(rng: &mut ChaCha8Rng) -> Agent {
    let mut agent = Agent::new(4, 3, 2, small_config(), rng);
    let samples: Vec<Vec<f64>> = (0..20).map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    agent.obs_norm.update(samples.iter().map(Vec::as_slice));
    let goals: Vec<Vec<f64>> = (0..20).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    agent.goal_norm.update(goals.iter().map(Vec::as_slice));
    agent
}

/// Central differences of `loss` over `params`.
fn numeric_grad(params: &[f64], mut loss: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-6;
    (0..params.len())
        .map(|k| {
            let mut p = params.to_vec();
            p[k] += h;
            let up = loss(&p);
            p[k] -= 2.0 * h;
            let down = loss(&p);
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn assert_grads_match(analytic: &[f64], numeric: &[f64]) {
    assert_eq!(analytic.len(), numeric.len());
    for (k, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let scale = a.abs().max(n.abs());
        assert!((a - n).abs() <= 1e-4 * scale + 1e-9, "param {k}: analytic {a}, numeric {n}");
    }
}

#[test]
fn two_parameter_critic_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut net = Mlp::new(&[1, 1], Activation::Identity, &mut rng);
    net.set_params(&[0.7, -0.2]);
    let x = array![[0.5], [-1.0], [2.0]];
    let y = array![[-1.0], [0.0], [-3.0]];
    let loss = |net: &Mlp| (net.predict(x.view()) - &y).mapv(|e| e * e).mean().unwrap();
    let trace = net.forward(x.view());
    let (g, _) = net.backward(&trace, &((trace.output() - &y) * (2.0 / 3.0)));
    let numeric = numeric_grad(&net.params(), |p| {
        let mut n = net.clone();
        n.set_params(p);
        loss(&n)
    });
    assert_grads_match(&g.flat(), &numeric);
}

#[test]
fn network_input_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for output in [Activation::Tanh, Activation::Identity] {
        let net = Mlp::new(&[3, 7, 4, 2], output, &mut rng);
        let x = Array2::from_shape_fn((2, 3), |_| rng.random_range(-1.0..1.0));
        let w = array![[0.3, -1.2], [0.8, 0.5]];
        let loss = |x: &Array2<f64>| (net.predict(x.view()) * &w).sum();
        let trace = net.forward(x.view());
        let (_, dx) = net.backward(&trace, &w);
        let numeric = numeric_grad(x.as_slice().unwrap(), |p| loss(&Array2::from_shape_vec((2, 3), p.to_vec()).unwrap()));
        assert_grads_match(dx.as_slice().unwrap(), &numeric);
    }
}

#[test]
fn agent_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut agent = agent_with_stats(&mut rng);
    // Move away from the near-zero initial output layer.
    for net in [&mut agent.actor, &mut agent.critic] {
        let p: Vec<f64> = net.params().iter().map(|_| rng.random_range(-0.8..0.8)).collect();
        net.set_params(&p);
    }
    let mut filtered = 0;
    for _ in 0..6 {
        let batch = random_batch(&mut rng, 8, 4, 3, 2);
        let y = agent.td_targets(&batch);
        let (_, critic_grads) = agent.critic_loss(&batch, &y);
        let numeric = numeric_grad(&agent.critic.params(), |p| {
            let mut a = agent.clone();
            a.critic.set_params(p);
            a.critic_loss(&batch, &y).0
        });
        assert_grads_match(&critic_grads.flat(), &numeric);

        let (_, bc, actor_grads) = agent.actor_loss(&batch);
        filtered += (bc > 0.0) as usize;
        let numeric = numeric_grad(&agent.actor.params(), |p| {
            let mut a = agent.clone();
            a.actor.set_params(p);
            a.actor_loss(&batch).0
        });
        assert_grads_match(&actor_grads.flat(), &numeric);
    }
    assert!(filtered > 0, "the cloning path was never exercised");
}

#[test]
fn q_filter_examples() {
    let pi = array![[0.2, -0.4], [0.9, 0.1]];
    let demo = array![[0.5, 0.0], [-0.1, 0.1]];
    // The critic prefers the policy everywhere.
    let (l, g) = bc_q_filter_loss(&pi, &demo, &array![1.0, 1.0], &array![0.5, 0.9], &[true, true]);
    assert_eq!(l, 0.0);
    assert!(g.iter().all(|v| *v == 0.0));
    // Policy equals the demonstrations.
    let (l, _) = bc_q_filter_loss(&demo, &demo, &array![0.0, 0.0], &array![1.0, 1.0], &[true, true]);
    assert_eq!(l, 0.0);
    // Only the second sample passes.
    let (l, g) = bc_q_filter_loss(&pi, &demo, &array![1.0, -2.0], &array![0.5, -1.0], &[true, true]);
    let expected = (0.9f64 + 0.1).powi(2) + 0.0;
    assert!((l - expected).abs() < 1e-15);
    assert_eq!(g.row(0).to_vec(), vec![0.0, 0.0]);
    // Non-demo rows never count.
    let (l, _) = bc_q_filter_loss(&pi, &demo, &array![1.0, -2.0], &array![0.5, -1.0], &[true, false]);
    assert_eq!(l, 0.0);
}

#[test]
fn critic_targets_are_clipped_to_the_return_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut agent = agent_with_stats(&mut rng);
    let batch = random_batch(&mut rng, 16, 4, 3, 2);
    let (lo, hi) = agent.config.q_range;
    assert!((lo + 1.0 / (1.0 - 0.98)).abs() < 1e-12 && hi == 0.0);
    for bias in [100.0, -1e4] {
        let last = agent.target_critic.layers.len() - 1;
        agent.target_critic.layers[last].b[0] = bias;
        let y = agent.td_targets(&batch);
        assert!(y.iter().all(|v| *v >= lo - 1e-6 && *v <= hi + 1e-6), "{y:?}");
    }
}

#[test]
fn critic_reaches_the_fixed_point_on_an_all_success_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut cfg = small_config();
    cfg.bc_weight = 0.0;
    let mut agent = Agent::new(4, 3, 2, cfg, &mut rng);
    let mut batch = random_batch(&mut rng, 32, 4, 3, 2);
    batch.reward.fill(0.0);
    let mut last = f64::INFINITY;
    for _ in 0..3000 {
        last = agent.update(&batch).unwrap().critic;
        agent.update_targets();
    }
    assert!(last < 1e-6, "{last}");
}

#[test]
fn non_finite_updates_are_rejected_without_side_effects() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut agent = agent_with_stats(&mut rng);
    let mut batch = random_batch(&mut rng, 8, 4, 3, 2);
    batch.reward[2] = f64::NAN;
    let before = agent.clone();
    assert!(matches!(agent.update(&batch), Err(RlError::NonFiniteUpdate { .. })));
    assert_eq!(agent, before);
}

/// Episodes whose observations and achieved goals encode `(episode, step)`.
fn tagged_episode(id: usize, len: usize) -> Episode {
    Episode {
        obs: (0..=len).map(|t| vec![id as f64, t as f64]).collect(),
        achieved: (0..=len).map(|t| vec![id as f64, t as f64, 0.0]).collect(),
        desired: vec![vec![id as f64, 1000.0, 0.0]; len],
        actions: (0..len).map(|t| vec![t as f64 / len as f64]).collect(),
        rewards: vec![-1.0; len],
        terminal: vec![false; len],
        is_demo: false,
    }
}

#[test]
fn her_relabels_with_later_goals_and_recomputes_rewards() {
    let cfg = TaskConfig::new(TaskId::NeedleReach);
    let reward = |a: &[f64], g: &[f64]| compute_reward(&cfg, a, g);
    let mut buf = ReplayBuffer::new(10_000, 4);
    for id in 0..6 {
        buf.push(tagged_episode(id, 10 + id)).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let b = buf.her_sample(20_000, Some(&reward), &mut rng).unwrap();
    let relabeled = b.relabeled.iter().filter(|r| **r).count() as f64 / 20_000.0;
    assert!((relabeled - 0.8).abs() < 0.015, "{relabeled}");
    let mut terminal_hits = 0;
    for i in 0..b.len() {
        let (id, t) = (b.obs[[i, 0]], b.obs[[i, 1]]);
        assert_eq!(b.next_obs[[i, 1]], t + 1.0);
        let goal = b.goal.row(i).to_vec();
        if b.relabeled[i] {
            assert_eq!(goal[0], id, "goal from the same episode");
            assert!(goal[1] > t, "goal from a later step");
            let ag = b.next_achieved.row(i).to_vec();
            let d = ((ag[0] - goal[0]).powi(2) + (ag[1] - goal[1]).powi(2) + (ag[2] - goal[2]).powi(2)).sqrt();
            let expected = if d <= cfg.epsilon { 0.0 } else { -1.0 };
            assert_eq!(b.reward[i], expected);
            if goal[1] == t + 1.0 {
                terminal_hits += 1;
                assert_eq!(b.reward[i], 0.0);
            }
        } else {
            assert_eq!(goal[1], 1000.0);
            assert_eq!(b.reward[i], -1.0);
        }
    }
    assert!(terminal_hits > 0);
}

#[test]
fn zero_future_ratio_never_relabels() {
    let cfg = TaskConfig::new(TaskId::NeedleReach);
    let reward = |a: &[f64], g: &[f64]| compute_reward(&cfg, a, g);
    let mut buf = ReplayBuffer::new(1000, 0);
    buf.push(tagged_episode(0, 20)).unwrap();
    let b = buf.her_sample(500, Some(&reward), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(b.relabeled.iter().all(|r| !r));
    assert!(b.goal.column(1).iter().all(|v| *v == 1000.0));
}

#[test]
fn buffer_evicts_whole_oldest_episodes() {
    let mut buf = ReplayBuffer::new(120, 4);
    for id in 0..3 {
        buf.push(tagged_episode(id, 50)).unwrap();
    }
    assert_eq!(buf.transitions(), 100);
    let ids: Vec<f64> = buf.episodes().map(|e| e.obs[0][0]).collect();
    assert_eq!(ids, vec![1.0, 2.0]);
    assert!(buf.episodes().all(|e| e.len() == 50));
    assert!(buf.push(tagged_episode(9, 121)).is_err());
    // Sampling stays inside the surviving episodes.
    let b = buf.her_sample(300, None, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert!(b.obs.column(0).iter().all(|v| *v == 1.0 || *v == 2.0));
    assert!(ReplayBuffer::new(10, 4).her_sample(1, None, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

fn tiny_train_config(algo: Algo, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::new(algo, seed);
    c.epochs = 2;
    c.episodes_per_epoch = 4;
    c.updates_per_cycle = 5;
    c.batch_size = 32;
    c.eval_episodes = 3;
    c.agent.hidden = vec![16, 16];
    c
}

#[test]
fn training_is_bit_reproducible_and_worker_independent() {
    let task = TaskConfig::new(TaskId::NeedleReach);
    let run = |workers: usize, seed: u64| {
        let mut c = tiny_train_config(Algo::Her, seed);
        c.n_workers = workers;
        let (agent, rows) = surgisim_rl::train(&task, &c, None, |_, _| Ok(())).unwrap();
        let rows: Vec<_> = rows.into_iter().map(|mut r| {
            r.wall_time_s = 0.0;
            r
        }).collect();
        (agent, rows)
    };
    let (a1, m1) = run(1, 11);
    let (a2, m2) = run(1, 11);
    assert_eq!(m1, m2);
    assert_eq!(a1, a2);
    let (a3, m3) = run(2, 11);
    assert_eq!(m1, m3);
    assert_eq!(a1, a3);
    let (a4, _) = run(1, 12);
    assert_ne!(a1, a4);
}

#[test]
fn metrics_csv_round_trips() {
    let task = TaskConfig::new(TaskId::EcmReach);
    let (_, rows) = surgisim_rl::train(&task, &tiny_train_config(Algo::Her, 1), None, |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    surgisim_rl::train::write_metrics_csv(&path, &rows).unwrap();
    assert_eq!(surgisim_rl::train::read_metrics_csv(&path).unwrap(), rows);
    let header = std::fs::read_to_string(&path).unwrap();
    assert!(header.starts_with("epoch,episodes,success_rate,mean_return"));
}

#[test]
fn checkpoints_round_trip_and_resume() {
    let task = TaskConfig::new(TaskId::NeedleReach);
    let mut t = Trainer::new(task, tiny_train_config(Algo::Her, 2), None).unwrap();
    t.run_epoch().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    let ckpt = t.checkpoint();
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    let mut resumed = Trainer::resume(back, None).unwrap();
    assert_eq!(resumed.epoch, 1);
    assert_eq!(resumed.run_epoch().unwrap().epoch, 2);

    let mut bad = ckpt.clone();
    bad.version = 99;
    bad.save(&path).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(RlError::Checkpoint(_))));
}

#[test]
fn her_demo_requires_matching_demonstrations() {
    let task = TaskConfig::new(TaskId::NeedlePick);
    assert!(matches!(
        Trainer::new(task.clone(), tiny_train_config(Algo::HerDemo, 0), None),
        Err(RlError::Config(_))
    ));
    let mut env = TaskEnv::new(TaskConfig::new(TaskId::NeedleReach)).unwrap();
    let demos = surgisim::demos::collect_demos(&mut env, 2, 0).unwrap();
    assert!(matches!(
        Trainer::new(task, tiny_train_config(Algo::HerDemo, 0), Some(&demos)),
        Err(RlError::Config(_))
    ));
}

#[test]
fn her_demo_training_runs_with_cloning_loss() {
    let task = TaskConfig::new(TaskId::NeedlePick);
    let mut env = TaskEnv::new(task.clone()).unwrap();
    let demos = surgisim::demos::collect_demos(&mut env, 3, 0).unwrap();
    let mut t = Trainer::new(task, tiny_train_config(Algo::HerDemo, 3), Some(&demos)).unwrap();
    let m = t.run_epoch().unwrap();
    assert!(m.bc_loss > 0.0);
    assert_eq!(m.rejected_updates, 0);
}

#[test]
fn scripted_reach_evaluates_to_full_success() {
    let mut env = TaskEnv::new(TaskConfig::new(TaskId::NeedleReach)).unwrap();
    let r = evaluate(&mut env, &mut Scripted::default(), 100, 0).unwrap();
    assert_eq!(r.success_rate, 1.0);
}

#[test]
fn random_actions_rarely_pick_the_needle() {
    let mut env = TaskEnv::new(TaskConfig::new(TaskId::NeedlePick)).unwrap();
    let mut policy = RandomPolicy {
        rng: ChaCha8Rng::seed_from_u64(0),
        dim: env.spec().action_dim,
    };
    let r = evaluate(&mut env, &mut policy, 100, EVAL_SEED_BASE).unwrap();
    assert!(r.success_rate <= 0.02, "{}", r.success_rate);
}

#[test]
fn episodes_end_at_the_horizon() {
    let mut env = TaskEnv::new(TaskConfig::new(TaskId::EcmReach)).unwrap();
    let mut policy = RandomPolicy {
        rng: ChaCha8Rng::seed_from_u64(1),
        dim: 3,
    };
    let out = run_episode(&mut env, &mut policy, 4).unwrap();
    assert_eq!(out.records.len(), 50);
    let ep = Episode::from_records(&out.records, 50, false);
    assert_eq!(ep.obs.len(), 51);
    assert!(ep.terminal.iter().all(|t| !t));
}

#[test]
fn cross_evaluation_fills_the_mode_matrix() {
    let task = TaskConfig::new(TaskId::NeedlePick);
    let env = TaskEnv::new(task.clone()).unwrap();
    let spec = env.spec();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut agents = || {
        (0..2)
            .map(|_| Agent::new(spec.obs_dim, spec.goal_dim, spec.action_dim, small_config(), &mut rng))
            .collect::<Vec<_>>()
    };
    let policies = vec![(GraspMode::Interact, agents()), (GraspMode::approx_mm(2.0), agents())];
    let tests = [1.0, 2.0, 3.0].map(GraspMode::approx_mm).into_iter().chain([GraspMode::Interact]).collect::<Vec<_>>();
    let m = cross_eval_matrix(&task, &policies, &tests, 3, EVAL_SEED_BASE).unwrap();
    assert_eq!(m.cells.len(), 2);
    assert!(m.cells.iter().all(|r| r.len() == 4));
    assert!(m.cells.iter().flatten().all(|c| (0.0..=1.0).contains(&c.mean) && c.per_policy.len() == 2));
    let csv = m.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "train\\test,Approx@1mm,Approx@2mm,Approx@3mm,Interact");
    assert!(lines[1].starts_with("Interact,"));
    for cell in lines[2].split(',').skip(1) {
        let (mean, std) = cell.split_once('±').unwrap();
        assert_eq!(mean.split_once('.').unwrap().1.len(), 1);
        assert_eq!(std.split_once('.').unwrap().1.len(), 1);
    }
}

#[test]
fn grasp_mode_flags_parse() {
    use surgisim_rl::train::{grasp_mode_label, parse_grasp_mode};
    assert_eq!(parse_grasp_mode("interact").unwrap(), GraspMode::Interact);
    assert_eq!(parse_grasp_mode("approx:2").unwrap(), GraspMode::approx_mm(2.0));
    assert_eq!(grasp_mode_label(&GraspMode::approx_mm(3.0)), "Approx@3mm");
    assert!(parse_grasp_mode("approx:-1").is_err());
    assert!(parse_grasp_mode("magnet").is_err());
}
