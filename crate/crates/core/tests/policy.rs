use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tactile_autograd::{Matrix, Tape};
use tactile_core::env::{DomainOverrides, Event};
use tactile_core::policy::sac::{actor_loss, critic_loss, standard_normal};
use tactile_core::policy::{
    collect, Batch, PolicyNet, QNet, ReplayBuffer, SacAgent, SacConfig, Worker, WorkerSettings, ACTION_DIM,
    POLICY_OBS_DIM, Q_OBS_DIM,
};

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn critic_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut q = QNet::new(5, &[4], &mut rng);
    let obs = standard_normal(&mut rng, 6, 5);
    let act = standard_normal(&mut rng, 6, ACTION_DIM);
    let y = standard_normal(&mut rng, 6, 1);
    let loss_of = |q: &QNet| {
        let tape = Tape::new();
        let b = q.mlp.bind(&tape);
        critic_loss(
            &b,
            tape.constant(obs.clone()),
            tape.constant(act.clone()),
            tape.constant(y.clone()),
        )
        .item()
    };
    let grads = {
        let tape = Tape::new();
        let b = q.mlp.bind(&tape);
        let l = critic_loss(
            &b,
            tape.constant(obs.clone()),
            tape.constant(act.clone()),
            tape.constant(y.clone()),
        );
        b.grads(&tape.backward(l))
    };
    let h = 1e-6;
    for (p, g) in grads.iter().enumerate() {
        for k in 0..g.len() {
            let orig = q.mlp.params()[p].as_slice().unwrap()[k];
            q.mlp.params_mut()[p].as_slice_mut().unwrap()[k] = orig + h;
            let up = loss_of(&q);
            q.mlp.params_mut()[p].as_slice_mut().unwrap()[k] = orig - h;
            let down = loss_of(&q);
            q.mlp.params_mut()[p].as_slice_mut().unwrap()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = g.as_slice().unwrap()[k];
            assert!(
                rel_err(fd, an) < 1e-4 || (fd - an).abs() < 1e-8,
                "param {p}[{k}]: fd {fd} vs {an}"
            );
        }
    }
}

#[test]
fn actor_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut actor = PolicyNet::new(5, &[4], &mut rng);
    let q1 = QNet::new(7, &[4], &mut rng);
    let q2 = QNet::new(7, &[4], &mut rng);
    let obs_pi = standard_normal(&mut rng, 6, 5);
    let obs_q = standard_normal(&mut rng, 6, 7);
    let eps = standard_normal(&mut rng, 6, ACTION_DIM);
    let run = |a: &PolicyNet, want_grads: bool| {
        let tape = Tape::new();
        let b = a.mlp.bind(&tape);
        let f1 = q1.mlp.bind_frozen(&tape);
        let f2 = q2.mlp.bind_frozen(&tape);
        let (l, _) = actor_loss(
            &b,
            &f1,
            &f2,
            tape.constant(obs_pi.clone()),
            tape.constant(obs_q.clone()),
            tape.constant(eps.clone()),
            0.3,
        );
        let v = l.item();
        let g = want_grads.then(|| b.grads(&tape.backward(l)));
        (v, g)
    };
    let grads = run(&actor, true).1.unwrap();
    let h = 1e-6;
    for (p, g) in grads.iter().enumerate() {
        for k in 0..g.len() {
            let orig = actor.mlp.params()[p].as_slice().unwrap()[k];
            actor.mlp.params_mut()[p].as_slice_mut().unwrap()[k] = orig + h;
            let up = run(&actor, false).0;
            actor.mlp.params_mut()[p].as_slice_mut().unwrap()[k] = orig - h;
            let down = run(&actor, false).0;
            actor.mlp.params_mut()[p].as_slice_mut().unwrap()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = g.as_slice().unwrap()[k];
            assert!(
                rel_err(fd, an) < 1e-4 || (fd - an).abs() < 1e-8,
                "param {p}[{k}]: fd {fd} vs {an}"
            );
        }
    }
}

#[test]
fn polyak_extremes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = QNet::new(3, &[4], &mut rng);
    let mut b = QNet::new(3, &[4], &mut rng);
    let before = b.clone();
    b.mlp.polyak_from(&a.mlp, 0.0);
    assert_eq!(b, before);
    b.mlp.polyak_from(&a.mlp, 1.0);
    assert_eq!(b, a);
}

/// One-step bandit: reward peaks at a = 0.5 on every joint.
#[test]
fn sac_solves_a_bandit() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = SacConfig {
        hidden: vec![64, 64],
        lr_actor: 3e-3,
        lr_critic: 3e-3,
        lr_alpha: 3e-3,
        init_alpha: 0.01,
        ..SacConfig::default()
    };
    let mut agent = SacAgent::new(2, 2, cfg, &mut rng);
    let n = 64;
    for _ in 0..3000 {
        let obs = Matrix::from_elem((n, 2), 1.0);
        let action = Matrix::from_shape_fn((n, ACTION_DIM), |_| rng.gen_range(-1.0..1.0));
        let reward = Matrix::from_shape_fn((n, 1), |(i, _)| {
            -action.row(i).iter().map(|a| (a - 0.5) * (a - 0.5)).sum::<f64>()
        });
        let b = Batch {
            obs_pi: obs.clone(),
            obs_q: obs.clone(),
            action,
            reward,
            done: Matrix::from_elem((n, 1), 1.0),
            next_obs_pi: obs.clone(),
            next_obs_q: obs,
        };
        agent.update(&b, &mut rng).unwrap();
    }
    let (mean, _) = agent.actor.forward(&Matrix::from_elem((1, 2), 1.0));
    let mode: Vec<f64> = mean.row(0).iter().map(|m| m.tanh()).collect();
    let regret: f64 = mode.iter().map(|a| (a - 0.5) * (a - 0.5)).sum();
    // A uniform random action has an expected regret of 7.
    assert!(regret < 0.5, "mode {mode:?}, regret {regret}");
}

fn run_collection(seed: u64) -> (ReplayBuffer, Vec<Event>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = PolicyNet::new(POLICY_OBS_DIM, &[16], &mut rng);
    let settings = WorkerSettings {
        overrides: DomainOverrides {
            sticky_prob: Some(0.0),
            ..DomainOverrides::default()
        },
        ..WorkerSettings::default()
    };
    let mut workers: Vec<Worker> = (0..2)
        .map(|i| Worker::new(i, seed + 100 + i as u64, settings.clone()))
        .collect();
    let mut replay = ReplayBuffer::new(1000, POLICY_OBS_DIM, Q_OBS_DIM);
    collect(&mut workers, &policy, &mut replay, 30).unwrap();
    let mut events = Vec::new();
    let mut w = Worker::new(9, seed, settings);
    for _ in 0..40 {
        if let Some(o) = w.step(&policy, false).unwrap() {
            assert_eq!(o.transition.done, o.event.is_terminal_signal());
            events.push(o.event);
        }
    }
    (replay, events)
}

#[test]
fn collection_is_reproducible_and_flags_terminals() {
    let (a, ea) = run_collection(11);
    let (b, eb) = run_collection(11);
    assert_eq!(a.len(), 60);
    assert_eq!(ea, eb);
    let idx: Vec<usize> = (0..a.len()).collect();
    let (ba, bb) = (a.gather(&idx), b.gather(&idx));
    assert_eq!(ba.obs_pi, bb.obs_pi);
    assert_eq!(ba.reward, bb.reward);
    assert_eq!(ba.done, bb.done);
}

#[test]
fn goal_timeout_is_not_terminal() {
    // A hold policy keeps the cube, so the goal attempt times out.
    let settings = WorkerSettings {
        overrides: DomainOverrides {
            sticky_prob: Some(0.0),
            perturb_force: Some(0.0),
            perturb_torque: Some(0.0),
            ..DomainOverrides::default()
        },
        ..WorkerSettings::default()
    };
    let mut w = Worker::new(0, 21, settings);
    w.begin_random().unwrap();
    let mut saw_timeout = false;
    for _ in 0..150 {
        let hold = w.env().unwrap().hold_action();
        let o = w.step_action(hold).unwrap().unwrap();
        if o.event == Event::TimeoutGoal {
            assert!(!o.transition.done);
            assert_eq!(o.attempt, Some(false));
            saw_timeout = true;
            break;
        }
        assert!(!o.event.is_failure(), "cube lost: {:?}", o.event);
        if o.event == Event::Success {
            continue;
        }
    }
    assert!(saw_timeout);
}
