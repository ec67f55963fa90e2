mod common;

use std::io::BufReader;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tactile_core::env::log::{read_episodes, write_episode, EpisodeHeader, StepRecord};
use tactile_core::env::*;
use tactile_core::rotations::OctahedralGroup;
use tactile_core::{distance, Rotation, Vec3};

#[test]
fn spin_friction_is_log_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (lo, hi) = (2e-4f64.log10(), 2e-2f64.log10());
    let mut logs: Vec<f64> = (0..100_000)
        .map(|_| {
            let cfg = sample_domain(&mut rng, &DomainOverrides::default()).unwrap();
            assert!(cfg.q_offset.iter().all(|q| q.abs() <= 0.04));
            cfg.eta_spin.log10()
        })
        .collect();
    let p = common::ks_p(&mut logs, |v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0));
    assert!(p > 0.01, "KS p = {p}");
}

#[test]
fn resets_settle_in_force_closure() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let group = OctahedralGroup::get();
    for i in 0..100 {
        let cfg = sample_domain(&mut rng, &DomainOverrides::default()).unwrap();
        let mut env = Env::new(cfg, SimParams::default(), i);
        let r = env.reset().unwrap();
        assert_eq!(r.event, Event::None);
        assert!(r.cube_true.v.norm() < 1e-3);
        assert!(r.contacts >= 3);
        let (_, d) = group.nearest(r.cube_true.r);
        assert!(d < 0.2, "reset orientation {d} rad from the nearest group element");
    }
}

#[test]
fn zero_gravity_grasp_is_an_equilibrium() {
    // Sensor offsets would turn a zero action into a real joint motion.
    let cfg = DomainConfig {
        gravity_scale: 0.0,
        ..DomainConfig::nominal()
    };
    let mut env = Env::new(cfg, SimParams::default(), 3);
    let start = env.reset().unwrap().cube_true.x;
    // Actions are relative to the measured angles, so keeping the grasp
    // means re-issuing the current targets.
    for _ in 0..10 {
        let a = env.hold_action();
        env.step(&a).unwrap();
    }
    let moved = (env.cube().x - start).norm();
    assert!(moved < 1e-4, "cube moved {moved} m");
}

#[test]
fn the_grasp_carries_the_cube_under_full_gravity() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut held = 0;
    for i in 0..20 {
        let cfg = DomainConfig {
            gravity_scale: 1.0,
            ..sample_domain(&mut rng, &DomainOverrides::default()).unwrap()
        };
        let mut env = Env::new(cfg, SimParams::default(), i);
        let r = env.reset().unwrap();
        let start = r.cube_true.x;
        // A goal half a turn away, so holding still never succeeds.
        env.set_goal(Rotation::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), std::f64::consts::PI) * r.cube_true.r);
        let mut failed = false;
        for _ in 0..100 {
            let a = env.hold_action();
            let event = env.step(&a).unwrap().event;
            failed |= event.is_failure();
            if event != Event::None {
                break;
            }
        }
        if !failed && (env.cube().x - start).norm() < 0.01 {
            held += 1;
        }
    }
    assert!(held >= 18, "only {held}/20 grasps held the cube for 10 s");
}

#[test]
fn zero_action_relaxes_the_grasp_without_drift() {
    let cfg = DomainConfig {
        gravity_scale: 0.0,
        ..DomainConfig::nominal()
    };
    let mut env = Env::new(cfg, SimParams::default(), 3);
    let start = env.reset().unwrap().cube_true.x;
    let squeeze: f64 = env.normal_forces().iter().sum();
    for _ in 0..10 {
        env.step(&[0.0; NUM_JOINTS]).unwrap();
    }
    let relaxed: f64 = env.normal_forces().iter().sum();
    assert!(relaxed < 0.1 * squeeze);
    assert!((env.cube().x - start).norm() < 5e-4);
}

#[test]
fn opening_the_hand_drops_the_cube() {
    let mut env = Env::new(DomainConfig::nominal(), SimParams::default(), 4);
    env.reset().unwrap();
    let mut open = [0.0; NUM_JOINTS];
    for (j, q) in open.iter_mut().enumerate() {
        *q = hand::q_min(j);
    }
    env.command(open);
    let mut event = Event::None;
    for _ in 0..20 {
        event = env.advance().unwrap().event;
        if event != Event::None {
            break;
        }
    }
    assert_eq!(event, Event::Dropped);
}

/// Re-issues the current grasp targets with random jitter.
fn jittered_hold(env: &Env, rng: &mut ChaCha8Rng) -> [f64; NUM_JOINTS] {
    let hold = env.hold_action();
    std::array::from_fn(|j| (hold[j] + rng.gen_range(-0.3..0.3)).clamp(-1.0, 1.0))
}

#[test]
fn friction_cone_and_energy_hold_over_random_episodes() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for ep in 0..100 {
        let cfg = sample_domain(&mut rng, &DomainOverrides::default()).unwrap();
        let mut env = Env::new(cfg, SimParams::default(), ep);
        env.reset().unwrap();
        for _ in 0..150 {
            let a = jittered_hold(&env, &mut rng);
            if env.step(&a).unwrap().event.is_failure() {
                break;
            }
        }
        let cone = env.cone_stats();
        assert!(cone.lateral <= 1e-9 && cone.spin <= 1e-9, "episode {ep}: {cone:?}");
        assert!(env.ledger().max_excess <= 1e-6, "episode {ep}: {:?}", env.ledger());
    }
}

#[test]
fn replay_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let cfg = sample_domain(&mut rng, &DomainOverrides::default()).unwrap();
        let mut env = Env::new(cfg, SimParams::default(), 99);
        env.reset().unwrap();
        let mut trace = Vec::new();
        for _ in 0..50 {
            let a = jittered_hold(&env, &mut rng);
            let r = env.step(&a).unwrap();
            trace.push((r.event, r.cube_true.x.to_array(), r.cube_true.r.to_array(), r.hand.q));
        }
        trace
    };
    let (a, b) = (run(), run());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.0, y.0);
        assert_eq!(x.1.map(f64::to_bits), y.1.map(f64::to_bits));
        assert_eq!(x.2.map(f64::to_bits), y.2.map(f64::to_bits));
        assert_eq!(x.3.map(f64::to_bits), y.3.map(f64::to_bits));
    }
}

#[test]
fn estimator_samples_arrive_at_100_hz() {
    let mut env = Env::new(DomainConfig::nominal(), SimParams::default(), 5);
    env.reset().unwrap();
    let r = env.step(&env.hold_action()).unwrap();
    assert_eq!(r.samples.len(), 10);
    assert_eq!(r.samples.last().unwrap().cube, r.cube_true);
}

#[test]
fn episode_log_round_trips() {
    let mut env = Env::new(DomainConfig::nominal(), SimParams::default(), 6);
    env.reset().unwrap();
    let header = EpisodeHeader {
        episode: 0,
        seed: 6,
        domain: env.cfg().clone(),
        goal: Rotation::IDENTITY,
    };
    let mut steps = Vec::new();
    for k in 0..5 {
        let a = env.hold_action();
        let r = env.step(&a).unwrap();
        steps.push(StepRecord {
            t: 0.1 * (k + 1) as f64,
            q: r.hand.q,
            q_bar: env.ctrl().q_bar,
            cube_true: r.cube_true,
            cube_est: None,
            action: a,
            reward: 0.0,
            event: r.event,
            goal: env.goal(),
        });
    }
    let mut buf = Vec::new();
    write_episode(&mut buf, &header, &steps).unwrap();
    let parsed = read_episodes(BufReader::new(buf.as_slice())).unwrap();
    assert_eq!(parsed.len(), 1);
    assert_eq!(parsed[0].1.len(), 5);
    for (a, b) in parsed[0].1.iter().zip(&steps) {
        assert_eq!(a.event, b.event);
        assert!(distance(a.cube_true.r, b.cube_true.r) < 1e-12);
        assert_eq!(a.cube_true.x, b.cube_true.x);
    }
}
