mod common;

use common::*;
use ensbc_core::agent::{train_offline, Agent, TrainOptions};
use ensbc_core::checkpoint::{load_checkpoint, save_checkpoint};
use ensbc_core::critic::{critic_input, TargetMode};
use ensbc_core::nn::GaussianHead;
use ensbc_core::sac::{entropy_loss, BcForm, SacConfig};
use ensbc_core::AnyAgent;
use statrs::distribution::{Continuous, Normal};

/// `E[tanh(s Z)^2]` by trapezoid quadrature against the standard normal density.
fn tanh_gaussian_std(s: f64) -> f64 {
    let z = Normal::new(0.0, 1.0).unwrap();
    let n = 20_000;
    let h = 16.0 / n as f64;
    let mut acc = 0.0;
    for i in 0..=n {
        let x = -8.0 + i as f64 * h;
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        acc += w * (s * x).tanh().powi(2) * z.pdf(x);
    }
    (acc * h).sqrt()
}

#[test]
fn zero_alpha_gives_entropy_free_target() {
    let mut agent = sac(small_sac(), 1);
    agent.log_alpha = f64::NEG_INFINITY;
    assert_eq!(agent.alpha(), 0.0);
    let b = batch(&medium(400, 0), 24, 1);
    let y = agent.critic_targets(&b, TargetMode::Shared, &mut rng(5)).unwrap();

    let (a_next, _) = agent.sample_actions(b.next_states.view(), &mut rng(5)).unwrap();
    let input = critic_input(b.next_states.view(), a_next.view());
    for j in 0..24 {
        let m = agent
            .critics
            .targets
            .iter()
            .map(|t| t.forward(&input.row(j).to_vec()).unwrap()[0])
            .fold(f64::INFINITY, f64::min);
        let expect = b.rewards[j] + 0.99 * b.not_done[j] * m;
        assert!((y[[0, j]] - expect).abs() < 1e-12);
    }
}

#[test]
fn entropy_bonus_enters_the_target() {
    let agent = sac(small_sac(), 2);
    let b = batch(&medium(400, 0), 24, 1);
    let y = agent.critic_targets(&b, TargetMode::Independent, &mut rng(5)).unwrap();
    let (a_next, lp) = agent.sample_actions(b.next_states.view(), &mut rng(5)).unwrap();
    let q = agent
        .critics
        .target_q_values(critic_input(b.next_states.view(), a_next.view()).view())
        .unwrap();
    for i in 0..3 {
        for j in 0..24 {
            let expect = b.rewards[j] + 0.99 * b.not_done[j] * (q[[i, j]] - agent.alpha() * lp[j]);
            assert!((y[[i, j]] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn single_member_modes_coincide_and_terminals_use_rewards() {
    let agent = sac(
        SacConfig {
            ensemble_size: 1,
            ..small_sac()
        },
        3,
    );
    let mut b = batch(&medium(400, 0), 16, 2);
    let shared = agent.critic_targets(&b, TargetMode::Shared, &mut rng(7)).unwrap();
    let indep = agent.critic_targets(&b, TargetMode::Independent, &mut rng(7)).unwrap();
    assert_eq!(shared, indep);
    b.not_done.fill(0.0);
    let y = agent.critic_targets(&b, TargetMode::Shared, &mut rng(7)).unwrap();
    assert_eq!(y.row(0), b.rewards);
}

#[test]
fn shared_target_is_below_independent() {
    let agent = sac(small_sac(), 4);
    let b = batch(&medium(400, 0), 32, 3);
    let shared = agent.critic_targets(&b, TargetMode::Shared, &mut rng(1)).unwrap();
    let indep = agent.critic_targets(&b, TargetMode::Independent, &mut rng(1)).unwrap();
    assert!(shared.iter().zip(indep.iter()).all(|(s, i)| s <= i));
}

#[test]
fn entropy_gradient_signs() {
    // log pi = -H exactly: stationary
    assert_eq!(entropy_loss(0.3, &[2.0, 2.0, 2.0], -2.0).1, 0.0);
    // entropy below target (log pi > -H): descent raises log alpha
    assert!(entropy_loss(0.0, &[3.0, 2.5], -2.0).1 < 0.0);
    // entropy above target: descent lowers log alpha
    assert!(entropy_loss(0.0, &[-1.0, 0.5], -2.0).1 > 0.0);
}

#[test]
fn alpha_tracks_the_entropy_target() {
    let b = batch(&medium(400, 0), 64, 4);
    // narrow policy: entropy below -|A|, alpha rises
    let mut narrow = sac(small_sac(), 5);
    set_output_layer(&mut narrow.policy, &[0.0, 0.0, -5.0, -5.0]);
    let before = narrow.alpha();
    narrow.entropy_update(&b, &mut rng(0)).unwrap();
    assert!(narrow.alpha() > before);
    // unit-std policy: entropy above target, alpha falls
    let mut wide = sac(small_sac(), 5);
    set_output_layer(&mut wide.policy, &[0.0, 0.0, 0.0, 0.0]);
    wide.entropy_update(&b, &mut rng(0)).unwrap();
    assert!(wide.alpha() < before);
}

#[test]
fn alpha_stays_positive() {
    let b = batch(&medium(400, 0), 32, 4);
    for bias in [-5.0, 0.0] {
        let mut agent = sac(
            SacConfig {
                alpha_lr: 0.5,
                ..small_sac()
            },
            6,
        );
        set_output_layer(&mut agent.policy, &[0.0, 0.0, bias, bias]);
        for k in 0..200 {
            let a = agent.entropy_update(&b, &mut rng(k)).unwrap();
            assert!(a > 0.0 && a.is_finite(), "{a}");
        }
    }
}

#[test]
fn loglik_pulls_log_std_down_at_the_mode() {
    for (m, ls) in [(0.0, 0.0), (0.4, -1.0), (-1.2, 0.5)] {
        let head = GaussianHead::new(vec![m], vec![ls]);
        let g = head.log_prob_grad(&head.mode());
        // ascending beta * log pi therefore lowers log_std
        assert!(g.log_std[0] < 0.0, "{m} {ls}");
        assert!(g.mean[0].abs() < 1e-9);
    }
}

#[test]
fn mse_and_loglik_agree_in_the_narrow_limit() {
    for m in [-1.0, -0.3, 0.0, 0.2, 0.9] {
        for a in [-0.7, -0.1, 0.35, 0.8] {
            let head = GaussianHead::new(vec![m], vec![-5.0]);
            let t = m.tanh();
            let d_mse = 2.0 * (t - a) * (1.0 - t * t);
            let d_nll = -head.log_prob_grad(&[a]).mean[0];
            assert_eq!(d_mse.signum(), d_nll.signum(), "mean {m}, data {a}");
        }
    }
}

#[test]
fn huge_beta_mse_clones_the_batch() {
    let mut agent = sac(
        SacConfig {
            actor_lr: 1e-3,
            ..small_sac()
        },
        7,
    );
    let b = spread_batch(16, 8);
    let mut r = rng(1);
    let first = agent.policy_update(&b, 1e6, &mut r).unwrap().0.bc_term;
    let mut mse = first;
    for _ in 0..8000 {
        mse = agent.policy_update(&b, 1e6, &mut r).unwrap().0.bc_term;
    }
    assert!(mse < 1e-4 && mse < first / 100.0, "{first} -> {mse}");
}

#[test]
fn loglik_bc_concentrates_on_the_batch() {
    let mut agent = sac(
        SacConfig {
            actor_lr: 1e-3,
            bc_form: BcForm::Loglik,
            ..small_sac()
        },
        8,
    );
    let b = spread_batch(16, 9);
    let mut r = rng(2);
    let first = agent.policy_update(&b, 1e6, &mut r).unwrap().0.bc_term;
    let mut nll = first;
    for _ in 0..3000 {
        nll = agent.policy_update(&b, 1e6, &mut r).unwrap().0.bc_term;
    }
    assert!(nll < first - 5.0, "{first} -> {nll}");
}

#[test]
fn one_to_one_cadence() {
    let mut agent = sac(small_sac(), 9);
    let b = batch(&medium(300, 0), 32, 0);
    let s = agent.train_step(&b, 0.1, &mut rng(1)).unwrap();
    assert!(s.policy.is_some());
    assert!(s.alpha.is_some() && s.entropy.is_some());
    assert_eq!(agent.gradient_steps(), 1);
}

#[test]
fn select_action_modes() {
    let mut agent = sac(small_sac(), 10);
    set_output_layer(&mut agent.policy, &[0.0, 0.0, 0.1f64.ln(), 0.1f64.ln()]);
    let s = [0.2, -0.4];
    let m1 = agent.select_action(&s, false, &mut rng(0)).unwrap();
    let m2 = agent.select_action(&s, false, &mut rng(1)).unwrap();
    assert_eq!(m1, m2);
    let mut r = rng(3);
    let mut xs = Vec::new();
    for _ in 0..50_000 {
        xs.extend(agent.select_action(&s, true, &mut r).unwrap());
    }
    let oracle = tanh_gaussian_std(0.1);
    assert!((sample_std(&xs) - oracle).abs() / oracle < 0.01);

    set_output_layer(&mut agent.policy, &[0.3, -0.6, -50.0, -50.0]);
    let mode = agent.select_action(&s, false, &mut r).unwrap();
    for _ in 0..100 {
        let a = agent.select_action(&s, true, &mut r).unwrap();
        assert!(a.iter().zip(&mode).all(|(x, y)| (x - y).abs() < 0.05));
    }
}

#[test]
fn zero_steps_leave_the_agent_unchanged() {
    let mut agent = sac(small_sac(), 11);
    let before = agent.clone();
    train_offline(&mut agent, &medium(300, 0), 0, TrainOptions::default(), &mut rng(0), None).unwrap();
    assert_eq!(agent, before);
}

#[test]
fn metrics_carry_sac_columns() {
    let mut agent = sac(
        SacConfig {
            bc_form: BcForm::Loglik,
            ..small_sac()
        },
        12,
    );
    let options = TrainOptions {
        log_every: 2,
        eval_every: 0,
    };
    let log = train_offline(&mut agent, &medium(300, 0), 4, options, &mut rng(0), None).unwrap();
    let mut out = Vec::new();
    log.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,critic_loss_mean,policy_loss,bc_term,q_term,beta_effective,q_min_mean,alpha,policy_entropy_estimate,bc_form"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "2");
    assert_eq!(row[9], "loglik");
    assert!(row[7].parse::<f64>().unwrap() > 0.0);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut agent = sac(small_sac(), 13);
    train_offline(&mut agent, &medium(300, 0), 5, TrainOptions::default(), &mut rng(0), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sac.bin");
    save_checkpoint(&agent, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, AnyAgent::Sac(agent.clone()));
    let AnyAgent::Sac(mut twin) = loaded else { unreachable!() };
    let d = medium(300, 2);
    train_offline(&mut agent, &d, 3, TrainOptions::default(), &mut rng(4), None).unwrap();
    train_offline(&mut twin, &d, 3, TrainOptions::default(), &mut rng(4), None).unwrap();
    assert_eq!(agent, twin);
}
