mod common;

use common::*;
use ensbc_core::agent::Agent;
use ensbc_core::env::EnvSpec;
use ensbc_core::eval::{compute_score_reference, ScoreReference};
use ensbc_core::finetune::{decay_step, run_finetune, DecaySchedule, FinetuneConfig};
use proptest::prelude::*;

fn reference() -> ScoreReference {
    compute_score_reference(&EnvSpec::point_dense(), 100, 0).unwrap()
}

fn quick(total: u64, warmup: u64, eval_every: u64) -> FinetuneConfig {
    FinetuneConfig {
        beta_start: Some(0.4),
        beta_end: 0.01,
        decay_steps: 60,
        warmup,
        total_steps: total,
        eval_every,
        eval_episodes: 1,
        seed_transitions: 100,
        ..FinetuneConfig::default()
    }
}

#[test]
fn zero_steps_only_evaluate() {
    let mut agent = td3(small_td3(), 1);
    let before = agent.clone();
    let log = run_finetune(&mut agent, &EnvSpec::point_dense(), &medium(500, 0), &quick(0, 10, 5), &reference(), &mut rng(0))
        .unwrap();
    assert_eq!(log.rows.len(), 1);
    assert_eq!(log.rows[0].step, 0);
    assert_eq!(log.rows[0].buffer_size, 100);
    assert_eq!(log.first_update_at, None);
    agent.set_beta(before.config.beta);
    assert_eq!(agent, before);
}

#[test]
fn first_update_follows_the_warmup() {
    let mut agent = td3(small_td3(), 2);
    let config = FinetuneConfig {
        total_steps: 2510,
        eval_every: 2510,
        eval_episodes: 1,
        ..FinetuneConfig::default()
    };
    assert_eq!(config.warmup, 2500);
    let log = run_finetune(&mut agent, &EnvSpec::point_dense(), &medium(3000, 0), &config, &reference(), &mut rng(0))
        .unwrap();
    assert_eq!(log.first_update_at, Some(2501));
    assert_eq!(agent.gradient_steps(), 10);
    assert_eq!(log.rows.last().unwrap().buffer_size, 2500 + 2510);
}

#[test]
fn beta_follows_the_closed_form() {
    let mut agent = sac(small_sac(), 3);
    let config = quick(120, 20, 10);
    let log = run_finetune(&mut agent, &EnvSpec::point_dense(), &medium(500, 0), &config, &reference(), &mut rng(1))
        .unwrap();
    let schedule = DecaySchedule::new(0.4, 0.01, 60).unwrap();
    let mut prev = f64::INFINITY;
    for row in &log.rows {
        let updates = row.step.saturating_sub(20);
        let expect = schedule.closed_form(updates);
        assert!((row.beta - expect).abs() <= 1e-9 * expect, "step {}: {} vs {}", row.step, row.beta, expect);
        assert!(row.beta <= prev && row.beta >= 0.01);
        assert_eq!(row.buffer_size, 100 + row.step as usize);
        prev = row.beta;
    }
    assert_eq!(log.rows.last().unwrap().beta, 0.01);
    assert_eq!(agent.beta(), 0.01);
    assert_eq!(agent.gradient_steps(), 100);
}

#[test]
fn replays_are_identical() {
    let run = || {
        let mut agent = td3(small_td3(), 4);
        let log = run_finetune(&mut agent, &EnvSpec::point_dense(), &medium(500, 0), &quick(80, 10, 20), &reference(), &mut rng(9))
            .unwrap();
        (agent, log)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(format!("{la:?}"), format!("{lb:?}"));
}

#[test]
fn csv_columns() {
    let mut agent = td3(small_td3(), 5);
    let log = run_finetune(&mut agent, &EnvSpec::point_dense(), &medium(500, 0), &quick(20, 5, 10), &reference(), &mut rng(0))
        .unwrap();
    let mut out = Vec::new();
    log.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().next().unwrap(), "step,eval_score_mean,eval_score_stderr,beta,buffer_size");
    assert_eq!(text.lines().count(), 4);
}

proptest! {
    #[test]
    fn iterated_decay_equals_closed_form(start in 1e-4f64..10.0, ratio in 1e-4f64..1.0, s in 1u64..2000, extra in 0u64..500) {
        let end = start * ratio;
        let mut sch = DecaySchedule::new(start, end, s).unwrap();
        for t in 1..=s + extra {
            let b = decay_step(&mut sch);
            let c = sch.closed_form(t);
            prop_assert!((b - c).abs() <= 1e-9 * c);
            prop_assert!(b >= end && b <= start);
        }
        prop_assert!((sch.beta - end).abs() <= 1e-9 * end);
        prop_assert_eq!(decay_step(&mut sch), end);
    }
}
