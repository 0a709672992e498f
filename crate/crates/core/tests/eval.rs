mod common;

use common::{demo, small_config};
use deskbot_core::config::{RunConfig, TrainConfig, Variant};
use deskbot_core::episode::Split;
use deskbot_core::eval::{
    evaluate, evaluate_checkpoint, run_ablation, AblationSpec, ExpertController, NetworkController, RowStatus,
};
use deskbot_core::sim::{TaskKind, TaskSpec};
use deskbot_core::train::Trainer;

fn split(kind: TaskKind, seen: &[u32], unseen: &[u32]) -> Vec<(TaskSpec, Split)> {
    let mk = |v: &u32| TaskSpec::from_variation(kind, *v).unwrap();
    seen.iter().map(|v| (mk(v), Split::Seen)).chain(unseen.iter().map(|v| (mk(v), Split::Unseen))).collect()
}

fn two_buttons(variations: &[u32]) -> Vec<(TaskSpec, Split)> {
    variations
        .iter()
        .map(|&v| {
            let mut t = TaskSpec::from_variation(TaskKind::PushButtons, v).unwrap();
            t.num_objects = 2;
            (t, Split::Seen)
        })
        .collect()
}

// P(X >= k) for X ~ Binomial(n, p).
fn upper_tail(n: u64, k: u64, p: f64) -> f64 {
    let ln_choose = |n: u64, k: u64| -> f64 { (1..=k).map(|i| ((n - k + i) as f64 / i as f64).ln()).sum() };
    (k..=n).map(|i| (ln_choose(n, i) + i as f64 * p.ln() + (n - i) as f64 * (1.0 - p).ln()).exp()).sum()
}

#[test]
fn expert_succeeds_on_both_splits() {
    let mut tasks = split(TaskKind::PushButtons, &[0, 1, 2], &[10, 11]);
    tasks.extend(split(TaskKind::Tower, &[0], &[5]));
    tasks.extend(split(TaskKind::ReachTarget, &[3], &[4]));
    let entries = evaluate(&mut ExpertController::default(), &tasks, 10, 77, 32).unwrap();
    assert_eq!(entries.len(), 6);
    for e in entries {
        assert_eq!(e.successes, 10, "{} {:?}", e.task, e.split);
        assert_eq!(e.success_rate, 1.0);
    }
}

#[test]
fn zero_episodes_gives_empty_entries() {
    let entries =
        evaluate(&mut ExpertController::default(), &split(TaskKind::ReachTarget, &[0], &[1]), 0, 1, 32).unwrap();
    assert_eq!(entries.len(), 2);
    for e in entries {
        assert_eq!((e.episodes, e.successes, e.success_rate), (0, 0, 0.0));
        assert!(e.outcomes.is_empty());
    }
}

#[test]
fn a_variation_in_both_splits_is_rejected() {
    let mut tasks = split(TaskKind::PushButtons, &[0, 1], &[2]);
    tasks.push((TaskSpec::from_variation(TaskKind::PushButtons, 1).unwrap(), Split::Unseen));
    assert!(evaluate(&mut ExpertController::default(), &tasks, 1, 0, 32).is_err());
}

#[test]
fn same_checkpoint_and_seed_give_the_same_trajectories() {
    let eps = vec![demo(TaskKind::PushButtons, 4, 1, 32)];
    let mut t = Trainer::new(small_config(), TrainConfig::default(), eps).unwrap();
    t.step().unwrap();
    let ckpt = t.checkpoint();
    let tasks = split(TaskKind::PushButtons, &[4], &[]);
    let a = evaluate_checkpoint(&ckpt, &tasks, 3, 9).unwrap();
    let b = evaluate_checkpoint(&ckpt, &tasks, 3, 9).unwrap();
    assert_eq!(a, b);
    let c = evaluate_checkpoint(&ckpt, &tasks, 3, 10).unwrap();
    assert_ne!(a.entries[0].outcomes, c.entries[0].outcomes);
}

#[test]
fn untrained_policy_is_not_better_than_chance() {
    let tasks = two_buttons(&[30, 54]);
    let eps = vec![demo(TaskKind::PushButtons, 30, 0, 32)];
    let policy = Trainer::new(small_config(), TrainConfig::default(), eps).unwrap().policy;
    let entries = evaluate(&mut NetworkController::new(&policy), &tasks, 100, 5, 32).unwrap();
    let k = entries[0].successes as u64;
    // random order among two buttons succeeds half the time
    assert!(upper_tail(100, k, 0.5) > 0.01, "{k}/100 successes");
}

#[test]
fn ablation_rows_are_reproducible() {
    let eps: Vec<_> = (0..3).map(|j| demo(TaskKind::ReachTarget, 2, j, 32)).collect();
    let mut base = RunConfig { policy: small_config(), ..RunConfig::default() };
    base.train.iterations = 2;
    base.train.batch_size = 1;
    base.eval.episodes = 2;
    let tasks = split(TaskKind::ReachTarget, &[2], &[3]);
    let spec = AblationSpec { episodes: &eps, eval_tasks: &tasks, base: &base, budget_secs: None };
    let variants = [Variant::R1, Variant::NoHist, Variant::R1];
    let a = run_ablation(&spec, &variants).unwrap();
    let b = run_ablation(&spec, &variants).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 2);
    for r in &a.rows {
        assert_eq!(r.status, RowStatus::Complete);
        assert_eq!(r.iterations, 2);
        assert_eq!(r.entries.len(), 2);
    }
    assert_ne!(a.rows[0].config_hash, a.rows[1].config_hash);
}

#[test]
fn ablation_out_of_time_marks_rows_incomplete() {
    let eps = vec![demo(TaskKind::ReachTarget, 2, 0, 32)];
    let base = RunConfig { policy: small_config(), ..RunConfig::default() };
    let tasks = split(TaskKind::ReachTarget, &[2], &[]);
    let spec = AblationSpec { episodes: &eps, eval_tasks: &tasks, base: &base, budget_secs: Some(0.0) };
    let table = run_ablation(&spec, &[Variant::R5, Variant::OneView]).unwrap();
    assert_eq!(table.rows.len(), 2);
    for r in &table.rows {
        assert_eq!(r.status, RowStatus::Incomplete);
        assert!(r.entries.is_empty());
        assert_eq!(r.iterations, 0);
    }
}

#[test]
fn ablation_without_episodes_is_an_error() {
    let base = RunConfig::default();
    let tasks = split(TaskKind::ReachTarget, &[2], &[]);
    let spec = AblationSpec { episodes: &[], eval_tasks: &tasks, base: &base, budget_secs: None };
    assert!(matches!(run_ablation(&spec, &[Variant::R5]), Err(deskbot_core::Error::EmptyDataset)));
}

#[test]
fn variant_r1_has_no_transformer() {
    let (p, _) = Variant::R1.apply(&small_config(), &TrainConfig::default());
    assert_eq!(p.layers, 0);
    let (p, _) = Variant::NoHist.apply(&small_config(), &TrainConfig::default());
    assert!(!p.use_history);
}
