mod common;

use common::{demo, no_noise, small_config};
use deskbot_core::checkpoint::Checkpoint;
use deskbot_core::config::{PolicyConfig, RunConfig, TrainConfig};
use deskbot_core::episode::{build_dataset, DatasetSpec, Split};
use deskbot_core::graph::Graph;
use deskbot_core::sim::{TaskKind, TaskSpec};
use deskbot_core::tensor::Tensor;
use deskbot_core::train::{bc_loss, train, LossParts, Trainer};
use deskbot_core::Error;

fn scalar(g: &Graph<f64>, v: deskbot_core::graph::Var) -> f64 {
    g.value(v).data()[0]
}

#[test]
fn bc_loss_reference_values() {
    let store = deskbot_core::params::ParamStore::<f64>::new();
    let target = [0.1f32, -0.2, 0.3, 1.0, 0.0, 0.0, 0.0, 1.0];
    let exact: Vec<f64> = target.iter().map(|&v| f64::from(v)).collect();

    let mut g = Graph::new(&store);
    let a = g.input(Tensor::new(&[1, 8], exact.clone()));
    let confident = g.input(Tensor::new(&[1, 4], vec![-1000.0, 1000.0, -1000.0, -1000.0]));
    let l = bc_loss(&mut g, &[a], &[target], confident, 1).unwrap();
    assert!(scalar(&g, l.total).abs() < 1e-12);

    let uniform = g.input(Tensor::zeros(&[1, 4]));
    let l = bc_loss(&mut g, &[a, a], &[target, target], uniform, 3).unwrap();
    assert!((scalar(&g, l.total) - 4f64.ln()).abs() < 1e-12);

    let mut off = exact.clone();
    off[0] += 1.0;
    let b = g.input(Tensor::new(&[1, 8], off));
    let l = bc_loss(&mut g, &[b], &[target], confident, 1).unwrap();
    assert!((scalar(&g, l.position) - 0.125).abs() < 1e-6);
    assert!((scalar(&g, l.total) - 0.125).abs() < 1e-6);
    assert_eq!(scalar(&g, l.rotation), 0.0);

    match bc_loss(&mut g, &[a], &[target], uniform, 4) {
        Err(Error::TaskOutOfRange(4, 4)) => {}
        other => panic!("expected a task range error, got {other:?}"),
    }
}

#[test]
fn logged_components_sum_to_the_total() {
    let eps = vec![demo(TaskKind::PushButtons, 3, 1, 32), demo(TaskKind::ReachTarget, 2, 2, 32)];
    let mut t = Trainer::new(small_config(), TrainConfig { batch_size: 2, ..TrainConfig::default() }, eps).unwrap();
    for _ in 0..3 {
        let l: LossParts = t.step().unwrap();
        let sum = l.position + l.rotation + l.gripper + l.ce;
        assert!((l.total - sum).abs() <= 1e-5 * l.total.abs().max(1.0), "{l:?}");
    }
}

#[test]
fn overfits_a_single_episode() {
    let eps = vec![demo(TaskKind::PushButtons, 12, 4, 32)];
    let cfg = TrainConfig { learning_rate: 3e-3, batch_size: 1, iterations: 200, log_every: 1, ..no_noise() };
    let mut t = Trainer::new(small_config(), cfg, eps).unwrap();
    while t.iteration < 200 {
        t.step().unwrap();
    }
    let first = t.log.first().unwrap().total;
    let last = t.log.last().unwrap().total;
    assert!(last * 10.0 <= first, "loss went from {first} to {last}");
}

#[test]
fn resuming_is_bit_identical() {
    let eps = vec![demo(TaskKind::PushButtons, 40, 1, 32), demo(TaskKind::Tower, 5, 2, 32)];
    let cfg = TrainConfig { batch_size: 2, iterations: 4, log_every: 1, ..TrainConfig::default() };
    let mut straight = Trainer::new(small_config(), cfg.clone(), eps.clone()).unwrap();
    for _ in 0..4 {
        straight.step().unwrap();
    }

    let mut first = Trainer::new(small_config(), cfg, eps.clone()).unwrap();
    first.step().unwrap();
    first.step().unwrap();
    let bytes = first.checkpoint().to_bytes().unwrap();
    drop(first);
    let mut resumed = Trainer::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap(), eps).unwrap();
    resumed.step().unwrap();
    resumed.step().unwrap();

    assert_eq!(resumed.checkpoint().to_bytes().unwrap(), straight.checkpoint().to_bytes().unwrap());
}

#[test]
fn zero_iterations_returns_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        tasks: vec![(TaskSpec::from_variation(TaskKind::ReachTarget, 1).unwrap(), Split::Seen)],
        demos_per_variation: 2,
        seed: 3,
        image_size: (32, 32),
    };
    let manifest = build_dataset(&spec, dir.path()).unwrap();
    let mut run = RunConfig { policy: small_config(), ..RunConfig::default() };
    run.train.iterations = 0;
    let ckpt = train(&manifest, &run, Some(dir.path())).unwrap();
    assert_eq!(ckpt.iteration, 0);
    assert!(ckpt.log.is_empty());
    assert_eq!(ckpt.tasks, manifest.tasks());
    let fresh = Trainer::new(small_config(), run.train.clone(), vec![demo(TaskKind::ReachTarget, 1, 0, 32)]).unwrap();
    assert_eq!(ckpt.policy.params.digest(), fresh.policy.params.digest());
    let saved = Checkpoint::load(&dir.path().join("final.ckpt")).unwrap();
    assert_eq!(saved.to_bytes().unwrap(), ckpt.to_bytes().unwrap());
}

#[test]
fn text_encoder_stays_frozen() {
    let eps = vec![demo(TaskKind::PushButtons, 7, 1, 32)];
    let mut t = Trainer::new(
        PolicyConfig { layers: 1, ..small_config() },
        TrainConfig { learning_rate: 1e-2, ..TrainConfig::default() },
        eps.clone(),
    )
    .unwrap();
    let before = t.policy.encode_text(&eps[0].instruction).unwrap();
    let digest = t.policy.text_encoder().digest();
    for _ in 0..3 {
        t.step().unwrap();
    }
    let after = t.policy.encode_text(&eps[0].instruction).unwrap();
    assert_eq!(before.raw, after.raw);
    assert_eq!(digest, t.policy.text_encoder().digest());
}

#[test]
fn non_finite_inputs_are_reported_with_their_episodes() {
    let mut ep = demo(TaskKind::ReachTarget, 4, 9, 32);
    ep.steps[0].action.position[1] = f32::NAN;
    let mut t =
        Trainer::new(small_config(), TrainConfig { batch_size: 1, ..TrainConfig::default() }, vec![ep]).unwrap();
    match t.step() {
        Err(Error::NonFiniteLoss { iteration, episodes }) => {
            assert_eq!(iteration, 1);
            assert_eq!(episodes, vec!["reach_target/v4/s9".to_string()]);
        }
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}

#[test]
fn empty_training_set_is_rejected() {
    assert!(matches!(Trainer::new(small_config(), TrainConfig::default(), Vec::new()), Err(Error::EmptyDataset)));
}
