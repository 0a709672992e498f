#![allow(dead_code)]

use deskbot_core::config::{PolicyConfig, TrainConfig};
use deskbot_core::episode::{record_demo, Episode};
use deskbot_core::graph::Graph;
use deskbot_core::model::Policy;
use deskbot_core::sim::{CameraRig, TaskKind, TaskSpec};
use deskbot_core::train::{encoder_for, episode_loss};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn small_config() -> PolicyConfig {
    PolicyConfig {
        cameras: vec![0, 1],
        d_model: 16,
        text_dim: 16,
        heads: 2,
        ff_mult: 2,
        layers: 1,
        rot_channels: 8,
        ..PolicyConfig::default()
    }
}

pub fn no_noise() -> TrainConfig {
    TrainConfig { augment: false, mask_prob: 0.0, ..TrainConfig::default() }
}

pub fn demo(kind: TaskKind, variation: u32, seed: u64, size: usize) -> Episode {
    let rig = CameraRig::standard(size, size);
    let task = TaskSpec::from_variation(kind, variation).unwrap();
    record_demo(&task, seed, &rig).unwrap()
}

pub fn policy64(cfg: PolicyConfig, episodes: &[Episode]) -> Policy<f64> {
    let spec = encoder_for(&cfg, episodes).unwrap();
    Policy::new(cfg, spec).unwrap()
}

pub fn loss64(policy: &Policy<f64>, ep: &Episode) -> f64 {
    let text = policy.encode_text(&ep.instruction).unwrap();
    let mut g = Graph::new(&policy.params);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let l = episode_loss(&mut g, policy, ep, &text, &no_noise(), &mut rng).unwrap();
    g.value(l.total).data()[0]
}

/// Per parameter tensor: relative error `|a - n| / max(|a|, |n|)` between the
/// analytic and central-difference gradients over `samples` entries (the
/// largest analytic entries plus random ones). Groups whose sampled
/// gradients are all below `1e-6` report 0.
pub fn gradient_check(policy: &mut Policy<f64>, ep: &Episode, samples: usize, seed: u64) -> Vec<(String, f64)> {
    let text = policy.encode_text(&ep.instruction).unwrap();
    let mut grads = deskbot_core::params::Grads::zeros_like(&policy.params);
    {
        let mut g = Graph::new(&policy.params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = episode_loss(&mut g, policy, ep, &text, &no_noise(), &mut rng).unwrap();
        g.backward(l.total).accumulate_into(&mut grads, 1.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = policy.params.ids().collect();
    let mut out = Vec::new();
    for id in ids {
        let analytic = grads.get(id).data().to_vec();
        let mut order: Vec<usize> = (0..analytic.len()).collect();
        order.sort_by(|&a, &b| analytic[b].abs().partial_cmp(&analytic[a].abs()).unwrap());
        let mut picks: Vec<usize> = order.iter().copied().take(samples / 2).collect();
        let mut rest: Vec<usize> = order[picks.len()..].to_vec();
        rest.shuffle(&mut rng);
        picks.extend(rest.into_iter().take(samples - picks.len()));
        let mut worst: f64 = 0.0;
        for i in picks {
            let h = 1e-6;
            let orig = policy.params.get(id).data()[i];
            policy.params.get_mut(id).data_mut()[i] = orig + h;
            let lp = loss64(policy, ep);
            policy.params.get_mut(id).data_mut()[i] = orig - h;
            let lm = loss64(policy, ep);
            policy.params.get_mut(id).data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[i];
            let scale = a.abs().max(numeric.abs());
            if scale > 1e-6 {
                worst = worst.max((a - numeric).abs() / scale);
            }
        }
        out.push((policy.params.name(id).to_string(), worst));
    }
    out
}
