//! Behavioral cloning: the loss, current-observation masking and the
//! optimization loop.

use std::collections::HashMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{PolicyConfig, RunConfig, TextEncoderKind, TrainConfig};
use crate::episode::{augment, AugmentConfig, DatasetManifest, Episode, Observation, Split};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::instruction::{EncoderSpec, OneHotEncoder};
use crate::model::{EncodedInstruction, Policy};
use crate::params::{Adam, Grads};
use crate::tensor::Real;

/// Scalar loss nodes of one episode.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub position: Var,
    pub rotation: Var,
    pub gripper: Var,
    pub ce: Var,
}

/// Loss values, averaged over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub position: f64,
    pub rotation: f64,
    pub gripper: f64,
    pub ce: f64,
}

impl LossParts {
    pub fn read<F: Real>(g: &Graph<F>, v: &LossVars) -> Self {
        let s = |x: Var| g.value(x).data()[0].f64();
        LossParts {
            total: s(v.total),
            position: s(v.position),
            rotation: s(v.rotation),
            gripper: s(v.gripper),
            ce: s(v.ce),
        }
    }

    fn add_scaled(&mut self, o: &LossParts, w: f64) {
        self.total += o.total * w;
        self.position += o.position * w;
        self.rotation += o.rotation * w;
        self.gripper += o.gripper * w;
        self.ce += o.ce * w;
    }
}

/// `Σ_t MSE(a_t, a*_t) + CE(logits, m*)` for one episode, where each MSE is
/// the mean over the eight action components. The position, rotation and
/// gripper parts partition that mean exactly.
pub fn bc_loss<F: Real>(
    g: &mut Graph<F>,
    predictions: &[Var],
    targets: &[[f32; 8]],
    task_logits: Var,
    task_id: usize,
) -> Result<LossVars> {
    if predictions.len() != targets.len() {
        return Err(Error::Shape(format!("{} predictions for {} targets", predictions.len(), targets.len())));
    }
    let classes = g.shape(task_logits)[1];
    if task_id >= classes {
        return Err(Error::TaskOutOfRange(task_id, classes));
    }
    let mut parts: [Vec<Var>; 3] = Default::default();
    for (&a, tgt) in predictions.iter().zip(targets) {
        let tgt: Vec<F> = tgt.iter().map(|&v| F::c(f64::from(v))).collect();
        for (i, (lo, hi)) in [(0, 3), (3, 7), (7, 8)].into_iter().enumerate() {
            let s = g.slice_cols(a, lo, hi);
            let m = g.mse_const(s, &tgt[lo..hi]);
            parts[i].push(g.scale(m, F::c((hi - lo) as f64 / 8.0)));
        }
    }
    let sum = |g: &mut Graph<F>, xs: &[Var]| -> Var {
        match xs.split_first() {
            Some((&first, rest)) => rest.iter().fold(first, |acc, &x| g.add(acc, x)),
            None => g.constant(crate::tensor::Tensor::scalar(F::zero())),
        }
    };
    let position = sum(g, &parts[0]);
    let rotation = sum(g, &parts[1]);
    let gripper = sum(g, &parts[2]);
    let ce = g.cross_entropy(task_logits, task_id);
    let total = sum(g, &[position, rotation, gripper, ce]);
    Ok(LossVars { total, position, rotation, gripper, ce })
}

/// With probability `prob`, a uniformly random `⌈fraction·m⌉`-subset of the
/// `m` current-step token rows; otherwise nothing.
pub fn mask_current_observation<R: Rng>(rng: &mut R, m: usize, prob: f64, fraction: f64) -> Vec<usize> {
    if prob <= 0.0 || !rng.gen_bool(prob.min(1.0)) {
        return Vec::new();
    }
    let k = ((fraction * m as f64).ceil() as usize).min(m);
    let mut rows = sample(rng, m, k).into_vec();
    rows.sort_unstable();
    rows
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: u64,
    pub total: f64,
    pub position: f64,
    pub rotation: f64,
    pub gripper: f64,
    pub ce: f64,
}

impl MetricsRow {
    fn new(iteration: u64, l: &LossParts) -> Self {
        MetricsRow {
            iteration,
            total: l.total,
            position: l.position,
            rotation: l.rotation,
            gripper: l.gripper,
            ce: l.ce,
        }
    }
}

/// Text encoder for a training run. The one-hot baseline is fitted on the
/// training instructions.
pub fn encoder_for(config: &PolicyConfig, episodes: &[Episode]) -> Result<EncoderSpec> {
    Ok(match config.text_encoder {
        TextEncoderKind::StandIn => config.encoder_spec(),
        TextEncoderKind::OneHot => {
            OneHotEncoder::fit(config.text_dim, config.max_tokens, episodes.iter().map(|e| e.instruction.as_str()))?
                .spec()
        }
    })
}

/// Graph for one training episode: per-step augmentation and masking drawn
/// from `rng`, teacher-forced forward over every step, and the loss.
pub fn episode_loss<F: Real, R: Rng>(
    g: &mut Graph<F>,
    policy: &Policy<F>,
    episode: &Episode,
    text: &EncodedInstruction,
    train: &TrainConfig,
    rng: &mut R,
) -> Result<LossVars> {
    let cfg = &policy.config;
    let aug = AugmentConfig { jitter: train.jitter, crop_fraction: train.crop_fraction };
    let observations: Vec<Observation> = episode
        .steps
        .iter()
        .map(|s| if train.augment { augment(&s.observation, &aug, rng).0 } else { s.observation.clone() })
        .collect();
    let steps: Vec<usize> = (0..episode.steps.len()).collect();
    let m = cfg.tokens_per_step();
    let masks: Vec<Vec<usize>> = if cfg.layers > 0 {
        steps.iter().map(|_| mask_current_observation(rng, m, train.mask_prob, train.mask_fraction)).collect()
    } else {
        Vec::new()
    };
    let out = policy.forward(g, text, &observations, &steps, &masks)?;
    let preds: Vec<Var> = out.steps.iter().map(|s| s.action).collect();
    let targets: Vec<[f32; 8]> = episode.steps.iter().map(|s| s.action.to_vec()).collect();
    bc_loss(g, &preds, &targets, out.task_logits, episode.task_id as usize)
}

/// Training state: parameters, optimizer, the single sampling stream and the
/// metrics log.
pub struct Trainer {
    pub policy: Policy<f32>,
    pub adam: Adam<f32>,
    pub rng: ChaCha8Rng,
    pub iteration: u64,
    pub train: TrainConfig,
    pub log: Vec<MetricsRow>,
    episodes: Vec<Episode>,
    texts: Vec<EncodedInstruction>,
}

impl Trainer {
    pub fn new(policy: PolicyConfig, train: TrainConfig, episodes: Vec<Episode>) -> Result<Self> {
        train.validate()?;
        let spec = encoder_for(&policy, &episodes)?;
        let policy = Policy::new(policy, spec)?;
        let adam = Adam::new(train.adam(), &policy.params);
        let rng = ChaCha8Rng::seed_from_u64(train.seed);
        Self::assemble(policy, adam, rng, 0, train, Vec::new(), episodes)
    }

    pub fn from_checkpoint(ckpt: Checkpoint, episodes: Vec<Episode>) -> Result<Self> {
        let rng = ckpt.rng()?;
        let Checkpoint { policy, adam, iteration, train, log, .. } = ckpt;
        Self::assemble(policy, adam, rng, iteration, train, log, episodes)
    }

    fn assemble(
        policy: Policy<f32>,
        adam: Adam<f32>,
        rng: ChaCha8Rng,
        iteration: u64,
        train: TrainConfig,
        log: Vec<MetricsRow>,
        episodes: Vec<Episode>,
    ) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut cache: HashMap<&str, usize> = HashMap::new();
        let mut texts = Vec::new();
        let mut index = Vec::with_capacity(episodes.len());
        for ep in &episodes {
            if ep.steps.len() > policy.config.max_steps {
                return Err(Error::StepOutOfRange { step: ep.steps.len() - 1, max: policy.config.max_steps - 1 });
            }
            if ep.task_id as usize >= policy.config.num_tasks {
                return Err(Error::TaskOutOfRange(ep.task_id as usize, policy.config.num_tasks));
            }
            let i = match cache.get(ep.instruction.as_str()) {
                Some(&i) => i,
                None => {
                    texts.push(policy.encode_text(&ep.instruction)?);
                    cache.insert(&ep.instruction, texts.len() - 1);
                    texts.len() - 1
                }
            };
            index.push(i);
        }
        let texts = index
            .into_iter()
            .map(|i| EncodedInstruction { raw: texts[i].raw.clone(), mean: texts[i].mean.clone() })
            .collect();
        Ok(Trainer { policy, adam, rng, iteration, train, log, episodes, texts })
    }

    /// One optimizer step on a freshly sampled batch.
    pub fn step(&mut self) -> Result<LossParts> {
        let b = self.train.batch_size;
        let batch: Vec<usize> = (0..b).map(|_| self.rng.gen_range(0..self.episodes.len())).collect();
        let mut grads = Grads::zeros_like(&self.policy.params);
        let mut parts = LossParts::default();
        let scale = 1.0 / b as f64;
        for &i in &batch {
            let mut g = Graph::new(&self.policy.params);
            let loss =
                episode_loss(&mut g, &self.policy, &self.episodes[i], &self.texts[i], &self.train, &mut self.rng)?;
            let l = LossParts::read(&g, &loss);
            if !l.total.is_finite() {
                return Err(self.non_finite(&batch));
            }
            parts.add_scaled(&l, scale);
            g.backward(loss.total).accumulate_into(&mut grads, scale as f32);
        }
        if !grads.all_finite() {
            return Err(self.non_finite(&batch));
        }
        self.adam.update(&mut self.policy.params, &grads);
        self.iteration += 1;
        if self.iteration == 1 || self.iteration.is_multiple_of(self.train.log_every) {
            self.log.push(MetricsRow::new(self.iteration, &parts));
        }
        Ok(parts)
    }

    fn non_finite(&self, batch: &[usize]) -> Error {
        let episodes = batch
            .iter()
            .map(|&i| {
                let e = &self.episodes[i];
                format!("{}/v{}/s{}", e.task, e.variation_id, e.seed)
            })
            .collect();
        Error::NonFiniteLoss { iteration: self.iteration + 1, episodes }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(&self.policy, &self.adam, &self.rng, self.iteration, &self.train, &self.log)
    }
}

/// Trains on the seen split of `manifest`. With `out_dir`, writes
/// `metrics.jsonl`, periodic `ckpt_<iteration>.ckpt` files and `final.ckpt`.
pub fn train(manifest: &DatasetManifest, run: &RunConfig, out_dir: Option<&Path>) -> Result<Checkpoint> {
    let trainer = Trainer::new(run.policy.clone(), run.train.clone(), seen_episodes(manifest)?)?;
    run_trainer(trainer, manifest, out_dir, false)
}

/// Continues a saved run up to its configured iteration count, appending to
/// `metrics.jsonl` in `out_dir`.
pub fn resume(manifest: &DatasetManifest, ckpt: Checkpoint, out_dir: Option<&Path>) -> Result<Checkpoint> {
    let trainer = Trainer::from_checkpoint(ckpt, seen_episodes(manifest)?)?;
    run_trainer(trainer, manifest, out_dir, true)
}

fn seen_episodes(manifest: &DatasetManifest) -> Result<Vec<Episode>> {
    manifest.rows_in(Split::Seen).map(|r| manifest.load(r)).collect()
}

fn run_trainer(
    mut trainer: Trainer,
    manifest: &DatasetManifest,
    out_dir: Option<&Path>,
    append: bool,
) -> Result<Checkpoint> {
    let mut metrics = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let file = std::fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(dir.join("metrics.jsonl"))?;
            Some(BufWriter::new(file))
        }
        None => None,
    };
    while trainer.iteration < trainer.train.iterations {
        let logged = trainer.log.len();
        trainer.step()?;
        if let Some(w) = metrics.as_mut() {
            for row in &trainer.log[logged..] {
                serde_json::to_writer(&mut *w, row)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        let every = trainer.train.checkpoint_every;
        if let (Some(dir), true) = (out_dir, every > 0 && trainer.iteration.is_multiple_of(every)) {
            let mut c = trainer.checkpoint();
            c.tasks = manifest.tasks();
            c.save(&dir.join(format!("ckpt_{:06}.ckpt", trainer.iteration)))?;
        }
    }
    let mut ckpt = trainer.checkpoint();
    ckpt.tasks = manifest.tasks();
    if let Some(dir) = out_dir {
        ckpt.save(&dir.join("final.ckpt"))?;
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert!(mask_current_observation(&mut rng, 12, 0.0, 0.5).is_empty());
            assert_eq!(mask_current_observation(&mut rng, 12, 1.0, 1.0), (0..12).collect::<Vec<_>>());
            assert_eq!(mask_current_observation(&mut rng, 12, 1.0, 0.5).len(), 6);
            assert_eq!(mask_current_observation(&mut rng, 7, 1.0, 0.5).len(), 4);
        }
    }

    #[test]
    fn mask_frequency_matches_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let hits = (0..10_000).filter(|_| !mask_current_observation(&mut rng, 12, 0.1, 0.5).is_empty()).count();
        let freq = hits as f64 / 10_000.0;
        assert!((0.08..=0.12).contains(&freq), "{freq}");
    }
}
