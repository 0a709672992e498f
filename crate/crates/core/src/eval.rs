//! Closed-loop rollouts, seen/unseen evaluation reports and the ablation
//! runner.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{config_hash, RunConfig, Variant};
use crate::episode::{demo_seed, Action, Episode, Observation, Split};
use crate::error::{Error, Result};
use crate::instruction::generate_instruction;
use crate::model::{finalize_action, EncodedInstruction, Policy, Prediction};
use crate::sim::{check_success, expert_demo, make_scene, render, step, CameraRig, Scene, TaskSpec};
use crate::train::Trainer;

pub const REPORT_FORMAT: &str = "deskbot-eval";
pub const REPORT_VERSION: u32 = 1;

/// Anything that maps an episode prefix to the next action.
pub trait Controller {
    /// Called once per episode, before the first observation.
    fn reset(&mut self, task: &TaskSpec, scene: &Scene, instruction: &str) -> Result<()>;
    /// `observations` holds every frame seen so far, current last.
    fn act(&mut self, observations: &[Observation]) -> Result<Prediction>;
    fn max_steps(&self) -> usize;
}

/// The scripted expert replayed as a controller.
#[derive(Default)]
pub struct ExpertController {
    plan: Vec<Action>,
}

impl Controller for ExpertController {
    fn reset(&mut self, task: &TaskSpec, scene: &Scene, _instruction: &str) -> Result<()> {
        self.plan = expert_demo(scene, task)?;
        Ok(())
    }

    fn act(&mut self, observations: &[Observation]) -> Result<Prediction> {
        let t = observations.len() - 1;
        let a = self.plan.get(t).ok_or(Error::StepOutOfRange { step: t, max: self.plan.len().saturating_sub(1) })?;
        Ok(finalize_action(a.to_vec()))
    }

    fn max_steps(&self) -> usize {
        crate::config::PolicyConfig::default().max_steps
    }
}

/// A trained network fed its own past observations.
pub struct NetworkController<'a> {
    policy: &'a Policy<f32>,
    text: Option<EncodedInstruction>,
}

impl<'a> NetworkController<'a> {
    pub fn new(policy: &'a Policy<f32>) -> Self {
        NetworkController { policy, text: None }
    }
}

impl Controller for NetworkController<'_> {
    fn reset(&mut self, task: &TaskSpec, _scene: &Scene, instruction: &str) -> Result<()> {
        if task.task_id() >= self.policy.config.num_tasks {
            return Err(Error::TaskOutOfRange(task.task_id(), self.policy.config.num_tasks));
        }
        self.text = Some(self.policy.encode_text(instruction)?);
        Ok(())
    }

    fn act(&mut self, observations: &[Observation]) -> Result<Prediction> {
        let text = self.text.as_ref().expect("reset before act");
        self.policy.predict(text, observations)
    }

    fn max_steps(&self) -> usize {
        self.policy.config.max_steps
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub task: String,
    pub variation: u32,
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
    /// Executed actions, `[position, quaternion, open]`.
    pub trajectory: Vec<[f32; 8]>,
    /// Why the rollout stopped early, when it did.
    pub flag: Option<String>,
}

/// Render → act → step until success or the controller's step limit.
pub fn rollout(controller: &mut dyn Controller, task: &TaskSpec, seed: u64, image_size: usize) -> Result<Outcome> {
    let rig = CameraRig::standard(image_size, image_size);
    let mut scene = make_scene(task, seed, rig.image_size())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instruction = generate_instruction(task, &mut rng)?;
    controller.reset(task, &scene, &instruction)?;
    let mut out = Outcome {
        task: task.kind.name().to_string(),
        variation: task.variation_id,
        seed,
        success: false,
        steps: 0,
        trajectory: Vec::new(),
        flag: None,
    };
    let mut observations = Vec::new();
    while out.steps < controller.max_steps() {
        observations.push(render(&scene, &rig));
        let pred = controller.act(&observations)?;
        if !pred.raw.iter().all(|v| v.is_finite()) {
            out.flag = Some(format!("non-finite action at step {}", out.steps));
            break;
        }
        out.trajectory.push(pred.action.to_vec());
        out.steps += 1;
        match step(&scene, &pred.action) {
            Ok(next) => scene = next,
            Err(e) => {
                out.flag = Some(format!("step {}: {e}", out.steps - 1));
                break;
            }
        }
        if check_success(&scene, task) {
            out.success = true;
            break;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub task: String,
    pub split: Split,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub outcomes: Vec<Outcome>,
}

impl EvalEntry {
    fn from_outcomes(task: String, split: Split, outcomes: Vec<Outcome>) -> Self {
        let successes = outcomes.iter().filter(|o| o.success).count();
        let episodes = outcomes.len();
        let success_rate = if episodes == 0 { 0.0 } else { successes as f64 / episodes as f64 };
        EvalEntry { task, split, episodes, successes, success_rate, outcomes }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub version: u32,
    pub checkpoint_hash: String,
    pub config_hash: String,
    pub seed: u64,
    pub entries: Vec<EvalEntry>,
}

impl EvalReport {
    pub fn entry(&self, task: &str, split: Split) -> Option<&EvalEntry> {
        self.entries.iter().find(|e| e.task == task && e.split == split)
    }

    pub fn total_successes(&self) -> usize {
        self.entries.iter().map(|e| e.successes).sum()
    }

    pub fn total_episodes(&self) -> usize {
        self.entries.iter().map(|e| e.episodes).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::from(e).in_file(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
        let r: EvalReport = serde_json::from_str(&text).map_err(|e| Error::from(e).in_file(path))?;
        if r.format != REPORT_FORMAT {
            return Err(Error::BadContainer(format!("format `{}` is not an eval report", r.format)).in_file(path));
        }
        if r.version != REPORT_VERSION {
            return Err(Error::VersionMismatch { found: r.version, expected: REPORT_VERSION }.in_file(path));
        }
        Ok(r)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:<7} {:>8} {:>9} {:>7}", "task", "split", "episodes", "successes", "rate");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{:<16} {:<7} {:>8} {:>9} {:>6.1}%",
                e.task,
                e.split.name(),
                e.episodes,
                e.successes,
                100.0 * e.success_rate
            );
        }
        s
    }
}

/// Rejects task lists where a variation appears in both splits.
pub fn check_split_hygiene(tasks: &[(TaskSpec, Split)]) -> Result<()> {
    let mut seen = BTreeMap::new();
    for (t, s) in tasks {
        if let Some(prev) = seen.insert((t.kind, t.variation_id), *s) {
            if prev != *s {
                return Err(Error::InvalidTask(format!(
                    "{} variation {} is in both the seen and unseen splits",
                    t.kind.name(),
                    t.variation_id
                )));
            }
        }
    }
    Ok(())
}

/// Rollout seed of episode `i` of an evaluation with base seed `seed`.
pub fn episode_seed(seed: u64, i: usize) -> u64 {
    demo_seed(seed, i)
}

/// `episodes` rollouts per (task kind, split), cycling through that split's
/// variations in the given order.
pub fn evaluate(
    controller: &mut dyn Controller,
    tasks: &[(TaskSpec, Split)],
    episodes: usize,
    seed: u64,
    image_size: usize,
) -> Result<Vec<EvalEntry>> {
    check_split_hygiene(tasks)?;
    let mut groups: BTreeMap<(String, Split), Vec<&TaskSpec>> = BTreeMap::new();
    for (t, s) in tasks {
        groups.entry((t.kind.name().to_string(), *s)).or_default().push(t);
    }
    let mut entries = Vec::new();
    for ((name, split), specs) in groups {
        let outcomes = (0..episodes)
            .map(|i| rollout(controller, specs[i % specs.len()], episode_seed(seed, i), image_size))
            .collect::<Result<Vec<_>>>()?;
        entries.push(EvalEntry::from_outcomes(name, split, outcomes));
    }
    Ok(entries)
}

/// Evaluates a checkpoint and stamps the report with its hashes.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    tasks: &[(TaskSpec, Split)],
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    let mut c = NetworkController::new(&ckpt.policy);
    let entries = evaluate(&mut c, tasks, episodes, seed, ckpt.policy.config.image_size)?;
    Ok(EvalReport {
        format: REPORT_FORMAT.to_string(),
        version: REPORT_VERSION,
        checkpoint_hash: ckpt.hash()?,
        config_hash: ckpt.config_hash(),
        seed,
        entries,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Complete,
    Incomplete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub status: RowStatus,
    pub config_hash: String,
    /// Iterations actually trained.
    pub iterations: u64,
    /// For `one_view`: the camera whose model scored best.
    pub camera: Option<usize>,
    pub entries: Vec<EvalEntry>,
}

impl AblationRow {
    pub fn success_rate(&self, split: Split) -> Option<f64> {
        let (s, n) = self
            .entries
            .iter()
            .filter(|e| e.split == split)
            .fold((0, 0), |(s, n), e| (s + e.successes, n + e.episodes));
        (n > 0).then(|| s as f64 / n as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant.name())
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<9} {:>8} {:>8} {:>10} status", "variant", "seen", "unseen", "iterations");
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.1}%", 100.0 * v));
        for r in &self.rows {
            let status = match r.status {
                RowStatus::Complete => "complete",
                RowStatus::Incomplete => "incomplete",
            };
            let _ = writeln!(
                s,
                "{:<9} {:>8} {:>8} {:>10} {status}",
                r.variant,
                pct(r.success_rate(Split::Seen)),
                pct(r.success_rate(Split::Unseen)),
                r.iterations
            );
        }
        s
    }
}

/// Shared inputs of an ablation run.
pub struct AblationSpec<'a> {
    pub episodes: &'a [Episode],
    pub eval_tasks: &'a [(TaskSpec, Split)],
    pub base: &'a RunConfig,
    /// Wall-clock budget in seconds for the whole table.
    pub budget_secs: Option<f64>,
}

/// Trains and evaluates each variant with the same data, seed and iteration
/// budget. When the time budget runs out, the current and remaining rows are
/// marked incomplete.
pub fn run_ablation(spec: &AblationSpec, variants: &[Variant]) -> Result<AblationTable> {
    if spec.episodes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_split_hygiene(spec.eval_tasks)?;
    let start = Instant::now();
    let out_of_time = || spec.budget_secs.is_some_and(|b| start.elapsed().as_secs_f64() >= b);
    let mut rows = Vec::new();
    let mut done: BTreeSet<Variant> = BTreeSet::new();
    for &v in variants {
        if !done.insert(v) {
            continue;
        }
        let (policy, train) = v.apply(&spec.base.policy, &spec.base.train);
        let camera_sets: Vec<Vec<usize>> = match v {
            Variant::OneView => policy.cameras.iter().map(|&k| vec![k]).collect(),
            _ => vec![policy.cameras.clone()],
        };
        let mut best: Option<AblationRow> = None;
        let mut incomplete = false;
        for cams in camera_sets {
            let policy = crate::config::PolicyConfig { cameras: cams.clone(), ..policy.clone() };
            let mut trainer = Trainer::new(policy.clone(), train.clone(), spec.episodes.to_vec())?;
            while trainer.iteration < train.iterations {
                if out_of_time() {
                    incomplete = true;
                    break;
                }
                trainer.step()?;
            }
            let ckpt = trainer.checkpoint();
            let entries = if incomplete {
                Vec::new()
            } else {
                evaluate_checkpoint(&ckpt, spec.eval_tasks, spec.base.eval.episodes, spec.base.eval.eval_seed)?.entries
            };
            let row = AblationRow {
                variant: v.name().to_string(),
                status: if incomplete { RowStatus::Incomplete } else { RowStatus::Complete },
                config_hash: config_hash(&(&policy, &train)),
                iterations: trainer.iteration,
                camera: (v == Variant::OneView).then(|| cams[0]),
                entries,
            };
            let better = match &best {
                None => true,
                Some(b) => score(&row) > score(b),
            };
            if better {
                best = Some(row);
            }
            if incomplete {
                break;
            }
        }
        let mut row = best.expect("at least one camera set");
        if incomplete {
            row.status = RowStatus::Incomplete;
        }
        rows.push(row);
    }
    Ok(AblationTable { rows })
}

fn score(r: &AblationRow) -> (usize, usize) {
    let s = r.entries.iter().map(|e| e.successes).sum();
    (s, usize::MAX - r.camera.unwrap_or(0))
}
