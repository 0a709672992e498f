//! Demonstration datasets: one container file per episode plus a JSONL manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{read_episode, write_episode, Episode, Step};
use crate::error::{Error, Result};
use crate::instruction::generate_instruction;
use crate::sim::{check_success, expert_demo, make_scene, render, step, CameraRig, TaskKind, TaskSpec};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Seen,
    Unseen,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Seen => "seen",
            Split::Unseen => "unseen",
        }
    }

    pub fn from_name(s: &str) -> Result<Split> {
        match s {
            "seen" => Ok(Split::Seen),
            "unseen" => Ok(Split::Unseen),
            _ => Err(Error::config("split", format!("expected seen or unseen, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    /// Relative to the manifest directory.
    pub path: String,
    pub task: String,
    pub variation: u32,
    pub seed: u64,
    pub steps: usize,
    pub split: Split,
    /// Objects in the scene, goal objects included.
    pub objects: usize,
}

impl ManifestRow {
    pub fn entry(&self) -> TaskEntry {
        TaskEntry { task: self.task.clone(), variation: self.variation, objects: self.objects, split: self.split }
    }
}

/// A task variation and the split it belongs to.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskEntry {
    pub task: String,
    pub variation: u32,
    pub objects: usize,
    pub split: Split,
}

impl TaskEntry {
    pub fn spec(&self) -> Result<TaskSpec> {
        let kind = TaskKind::from_name(&self.task)?;
        let mut t = TaskSpec::from_variation(kind, self.variation)?;
        t.num_objects = self.objects;
        t.validate()?;
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn load(&self, row: &ManifestRow) -> Result<Episode> {
        read_episode(&self.root.join(&row.path))
    }

    pub fn load_all(&self) -> Result<Vec<Episode>> {
        self.rows.iter().map(|r| self.load(r)).collect()
    }

    /// Distinct task variations, in manifest order.
    pub fn tasks(&self) -> Vec<TaskEntry> {
        let mut seen = BTreeSet::new();
        self.rows.iter().map(ManifestRow::entry).filter(|e| seen.insert(e.clone())).collect()
    }

    pub fn rows_in(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    /// Serialized manifest text (one JSON object per line).
    pub fn to_jsonl(&self) -> String {
        self.rows.iter().map(|r| serde_json::to_string(r).expect("manifest rows serialize") + "\n").collect()
    }

    /// SHA-256 of the manifest text.
    pub fn hash(&self) -> String {
        crate::params::hex(&Sha256::digest(self.to_jsonl().as_bytes()))
    }

    /// Fails if any (task, variation) appears in both splits.
    pub fn check_split_hygiene(&self) -> Result<()> {
        let mut seen: BTreeMap<(&str, u32), Split> = BTreeMap::new();
        for r in &self.rows {
            if let Some(prev) = seen.insert((&r.task, r.variation), r.split) {
                if prev != r.split {
                    return Err(Error::config(
                        "split",
                        format!("{} variation {} is in both splits", r.task, r.variation),
                    ));
                }
            }
        }
        Ok(())
    }
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let f = fs::File::open(&path).map_err(|e| Error::from(e).in_file(&path))?;
    let mut rows = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::from(e).in_file(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| Error::from(e).in_file(&path))?);
    }
    Ok(DatasetManifest { root: dir.to_path_buf(), rows })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub tasks: Vec<(TaskSpec, Split)>,
    pub demos_per_variation: usize,
    pub seed: u64,
    pub image_size: (usize, usize),
}

/// Seed of demo `j` in a dataset built with `seed`.
pub fn demo_seed(seed: u64, j: usize) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(j as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs the expert on a fresh scene and records one episode. The observation
/// stored with each action is the one the action was chosen from.
pub fn record_demo(task: &TaskSpec, seed: u64, rig: &CameraRig) -> Result<Episode> {
    let scene = make_scene(task, seed, rig.image_size())?;
    let actions = expert_demo(&scene, task)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instruction = generate_instruction(task, &mut rng)?;
    let mut steps = Vec::with_capacity(actions.len());
    let mut s = scene;
    for (t, a) in actions.into_iter().enumerate() {
        let observation = render(&s, rig);
        s = step(&s, &a).map_err(|e| e.at_step(t))?;
        steps.push(Step { observation, action: a });
    }
    if !check_success(&s, task) {
        return Err(Error::InvalidTask("expert demonstration did not succeed".into()));
    }
    Ok(Episode {
        task: task.kind.name().to_string(),
        instruction,
        task_id: task.task_id() as u32,
        variation_id: task.variation_id,
        seed,
        steps,
    })
}

/// Generates `demos_per_variation` episodes for every task, writes them under
/// `out_dir` and writes the manifest last.
pub fn build_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<DatasetManifest> {
    if spec.demos_per_variation == 0 {
        return Err(Error::config("demos", "demos per variation must be at least 1"));
    }
    let mut keys = BTreeSet::new();
    for (t, _) in &spec.tasks {
        if !keys.insert((t.kind, t.variation_id)) {
            return Err(Error::config(
                "variations",
                format!("{} variation {} listed twice", t.kind.name(), t.variation_id),
            ));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::from(e).in_file(out_dir))?;
    let rig = CameraRig::standard(spec.image_size.0, spec.image_size.1);
    let mut rows = Vec::new();
    for (task, split) in &spec.tasks {
        for j in 0..spec.demos_per_variation {
            let seed = demo_seed(spec.seed, j);
            let ep = record_demo(task, seed, &rig).map_err(|e| Error::Episode {
                task: task.kind.name().into(),
                variation: task.variation_id,
                seed,
                source: Box::new(e),
            })?;
            let name = format!("{}_v{:04}_d{:04}.ep", task.kind.name(), task.variation_id, j);
            write_episode(&ep, &out_dir.join(&name))?;
            rows.push(ManifestRow {
                path: name,
                task: ep.task.clone(),
                variation: task.variation_id,
                seed,
                steps: ep.len(),
                split: *split,
                objects: task.num_objects,
            });
        }
    }
    let manifest = DatasetManifest { root: out_dir.to_path_buf(), rows };
    manifest.check_split_hygiene()?;
    let path = out_dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::from(e).in_file(&path))?;
    f.write_all(manifest.to_jsonl().as_bytes()).map_err(|e| Error::from(e).in_file(&path))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> DatasetSpec {
        let mut tasks = Vec::new();
        for v in 0..2 {
            tasks.push((TaskSpec::from_variation(TaskKind::PushButtons, v).unwrap(), Split::Seen));
            tasks.push((TaskSpec::from_variation(TaskKind::PushButtons, v + 10).unwrap(), Split::Unseen));
        }
        DatasetSpec { tasks, demos_per_variation: 2, seed, image_size: (32, 32) }
    }

    #[test]
    fn build_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(&spec(0), dir.path()).unwrap();
        assert_eq!(m.len(), 8);
        let loaded = load_manifest(dir.path()).unwrap();
        assert_eq!(loaded, m);
        let ep = loaded.load(&loaded.rows[0]).unwrap();
        assert_eq!(ep.len(), 2);
        assert_eq!(ep.variation_id, 0);
        let seen: BTreeSet<u32> = m.rows_in(Split::Seen).map(|r| r.variation).collect();
        let unseen: BTreeSet<u32> = m.rows_in(Split::Unseen).map(|r| r.variation).collect();
        assert!(seen.is_disjoint(&unseen));
    }

    #[test]
    fn same_seed_same_hash() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = build_dataset(&spec(4), a.path()).unwrap();
        let mb = build_dataset(&spec(4), b.path()).unwrap();
        assert_eq!(ma.hash(), mb.hash());
        for r in &ma.rows {
            assert_eq!(fs::read(a.path().join(&r.path)).unwrap(), fs::read(b.path().join(&r.path)).unwrap());
        }
    }

    #[test]
    fn zero_demos_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = spec(0);
        s.demos_per_variation = 0;
        assert!(build_dataset(&s, dir.path()).is_err());
    }
}
