//! Fixtures shared by the benchmarks.

use deskbot_core::episode::{record_demo, Episode};
use deskbot_core::sim::{CameraRig, TaskKind, TaskSpec};

pub fn demos(kind: TaskKind, variation: u32, n: u64, size: usize) -> Vec<Episode> {
    let rig = CameraRig::standard(size, size);
    let task = TaskSpec::from_variation(kind, variation).expect("variation in range");
    (0..n).map(|s| record_demo(&task, s, &rig).expect("expert demo")).collect()
}
