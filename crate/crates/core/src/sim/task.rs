//! Task families, the color palette and the variation enumeration.
//!
//! Variations of the ordered tasks enumerate ordered color tuples:
//!
//! * length 2 (ids `0..90`): `a = 1 + v / 10`, `i = v % 10`, goal `(i, (i + a) % 10)`.
//! * length 3 (ids `0..720` for tower, `90..810` for push_buttons, offset
//!   removed): `v = 10 * p + i` where `p` indexes the 72 step pairs `(a, b)`
//!   with `a, b` in `1..=9` and `a + b != 10` in lexicographic order; goal
//!   `(i, (i + a) % 10, (i + a + b) % 10)`.
//!
//! Both maps are bijections onto ordered tuples of distinct colors.

use crate::error::{Error, Result};

pub const PALETTE: [(&str, [u8; 3]); 10] = [
    ("red", [220, 30, 30]),
    ("green", [30, 180, 40]),
    ("blue", [30, 60, 220]),
    ("yellow", [235, 220, 40]),
    ("cyan", [40, 210, 220]),
    ("magenta", [200, 40, 200]),
    ("orange", [245, 140, 20]),
    ("purple", [110, 40, 150]),
    ("white", [250, 250, 250]),
    ("pink", [250, 160, 190]),
];

pub const NUM_TASKS: usize = 4;

pub fn color_index(name: &str) -> Option<usize> {
    PALETTE.iter().position(|(n, _)| *n == name)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    ReachTarget,
    PushButtons,
    Tower,
    /// Reach a cube that one of the cameras cannot see.
    ReachOccluded,
}

impl TaskKind {
    pub const ALL: [TaskKind; NUM_TASKS] =
        [TaskKind::ReachTarget, TaskKind::PushButtons, TaskKind::Tower, TaskKind::ReachOccluded];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<TaskKind> {
        TaskKind::ALL.get(id).copied().ok_or(Error::TaskOutOfRange(id, NUM_TASKS))
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::ReachTarget => "reach_target",
            TaskKind::PushButtons => "push_buttons",
            TaskKind::Tower => "tower",
            TaskKind::ReachOccluded => "reach_occluded",
        }
    }

    pub fn from_name(name: &str) -> Result<TaskKind> {
        TaskKind::ALL.into_iter().find(|k| k.name() == name).ok_or_else(|| Error::UnknownTask(name.to_string()))
    }

    pub fn num_variations(self) -> u32 {
        match self {
            TaskKind::ReachTarget | TaskKind::ReachOccluded => 10,
            TaskKind::PushButtons => 90 + 720,
            TaskKind::Tower => 720,
        }
    }

    fn default_objects(self, goal_len: usize) -> usize {
        match self {
            TaskKind::ReachTarget | TaskKind::ReachOccluded => 1,
            TaskKind::PushButtons => goal_len.max(3),
            TaskKind::Tower => goal_len,
        }
    }
}

fn step_pairs() -> impl Iterator<Item = (usize, usize)> {
    (1..=9).flat_map(|a| (1..=9).map(move |b| (a, b))).filter(|(a, b)| a + b != 10)
}

fn pair_goal(v: usize) -> Vec<usize> {
    let (a, i) = (1 + v / 10, v % 10);
    vec![i, (i + a) % 10]
}

fn triple_goal(v: usize) -> Vec<usize> {
    let (p, i) = (v / 10, v % 10);
    let (a, b) = step_pairs().nth(p).expect("triple variation in range");
    vec![i, (i + a) % 10, (i + a + b) % 10]
}

/// Goal colors (palette indices) for a variation id, if it is in range.
pub fn ordered_goal(kind: TaskKind, variation: u32) -> Option<Vec<usize>> {
    if variation >= kind.num_variations() {
        return None;
    }
    let v = variation as usize;
    Some(match kind {
        TaskKind::ReachTarget | TaskKind::ReachOccluded => vec![v],
        TaskKind::PushButtons if v < 90 => pair_goal(v),
        TaskKind::PushButtons => triple_goal(v - 90),
        TaskKind::Tower => triple_goal(v),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub variation_id: u32,
    /// Ordered palette indices.
    pub goal: Vec<usize>,
    /// Objects of the task's shape in the scene (goal objects plus distractors).
    pub num_objects: usize,
}

impl TaskSpec {
    /// The task for an enumerated variation id.
    pub fn from_variation(kind: TaskKind, variation: u32) -> Result<TaskSpec> {
        let goal = ordered_goal(kind, variation)
            .ok_or_else(|| Error::InvalidTask(format!("{} has no variation {variation}", kind.name())))?;
        let num_objects = kind.default_objects(goal.len());
        Ok(TaskSpec { kind, variation_id: variation, goal, num_objects })
    }

    /// A task with an explicit goal, labelled with a caller-chosen variation id.
    pub fn with_goal(kind: TaskKind, variation: u32, goal: &[&str], num_objects: usize) -> Result<TaskSpec> {
        let goal = goal
            .iter()
            .map(|c| color_index(c).ok_or_else(|| Error::UnknownColor(c.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let spec = TaskSpec { kind, variation_id: variation, goal, num_objects };
        spec.validate()?;
        Ok(spec)
    }

    pub fn task_id(&self) -> usize {
        self.kind.id()
    }

    pub fn goal_names(&self) -> Vec<&'static str> {
        self.goal.iter().map(|&c| PALETTE[c].0).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidTask(m));
        if self.goal.is_empty() || self.goal.len() > 3 {
            return bad(format!("goal length {} is outside 1..=3", self.goal.len()));
        }
        if let Some(&c) = self.goal.iter().find(|&&c| c >= PALETTE.len()) {
            return Err(Error::UnknownColor(format!("#{c}")));
        }
        for (i, c) in self.goal.iter().enumerate() {
            if self.goal[..i].contains(c) {
                return bad(format!("goal repeats color {}", PALETTE[*c].0));
            }
        }
        let single = matches!(self.kind, TaskKind::ReachTarget | TaskKind::ReachOccluded);
        if single && self.goal.len() != 1 {
            return bad(format!("{} takes exactly one goal color", self.kind.name()));
        }
        if self.num_objects < self.goal.len() || self.num_objects > 4 {
            return bad(format!("{} objects cannot hold a goal of {}", self.num_objects, self.goal.len()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn enumeration_is_a_bijection_onto_ordered_tuples() {
        for kind in TaskKind::ALL {
            let goals: HashSet<Vec<usize>> =
                (0..kind.num_variations()).map(|v| ordered_goal(kind, v).unwrap()).collect();
            assert_eq!(goals.len() as u32, kind.num_variations());
            for g in &goals {
                let distinct: HashSet<_> = g.iter().collect();
                assert_eq!(distinct.len(), g.len());
            }
        }
        assert_eq!(ordered_goal(TaskKind::PushButtons, 0).unwrap(), vec![0, 1]);
        assert_eq!(ordered_goal(TaskKind::PushButtons, 10).unwrap(), vec![0, 2]);
        assert!(ordered_goal(TaskKind::Tower, 720).is_none());
    }

    #[test]
    fn explicit_goals_are_checked() {
        assert!(TaskSpec::with_goal(TaskKind::PushButtons, 0, &["red", "teal"], 2).is_err());
        assert!(TaskSpec::with_goal(TaskKind::PushButtons, 0, &["red", "red"], 2).is_err());
        assert!(TaskSpec::with_goal(TaskKind::ReachTarget, 0, &["red", "blue"], 2).is_err());
        assert!(TaskSpec::with_goal(TaskKind::Tower, 0, &["red", "blue"], 2).is_ok());
    }
}
