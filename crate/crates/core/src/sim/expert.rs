use super::{Scene, Shape, TaskKind, TaskSpec, PALETTE};
use crate::episode::Action;
use crate::error::{Error, Result};

fn f32x3(p: [f64; 3]) -> [f32; 3] {
    p.map(|x| x as f32)
}

/// Scripted macro-step demonstration for `task` in `scene`.
pub fn expert_demo(scene: &Scene, task: &TaskSpec) -> Result<Vec<Action>> {
    let missing = |c: usize| Error::MissingGoalObject(PALETTE[c].0.to_string());
    match task.kind {
        TaskKind::ReachTarget | TaskKind::ReachOccluded => {
            let c = task.goal[0];
            let target = scene.find(Shape::Cube, c).ok_or_else(|| missing(c))?;
            Ok(vec![Action::new(f32x3(target.position), true)])
        }
        TaskKind::PushButtons => task
            .goal
            .iter()
            .map(|&c| {
                let b = scene.find(Shape::Button, c).ok_or_else(|| missing(c))?;
                Ok(Action::new(f32x3(b.position), false))
            })
            .collect(),
        TaskKind::Tower => {
            let pad = scene.find_shape(Shape::Pad).ok_or_else(|| Error::MissingGoalObject("pad".into()))?;
            let mut actions = Vec::with_capacity(task.goal.len() * 2);
            let mut level = pad.top();
            for &c in &task.goal {
                let cube = scene.find(Shape::Cube, c).ok_or_else(|| missing(c))?;
                actions.push(Action::new(f32x3(cube.position), false));
                let z = level + cube.size / 2.0;
                actions.push(Action::new(f32x3([pad.position[0], pad.position[1], z]), true));
                level += cube.size;
            }
            Ok(actions)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{check_success, make_scene, step};

    fn replay(scene: &Scene, actions: &[Action]) -> Scene {
        actions.iter().fold(scene.clone(), |s, a| step(&s, a).unwrap())
    }

    #[test]
    fn reach_is_one_open_action_at_the_target() {
        let task = TaskSpec::from_variation(TaskKind::ReachTarget, 4).unwrap();
        let scene = make_scene(&task, 1, (32, 32)).unwrap();
        let demo = expert_demo(&scene, &task).unwrap();
        assert_eq!(demo.len(), 1);
        assert_eq!(demo[0].quaternion, crate::episode::IDENTITY_QUAT);
        assert!(demo[0].is_open());
        assert_eq!(demo[0].position, f32x3(scene.objects[0].position));
    }

    #[test]
    fn push_presses_in_instructed_order() {
        let task = TaskSpec::with_goal(TaskKind::PushButtons, 0, &["red", "green"], 2).unwrap();
        let scene = make_scene(&task, 1, (32, 32)).unwrap();
        let demo = expert_demo(&scene, &task).unwrap();
        assert_eq!(demo.len(), 2);
        assert_eq!(demo[0].position, f32x3(scene.find(Shape::Button, 0).unwrap().position));
        assert_eq!(demo[1].position, f32x3(scene.find(Shape::Button, 1).unwrap().position));
    }

    #[test]
    fn two_block_tower_alternates_grasp_and_place() {
        let task = TaskSpec::with_goal(TaskKind::Tower, 0, &["red", "blue"], 2).unwrap();
        let scene = make_scene(&task, 2, (32, 32)).unwrap();
        let demo = expert_demo(&scene, &task).unwrap();
        let opens: Vec<bool> = demo.iter().map(Action::is_open).collect();
        assert_eq!(opens, vec![false, true, false, true]);
        assert!(check_success(&replay(&scene, &demo), &task));
    }

    #[test]
    fn experts_succeed_on_every_task() {
        for kind in TaskKind::ALL {
            for v in [0, 7, kind.num_variations() - 1] {
                let task = TaskSpec::from_variation(kind, v).unwrap();
                for seed in 0..15 {
                    let scene = make_scene(&task, seed, (32, 32)).unwrap();
                    let demo = expert_demo(&scene, &task).unwrap();
                    assert!(demo.len() <= 6);
                    assert!(!check_success(&scene, &task));
                    assert!(check_success(&replay(&scene, &demo), &task), "{} v{v} seed {seed}", kind.name());
                }
            }
        }
    }
}
