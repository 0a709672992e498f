//! Deterministic kinematic tabletop world: scene generation, rendering,
//! scripted experts, macro-step execution and success checks.
//!
//! The gripper teleports between macro-step targets. Cubes attach to a
//! closing gripper and are released onto their support when it opens.
//! Buttons register presses but never change appearance, so press history is
//! not recoverable from any single rendered frame.

mod camera;
mod expert;
mod render;
mod task;

pub use camera::{Camera, CameraRig, Vec3};
pub use expert::expert_demo;
pub use render::{render, render_ids};
pub use task::{color_index, ordered_goal, TaskKind, TaskSpec, NUM_TASKS, PALETTE};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::episode::Action;
use crate::error::{Error, Result};

pub const BUTTON_SIZE: f64 = 0.08;
pub const BUTTON_HEIGHT: f64 = 0.02;
pub const CUBE_SIZE: f64 = 0.07;
pub const REACH_SIZE: f64 = 0.08;
pub const PAD_SIZE: f64 = 0.1;
pub const OCCLUDER_SIZE: f64 = 0.16;
/// Gripper rest pose; pressing a button returns the gripper here.
pub const HOME: Vec3 = [-0.15, 0.0, 0.35];
pub const PAD_COLOR: [u8; 3] = [60, 60, 70];
pub const OCCLUDER_COLOR: [u8; 3] = [128, 128, 128];
/// Press radius as a fraction of the button size.
pub const PRESS_RADIUS: f64 = 0.4;
/// Grasp radius as a fraction of the cube size.
pub const GRASP_RADIUS: f64 = 0.5;
const MAX_HEIGHT: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Button,
    Cube,
    /// Flat stacking target for the tower task.
    Pad,
    /// Floating box that hides the target from one camera.
    Occluder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Object {
    pub id: usize,
    pub shape: Shape,
    /// Palette index for colored objects.
    pub color_index: Option<usize>,
    pub color: [u8; 3],
    /// Box center (m).
    pub position: Vec3,
    pub size: f64,
}

impl Object {
    /// Half extents of the axis-aligned box.
    pub fn half_extents(&self) -> Vec3 {
        let s = self.size / 2.0;
        match self.shape {
            Shape::Button => [s, s, BUTTON_HEIGHT / 2.0],
            Shape::Pad => [s, s, 0.002],
            Shape::Cube | Shape::Occluder => [s, s, s],
        }
    }

    pub fn top(&self) -> f64 {
        self.position[2] + self.half_extents()[2]
    }

    pub fn color_name(&self) -> &'static str {
        self.color_index.map(|i| PALETTE[i].0).unwrap_or("none")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TableBounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl TableBounds {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

pub const TABLE: TableBounds = TableBounds { x_min: -0.3, x_max: 0.3, y_min: -0.3, y_max: 0.3 };

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub objects: Vec<Object>,
    pub gripper: Vec3,
    pub gripper_open: bool,
    /// Held object id and its offset from the gripper.
    pub held: Option<(usize, Vec3)>,
    /// Object ids of buttons in the order they were pressed.
    pub pressed: Vec<usize>,
    pub table: TableBounds,
    pub rng_seed: u64,
    /// Set when the last step had to clamp its target into the workspace.
    pub clamped: bool,
}

impl Scene {
    pub fn object(&self, id: usize) -> &Object {
        &self.objects[id]
    }

    /// First object of the given shape with the given palette color.
    pub fn find(&self, shape: Shape, color: usize) -> Option<&Object> {
        self.objects.iter().find(|o| o.shape == shape && o.color_index == Some(color))
    }

    pub fn find_shape(&self, shape: Shape) -> Option<&Object> {
        self.objects.iter().find(|o| o.shape == shape)
    }

    pub fn pressed_colors(&self) -> Vec<usize> {
        self.pressed.iter().filter_map(|&id| self.objects[id].color_index).collect()
    }
}

fn mix_seed(task: &TaskSpec, seed: u64) -> u64 {
    // splitmix64 over (seed, task id, variation)
    let mut z = seed
        ^ (task.kind.id() as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ u64::from(task.variation_id).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn footprint_overlaps(a: (f64, f64, f64), b: (f64, f64, f64), gap: f64) -> bool {
    let lim = (a.2 + b.2) / 2.0 + gap;
    (a.0 - b.0).abs() < lim && (a.1 - b.1).abs() < lim
}

/// Random non-overlapping table positions for objects of the given sizes.
fn place(rng: &mut ChaCha8Rng, sizes: &[f64], margin: f64) -> Option<Vec<(f64, f64)>> {
    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    for &s in sizes {
        let lo_x = TABLE.x_min + s / 2.0 + margin;
        let hi_x = TABLE.x_max - s / 2.0 - margin;
        let lo_y = TABLE.y_min + s / 2.0 + margin;
        let hi_y = TABLE.y_max - s / 2.0 - margin;
        let mut ok = false;
        for _ in 0..200 {
            let c = (rng.gen_range(lo_x..hi_x), rng.gen_range(lo_y..hi_y), s);
            if placed.iter().all(|&p| !footprint_overlaps(p, c, 0.02)) {
                placed.push(c);
                ok = true;
                break;
            }
        }
        if !ok {
            return None;
        }
    }
    Some(placed.into_iter().map(|(x, y, _)| (x, y)).collect())
}

fn colored(id: usize, shape: Shape, color: usize, xy: (f64, f64), size: f64) -> Object {
    let z = match shape {
        Shape::Button => BUTTON_HEIGHT / 2.0,
        Shape::Pad => 0.002,
        _ => size / 2.0,
    };
    Object { id, shape, color_index: Some(color), color: PALETTE[color].1, position: [xy.0, xy.1, z], size }
}

/// Builds a randomized scene for `task`. Identical `(task, seed)` pairs give
/// identical scenes.
pub fn make_scene(task: &TaskSpec, seed: u64, image_size: (usize, usize)) -> Result<Scene> {
    let (h, w) = image_size;
    if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
        return Err(Error::ImageSize(h, w));
    }
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(task, seed));
    // Distractor colors: palette entries not in the goal, in random order.
    let mut others: Vec<usize> = (0..PALETTE.len()).filter(|c| !task.goal.contains(c)).collect();
    for i in (1..others.len()).rev() {
        let j = rng.gen_range(0..=i);
        others.swap(i, j);
    }
    let colors: Vec<usize> =
        task.goal.iter().copied().chain(others).take(task.num_objects.max(task.goal.len())).collect();

    let mut scene = Scene {
        objects: Vec::new(),
        gripper: HOME,
        gripper_open: true,
        held: None,
        pressed: Vec::new(),
        table: TABLE,
        rng_seed: seed,
        clamped: false,
    };
    let attempts = 100;
    match task.kind {
        TaskKind::ReachTarget | TaskKind::PushButtons | TaskKind::Tower => {
            let (shape, size) = match task.kind {
                TaskKind::ReachTarget => (Shape::Cube, REACH_SIZE),
                TaskKind::PushButtons => (Shape::Button, BUTTON_SIZE),
                _ => (Shape::Cube, CUBE_SIZE),
            };
            let mut sizes = vec![size; colors.len()];
            if task.kind == TaskKind::Tower {
                sizes.push(PAD_SIZE);
            }
            let xy = place(&mut rng, &sizes, 0.01).ok_or_else(|| Error::Placement {
                task: task.kind.name().into(),
                seed,
                attempts,
            })?;
            for (i, &c) in colors.iter().enumerate() {
                scene.objects.push(colored(i, shape, c, xy[i], size));
            }
            if task.kind == TaskKind::Tower {
                let p = xy[colors.len()];
                scene.objects.push(Object {
                    id: colors.len(),
                    shape: Shape::Pad,
                    color_index: None,
                    color: PAD_COLOR,
                    position: [p.0, p.1, 0.002],
                    size: PAD_SIZE,
                });
            }
        }
        TaskKind::ReachOccluded => {
            let rig = CameraRig::standard(h, w);
            let mut done = false;
            for _ in 0..attempts {
                if let Some(s) = occluded_layout(&mut rng, &colors, &rig) {
                    scene.objects = s;
                    done = true;
                    break;
                }
            }
            if !done {
                return Err(Error::Placement { task: task.kind.name().into(), seed, attempts });
            }
        }
    }
    Ok(scene)
}

/// Target cube (plus distractors) with an occluder hiding the target from
/// exactly one randomly chosen camera.
fn occluded_layout(rng: &mut ChaCha8Rng, colors: &[usize], rig: &CameraRig) -> Option<Vec<Object>> {
    let xy = place(rng, &vec![REACH_SIZE; colors.len()], 0.02)?;
    let mut objects: Vec<Object> =
        colors.iter().enumerate().map(|(i, &c)| colored(i, Shape::Cube, c, xy[i], REACH_SIZE)).collect();
    let target = objects[0].position;
    let hidden_cam = rng.gen_range(0..rig.len());
    let eye = rig.cameras[hidden_cam].position;
    let frac = rng.gen_range(0.45..0.6);
    let mut center = camera::add(target, camera::scale(camera::sub(eye, target), frac));
    // Shift the occluder off the sight line so the target sits somewhere
    // inside its shadow rather than at its center.
    let jitter = OCCLUDER_SIZE * 0.3;
    for c in center.iter_mut() {
        *c += rng.gen_range(-jitter..jitter);
    }
    if !TABLE.contains(center[0], center[1]) {
        return None;
    }
    objects.push(Object {
        id: objects.len(),
        shape: Shape::Occluder,
        color_index: None,
        color: OCCLUDER_COLOR,
        position: center,
        size: OCCLUDER_SIZE,
    });
    let scene = Scene {
        objects: objects.clone(),
        gripper: HOME,
        gripper_open: true,
        held: None,
        pressed: Vec::new(),
        table: TABLE,
        rng_seed: 0,
        clamped: false,
    };
    let ids = render_ids(&scene, rig);
    for (k, cam_ids) in ids.iter().enumerate() {
        let visible = cam_ids.iter().filter(|&&id| id == Some(0)).count();
        if k == hidden_cam && visible > 0 {
            return None;
        }
        if k != hidden_cam && visible < 2 {
            return None;
        }
    }
    Some(objects)
}

fn press_radius(o: &Object) -> f64 {
    PRESS_RADIUS * o.size
}

/// Executes one macro-step action and returns the successor scene.
pub fn step(scene: &Scene, action: &Action) -> Result<Scene> {
    if !action.position.iter().all(|p| p.is_finite()) {
        return Err(Error::InvalidAction(format!("non-finite position {:?}", action.position)));
    }
    let qn = action.quaternion_norm();
    if (qn - 1.0).abs() > 1e-3 {
        return Err(Error::InvalidAction(format!("quaternion norm {qn} is not unit")));
    }
    let mut next = scene.clone();
    let raw = action.position.map(f64::from);
    let target = [
        raw[0].clamp(scene.table.x_min, scene.table.x_max),
        raw[1].clamp(scene.table.y_min, scene.table.y_max),
        raw[2].clamp(0.0, MAX_HEIGHT),
    ];
    next.clamped = target != raw;
    next.gripper = target;
    if let Some((id, offset)) = next.held {
        next.objects[id].position = camera::add(target, offset);
    }

    let open = action.is_open();
    if !open && next.held.is_none() {
        let grasp = next
            .objects
            .iter()
            .filter(|o| o.shape == Shape::Cube)
            .map(|o| (o.id, camera::norm(camera::sub(o.position, target))))
            .filter(|&(id, d)| d <= GRASP_RADIUS * next.objects[id].size)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((id, _)) = grasp {
            next.held = Some((id, camera::sub(next.objects[id].position, target)));
        }
    } else if open {
        if let Some((id, _)) = next.held.take() {
            let z = support_height(&next, id);
            next.objects[id].position[2] = z + next.objects[id].half_extents()[2];
        }
    }
    next.gripper_open = open;

    let pressed = next.objects.iter().find(|o| {
        o.shape == Shape::Button && {
            let dx = o.position[0] - target[0];
            let dy = o.position[1] - target[1];
            (dx * dx + dy * dy).sqrt() <= press_radius(o) && target[2] <= o.top() + press_radius(o)
        }
    });
    if let Some(b) = pressed {
        next.pressed.push(b.id);
        // A press is a tap: the gripper returns to rest afterwards.
        next.gripper = HOME;
    }
    Ok(next)
}

/// Height of the highest top face under the footprint of object `id`
/// (0 for the bare table).
fn support_height(scene: &Scene, id: usize) -> f64 {
    let o = &scene.objects[id];
    let he = o.half_extents();
    scene
        .objects
        .iter()
        .filter(|s| s.id != id && s.shape != Shape::Occluder)
        .filter(|s| {
            let she = s.half_extents();
            (s.position[0] - o.position[0]).abs() < he[0] + she[0]
                && (s.position[1] - o.position[1]).abs() < he[1] + she[1]
                && s.top() <= o.position[2] + 1e-9
        })
        .map(Object::top)
        .fold(0.0, f64::max)
}

/// Whether the scene satisfies the task goal. Pure.
pub fn check_success(scene: &Scene, task: &TaskSpec) -> bool {
    match task.kind {
        TaskKind::PushButtons => scene.pressed_colors() == task.goal,
        TaskKind::ReachTarget | TaskKind::ReachOccluded => {
            let Some(t) = scene.find(Shape::Cube, task.goal[0]) else { return false };
            camera::norm(camera::sub(scene.gripper, t.position)) <= PRESS_RADIUS * t.size
        }
        TaskKind::Tower => {
            let Some(pad) = scene.find_shape(Shape::Pad) else { return false };
            let mut level = pad.top();
            for &c in &task.goal {
                let Some(cube) = scene.find(Shape::Cube, c) else { return false };
                if scene.held.is_some_and(|(id, _)| id == cube.id) {
                    return false;
                }
                let dx = cube.position[0] - pad.position[0];
                let dy = cube.position[1] - pad.position[1];
                if (dx * dx + dy * dy).sqrt() > PRESS_RADIUS * cube.size {
                    return false;
                }
                let bottom = cube.position[2] - cube.half_extents()[2];
                if (bottom - level).abs() > 0.25 * cube.size {
                    return false;
                }
                level = cube.top();
            }
            true
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn push(goal: &[&str], n: usize) -> TaskSpec {
        TaskSpec::with_goal(TaskKind::PushButtons, 0, goal, n).unwrap()
    }

    #[test]
    fn push_buttons_scene_has_three_distinct_buttons() {
        let task = TaskSpec::from_variation(TaskKind::PushButtons, 0).unwrap();
        let scene = make_scene(&task, 7, (32, 32)).unwrap();
        let buttons: Vec<_> = scene.objects.iter().filter(|o| o.shape == Shape::Button).collect();
        assert_eq!(buttons.len(), 3);
        for (i, a) in buttons.iter().enumerate() {
            assert!(scene.table.contains(a.position[0], a.position[1]));
            for b in &buttons[i + 1..] {
                assert_ne!(a.color, b.color);
            }
        }
    }

    #[test]
    fn scenes_are_deterministic() {
        for kind in TaskKind::ALL {
            let task = TaskSpec::from_variation(kind, 3).unwrap();
            assert_eq!(make_scene(&task, 11, (32, 32)).unwrap(), make_scene(&task, 11, (32, 32)).unwrap());
        }
    }

    #[test]
    fn reach_scene_has_one_target_and_home_gripper() {
        let task = TaskSpec::from_variation(TaskKind::ReachTarget, 0).unwrap();
        let scene = make_scene(&task, 3, (48, 48)).unwrap();
        assert_eq!(scene.objects.len(), 1);
        assert_eq!(scene.gripper, HOME);
    }

    #[test]
    fn rejects_bad_image_sizes() {
        let task = TaskSpec::from_variation(TaskKind::ReachTarget, 0).unwrap();
        assert!(matches!(make_scene(&task, 0, (30, 32)), Err(Error::ImageSize(30, 32))));
        assert!(matches!(make_scene(&task, 0, (0, 0)), Err(Error::ImageSize(0, 0))));
    }

    #[test]
    fn closing_at_cube_center_attaches() {
        let task = TaskSpec::from_variation(TaskKind::Tower, 0).unwrap();
        let scene = make_scene(&task, 1, (32, 32)).unwrap();
        let cube = scene.find(Shape::Cube, task.goal[0]).unwrap().clone();
        let p = cube.position.map(|x| x as f32);
        let next = step(&scene, &Action::new(p, false)).unwrap();
        assert_eq!(next.held.map(|h| h.0), Some(cube.id));
        let lifted = step(&next, &Action::new([0.0, 0.0, 0.3], false)).unwrap();
        assert!((lifted.objects[cube.id].position[2] - 0.3).abs() < 1e-6);
    }

    #[test]
    fn releasing_above_a_cube_stacks_on_top() {
        let task = TaskSpec::from_variation(TaskKind::Tower, 0).unwrap();
        let scene = make_scene(&task, 1, (32, 32)).unwrap();
        let a = scene.find(Shape::Cube, task.goal[0]).unwrap().clone();
        let b = scene.find(Shape::Cube, task.goal[1]).unwrap().clone();
        let s = step(&scene, &Action::new(a.position.map(|x| x as f32), false)).unwrap();
        let above = [b.position[0] as f32, b.position[1] as f32, 0.4];
        let s = step(&s, &Action::new(above, false)).unwrap();
        let s = step(&s, &Action::new(above, true)).unwrap();
        assert!(s.held.is_none());
        let placed = &s.objects[a.id];
        assert!((placed.position[2] - (b.top() + CUBE_SIZE / 2.0)).abs() < 1e-9);
    }

    #[test]
    fn press_radius_contract() {
        let task = push(&["red", "green"], 2);
        let scene = make_scene(&task, 5, (32, 32)).unwrap();
        // A point at least 2 press radii from every button.
        let far = (0..100)
            .map(|i| [-0.28 + 0.0056 * i as f64, 0.28, 0.01])
            .find(|p| {
                scene.objects.iter().all(|o| {
                    let d = ((o.position[0] - p[0]).powi(2) + (o.position[1] - p[1]).powi(2)).sqrt();
                    d >= 2.0 * PRESS_RADIUS * o.size
                })
            })
            .unwrap();
        let s = step(&scene, &Action::new(far.map(|x| x as f32), false)).unwrap();
        assert!(s.pressed.is_empty());
        let red = scene.find(Shape::Button, color_index("red").unwrap()).unwrap();
        let s = step(&scene, &Action::new(red.position.map(|x| x as f32), false)).unwrap();
        assert_eq!(s.pressed, vec![red.id]);
        assert_eq!(s.gripper, HOME);
    }

    #[test]
    fn push_success_requires_exact_order() {
        let task = push(&["red", "green"], 2);
        let scene = make_scene(&task, 5, (32, 32)).unwrap();
        let red = scene.find(Shape::Button, color_index("red").unwrap()).unwrap().id;
        let green = scene.find(Shape::Button, color_index("green").unwrap()).unwrap().id;
        let with = |p: Vec<usize>| Scene { pressed: p, ..scene.clone() };
        assert!(check_success(&with(vec![red, green]), &task));
        assert!(!check_success(&with(vec![green, red]), &task));
        assert!(!check_success(&with(vec![red, green, red]), &task));
        assert!(!check_success(&with(vec![red]), &task));
    }

    #[test]
    fn out_of_bounds_targets_are_clamped_and_flagged() {
        let task = TaskSpec::from_variation(TaskKind::ReachTarget, 0).unwrap();
        let scene = make_scene(&task, 2, (32, 32)).unwrap();
        let s = step(&scene, &Action::new([2.0, -2.0, 0.1], true)).unwrap();
        assert!(s.clamped);
        assert_eq!(s.gripper, [TABLE.x_max, TABLE.y_min, f64::from(0.1f32)]);
        let s2 = step(&s, &Action::new([0.0, 0.0, 0.1], true)).unwrap();
        assert!(!s2.clamped);
    }

    #[test]
    fn invalid_actions_are_rejected() {
        let task = TaskSpec::from_variation(TaskKind::ReachTarget, 0).unwrap();
        let scene = make_scene(&task, 2, (32, 32)).unwrap();
        let mut a = Action::new([0.0, 0.0, 0.1], true);
        a.quaternion = [0.5, 0.0, 0.0, 0.0];
        assert!(step(&scene, &a).is_err());
        assert!(step(&scene, &Action::new([f32::NAN, 0.0, 0.0], true)).is_err());
    }
}
