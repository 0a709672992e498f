//! Ray-cast rendering of axis-aligned boxes over a ground plane.
//!
//! One ray per pixel center; the nearest hit wins, which is the same
//! visibility rule as a z-buffer. The gripper itself is not drawn: it only
//! shows up in the gripper attention map.

use super::camera::{add, scale, Camera, CameraRig, Vec3};
use super::{Object, Scene};
use crate::episode::Observation;

pub const TABLE_COLOR: [u8; 3] = [200, 200, 200];
pub const FLOOR_COLOR: [u8; 3] = [90, 80, 70];
/// Distance along the ray used for pixels that hit nothing.
pub const FAR: f64 = 10.0;

enum Hit {
    Object(usize),
    Table,
    Floor,
    Sky,
}

/// Ray parameter of the entry point into the box, if the ray hits it.
fn ray_box(origin: Vec3, dir: Vec3, o: &Object) -> Option<f64> {
    let he = o.half_extents();
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        let lo = o.position[a] - he[a];
        let hi = o.position[a] + he[a];
        if dir[a].abs() < 1e-12 {
            if origin[a] < lo || origin[a] > hi {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut ta, mut tb) = ((lo - origin[a]) * inv, (hi - origin[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    Some(t0)
}

fn cast(scene: &Scene, cam: &Camera, h: usize, w: usize) -> (Hit, f64) {
    let (dir, _) = cam.pixel_ray(h, w);
    let origin = cam.position;
    let mut best = (Hit::Sky, FAR);
    if dir[2] < -1e-12 {
        let t = -origin[2] / dir[2];
        let p = add(origin, scale(dir, t));
        let hit = if scene.table.contains(p[0], p[1]) { Hit::Table } else { Hit::Floor };
        best = (hit, t);
    }
    for o in &scene.objects {
        if let Some(t) = ray_box(origin, dir, o) {
            if t < best.1 {
                best = (Hit::Object(o.id), t);
            }
        }
    }
    best
}

/// Renders RGB, point cloud and gripper map for every camera of the rig.
pub fn render(scene: &Scene, rig: &CameraRig) -> Observation {
    let (height, width) = rig.image_size();
    let mut obs = Observation::zeros(rig.len(), height, width);
    let n = height * width;
    for (k, cam) in rig.cameras.iter().enumerate() {
        for h in 0..height {
            for w in 0..width {
                let (hit, t) = cast(scene, cam, h, w);
                let color = match hit {
                    Hit::Object(id) => scene.objects[id].color,
                    Hit::Table => TABLE_COLOR,
                    Hit::Floor => FLOOR_COLOR,
                    Hit::Sky => [0, 0, 0],
                };
                let (dir, _) = cam.pixel_ray(h, w);
                let p = add(cam.position, scale(dir, t));
                let i = k * n + h * width + w;
                for c in 0..3 {
                    obs.rgb[i * 3 + c] = f32::from(color[c]) / 255.0;
                    obs.pcd[i * 3 + c] = p[c] as f32;
                }
            }
        }
        if let Some((h, w)) = cam.pixel_of(scene.gripper) {
            obs.gripper_map[k * n + h * width + w] = 1.0;
        }
    }
    obs
}

/// Per camera, per pixel: id of the visible object (`None` for background).
pub fn render_ids(scene: &Scene, rig: &CameraRig) -> Vec<Vec<Option<usize>>> {
    let (height, width) = rig.image_size();
    rig.cameras
        .iter()
        .map(|cam| {
            (0..height * width)
                .map(|i| match cast(scene, cam, i / width, i % width).0 {
                    Hit::Object(id) => Some(id),
                    _ => None,
                })
                .collect()
        })
        .collect()
}
