//! Observation/action/episode data model, the on-disk episode container,
//! dataset generation and aligned augmentation.

mod augment;
mod container;
mod dataset;

pub use augment::{augment, AugmentConfig, CropWindow};
pub use container::{decode_episode, encode_episode, read_episode, write_episode, CONTAINER_MAGIC, CONTAINER_VERSION};
pub use dataset::{
    build_dataset, demo_seed, load_manifest, record_demo, DatasetManifest, DatasetSpec, ManifestRow, Split, TaskEntry,
    MANIFEST_FILE,
};

/// Multi-camera observation at one macro step. All arrays are camera-major,
/// row-major, channel-last: `rgb[k][h][w][c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub cameras: usize,
    pub height: usize,
    pub width: usize,
    /// `K x H x W x 3`, values in `[0, 1]` (multiples of 1/255).
    pub rgb: Vec<f32>,
    /// `K x H x W x 3`, world-frame meters, pixel-aligned with `rgb`.
    pub pcd: Vec<f32>,
    /// `K x H x W`, exactly 0 or 1.
    pub gripper_map: Vec<f32>,
}

impl Observation {
    pub fn zeros(cameras: usize, height: usize, width: usize) -> Self {
        let n = cameras * height * width;
        Observation { cameras, height, width, rgb: vec![0.0; n * 3], pcd: vec![0.0; n * 3], gripper_map: vec![0.0; n] }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.cameras, self.height, self.width)
    }

    pub fn pixels_per_camera(&self) -> usize {
        self.height * self.width
    }

    pub fn rgb_of(&self, k: usize) -> &[f32] {
        let n = self.pixels_per_camera() * 3;
        &self.rgb[k * n..(k + 1) * n]
    }

    pub fn pcd_of(&self, k: usize) -> &[f32] {
        let n = self.pixels_per_camera() * 3;
        &self.pcd[k * n..(k + 1) * n]
    }

    pub fn gripper_map_of(&self, k: usize) -> &[f32] {
        let n = self.pixels_per_camera();
        &self.gripper_map[k * n..(k + 1) * n]
    }

    /// Keeps only the listed cameras, in the given order.
    pub fn select_cameras(&self, cams: &[usize]) -> Observation {
        let mut out = Observation::zeros(cams.len(), self.height, self.width);
        let n = self.pixels_per_camera();
        for (dst, &k) in cams.iter().enumerate() {
            out.rgb[dst * n * 3..(dst + 1) * n * 3].copy_from_slice(self.rgb_of(k));
            out.pcd[dst * n * 3..(dst + 1) * n * 3].copy_from_slice(self.pcd_of(k));
            out.gripper_map[dst * n..(dst + 1) * n].copy_from_slice(self.gripper_map_of(k));
        }
        out
    }

    pub fn is_consistent(&self) -> bool {
        let n = self.cameras * self.height * self.width;
        self.rgb.len() == n * 3
            && self.pcd.len() == n * 3
            && self.gripper_map.len() == n
            && self.gripper_map.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

/// Gripper target: position (m), rotation quaternion `(w, x, y, z)` and an
/// open flag (1 = open, 0 = closed).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Action {
    pub position: [f32; 3],
    pub quaternion: [f32; 4],
    pub open: f32,
}

pub const IDENTITY_QUAT: [f32; 4] = [1.0, 0.0, 0.0, 0.0];

impl Action {
    pub fn new(position: [f32; 3], open: bool) -> Self {
        Action { position, quaternion: IDENTITY_QUAT, open: if open { 1.0 } else { 0.0 } }
    }

    /// `[x, y, z, qw, qx, qy, qz, open]`
    pub fn to_vec(&self) -> [f32; 8] {
        let (p, q) = (self.position, self.quaternion);
        [p[0], p[1], p[2], q[0], q[1], q[2], q[3], self.open]
    }

    pub fn from_slice(v: &[f32]) -> Self {
        Action { position: [v[0], v[1], v[2]], quaternion: [v[3], v[4], v[5], v[6]], open: v[7] }
    }

    pub fn is_open(&self) -> bool {
        self.open >= 0.5
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|x| x.is_finite())
    }

    pub fn quaternion_norm(&self) -> f64 {
        self.quaternion.iter().map(|&q| f64::from(q) * f64::from(q)).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub observation: Observation,
    pub action: Action,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub task: String,
    pub instruction: String,
    pub task_id: u32,
    pub variation_id: u32,
    pub seed: u64,
    pub steps: Vec<Step>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let o = &self.steps[0].observation;
        (o.cameras, o.height, o.width)
    }
}
