//! Pinhole cameras fixed around the table.
//!
//! Camera frame: x right, y down, z forward. Pixel `(h, w)` has its center at
//! image coordinates `(u, v) = (w + 0.5, h + 0.5)`.

pub type Vec3 = [f64; 3];

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub name: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub height: usize,
    pub width: usize,
    /// Camera center in world coordinates.
    pub position: Vec3,
    /// Columns are the camera axes (right, down, forward) in world coordinates.
    pub rotation: [Vec3; 3],
}

impl Camera {
    /// Camera at `eye` looking at `target`, with vertical field of view `fov_deg`.
    pub fn look_at(name: &str, eye: Vec3, target: Vec3, up: Vec3, fov_deg: f64, height: usize, width: usize) -> Self {
        let forward = normalize(sub(target, eye));
        let right = normalize(cross(forward, up));
        let down = cross(forward, right);
        let f = (height as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan();
        Camera {
            name: name.to_string(),
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            height,
            width,
            position: eye,
            rotation: [right, down, forward],
        }
    }

    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        let d = sub(p, self.position);
        [dot(self.rotation[0], d), dot(self.rotation[1], d), dot(self.rotation[2], d)]
    }

    pub fn camera_to_world(&self, p: Vec3) -> Vec3 {
        let r = &self.rotation;
        let mut out = self.position;
        for (axis, &c) in r.iter().zip(&p) {
            out = add(out, scale(*axis, c));
        }
        out
    }

    /// Continuous image coordinates `(u, v)` and z-depth of a world point, or
    /// `None` if it lies behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let c = self.world_to_camera(p);
        if c[2] <= 1e-9 {
            return None;
        }
        Some((self.fx * c[0] / c[2] + self.cx, self.fy * c[1] / c[2] + self.cy, c[2]))
    }

    /// Pixel containing the projection of `p`, if it is inside the image.
    pub fn pixel_of(&self, p: Vec3) -> Option<(usize, usize)> {
        let (u, v, _) = self.project(p)?;
        if u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64 {
            Some((v.floor() as usize, u.floor() as usize))
        } else {
            None
        }
    }

    /// World point seen at image coordinates `(u, v)` with z-depth `depth`.
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        let xc = (u - self.cx) / self.fx * depth;
        let yc = (v - self.cy) / self.fy * depth;
        self.camera_to_world([xc, yc, depth])
    }

    /// Unit ray direction (world frame) through the center of pixel `(h, w)`,
    /// and the z-component of that ray in the camera frame.
    pub fn pixel_ray(&self, h: usize, w: usize) -> (Vec3, f64) {
        let dir_cam = [(w as f64 + 0.5 - self.cx) / self.fx, (h as f64 + 0.5 - self.cy) / self.fy, 1.0];
        let n = norm(dir_cam);
        let world = sub(self.camera_to_world(dir_cam), self.position);
        (scale(world, 1.0 / n), 1.0 / n)
    }
}

/// The fixed multi-view rig: a top-down camera plus left and right shoulder
/// cameras looking at the table center.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
}

impl CameraRig {
    pub fn standard(height: usize, width: usize) -> Self {
        let origin = [0.0, 0.0, 0.0];
        CameraRig {
            cameras: vec![
                Camera::look_at("top", [0.0, 0.0, 1.0], origin, [0.0, 1.0, 0.0], 42.0, height, width),
                Camera::look_at("left", [-0.45, 0.55, 0.6], origin, [0.0, 0.0, 1.0], 56.0, height, width),
                Camera::look_at("right", [-0.45, -0.55, 0.6], origin, [0.0, 0.0, 1.0], 56.0, height, width),
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.cameras[0].height, self.cameras[0].width)
    }
}
