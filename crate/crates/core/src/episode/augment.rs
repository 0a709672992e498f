use rand::Rng;

use super::Observation;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Brightness and contrast factors are drawn from `[1 - jitter, 1 + jitter]`.
    pub jitter: f32,
    /// Crop side length as a fraction of the image side.
    pub crop_fraction: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { jitter: 0.1, crop_fraction: 7.0 / 8.0 }
    }
}

/// Crop rectangle in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropWindow {
    pub fn full(height: usize, width: usize) -> Self {
        CropWindow { top: 0, left: 0, height, width }
    }

    /// Source pixel sampled by output pixel `(h, w)` under nearest resizing
    /// back to `out_h x out_w`.
    pub fn nearest(&self, h: usize, w: usize, out_h: usize, out_w: usize) -> (usize, usize) {
        (self.top + h * self.height / out_h, self.left + w * self.width / out_w)
    }

    /// Continuous source coordinate (pixel-center convention) of output pixel `(h, w)`.
    fn source(&self, h: usize, w: usize, out_h: usize, out_w: usize) -> (f64, f64) {
        let y = self.top as f64 + (h as f64 + 0.5) * self.height as f64 / out_h as f64 - 0.5;
        let x = self.left as f64 + (w as f64 + 0.5) * self.width as f64 / out_w as f64 - 0.5;
        (y, x)
    }
}

fn bilinear(img: &[f32], height: usize, width: usize, y: f64, x: f64, out: &mut [f32]) {
    let y = y.clamp(0.0, (height - 1) as f64);
    let x = x.clamp(0.0, (width - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(height - 1), (x0 + 1).min(width - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    for (c, o) in out.iter_mut().enumerate() {
        let at = |yy: usize, xx: usize| img[(yy * width + xx) * 3 + c];
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
        let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
        *o = top * (1.0 - fy) + bottom * fy;
    }
}

/// Random crop (one window for all cameras of the observation) resized back
/// to full size, plus brightness/contrast jitter on RGB. Point cloud and
/// gripper map use nearest resizing so every output pixel keeps the exact
/// values of one source pixel.
pub fn augment<R: Rng>(obs: &Observation, config: &AugmentConfig, rng: &mut R) -> (Observation, CropWindow) {
    let (k_cams, height, width) = obs.dims();
    let ch = ((height as f64 * config.crop_fraction).round() as usize).clamp(1, height);
    let cw = ((width as f64 * config.crop_fraction).round() as usize).clamp(1, width);
    let window =
        CropWindow { top: rng.gen_range(0..=height - ch), left: rng.gen_range(0..=width - cw), height: ch, width: cw };
    let mut out = Observation::zeros(k_cams, height, width);
    let n = height * width;
    for k in 0..k_cams {
        let rgb = obs.rgb_of(k);
        let pcd = obs.pcd_of(k);
        let grip = obs.gripper_map_of(k);
        let (brightness, contrast) = if config.jitter > 0.0 {
            let j = config.jitter;
            (rng.gen_range(1.0 - j..=1.0 + j), rng.gen_range(1.0 - j..=1.0 + j))
        } else {
            (1.0, 1.0)
        };
        for h in 0..height {
            for w in 0..width {
                let i = k * n + h * width + w;
                let (sh, sw) = window.nearest(h, w, height, width);
                let s = sh * width + sw;
                out.pcd[i * 3..i * 3 + 3].copy_from_slice(&pcd[s * 3..s * 3 + 3]);
                out.gripper_map[i] = grip[s];
                let (y, x) = window.source(h, w, height, width);
                bilinear(rgb, height, width, y, x, &mut out.rgb[i * 3..i * 3 + 3]);
            }
        }
        if brightness != 1.0 || contrast != 1.0 {
            let cam = &mut out.rgb[k * n * 3..(k + 1) * n * 3];
            let mean = cam.iter().sum::<f32>() / cam.len() as f32;
            for v in cam.iter_mut() {
                *v = (((*v - mean) * contrast + mean) * brightness).clamp(0.0, 1.0);
            }
        }
    }
    (out, window)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(k: usize, h: usize, w: usize) -> Observation {
        let mut o = Observation::zeros(k, h, w);
        for (i, v) in o.rgb.iter_mut().enumerate() {
            *v = ((i * 7919) % 256) as f32 / 255.0;
        }
        for (i, v) in o.pcd.iter_mut().enumerate() {
            *v = i as f32;
        }
        o.gripper_map[5 * w + 9] = 1.0;
        o
    }

    #[test]
    fn identity_configuration_changes_nothing() {
        let obs = sample(2, 16, 16);
        let cfg = AugmentConfig { jitter: 0.0, crop_fraction: 1.0 };
        let (out, win) = augment(&obs, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(win, CropWindow::full(16, 16));
        assert_eq!(out, obs);
    }

    #[test]
    fn pcd_and_gripper_follow_the_same_source_pixels() {
        let obs = sample(3, 32, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let (out, win) = augment(&obs, &AugmentConfig::default(), &mut rng);
            assert_eq!((win.height, win.width), (28, 28));
            for k in 0..3 {
                for h in 0..32 {
                    for w in 0..32 {
                        let (sh, sw) = win.nearest(h, w, 32, 32);
                        let s = sh * 32 + sw;
                        let o = h * 32 + w;
                        assert_eq!(out.pcd_of(k)[o * 3..o * 3 + 3], obs.pcd_of(k)[s * 3..s * 3 + 3]);
                        assert_eq!(out.gripper_map_of(k)[o], obs.gripper_map_of(k)[s]);
                    }
                }
            }
        }
    }
}
