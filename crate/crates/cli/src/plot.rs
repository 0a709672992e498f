//! Minimal PNG charts. No text is drawn; the CLI prints the numbers as tables
//! next to the images.

use std::path::Path;

use deskbot_core::Error;
use image::{Rgb, RgbImage};

const W: u32 = 640;
const H: u32 = 400;
const MARGIN: u32 = 40;
const COLORS: [[u8; 3]; 6] =
    [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189], [140, 86, 75]];

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    for x in MARGIN..W - MARGIN / 2 {
        img.put_pixel(x, H - MARGIN, axis);
    }
    for y in MARGIN / 2..=H - MARGIN {
        img.put_pixel(MARGIN, y, axis);
    }
    img
}

fn save(img: &RgbImage, path: &Path) -> Result<(), Error> {
    img.save(path).map_err(|e| Error::from(std::io::Error::other(e.to_string())).in_file(path))
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
    let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        if x >= 0.0 && y >= 0.0 && (x as u32) < W && (y as u32) < H {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

/// Series drawn on a shared log10 y axis; non-positive values are skipped.
pub fn line_chart(series: &[(&str, Vec<(f64, f64)>)], path: &Path) -> Result<(), Error> {
    let mut img = canvas();
    let pts = series.iter().flat_map(|(_, s)| s.iter()).filter(|p| p.1 > 0.0 && p.1.is_finite());
    let (mut x_min, mut x_max, mut y_min, mut y_max) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x_min = x_min.min(x);
        x_max = x_max.max(x);
        y_min = y_min.min(y.log10());
        y_max = y_max.max(y.log10());
    }
    if x_min > x_max {
        return save(&img, path);
    }
    let (y_min, y_max) = (y_min.floor(), y_max.ceil().max(y_min.floor() + 1.0));
    let x_span = (x_max - x_min).max(1.0);
    let plot_w = (W - MARGIN - MARGIN / 2) as f64;
    let plot_h = (H - MARGIN - MARGIN / 2) as f64;
    let to_px = |x: f64, y: f64| {
        (
            MARGIN as f64 + (x - x_min) / x_span * plot_w,
            (H - MARGIN) as f64 - (y.log10() - y_min) / (y_max - y_min) * plot_h,
        )
    };
    let grid = Rgb([225, 225, 225]);
    for decade in (y_min as i32 + 1)..=(y_max as i32) {
        let y = (H - MARGIN) as f64 - (decade as f64 - y_min) / (y_max - y_min) * plot_h;
        line(&mut img, (MARGIN as f64 + 1.0, y), ((W - MARGIN / 2) as f64, y), grid);
    }
    for (i, (_, s)) in series.iter().enumerate() {
        let c = Rgb(COLORS[i % COLORS.len()]);
        let valid: Vec<_> = s.iter().filter(|p| p.1 > 0.0 && p.1.is_finite()).collect();
        for w in valid.windows(2) {
            line(&mut img, to_px(w[0].0, w[0].1), to_px(w[1].0, w[1].1), c);
        }
    }
    save(&img, path)
}

/// Bars for values in [0, 1], with light lines at every 10%.
pub fn bar_chart(bars: &[(String, f64)], path: &Path) -> Result<(), Error> {
    let mut img = canvas();
    let plot_w = W - MARGIN - MARGIN / 2;
    let plot_h = (H - MARGIN - MARGIN / 2) as f64;
    for k in 1..=10 {
        let y = (H - MARGIN) as f64 - k as f64 / 10.0 * plot_h;
        line(&mut img, (MARGIN as f64 + 1.0, y), ((W - MARGIN / 2) as f64, y), Rgb([225, 225, 225]));
    }
    let slot = plot_w / bars.len().max(1) as u32;
    for (i, (_, v)) in bars.iter().enumerate() {
        let c = Rgb(COLORS[i % COLORS.len()]);
        let top = ((H - MARGIN) as f64 - v.clamp(0.0, 1.0) * plot_h).round() as u32;
        let x0 = MARGIN + 1 + i as u32 * slot + slot / 6;
        let x1 = MARGIN + (i as u32 + 1) * slot - slot / 6;
        for x in x0..x1.max(x0 + 1) {
            for y in top..H - MARGIN {
                img.put_pixel(x, y, c);
            }
        }
    }
    save(&img, path)
}
