//! Procedural test images: smooth colour gradients, oriented gratings, and
//! hard-edged shapes, so both flat regions and edges get compressed.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image::Image;

struct Grating {
    fx: f32,
    fy: f32,
    phase: f32,
    amp: [f32; 3],
}

enum Shape {
    Rect { y0: f32, x0: f32, y1: f32, x1: f32, color: [f32; 3] },
    Disc { cy: f32, cx: f32, r: f32, color: [f32; 3] },
}

pub fn synthetic_image(seed: u64, height: usize, width: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f32; 3] = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
    let grad: [[f32; 2]; 3] = std::array::from_fn(|_| [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)]);
    let gratings: Vec<Grating> = (0..3)
        .map(|_| Grating {
            fx: rng.gen_range(-0.6..0.6),
            fy: rng.gen_range(-0.6..0.6),
            phase: rng.gen_range(0.0..std::f32::consts::TAU),
            amp: std::array::from_fn(|_| rng.gen_range(0.0..0.08)),
        })
        .collect();
    let (h, w) = (height as f32, width as f32);
    let shapes: Vec<Shape> = (0..6)
        .map(|_| {
            let color = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
            if rng.gen_bool(0.5) {
                let (y0, x0) = (rng.gen_range(0.0..h), rng.gen_range(0.0..w));
                Shape::Rect {
                    y0,
                    x0,
                    y1: y0 + rng.gen_range(4.0..h / 2.0 + 5.0),
                    x1: x0 + rng.gen_range(4.0..w / 2.0 + 5.0),
                    color,
                }
            } else {
                Shape::Disc {
                    cy: rng.gen_range(0.0..h),
                    cx: rng.gen_range(0.0..w),
                    r: rng.gen_range(3.0..(h.min(w) / 3.0 + 4.0)),
                    color,
                }
            }
        })
        .collect();
    let noise_seed: u64 = rng.gen();
    let mut noise = ChaCha8Rng::seed_from_u64(noise_seed);
    let grain: Vec<f32> = (0..height * width).map(|_| noise.gen_range(-0.02..0.02)).collect();

    Image::from_fn(3, height, width, |c, y, x| {
        let (yf, xf) = (y as f32 / h, x as f32 / w);
        let mut v = base[c] + grad[c][0] * yf + grad[c][1] * xf;
        for g in &gratings {
            v += g.amp[c] * (g.fx * x as f32 + g.fy * y as f32 + g.phase).sin();
        }
        for s in &shapes {
            match *s {
                Shape::Rect { y0, x0, y1, x1, color } => {
                    let (yy, xx) = (y as f32, x as f32);
                    if yy >= y0 && yy < y1 && xx >= x0 && xx < x1 {
                        v = 0.35 * v + 0.65 * color[c];
                    }
                }
                Shape::Disc { cy, cx, r, color } => {
                    let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                    if d2 < r * r {
                        v = 0.35 * v + 0.65 * color[c];
                    }
                }
            }
        }
        (v + grain[y * width + x]).clamp(0.0, 1.0)
    })
}

/// Writes `count` PNG fixtures named `img_000.png`, ... and returns their paths.
pub fn write_fixture_set(dir: &Path, count: usize, height: usize, width: usize, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    (0..count)
        .map(|i| {
            let path = dir.join(format!("img_{i:03}.png"));
            synthetic_image(seed.wrapping_add(i as u64), height, width).save_png(&path)?;
            Ok(path)
        })
        .collect()
}
