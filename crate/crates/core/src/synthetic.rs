//! Procedural "person" scenes for desk-scale runs: smooth backgrounds with
//! striped upright figures that the fixture detector responds to.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::applier::BoundingBox;
use crate::error::Result;
use crate::raster::Image;
use crate::rng::stream_rng;

#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Image,
    /// Figure extents (head included), normalized.
    pub figures: Vec<BoundingBox>,
}

fn random_color<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> [f64; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

/// Deterministic scene `index` of the family identified by `seed`.
pub fn scene(seed: u64, index: u64, size: usize) -> Scene {
    let mut rng = stream_rng(seed, &[0x5CE7E, index]);
    let s = size as f64;
    let top = random_color(&mut rng, 0.3, 0.7);
    let bottom = random_color(&mut rng, 0.3, 0.7);
    let mut image = Image::from_fn(size, size, |y, _, c| {
        let t = y as f64 / (s - 1.0).max(1.0);
        top[c] * (1.0 - t) + bottom[c] * t
    });

    let count = if rng.gen_bool(0.3) { 2 } else { 1 };
    let mut figures = Vec::new();
    for _ in 0..count {
        let bw = rng.gen_range(0.22..0.32) * s;
        let bh = rng.gen_range(0.45..0.62) * s;
        let head_r = 0.3 * bw;
        let total_h = bh + 2.0 * head_r;
        let x0 = rng.gen_range(0.02 * s..(s - bw - 0.02 * s));
        let y0 = rng.gen_range(0.02 * s..(s - total_h - 0.02 * s));
        let body_y0 = y0 + 2.0 * head_r;
        let a = random_color(&mut rng, 0.0, 0.25);
        let b = random_color(&mut rng, 0.75, 1.0);
        let period = rng.gen_range(3..=5) as usize;
        let hx = x0 + bw / 2.0;
        let hy = y0 + head_r;
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let in_body = fx >= x0 && fx < x0 + bw && fy >= body_y0 && fy < body_y0 + bh;
                let in_head = (fx - hx).powi(2) + (fy - hy).powi(2) <= head_r * head_r;
                if in_body || in_head {
                    let stripe = (y / period).is_multiple_of(2);
                    let col = if stripe { a } else { b };
                    for (c, v) in col.iter().enumerate() {
                        image.set(y, x, c, *v);
                    }
                }
            }
        }
        figures.push(BoundingBox {
            cx: (x0 + bw / 2.0) / s,
            cy: (y0 + total_h / 2.0) / s,
            w: bw / s,
            h: total_h / s,
        });
    }
    Scene { image, figures }
}

/// Writes `count` scenes as `scene_0000.png`, ... and returns their paths.
pub fn write_scenes(dir: &Path, seed: u64, count: usize, size: usize) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    (0..count)
        .map(|i| {
            let path = dir.join(format!("scene_{i:04}.png"));
            scene(seed, i as u64, size).image.save_png(&path)?;
            Ok(path)
        })
        .collect()
}
