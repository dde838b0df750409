#![allow(dead_code)]

use std::path::Path;

use advpatch::data::{generate_pseudo_labels, load_dataset, Dataset, Split};
use advpatch::detector::fixture::fixture_detector;
use advpatch::detector::{DetectionGrid, DetectorAdapter, FIRST_CLASS, OBJECTNESS};
use advpatch::patch::{LossWeights, Patch};
use advpatch::raster::Image;
use advpatch::synthetic::write_scenes;
use advpatch::{Error, Result};

pub const SIZE: usize = 128;

/// Synthetic scenes in `dir/images`, pseudo-labeled by fixture seed 0 into `dir/labels`.
pub fn desk_dataset(dir: &Path, scene_seed: u64, count: usize, split: Split) -> Dataset {
    let images = dir.join("images");
    let labels = dir.join("labels");
    write_scenes(&images, scene_seed, count, SIZE).unwrap();
    generate_pseudo_labels(&fixture_detector(0), &images, &labels, SIZE, 0.5, 0.45).unwrap();
    load_dataset(&images, &labels, SIZE, split, 0).unwrap()
}

pub fn no_reg() -> LossWeights {
    LossWeights::new(0.0, 0.0).unwrap()
}

pub fn patch_from(h: usize, w: usize, f: impl Fn(usize) -> f64) -> Patch {
    Patch::clamped(h, w, (0..h * w * 3).map(f).collect()).unwrap()
}

/// One-cell detector whose objectness is `sigmoid(gain * mean(pixels) + bias)`.
pub struct ToyAdapter {
    pub size: usize,
    pub gain: f64,
    pub bias: f64,
    pub names: Vec<String>,
    /// Replace objectness with NaN.
    pub poison: bool,
}

impl ToyAdapter {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            gain: 4.0,
            bias: -2.0,
            names: vec!["person".into()],
            poison: false,
        }
    }

    fn z(&self, image: &Image) -> f64 {
        let d = image.data();
        self.gain * d.iter().sum::<f64>() / d.len() as f64 + self.bias
    }

    fn grid(&self, s: f64) -> DetectionGrid {
        let obj = if self.poison { f64::NAN } else { s };
        DetectionGrid::new(1, 1, 1, 1, 0, vec![0.5, 0.5, 0.5, 0.5, obj, 1.0]).unwrap()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl DetectorAdapter for ToyAdapter {
    fn stride(&self) -> usize {
        self.size
    }

    fn class_names(&self) -> &[String] {
        &self.names
    }

    fn person_class(&self) -> usize {
        0
    }

    fn forward(&self, image: &Image) -> Result<DetectionGrid> {
        self.check_input(image)?;
        Ok(self.grid(sigmoid(self.z(image))))
    }

    fn forward_backward(
        &self,
        image: &Image,
        grad_of: &mut dyn FnMut(&DetectionGrid) -> Vec<f64>,
    ) -> Result<(DetectionGrid, Image)> {
        self.check_input(image)?;
        let s = sigmoid(self.z(image));
        let grid = self.grid(s);
        let g = grad_of(&grid);
        if g.len() != FIRST_CLASS + 1 {
            return Err(Error::Shape("bad grid gradient".into()));
        }
        let per_pixel = g[OBJECTNESS] * s * (1.0 - s) * self.gain / image.data().len() as f64;
        let grad = Image::filled(image.height(), image.width(), per_pixel);
        Ok((grid, grad))
    }
}
