//! Image corpora and detector-generated ("pseudo") labels.
//!
//! Labels are plain text, one box per line: `class cx cy w h conf`, with
//! coordinates normalized to the original image. Numbers are written in
//! shortest round-trip form so parsing reproduces them exactly.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::applier::BoundingBox;
use crate::detector::{decode_detections, DetectorAdapter};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::raster::Image;
use crate::rng::stream_rng;

/// Gray level used for letterbox padding.
pub const PAD_VALUE: f64 = 0.5;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LabelBox {
    pub class_index: usize,
    pub bbox: BoundingBox,
    pub confidence: f64,
}

pub fn format_labels(boxes: &[LabelBox]) -> String {
    let mut out = String::new();
    for b in boxes {
        out.push_str(&format!(
            "{} {} {} {} {} {}\n",
            b.class_index, b.bbox.cx, b.bbox.cy, b.bbox.w, b.bbox.h, b.confidence
        ));
    }
    out
}

pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<LabelBox>> {
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", fields.len())));
        }
        let class_index = fields[0]
            .parse::<usize>()
            .map_err(|e| err(format!("class `{}`: {e}", fields[0])))?;
        let mut v = [0.0; 5];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse::<f64>().map_err(|e| err(format!("`{f}`: {e}")))?;
        }
        let bbox = BoundingBox::new(v[0], v[1], v[2], v[3]).map_err(|e| err(e.to_string()))?;
        if !(0.0..=1.0).contains(&v[4]) {
            return Err(err(format!("confidence {} outside [0, 1]", v[4])));
        }
        boxes.push(LabelBox {
            class_index,
            bbox,
            confidence: v[4],
        });
    }
    Ok(boxes)
}

pub fn write_labels(path: &Path, boxes: &[LabelBox]) -> Result<()> {
    write_atomic(path, format_labels(boxes).as_bytes())
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelBox>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text, path)
}

/// Label file for an image: same basename with a `.txt` extension.
pub fn label_path(label_dir: &Path, image_path: &Path) -> PathBuf {
    let stem = image_path.file_stem().unwrap_or_default();
    let mut name = stem.to_os_string();
    name.push(".txt");
    label_dir.join(name)
}

/// Images in `dir` (non-recursive) with a PNG/JPEG extension, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false);
        if is_image && path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

/// Aspect-preserving resize into a `size x size` square with centered padding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Letterbox {
    pub size: usize,
    pub orig_width: usize,
    pub orig_height: usize,
    pub new_width: usize,
    pub new_height: usize,
    pub pad_x: usize,
    pub pad_y: usize,
}

impl Letterbox {
    pub fn new(orig_width: usize, orig_height: usize, size: usize) -> Self {
        let scale = (size as f64 / orig_width as f64).min(size as f64 / orig_height as f64);
        let new_width = ((orig_width as f64 * scale).round() as usize).clamp(1, size);
        let new_height = ((orig_height as f64 * scale).round() as usize).clamp(1, size);
        Self {
            size,
            orig_width,
            orig_height,
            new_width,
            new_height,
            pad_x: (size - new_width) / 2,
            pad_y: (size - new_height) / 2,
        }
    }

    pub fn apply(&self, image: &Image) -> Image {
        let content = image.resized(self.new_height, self.new_width);
        if self.new_width == self.size && self.new_height == self.size {
            return content;
        }
        let mut out = Image::filled(self.size, self.size, PAD_VALUE);
        for y in 0..self.new_height {
            for x in 0..self.new_width {
                for c in 0..3 {
                    out.set(y + self.pad_y, x + self.pad_x, c, content.get(y, x, c));
                }
            }
        }
        out
    }

    pub fn to_letterboxed(&self, b: &BoundingBox) -> BoundingBox {
        let s = self.size as f64;
        let (nw, nh) = (self.new_width as f64, self.new_height as f64);
        BoundingBox {
            cx: (b.cx * nw + self.pad_x as f64) / s,
            cy: (b.cy * nh + self.pad_y as f64) / s,
            w: b.w * nw / s,
            h: b.h * nh / s,
        }
    }

    pub fn to_original(&self, b: &BoundingBox) -> BoundingBox {
        let s = self.size as f64;
        let (nw, nh) = (self.new_width as f64, self.new_height as f64);
        BoundingBox {
            cx: (b.cx * s - self.pad_x as f64) / nw,
            cy: (b.cy * s - self.pad_y as f64) / nh,
            w: b.w * s / nw,
            h: b.h * s / nh,
        }
    }
}

/// Outcome of a pseudo-labeling pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LabelSummary {
    pub images: usize,
    pub boxes: usize,
    #[serde(serialize_with = "count_only")]
    pub warnings: Vec<String>,
}

fn count_only<S: serde::Serializer>(w: &[String], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_u64(w.len() as u64)
}

impl LabelSummary {
    /// One-line record `{"images":N,"boxes":M,"warnings":K}`.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("summary serializes")
    }
}

/// Detections of the person class for one (original-resolution) image, in
/// original normalized coordinates.
pub fn detect_persons(
    adapter: &dyn DetectorAdapter,
    image: &Image,
    input_size: usize,
    conf_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<LabelBox>> {
    let lb = Letterbox::new(image.width(), image.height(), input_size);
    let grid = adapter.forward(&lb.apply(image))?;
    let person = adapter.person_class();
    Ok(decode_detections(&grid, conf_threshold, nms_iou)
        .into_iter()
        .filter(|d| d.class_index == person)
        .map(|d| LabelBox {
            class_index: person,
            bbox: lb.to_original(&d.bbox),
            confidence: d.confidence,
        })
        .collect())
}

/// Runs the detector over every image in `image_dir` and writes one label
/// file per readable image into `out_dir`.
pub fn generate_pseudo_labels(
    adapter: &dyn DetectorAdapter,
    image_dir: &Path,
    out_dir: &Path,
    input_size: usize,
    conf_threshold: f64,
    nms_iou: f64,
) -> Result<LabelSummary> {
    if input_size == 0 || !input_size.is_multiple_of(adapter.stride()) {
        return Err(Error::invalid(format!(
            "input size {input_size} is not a multiple of detector stride {}",
            adapter.stride()
        )));
    }
    let images = list_images(image_dir)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let results: Vec<Result<Option<usize>>> = images
        .par_iter()
        .map(|path| {
            let image = match Image::load(path) {
                Ok(img) => img,
                Err(e) => {
                    warn!("skipping {}: {e}", path.display());
                    return Ok(None);
                }
            };
            let boxes = detect_persons(adapter, &image, input_size, conf_threshold, nms_iou)?;
            write_labels(&label_path(out_dir, path), &boxes)?;
            Ok(Some(boxes.len()))
        })
        .collect();
    let mut summary = LabelSummary::default();
    for (path, r) in images.iter().zip(results) {
        match r? {
            Some(n) => {
                summary.images += 1;
                summary.boxes += n;
            }
            None => summary.warnings.push(format!("unreadable image {}", path.display())),
        }
    }
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub path: PathBuf,
    /// Letterboxed to the detector input size.
    pub image: Image,
    /// Boxes in letterboxed normalized coordinates, highest confidence first.
    pub boxes: Vec<LabelBox>,
    pub letterbox: Letterbox,
}

impl LabeledImage {
    pub fn bboxes(&self) -> Vec<BoundingBox> {
        self.boxes.iter().map(|b| b.bbox).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub split: Split,
    pub items: Vec<LabeledImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Consecutive batches covering every image once; the last may be partial.
    pub fn batches(&self, batch_size: usize) -> Result<std::slice::Chunks<'_, LabeledImage>> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        Ok(self.items.chunks(batch_size))
    }

    pub fn num_batches(&self, batch_size: usize) -> usize {
        self.items.len().div_ceil(batch_size.max(1))
    }
}

/// Loads and letterboxes every image with its label file. Training order is a
/// seeded shuffle; test order is lexicographic by path.
pub fn load_dataset(
    image_dir: &Path,
    label_dir: &Path,
    square_size: usize,
    split: Split,
    seed: u64,
) -> Result<Dataset> {
    let paths = list_images(image_dir)?;
    let mut items = Vec::with_capacity(paths.len());
    for path in paths {
        let lpath = label_path(label_dir, &path);
        if !lpath.is_file() {
            return Err(Error::MissingFile(lpath));
        }
        let mut labels = read_labels(&lpath)?;
        let raw = Image::load(&path)?;
        let letterbox = Letterbox::new(raw.width(), raw.height(), square_size);
        for l in &mut labels {
            l.bbox = letterbox.to_letterboxed(&l.bbox);
        }
        labels.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        items.push(LabeledImage {
            path,
            image: letterbox.apply(&raw),
            boxes: labels,
            letterbox,
        });
    }
    if split == Split::Train {
        items.shuffle(&mut stream_rng(seed, &[0xDA7A]));
    }
    Ok(Dataset { split, items })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn letterbox_wide_image() {
        let lb = Letterbox::new(200, 100, 416);
        assert_eq!((lb.new_width, lb.new_height), (416, 208));
        assert_eq!((lb.pad_x, lb.pad_y), (0, 104));
        let img = Image::filled(100, 200, 0.9);
        let out = lb.apply(&img);
        assert_eq!((out.height(), out.width()), (416, 416));
        assert_eq!(out.get(0, 10, 0), PAD_VALUE);
        assert_eq!(out.get(103, 10, 0), PAD_VALUE);
        assert!((out.get(104, 10, 0) - 0.9).abs() < 1e-6);
        assert!((out.get(311, 10, 0) - 0.9).abs() < 1e-6);
        assert_eq!(out.get(312, 10, 0), PAD_VALUE);
    }

    #[test]
    fn letterbox_square_is_pure_resize() {
        let lb = Letterbox::new(64, 64, 128);
        assert_eq!((lb.pad_x, lb.pad_y), (0, 0));
        let b = BoundingBox::new(0.3, 0.6, 0.2, 0.4).unwrap();
        assert_eq!(lb.to_letterboxed(&b), b);
    }

    #[test]
    fn letterbox_box_round_trip() {
        let lb = Letterbox::new(200, 100, 416);
        let b = BoundingBox::new(0.37, 0.61, 0.12, 0.5).unwrap();
        let back = lb.to_original(&lb.to_letterboxed(&b));
        for (x, y) in [(b.cx, back.cx), (b.cy, back.cy), (b.w, back.w), (b.h, back.h)] {
            assert!((x - y).abs() < 1e-6);
        }
        let l = lb.to_letterboxed(&b);
        assert!((l.cy - (0.61 * 208.0 + 104.0) / 416.0).abs() < 1e-12);
    }

    #[test]
    fn label_text_round_trip_is_exact() {
        let boxes = vec![LabelBox {
            class_index: 0,
            bbox: BoundingBox::new(0.123456789012, 0.5, 0.25, 0.333333333333333).unwrap(),
            confidence: 0.987654321,
        }];
        let text = format_labels(&boxes);
        assert_eq!(parse_labels(&text, Path::new("x")).unwrap(), boxes);
        assert!(parse_labels("0 0.5 0.5 0.1\n", Path::new("x")).is_err());
        assert!(parse_labels("0 0.5 0.5 0.1 0.1 1.5\n", Path::new("x")).is_err());
        assert!(parse_labels("", Path::new("x")).unwrap().is_empty());
    }

    #[test]
    fn label_path_uses_basename() {
        assert_eq!(
            label_path(Path::new("/l"), Path::new("/imgs/a.b.png")),
            PathBuf::from("/l/a.b.txt")
        );
    }

    #[test]
    fn summary_json_line() {
        let s = LabelSummary {
            images: 3,
            boxes: 5,
            warnings: vec!["x".into()],
        };
        assert_eq!(s.to_json_line(), r#"{"images":3,"boxes":5,"warnings":1}"#);
    }
}
