//! Single-shot detector adapters and the scores the attack minimizes.
//!
//! Every adapter produces a [`DetectionGrid`] of already-squashed values laid
//! out as `rows x cols x anchors x (5 + classes)`, where each anchor vector is
//! `[x_offset, y_offset, w, h, p_obj, p_cls_1, ..., p_cls_C]`. Offsets are in
//! cell units, `w`/`h` are fractions of the image size, and all probabilities
//! lie in `[0, 1]`.

pub mod darknet;
pub mod fixture;
pub mod net;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::applier::BoundingBox;
use crate::error::{Error, Result};
use crate::raster::{Image, CHANNELS};
use net::{sigmoid, Network, Tensor};

pub const X_OFFSET: usize = 0;
pub const Y_OFFSET: usize = 1;
pub const WIDTH: usize = 2;
pub const HEIGHT: usize = 3;
pub const OBJECTNESS: usize = 4;
pub const FIRST_CLASS: usize = 5;

pub const DEFAULT_STRIDE: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionGrid {
    rows: usize,
    cols: usize,
    anchors: usize,
    classes: usize,
    person_class: usize,
    values: Vec<f64>,
}

impl DetectionGrid {
    pub fn new(
        rows: usize,
        cols: usize,
        anchors: usize,
        classes: usize,
        person_class: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if person_class >= classes {
            return Err(Error::invalid(format!(
                "person class {person_class} out of range for {classes} classes"
            )));
        }
        if values.len() != rows * cols * anchors * (5 + classes) {
            return Err(Error::Shape(format!(
                "grid {rows}x{cols}x{anchors}x{} needs {} values, got {}",
                5 + classes,
                rows * cols * anchors * (5 + classes),
                values.len()
            )));
        }
        let grid = Self {
            rows,
            cols,
            anchors,
            classes,
            person_class,
            values,
        };
        for cell in grid.cells() {
            let v = grid.anchor_vector(cell);
            // NaN passes so that numerical blow-ups reach the trainer's checks.
            if v[OBJECTNESS..].iter().any(|p| !p.is_nan() && !(0.0..=1.0).contains(p)) {
                return Err(Error::invalid(format!("grid probabilities out of [0, 1] at {cell:?}")));
            }
        }
        Ok(grid)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn anchors(&self) -> usize {
        self.anchors
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn person_class(&self) -> usize {
        self.person_class
    }

    pub fn entries(&self) -> usize {
        5 + self.classes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Every (row, col, anchor) in layout order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.rows).flat_map(move |r| (0..self.cols).flat_map(move |c| (0..self.anchors).map(move |a| (r, c, a))))
    }

    #[inline]
    pub fn offset(&self, (row, col, anchor): (usize, usize, usize)) -> usize {
        ((row * self.cols + col) * self.anchors + anchor) * self.entries()
    }

    pub fn anchor_vector(&self, cell: (usize, usize, usize)) -> &[f64] {
        let o = self.offset(cell);
        &self.values[o..o + self.entries()]
    }

    pub fn objectness(&self, cell: (usize, usize, usize)) -> f64 {
        self.values[self.offset(cell) + OBJECTNESS]
    }

    pub fn class_prob(&self, cell: (usize, usize, usize), class: usize) -> f64 {
        self.values[self.offset(cell) + FIRST_CLASS + class]
    }

    pub fn person_prob(&self, cell: (usize, usize, usize)) -> f64 {
        self.class_prob(cell, self.person_class)
    }
}

/// Which detector output the attack minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScoreMode {
    /// Objectness only.
    Obj,
    /// Person class probability only.
    Cls,
    /// Product of objectness and person probability.
    ObjCls,
}

impl ScoreMode {
    pub fn name(self) -> &'static str {
        match self {
            ScoreMode::Obj => "OBJ",
            ScoreMode::Cls => "CLS",
            ScoreMode::ObjCls => "OBJ-CLS",
        }
    }
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "OBJ" => Ok(ScoreMode::Obj),
            "CLS" => Ok(ScoreMode::Cls),
            "OBJ_CLS" => Ok(ScoreMode::ObjCls),
            _ => Err(Error::invalid(format!("unknown score mode `{s}`"))),
        }
    }
}

fn cell_score(grid: &DetectionGrid, cell: (usize, usize, usize), mode: ScoreMode) -> f64 {
    match mode {
        ScoreMode::Obj => grid.objectness(cell),
        ScoreMode::Cls => grid.person_prob(cell),
        ScoreMode::ObjCls => grid.objectness(cell) * grid.person_prob(cell),
    }
}

/// Hard maximum of the mode's per-anchor score over the whole grid, together
/// with the winning cell (first in layout order on ties). A NaN score wins.
pub fn argmax_score(grid: &DetectionGrid, mode: ScoreMode) -> ((usize, usize, usize), f64) {
    let mut best = ((0, 0, 0), f64::NEG_INFINITY);
    for cell in grid.cells() {
        let s = cell_score(grid, cell, mode);
        if s.is_nan() {
            return (cell, s);
        }
        if s > best.1 {
            best = (cell, s);
        }
    }
    best
}

pub fn extraction_score(grid: &DetectionGrid, mode: ScoreMode) -> f64 {
    argmax_score(grid, mode).1
}

/// Score and its gradient with respect to `grid.values()`, scaled by `weight`.
/// Only the argmax anchor receives gradient.
pub fn extraction_score_grad(grid: &DetectionGrid, mode: ScoreMode, weight: f64) -> (f64, Vec<f64>) {
    let (cell, score) = argmax_score(grid, mode);
    let mut grad = vec![0.0; grid.values.len()];
    let o = grid.offset(cell);
    let obj_i = o + OBJECTNESS;
    let cls_i = o + FIRST_CLASS + grid.person_class;
    match mode {
        ScoreMode::Obj => grad[obj_i] = weight,
        ScoreMode::Cls => grad[cls_i] = weight,
        ScoreMode::ObjCls => {
            grad[obj_i] = weight * grid.values[cls_i];
            grad[cls_i] = weight * grid.values[obj_i];
        }
    }
    (score, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub objectness: f64,
    pub class_index: usize,
    pub class_prob: f64,
    /// `objectness * class_prob`
    pub confidence: f64,
}

/// Decodes every anchor to a box labelled with its most probable class, drops
/// those with confidence below `conf_threshold`, and applies per-class greedy
/// NMS. Output is sorted by descending confidence.
pub fn decode_detections(grid: &DetectionGrid, conf_threshold: f64, nms_iou: f64) -> Vec<Detection> {
    let mut candidates = Vec::new();
    for cell in grid.cells() {
        let v = grid.anchor_vector(cell);
        let (row, col, _) = cell;
        let (class_index, class_prob) =
            v[FIRST_CLASS..]
                .iter()
                .copied()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, p)| if p > best.1 { (i, p) } else { best },
                );
        let objectness = v[OBJECTNESS];
        let confidence = objectness * class_prob;
        if !(confidence >= conf_threshold) {
            continue;
        }
        candidates.push(Detection {
            bbox: BoundingBox {
                cx: (col as f64 + v[X_OFFSET]) / grid.cols as f64,
                cy: (row as f64 + v[Y_OFFSET]) / grid.rows as f64,
                w: v[WIDTH],
                h: v[HEIGHT],
            },
            objectness,
            class_index,
            class_prob,
            confidence,
        });
    }
    nms(candidates, nms_iou)
}

/// Greedy per-class non-maximum suppression; stable with respect to input
/// order for equal confidences.
pub fn nms(mut detections: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    detections.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut kept: Vec<Detection> = Vec::with_capacity(detections.len());
    for d in detections {
        let suppressed = kept
            .iter()
            .any(|k| k.class_index == d.class_index && k.bbox.iou(&d.bbox) >= iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// A frozen single-shot detector that can also backpropagate to its input.
pub trait DetectorAdapter: Send + Sync {
    /// Ratio between input side length and output grid side length.
    fn stride(&self) -> usize;

    fn class_names(&self) -> &[String];

    fn person_class(&self) -> usize;

    fn forward(&self, image: &Image) -> Result<DetectionGrid>;

    /// Runs the detector, asks `grad_of` for the gradient of a scalar with
    /// respect to the grid values, and returns the grid together with the
    /// gradient of that scalar with respect to the input image.
    fn forward_backward(
        &self,
        image: &Image,
        grad_of: &mut dyn FnMut(&DetectionGrid) -> Vec<f64>,
    ) -> Result<(DetectionGrid, Image)>;

    fn check_input(&self, image: &Image) -> Result<()> {
        let s = self.stride();
        if image.height() == 0
            || image.width() == 0
            || !image.height().is_multiple_of(s)
            || !image.width().is_multiple_of(s)
        {
            return Err(Error::Shape(format!(
                "image {}x{} is not a positive multiple of stride {s}",
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }
}

/// A convolutional backbone followed by a region head: sigmoid offsets and
/// objectness, exponential width/height scaled by per-anchor priors, and a
/// softmax over classes.
#[derive(Debug, Clone)]
pub struct ConvDetector {
    network: Network,
    /// Anchor priors (width, height) in grid-cell units.
    anchors: Vec<(f64, f64)>,
    class_names: Vec<String>,
    person_class: usize,
    stride: usize,
}

impl ConvDetector {
    pub fn new(
        network: Network,
        anchors: Vec<(f64, f64)>,
        class_names: Vec<String>,
        person_class: usize,
    ) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::invalid("detector needs at least one anchor"));
        }
        if person_class >= class_names.len() {
            return Err(Error::invalid("person class index out of range"));
        }
        if network.input_channels != CHANNELS {
            return Err(Error::invalid("detector network must take RGB input"));
        }
        let probe = 4 * DEFAULT_STRIDE;
        let (c, h, w) = network.output_shape(CHANNELS, probe, probe)?;
        if h == 0 || !probe.is_multiple_of(h) || h != w {
            return Err(Error::invalid(format!(
                "network output {h}x{w} does not evenly divide a {probe}x{probe} input"
            )));
        }
        let expected = anchors.len() * (5 + class_names.len());
        if c != expected {
            return Err(Error::invalid(format!(
                "network emits {c} channels, region head expects {expected}"
            )));
        }
        Ok(Self {
            network,
            anchors,
            class_names,
            person_class,
            stride: probe / h,
        })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn anchors(&self) -> &[(f64, f64)] {
        &self.anchors
    }

    fn to_tensor(image: &Image) -> Tensor {
        let (h, w) = (image.height(), image.width());
        let mut t = Tensor::zeros(CHANNELS, h, w);
        for y in 0..h {
            for x in 0..w {
                for c in 0..CHANNELS {
                    t.data[(c * h + y) * w + x] = image.get(y, x, c);
                }
            }
        }
        t
    }

    fn from_tensor(t: &Tensor) -> Image {
        Image::from_fn(t.h, t.w, |y, x, c| t.at(c, y, x))
    }

    fn region(&self, raw: &Tensor) -> Result<DetectionGrid> {
        let classes = self.class_names.len();
        let entries = 5 + classes;
        let (rows, cols) = (raw.h, raw.w);
        let mut values = vec![0.0; rows * cols * self.anchors.len() * entries];
        for row in 0..rows {
            for col in 0..cols {
                for (a, &(aw, ah)) in self.anchors.iter().enumerate() {
                    let at = |k: usize| raw.at(a * entries + k, row, col);
                    let o = ((row * cols + col) * self.anchors.len() + a) * entries;
                    values[o + X_OFFSET] = sigmoid(at(X_OFFSET));
                    values[o + Y_OFFSET] = sigmoid(at(Y_OFFSET));
                    values[o + WIDTH] = at(WIDTH).exp() * aw / cols as f64;
                    values[o + HEIGHT] = at(HEIGHT).exp() * ah / rows as f64;
                    values[o + OBJECTNESS] = sigmoid(at(OBJECTNESS));
                    let max = (0..classes)
                        .map(|k| at(FIRST_CLASS + k))
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut denom = 0.0;
                    for k in 0..classes {
                        let e = (at(FIRST_CLASS + k) - max).exp();
                        values[o + FIRST_CLASS + k] = e;
                        denom += e;
                    }
                    for k in 0..classes {
                        values[o + FIRST_CLASS + k] /= denom;
                    }
                }
            }
        }
        DetectionGrid::new(rows, cols, self.anchors.len(), classes, self.person_class, values)
    }

    fn region_backward(&self, grid: &DetectionGrid, grad: &[f64]) -> Tensor {
        let classes = self.class_names.len();
        let entries = 5 + classes;
        let (rows, cols) = (grid.rows, grid.cols);
        let mut g = Tensor::zeros(self.anchors.len() * entries, rows, cols);
        for cell in grid.cells() {
            let (row, col, a) = cell;
            let o = grid.offset(cell);
            let v = &grid.values[o..o + entries];
            let gv = &grad[o..o + entries];
            let mut put = |k: usize, val: f64| {
                g.data[((a * entries + k) * rows + row) * cols + col] = val;
            };
            put(X_OFFSET, gv[X_OFFSET] * v[X_OFFSET] * (1.0 - v[X_OFFSET]));
            put(Y_OFFSET, gv[Y_OFFSET] * v[Y_OFFSET] * (1.0 - v[Y_OFFSET]));
            put(WIDTH, gv[WIDTH] * v[WIDTH]);
            put(HEIGHT, gv[HEIGHT] * v[HEIGHT]);
            put(OBJECTNESS, gv[OBJECTNESS] * v[OBJECTNESS] * (1.0 - v[OBJECTNESS]));
            let dot: f64 = (0..classes).map(|k| gv[FIRST_CLASS + k] * v[FIRST_CLASS + k]).sum();
            for k in 0..classes {
                put(FIRST_CLASS + k, v[FIRST_CLASS + k] * (gv[FIRST_CLASS + k] - dot));
            }
        }
        g
    }
}

impl DetectorAdapter for ConvDetector {
    fn stride(&self) -> usize {
        self.stride
    }

    fn class_names(&self) -> &[String] {
        &self.class_names
    }

    fn person_class(&self) -> usize {
        self.person_class
    }

    fn forward(&self, image: &Image) -> Result<DetectionGrid> {
        self.check_input(image)?;
        let raw = self.network.forward(&Self::to_tensor(image))?;
        self.region(&raw)
    }

    fn forward_backward(
        &self,
        image: &Image,
        grad_of: &mut dyn FnMut(&DetectionGrid) -> Vec<f64>,
    ) -> Result<(DetectionGrid, Image)> {
        self.check_input(image)?;
        let input = Self::to_tensor(image);
        let trace = self.network.forward_traced(&input)?;
        let grid = self.region(trace.output())?;
        let grad = grad_of(&grid);
        if grad.len() != grid.values.len() {
            return Err(Error::Shape("grid gradient has the wrong length".into()));
        }
        let g_raw = self.region_backward(&grid, &grad);
        let g_in = self.network.backward(&input, &trace, g_raw)?;
        Ok((grid, Self::from_tensor(&g_in)))
    }
}

/// Looks up the index of "person" (case-insensitive) in a class-name list.
pub fn person_index(names: &[String]) -> Result<usize> {
    names
        .iter()
        .position(|n| n.trim().eq_ignore_ascii_case("person"))
        .ok_or_else(|| Error::invalid("class list has no `person` entry"))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Grid with one row, `n` anchors in a single cell, 2 classes (person = 0).
    fn grid_from(anchors: &[(f64, f64)]) -> DetectionGrid {
        let mut values = Vec::new();
        for &(obj, person) in anchors {
            values.extend_from_slice(&[0.5, 0.5, 0.2, 0.2, obj, person, 1.0 - person]);
        }
        DetectionGrid::new(1, 1, anchors.len(), 2, 0, values).unwrap()
    }

    #[test]
    fn score_modes() {
        let zeros = grid_from(&[(0.0, 0.3), (0.0, 0.9)]);
        assert_eq!(extraction_score(&zeros, ScoreMode::Obj), 0.0);
        assert_eq!(extraction_score(&zeros, ScoreMode::ObjCls), 0.0);

        let g = grid_from(&[(0.3, 0.5), (0.7, 0.5)]);
        assert_eq!(extraction_score(&g, ScoreMode::Obj), 0.7);

        let g = grid_from(&[(0.8, 0.5), (0.6, 0.9)]);
        let brute = [0.8 * 0.5, 0.6 * 0.9].into_iter().fold(f64::MIN, f64::max);
        assert_eq!(extraction_score(&g, ScoreMode::ObjCls), brute);
        assert!((brute - 0.54).abs() < 1e-12);
        assert_eq!(extraction_score(&g, ScoreMode::Cls), 0.9);
    }

    #[test]
    fn score_gradient_hits_argmax_only() {
        let g = grid_from(&[(0.8, 0.5), (0.6, 0.9)]);
        let (_, grad) = extraction_score_grad(&g, ScoreMode::ObjCls, 1.0);
        let nz: Vec<(usize, f64)> = grad.iter().copied().enumerate().filter(|(_, v)| *v != 0.0).collect();
        assert_eq!(nz, vec![(7 + 4, 0.9), (7 + 5, 0.6)]);
    }

    #[test]
    fn score_mode_parsing() {
        assert_eq!("obj-cls".parse::<ScoreMode>().unwrap(), ScoreMode::ObjCls);
        assert_eq!("OBJ_CLS".parse::<ScoreMode>().unwrap(), ScoreMode::ObjCls);
        assert_eq!("CLS".parse::<ScoreMode>().unwrap(), ScoreMode::Cls);
        assert!("person".parse::<ScoreMode>().is_err());
    }

    #[test]
    fn grid_rejects_out_of_range_probability() {
        assert!(DetectionGrid::new(1, 1, 1, 1, 0, vec![0.5, 0.5, 0.1, 0.1, 1.5, 1.0]).is_err());
        assert!(DetectionGrid::new(1, 1, 1, 1, 1, vec![0.5, 0.5, 0.1, 0.1, 0.5, 1.0]).is_err());
    }

    fn det(cx: f64, conf: f64) -> Detection {
        Detection {
            bbox: BoundingBox {
                cx,
                cy: 0.5,
                w: 0.1,
                h: 0.1,
            },
            objectness: conf,
            class_index: 0,
            class_prob: 1.0,
            confidence: conf,
        }
    }

    #[test]
    fn nms_examples() {
        let kept = nms(vec![det(0.5, 0.8), det(0.5, 0.9)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].confidence, 0.9);

        let kept = nms(vec![det(0.5, 0.7), det(0.1, 0.9), det(0.9, 0.5)], 0.5);
        let confs: Vec<f64> = kept.iter().map(|d| d.confidence).collect();
        assert_eq!(confs, vec![0.9, 0.7, 0.5]);
    }

    #[test]
    fn decode_threshold_and_geometry() {
        let g = grid_from(&[(0.0, 1.0)]);
        assert!(decode_detections(&g, 0.1, 0.5).is_empty());

        let values = vec![
            // cell (0,0)
            0.5, 0.5, 0.25, 0.5, 0.9, 0.8, 0.2, // cell (0,1)
            0.25, 0.75, 0.1, 0.1, 0.6, 0.1, 0.9,
        ];
        let g = DetectionGrid::new(1, 2, 1, 2, 0, values).unwrap();
        let dets = decode_detections(&g, 0.0, 0.5);
        assert_eq!(dets.len(), 2);
        assert_eq!(dets[0].class_index, 0);
        assert!((dets[0].confidence - 0.72).abs() < 1e-12);
        assert_eq!(
            dets[0].bbox,
            BoundingBox {
                cx: 0.25,
                cy: 0.5,
                w: 0.25,
                h: 0.5
            }
        );
        assert_eq!(dets[1].class_index, 1);
        assert_eq!(dets[1].bbox.cx, (1.0 + 0.25) / 2.0);
        assert_eq!(dets[1].bbox.cy, 0.75);
    }

    #[test]
    fn person_lookup() {
        let names: Vec<String> = ["car", "Person", "dog"].iter().map(|s| s.to_string()).collect();
        assert_eq!(person_index(&names).unwrap(), 1);
        assert!(person_index(&names[..1]).is_err());
    }
}
