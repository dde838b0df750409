//! Detection quality under patch conditions: PR curves, AP, the
//! precision = recall working point and recall tables.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::applier::{apply_patch, sample_transform, BoundingBox, TransformConfig};
use crate::data::Dataset;
use crate::detector::{decode_detections, Detection, DetectorAdapter};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::patch::{init_patch, InitMode, Patch};
use crate::rng::derive_seed;

pub const DEFAULT_IOU_MATCH: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum ConditionKind {
    Clean,
    Noise,
    ObjCls,
    Obj,
    Cls,
}

impl ConditionKind {
    /// Summary table order.
    pub const ALL: [ConditionKind; 5] = [Self::Clean, Self::Noise, Self::ObjCls, Self::Obj, Self::Cls];

    pub fn name(self) -> &'static str {
        match self {
            Self::Clean => "CLEAN",
            Self::Noise => "NOISE",
            Self::ObjCls => "OBJ-CLS",
            Self::Obj => "OBJ",
            Self::Cls => "CLS",
        }
    }

    /// Conditions that need a trained patch.
    pub fn is_trained(self) -> bool {
        matches!(self, Self::ObjCls | Self::Obj | Self::Cls)
    }
}

impl fmt::Display for ConditionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConditionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().replace('_', "-").as_str() {
            "CLEAN" => Ok(Self::Clean),
            "NOISE" => Ok(Self::Noise),
            "OBJ-CLS" => Ok(Self::ObjCls),
            "OBJ" => Ok(Self::Obj),
            "CLS" => Ok(Self::Cls),
            _ => Err(Error::invalid(format!(
                "unknown condition `{s}` (expected CLEAN, NOISE, OBJ, CLS or OBJ-CLS)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalCondition {
    kind: ConditionKind,
    patch: Option<Patch>,
}

impl EvalCondition {
    pub fn clean() -> Self {
        Self {
            kind: ConditionKind::Clean,
            patch: None,
        }
    }

    /// Seeded uniform-random patch of the given side length.
    pub fn noise(size: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            kind: ConditionKind::Noise,
            patch: Some(init_patch(size, size, InitMode::Random, derive_seed(seed, &[0x0015E]))?),
        })
    }

    pub fn trained(kind: ConditionKind, patch: Option<Patch>) -> Result<Self> {
        if !kind.is_trained() {
            return Err(Error::invalid(format!("{kind} is not a trained condition")));
        }
        let patch = patch.ok_or_else(|| Error::invalid(format!("condition {kind} requires a patch")))?;
        Ok(Self {
            kind,
            patch: Some(patch),
        })
    }

    pub fn kind(&self) -> ConditionKind {
        self.kind
    }

    pub fn patch(&self) -> Option<&Patch> {
        self.patch.as_ref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub seed: u64,
    /// Independent transform draws per image; results are pooled.
    pub passes: usize,
    pub nms_iou: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            passes: 1,
            nms_iou: 0.45,
        }
    }
}

/// Detections (threshold 0, person class only) for one image in one pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDetections {
    pub path: PathBuf,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<BoundingBox>,
}

pub fn evaluate_condition(
    adapter: &dyn DetectorAdapter,
    dataset: &Dataset,
    condition: &EvalCondition,
    transform: &TransformConfig,
    options: &EvalOptions,
) -> Result<Vec<ImageDetections>> {
    if options.passes == 0 {
        return Err(Error::invalid("eval passes must be >= 1"));
    }
    transform.validate()?;
    let person = adapter.person_class();
    let jobs: Vec<(usize, usize)> = (0..options.passes)
        .flat_map(|p| (0..dataset.len()).map(move |i| (p, i)))
        .collect();
    let results: Vec<Result<ImageDetections>> = jobs
        .par_iter()
        .map(|&(pass, i)| {
            let item = &dataset.items[i];
            let gt = item.bboxes();
            let grid = match &condition.patch {
                None => adapter.forward(&item.image)?,
                Some(patch) => {
                    let params: Vec<_> = (0..gt.len())
                        .map(|b| {
                            let s = derive_seed(options.seed, &[pass as u64, i as u64, b as u64]);
                            sample_transform(transform, &mut ChaCha8Rng::seed_from_u64(s))
                        })
                        .collect();
                    adapter.forward(&apply_patch(&item.image, patch, &gt, &params, transform)?)?
                }
            };
            let detections = decode_detections(&grid, 0.0, options.nms_iou)
                .into_iter()
                .filter(|d| d.class_index == person)
                .collect();
            Ok(ImageDetections {
                path: item.path.clone(),
                detections,
                ground_truth: gt,
            })
        })
        .collect();
    results.into_iter().collect()
}

/// Greedy matching in descending confidence: each detection claims the
/// unmatched ground-truth box it overlaps most, if that overlap reaches
/// `iou_threshold`. Returns `(confidence, is_true_positive)` per detection.
pub fn match_detections(
    detections: &[Detection],
    ground_truth: &[BoundingBox],
    iou_threshold: f64,
) -> Vec<(f64, bool)> {
    let mut order: Vec<&Detection> = detections.iter().collect();
    order.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut taken = vec![false; ground_truth.len()];
    order
        .into_iter()
        .map(|d| {
            let best = ground_truth
                .iter()
                .enumerate()
                .filter(|(j, _)| !taken[*j])
                .map(|(j, g)| (j, d.bbox.iou(g)))
                .fold(None, |best: Option<(usize, f64)>, (j, iou)| match best {
                    Some((_, b)) if b >= iou => best,
                    _ => Some((j, iou)),
                });
            match best {
                Some((j, iou)) if iou >= iou_threshold => {
                    taken[j] = true;
                    (d.confidence, true)
                }
                _ => (d.confidence, false),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Points ordered by descending threshold (so recall is non-decreasing along
/// the list).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub ap: f64,
}

/// PR points from pooled `(confidence, is_tp)` pairs and the ground-truth count.
pub fn curve_from_matches(mut matches: Vec<(f64, bool)>, num_gt: usize) -> Result<PrCurve> {
    if num_gt == 0 {
        return Err(Error::invalid("PR curve needs at least one ground-truth box"));
    }
    matches.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &(conf, hit)) in matches.iter().enumerate() {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_tie = matches.get(i + 1).is_none_or(|next| next.0 != conf);
        if last_of_tie {
            points.push(PrPoint {
                threshold: conf,
                precision: tp as f64 / (tp + fp) as f64,
                recall: tp as f64 / num_gt as f64,
            });
        }
    }
    let ap = average_precision(&points);
    Ok(PrCurve { points, ap })
}

/// All-point interpolated AP: recall increments weighted by the best
/// precision reached at that recall or beyond.
fn average_precision(points: &[PrPoint]) -> f64 {
    let mut envelope: Vec<f64> = points.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in points.iter().zip(&envelope) {
        ap += (p.recall - prev_recall) * env;
        prev_recall = p.recall;
    }
    ap
}

pub fn pr_curve(images: &[ImageDetections], iou_threshold: f64) -> Result<PrCurve> {
    let num_gt = images.iter().map(|i| i.ground_truth.len()).sum();
    let matches = images
        .iter()
        .flat_map(|i| match_detections(&i.detections, &i.ground_truth, iou_threshold))
        .collect();
    curve_from_matches(matches, num_gt)
}

/// Threshold of the curve point closest to the precision = recall diagonal;
/// ties go to the higher recall. `None` for a curve without points.
pub fn working_point(curve: &PrCurve) -> Option<f64> {
    curve
        .points
        .iter()
        .min_by(|a, b| {
            let da = (a.precision - a.recall).abs();
            let db = (b.precision - b.recall).abs();
            da.total_cmp(&db).then(b.recall.total_cmp(&a.recall))
        })
        .map(|p| p.threshold)
}

/// Percentage of ground-truth boxes matched by detections with confidence at
/// least `threshold`. Zero ground-truth boxes give 0.
pub fn recall_at(images: &[ImageDetections], threshold: f64, iou_threshold: f64) -> f64 {
    let mut total = 0;
    let mut hit = 0;
    for img in images {
        total += img.ground_truth.len();
        let kept: Vec<Detection> = img
            .detections
            .iter()
            .filter(|d| d.confidence >= threshold)
            .copied()
            .collect();
        hit += match_detections(&kept, &img.ground_truth, iou_threshold)
            .iter()
            .filter(|m| m.1)
            .count();
    }
    if total == 0 {
        0.0
    } else {
        100.0 * hit as f64 / total as f64
    }
}

#[derive(Debug, Clone)]
pub struct ConditionResult {
    pub kind: ConditionKind,
    pub images: Vec<ImageDetections>,
    pub curve: PrCurve,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SummaryRow {
    pub condition: ConditionKind,
    pub recall_pct: f64,
    pub threshold_used: f64,
}

pub fn curve_csv(curve: &PrCurve) -> String {
    let mut out = String::from("threshold,precision,recall\n");
    for p in &curve.points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.precision, p.recall));
    }
    out
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("condition,recall_pct,threshold_used\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.condition, r.recall_pct, r.threshold_used));
    }
    out
}

pub fn curve_file_name(kind: ConditionKind) -> String {
    format!("pr_{}.csv", kind.name().to_ascii_lowercase())
}

/// Recall of every condition at the CLEAN working point, in table order.
pub fn summarize(results: &[ConditionResult], iou_threshold: f64) -> Result<Vec<SummaryRow>> {
    let clean = results
        .iter()
        .find(|r| r.kind == ConditionKind::Clean)
        .ok_or_else(|| Error::invalid("recall summary needs the CLEAN condition"))?;
    let threshold = working_point(&clean.curve)
        .ok_or_else(|| Error::invalid("CLEAN condition produced no detections; working point undefined"))?;
    let mut ordered: Vec<&ConditionResult> = results.iter().collect();
    ordered.sort_by_key(|r| r.kind);
    Ok(ordered
        .into_iter()
        .map(|r| SummaryRow {
            condition: r.kind,
            recall_pct: recall_at(&r.images, threshold, iou_threshold),
            threshold_used: threshold,
        })
        .collect())
}

/// Writes one curve CSV per condition, the recall summary and a plot.
pub fn report(results: &[ConditionResult], out_dir: &Path, iou_threshold: f64) -> Result<Vec<SummaryRow>> {
    let rows = summarize(results, iou_threshold)?;
    for r in results {
        write_atomic(&out_dir.join(curve_file_name(r.kind)), curve_csv(&r.curve).as_bytes())?;
    }
    write_atomic(&out_dir.join("recall_summary.csv"), summary_csv(&rows).as_bytes())?;
    let curves: Vec<(ConditionKind, &PrCurve)> = results.iter().map(|r| (r.kind, &r.curve)).collect();
    let plot = plot_curves(&curves, 480);
    let path = out_dir.join("pr_curves.png");
    let mut bytes = Vec::new();
    plot.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?;
    write_atomic(&path, &bytes)?;
    Ok(rows)
}

/// Line color for each condition in the plot.
pub fn condition_color(kind: ConditionKind) -> [u8; 3] {
    match kind {
        ConditionKind::Clean => [0, 0, 0],
        ConditionKind::Noise => [128, 128, 128],
        ConditionKind::ObjCls => [200, 30, 30],
        ConditionKind::Obj => [30, 90, 200],
        ConditionKind::Cls => [30, 160, 60],
    }
}

/// Recall on x, precision on y, with the diagonal in light gray.
pub fn plot_curves(curves: &[(ConditionKind, &PrCurve)], size: u32) -> RgbImage {
    let margin = size / 12;
    let span = (size - 2 * margin) as f64;
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let to_px = |r: f64, p: f64| {
        (
            margin as f64 + r.clamp(0.0, 1.0) * span,
            (size - margin) as f64 - p.clamp(0.0, 1.0) * span,
        )
    };
    let axis = Rgb([60, 60, 60]);
    draw_line(&mut img, to_px(0.0, 0.0), to_px(1.0, 0.0), axis);
    draw_line(&mut img, to_px(0.0, 0.0), to_px(0.0, 1.0), axis);
    draw_line(&mut img, to_px(0.0, 0.0), to_px(1.0, 1.0), Rgb([200, 200, 200]));
    for (kind, curve) in curves {
        let color = Rgb(condition_color(*kind));
        let mut prev: Option<(f64, f64)> = None;
        for p in &curve.points {
            let at = to_px(p.recall, p.precision);
            if let Some(from) = prev {
                draw_line(&mut img, from, at, color);
            }
            prev = Some(at);
        }
    }
    img
}

fn draw_line(img: &mut RgbImage, from: (f64, f64), to: (f64, f64), color: Rgb<u8>) {
    let steps = ((to.0 - from.0).abs().max((to.1 - from.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = (from.0 + (to.0 - from.0) * t).round();
        let y = (from.1 + (to.1 - from.1) * t).round();
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}
