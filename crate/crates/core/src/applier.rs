//! Differentiable compositing of the patch onto detected persons under
//! randomly sampled photometric and geometric transformations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::Patch;
use crate::raster::{Image, CHANNELS};
use crate::rng::{stream_rng, uniform};

/// Axis-aligned box in normalized image coordinates, center format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.h > 0.0) {
            return Err(Error::invalid(format!(
                "box must have positive size, got w={} h={}",
                self.w, self.h
            )));
        }
        let (x0, y0, x1, y1) = self.corners();
        if !(x0 < 1.0 && x1 > 0.0 && y0 < 1.0 && y1 > 0.0) {
            return Err(Error::invalid(format!("box {self:?} does not intersect the image")));
        }
        Ok(())
    }

    /// (x_min, y_min, x_max, y_max)
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let (ax0, ay0, ax1, ay1) = self.corners();
        let (bx0, by0, bx1, by1) = other.corners();
        let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformConfig {
    /// Rotation bound in degrees; draws are uniform in `[-max, max]`.
    pub max_rotation: f64,
    pub scale_range: (f64, f64),
    pub noise_amplitude: f64,
    pub brightness_range: (f64, f64),
    pub contrast_range: (f64, f64),
    /// Patch side as a fraction of `sqrt(box_w_px * box_h_px)`.
    pub base_scale: f64,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            max_rotation: 20.0,
            scale_range: (0.8, 1.2),
            noise_amplitude: 0.1,
            brightness_range: (-0.1, 0.1),
            contrast_range: (0.8, 1.2),
            base_scale: 0.25,
        }
    }
}

impl TransformConfig {
    /// No rotation, unit scale/contrast, zero brightness and noise.
    pub fn identity(base_scale: f64) -> Self {
        Self {
            max_rotation: 0.0,
            scale_range: (1.0, 1.0),
            noise_amplitude: 0.0,
            brightness_range: (0.0, 0.0),
            contrast_range: (1.0, 1.0),
            base_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (f64, f64)| lo <= hi;
        if !(self.max_rotation >= 0.0) {
            return Err(Error::invalid("transform.max_rotation must be >= 0"));
        }
        if !range_ok(self.scale_range) || !(self.scale_range.0 > 0.0) {
            return Err(Error::invalid("transform scale range must satisfy 0 < lo <= hi"));
        }
        if !range_ok(self.brightness_range) {
            return Err(Error::invalid("transform brightness range must satisfy lo <= hi"));
        }
        if !range_ok(self.contrast_range) {
            return Err(Error::invalid("transform contrast range must satisfy lo <= hi"));
        }
        if !(0.0..=1.0).contains(&self.noise_amplitude) {
            return Err(Error::invalid("transform.noise_amplitude must be in [0, 1]"));
        }
        if !(self.base_scale > 0.0) {
            return Err(Error::invalid("transform.base_scale must be > 0"));
        }
        Ok(())
    }
}

/// One concrete draw of the random transformations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    /// Degrees, counter-clockwise as seen on screen.
    pub rotation: f64,
    pub scale: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub noise_seed: u64,
}

impl TransformParams {
    pub fn identity() -> Self {
        Self {
            rotation: 0.0,
            scale: 1.0,
            brightness: 0.0,
            contrast: 1.0,
            noise_seed: 0,
        }
    }
}

pub fn sample_transform<R: Rng + ?Sized>(config: &TransformConfig, rng: &mut R) -> TransformParams {
    let rotation = uniform(rng, -config.max_rotation, config.max_rotation);
    let scale = uniform(rng, config.scale_range.0, config.scale_range.1);
    let brightness = uniform(rng, config.brightness_range.0, config.brightness_range.1);
    let contrast = uniform(rng, config.contrast_range.0, config.contrast_range.1);
    let noise_seed = rng.gen();
    TransformParams {
        rotation,
        scale,
        brightness,
        contrast,
        noise_seed,
    }
}

/// Patch placement in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
}

pub fn compute_placement(bbox: &BoundingBox, base_scale: f64, image_w: usize, image_h: usize) -> Result<Placement> {
    if !(base_scale > 0.0) {
        return Err(Error::invalid(format!("base_scale must be > 0, got {base_scale}")));
    }
    if !(bbox.w > 0.0 && bbox.h > 0.0) {
        return Err(Error::invalid(format!("degenerate box {bbox:?}")));
    }
    let (iw, ih) = (image_w as f64, image_h as f64);
    Ok(Placement {
        cx: bbox.cx * iw,
        cy: bbox.cy * ih,
        side: base_scale * (bbox.w * iw * bbox.h * ih).sqrt(),
    })
}

/// Per-box record of how output pixels were sampled from the transformed patch.
struct Footprint {
    contrast: f64,
    /// Whether each photometrically transformed sample escaped the clamp.
    unclamped: Vec<bool>,
    /// Output pixel index and four (patch pixel, weight) bilinear taps.
    samples: Vec<(usize, [(usize, f64); 4])>,
}

/// Everything needed to backpropagate from the composited image to the patch.
pub struct Application {
    height: usize,
    width: usize,
    patch_len: usize,
    footprints: Vec<Footprint>,
}

impl Application {
    /// Gradient with respect to patch samples given the gradient with respect
    /// to the composited image. Pixels overwritten by a later box pass no
    /// gradient to earlier boxes.
    pub fn backward(&self, grad_image: &Image) -> Result<Vec<f64>> {
        if grad_image.height() != self.height || grad_image.width() != self.width {
            return Err(Error::Shape("image gradient does not match composited image".into()));
        }
        let g = grad_image.data();
        let mut claimed = vec![false; self.height * self.width];
        let mut grad = vec![0.0; self.patch_len];
        let mut grad_q = vec![0.0; self.patch_len];
        for fp in self.footprints.iter().rev() {
            grad_q.fill(0.0);
            for &(pix, taps) in &fp.samples {
                if claimed[pix] {
                    continue;
                }
                for c in 0..CHANNELS {
                    let go = g[pix * CHANNELS + c];
                    if go == 0.0 {
                        continue;
                    }
                    for &(src, wgt) in &taps {
                        grad_q[src * CHANNELS + c] += wgt * go;
                    }
                }
            }
            for &(pix, _) in &fp.samples {
                claimed[pix] = true;
            }
            for (i, gq) in grad_q.iter().enumerate() {
                if fp.unclamped[i] {
                    grad[i] += gq * fp.contrast;
                }
            }
        }
        Ok(grad)
    }
}

/// Contrast, brightness and uniform noise, then clamping to `[0, 1]`.
fn photometric(patch: &Patch, params: &TransformParams, noise_amplitude: f64) -> (Vec<f64>, Vec<bool>) {
    let mut rng = stream_rng(params.noise_seed, &[]);
    let mut unclamped = Vec::with_capacity(patch.len());
    let values = patch
        .data()
        .iter()
        .map(|&p| {
            let noise = if noise_amplitude > 0.0 {
                noise_amplitude * (2.0 * rng.gen::<f64>() - 1.0)
            } else {
                0.0
            };
            let q = params.contrast * p + params.brightness + noise;
            unclamped.push((0.0..=1.0).contains(&q));
            q.clamp(0.0, 1.0)
        })
        .collect();
    (values, unclamped)
}

pub fn apply_patch(
    image: &Image,
    patch: &Patch,
    boxes: &[BoundingBox],
    params: &[TransformParams],
    config: &TransformConfig,
) -> Result<Image> {
    apply_patch_traced(image, patch, boxes, params, config).map(|(img, _)| img)
}

/// Composites the patch over each box in order (later boxes overwrite earlier
/// ones) and returns the record needed for [`Application::backward`].
pub fn apply_patch_traced(
    image: &Image,
    patch: &Patch,
    boxes: &[BoundingBox],
    params: &[TransformParams],
    config: &TransformConfig,
) -> Result<(Image, Application)> {
    if boxes.len() != params.len() {
        return Err(Error::invalid(format!(
            "{} boxes but {} transform draws",
            boxes.len(),
            params.len()
        )));
    }
    let (ih, iw) = (image.height(), image.width());
    let (ph, pw) = (patch.height(), patch.width());
    let mut out = image.clone();
    let mut footprints = Vec::with_capacity(boxes.len());

    for (bbox, p) in boxes.iter().zip(params) {
        let placement = compute_placement(bbox, config.base_scale, iw, ih)?;
        let (q, unclamped) = photometric(patch, p, config.noise_amplitude);

        let side = placement.side * p.scale;
        let px_per_sample = side / ph.max(pw) as f64;
        let half_w = pw as f64 * px_per_sample / 2.0;
        let half_h = ph as f64 * px_per_sample / 2.0;
        let theta = p.rotation.to_radians();
        let (sin, cos) = theta.sin_cos();
        let ext_x = cos.abs() * half_w + sin.abs() * half_h;
        let ext_y = sin.abs() * half_w + cos.abs() * half_h;

        let x_lo = (placement.cx - ext_x).floor().max(0.0) as usize;
        let x_hi = ((placement.cx + ext_x).ceil().max(0.0) as usize).min(iw);
        let y_lo = (placement.cy - ext_y).floor().max(0.0) as usize;
        let y_hi = ((placement.cy + ext_y).ceil().max(0.0) as usize).min(ih);

        let mut samples = Vec::new();
        let data = out.data_mut();
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let dx = x as f64 + 0.5 - placement.cx;
                let dy = y as f64 + 0.5 - placement.cy;
                // Inverse rotation into the patch frame (image y axis points down).
                let u = cos * dx - sin * dy;
                let v = sin * dx + cos * dy;
                let pu = u / px_per_sample + pw as f64 / 2.0;
                let pv = v / px_per_sample + ph as f64 / 2.0;
                if !(pu >= 0.0 && pu < pw as f64 && pv >= 0.0 && pv < ph as f64) {
                    continue;
                }
                let taps = bilinear_taps(pu - 0.5, pv - 0.5, pw, ph);
                let pix = y * iw + x;
                for c in 0..CHANNELS {
                    data[pix * CHANNELS + c] = taps.iter().map(|&(s, wgt)| wgt * q[s * CHANNELS + c]).sum();
                }
                samples.push((pix, taps));
            }
        }
        footprints.push(Footprint {
            contrast: p.contrast,
            unclamped,
            samples,
        });
    }

    Ok((
        out,
        Application {
            height: ih,
            width: iw,
            patch_len: patch.len(),
            footprints,
        },
    ))
}

/// Bilinear taps at continuous sample coordinates (pixel centers at integers),
/// clamping neighbors to the patch edge.
fn bilinear_taps(sx: f64, sy: f64, w: usize, h: usize) -> [(usize, f64); 4] {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let clampi = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
    let (xa, xb) = (clampi(x0, w), clampi(x0 + 1.0, w));
    let (ya, yb) = (clampi(y0, h), clampi(y0 + 1.0, h));
    [
        (ya * w + xa, (1.0 - fx) * (1.0 - fy)),
        (ya * w + xb, fx * (1.0 - fy)),
        (yb * w + xa, (1.0 - fx) * fy),
        (yb * w + xb, fx * fy),
    ]
}
