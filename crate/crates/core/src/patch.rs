//! The optimized patch, its printability and smoothness penalties, and the
//! raw-float sidecar format used for exact resume.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Image, CHANNELS};
use crate::rng::stream_rng;

/// Smoothing term inside the square root of the TV gradient denominator.
pub const TV_GRAD_EPS: f64 = 1e-8;

pub const SIDECAR_MAGIC: &[u8; 4] = b"APF1";
pub const SIDECAR_HEADER_LEN: usize = 16;

/// An RGB patch whose samples always lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitMode {
    Random,
    Gray,
}

impl std::str::FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(InitMode::Random),
            "gray" | "grey" => Ok(InitMode::Gray),
            other => Err(Error::invalid(format!("unknown init mode `{other}`"))),
        }
    }
}

impl Patch {
    /// Builds a patch from arbitrary real samples, projecting each onto `[0, 1]`.
    pub fn clamped(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != height * width * CHANNELS {
            return Err(Error::Shape(format!(
                "patch {}x{} needs {} samples, got {}",
                height,
                width,
                height * width * CHANNELS,
                data.len()
            )));
        }
        clamp_unit(&mut data);
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutates samples in place, re-clamping afterwards.
    pub fn update(&mut self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.data);
        clamp_unit(&mut self.data);
    }

    pub fn to_image(&self) -> Image {
        Image::from_vec(self.height, self.width, self.data.clone()).expect("patch layout is HWC RGB")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_image().save_png(path)
    }

    /// 8-bit PNG of `size_cm` x `size_cm` at `dpi`, with the resolution
    /// recorded in a pHYs chunk. Returns the output side length in pixels.
    pub fn export_print(&self, path: &Path, dpi: f64, size_cm: f64) -> Result<u32> {
        if !(dpi > 0.0 && size_cm > 0.0) || !(dpi.is_finite() && size_cm.is_finite()) {
            return Err(Error::invalid(format!(
                "dpi and physical size must be positive, got {dpi} dpi and {size_cm} cm"
            )));
        }
        let side = print_pixels(dpi, size_cm);
        if side == 0 || side > 65_535 {
            return Err(Error::invalid(format!("export size of {side} px is out of range")));
        }
        let image = self.to_image().resized(side as usize, side as usize).to_rgb8();
        let mut bytes = Vec::new();
        let mut encoder = png::Encoder::new(&mut bytes, side, side);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let ppm = (dpi / 0.0254).round() as u32;
        encoder.set_pixel_dims(Some(png::PixelDimensions {
            xppu: ppm,
            yppu: ppm,
            unit: png::Unit::Meter,
        }));
        let mut writer = encoder.write_header()?;
        writer.write_image_data(image.as_raw())?;
        writer.finish()?;
        crate::fsutil::write_atomic(path, &bytes)?;
        Ok(side)
    }

    pub fn save_sidecar(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(SIDECAR_HEADER_LEN + self.data.len() * 4);
        write_block(&mut bytes, self.height, self.width, &self.data);
        crate::fsutil::write_atomic(path, &bytes)
    }

    pub fn load_sidecar(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (block, end) = read_block(&bytes, 0, path)?;
        if end != bytes.len() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: end as u64,
                message: format!("{} trailing bytes after patch data", bytes.len() - end),
            });
        }
        block.into_patch(path, 0)
    }
}

/// Pixel count for a physical length: `round(cm / 2.54 * dpi)`.
pub fn print_pixels(dpi: f64, size_cm: f64) -> u32 {
    (size_cm / 2.54 * dpi).round() as u32
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!(
            "patch dimensions must be positive, got {height}x{width}"
        )));
    }
    Ok(())
}

fn clamp_unit(values: &mut [f64]) {
    for v in values {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Initial patch: i.i.d. uniform samples (stored at `f32` precision) or flat 0.5 gray.
pub fn init_patch(height: usize, width: usize, mode: InitMode, seed: u64) -> Result<Patch> {
    check_dims(height, width)?;
    let n = height * width * CHANNELS;
    let data = match mode {
        InitMode::Gray => vec![0.5; n],
        InitMode::Random => {
            let mut rng = stream_rng(seed, &[0x50_4154_4348]);
            (0..n).map(|_| f64::from(rng.gen::<f32>())).collect()
        }
    };
    Ok(Patch { height, width, data })
}

/// Projects every sample onto `[0, 1]`.
pub fn clamp_patch(height: usize, width: usize, values: Vec<f64>) -> Result<Patch> {
    Patch::clamped(height, width, values)
}

/// Colors a printer can reproduce.
#[derive(Debug, Clone, PartialEq)]
pub struct PrintableColorSet {
    colors: Vec<[f64; 3]>,
}

impl PrintableColorSet {
    pub fn new(colors: Vec<[f64; 3]>) -> Result<Self> {
        if colors.is_empty() {
            return Err(Error::invalid("printable color set is empty"));
        }
        if let Some(bad) = colors.iter().find(|c| c.iter().any(|v| !(0.0..=1.0).contains(v))) {
            return Err(Error::invalid(format!(
                "printable color {bad:?} has a component outside [0, 1]"
            )));
        }
        Ok(Self { colors })
    }

    /// The 27 colors of the {0, 0.5, 1}^3 lattice.
    pub fn lattice() -> Self {
        let levels = [0.0, 0.5, 1.0];
        let mut colors = Vec::with_capacity(27);
        for &r in &levels {
            for &g in &levels {
                for &b in &levels {
                    colors.push([r, g, b]);
                }
            }
        }
        Self { colors }
    }

    /// Reads one whitespace-separated `r g b` triple per line. Blank lines and
    /// `#` comments are ignored.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut colors = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(parse_err(format!("expected 3 values, found {}", fields.len())));
            }
            let mut rgb = [0.0; 3];
            for (slot, field) in rgb.iter_mut().zip(&fields) {
                *slot = field.parse::<f64>().map_err(|e| parse_err(format!("`{field}`: {e}")))?;
            }
            colors.push(rgb);
        }
        Self::new(colors)
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0) {
            return Err(Error::invalid(format!(
                "loss weights must be nonnegative, got alpha={alpha} beta={beta}"
            )));
        }
        Ok(Self { alpha, beta })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.01, beta: 2.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nps: f64,
    pub tv: f64,
    pub obj: f64,
    pub total: f64,
}

pub fn total_loss(nps: f64, tv: f64, obj: f64, weights: LossWeights) -> LossBreakdown {
    LossBreakdown {
        nps,
        tv,
        obj,
        total: weights.alpha * nps + weights.beta * tv + obj,
    }
}

fn nearest_color(p: [f64; 3], colors: &PrintableColorSet) -> ([f64; 3], f64) {
    let mut best = (colors.colors[0], f64::INFINITY);
    for &c in &colors.colors {
        let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt();
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Sum over pixels of the Euclidean RGB distance to the closest printable color.
pub fn nps_loss(patch: &Patch, colors: &PrintableColorSet) -> f64 {
    patch
        .data
        .chunks_exact(CHANNELS)
        .map(|px| nearest_color([px[0], px[1], px[2]], colors).1)
        .sum()
}

/// NPS value and its gradient with respect to every patch sample. Pixels sitting
/// exactly on a printable color get a zero subgradient.
pub fn nps_loss_grad(patch: &Patch, colors: &PrintableColorSet) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; patch.data.len()];
    let mut total = 0.0;
    for (px, g) in patch.data.chunks_exact(CHANNELS).zip(grad.chunks_exact_mut(CHANNELS)) {
        let (c, d) = nearest_color([px[0], px[1], px[2]], colors);
        total += d;
        if d > 0.0 {
            for k in 0..CHANNELS {
                g[k] = (px[k] - c[k]) / d;
            }
        }
    }
    (total, grad)
}

/// Isotropic total variation using forward differences, summed over channels.
/// Differences that would step past the last row or column are skipped.
pub fn tv_loss(patch: &Patch) -> f64 {
    tv_impl(patch, None)
}

/// TV value and gradient. The value is exact; the gradient uses
/// `sqrt(d^2 + TV_GRAD_EPS)` in its denominator so flat regions stay finite.
pub fn tv_loss_grad(patch: &Patch) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; patch.data.len()];
    let v = tv_impl(patch, Some(&mut grad));
    (v, grad)
}

fn tv_impl(patch: &Patch, mut grad: Option<&mut Vec<f64>>) -> f64 {
    let (h, w) = (patch.height, patch.width);
    let at = |y: usize, x: usize, c: usize| (y * w + x) * CHANNELS + c;
    let d = &patch.data;
    let mut total = 0.0;
    for c in 0..CHANNELS {
        for y in 0..h {
            for x in 0..w {
                let p = d[at(y, x, c)];
                let dy = if y + 1 < h { p - d[at(y + 1, x, c)] } else { 0.0 };
                let dx = if x + 1 < w { p - d[at(y, x + 1, c)] } else { 0.0 };
                let sq = dy * dy + dx * dx;
                if sq == 0.0 {
                    continue;
                }
                total += sq.sqrt();
                if let Some(g) = grad.as_deref_mut() {
                    let inv = 1.0 / (sq + TV_GRAD_EPS).sqrt();
                    g[at(y, x, c)] += (dy + dx) * inv;
                    if y + 1 < h {
                        g[at(y + 1, x, c)] -= dy * inv;
                    }
                    if x + 1 < w {
                        g[at(y, x + 1, c)] -= dx * inv;
                    }
                }
            }
        }
    }
    total
}

/// A decoded `APF1` block: dimensions plus raw samples.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct FloatBlock {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FloatBlock {
    /// `offset` is where the block starts in its file, for error reporting.
    pub fn into_patch(self, path: &Path, offset: usize) -> Result<Patch> {
        check_dims(self.height, self.width)?;
        if let Some(i) = self.data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: (offset + SIDECAR_HEADER_LEN + 4 * i) as u64,
                message: format!("sample {} is outside [0, 1]", self.data[i]),
            });
        }
        Ok(Patch {
            height: self.height,
            width: self.width,
            data: self.data,
        })
    }
}

/// Appends a 16-byte header plus little-endian `f32` samples.
pub(crate) fn write_block(out: &mut Vec<u8>, height: usize, width: usize, data: &[f64]) {
    out.extend_from_slice(SIDECAR_MAGIC);
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(CHANNELS as u32).to_le_bytes());
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub(crate) fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| truncated(path, offset, bytes.len()))
}

pub(crate) fn truncated(path: &Path, offset: usize, len: usize) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: format!("file truncated (length {len})"),
    }
}

/// Parses one block starting at `offset`; returns it and the offset just past it.
pub(crate) fn read_block(bytes: &[u8], offset: usize, path: &Path) -> Result<(FloatBlock, usize)> {
    let magic = bytes
        .get(offset..offset + 4)
        .ok_or_else(|| truncated(path, offset, bytes.len()))?;
    if magic != SIDECAR_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message: format!("bad magic {:?}, expected \"APF1\"", String::from_utf8_lossy(magic)),
        });
    }
    let height = read_u32(bytes, offset + 4, path)? as usize;
    let width = read_u32(bytes, offset + 8, path)? as usize;
    let channels = read_u32(bytes, offset + 12, path)? as usize;
    if channels != CHANNELS {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: (offset + 12) as u64,
            message: format!("expected {CHANNELS} channels, found {channels}"),
        });
    }
    let n = height * width * channels;
    let start = offset + SIDECAR_HEADER_LEN;
    let end = start + 4 * n;
    let body = bytes
        .get(start..end)
        .ok_or_else(|| truncated(path, bytes.len(), bytes.len()))?;
    let data = body
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
        .collect();
    Ok((FloatBlock { height, width, data }, end))
}
