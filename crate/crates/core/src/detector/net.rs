//! Minimal convolutional network with forward evaluation and input-gradient
//! backpropagation. Weights are immutable; only gradients with respect to the
//! network input are produced.

use matrixmultiply::dgemm;

use crate::error::{Error, Result};

/// Dense CHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn new(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::Shape(format!(
                "tensor {c}x{h}x{w} needs {} values, got {}",
                c * h * w,
                data.len()
            )));
        }
        Ok(Self { c, h, w, data })
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    /// Leaky ReLU with slope 0.1, as in darknet.
    Leaky,
    Logistic,
    Tanh,
    Square,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Leaky => {
                if x > 0.0 {
                    x
                } else {
                    0.1 * x
                }
            }
            Activation::Logistic => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Square => x * x,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Leaky => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.1
                }
            }
            Activation::Logistic => {
                let s = sigmoid(pre);
                s * (1.0 - s)
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
            Activation::Square => 2.0 * pre,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Out-of-range taps read the nearest edge sample.
    Replicate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub size: usize,
    pub stride: usize,
    pub pad: usize,
    pub pad_mode: PadMode,
    /// Row-major `[out][in][ky][kx]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Conv2d {
    fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h + 2 * self.pad < self.size || w + 2 * self.pad < self.size {
            return Err(Error::Shape(format!("input {h}x{w} smaller than kernel {}", self.size)));
        }
        Ok((
            (h + 2 * self.pad - self.size) / self.stride + 1,
            (w + 2 * self.pad - self.size) / self.stride + 1,
        ))
    }

    /// Maps a padded coordinate to a source index, or `None` for a zero tap.
    #[inline]
    fn source(&self, pos: isize, len: usize) -> Option<usize> {
        if pos >= 0 && (pos as usize) < len {
            Some(pos as usize)
        } else {
            match self.pad_mode {
                PadMode::Zero => None,
                PadMode::Replicate => Some(pos.clamp(0, len as isize - 1) as usize),
            }
        }
    }

    fn im2col(&self, input: &Tensor, oh: usize, ow: usize) -> Vec<f64> {
        let k = self.size;
        let rows = input.c * k * k;
        let n = oh * ow;
        let mut cols = vec![0.0; rows * n];
        for c in 0..input.c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let Some(sy) = self.source(iy, input.h) else {
                            continue;
                        };
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if let Some(sx) = self.source(ix, input.w) {
                                dst[oy * ow + ox] = input.at(c, sy, sx);
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], grad_in: &mut Tensor, oh: usize, ow: usize) {
        let k = self.size;
        let n = oh * ow;
        let (h, w) = (grad_in.h, grad_in.w);
        for c in 0..grad_in.c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let Some(sy) = self.source(iy, h) else {
                            continue;
                        };
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if let Some(sx) = self.source(ix, w) {
                                grad_in.data[(c * h + sy) * w + sx] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Returns (pre-activation, output).
    fn forward(&self, input: &Tensor) -> Result<(Tensor, Tensor)> {
        if input.c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} channels, got {}",
                self.in_channels, input.c
            )));
        }
        let (oh, ow) = self.out_dims(input.h, input.w)?;
        let kdim = self.in_channels * self.size * self.size;
        let n = oh * ow;
        let cols = self.im2col(input, oh, ow);
        let mut pre = Tensor::zeros(self.out_channels, oh, ow);
        for (o, chunk) in pre.data.chunks_exact_mut(n).enumerate() {
            chunk.fill(self.bias[o]);
        }
        unsafe {
            dgemm(
                self.out_channels,
                kdim,
                n,
                1.0,
                self.weights.as_ptr(),
                kdim as isize,
                1,
                cols.as_ptr(),
                n as isize,
                1,
                1.0,
                pre.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let mut out = pre.clone();
        for v in &mut out.data {
            *v = self.activation.apply(*v);
        }
        Ok((pre, out))
    }

    fn backward(&self, input_shape: (usize, usize, usize), pre: &Tensor, grad_out: &Tensor) -> Tensor {
        let (c, h, w) = input_shape;
        let (oh, ow) = (pre.h, pre.w);
        let n = oh * ow;
        let kdim = c * self.size * self.size;
        let grad_pre: Vec<f64> = grad_out
            .data
            .iter()
            .zip(&pre.data)
            .map(|(g, &p)| g * self.activation.derivative(p))
            .collect();
        let mut grad_cols = vec![0.0; kdim * n];
        // grad_cols = W^T * grad_pre
        unsafe {
            dgemm(
                kdim,
                self.out_channels,
                n,
                1.0,
                self.weights.as_ptr(),
                1,
                kdim as isize,
                grad_pre.as_ptr(),
                n as isize,
                1,
                0.0,
                grad_cols.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let mut grad_in = Tensor::zeros(c, h, w);
        self.col2im(&grad_cols, &mut grad_in, oh, ow);
        grad_in
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    /// Darknet max pooling: padding `size - 1` split as `-pad/2` offset.
    MaxPool {
        size: usize,
        stride: usize,
    },
    /// Non-overlapping block average.
    AvgPool {
        size: usize,
    },
    /// Channel concatenation of earlier layer outputs. Negative indices are
    /// relative to the route layer itself, as in darknet configs.
    Route {
        layers: Vec<isize>,
    },
    /// Darknet space-to-depth reorganization.
    Reorg {
        stride: usize,
    },
}

struct LayerTrace {
    pre: Option<Tensor>,
    out: Tensor,
}

/// Activations recorded by [`Network::forward_traced`] for backpropagation.
pub struct Trace {
    input_shape: (usize, usize, usize),
    layers: Vec<LayerTrace>,
}

impl Trace {
    pub fn output(&self) -> &Tensor {
        &self.layers.last().expect("network has layers").out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub input_channels: usize,
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn new(input_channels: usize, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network has no layers"));
        }
        for (i, layer) in layers.iter().enumerate() {
            if let Layer::Route { layers: refs } = layer {
                for &r in refs {
                    resolve_route(i, r)?;
                }
            }
        }
        Ok(Self { input_channels, layers })
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let trace = self.forward_traced(input)?;
        Ok(trace.layers.into_iter().last().expect("nonempty").out)
    }

    pub fn forward_traced(&self, input: &Tensor) -> Result<Trace> {
        if input.c != self.input_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {}",
                self.input_channels, input.c
            )));
        }
        let mut traces: Vec<LayerTrace> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let prev = if i == 0 { input } else { &traces[i - 1].out };
            let trace = match layer {
                Layer::Conv(conv) => {
                    let (pre, out) = conv.forward(prev)?;
                    LayerTrace { pre: Some(pre), out }
                }
                Layer::MaxPool { size, stride } => LayerTrace {
                    pre: None,
                    out: maxpool_forward(prev, *size, *stride).0,
                },
                Layer::AvgPool { size } => LayerTrace {
                    pre: None,
                    out: avgpool_forward(prev, *size)?,
                },
                Layer::Route { layers } => {
                    let mut parts = Vec::with_capacity(layers.len());
                    for &r in layers {
                        parts.push(&traces[resolve_route(i, r)?].out);
                    }
                    LayerTrace {
                        pre: None,
                        out: concat(&parts)?,
                    }
                }
                Layer::Reorg { stride } => LayerTrace {
                    pre: None,
                    out: reorg_forward(prev, *stride)?,
                },
            };
            traces.push(trace);
        }
        Ok(Trace {
            input_shape: input.shape(),
            layers: traces,
        })
    }

    /// Gradient with respect to the network input given the gradient of a
    /// scalar with respect to the final output.
    pub fn backward(&self, input: &Tensor, trace: &Trace, grad_output: Tensor) -> Result<Tensor> {
        let n = self.layers.len();
        let last = trace.output();
        if grad_output.shape() != last.shape() {
            return Err(Error::Shape(format!(
                "output gradient {:?} does not match output {:?}",
                grad_output.shape(),
                last.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[n - 1] = Some(grad_output);
        let mut grad_input = Tensor::zeros(trace.input_shape.0, trace.input_shape.1, trace.input_shape.2);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let prev_shape = if i == 0 {
                trace.input_shape
            } else {
                trace.layers[i - 1].out.shape()
            };
            let upstream = match &self.layers[i] {
                Layer::Conv(conv) => {
                    let pre = trace.layers[i].pre.as_ref().expect("conv trace keeps pre-activation");
                    conv.backward(prev_shape, pre, &g)
                }
                Layer::MaxPool { size, stride } => {
                    let prev = if i == 0 { input } else { &trace.layers[i - 1].out };
                    let (_, argmax) = maxpool_forward(prev, *size, *stride);
                    let mut gi = Tensor::zeros(prev_shape.0, prev_shape.1, prev_shape.2);
                    for (o, &src) in argmax.iter().enumerate() {
                        gi.data[src] += g.data[o];
                    }
                    gi
                }
                Layer::AvgPool { size } => avgpool_backward(prev_shape, *size, &g),
                Layer::Reorg { stride } => reorg_backward(prev_shape, *stride, &g),
                Layer::Route { layers } => {
                    let mut offset = 0;
                    for &r in layers {
                        let src = resolve_route(i, r)?;
                        let len = trace.layers[src].out.data.len();
                        let shape = trace.layers[src].out.shape();
                        let part = Tensor::new(shape.0, shape.1, shape.2, g.data[offset..offset + len].to_vec())?;
                        offset += len;
                        accumulate(&mut grads[src], part);
                    }
                    continue;
                }
            };
            if i == 0 {
                grad_input.add_assign(&upstream);
            } else {
                accumulate(&mut grads[i - 1], upstream);
            }
        }
        Ok(grad_input)
    }

    pub fn output_shape(&self, c: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        // Shape inference by evaluation on zeros; networks here are small or
        // only probed once at construction.
        let out = self.forward(&Tensor::zeros(c, h, w))?;
        Ok(out.shape())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn resolve_route(index: usize, r: isize) -> Result<usize> {
    let abs = if r < 0 { index as isize + r } else { r };
    if abs < 0 || abs as usize >= index {
        return Err(Error::invalid(format!(
            "route at layer {index} references invalid layer {r}"
        )));
    }
    Ok(abs as usize)
}

fn concat(parts: &[&Tensor]) -> Result<Tensor> {
    let (h, w) = (parts[0].h, parts[0].w);
    if parts.iter().any(|p| p.h != h || p.w != w) {
        return Err(Error::Shape("route inputs differ in spatial size".into()));
    }
    let c = parts.iter().map(|p| p.c).sum();
    let mut data = Vec::with_capacity(c * h * w);
    for p in parts {
        data.extend_from_slice(&p.data);
    }
    Tensor::new(c, h, w, data)
}

/// Returns the pooled tensor and, per output element, the flat input index of its max.
fn maxpool_forward(input: &Tensor, size: usize, stride: usize) -> (Tensor, Vec<usize>) {
    let pad = size - 1;
    let oh = (input.h + pad - size) / stride + 1;
    let ow = (input.w + pad - size) / stride + 1;
    let offset = -((pad / 2) as isize);
    let mut out = Tensor::zeros(input.c, oh, ow);
    let mut argmax = vec![0usize; input.c * oh * ow];
    for c in 0..input.c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for ky in 0..size {
                    for kx in 0..size {
                        let y = offset + (oy * stride + ky) as isize;
                        let x = offset + (ox * stride + kx) as isize;
                        if y < 0 || x < 0 || y as usize >= input.h || x as usize >= input.w {
                            continue;
                        }
                        let idx = (c * input.h + y as usize) * input.w + x as usize;
                        if input.data[idx] > best {
                            best = input.data[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (c * oh + oy) * ow + ox;
                out.data[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    (out, argmax)
}

fn avgpool_forward(input: &Tensor, size: usize) -> Result<Tensor> {
    if !input.h.is_multiple_of(size) || !input.w.is_multiple_of(size) {
        return Err(Error::Shape(format!(
            "avgpool {size} needs sides divisible by {size}, got {}x{}",
            input.h, input.w
        )));
    }
    let (oh, ow) = (input.h / size, input.w / size);
    let norm = 1.0 / (size * size) as f64;
    let mut out = Tensor::zeros(input.c, oh, ow);
    for c in 0..input.c {
        for y in 0..input.h {
            for x in 0..input.w {
                out.data[(c * oh + y / size) * ow + x / size] += input.at(c, y, x) * norm;
            }
        }
    }
    Ok(out)
}

fn avgpool_backward(shape: (usize, usize, usize), size: usize, g: &Tensor) -> Tensor {
    let (c, h, w) = shape;
    let norm = 1.0 / (size * size) as f64;
    let mut gi = Tensor::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                gi.data[(ch * h + y) * w + x] = g.at(ch, y / size, x / size) * norm;
            }
        }
    }
    gi
}

/// Source index (into the input) for every output element, following
/// darknet's `reorg_cpu(..., forward = 0, ...)`.
fn reorg_map(c: usize, h: usize, w: usize, stride: usize) -> Vec<usize> {
    let out_c = c / (stride * stride);
    let mut map = vec![0; c * h * w];
    for k in 0..c {
        for j in 0..h {
            for i in 0..w {
                let in_index = i + w * (j + h * k);
                let c2 = k % out_c;
                let offset = k / out_c;
                let w2 = i * stride + offset % stride;
                let h2 = j * stride + offset / stride;
                let out_index = w2 + w * stride * (h2 + h * stride * c2);
                map[in_index] = out_index;
            }
        }
    }
    map
}

fn check_reorg(c: usize, h: usize, w: usize, stride: usize) -> Result<()> {
    if !h.is_multiple_of(stride) || !w.is_multiple_of(stride) || !c.is_multiple_of(stride * stride) {
        return Err(Error::Shape(format!(
            "reorg stride {stride} incompatible with {c}x{h}x{w}"
        )));
    }
    Ok(())
}

fn reorg_forward(input: &Tensor, stride: usize) -> Result<Tensor> {
    check_reorg(input.c, input.h, input.w, stride)?;
    let map = reorg_map(input.c, input.h, input.w, stride);
    let data = map.iter().map(|&src| input.data[src]).collect();
    Tensor::new(input.c * stride * stride, input.h / stride, input.w / stride, data)
}

fn reorg_backward(shape: (usize, usize, usize), stride: usize, g: &Tensor) -> Tensor {
    let (c, h, w) = shape;
    let map = reorg_map(c, h, w, stride);
    let mut gi = Tensor::zeros(c, h, w);
    for (o, &src) in map.iter().enumerate() {
        gi.data[src] += g.data[o];
    }
    gi
}
