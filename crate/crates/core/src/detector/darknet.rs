//! Loader for darknet `.cfg` + `.weights` YOLOv2-family detectors.
//!
//! Supported sections: `[net]`, `[convolutional]`, `[maxpool]`, `[route]`,
//! `[reorg]` and a final `[region]`. Batch normalization is folded into the
//! convolution weights at load time since the detector is frozen.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::net::{Activation, Conv2d, Layer, Network, PadMode};
use super::{person_index, ConvDetector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
struct Section {
    name: String,
    line: usize,
    options: BTreeMap<String, String>,
}

fn parse_sections(text: &str, path: &Path) -> Result<Vec<Section>> {
    let mut sections: Vec<Section> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            sections.push(Section {
                name: name.trim().to_ascii_lowercase(),
                line: i + 1,
                options: BTreeMap::new(),
            });
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected key=value, found `{line}`"),
            });
        };
        let Some(section) = sections.last_mut() else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "option before first section".into(),
            });
        };
        section.options.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(sections)
}

impl Section {
    fn int(&self, key: &str, default: Option<i64>, path: &Path) -> Result<i64> {
        match self.options.get(key) {
            Some(v) => v
                .parse()
                .map_err(|_| self.err(path, format!("`{key}` is not an integer: {v}"))),
            None => default.ok_or_else(|| self.err(path, format!("missing `{key}`"))),
        }
    }

    fn err(&self, path: &Path, message: String) -> Error {
        Error::Parse {
            path: path.to_path_buf(),
            line: self.line,
            message: format!("[{}] {message}", self.name),
        }
    }
}

/// Convolution geometry as declared in the cfg, before weights are read.
#[derive(Debug, Clone, PartialEq)]
struct ConvSpec {
    in_channels: usize,
    filters: usize,
    size: usize,
    stride: usize,
    pad: usize,
    batch_normalize: bool,
    activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
enum LayerSpec {
    Conv(ConvSpec),
    MaxPool { size: usize, stride: usize },
    Route(Vec<isize>),
    Reorg(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DarknetCfg {
    pub input_width: usize,
    pub input_height: usize,
    pub anchors: Vec<(f64, f64)>,
    pub classes: usize,
    layers: Vec<LayerSpec>,
}

pub fn parse_cfg(text: &str, path: &Path) -> Result<DarknetCfg> {
    let sections = parse_sections(text, path)?;
    let Some(net) = sections.first().filter(|s| s.name == "net" || s.name == "network") else {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "cfg must start with [net]".into(),
        });
    };
    let input_width = net.int("width", Some(416), path)? as usize;
    let input_height = net.int("height", Some(416), path)? as usize;
    let mut channels = vec![];
    let mut cur_c = net.int("channels", Some(3), path)? as usize;
    let mut layers = Vec::new();
    let mut region = None;

    for s in &sections[1..] {
        if region.is_some() {
            return Err(s.err(path, "layers after [region] are not supported".into()));
        }
        let spec = match s.name.as_str() {
            "convolutional" | "conv" => {
                let size = s.int("size", Some(1), path)? as usize;
                let pad = if s.int("pad", Some(0), path)? != 0 {
                    size / 2
                } else {
                    s.int("padding", Some(0), path)? as usize
                };
                let activation = match s.options.get("activation").map(String::as_str).unwrap_or("logistic") {
                    "leaky" => Activation::Leaky,
                    "linear" => Activation::Linear,
                    "logistic" => Activation::Logistic,
                    "tanh" => Activation::Tanh,
                    other => return Err(s.err(path, format!("unsupported activation `{other}`"))),
                };
                let filters = s.int("filters", Some(1), path)? as usize;
                let spec = ConvSpec {
                    in_channels: cur_c,
                    filters,
                    size,
                    stride: s.int("stride", Some(1), path)? as usize,
                    pad,
                    batch_normalize: s.int("batch_normalize", Some(0), path)? != 0,
                    activation,
                };
                cur_c = filters;
                LayerSpec::Conv(spec)
            }
            "maxpool" | "max" => {
                let stride = s.int("stride", Some(1), path)? as usize;
                let size = s.int("size", Some(stride as i64), path)? as usize;
                LayerSpec::MaxPool { size, stride }
            }
            "route" => {
                let refs: Vec<isize> = s
                    .options
                    .get("layers")
                    .ok_or_else(|| s.err(path, "missing `layers`".into()))?
                    .split(',')
                    .map(|v| v.trim().parse::<isize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| s.err(path, format!("bad route layers: {e}")))?;
                let idx = layers.len() as isize;
                let mut c = 0;
                for &r in &refs {
                    let abs = if r < 0 { idx + r } else { r };
                    if abs < 0 || abs >= idx {
                        return Err(s.err(path, format!("route references layer {r}")));
                    }
                    c += channels[abs as usize];
                }
                cur_c = c;
                LayerSpec::Route(refs)
            }
            "reorg" => {
                let stride = s.int("stride", Some(1), path)? as usize;
                cur_c *= stride * stride;
                LayerSpec::Reorg(stride)
            }
            "region" => {
                let classes = s.int("classes", None, path)? as usize;
                let num = s.int("num", Some(1), path)? as usize;
                let values: Vec<f64> = s
                    .options
                    .get("anchors")
                    .map(|a| {
                        a.split(',')
                            .filter(|v| !v.trim().is_empty())
                            .map(|v| v.trim().parse::<f64>())
                            .collect::<std::result::Result<_, _>>()
                    })
                    .transpose()
                    .map_err(|e| s.err(path, format!("bad anchors: {e}")))?
                    .unwrap_or_default();
                if values.len() != 2 * num {
                    return Err(s.err(
                        path,
                        format!("expected {} anchor values, found {}", 2 * num, values.len()),
                    ));
                }
                if cur_c != num * (5 + classes) {
                    return Err(s.err(
                        path,
                        format!(
                            "previous layer has {cur_c} channels, region needs {}",
                            num * (5 + classes)
                        ),
                    ));
                }
                region = Some((values.chunks(2).map(|p| (p[0], p[1])).collect::<Vec<_>>(), classes));
                continue;
            }
            other => return Err(s.err(path, format!("unsupported section [{other}]"))),
        };
        layers.push(spec);
        channels.push(cur_c);
    }
    let (anchors, classes) = region.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: text.lines().count(),
        message: "cfg has no [region] section".into(),
    })?;
    Ok(DarknetCfg {
        input_width,
        input_height,
        anchors,
        classes,
        layers,
    })
}

struct WeightReader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl WeightReader<'_> {
    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let end = self.offset + 4 * n;
        let body = self.bytes.get(self.offset..end).ok_or_else(|| Error::Format {
            path: self.path.to_path_buf(),
            offset: self.offset as u64,
            message: format!(
                "weights truncated: need {n} floats, file has {} bytes",
                self.bytes.len()
            ),
        })?;
        self.offset = end;
        Ok(body
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
            .collect())
    }

    fn i32(&mut self) -> Result<i32> {
        let b = self
            .bytes
            .get(self.offset..self.offset + 4)
            .ok_or_else(|| Error::Format {
                path: self.path.to_path_buf(),
                offset: self.offset as u64,
                message: "weights header truncated".into(),
            })?;
        self.offset += 4;
        Ok(i32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

/// Builds the network from a parsed cfg and raw darknet weight bytes.
pub fn build_network(cfg: &DarknetCfg, weights: &[u8], path: &Path) -> Result<Network> {
    let mut r = WeightReader {
        bytes: weights,
        offset: 0,
        path,
    };
    let major = r.i32()?;
    let minor = r.i32()?;
    let _revision = r.i32()?;
    // `seen` is a size_t from version 0.2 on.
    let seen_len = if major * 10 + minor >= 2 && major < 1000 && minor < 1000 {
        8
    } else {
        4
    };
    if weights.len() < r.offset + seen_len {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: r.offset as u64,
            message: "weights header truncated".into(),
        });
    }
    r.offset += seen_len;

    let mut layers = Vec::with_capacity(cfg.layers.len());
    for spec in &cfg.layers {
        layers.push(match spec {
            LayerSpec::Conv(c) => {
                let n = c.filters;
                let mut bias = r.floats(n)?;
                let bn = if c.batch_normalize {
                    Some((r.floats(n)?, r.floats(n)?, r.floats(n)?))
                } else {
                    None
                };
                let per_filter = c.in_channels * c.size * c.size;
                let mut weights = r.floats(n * per_filter)?;
                if let Some((scales, mean, var)) = bn {
                    for o in 0..n {
                        let k = scales[o] / (var[o].sqrt() + 1e-6);
                        weights[o * per_filter..(o + 1) * per_filter]
                            .iter_mut()
                            .for_each(|w| *w *= k);
                        bias[o] -= mean[o] * k;
                    }
                }
                Layer::Conv(Conv2d {
                    in_channels: c.in_channels,
                    out_channels: n,
                    size: c.size,
                    stride: c.stride,
                    pad: c.pad,
                    pad_mode: PadMode::Zero,
                    weights,
                    bias,
                    activation: c.activation,
                })
            }
            LayerSpec::MaxPool { size, stride } => Layer::MaxPool {
                size: *size,
                stride: *stride,
            },
            LayerSpec::Route(refs) => Layer::Route { layers: refs.clone() },
            LayerSpec::Reorg(s) => Layer::Reorg { stride: *s },
        });
    }
    if r.offset != weights.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: r.offset as u64,
            message: format!("{} unused bytes; cfg and weights disagree", weights.len() - r.offset),
        });
    }
    Network::new(3, layers)
}

/// One class name per line; blank lines are skipped.
pub fn load_class_names(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn load_detector(cfg_path: &Path, weights_path: &Path, names_path: &Path) -> Result<ConvDetector> {
    let text = fs::read_to_string(cfg_path).map_err(|e| Error::io(cfg_path, e))?;
    let cfg = parse_cfg(&text, cfg_path)?;
    let names = load_class_names(names_path)?;
    if names.len() != cfg.classes {
        return Err(Error::invalid(format!(
            "{} lists {} classes but the cfg declares {}",
            names_path.display(),
            names.len(),
            cfg.classes
        )));
    }
    let person = person_index(&names)?;
    let bytes = fs::read(weights_path).map_err(|e| Error::io(weights_path, e))?;
    let network = build_network(&cfg, &bytes, weights_path)?;
    ConvDetector::new(network, cfg.anchors, names, person)
}
