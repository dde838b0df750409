//! Desk-scale stand-in for a pretrained person detector.
//!
//! The network responds to local texture energy: zero-mean first-layer
//! filters followed by a squaring nonlinearity make flat regions inert while
//! striped or noisy regions raise objectness. Weight magnitudes are drawn
//! from the seed; signs are fixed so that the response is monotone in
//! energy. Total stride is 32 (avg-pool 8, then 4).

use rand::Rng;
use rand_distr::StandardNormal;

use super::net::{Activation, Conv2d, Layer, Network, PadMode};
use super::ConvDetector;
use crate::rng::stream_rng;

pub const FIXTURE_CLASSES: [&str; 3] = ["person", "bicycle", "car"];

/// Anchor priors in grid-cell units.
pub const FIXTURE_ANCHORS: [(f64, f64); 5] = [(0.8, 1.8), (0.9, 2.0), (1.0, 2.2), (1.1, 2.4), (1.0, 2.0)];

const ENERGY_CHANNELS: usize = 6;
const FEATURE_CHANNELS: usize = 8;
const ENERGY_FILTER_NORM: f64 = 1.0;
const FEATURE_GAIN: f64 = 12.0;
const FEATURE_BIAS: f64 = -0.1;
const OBJ_GAIN: f64 = 1.0;
const OBJ_BIAS: f64 = -4.0;
const PERSON_BIAS: f64 = 2.0;

pub fn fixture_detector(seed: u64) -> ConvDetector {
    let mut rng = stream_rng(seed, &[0xF1_C7_0E]);

    // Layer 1: zero-mean, fixed-norm 3x3 filters; squared response = energy.
    let k1 = 3 * 3 * 3;
    let mut w1 = Vec::with_capacity(ENERGY_CHANNELS * k1);
    for _ in 0..ENERGY_CHANNELS {
        let mut f: Vec<f64> = (0..k1).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mean = f.iter().sum::<f64>() / k1 as f64;
        f.iter_mut().for_each(|v| *v -= mean);
        let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        f.iter_mut().for_each(|v| *v *= ENERGY_FILTER_NORM / norm);
        w1.extend(f);
    }
    let energy = Conv2d {
        in_channels: 3,
        out_channels: ENERGY_CHANNELS,
        size: 3,
        stride: 1,
        pad: 1,
        pad_mode: PadMode::Replicate,
        weights: w1,
        bias: vec![0.0; ENERGY_CHANNELS],
        activation: Activation::Square,
    };

    // Layer 2: nonnegative mixing of pooled energies.
    let k2 = ENERGY_CHANNELS * 9;
    let w2: Vec<f64> = (0..FEATURE_CHANNELS * k2)
        .map(|_| FEATURE_GAIN * rng.sample::<f64, _>(StandardNormal).abs() / k2 as f64)
        .collect();
    let features = Conv2d {
        in_channels: ENERGY_CHANNELS,
        out_channels: FEATURE_CHANNELS,
        size: 3,
        stride: 1,
        pad: 1,
        pad_mode: PadMode::Replicate,
        weights: w2,
        bias: vec![FEATURE_BIAS; FEATURE_CHANNELS],
        activation: Activation::Tanh,
    };

    // Region head: 1x1 conv to anchors * (5 + classes).
    let entries = 5 + FIXTURE_CLASSES.len();
    let out_c = FIXTURE_ANCHORS.len() * entries;
    let mut w3 = vec![0.0; out_c * FEATURE_CHANNELS];
    let mut b3 = vec![0.0; out_c];
    for a in 0..FIXTURE_ANCHORS.len() {
        for k in 0..entries {
            let o = a * entries + k;
            let row = &mut w3[o * FEATURE_CHANNELS..(o + 1) * FEATURE_CHANNELS];
            match k {
                0..=3 => row
                    .iter_mut()
                    .for_each(|v| *v = 0.05 * rng.sample::<f64, _>(StandardNormal)),
                4 => {
                    row.iter_mut().for_each(|v| *v = OBJ_GAIN * rng.gen_range(0.5..1.5));
                    b3[o] = OBJ_BIAS + 0.2 * rng.sample::<f64, _>(StandardNormal);
                }
                _ => {
                    row.iter_mut()
                        .for_each(|v| *v = 0.3 * rng.sample::<f64, _>(StandardNormal));
                    if k == 5 {
                        b3[o] = PERSON_BIAS;
                    }
                }
            }
        }
    }
    let head = Conv2d {
        in_channels: FEATURE_CHANNELS,
        out_channels: out_c,
        size: 1,
        stride: 1,
        pad: 0,
        pad_mode: PadMode::Zero,
        weights: w3,
        bias: b3,
        activation: Activation::Linear,
    };

    let network = Network::new(
        3,
        vec![
            Layer::Conv(energy),
            Layer::AvgPool { size: 8 },
            Layer::Conv(features),
            Layer::AvgPool { size: 4 },
            Layer::Conv(head),
        ],
    )
    .expect("fixture layers are well-formed");
    ConvDetector::new(
        network,
        FIXTURE_ANCHORS.to_vec(),
        FIXTURE_CLASSES.iter().map(|s| s.to_string()).collect(),
        0,
    )
    .expect("fixture head matches anchors and classes")
}
