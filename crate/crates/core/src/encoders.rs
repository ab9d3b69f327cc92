//! Frozen feature extractors.
//!
//! The microscopic encoder is the identity channel split of a frame. The
//! convolutional stack stands in for a pretrained classifier: its taps at
//! increasing depth play the roles of the style features, the generator's
//! encoder output and the content features.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evolvesync::SampleSet;
use crate::graph::{Graph, Var};
use crate::optim::ParamSet;
use crate::tensor::{Element, Tensor};
use crate::video::Frame;

/// Named output points of the encoder stack.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tap {
    /// The frame's three color planes.
    Micro,
    /// Second conv layer; also the style tap.
    Macro,
    /// Third conv layer; input of the generator's decoder.
    GenEnc,
    /// Fourth conv layer.
    Content,
}

impl Tap {
    pub const ALL: [Tap; 4] = [Tap::Micro, Tap::Macro, Tap::GenEnc, Tap::Content];
    /// Style features are read at the macro tap.
    pub const STYLE: Tap = Tap::Macro;

    /// Number of conv layers applied before this tap.
    pub fn depth(self) -> usize {
        match self {
            Tap::Micro => 0,
            Tap::Macro => 2,
            Tap::GenEnc => 3,
            Tap::Content => 4,
        }
    }

    pub fn channels(self) -> usize {
        match self {
            Tap::Micro => 3,
            Tap::Macro => 32,
            Tap::GenEnc => 48,
            Tap::Content => 64,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tap::Micro => "micro",
            Tap::Macro => "macro",
            Tap::GenEnc => "gen-enc",
            Tap::Content => "content",
        }
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "micro" => Ok(Tap::Micro),
            "macro" | "style" => Ok(Tap::Macro),
            "gen-enc" => Ok(Tap::GenEnc),
            "content" => Ok(Tap::Content),
            other => Err(Error::Unknown { what: "encoder tap", name: other.to_string() }),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct EncoderLayer {
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Layer stack shared by every encoder: all 3×3 convolutions followed by ReLU.
pub const ENCODER_LAYERS: [EncoderLayer; 4] = [
    EncoderLayer { kernel: 3, stride: 1, in_channels: 3, out_channels: 16 },
    EncoderLayer { kernel: 3, stride: 2, in_channels: 16, out_channels: 32 },
    EncoderLayer { kernel: 3, stride: 2, in_channels: 32, out_channels: 48 },
    EncoderLayer { kernel: 3, stride: 2, in_channels: 48, out_channels: 64 },
];

/// Seeded, frozen encoder weights.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderSpec {
    seed: u64,
    weights: Vec<Tensor<f64>>,
    biases: Vec<Tensor<f64>>,
}

fn weight_name(i: usize) -> String {
    format!("conv{}.weight", i + 1)
}

fn bias_name(i: usize) -> String {
    format!("conv{}.bias", i + 1)
}

impl EncoderSpec {
    /// He-normal (fan-in) weights and zero biases drawn from `seed`.
    pub fn build(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in ENCODER_LAYERS {
            let fan_in = l.in_channels * l.kernel * l.kernel;
            let shape = [l.out_channels, l.in_channels, l.kernel, l.kernel];
            weights.push(Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), &mut rng));
            biases.push(Tensor::zeros([l.out_channels]));
        }
        EncoderSpec { seed, weights, biases }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[EncoderLayer] {
        &ENCODER_LAYERS
    }

    /// Weights as named tensors (`conv1.weight`, `conv1.bias`, …).
    pub fn params(&self) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        for i in 0..ENCODER_LAYERS.len() {
            p.insert(weight_name(i), self.weights[i].clone());
            p.insert(bias_name(i), self.biases[i].clone());
        }
        p
    }

    pub fn from_params(seed: u64, params: &ParamSet<f64>) -> Result<Self> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (i, l) in ENCODER_LAYERS.iter().enumerate() {
            let fetch = |name: String, shape: &[usize]| -> Result<Tensor<f64>> {
                let t = params.get(&name).ok_or_else(|| Error::Unknown { what: "encoder tensor", name: name.clone() })?;
                if t.shape() != shape {
                    return Err(Error::ShapeMismatch {
                        op: "encoder",
                        lhs_name: "stored",
                        lhs: t.shape().to_vec(),
                        rhs_name: "expected",
                        rhs: shape.to_vec(),
                    });
                }
                Ok(t.clone())
            };
            weights.push(fetch(weight_name(i), &[l.out_channels, l.in_channels, l.kernel, l.kernel])?);
            biases.push(fetch(bias_name(i), &[l.out_channels])?);
        }
        Ok(EncoderSpec { seed, weights, biases })
    }

    /// Runs the stack on `frames[n, 3, h, w]` inside `g` and returns one
    /// node per requested tap, in request order. Encoder weights enter as
    /// constants; gradients flow to `frames` only.
    pub fn encode_graph<T: Element>(&self, g: &mut Graph<T>, frames: Var, taps: &[Tap]) -> Result<Vec<Var>> {
        match g.shape(frames) {
            [_, 3, _, _] => {}
            s => return Err(Error::invalid("encode", format!("expected [n,3,h,w] frames, got {s:?}"))),
        }
        let depth = taps.iter().map(|t| t.depth()).max().unwrap_or(0);
        let mut outputs = vec![frames];
        let mut x = frames;
        for (i, l) in ENCODER_LAYERS.iter().enumerate().take(depth) {
            let w = g.constant(self.weights[i].cast());
            let b = g.constant(self.biases[i].cast());
            x = g.conv2d(x, w, Some(b), l.stride)?;
            x = g.relu(x)?;
            outputs.push(x);
        }
        Ok(taps.iter().map(|t| outputs[t.depth()]).collect())
    }
}

/// Encoder output for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T: Element = f32> {
    pub tap: Tap,
    /// `[channels, height, width]`.
    pub values: Tensor<T>,
}

impl<T: Element> FeatureMap<T> {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn channel(&self, m: usize) -> &[T] {
        let n = self.height() * self.width();
        &self.values.data()[m * n..(m + 1) * n]
    }
}

/// Encodes one frame at `tap`.
pub fn encode<T: Element>(frame: &Frame, tap: Tap, spec: &EncoderSpec) -> Result<FeatureMap<T>> {
    let mut g = Graph::<T>::new();
    let x = g.constant(frame.to_tensor());
    let out = spec.encode_graph(&mut g, x, &[tap])?[0];
    let shape = g.shape(out)[1..].to_vec();
    let values = g.value(out).clone().reshape(shape)?;
    Ok(FeatureMap { tap, values })
}

/// One flattened sample per channel, in channel order.
pub fn sample_channels<T: Element>(fm: &FeatureMap<T>) -> SampleSet<T> {
    let (c, n) = (fm.channels(), fm.height() * fm.width());
    let samples = fm.values.clone().reshape([c, n]).expect("feature map is [c, h, w]");
    SampleSet::new(fm.tap, samples).expect("encoder features are finite")
}
