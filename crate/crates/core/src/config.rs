//! Training configuration and its text format.
//!
//! The format is UTF-8 `key = value` lines grouped under `[section]`
//! headers; `#` starts a comment. Unknown sections and keys are errors so a
//! misspelled hyperparameter never silently falls back to its default.
//!
//! ```text
//! [loss]
//! delta = 3
//! alpha_macro = 100
//! bandwidth = median   # or a positive number
//! ```

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolvesync::{Bandwidth, KernelSpec, LossWeights};
use crate::optim::AdamConfig;

/// Real-sample synthesis (pixel-space deconvolution) settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Pixel iterations per segment.
    pub iterations: usize,
    /// Frames optimized jointly per segment.
    pub segment: usize,
    /// Trailing frames of the previous segment held fixed inside the
    /// evolve-sync term of the next one.
    pub anchors: usize,
    /// Discriminator updates after each pixel update.
    pub d_steps: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { iterations: 3000, segment: 3, anchors: 2, d_steps: 1 }
    }
}

/// Adversarial generator training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    pub iterations: usize,
    /// Consecutive frames per training window.
    pub batch: usize,
    /// Discriminator updates after each generator update.
    pub d_steps: usize,
    /// When false the recurrent weight on the previous output is pinned to zero.
    pub recurrent: bool,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig { iterations: 20000, batch: 3, d_steps: 1, recurrent: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub encoder_seed: u64,
    pub weights: LossWeights,
    pub kernel: KernelSpec,
    pub adam: AdamConfig,
    pub synth: SynthConfig,
    pub gan: GanConfig,
}

/// Independent seed for one named consumer of a run's base seed
/// (splitmix64 finalizer over `base ^ stream`).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = (base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn parse_value<V: FromStr>(value: &str, line: usize, key: &str) -> Result<V> {
    value.parse().map_err(|_| Error::Config { line, msg: format!("invalid value `{value}` for `{key}`") })
}

impl TrainConfig {
    /// Parses a config file on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config { line: line_no, msg: format!("malformed section header `{line}`") })?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config { line: line_no, msg: format!("expected `key = value`, got `{line}`") })?;
            cfg.set_at(&section, key.trim(), value.trim(), line_no)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one `section.key`, as a command-line override would.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        self.set_at(section, key, value, 0)
    }

    fn set_at(&mut self, section: &str, key: &str, value: &str, line: usize) -> Result<()> {
        match (section, key) {
            ("run", "seed") => self.seed = parse_value(value, line, key)?,
            ("run", "encoder_seed") => self.encoder_seed = parse_value(value, line, key)?,
            ("loss", "delta") => self.weights.delta = parse_value(value, line, key)?,
            ("loss", "alpha_micro") => self.weights.alpha_micro = parse_value(value, line, key)?,
            ("loss", "alpha_macro") => self.weights.alpha_macro = parse_value(value, line, key)?,
            ("loss", "omega") => self.weights.omega = parse_value(value, line, key)?,
            ("loss", "bandwidth") => {
                self.kernel.bandwidth = if value == "median" {
                    Bandwidth::Median
                } else {
                    Bandwidth::Fixed(parse_value(value, line, key)?)
                }
            }
            ("adam", "lr") => self.adam.lr = parse_value(value, line, key)?,
            ("adam", "beta1") => self.adam.beta1 = parse_value(value, line, key)?,
            ("adam", "beta2") => self.adam.beta2 = parse_value(value, line, key)?,
            ("adam", "eps") => self.adam.eps = parse_value(value, line, key)?,
            ("synth", "iterations") => self.synth.iterations = parse_value(value, line, key)?,
            ("synth", "segment") => self.synth.segment = parse_value(value, line, key)?,
            ("synth", "anchors") => self.synth.anchors = parse_value(value, line, key)?,
            ("synth", "d_steps") => self.synth.d_steps = parse_value(value, line, key)?,
            ("train", "iterations") => self.gan.iterations = parse_value(value, line, key)?,
            ("train", "batch") => self.gan.batch = parse_value(value, line, key)?,
            ("train", "d_steps") => self.gan.d_steps = parse_value(value, line, key)?,
            ("train", "recurrent") => self.gan.recurrent = parse_value(value, line, key)?,
            ("run" | "loss" | "adam" | "synth" | "train", _) => {
                return Err(Error::Config { line, msg: format!("unknown key `{key}` in [{section}]") })
            }
            _ => return Err(Error::Config { line, msg: format!("unknown section [{section}]") }),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config { line: 0, msg });
        self.weights.validate()?;
        self.kernel.validate()?;
        if !(self.adam.lr >= 0.0 && (0.0..1.0).contains(&self.adam.beta1) && (0.0..1.0).contains(&self.adam.beta2)) {
            return bad(format!("invalid ADAM settings {:?}", self.adam));
        }
        if self.adam.eps.is_nan() || self.adam.eps <= 0.0 {
            return bad("adam.eps must be > 0".into());
        }
        if self.synth.segment == 0 {
            return bad("synth.segment must be >= 1".into());
        }
        if self.gan.batch < 2 {
            return bad(format!("train.batch must be >= 2, got {}", self.gan.batch));
        }
        Ok(())
    }

    /// Text form that [`TrainConfig::parse`] reads back to an equal value.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let bw = match self.kernel.bandwidth {
            Bandwidth::Median => "median".to_string(),
            Bandwidth::Fixed(b) => format!("{b:?}"),
        };
        let w = &self.weights;
        let _ = writeln!(s, "[run]\nseed = {}\nencoder_seed = {}\n", self.seed, self.encoder_seed);
        let _ = writeln!(
            s,
            "[loss]\ndelta = {}\nalpha_micro = {:?}\nalpha_macro = {:?}\nomega = {:?}\nbandwidth = {bw}\n",
            w.delta, w.alpha_micro, w.alpha_macro, w.omega
        );
        let a = &self.adam;
        let _ = writeln!(s, "[adam]\nlr = {:?}\nbeta1 = {:?}\nbeta2 = {:?}\neps = {:?}\n", a.lr, a.beta1, a.beta2, a.eps);
        let sy = &self.synth;
        let _ = writeln!(
            s,
            "[synth]\niterations = {}\nsegment = {}\nanchors = {}\nd_steps = {}\n",
            sy.iterations, sy.segment, sy.anchors, sy.d_steps
        );
        let gn = &self.gan;
        let _ = write!(
            s,
            "[train]\niterations = {}\nbatch = {}\nd_steps = {}\nrecurrent = {}\n",
            gn.iterations, gn.batch, gn.d_steps, gn.recurrent
        );
        s
    }
}
