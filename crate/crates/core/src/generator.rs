//! Recurrent feed-forward generator and its adversarial training.
//!
//! Each frame goes through the frozen encoder to the `gen-enc` tap, a
//! decoder that upsamples with transposed convolutions, and a recurrent
//! output layer `Y_t = sigmoid(W_x * dec_t + W_h * Y_{t-1} + b)` with
//! `Y_{-1} = 0`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{derive_seed, TrainConfig};
use crate::conv::same_extent;
use crate::encoders::{EncoderSpec, Tap};
use crate::error::{Error, Result};
use crate::evolvesync::{evolve_sync_graph, video_tensor, Bandwidths, KernelSpec, LossWeights};
use crate::graph::{Graph, Var};
use crate::mdan::{
    content_loss_graph, d_score_graph, d_update, stack, style_features_of, style_loss_graph, tv_prior_graph,
    DiscriminatorParams, Label, RealSampleSet, SourceFeatures,
};
use crate::optim::{AdamState, ParamSet, ParamVars};
use crate::tensor::{Element, Tensor};
use crate::video::{Frame, VideoSequence};

const G_SEED_STREAM: u64 = 2;
const D_SEED_STREAM: u64 = 3;
const WINDOW_SEED_STREAM: u64 = 4;

/// Losses above this abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Name of the recurrent weight on the previous output frame.
pub const RECURRENT_WEIGHT: &str = "rec.wh";

fn g_shapes() -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("bn1.beta", vec![48]),
        ("bn1.gamma", vec![48]),
        ("bn2.beta", vec![32]),
        ("bn2.gamma", vec![32]),
        ("bn3.beta", vec![16]),
        ("bn3.gamma", vec![16]),
        ("dec1.weight", vec![48, 48, 3, 3]),
        ("out.bias", vec![3]),
        ("out.weight", vec![3, 16, 3, 3]),
        ("rec.bias", vec![3]),
        (RECURRENT_WEIGHT, vec![3, 3, 3, 3]),
        ("rec.wx", vec![3, 3, 3, 3]),
        // Transposed-convolution weights use the layout of the convolution
        // they are the adjoint of: [in, out, k, k] from the decoder's view.
        ("up1.weight", vec![48, 32, 3, 3]),
        ("up2.weight", vec![32, 16, 3, 3]),
    ]
}

/// Decoder and recurrent output layer weights; the encoder is not included.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams<T: Element = f32> {
    params: ParamSet<T>,
}

impl<T: Element> GeneratorParams<T> {
    /// He-normal conv weights, unit BN scales, zero shifts and biases. With
    /// `recurrent` false the recurrent weight starts (and stays) at zero.
    pub fn init(seed: u64, recurrent: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape) in g_shapes() {
            let t: Tensor<f64> = if name.ends_with("gamma") {
                Tensor::ones(shape)
            } else if name.ends_with("beta") || name.ends_with("bias") {
                Tensor::zeros(shape)
            } else {
                let fan_in: usize = if name.starts_with("up") { shape[0] * 9 } else { shape[1..].iter().product() };
                let t = Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), &mut rng);
                if name == RECURRENT_WEIGHT && !recurrent {
                    t.map(|_| 0.0)
                } else {
                    t
                }
            };
            params.insert(name, t.cast());
        }
        GeneratorParams { params }
    }

    pub fn from_params(params: ParamSet<T>) -> Result<Self> {
        let expected = g_shapes();
        if params.len() != expected.len() {
            return Err(Error::invalid("generator", format!("expected {} tensors, got {}", expected.len(), params.len())));
        }
        for (name, shape) in expected {
            let t = params.get(name).ok_or_else(|| Error::Unknown { what: "generator tensor", name: name.into() })?;
            if t.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "generator",
                    lhs_name: "stored",
                    lhs: t.shape().to_vec(),
                    rhs_name: "expected",
                    rhs: shape,
                });
            }
        }
        Ok(GeneratorParams { params })
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Element>(&self) -> GeneratorParams<U> {
        GeneratorParams { params: self.params.cast() }
    }

    /// True when the recurrent weight has any nonzero entry.
    pub fn is_recurrent(&self) -> bool {
        self.params.get(RECURRENT_WEIGHT).is_some_and(|t| t.data().iter().any(|v| *v != T::zero()))
    }

    /// Registers the parameters; the recurrent weight is frozen unless
    /// `recurrent` is set.
    pub fn register(&self, g: &mut Graph<T>, trainable: bool, recurrent: bool) -> ParamVars {
        let frozen: &[&str] = if recurrent { &[] } else { &[RECURRENT_WEIGHT] };
        self.params.register(g, trainable, frozen)
    }
}

fn in_layer<V>(layer: &'static str, r: Result<V>) -> Result<V> {
    r.map_err(|e| match e {
        Error::NonFinite { op } => Error::NonFinite { op: format!("generator {layer} ({op})") },
        other => other,
    })
}

/// Output frames `[1, 3, h, w]` of the generator for `frames[n, 3, h, w]`.
pub fn g_forward_graph<T: Element>(
    g: &mut Graph<T>,
    spec: &EncoderSpec,
    p: &ParamVars,
    frames: Var,
) -> Result<Vec<Var>> {
    let shape = g.shape(frames).to_vec();
    let [n, 3, h, w] = shape[..] else {
        return Err(Error::invalid("generator", format!("expected [n,3,h,w] frames, got {shape:?}")));
    };
    let half = (same_extent(h, 2), same_extent(w, 2));
    let enc = in_layer("encoder", spec.encode_graph(g, frames, &[Tap::GenEnc]))?[0];
    let mut outputs: Vec<Var> = Vec::with_capacity(n);
    for t in 0..n {
        let mut x = if n == 1 { enc } else { g.narrow(enc, 0, t, 1)? };
        x = in_layer("dec1", g.conv2d(x, p.get("dec1.weight"), None, 1))?;
        x = in_layer("bn1", g.batch_norm(x, p.get("bn1.gamma"), p.get("bn1.beta")))?;
        x = in_layer("bn1", g.leaky_relu(x))?;
        x = in_layer("up1", g.conv2d_transpose(x, p.get("up1.weight"), None, 2, half))?;
        x = in_layer("bn2", g.batch_norm(x, p.get("bn2.gamma"), p.get("bn2.beta")))?;
        x = in_layer("bn2", g.leaky_relu(x))?;
        x = in_layer("up2", g.conv2d_transpose(x, p.get("up2.weight"), None, 2, (h, w)))?;
        x = in_layer("bn3", g.batch_norm(x, p.get("bn3.gamma"), p.get("bn3.beta")))?;
        x = in_layer("bn3", g.leaky_relu(x))?;
        let decoded = in_layer("out", g.conv2d(x, p.get("out.weight"), Some(p.get("out.bias")), 1))?;
        let mut pre = in_layer("recurrent", g.conv2d(decoded, p.get("rec.wx"), Some(p.get("rec.bias")), 1))?;
        if let Some(&prev) = outputs.last() {
            let fed_back = in_layer("recurrent", g.conv2d(prev, p.get(RECURRENT_WEIGHT), None, 1))?;
            pre = in_layer("recurrent", g.add(pre, fed_back))?;
        }
        outputs.push(in_layer("recurrent", g.sigmoid(pre))?);
    }
    Ok(outputs)
}

/// Generator output for every frame of `x`, before clamping.
pub fn g_forward<T: Element>(x: &VideoSequence, gp: &GeneratorParams<T>, spec: &EncoderSpec) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::<T>::new();
    let p = gp.register(&mut g, false, false);
    let frames = g.constant(video_tensor(&x.frames().iter().collect::<Vec<_>>())?);
    let ys = g_forward_graph(&mut g, spec, &p, frames)?;
    Ok(ys.into_iter().map(|v| g.value(v).clone()).collect())
}

/// [`g_forward`] clamped to `[0, 1]`.
pub fn stylize(x: &VideoSequence, gp: &GeneratorParams<f32>, spec: &EncoderSpec) -> Result<VideoSequence> {
    let frames = g_forward(x, gp, spec)?.iter().map(Frame::from_tensor_clamped).collect::<Result<Vec<_>>>()?;
    let mut v = VideoSequence::new(format!("{}-stylized", x.id), frames)?;
    v.fps = x.fps;
    Ok(v)
}

/// Objective components as scalar nodes; `tv` carries its weight.
#[derive(Clone, Debug)]
pub struct GanTerms {
    pub total: Var,
    pub style: Var,
    pub content: Var,
    pub evolve_sync: Var,
    pub tv: Var,
    /// Number of content-loss terms (paired frames in the window).
    pub content_terms: usize,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize)]
pub struct GanValues {
    pub total: f64,
    pub style: f64,
    pub content: f64,
    pub evolve_sync: f64,
    pub tv: f64,
    pub content_terms: usize,
}

impl GanTerms {
    pub fn values<T: Element>(&self, g: &Graph<T>) -> GanValues {
        let v = |x: Var| g.scalar(x).to_f64v();
        GanValues {
            total: v(self.total),
            style: v(self.style),
            content: v(self.content),
            evolve_sync: v(self.evolve_sync),
            tv: v(self.tv),
            content_terms: self.content_terms,
        }
    }
}

fn sum_or_zero<T: Element>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    match g.add_all(terms)? {
        Some(v) => Ok(v),
        None => Ok(g.constant(Tensor::zeros([1]))),
    }
}

/// Generator objective on synthesized frames `ys` (`[1, 3, h, w]` nodes):
/// per-frame style hinge (labelled real) and weighted TV prior, the
/// evolve-sync loss against the source features, and the content loss on
/// paired frames. `paired` lists `(position in ys, content features of the
/// real sample)`.
#[allow(clippy::too_many_arguments)]
pub fn gan_terms_graph<T: Element>(
    g: &mut Graph<T>,
    spec: &EncoderSpec,
    d: &ParamVars,
    source: &SourceFeatures<T>,
    ys: &[Var],
    paired: &[(usize, Tensor<T>)],
    w: &LossWeights,
    bandwidths: &mut Bandwidths,
) -> Result<GanTerms> {
    if source.len() != ys.len() {
        return Err(Error::invalid("gan objective", format!("{} source frames for {} outputs", source.len(), ys.len())));
    }
    let n = ys.len();
    let all = if n == 1 { ys[0] } else { g.concat(ys, 0)? };
    let taps = spec.encode_graph(g, all, &[Tap::Micro, Tap::Macro, Tap::Content])?;
    let frame = |g: &mut Graph<T>, v: Var, i: usize| if n == 1 { Ok(v) } else { g.narrow(v, 0, i, 1) };
    let mut y_levels = Vec::with_capacity(n);
    let (mut style, mut tv) = (Vec::new(), Vec::new());
    for (i, &y) in ys.iter().enumerate() {
        let levels = [frame(g, taps[0], i)?, frame(g, taps[1], i)?];
        let scores = d_score_graph(g, d, levels[1])?;
        style.push(style_loss_graph(g, scores, Label::Real)?);
        tv.push(tv_prior_graph(g, y)?);
        y_levels.push(levels);
    }
    let mut content = Vec::new();
    for (pos, real_content) in paired {
        if *pos >= n {
            return Err(Error::invalid("gan objective", format!("paired position {pos} outside a window of {n}")));
        }
        let yc = frame(g, taps[2], *pos)?;
        let rc = g.constant(real_content.clone());
        content.push(content_loss_graph(g, yc, rc)?);
    }
    let style_sum = sum_or_zero(g, &style)?;
    let content_sum = sum_or_zero(g, &content)?;
    let tv_sum = sum_or_zero(g, &tv)?;
    let tv_w = g.scale(tv_sum, w.omega)?;
    let x_levels = source.level_vars(g);
    let evolve_sync = match evolve_sync_graph(g, &x_levels, &y_levels, 0, w, bandwidths)? {
        Some(v) => v,
        None => g.constant(Tensor::zeros([1])),
    };
    let total = sum_or_zero(g, &[style_sum, tv_w, evolve_sync, content_sum])?;
    Ok(GanTerms { total, style: style_sum, content: content_sum, evolve_sync, tv: tv_w, content_terms: content.len() })
}

fn content_features<T: Element>(spec: &EncoderSpec, frame: &Frame) -> Result<Tensor<T>> {
    let mut g = Graph::<T>::new();
    let x = g.constant(frame.to_tensor());
    let c = spec.encode_graph(&mut g, x, &[Tap::Content])?[0];
    Ok(g.value(c).clone())
}

/// Generator objective of a whole synthesized video `y` against source `x`
/// and real samples aligned to the even frames of `x`, in f64.
pub fn gan_objective(
    x: &VideoSequence,
    y: &VideoSequence,
    real: &RealSampleSet,
    d: &DiscriminatorParams<f32>,
    spec: &EncoderSpec,
    w: &LossWeights,
    kernel: &KernelSpec,
) -> Result<GanValues> {
    real.check_aligned(x)?;
    if x.len() != y.len() || !x.frame(0).same_dims(y.frame(0)) {
        return Err(Error::invalid("gan objective", "source and output videos differ in length or frame size"));
    }
    let mut g = Graph::<f64>::new();
    let dv = d.cast::<f64>().register(&mut g, false);
    let source = SourceFeatures::compute(spec, &video_tensor(&x.frames().iter().collect::<Vec<_>>())?)?;
    let ys: Vec<Var> = y.frames().iter().map(|f| g.constant(f.to_tensor())).collect();
    let paired = real
        .frames()
        .iter()
        .map(|(i, f)| Ok((*i, content_features::<f64>(spec, f)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut bws = Bandwidths::live(*kernel);
    let terms = gan_terms_graph(&mut g, spec, &dv, &source, &ys, &paired, w, &mut bws)?;
    Ok(terms.values(&g))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GanRecord {
    pub iteration: usize,
    pub window_start: usize,
    pub total: f64,
    pub style: f64,
    pub content: f64,
    pub evolve_sync: f64,
    pub tv: f64,
    /// Discriminator objective before its last update in this iteration.
    pub d_loss: f64,
}

#[derive(Clone, Debug)]
pub struct GanRun {
    pub generator: GeneratorParams<f32>,
    pub discriminator: DiscriminatorParams<f32>,
    pub history: Vec<GanRecord>,
}

/// Training stopped on a non-finite or exploding loss.
#[derive(Debug, thiserror::Error)]
#[error("{error} (after {} recorded iterations)", history.len())]
pub struct GanAbort {
    pub error: Error,
    pub history: Vec<GanRecord>,
}

impl From<Error> for GanAbort {
    fn from(error: Error) -> Self {
        GanAbort { error, history: Vec::new() }
    }
}

/// Even window starts `s` with `s + batch <= len`.
pub fn window_starts(len: usize, batch: usize) -> Vec<usize> {
    (0..len).step_by(2).filter(|&s| s + batch <= len).collect()
}

pub fn train_gan(
    x: &VideoSequence,
    real: &RealSampleSet,
    style: &Frame,
    spec: &EncoderSpec,
    cfg: &TrainConfig,
) -> std::result::Result<GanRun, GanAbort> {
    train_gan_with(x, real, style, spec, cfg, |_| {})
}

/// Alternates one generator step and `cfg.gan.d_steps` discriminator steps
/// per iteration on a random window of consecutive frames. The
/// discriminator starts from scratch and treats the style image and the
/// real samples as real, generator outputs as fake.
pub fn train_gan_with(
    x: &VideoSequence,
    real: &RealSampleSet,
    style: &Frame,
    spec: &EncoderSpec,
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&GanRecord),
) -> std::result::Result<GanRun, GanAbort> {
    cfg.validate()?;
    real.check_aligned(x)?;
    let batch = cfg.gan.batch;
    let starts = window_starts(x.len(), batch);
    if starts.is_empty() {
        return Err(Error::invalid("train", format!("video has {} frames, a window needs {batch}", x.len())).into());
    }

    let mut gp = GeneratorParams::<f32>::init(derive_seed(cfg.seed, G_SEED_STREAM), cfg.gan.recurrent);
    let mut d = DiscriminatorParams::<f32>::init(derive_seed(cfg.seed, D_SEED_STREAM));
    let mut g_opt = AdamState::new(cfg.adam);
    let mut d_opt = AdamState::new(cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, WINDOW_SEED_STREAM));

    let frames: Vec<Tensor<f32>> = x.frames().iter().map(|f| f.to_tensor()).collect();
    let source = SourceFeatures::compute(spec, &stack(&frames.iter().collect::<Vec<_>>())?)?;
    let real_content = real
        .frames()
        .iter()
        .map(|(_, f)| content_features::<f32>(spec, f))
        .collect::<Result<Vec<_>>>()?;
    let real_frames: Vec<Tensor<f32>> = real.frames().iter().map(|(_, f)| f.to_tensor()).collect();
    let real_style = style_features_of(spec, &stack(&real_frames.iter().collect::<Vec<_>>())?)?;
    let style_feat = style_features_of(spec, &style.to_tensor::<f32>())?.remove(0);

    let mut history = Vec::with_capacity(cfg.gan.iterations);
    for it in 0..cfg.gan.iterations {
        let start = starts[rng.random_range(0..starts.len())];
        let window = start..start + batch;
        let step = (|| -> Result<GanRecord> {
            let mut g = Graph::<f32>::new();
            let pv = gp.register(&mut g, true, cfg.gan.recurrent);
            let dv = d.register(&mut g, false);
            let xw = g.constant(stack(&frames[window.clone()].iter().collect::<Vec<_>>())?);
            let ys = g_forward_graph(&mut g, spec, &pv, xw)?;
            let win_source = SourceFeatures {
                levels: source.levels[window.clone()].to_vec(),
                content: source.content[window.clone()].to_vec(),
            };
            let paired: Vec<(usize, Tensor<f32>)> =
                window.clone().filter(|i| i % 2 == 0).map(|i| (i - start, real_content[i / 2].clone())).collect();
            let mut bws = Bandwidths::live(cfg.kernel);
            let terms = gan_terms_graph(&mut g, spec, &dv, &win_source, &ys, &paired, &cfg.weights, &mut bws)?;
            let v = terms.values(&g);
            if !v.total.is_finite() || v.total > DIVERGENCE_LIMIT {
                return Err(Error::Diverged { stage: "train", iteration: it, detail: format!("objective {}", v.total) });
            }
            let grads = g.backward(terms.total)?;
            g_opt.step(&mut gp.params, &pv.grads(&grads))?;

            let outputs: Vec<Tensor<f32>> = ys.iter().map(|&y| g.value(y).clone()).collect();
            drop(g);
            let mut d_loss = 0.0;
            if cfg.gan.d_steps > 0 {
                let fake = style_features_of(spec, &stack(&outputs.iter().collect::<Vec<_>>())?)?;
                let mut reals = vec![style_feat.clone()];
                reals.extend(window.clone().filter(|i| i % 2 == 0).map(|i| real_style[i / 2].clone()));
                for _ in 0..cfg.gan.d_steps {
                    d_loss = d_update(&mut d, &mut d_opt, &reals, &fake)?;
                }
            }
            if !d_loss.is_finite() || d_loss > DIVERGENCE_LIMIT {
                return Err(Error::Diverged { stage: "train", iteration: it, detail: format!("discriminator {d_loss}") });
            }
            Ok(GanRecord {
                iteration: it,
                window_start: start,
                total: v.total,
                style: v.style,
                content: v.content,
                evolve_sync: v.evolve_sync,
                tv: v.tv,
                d_loss,
            })
        })();
        match step {
            Ok(record) => {
                on_record(&record);
                history.push(record);
            }
            Err(e) => {
                let error = match e {
                    Error::NonFinite { .. } => Error::Diverged { stage: "train", iteration: it, detail: e.to_string() },
                    other => other,
                };
                return Err(GanAbort { error, history });
            }
        }
    }
    Ok(GanRun { generator: gp, discriminator: d, history })
}

/// Mean of the first and last `k` entries of `values`.
pub fn smoothed_ends(values: &[f64], k: usize) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let k = k.clamp(1, values.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&values[..k]), mean(&values[values.len() - k..])))
}
