//! The patch discriminator and pixel-space synthesis of real samples.
//!
//! The discriminator scores every location of a style-tap feature map;
//! each score judges the receptive field behind it. Real samples are made
//! by descending the combined style, content, total-variation and
//! evolve-sync objective directly in pixel space on every other source
//! frame, while the discriminator keeps learning to tell them from the
//! style image.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{derive_seed, TrainConfig};
use crate::encoders::{EncoderSpec, FeatureMap, Tap};
use crate::error::{Error, Result};
use crate::evolvesync::{evolve_sync_graph, Bandwidths, LossWeights};
use crate::graph::{Graph, Var};
use crate::optim::{AdamState, ParamSet, ParamVars};
use crate::tensor::{Element, Tensor};
use crate::video::{Frame, VideoSequence};

/// Channels of the discriminator's hidden layers.
pub const D_WIDTH: usize = 32;

const D_SEED_STREAM: u64 = 1;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    /// Hinge target: real scores are pushed above +1, fake ones below −1.
    pub fn sign(self) -> f64 {
        match self {
            Label::Real => 1.0,
            Label::Fake => -1.0,
        }
    }
}

/// conv3×3 → BN → LReLU → conv3×3 → BN → LReLU → conv1×1 score map.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams<T: Element = f32> {
    params: ParamSet<T>,
}

fn d_shapes() -> Vec<(&'static str, Vec<usize>)> {
    let (c, w) = (Tap::STYLE.channels(), D_WIDTH);
    vec![
        ("bn1.beta", vec![w]),
        ("bn1.gamma", vec![w]),
        ("bn2.beta", vec![w]),
        ("bn2.gamma", vec![w]),
        ("conv1.weight", vec![w, c, 3, 3]),
        ("conv2.weight", vec![w, w, 3, 3]),
        ("score.bias", vec![1]),
        ("score.weight", vec![1, w, 1, 1]),
    ]
}

impl<T: Element> DiscriminatorParams<T> {
    /// He-normal conv weights, unit BN scales, zero shifts and bias. The
    /// values are drawn in f64, so every element type starts from the same
    /// network.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape) in d_shapes() {
            let t: Tensor<f64> = if name.ends_with("weight") {
                let fan_in: usize = shape[1..].iter().product();
                Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), &mut rng)
            } else if name.ends_with("gamma") {
                Tensor::ones(shape)
            } else {
                Tensor::zeros(shape)
            };
            params.insert(name, t.cast());
        }
        DiscriminatorParams { params }
    }

    pub fn from_params(params: ParamSet<T>) -> Result<Self> {
        let expected = d_shapes();
        if params.len() != expected.len() {
            return Err(Error::invalid("discriminator", format!("expected {} tensors, got {}", expected.len(), params.len())));
        }
        for (name, shape) in expected {
            let t = params.get(name).ok_or_else(|| Error::Unknown { what: "discriminator tensor", name: name.into() })?;
            if t.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "discriminator",
                    lhs_name: "stored",
                    lhs: t.shape().to_vec(),
                    rhs_name: "expected",
                    rhs: shape,
                });
            }
        }
        Ok(DiscriminatorParams { params })
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Element>(&self) -> DiscriminatorParams<U> {
        DiscriminatorParams { params: self.params.cast() }
    }

    pub fn register(&self, g: &mut Graph<T>, trainable: bool) -> ParamVars {
        self.params.register(g, trainable, &[])
    }
}

/// Score map `[n, 1, h, w]` of style-tap features `[n, 32, h, w]`.
pub fn d_score_graph<T: Element>(g: &mut Graph<T>, d: &ParamVars, features: Var) -> Result<Var> {
    let c = g.shape(features).get(1).copied().unwrap_or(0);
    if g.shape(features).len() != 4 || c != Tap::STYLE.channels() {
        return Err(Error::invalid(
            "d_score",
            format!("expected style-tap features [n,{},h,w], got {:?}", Tap::STYLE.channels(), g.shape(features)),
        ));
    }
    let mut x = features;
    for layer in ["1", "2"] {
        x = g.conv2d(x, d.get(&format!("conv{layer}.weight")), None, 1)?;
        x = g.batch_norm(x, d.get(&format!("bn{layer}.gamma")), d.get(&format!("bn{layer}.beta")))?;
        x = g.leaky_relu(x)?;
    }
    g.conv2d(x, d.get("score.weight"), Some(d.get("score.bias")), 1)
}

/// `mean_j max(0, 1 - sign(label) * s_j)`.
pub fn style_loss_graph<T: Element>(g: &mut Graph<T>, scores: Var, label: Label) -> Result<Var> {
    let signed = g.scale(scores, -label.sign())?;
    let margin = g.add_scalar(signed, 1.0)?;
    let hinge = g.relu(margin)?;
    g.mean(hinge)
}

/// Mean squared difference of two feature maps.
pub fn content_loss_graph<T: Element>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.square(d)?;
    g.mean(sq)
}

/// Sum of squared horizontal and vertical forward differences of `x[n, c, h, w]`.
pub fn tv_prior_graph<T: Element>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::invalid("tv_prior", format!("expected [n,c,h,w], got {shape:?}")));
    }
    let mut parts = Vec::new();
    for axis in [3, 2] {
        let n = shape[axis];
        if n < 2 {
            continue;
        }
        let ahead = g.narrow(x, axis, 1, n - 1)?;
        let behind = g.narrow(x, axis, 0, n - 1)?;
        let d = g.sub(ahead, behind)?;
        let sq = g.square(d)?;
        parts.push(g.sum(sq)?);
    }
    match g.add_all(&parts)? {
        Some(v) => Ok(v),
        None => Ok(g.constant(Tensor::zeros([1]))),
    }
}

/// Discriminator objective: hinge loss of every real batch entry labelled
/// real plus every fake one labelled fake. Each feature map is scored on its
/// own, so batch statistics never mix real and fake samples.
pub fn d_objective_graph<T: Element>(g: &mut Graph<T>, d: &ParamVars, real: &[Var], fake: &[Var]) -> Result<Var> {
    let mut terms = Vec::new();
    for (set, label) in [(real, Label::Real), (fake, Label::Fake)] {
        for &f in set {
            let s = d_score_graph(g, d, f)?;
            terms.push(style_loss_graph(g, s, label)?);
        }
    }
    g.add_all(&terms)?.ok_or_else(|| Error::invalid("d_update", "no samples"))
}

/// One ADAM step of the discriminator on style-tap features (`[1, 32, h, w]`
/// each). Returns the objective before the step.
pub fn d_update<T: Element>(
    d: &mut DiscriminatorParams<T>,
    opt: &mut AdamState<T>,
    real: &[Tensor<T>],
    fake: &[Tensor<T>],
) -> Result<f64> {
    let mut g = Graph::<T>::new();
    let vars = d.register(&mut g, true);
    let real: Vec<Var> = real.iter().map(|t| g.constant(t.clone())).collect();
    let fake: Vec<Var> = fake.iter().map(|t| g.constant(t.clone())).collect();
    let loss = d_objective_graph(&mut g, &vars, &real, &fake)?;
    let value = g.scalar(loss).to_f64v();
    let grads = g.backward(loss)?;
    opt.step(&mut d.params, &vars.grads(&grads))?;
    Ok(value)
}

fn style_features<T: Element>(fm: &FeatureMap<T>) -> Result<Tensor<T>> {
    if fm.tap != Tap::STYLE {
        return Err(Error::invalid("d_score", format!("features must come from the style tap, got {}", fm.tap)));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(fm.values.shape());
    fm.values.clone().reshape(shape)
}

/// Score map `[h, w]` of one style-tap feature map.
pub fn d_score<T: Element>(features: &FeatureMap<T>, d: &DiscriminatorParams<T>) -> Result<Tensor<T>> {
    let mut g = Graph::<T>::new();
    let vars = d.register(&mut g, false);
    let f = g.constant(style_features(features)?);
    let s = d_score_graph(&mut g, &vars, f)?;
    g.value(s).clone().reshape([features.height(), features.width()])
}

pub fn style_loss<T: Element>(scores: &Tensor<T>, label: Label) -> f64 {
    let mut g = Graph::<T>::new();
    let s = g.constant(scores.clone());
    let l = style_loss_graph(&mut g, s, label).expect("hinge of finite scores is finite");
    g.scalar(l).to_f64v()
}

pub fn content_loss<T: Element>(fa: &FeatureMap<T>, fb: &FeatureMap<T>) -> Result<f64> {
    if fa.values.shape() != fb.values.shape() {
        return Err(Error::ShapeMismatch {
            op: "content_loss",
            lhs_name: "a",
            lhs: fa.values.shape().to_vec(),
            rhs_name: "b",
            rhs: fb.values.shape().to_vec(),
        });
    }
    let mut g = Graph::<T>::new();
    let a = g.constant(fa.values.clone());
    let b = g.constant(fb.values.clone());
    let l = content_loss_graph(&mut g, a, b)?;
    Ok(g.scalar(l).to_f64v())
}

pub fn tv_prior(frame: &Frame) -> f64 {
    let mut g = Graph::<f64>::new();
    let x = g.constant(frame.to_tensor());
    let l = tv_prior_graph(&mut g, x).expect("frames are [1,3,h,w]");
    g.scalar(l)
}

/// Stacks `[1, c, h, w]` tensors into `[n, c, h, w]`.
pub fn stack<T: Element>(frames: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = frames.first().ok_or_else(|| Error::invalid("stack", "nothing to stack"))?;
    let mut shape = first.shape().to_vec();
    shape[0] = frames.iter().map(|t| t.shape()[0]).sum();
    let data = frames.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(shape, data)
}

/// Splits `[n, c, h, w]` into `n` tensors `[1, c, h, w]`.
pub fn unstack<T: Element>(t: &Tensor<T>) -> Vec<Tensor<T>> {
    let n = t.shape()[0];
    let per = t.len() / n;
    let mut shape = t.shape().to_vec();
    shape[0] = 1;
    t.data()
        .chunks(per)
        .map(|c| Tensor::new(shape.clone(), c.to_vec()).expect("chunk matches shape"))
        .collect()
}

/// Per-frame encoder features that stay fixed while pixels are optimized:
/// micro and macro levels for the evolve-sync term, and content features.
#[derive(Clone, Debug)]
pub struct SourceFeatures<T: Element> {
    pub levels: Vec<[Tensor<T>; 2]>,
    pub content: Vec<Tensor<T>>,
}

impl<T: Element> SourceFeatures<T> {
    pub fn compute(spec: &EncoderSpec, frames: &Tensor<T>) -> Result<Self> {
        let mut g = Graph::<T>::new();
        let x = g.constant(frames.clone());
        let taps = spec.encode_graph(&mut g, x, &[Tap::Micro, Tap::Macro, Tap::Content])?;
        let split = |g: &Graph<T>, v: Var| unstack(g.value(v));
        let micro = split(&g, taps[0]);
        let macro_ = split(&g, taps[1]);
        let content = split(&g, taps[2]);
        let levels = micro.into_iter().zip(macro_).map(|(a, b)| [a, b]).collect();
        Ok(SourceFeatures { levels, content })
    }

    pub fn len(&self) -> usize {
        self.content.len()
    }

    pub fn is_empty(&self) -> bool {
        self.content.is_empty()
    }

    pub fn level_vars(&self, g: &mut Graph<T>) -> Vec<[Var; 2]> {
        self.levels.iter().map(|[a, b]| [g.constant(a.clone()), g.constant(b.clone())]).collect()
    }
}

/// Objective components, each a scalar node; `tv` already carries its weight.
#[derive(Copy, Clone, Debug)]
pub struct DeconvTerms {
    pub total: Var,
    pub style: Var,
    pub content: Var,
    pub evolve_sync: Var,
    pub tv: Var,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize)]
pub struct DeconvValues {
    pub total: f64,
    pub style: f64,
    pub content: f64,
    pub evolve_sync: f64,
    pub tv: f64,
}

impl DeconvTerms {
    pub fn values<T: Element>(&self, g: &Graph<T>) -> DeconvValues {
        let v = |x: Var| g.scalar(x).to_f64v();
        DeconvValues {
            total: v(self.total),
            style: v(self.style),
            content: v(self.content),
            evolve_sync: v(self.evolve_sync),
            tv: v(self.tv),
        }
    }
}

fn sum_or_zero<T: Element>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    match g.add_all(terms)? {
        Some(v) => Ok(v),
        None => Ok(g.constant(Tensor::zeros([1]))),
    }
}

/// Pixel-space objective of one segment.
///
/// `source` holds the features of the anchor source frames followed by the
/// segment's source frames. `anchors` are the already synthesized frames
/// `[a, 3, h, w]` kept constant; `pixels` are the `[f, 3, h, w]` frames being
/// optimized. The style, content and prior terms cover the free frames;
/// the evolve-sync term spans anchors and free frames.
#[allow(clippy::too_many_arguments)]
pub fn deconv_objective_graph<T: Element>(
    g: &mut Graph<T>,
    spec: &EncoderSpec,
    d: &ParamVars,
    source: &SourceFeatures<T>,
    anchors: Option<Var>,
    pixels: Var,
    w: &LossWeights,
    bandwidths: &mut Bandwidths,
) -> Result<DeconvTerms> {
    let n_anchor = anchors.map_or(0, |a| g.shape(a)[0]);
    let n_free = g.shape(pixels)[0];
    let n_all = n_anchor + n_free;
    if source.len() != n_all {
        return Err(Error::invalid(
            "deconv objective",
            format!("{} source frames for {n_anchor} anchors and {n_free} free frames", source.len()),
        ));
    }
    let all = match anchors {
        Some(a) => g.concat(&[a, pixels], 0)?,
        None => pixels,
    };
    let taps = spec.encode_graph(g, all, &[Tap::Micro, Tap::Macro, Tap::Content])?;
    let frame = |g: &mut Graph<T>, v: Var, i: usize| if n_all == 1 { Ok(v) } else { g.narrow(v, 0, i, 1) };

    let mut y_levels = Vec::with_capacity(n_all);
    for i in 0..n_all {
        y_levels.push([frame(g, taps[0], i)?, frame(g, taps[1], i)?]);
    }
    let (mut style, mut content, mut tv) = (Vec::new(), Vec::new(), Vec::new());
    for k in 0..n_free {
        let i = n_anchor + k;
        let scores = d_score_graph(g, d, y_levels[i][1])?;
        style.push(style_loss_graph(g, scores, Label::Real)?);
        let yc = frame(g, taps[2], i)?;
        let xc = g.constant(source.content[i].clone());
        content.push(content_loss_graph(g, xc, yc)?);
        let px = if n_free == 1 { pixels } else { g.narrow(pixels, 0, k, 1)? };
        tv.push(tv_prior_graph(g, px)?);
    }
    let style = sum_or_zero(g, &style)?;
    let content = sum_or_zero(g, &content)?;
    let tv_sum = sum_or_zero(g, &tv)?;
    let tv = g.scale(tv_sum, w.omega)?;
    let x_levels = source.level_vars(g);
    let es = evolve_sync_graph(g, &x_levels, &y_levels, n_anchor, w, bandwidths)?;
    let evolve_sync = match es {
        Some(v) => v,
        None => g.constant(Tensor::zeros([1])),
    };
    let total = sum_or_zero(g, &[style, content, evolve_sync, tv])?;
    Ok(DeconvTerms { total, style, content, evolve_sync, tv })
}

/// Source indices that receive real samples: `0, 2, 4, …`.
pub fn paired_indices(len: usize) -> Vec<usize> {
    (0..len).step_by(2).collect()
}

/// Consecutive runs of `segment` positions covering `0..count`.
pub fn segment_partition(count: usize, segment: usize) -> Vec<Range<usize>> {
    (0..count).step_by(segment.max(1)).map(|s| s..(s + segment).min(count)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthesisRecord {
    pub segment: usize,
    pub iteration: usize,
    pub total: f64,
    pub style: f64,
    pub content: f64,
    pub evolve_sync: f64,
    pub tv: f64,
    /// Discriminator objective before its last update in this iteration.
    pub d_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegmentStats {
    /// Source indices optimized in this segment.
    pub frames: Vec<usize>,
    /// Source indices of the anchored frames.
    pub anchors: Vec<usize>,
    /// Objective before the first update.
    pub initial: DeconvValues,
    /// Objective at the final iterate, under the final discriminator.
    pub last: DeconvValues,
}

/// Synthesized real samples keyed by source frame index.
#[derive(Clone, Debug, PartialEq)]
pub struct RealSampleSet {
    frames: Vec<(usize, Frame)>,
    stats: Vec<SegmentStats>,
}

impl RealSampleSet {
    /// Indices must be `0, 2, 4, …` with no gaps.
    pub fn new(frames: Vec<(usize, Frame)>, stats: Vec<SegmentStats>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::invalid("real samples", "no frames"));
        }
        for (k, (idx, f)) in frames.iter().enumerate() {
            if *idx != 2 * k {
                return Err(Error::invalid("real samples", format!("expected source index {}, found {idx}", 2 * k)));
            }
            if !f.same_dims(&frames[0].1) {
                return Err(Error::invalid("real samples", format!("frame {idx} has different dimensions")));
            }
        }
        Ok(RealSampleSet { frames, stats })
    }

    pub fn frames(&self) -> &[(usize, Frame)] {
        &self.frames
    }

    pub fn indices(&self) -> Vec<usize> {
        self.frames.iter().map(|(i, _)| *i).collect()
    }

    pub fn get(&self, source_index: usize) -> Option<&Frame> {
        if !source_index.is_multiple_of(2) {
            return None;
        }
        self.frames.get(source_index / 2).map(|(_, f)| f)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn stats(&self) -> &[SegmentStats] {
        &self.stats
    }

    /// Checks that these samples line up with the even frames of `x`.
    pub fn check_aligned(&self, x: &VideoSequence) -> Result<()> {
        let expected = paired_indices(x.len());
        let found = self.indices();
        if let Some(k) = (0..expected.len().max(found.len())).find(|&k| expected.get(k) != found.get(k)) {
            let what = match (expected.get(k), found.get(k)) {
                (Some(e), Some(f)) => format!("expected source index {e}, found {f}"),
                (Some(e), None) => format!("missing real sample for source index {e}"),
                (None, Some(f)) => format!("unexpected real sample for source index {f}"),
                (None, None) => unreachable!(),
            };
            return Err(Error::invalid("real samples", what));
        }
        if !self.frames[0].1.same_dims(x.frame(0)) {
            return Err(Error::invalid("real samples", "frame dimensions differ from the source video"));
        }
        Ok(())
    }

    pub fn initial_objective(&self) -> DeconvValues {
        sum_values(self.stats.iter().map(|s| s.initial))
    }

    pub fn final_objective(&self) -> DeconvValues {
        sum_values(self.stats.iter().map(|s| s.last))
    }
}

fn sum_values(it: impl Iterator<Item = DeconvValues>) -> DeconvValues {
    it.fold(DeconvValues::default(), |a, b| DeconvValues {
        total: a.total + b.total,
        style: a.style + b.style,
        content: a.content + b.content,
        evolve_sync: a.evolve_sync + b.evolve_sync,
        tv: a.tv + b.tv,
    })
}

#[derive(Clone, Debug)]
pub struct SynthesisOutput {
    pub real: RealSampleSet,
    pub log: Vec<SynthesisRecord>,
    pub discriminator: DiscriminatorParams<f32>,
}

/// Style-tap features `[1, 32, h, w]` of each frame of `frames[n, 3, h, w]`.
pub fn style_features_of<T: Element>(spec: &EncoderSpec, frames: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::<T>::new();
    let x = g.constant(frames.clone());
    let f = spec.encode_graph(&mut g, x, &[Tap::STYLE])?[0];
    Ok(unstack(g.value(f)))
}

fn diverged(stage: &'static str, iteration: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::Diverged { stage, iteration, detail: e.to_string() },
        other => other,
    }
}

pub fn synthesize_real_samples(
    x: &VideoSequence,
    style: &Frame,
    spec: &EncoderSpec,
    cfg: &TrainConfig,
) -> Result<SynthesisOutput> {
    synthesize_real_samples_with(x, style, spec, cfg, |_| {})
}

/// Synthesizes real samples for the even frames of `x`, calling `on_record`
/// after every iteration.
pub fn synthesize_real_samples_with(
    x: &VideoSequence,
    style: &Frame,
    spec: &EncoderSpec,
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&SynthesisRecord),
) -> Result<SynthesisOutput> {
    cfg.validate()?;
    let paired = paired_indices(x.len());
    let mut y: Vec<Tensor<f32>> = paired.iter().map(|&i| x.frame(i).to_tensor()).collect();
    let sources = y.clone();

    let mut d = DiscriminatorParams::<f32>::init(derive_seed(cfg.seed, D_SEED_STREAM));
    let mut d_opt = AdamState::new(cfg.adam);
    let style_feat = style_features_of(spec, &style.to_tensor::<f32>())?;
    let mut log = Vec::new();
    let mut stats = Vec::new();

    for (seg_index, seg) in segment_partition(paired.len(), cfg.synth.segment).into_iter().enumerate() {
        let anchor_range = seg.start.saturating_sub(cfg.synth.anchors)..seg.start;
        let src_refs: Vec<&Tensor<f32>> = sources[anchor_range.start..seg.end].iter().collect();
        let source = SourceFeatures::compute(spec, &stack(&src_refs)?)?;
        let anchors = if anchor_range.is_empty() {
            None
        } else {
            Some(stack(&y[anchor_range.clone()].iter().collect::<Vec<_>>())?)
        };
        let mut pixels = ParamSet::new();
        pixels.insert("pixels", stack(&y[seg.clone()].iter().collect::<Vec<_>>())?);
        let mut pixel_opt = AdamState::new(cfg.adam);

        let evaluate = |pixels: &ParamSet<f32>, d: &DiscriminatorParams<f32>, track: bool| {
            let mut g = Graph::<f32>::new();
            let pv = pixels.register(&mut g, track, &[]);
            let dv = d.register(&mut g, false);
            let av = anchors.as_ref().map(|a| g.constant(a.clone()));
            let mut bws = Bandwidths::live(cfg.kernel);
            let terms = deconv_objective_graph(&mut g, spec, &dv, &source, av, pv.get("pixels"), &cfg.weights, &mut bws)?;
            Ok::<_, Error>((g, pv, terms))
        };

        let mut initial = None;
        for it in 0..cfg.synth.iterations {
            let (g, pv, terms) = evaluate(&pixels, &d, true).map_err(diverged("gen-real", it))?;
            let values = terms.values(&g);
            if !values.total.is_finite() {
                return Err(Error::Diverged { stage: "gen-real", iteration: it, detail: "objective".into() });
            }
            initial.get_or_insert(values);
            let grads = g.backward(terms.total).map_err(diverged("gen-real", it))?;
            pixel_opt.step(&mut pixels, &pv.grads(&grads))?;
            drop(g);

            let mut d_loss = 0.0;
            if cfg.synth.d_steps > 0 {
                let fake = style_features_of(spec, pixels.get("pixels").expect("registered"))
                    .map_err(diverged("gen-real", it))?;
                for _ in 0..cfg.synth.d_steps {
                    d_loss = d_update(&mut d, &mut d_opt, &style_feat, &fake).map_err(diverged("gen-real", it))?;
                }
            }
            let record = SynthesisRecord {
                segment: seg_index,
                iteration: it,
                total: values.total,
                style: values.style,
                content: values.content,
                evolve_sync: values.evolve_sync,
                tv: values.tv,
                d_loss,
            };
            on_record(&record);
            log.push(record);
        }
        let iterations = cfg.synth.iterations;
        let (g, _, terms) = evaluate(&pixels, &d, false).map_err(diverged("gen-real", iterations))?;
        let last = terms.values(&g);
        stats.push(SegmentStats {
            frames: paired[seg.clone()].to_vec(),
            anchors: paired[anchor_range].to_vec(),
            initial: initial.unwrap_or(last),
            last,
        });
        for (k, t) in unstack(pixels.get("pixels").expect("registered")).into_iter().enumerate() {
            y[seg.start + k] = t;
        }
    }

    let frames = paired
        .iter()
        .zip(&y)
        .map(|(&i, t)| Ok((i, Frame::from_tensor_clamped(t)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthesisOutput { real: RealSampleSet::new(frames, stats)?, log, discriminator: d })
}
