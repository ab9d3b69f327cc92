//! Evolvements, the evolve-sync loss and the AESL metric.
//!
//! An evolvement sample for channel `m` of frames `a`, `b` is
//! `standardize(|g(b)_m - g(a)_m|)`. Two videos are compared by the squared
//! MMD between their evolvement sample sets, summed over frame pairs
//! `i < j` with `j - i < delta` and weighted per encoder level.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::encoders::{encode, EncoderSpec, Tap};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Element, Tensor};
use crate::video::{Frame, VideoSequence};

/// Guards the standard deviation in evolvement standardization.
pub const STANDARDIZE_EPS: f64 = 1e-8;

/// Orders reported by default for the AESL metric.
pub const AESL_ORDERS: [usize; 6] = [2, 4, 6, 8, 10, 12];

/// Encoder levels compared by the evolve-sync loss.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Level {
    Micro,
    Macro,
}

impl Level {
    pub const ALL: [Level; 2] = [Level::Micro, Level::Macro];

    pub fn tap(self) -> Tap {
        match self {
            Level::Micro => Tap::Micro,
            Level::Macro => Tap::Macro,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn weight(self, w: &LossWeights) -> f64 {
        match self {
            Level::Micro => w.alpha_micro,
            Level::Macro => w.alpha_macro,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Frame pairs with `j - i < delta` contribute.
    pub delta: usize,
    pub alpha_micro: f64,
    pub alpha_macro: f64,
    /// Weight of the total-variation prior.
    pub omega: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { delta: 3, alpha_micro: 0.005, alpha_macro: 100.0, omega: 0.00001 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.delta < 2 {
            return Err(Error::invalid("loss weights", format!("delta must be >= 2, got {}", self.delta)));
        }
        for (name, v) in [("alpha_micro", self.alpha_micro), ("alpha_macro", self.alpha_macro), ("omega", self.omega)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid("loss weights", format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Same weights with the evolve-sync term switched off.
    pub fn without_evolve_sync(&self) -> Self {
        LossWeights { alpha_micro: 0.0, alpha_macro: 0.0, ..self.clone() }
    }

    pub fn has_evolve_sync(&self) -> bool {
        self.alpha_micro > 0.0 || self.alpha_macro > 0.0
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth {
    /// Median pairwise distance of the pooled samples, per evaluation.
    Median,
    Fixed(f64),
}

/// Gaussian RBF kernel `exp(-‖u - v‖² / (2 bw²))`.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub bandwidth: Bandwidth,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec { bandwidth: Bandwidth::Median }
    }
}

impl KernelSpec {
    pub fn fixed(bw: f64) -> Self {
        KernelSpec { bandwidth: Bandwidth::Fixed(bw) }
    }

    pub fn validate(&self) -> Result<()> {
        match self.bandwidth {
            Bandwidth::Fixed(b) if !(b > 0.0 && b.is_finite()) => {
                Err(Error::invalid("kernel", format!("bandwidth must be > 0, got {b}")))
            }
            _ => Ok(()),
        }
    }
}

/// Supplies the bandwidth of each MMD evaluation in call order. A live
/// source applies the kernel spec and records what it used; a replay source
/// hands back recorded values, which keeps the kernel fixed while a
/// finite-difference check perturbs the inputs.
#[derive(Clone, Debug)]
pub struct Bandwidths {
    kernel: KernelSpec,
    replay: Option<Vec<f64>>,
    used: Vec<f64>,
}

impl Bandwidths {
    pub fn live(kernel: KernelSpec) -> Self {
        Bandwidths { kernel, replay: None, used: Vec::new() }
    }

    pub fn replay(values: Vec<f64>) -> Self {
        Bandwidths { kernel: KernelSpec::default(), replay: Some(values), used: Vec::new() }
    }

    pub fn used(&self) -> &[f64] {
        &self.used
    }

    pub fn into_used(self) -> Vec<f64> {
        self.used
    }

    fn next<T: Element>(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
        let bw = match &self.replay {
            Some(values) => *values
                .get(self.used.len())
                .ok_or_else(|| Error::invalid("bandwidth replay", "more kernel evaluations than recorded"))?,
            None => match self.kernel.bandwidth {
                Bandwidth::Fixed(b) => b,
                Bandwidth::Median => median_bandwidth_of(a, b),
            },
        };
        self.used.push(bw);
        Ok(bw)
    }
}

/// Evolvement samples of one frame pair at one tap: `[samples, dim]` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet<T: Element = f32> {
    tap: Tap,
    samples: Tensor<T>,
}

impl<T: Element> SampleSet<T> {
    pub fn new(tap: Tap, samples: Tensor<T>) -> Result<Self> {
        if samples.shape().len() != 2 {
            return Err(Error::invalid("sample set", format!("samples must be [m, d], got {:?}", samples.shape())));
        }
        if !samples.is_finite() {
            return Err(Error::NonFinite { op: "sample set".into() });
        }
        Ok(SampleSet { tap, samples })
    }

    pub fn from_rows(tap: Tap, rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| Error::invalid("sample set", "a sample set needs at least one sample"))?;
        if let Some(r) = rows.iter().find(|r| r.len() != first.len()) {
            return Err(Error::ShapeMismatch {
                op: "sample set",
                lhs_name: "sample 0",
                lhs: vec![first.len()],
                rhs_name: "sample",
                rhs: vec![r.len()],
            });
        }
        let data = rows.iter().flatten().map(|&v| T::from_f64v(v)).collect();
        SampleSet::new(tap, Tensor::new([rows.len(), first.len()], data)?)
    }

    pub fn tap(&self) -> Tap {
        self.tap
    }

    pub fn len(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flattened length of each sample.
    pub fn dim(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn sample(&self, m: usize) -> &[T] {
        let d = self.dim();
        &self.samples.data()[m * d..(m + 1) * d]
    }

    pub fn samples(&self) -> &Tensor<T> {
        &self.samples
    }
}

/// `(x - μ) / (σ + eps)` over all elements of `x`, σ the population
/// standard deviation.
pub fn standardize<T: Element>(x: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let mut g = Graph::<T>::new();
    let v = g.constant(x.clone().reshape([1, x.len()])?);
    let out = g.standardize_rows(v, eps)?;
    g.value(out).clone().reshape(x.shape().to_vec())
}

/// Evolvement of encoded features `fa`, `fb` (`[1, c, h, w]` nodes) as a
/// `[c, h·w]` node.
pub fn evolvement_graph<T: Element>(g: &mut Graph<T>, fa: Var, fb: Var) -> Result<Var> {
    let shape = g.shape(fa).to_vec();
    let [1, c, h, w] = shape[..] else {
        return Err(Error::invalid("evolvement", format!("expected one [1,c,h,w] feature map, got {shape:?}")));
    };
    let diff = g.sub(fb, fa)?;
    let mag = g.abs(diff)?;
    let rows = g.reshape(mag, &[c, h * w])?;
    g.standardize_rows(rows, STANDARDIZE_EPS)
}

pub fn evolvement<T: Element>(frame_a: &Frame, frame_b: &Frame, level: Level, spec: &EncoderSpec) -> Result<SampleSet<T>> {
    if !frame_a.same_dims(frame_b) {
        return Err(Error::ShapeMismatch {
            op: "evolvement",
            lhs_name: "frame a",
            lhs: vec![frame_a.height(), frame_a.width()],
            rhs_name: "frame b",
            rhs: vec![frame_b.height(), frame_b.width()],
        });
    }
    let mut g = Graph::<T>::new();
    let fa = encode::<T>(frame_a, level.tap(), spec)?.values;
    let fb = encode::<T>(frame_b, level.tap(), spec)?.values;
    let shape: Vec<usize> = std::iter::once(1).chain(fa.shape().iter().copied()).collect();
    let a = g.constant(fa.reshape(shape.clone())?);
    let b = g.constant(fb.reshape(shape)?);
    let e = evolvement_graph(&mut g, a, b)?;
    SampleSet::new(level.tap(), g.value(e).clone())
}

fn total_order<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Ordering {
    a.shape().cmp(b.shape()).then_with(|| {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| x.to_f64v().total_cmp(&y.to_f64v()))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Biased squared MMD between the row sets `a` and `b`:
/// `mean k(a,a) + mean k(b,b) - 2 mean k(a,b)`.
///
/// The arguments are put in a canonical order first so the value is
/// bit-identical under swapping.
pub fn mmd2_graph<T: Element>(g: &mut Graph<T>, a: Var, b: Var, bandwidth: f64) -> Result<Var> {
    let (a, b) = match total_order(g.value(a), g.value(b)) {
        Ordering::Greater => (b, a),
        _ => (a, b),
    };
    let gamma = -1.0 / (2.0 * bandwidth * bandwidth);
    let kernel_mean = |g: &mut Graph<T>, u: Var, v: Var| -> Result<Var> {
        let d = g.pairwise_sq_dist(u, v)?;
        let s = g.scale(d, gamma)?;
        let k = g.exp(s)?;
        g.mean(k)
    };
    let kaa = kernel_mean(g, a, a)?;
    let kbb = kernel_mean(g, b, b)?;
    let kab = kernel_mean(g, a, b)?;
    let within = g.add(kaa, kbb)?;
    let cross = g.scale(kab, 2.0)?;
    g.sub(within, cross)
}

pub fn mmd2<T: Element>(a: &SampleSet<T>, b: &SampleSet<T>, kernel: &KernelSpec) -> Result<f64> {
    kernel.validate()?;
    let mut bws = Bandwidths::live(*kernel);
    let bw = bws.next(a.samples(), b.samples())?;
    let mut g = Graph::<T>::new();
    let va = g.constant(a.samples().clone());
    let vb = g.constant(b.samples().clone());
    let out = mmd2_graph(&mut g, va, vb, bw)?;
    Ok(g.scalar(out).to_f64v())
}

/// Median of the nonzero pairwise Euclidean distances among the pooled
/// samples of `a` and `b`; 1.0 when every distance is zero.
pub fn median_bandwidth<T: Element>(a: &SampleSet<T>, b: &SampleSet<T>) -> f64 {
    median_bandwidth_of(a.samples(), b.samples())
}

fn median_bandwidth_of<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let d = a.shape()[1];
    let rows: Vec<&[T]> = a.data().chunks(d).chain(b.data().chunks(d)).collect();
    let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let sq: f64 = rows[i].iter().zip(rows[j]).map(|(x, y)| (x.to_f64v() - y.to_f64v()).powi(2)).sum();
            if sq > 0.0 {
                dists.push(sq.sqrt());
            }
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let n = dists.len();
    if n % 2 == 1 {
        dists[n / 2]
    } else {
        0.5 * (dists[n / 2 - 1] + dists[n / 2])
    }
}

/// Micro and macro features of each frame of `frames[n, 3, h, w]`, as
/// `[1, c, h', w']` nodes indexed by [`Level::index`].
pub fn encode_levels<T: Element>(g: &mut Graph<T>, spec: &EncoderSpec, frames: Var) -> Result<Vec<[Var; 2]>> {
    let n = g.shape(frames)[0];
    let taps = spec.encode_graph(g, frames, &[Tap::Micro, Tap::Macro])?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let micro = if n == 1 { taps[0] } else { g.narrow(taps[0], 0, i, 1)? };
        let macro_ = if n == 1 { taps[1] } else { g.narrow(taps[1], 0, i, 1)? };
        out.push([micro, macro_]);
    }
    Ok(out)
}

/// Frame pairs `(i, j)`, `i < j < len`, `j - i < delta`, with `j >= first_free`,
/// in ascending `i` then `j`.
pub fn frame_pairs(len: usize, delta: usize, first_free: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..len {
        for j in i + 1..len.min(i + delta) {
            if j >= first_free {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Evolve-sync loss between per-frame level features of a source `x` and a
/// synthesized `y`. Pairs whose frames both precede `first_free` are held
/// constant by the caller and are left out. Returns `None` when no pair
/// contributes.
pub fn evolve_sync_graph<T: Element>(
    g: &mut Graph<T>,
    x: &[[Var; 2]],
    y: &[[Var; 2]],
    first_free: usize,
    w: &LossWeights,
    bandwidths: &mut Bandwidths,
) -> Result<Option<Var>> {
    if x.len() != y.len() {
        return Err(Error::invalid("evolve-sync", format!("source has {} frames, synthesized has {}", x.len(), y.len())));
    }
    let mut terms = Vec::new();
    for (i, j) in frame_pairs(y.len(), w.delta, first_free) {
        for level in Level::ALL {
            let alpha = level.weight(w);
            if alpha == 0.0 {
                continue;
            }
            let l = level.index();
            let ex = evolvement_graph(g, x[i][l], x[j][l])?;
            let ey = evolvement_graph(g, y[i][l], y[j][l])?;
            let bw = bandwidths.next(g.value(ex), g.value(ey))?;
            let m = mmd2_graph(g, ex, ey, bw)?;
            terms.push(g.scale(m, alpha)?);
        }
    }
    g.add_all(&terms)
}

fn check_pair(x: &VideoSequence, y: &VideoSequence) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::invalid("evolve-sync", format!("source has {} frames, synthesized has {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::invalid("evolve-sync", "videos need at least 2 frames"));
    }
    if !x.frame(0).same_dims(y.frame(0)) {
        return Err(Error::ShapeMismatch {
            op: "evolve-sync",
            lhs_name: "source frame",
            lhs: vec![x.height(), x.width()],
            rhs_name: "synthesized frame",
            rhs: vec![y.height(), y.width()],
        });
    }
    Ok(())
}

pub(crate) fn video_tensor<T: Element>(v: &[&Frame]) -> Result<Tensor<T>> {
    let (h, w) = (v[0].height(), v[0].width());
    let data = v.iter().flat_map(|f| f.data().iter().map(|&p| T::from_f64v(p as f64))).collect();
    Tensor::new([v.len(), 3, h, w], data)
}

/// Evolve-sync loss of `y` against `x`, evaluated in f64.
pub fn evolve_sync_loss(
    x: &VideoSequence,
    y: &VideoSequence,
    w: &LossWeights,
    spec: &EncoderSpec,
    kernel: &KernelSpec,
) -> Result<f64> {
    w.validate()?;
    kernel.validate()?;
    check_pair(x, y)?;
    let mut g = Graph::<f64>::new();
    let xv = g.constant(video_tensor(&x.frames().iter().collect::<Vec<_>>())?);
    let yv = g.constant(video_tensor(&y.frames().iter().collect::<Vec<_>>())?);
    let xf = encode_levels(&mut g, spec, xv)?;
    let yf = encode_levels(&mut g, spec, yv)?;
    let mut bws = Bandwidths::live(*kernel);
    Ok(evolve_sync_graph(&mut g, &xf, &yf, 0, w, &mut bws)?.map_or(0.0, |v| g.scalar(v)))
}

/// AESL at several orders: the evolve-sync loss with `delta = order`,
/// divided by the frame count.
///
/// Every per-pair term is computed once, clamped at zero and summed in the
/// fixed pair order, so a larger order can never report a smaller value.
pub fn aesl_orders(
    x: &VideoSequence,
    y: &VideoSequence,
    orders: &[usize],
    w: &LossWeights,
    spec: &EncoderSpec,
    kernel: &KernelSpec,
) -> Result<Vec<f64>> {
    kernel.validate()?;
    check_pair(x, y)?;
    if let Some(o) = orders.iter().find(|&&o| o < 2) {
        return Err(Error::invalid("aesl", format!("orders must be >= 2, got {o}")));
    }
    let max_order = orders.iter().copied().max().unwrap_or(2);
    let n = y.len();

    let mut g = Graph::<f64>::new();
    let xv = g.constant(video_tensor(&x.frames().iter().collect::<Vec<_>>())?);
    let yv = g.constant(video_tensor(&y.frames().iter().collect::<Vec<_>>())?);
    let xf = encode_levels(&mut g, spec, xv)?;
    let yf = encode_levels(&mut g, spec, yv)?;
    let mut bws = Bandwidths::live(*kernel);
    let mut terms = Vec::new();
    for (i, j) in frame_pairs(n, max_order, 0) {
        let mut term = 0.0;
        for level in Level::ALL {
            let alpha = level.weight(w);
            if alpha == 0.0 {
                continue;
            }
            let l = level.index();
            let ex = evolvement_graph(&mut g, xf[i][l], xf[j][l])?;
            let ey = evolvement_graph(&mut g, yf[i][l], yf[j][l])?;
            let bw = bws.next(g.value(ex), g.value(ey))?;
            let m = mmd2_graph(&mut g, ex, ey, bw)?;
            term += alpha * g.scalar(m).max(0.0);
        }
        terms.push((j - i, term));
    }
    Ok(orders
        .iter()
        .map(|&order| {
            let mut acc = 0.0;
            for &(gap, t) in &terms {
                if gap < order {
                    acc += t;
                }
            }
            acc / n as f64
        })
        .collect())
}

pub fn aesl(
    x: &VideoSequence,
    y: &VideoSequence,
    order: usize,
    w: &LossWeights,
    spec: &EncoderSpec,
    kernel: &KernelSpec,
) -> Result<f64> {
    Ok(aesl_orders(x, y, &[order], w, spec, kernel)?[0])
}

/// Formats like C's `%.6g`.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    let s = if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        // Rounding can carry into a new digit (e.g. 9.999995 -> 10.00000).
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let s = format!("{v:.5e}");
        let (mant, e) = s.split_once('e').unwrap_or((&s, "0"));
        let mant = if mant.contains('.') { mant.trim_end_matches('0').trim_end_matches('.') } else { mant };
        let e: i32 = e.parse().unwrap_or(0);
        format!("{mant}e{}{:02}", if e < 0 { '-' } else { '+' }, e.abs())
    };
    s
}

/// One CSV row of an AESL report.
#[derive(Clone, Debug, PartialEq)]
pub struct AeslRow {
    pub video_id: String,
    pub method_label: String,
    pub order: usize,
    pub value: f64,
}

impl AeslRow {
    pub const CSV_HEADER: &'static str = "video_id,method_label,order,value";

    pub fn to_csv(&self) -> String {
        format!("{},{},{},{}", self.video_id, self.method_label, self.order, format_sig6(self.value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video::{make_fixture, FixtureKind};

    #[test]
    fn standardize_examples() {
        let x = Tensor::<f64>::new([2, 2], vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        let s = standardize(&x, 1e-8).unwrap();
        let sd = 5f64.sqrt();
        let expect = [-3.0 / sd, -1.0 / sd, 1.0 / sd, 3.0 / sd];
        for (a, b) in s.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!((s.data()[0] + 1.3416).abs() < 1e-4);
        let c = standardize(&Tensor::<f64>::ones([2, 2]), 1e-8).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn singleton_mmd() {
        let a = SampleSet::<f64>::from_rows(Tap::Micro, &[vec![0.0, 0.0]]).unwrap();
        let b = SampleSet::<f64>::from_rows(Tap::Micro, &[vec![1.0, 0.0]]).unwrap();
        let v = mmd2(&a, &b, &KernelSpec::fixed(1.0)).unwrap();
        assert!((v - (2.0 - 2.0 * (-0.5f64).exp())).abs() < 1e-12);
        assert!((v - 0.7869387).abs() < 1e-7);
    }

    #[test]
    fn median_examples() {
        let pts = SampleSet::<f64>::from_rows(Tap::Micro, &[vec![0.0], vec![1.0]]).unwrap();
        let more = SampleSet::<f64>::from_rows(Tap::Micro, &[vec![3.0]]).unwrap();
        assert_eq!(median_bandwidth(&pts, &more), 2.0);
        let same = SampleSet::<f64>::from_rows(Tap::Micro, &[vec![4.0], vec![4.0]]).unwrap();
        assert_eq!(median_bandwidth(&same, &same), 1.0);
        let a = SampleSet::<f64>::from_rows(Tap::Micro, &[vec![0.0, 0.0]]).unwrap();
        let b = SampleSet::<f64>::from_rows(Tap::Micro, &[vec![3.0, 4.0]]).unwrap();
        assert_eq!(median_bandwidth(&a, &b), 5.0);
    }

    #[test]
    fn pair_enumeration() {
        assert_eq!(frame_pairs(3, 3, 0), vec![(0, 1), (0, 2), (1, 2)]);
        assert_eq!(frame_pairs(4, 2, 0), vec![(0, 1), (1, 2), (2, 3)]);
        assert_eq!(frame_pairs(5, 3, 2), vec![(0, 2), (1, 2), (1, 3), (2, 3), (2, 4), (3, 4)]);
    }

    #[test]
    fn identical_frames_give_zero_evolvement() {
        let spec = EncoderSpec::build(0);
        let v = make_fixture(FixtureKind::TranslatingTexture, 0, 4, 8, 0.0).unwrap();
        let e = evolvement::<f64>(v.frame(1), v.frame(1), Level::Macro, &spec).unwrap();
        assert!(e.samples().data().iter().all(|&x| x == 0.0));
        let ab = evolvement::<f64>(v.frame(0), v.frame(2), Level::Micro, &spec).unwrap();
        let ba = evolvement::<f64>(v.frame(2), v.frame(0), Level::Micro, &spec).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn loss_of_video_with_itself_is_zero() {
        let spec = EncoderSpec::build(1);
        let v = make_fixture(FixtureKind::TranslatingSquare, 2, 5, 8, 0.0).unwrap();
        let w = LossWeights::default();
        let k = KernelSpec::default();
        assert!(evolve_sync_loss(&v, &v, &w, &spec, &k).unwrap().abs() < 1e-10);
        for a in aesl_orders(&v, &v, &AESL_ORDERS, &w, &spec, &k).unwrap() {
            assert!(a.abs() < 1e-10);
        }
    }

    #[test]
    fn short_or_mismatched_videos_rejected() {
        let spec = EncoderSpec::build(0);
        let v = make_fixture(FixtureKind::TranslatingSquare, 2, 5, 8, 0.0).unwrap();
        let one = VideoSequence::new("one", vec![v.frame(0).clone()]).unwrap();
        let w = LossWeights::default();
        let k = KernelSpec::default();
        assert!(evolve_sync_loss(&one, &one, &w, &spec, &k).is_err());
        let four = VideoSequence::new("four", v.frames()[..4].to_vec()).unwrap();
        assert!(evolve_sync_loss(&v, &four, &w, &spec, &k).is_err());
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(1.0), "1");
        assert_eq!(format_sig6(0.123456789), "0.123457");
        assert_eq!(format_sig6(123456.7), "123457");
        assert_eq!(format_sig6(1234567.0), "1.23457e+06");
        assert_eq!(format_sig6(0.0000123456), "1.23456e-05");
        assert_eq!(format_sig6(2.5e-3), "0.0025");
    }
}
