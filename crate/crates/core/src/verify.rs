//! Finite-difference verification targets: every differentiable op, the
//! pixel-space synthesis objective, and the generator objective.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::derive_seed;
use crate::encoders::{EncoderSpec, Tap};
use crate::error::{Error, Result};
use crate::evolvesync::{Bandwidths, KernelSpec, LossWeights};
use crate::generator::{g_forward_graph, gan_terms_graph, GeneratorParams};
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::mdan::{deconv_objective_graph, stack, DiscriminatorParams, SourceFeatures};
use crate::optim::ParamVars;
use crate::tensor::Tensor;
use crate::video::{make_fixture, FixtureKind};

pub const OPS_STEP: f64 = 1e-4;
pub const OPS_TOLERANCE: f64 = 1e-5;
pub const OPS_SEEDS: u64 = 10;
/// Full objectives standardize short feature rows whose spread can be tiny,
/// which makes them strongly curved; at 1e-3 the truncation error of the
/// difference quotient alone exceeds the tolerance.
pub const OBJECTIVE_STEP: f64 = 1e-4;
pub const OBJECTIVE_TOLERANCE: f64 = 1e-4;
/// Generator parameters checked per tensor in the generator target.
pub const GENERATOR_COORDS_PER_TENSOR: usize = 24;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Target {
    /// Every differentiable op on random f64 inputs.
    Ops,
    /// The pixel-space synthesis objective; `eq4` on the command line.
    Synthesis,
    /// The generator objective; `eq7` on the command line.
    Generator,
}

impl Target {
    pub fn name(self) -> &'static str {
        match self {
            Target::Ops => "ops",
            Target::Synthesis => "eq4",
            Target::Generator => "eq7",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Target::Ops => OPS_TOLERANCE,
            Target::Synthesis | Target::Generator => OBJECTIVE_TOLERANCE,
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Target::Ops),
            "eq4" | "synthesis" => Ok(Target::Synthesis),
            "eq7" | "generator" => Ok(Target::Generator),
            other => Err(Error::Unknown { what: "gradcheck target", name: other.to_string() }),
        }
    }
}

/// Result of one named check within a target.
#[derive(Clone, Debug)]
pub struct NamedReport {
    pub name: String,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug)]
pub struct TargetReport {
    pub target: Target,
    pub tolerance: f64,
    pub checks: Vec<NamedReport>,
}

impl TargetReport {
    pub fn passes(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.report.passes(self.tolerance))
    }

    pub fn worst(&self) -> Option<&NamedReport> {
        self.checks.iter().max_by(|a, b| a.report.max_rel_err.total_cmp(&b.report.max_rel_err))
    }
}

pub fn run_target(target: Target, seed: u64) -> Result<TargetReport> {
    let checks = match target {
        Target::Ops => check_ops(seed)?,
        Target::Synthesis => vec![NamedReport { name: "synthesis objective".into(), report: check_synthesis_objective(seed, OBJECTIVE_STEP)? }],
        Target::Generator => vec![NamedReport { name: "generator objective".into(), report: check_generator_objective(seed, OBJECTIVE_STEP)? }],
    };
    Ok(TargetReport { target, tolerance: target.tolerance(), checks })
}

type Objective = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct OpCase {
    name: &'static str,
    /// Input shapes; `kinked` inputs are kept at least 0.05 away from zero.
    inputs: Vec<Vec<usize>>,
    positive: bool,
    kinked: bool,
    apply: fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
}

fn op_cases() -> Vec<OpCase> {
    fn case(name: &'static str, inputs: Vec<Vec<usize>>, apply: fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> OpCase {
        OpCase { name, inputs, positive: false, kinked: false, apply }
    }
    let v23 = || vec![vec![2, 3], vec![2, 3]];
    vec![
        case("add", v23(), |g, v| g.add(v[0], v[1])),
        case("sub", v23(), |g, v| g.sub(v[0], v[1])),
        case("mul", v23(), |g, v| g.mul(v[0], v[1])),
        case("scale", vec![vec![2, 3]], |g, v| g.scale(v[0], -1.7)),
        case("add-scalar", vec![vec![2, 3]], |g, v| g.add_scalar(v[0], 0.3)),
        OpCase { kinked: true, ..case("abs", vec![vec![3, 4]], |g, v| g.abs(v[0])) },
        case("square", vec![vec![3, 4]], |g, v| g.square(v[0])),
        OpCase { positive: true, ..case("sqrt", vec![vec![3, 4]], |g, v| g.sqrt(v[0])) },
        case("exp", vec![vec![3, 4]], |g, v| g.exp(v[0])),
        case("tanh", vec![vec![3, 4]], |g, v| g.tanh(v[0])),
        case("sigmoid", vec![vec![3, 4]], |g, v| g.sigmoid(v[0])),
        OpCase { kinked: true, ..case("relu", vec![vec![3, 4]], |g, v| g.relu(v[0])) },
        OpCase { kinked: true, ..case("leaky-relu", vec![vec![3, 4]], |g, v| g.leaky_relu(v[0])) },
        case("sum", vec![vec![3, 4]], |g, v| g.sum(v[0])),
        case("mean", vec![vec![3, 4]], |g, v| g.mean(v[0])),
        case("conv2d 3x3 stride 1", vec![vec![2, 3, 5, 5], vec![4, 3, 3, 3], vec![4]], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 1)
        }),
        case("conv2d 3x3 stride 2", vec![vec![1, 3, 5, 6], vec![4, 3, 3, 3], vec![4]], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 2)
        }),
        case("conv2d 1x1", vec![vec![1, 4, 3, 3], vec![2, 4, 1, 1], vec![2]], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1)),
        case("conv2d-transpose stride 2", vec![vec![1, 4, 3, 3], vec![4, 2, 3, 3], vec![2]], |g, v| {
            g.conv2d_transpose(v[0], v[1], Some(v[2]), 2, (5, 6))
        }),
        case("batch-norm", vec![vec![2, 3, 3, 3], vec![3], vec![3]], |g, v| g.batch_norm(v[0], v[1], v[2])),
        case("reshape", vec![vec![2, 6]], |g, v| g.reshape(v[0], &[3, 4])),
        case("narrow", vec![vec![1, 5, 3, 3]], |g, v| g.narrow(v[0], 1, 1, 3)),
        case("concat", vec![vec![1, 2, 3, 3], vec![1, 3, 3, 3]], |g, v| g.concat(&[v[0], v[1]], 1)),
        case("standardize", vec![vec![3, 5]], |g, v| g.standardize_rows(v[0], 1e-8)),
        case("pairwise-sq-dist", vec![vec![3, 4], vec![2, 4]], |g, v| g.pairwise_sq_dist(v[0], v[1])),
    ]
}

/// Every op, each at [`OPS_SEEDS`] random points, reduced to a scalar by a
/// random weighted sum.
pub fn check_ops(seed: u64) -> Result<Vec<NamedReport>> {
    let mut out = Vec::new();
    for case in op_cases() {
        let mut merged = GradCheckReport::default();
        for s in 0..OPS_SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, s));
            let point: Vec<Tensor<f64>> = case
                .inputs
                .iter()
                .map(|shape| {
                    Tensor::from_fn(shape.clone(), |_| {
                        let v: f64 = rng.random_range(-1.0..1.0);
                        if case.positive {
                            0.5 + v.abs()
                        } else if case.kinked {
                            v.signum() * (0.05 + v.abs())
                        } else {
                            v
                        }
                    })
                })
                .collect();
            let mut probe = Graph::<f64>::new();
            let vars: Vec<Var> = point.iter().map(|t| probe.constant(t.clone())).collect();
            let probe_out = (case.apply)(&mut probe, &vars)?;
            let out_shape = probe.shape(probe_out).to_vec();
            let weights = Tensor::<f64>::randn(out_shape, 1.0, &mut rng);
            let apply = case.apply;
            let objective: Objective = Box::new(move |g, v| {
                let y = apply(g, v)?;
                let c = g.constant(weights.clone());
                let m = g.mul(y, c)?;
                g.sum(m)
            });
            let opts = GradCheckOptions { step: OPS_STEP, seed: s, ..Default::default() };
            let r = grad_check(objective, &point, &opts)?;
            merged.coords_checked += r.coords_checked;
            merged.reduced_steps += r.reduced_steps;
            merged.skipped += r.skipped;
            if merged.worst.is_none() || r.max_rel_err > merged.max_rel_err {
                merged.max_rel_err = r.max_rel_err;
                merged.worst = r.worst;
            }
        }
        out.push(NamedReport { name: case.name.to_string(), report: merged });
    }
    Ok(out)
}

fn source_pair(seed: u64) -> Result<Tensor<f64>> {
    let x = make_fixture(FixtureKind::TranslatingSquare, seed, 4, 8, 0.0)?;
    let a = x.frame(0).to_tensor::<f64>();
    let b = x.frame(2).to_tensor::<f64>();
    stack(&[&a, &b])
}

/// Pixel-space synthesis objective with respect to a 2-frame 8×8 segment.
pub fn check_synthesis_objective(seed: u64, step: f64) -> Result<GradCheckReport> {
    let spec = EncoderSpec::build(seed);
    let d = DiscriminatorParams::<f64>::init(derive_seed(seed, 1));
    let sources = source_pair(seed)?;
    let source = SourceFeatures::compute(&spec, &sources)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let pixels = sources.map(|v| v + rng.random_range(-0.15..0.15));
    let w = LossWeights::default();

    let run = |g: &mut Graph<f64>, px: Var, bws: &mut Bandwidths| -> Result<Var> {
        let dv = d.register(g, false);
        Ok(deconv_objective_graph(g, &spec, &dv, &source, None, px, &w, bws)?.total)
    };
    let mut live = Bandwidths::live(KernelSpec::default());
    let mut probe = Graph::<f64>::new();
    let px = probe.constant(pixels.clone());
    run(&mut probe, px, &mut live)?;
    let recorded = live.into_used();

    let objective = |g: &mut Graph<f64>, v: &[Var]| run(g, v[0], &mut Bandwidths::replay(recorded.clone()));
    let opts = GradCheckOptions { step, seed, ..Default::default() };
    grad_check(objective, &[pixels], &opts)
}

/// Generator objective with respect to every generator parameter tensor
/// (a seeded subsample of coordinates per tensor) on a 2-frame 8×8 video.
pub fn check_generator_objective(seed: u64, step: f64) -> Result<GradCheckReport> {
    let spec = EncoderSpec::build(seed);
    let d = DiscriminatorParams::<f64>::init(derive_seed(seed, 1));
    let gp = GeneratorParams::<f64>::init(derive_seed(seed, 3), true);
    let sources = source_pair(seed)?;
    let source = SourceFeatures::compute(&spec, &sources)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let real_frame = sources.map(|v| (v + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0));
    let real_first = crate::mdan::unstack(&real_frame).remove(0);
    let real_content = {
        let mut g = Graph::<f64>::new();
        let x = g.constant(real_first);
        let c = spec.encode_graph(&mut g, x, &[Tap::Content])?[0];
        g.value(c).clone()
    };
    let paired = vec![(0usize, real_content)];
    let w = LossWeights::default();
    let names: Vec<String> = gp.params().names().cloned().collect();
    let point: Vec<Tensor<f64>> = names.iter().map(|n| gp.params().get(n).expect("listed").clone()).collect();

    let run = |g: &mut Graph<f64>, v: &[Var], bws: &mut Bandwidths| -> Result<Var> {
        let pv = ParamVars::from_vars(names.iter().cloned().zip(v.iter().copied()));
        let dv = d.register(g, false);
        let xw = g.constant(sources.clone());
        let ys = g_forward_graph(g, &spec, &pv, xw)?;
        Ok(gan_terms_graph(g, &spec, &dv, &source, &ys, &paired, &w, bws)?.total)
    };
    let mut live = Bandwidths::live(KernelSpec::default());
    let mut probe = Graph::<f64>::new();
    let vars: Vec<Var> = point.iter().map(|t| probe.constant(t.clone())).collect();
    run(&mut probe, &vars, &mut live)?;
    let recorded = live.into_used();

    let objective = |g: &mut Graph<f64>, v: &[Var]| run(g, v, &mut Bandwidths::replay(recorded.clone()));
    let opts = GradCheckOptions {
        step,
        seed,
        max_coords_per_input: Some(GENERATOR_COORDS_PER_TENSOR),
        ..Default::default()
    };
    grad_check(objective, &point, &opts)
}
