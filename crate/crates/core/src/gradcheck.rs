//! Central-difference verification of reverse-mode gradients (f64).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates checked per input tensor; all of them when `None`.
    pub max_coords_per_input: Option<usize>,
    /// Seeds the coordinate subsample.
    pub seed: u64,
    /// Smallest step tried when a perturbation lands on a different smooth
    /// piece (a relu/abs/sqrt sign flips) than the base point.
    pub min_step: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-3, max_coords_per_input: None, seed: 0, min_step: 1e-7 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorstCoordinate {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<WorstCoordinate>,
    pub coords_checked: usize,
    /// Coordinates whose step had to shrink to stay on one smooth piece.
    pub reduced_steps: usize,
    /// Coordinates skipped because no step down to `min_step` avoided a kink.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol && self.coords_checked > 0
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients of `objective` at `point` against central
/// differences and returns the worst relative error.
pub fn grad_check<F>(objective: F, point: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<(f64, Vec<i8>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = objective(&mut g, &vars)?;
        let v = g.scalar(out);
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check objective".into() });
        }
        Ok((v, g.kink_pattern()))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = objective(&mut g, &vars)?;
    let base_kinks = g.kink_pattern();
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v).grad).collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = point.to_vec();
    for (input, tensor) in point.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < tensor.len() => {
                let mut c = sample(&mut rng, tensor.len(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..tensor.len()).collect(),
        };
        for idx in coords {
            let x0 = tensor.data()[idx];
            let mut h = opts.step;
            let numeric = loop {
                work[input].data_mut()[idx] = x0 + h;
                let (fp, kp) = eval(&work)?;
                work[input].data_mut()[idx] = x0 - h;
                let (fm, km) = eval(&work)?;
                work[input].data_mut()[idx] = x0;
                if kp == base_kinks && km == base_kinks {
                    break Some((fp - fm) / (2.0 * h));
                }
                h /= 10.0;
                if h < opts.min_step {
                    break None;
                }
            };
            let Some(numeric) = numeric else {
                report.skipped += 1;
                continue;
            };
            if h < opts.step {
                report.reduced_steps += 1;
            }
            let a = analytic[input].data()[idx];
            let err = relative_error(a, numeric);
            report.coords_checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some(WorstCoordinate { input, index: idx, analytic: a, numeric, rel_err: err });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_objective_is_exact() {
        let c = Tensor::from_fn([5], |i| i as f64 - 2.0);
        let x = Tensor::from_fn([5], |i| 0.3 * i as f64);
        let report = grad_check(
            |g, v| {
                let cv = g.constant(c.clone());
                let p = g.mul(v[0], cv)?;
                g.sum(p)
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-10, "{report:?}");
        assert_eq!(report.coords_checked, 5);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn kink_crossing_shrinks_step() {
        // |x| at x = 1e-4 with step 1e-3 straddles the kink.
        let report = grad_check(
            |g, v| {
                let a = g.abs(v[0])?;
                g.sum(a)
            },
            &[Tensor::scalar(1e-4)],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.reduced_steps, 1);
        assert!(report.max_rel_err < 1e-10);
    }

    #[test]
    fn non_finite_objective_rejected() {
        let err = grad_check(
            |g, v| {
                let s = g.scale(v[0], 1e200)?;
                let s = g.scale(s, 1e200)?;
                g.sum(s)
            },
            &[Tensor::scalar(1.0)],
            &GradCheckOptions::default(),
        );
        assert!(err.is_err());
    }
}
