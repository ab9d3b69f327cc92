//! Evolvement, MMD, the evolve-sync loss and AESL checked against
//! hand-written oracles that share no code with the library.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vstgan::encoders::{EncoderSpec, Tap};
use vstgan::evolvesync::{
    aesl_orders, encode_levels, evolve_sync_graph, evolve_sync_loss, evolvement, mmd2, Bandwidths, KernelSpec, Level,
    LossWeights, SampleSet, STANDARDIZE_EPS,
};
use vstgan::gradcheck::{grad_check, GradCheckOptions};
use vstgan::verify::OBJECTIVE_STEP;
use vstgan::video::{add_noise, make_fixture, FixtureKind, Frame, VideoSequence};
use vstgan::{Graph, Tensor};

fn random_frame(rng: &mut ChaCha8Rng, size: usize) -> Frame {
    Frame::new(size, size, (0..3 * size * size).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn random_video(seed: u64, frames: usize, size: usize) -> VideoSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VideoSequence::new(format!("rand{seed}"), (0..frames).map(|_| random_frame(&mut rng, size)).collect()).unwrap()
}

/// Per channel: (|b - a| - mean) / (population std + eps).
fn micro_evolvement_oracle(a: &Frame, b: &Frame) -> Vec<Vec<f64>> {
    (0..3)
        .map(|c| {
            let d: Vec<f64> = a.plane(c).iter().zip(b.plane(c)).map(|(x, y)| (*y as f64 - *x as f64).abs()).collect();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
            d.iter().map(|v| (v - mean) / (sd + STANDARDIZE_EPS)).collect()
        })
        .collect()
}

fn gaussian_mmd2(a: &[Vec<f64>], b: &[Vec<f64>], bw: f64) -> f64 {
    let k = |x: &Vec<f64>, y: &Vec<f64>| {
        (-x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / (2.0 * bw * bw)).exp()
    };
    let mean = |u: &[Vec<f64>], v: &[Vec<f64>]| {
        u.iter().flat_map(|x| v.iter().map(move |y| (x, y))).map(|(x, y)| k(x, y)).sum::<f64>() / (u.len() * v.len()) as f64
    };
    mean(a, a) + mean(b, b) - 2.0 * mean(a, b)
}

fn median_bw(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let pool: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let mut d: Vec<f64> = Vec::new();
    for i in 0..pool.len() {
        for j in i + 1..pool.len() {
            let s = pool[i].iter().zip(pool[j]).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            if s > 0.0 {
                d.push(s);
            }
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    if n % 2 == 1 {
        d[n / 2]
    } else {
        (d[n / 2 - 1] + d[n / 2]) / 2.0
    }
}

#[test]
fn micro_evolvement_of_one_changed_pixel() {
    let a = Frame::filled(2, 2, [0.2, 0.5, 0.7]).unwrap();
    let mut data = a.data().to_vec();
    data[0] += 0.4; // red channel, top-left pixel
    let b = Frame::new(2, 2, data).unwrap();
    let e = evolvement::<f64>(&a, &b, Level::Micro, &EncoderSpec::build(0)).unwrap();
    // |diff| = [0.4, 0, 0, 0]: mean 0.1, population std sqrt(0.03).
    let sd = 0.03f64.sqrt();
    let expected = [0.3 / sd, -0.1 / sd, -0.1 / sd, -0.1 / sd];
    for (got, want) in e.sample(0).iter().zip(expected) {
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
    assert!((e.sample(0)[0] - 3f64.sqrt()).abs() < 1e-6);
    assert!(e.sample(1).iter().chain(e.sample(2)).all(|&v| v == 0.0));
}

#[test]
fn three_frame_micro_loss_is_sum_over_pairs() {
    let spec = EncoderSpec::build(1);
    let x = random_video(1, 3, 6);
    let y = random_video(2, 3, 6);
    let w = LossWeights { delta: 3, alpha_micro: 0.005, alpha_macro: 0.0, omega: 0.0 };
    let got = evolve_sync_loss(&x, &y, &w, &spec, &KernelSpec::default()).unwrap();
    let mut expected = 0.0;
    for (i, j) in [(0, 1), (1, 2), (0, 2)] {
        let ex = micro_evolvement_oracle(x.frame(i), x.frame(j));
        let ey = micro_evolvement_oracle(y.frame(i), y.frame(j));
        expected += 0.005 * gaussian_mmd2(&ex, &ey, median_bw(&ex, &ey));
    }
    assert!((got - expected).abs() < 1e-9 * expected.max(1.0), "{got} vs {expected}");
}

#[test]
fn delta_bounds_the_pair_gap() {
    let spec = EncoderSpec::build(1);
    let x = random_video(3, 4, 6);
    let y = random_video(4, 4, 6);
    let w = LossWeights { delta: 2, alpha_micro: 1.0, alpha_macro: 0.0, omega: 0.0 };
    let got = evolve_sync_loss(&x, &y, &w, &spec, &KernelSpec::fixed(2.0)).unwrap();
    let expected: f64 = [(0, 1), (1, 2), (2, 3)]
        .iter()
        .map(|&(i, j)| {
            gaussian_mmd2(&micro_evolvement_oracle(x.frame(i), x.frame(j)), &micro_evolvement_oracle(y.frame(i), y.frame(j)), 2.0)
        })
        .sum();
    assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
}

#[test]
fn aesl_equals_loss_at_that_order_over_length() {
    // Two routes: the graph-built loss with delta = order, and the
    // term-table AESL.
    let spec = EncoderSpec::build(2);
    let x = make_fixture(FixtureKind::TranslatingSquare, 2, 8, 16, 0.0).unwrap();
    let y = add_noise(&x, 0.1, 5).unwrap();
    let base = LossWeights::default();
    let kernel = KernelSpec::default();
    let orders = [2, 3, 4, 6, 8];
    let table = aesl_orders(&x, &y, &orders, &base, &spec, &kernel).unwrap();
    for (&order, got) in orders.iter().zip(table) {
        let w = LossWeights { delta: order, ..base.clone() };
        let direct = evolve_sync_loss(&x, &y, &w, &spec, &kernel).unwrap() / x.len() as f64;
        assert!((got - direct).abs() <= 1e-9 * direct.abs().max(1e-12), "order {order}: {got} vs {direct}");
    }
}

#[test]
fn noise_raises_aesl_on_translating_fixture() {
    let w = LossWeights::default();
    let kernel = KernelSpec::default();
    for seed in 0..5 {
        let spec = EncoderSpec::build(seed);
        let x = make_fixture(FixtureKind::TranslatingSquare, seed, 16, 16, 0.0).unwrap();
        let noisy = add_noise(&x, 0.1, seed).unwrap();
        let clean = aesl_orders(&x, &x, &[2], &w, &spec, &kernel).unwrap()[0];
        let dirty = aesl_orders(&x, &noisy, &[2], &w, &spec, &kernel).unwrap()[0];
        assert_eq!(clean, 0.0);
        assert!(dirty > clean, "seed {seed}: {dirty}");
    }
}

#[test]
fn loss_gradient_wrt_synthesized_pixels() {
    // 2-frame 8x8 videos, f64, bandwidths frozen at the base point. Standardized
    // rows make the loss strongly curved, so the step is the objective-level one.
    let spec = EncoderSpec::build(0);
    let w = LossWeights::default();
    let x = make_fixture(FixtureKind::TranslatingTexture, 0, 4, 8, 0.0).unwrap();
    let xs: Vec<Tensor<f64>> = (0..2).map(|i| x.frame(i).to_tensor()).collect();
    let x_pair = Tensor::new([2, 3, 8, 8], xs.iter().flat_map(|t| t.data().to_vec()).collect()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let y_pair = x_pair.map(|v| v + rng.random_range(-0.2..0.2));

    let build = |g: &mut Graph<f64>, y: vstgan::Var, bws: &mut Bandwidths| {
        let xv = g.constant(x_pair.clone());
        let xf = encode_levels(g, &spec, xv)?;
        let yf = encode_levels(g, &spec, y)?;
        Ok::<_, vstgan::Error>(evolve_sync_graph(g, &xf, &yf, 0, &w, bws)?.expect("one pair"))
    };
    let mut live = Bandwidths::live(KernelSpec::default());
    let mut probe = Graph::<f64>::new();
    let yv = probe.constant(y_pair.clone());
    build(&mut probe, yv, &mut live).unwrap();
    let used = live.into_used();

    let report = grad_check(
        |g, v| build(g, v[0], &mut Bandwidths::replay(used.clone())),
        &[y_pair],
        &GradCheckOptions { step: OBJECTIVE_STEP, ..Default::default() },
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

fn rows_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (1usize..5).prop_flat_map(|d| {
        (
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), 1..7),
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), 1..7),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mmd_is_symmetric_nonnegative_and_matches_oracle((a, b) in rows_strategy(), bw in 0.2f64..4.0) {
        let sa = SampleSet::<f64>::from_rows(Tap::Micro, &a).unwrap();
        let sb = SampleSet::<f64>::from_rows(Tap::Micro, &b).unwrap();
        for kernel in [KernelSpec::default(), KernelSpec::fixed(bw)] {
            let ab = mmd2(&sa, &sb, &kernel).unwrap();
            let ba = mmd2(&sb, &sa, &kernel).unwrap();
            prop_assert_eq!(ab.to_bits(), ba.to_bits());
            prop_assert!(ab >= -1e-12);
            prop_assert!(mmd2(&sa, &sa, &kernel).unwrap().abs() < 1e-12);
            let used = if kernel == KernelSpec::default() { median_bw(&a, &b) } else { bw };
            prop_assert!((ab - gaussian_mmd2(&a, &b, used)).abs() < 1e-9);
        }
    }

    #[test]
    fn evolvement_ignores_argument_order(seed in any::<u64>(), size in 2usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_frame(&mut rng, size), random_frame(&mut rng, size));
        let spec = EncoderSpec::build(seed % 7);
        for level in Level::ALL {
            let ab = evolvement::<f64>(&a, &b, level, &spec).unwrap();
            let ba = evolvement::<f64>(&b, &a, level, &spec).unwrap();
            prop_assert!(ab.samples().bit_eq(ba.samples()));
        }
        let micro = evolvement::<f64>(&a, &b, Level::Micro, &spec).unwrap();
        for (c, want) in micro_evolvement_oracle(&a, &b).iter().enumerate() {
            for (got, w) in micro.sample(c).iter().zip(want) {
                prop_assert!((got - w).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn aesl_never_decreases_with_order(seed in any::<u64>(), frames in 3usize..8, sigma in 0.0f32..0.3) {
        let spec = EncoderSpec::build(seed % 3);
        let x = random_video(seed, frames, 6);
        let y = add_noise(&x, sigma, seed ^ 5).unwrap();
        let orders: Vec<usize> = (2..=frames + 1).collect();
        let v = aesl_orders(&x, &y, &orders, &LossWeights::default(), &spec, &KernelSpec::default()).unwrap();
        for k in 1..v.len() {
            prop_assert!(v[k] >= v[k - 1], "order {} gave {} < {}", orders[k], v[k], v[k - 1]);
        }
    }

    #[test]
    fn loss_of_video_with_itself_vanishes(seed in any::<u64>(), frames in 2usize..6, enc in 0u64..50) {
        let x = random_video(seed, frames, 8);
        let v = evolve_sync_loss(&x, &x, &LossWeights::default(), &EncoderSpec::build(enc), &KernelSpec::default()).unwrap();
        prop_assert!(v.abs() < 1e-10);
    }
}
