//! Deterministic synthetic videos used as desk-scale test inputs.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::frame::{Frame, VideoSequence};
use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum FixtureKind {
    /// A colored square over a gradient, moving right 1 px/frame with wraparound.
    TranslatingSquare,
    /// A smooth random texture moving right 1 px/frame with wraparound.
    TranslatingTexture,
    /// One texture repeated, with fresh iid Gaussian noise on every frame.
    StaticPlusNoise,
}

impl FixtureKind {
    pub fn name(self) -> &'static str {
        match self {
            FixtureKind::TranslatingSquare => "translating-square",
            FixtureKind::TranslatingTexture => "translating-texture",
            FixtureKind::StaticPlusNoise => "static-plus-noise",
        }
    }
}

impl fmt::Display for FixtureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FixtureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translating-square" => Ok(FixtureKind::TranslatingSquare),
            "translating-texture" => Ok(FixtureKind::TranslatingTexture),
            "static-plus-noise" => Ok(FixtureKind::StaticPlusNoise),
            other => Err(Error::Unknown { what: "fixture kind", name: other.to_string() }),
        }
    }
}

pub const MIN_FIXTURE_FRAMES: usize = 4;

/// Noise level of `static-plus-noise` when none is given.
pub const DEFAULT_FIXTURE_NOISE: f32 = 0.05;

pub fn make_fixture(kind: FixtureKind, seed: u64, frames: usize, size: usize, noise_sigma: f32) -> Result<VideoSequence> {
    if frames < MIN_FIXTURE_FRAMES {
        return Err(Error::invalid("make_fixture", format!("need at least {MIN_FIXTURE_FRAMES} frames, got {frames}")));
    }
    if size < 4 {
        return Err(Error::invalid("make_fixture", format!("size must be >= 4, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = match kind {
        FixtureKind::TranslatingSquare => {
            let base = square_scene(&mut rng, size)?;
            (0..frames).map(|t| base.rolled(t as isize, 0)).collect()
        }
        FixtureKind::TranslatingTexture => {
            let base = texture(&mut rng, size)?;
            (0..frames).map(|t| base.rolled(t as isize, 0)).collect()
        }
        FixtureKind::StaticPlusNoise => {
            let base = texture(&mut rng, size)?;
            (0..frames).map(|_| noisy(&base, noise_sigma, &mut rng)).collect::<Result<Vec<_>>>()?
        }
    };
    let mut v = VideoSequence::new(format!("{kind}-{seed}"), out)?;
    v.fps = 23.0;
    Ok(v)
}

/// Adds seeded iid Gaussian noise to every frame, clamping to `[0, 1]`.
pub fn add_noise(video: &VideoSequence, sigma: f32, seed: u64) -> Result<VideoSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = video.frames().iter().map(|f| noisy(f, sigma, &mut rng)).collect::<Result<Vec<_>>>()?;
    let mut v = VideoSequence::new(format!("{}+noise", video.id), frames)?;
    v.fps = video.fps;
    Ok(v)
}

fn noisy(frame: &Frame, sigma: f32, rng: &mut ChaCha8Rng) -> Result<Frame> {
    let normal = Normal::new(0.0f32, sigma.max(0.0)).map_err(|e| Error::invalid("noise", e.to_string()))?;
    let data = frame.data().iter().map(|&v| (v + normal.sample(rng)).clamp(0.0, 1.0)).collect();
    Frame::new(frame.width(), frame.height(), data)
}

fn square_scene(rng: &mut ChaCha8Rng, size: usize) -> Result<Frame> {
    let top: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.5));
    let bottom: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.5));
    let color: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.6..1.0));
    let side = (size / 4).max(2);
    let x0 = rng.random_range(0..size);
    let y0 = rng.random_range(0..size - side + 1);
    let mut data = vec![0.0; 3 * size * size];
    for c in 0..3 {
        for y in 0..size {
            let t = y as f32 / (size - 1) as f32;
            for x in 0..size {
                let in_square = (y0..y0 + side).contains(&y) && (x + size - x0) % size < side;
                data[(c * size + y) * size + x] = if in_square { color[c] } else { top[c] * (1.0 - t) + bottom[c] * t };
            }
        }
    }
    Frame::new(size, size, data)
}

/// Sum of a few random plane waves per channel, periodic on the frame so
/// that rolling it stays seamless.
fn texture(rng: &mut ChaCha8Rng, size: usize) -> Result<Frame> {
    let mut data = vec![0.0; 3 * size * size];
    for c in 0..3 {
        let waves: Vec<(f64, f64, f64, f64)> = (0..4)
            .map(|_| {
                (
                    rng.random_range(1..4) as f64,
                    rng.random_range(0..4) as f64,
                    rng.random_range(0.0..TAU),
                    rng.random_range(0.05..0.15),
                )
            })
            .collect();
        for y in 0..size {
            for x in 0..size {
                let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
                let s: f64 = waves.iter().map(|&(fx, fy, ph, a)| a * (TAU * (fx * u + fy * v) + ph).sin()).sum();
                data[(c * size + y) * size + x] = (0.5 + s).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Frame::new(size, size, data)
}
