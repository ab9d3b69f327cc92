//! Video style transfer with an evolve-sync temporal loss.
//!
//! The crate is layered bottom-up: a small reverse-mode autodiff core
//! ([`tensor`], [`graph`], [`optim`], [`gradcheck`]), frozen encoders
//! ([`encoders`]), the evolve-sync loss and AESL metric ([`evolvesync`]),
//! the discriminator and pixel-space real-sample synthesis ([`mdan`]), and
//! the recurrent generator ([`generator`]). [`video`] and [`config`] hold
//! I/O and settings.

pub mod config;
mod conv;
pub mod encoders;
pub mod error;
pub mod evolvesync;
pub mod generator;
pub mod gradcheck;
pub mod graph;
pub mod mdan;
pub mod optim;
pub mod tensor;
pub mod verify;
pub mod video;

pub use config::TrainConfig;
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{Element, Tensor};
