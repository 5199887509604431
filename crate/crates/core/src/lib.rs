//! Learned forward-model / actor control of partially measured physical systems.
//!
//! The crate trains a conditional beta-VAE surrogate of an unknown system
//! jointly with an actor network that maps desired target outputs to system
//! inputs, and exercises the loop against two simulated systems: an
//! intensity-measured optical scrambler and a Poisson retinal encoder.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod rng;
pub mod tensor;

pub mod control;
pub mod io;
pub mod models;
pub mod systems;

pub use error::{Error, Result};
pub use graph::{Activation, Graph, NodeId, Padding};
pub use tensor::Tensor;
