//! Seeded random streams.
//!
//! Every stochastic component owns its own ChaCha stream derived from the run
//! seed and a fixed role tag, so runs are reproducible end to end.

use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Stream = ChaCha8Rng;

/// Role tags for deriving independent streams from one run seed.
#[derive(Copy, Clone, Debug)]
pub enum Role {
    SystemInit = 1,
    SystemNoise = 2,
    ParamInit = 3,
    ModelPhase = 4,
    ActorPhase = 5,
    Dataset = 6,
    Eval = 7,
    LatentExport = 8,
}

pub fn stream(seed: u64, role: Role) -> Stream {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (role as u64) << 56)
}

pub fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree by construction")
}

pub fn uniform01(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen::<f64>()).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree by construction")
}

/// Glorot-uniform weights: `U(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out)))`.
pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_deterministic_and_role_separated() {
        let a = uniform01(&[8], &mut stream(7, Role::Dataset));
        let b = uniform01(&[8], &mut stream(7, Role::Dataset));
        let c = uniform01(&[8], &mut stream(7, Role::Eval));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn glorot_respects_bound() {
        let t = glorot_uniform(&[10, 10], 10, 10, &mut stream(1, Role::ParamInit));
        let bound = (6.0 / 20.0f64).sqrt();
        assert!(t.data().iter().all(|v| v.abs() < bound));
    }
}
