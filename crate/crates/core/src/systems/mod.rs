//! Simulated "true systems": queryable but never analytically known to the
//! learner.

mod optical;
mod pinv;
mod retina;

pub use optical::{MeasurementMode, OpticalSystem};
pub use pinv::{phases_of, pseudo_inverse_control, PinvSolution};
pub use retina::{RetinaSampling, RetinaSystem};

use crate::error::Result;
use crate::rng::Stream;
use crate::tensor::Tensor;

/// One observed input/output pair.
#[derive(Clone, Debug)]
pub struct SampleTuple {
    pub x: Tensor,
    pub y: Tensor,
}

/// Common query surface over both simulators.
pub trait System {
    /// Flat input length n.
    fn input_len(&self) -> usize;
    /// Shape of the input tensor the system expects.
    fn input_shape(&self) -> Vec<usize>;
    /// Flat output length m (or 2m for complex-pair outputs).
    fn output_len(&self) -> usize;
    fn query(&mut self, x: &Tensor) -> Result<Tensor>;
}

/// Random dataset: inputs uniform in `[0,1]` per element, outputs from the
/// system's forward operation.
pub fn sample_random_dataset(
    sys: &mut dyn System,
    count: usize,
    rng: &mut Stream,
) -> Result<Vec<SampleTuple>> {
    let shape = sys.input_shape();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let x = crate::rng::uniform01(&shape, rng);
        let y = sys.query(&x)?;
        out.push(SampleTuple { x, y });
    }
    Ok(out)
}
