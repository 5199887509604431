//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamHyper {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            alpha: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter Adam state: step counter plus first/second moment estimates
/// congruent to the parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(shape: &[usize], hyper: AdamHyper) -> Self {
        AdamState {
            step_count: 0,
            first_moment: Tensor::zeros(shape),
            second_moment: Tensor::zeros(shape),
            hyper,
        }
    }
}

/// One Adam update in place. Increments `step_count` by exactly 1.
pub fn adam_step(param: &mut Tensor, grad: &Tensor, state: &mut AdamState) -> Result<()> {
    if !param.same_shape(grad) || !param.same_shape(&state.first_moment) {
        return Err(Error::shape("adam_step", param.shape(), grad.shape()));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let h = state.hyper.clone();
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    let p = param.data_mut();
    let g = grad.data();
    for i in 0..p.len() {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= h.alpha * m_hat / (v_hat.sqrt() + h.epsilon);
    }
    Ok(())
}

/// Adam over an ordered list of parameter tensors.
pub struct Adam {
    pub states: Vec<AdamState>,
}

impl Adam {
    /// Set the learning rate on every parameter state (used for schedules).
    pub fn set_alpha(&mut self, alpha: f64) {
        for st in &mut self.states {
            st.hyper.alpha = alpha;
        }
    }

    pub fn for_params<'a>(
        params: impl IntoIterator<Item = &'a Tensor>,
        hyper: AdamHyper,
    ) -> Self {
        Adam {
            states: params
                .into_iter()
                .map(|p| AdamState::new(p.shape(), hyper.clone()))
                .collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != self.states.len() || grads.len() != self.states.len() {
            return Err(Error::Invalid(format!(
                "adam: {} params, {} grads, {} states",
                params.len(),
                grads.len(),
                self.states.len()
            )));
        }
        for ((p, g), s) in params.into_iter().zip(grads).zip(&mut self.states) {
            adam_step(p, g, s)?;
        }
        Ok(())
    }
}
