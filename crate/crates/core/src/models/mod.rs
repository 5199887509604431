//! Learned networks: the forward Model (a conditional beta-VAE) and the Actor
//! that proposes system inputs for requested outputs.

pub mod actor;
pub mod layers;
pub mod vae;

pub use actor::{
    actor_loss, actor_loss_graph, Actor, ActorHead, ActorLossGraph, OpticalActor, OpticalActorSpec,
    RetinaActor, RetinaActorSpec, TargetBatch,
};
pub use vae::{
    vae_loss, vae_loss_graph, DecoderHead, ModelOutput, OpticalVae, OpticalVaeSpec, RetinaVae, RetinaVaeSpec,
    Vae, VaeLossGraph,
};

use serde::{Deserialize, Serialize};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Optical,
    Retina,
}

/// KL weight per outer iteration. Written `"first/rest"` in configs: the
/// first outer iteration uses one weight, every later iteration the other.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct BetaSchedule {
    pub first: f64,
    pub rest: f64,
}

impl BetaSchedule {
    pub fn constant(beta: f64) -> Self {
        BetaSchedule {
            first: beta,
            rest: beta,
        }
    }

    pub fn two_phase(first: f64, rest: f64) -> Self {
        BetaSchedule { first, rest }
    }

    pub fn at(&self, outer_iter: usize) -> f64 {
        if outer_iter == 0 {
            self.first
        } else {
            self.rest
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_schedule_switches_after_first_iteration() {
        let s = BetaSchedule::two_phase(500.0, 450.0);
        assert_eq!(s.at(0), 500.0);
        assert_eq!(s.at(1), 450.0);
        assert_eq!(s.at(7), 450.0);
        let c = BetaSchedule::constant(1.0);
        assert_eq!(c.at(0), 1.0);
        assert_eq!(c.at(3), 1.0);
    }
}
