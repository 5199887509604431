//! Actor network: maps a desired output to a candidate system input.
//!
//! Trained against the frozen forward model: latents are drawn from the prior,
//! the Actor's proposal is decoded through the Model, and the task loss is
//! taken against the requested target. Only Actor parameters receive gradient.

use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, NodeId, Padding};
use crate::models::layers::{Binder, BindMode, BoundConv2d, BoundDense, Conv2dLayer, Dense};
use crate::models::vae::Vae;
use crate::rng::{self, Stream};
use crate::tensor::{params_checksum, Tensor};

/// Output head of the optical Actor.
///
/// The system input is a phase map: periodic in every coordinate with period
/// one. A sigmoid pins proposals inside a single period but saturates, which
/// starves the Actor of gradient exactly where phase retrieval needs large
/// moves. The wrapped head keeps the output layer linear while training (the
/// decoder consumes cos/sin of the phases, so the objective is periodic) and
/// reduces proposals modulo one before they reach the true system, preserving
/// the `[0, 1]^n` input contract.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActorHead {
    Sigmoid,
    Wrapped,
}

#[derive(Clone, Debug)]
pub struct OpticalActorSpec {
    /// Length of the target vector fed in (m for intensity, 2m for complex).
    pub target_dim: usize,
    pub n: usize,
    /// 0 selects a single output layer with no hidden layer.
    pub hidden: usize,
    pub head: ActorHead,
}

pub struct OpticalActor {
    pub spec: OpticalActorSpec,
    hidden: Option<Dense>,
    out: Dense,
}

pub struct BoundOpticalActor {
    hidden: Option<BoundDense>,
    out: BoundDense,
}

impl OpticalActor {
    pub fn init(spec: OpticalActorSpec, rng: &mut Stream) -> Self {
        let (hidden, out_in) = if spec.hidden > 0 {
            (
                Some(Dense::init(
                    spec.target_dim,
                    spec.hidden,
                    Activation::Relu,
                    rng,
                )),
                spec.hidden,
            )
        } else {
            (None, spec.target_dim)
        };
        let out_act = match spec.head {
            ActorHead::Sigmoid => Activation::Sigmoid,
            ActorHead::Wrapped => Activation::Identity,
        };
        let out = Dense::init(out_in, spec.n, out_act, rng);
        OpticalActor { spec, hidden, out }
    }

    pub fn bind(&self, g: &mut Graph, binder: &mut Binder) -> BoundOpticalActor {
        BoundOpticalActor {
            hidden: self.hidden.as_ref().map(|d| d.bind(g, binder)),
            out: self.out.bind(g, binder),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = Vec::new();
        if let Some(d) = &self.hidden {
            p.extend(d.params());
        }
        p.extend(self.out.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = Vec::new();
        if let Some(d) = &mut self.hidden {
            p.extend(d.params_mut());
        }
        p.extend(self.out.params_mut());
        p
    }

    /// Targets `[B, target_dim]` -> phase maps `[B, n]` in (0, 1).
    pub fn forward_nodes(
        &self,
        g: &mut Graph,
        bound: &BoundOpticalActor,
        target: NodeId,
    ) -> Result<NodeId> {
        let h = match &bound.hidden {
            Some(d) => d.forward(g, target)?,
            None => target,
        };
        bound.out.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct RetinaActorSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub n_cells: usize,
    /// Width of the information bottleneck between encoder and decoder halves.
    pub bottleneck: usize,
}

pub struct RetinaActor {
    pub spec: RetinaActorSpec,
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
    fc_in: Dense,
    fc_out: Dense,
    conv3: Conv2dLayer,
    conv4: Conv2dLayer,
    conv_out: Conv2dLayer,
}

pub struct BoundRetinaActor {
    conv1: BoundConv2d,
    conv2: BoundConv2d,
    fc_in: BoundDense,
    fc_out: BoundDense,
    conv3: BoundConv2d,
    conv4: BoundConv2d,
    conv_out: BoundConv2d,
}

const ACT_C1: usize = 8;
const ACT_C2: usize = 4;

impl RetinaActor {
    pub fn init(spec: RetinaActorSpec, rng: &mut Stream) -> Result<Self> {
        if spec.height % 4 != 0 || spec.width % 4 != 0 {
            return Err(Error::Dimension(format!(
                "retina actor needs frame dims divisible by 4, got {}x{}",
                spec.height, spec.width
            )));
        }
        let feat = ACT_C2 * (spec.height / 4) * (spec.width / 4);
        let conv1 = Conv2dLayer::init(1, ACT_C1, 3, 3, Padding::Same, Activation::Relu, rng);
        let conv2 = Conv2dLayer::init(ACT_C1, ACT_C2, 3, 3, Padding::Same, Activation::Relu, rng);
        // The target rates for one frame enter alongside the pooled features.
        let fc_in = Dense::init(feat + spec.n_cells, spec.bottleneck, Activation::Identity, rng);
        let fc_out = Dense::init(spec.bottleneck, feat, Activation::Relu, rng);
        let conv3 = Conv2dLayer::init(ACT_C2, ACT_C2, 3, 3, Padding::Same, Activation::Relu, rng);
        let conv4 = Conv2dLayer::init(ACT_C2, ACT_C1, 3, 3, Padding::Same, Activation::Relu, rng);
        let conv_out =
            Conv2dLayer::init(ACT_C1, 1, 3, 3, Padding::Same, Activation::Sigmoid, rng);
        Ok(RetinaActor {
            spec,
            conv1,
            conv2,
            fc_in,
            fc_out,
            conv3,
            conv4,
            conv_out,
        })
    }

    pub fn bind(&self, g: &mut Graph, binder: &mut Binder) -> BoundRetinaActor {
        BoundRetinaActor {
            conv1: self.conv1.bind(g, binder),
            conv2: self.conv2.bind(g, binder),
            fc_in: self.fc_in.bind(g, binder),
            fc_out: self.fc_out.bind(g, binder),
            conv3: self.conv3.bind(g, binder),
            conv4: self.conv4.bind(g, binder),
            conv_out: self.conv_out.bind(g, binder),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.conv1.params();
        p.extend(self.conv2.params());
        p.extend(self.fc_in.params());
        p.extend(self.fc_out.params());
        p.extend(self.conv3.params());
        p.extend(self.conv4.params());
        p.extend(self.conv_out.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.conv1.params_mut();
        p.extend(self.conv2.params_mut());
        p.extend(self.fc_in.params_mut());
        p.extend(self.fc_out.params_mut());
        p.extend(self.conv3.params_mut());
        p.extend(self.conv4.params_mut());
        p.extend(self.conv_out.params_mut());
        p
    }

    /// Target exemplar `x*: [frames, H*W]` and rates `y*: [frames, n_cells]`
    /// -> stimulus proposal `[frames, H*W]` in (0, 1).
    pub fn forward_nodes(
        &self,
        g: &mut Graph,
        bound: &BoundRetinaActor,
        target_x: NodeId,
        target_y: NodeId,
    ) -> Result<NodeId> {
        let spec = &self.spec;
        let (h4, w4) = (spec.height / 4, spec.width / 4);
        let feat = ACT_C2 * h4 * w4;
        let mut rows: Option<NodeId> = None;
        for t in 0..spec.frames {
            let row = g.slice_rows(target_x, t, t + 1)?;
            let frame = g.reshape(row, vec![1, spec.height, spec.width])?;
            let c1 = bound.conv1.forward(g, frame)?;
            let p1 = g.maxpool2x2(c1)?;
            let c2 = bound.conv2.forward(g, p1)?;
            let p2 = g.maxpool2x2(c2)?;
            let flat = g.reshape(p2, vec![1, feat])?;
            let rates = g.slice_rows(target_y, t, t + 1)?;
            let joint = g.concat_cols(flat, rates)?;
            let code = bound.fc_in.forward(g, joint)?;
            let expanded = bound.fc_out.forward(g, code)?;
            let grid = g.reshape(expanded, vec![ACT_C2, h4, w4])?;
            let c3 = bound.conv3.forward(g, grid)?;
            let u1 = g.upsample2x2(c3)?;
            let c4 = bound.conv4.forward(g, u1)?;
            let u2 = g.upsample2x2(c4)?;
            let out = bound.conv_out.forward(g, u2)?;
            let flat_out = g.reshape(out, vec![1, spec.height * spec.width])?;
            rows = Some(match rows {
                None => flat_out,
                Some(prev) => g.concat_cols(prev, flat_out)?,
            });
        }
        let stacked = rows.expect("frames >= 1");
        g.reshape(stacked, vec![spec.frames, spec.height * spec.width])
    }
}

/// The Actor, either task flavor behind one surface.
pub enum Actor {
    Optical(OpticalActor),
    Retina(RetinaActor),
}

impl Actor {
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Actor::Optical(a) => a.params(),
            Actor::Retina(a) => a.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Actor::Optical(a) => a.params_mut(),
            Actor::Retina(a) => a.params_mut(),
        }
    }

    pub fn checksum(&self) -> u64 {
        params_checksum(self.params())
    }

    /// Propose a system input for one target, outside any training graph.
    ///
    /// Optical: `target` is the desired output vector, returns phases `[n]`.
    /// Retina: `target` is the exemplar stimulus `[T, H, W]` and `aux` the
    /// desired rates `[T, m]`, returns a stimulus `[T, H, W]`.
    pub fn propose(&self, target: &Tensor, aux: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut binder = Binder::new(BindMode::Frozen);
        match self {
            Actor::Optical(a) => {
                let bound = a.bind(&mut g, &mut binder);
                let t = g.constant(target.reshape(vec![1, a.spec.target_dim])?);
                let out = a.forward_nodes(&mut g, &bound, t)?;
                // phases are periodic: reduce into [0, 1) for the system
                Ok(g.value(out)
                    .reshape(vec![a.spec.n])?
                    .map(|v| v.rem_euclid(1.0)))
            }
            Actor::Retina(a) => {
                let rates = aux.ok_or_else(|| {
                    Error::Invalid("retina actor needs target rates alongside the exemplar".into())
                })?;
                let spec = a.spec.clone();
                let bound = a.bind(&mut g, &mut binder);
                let x = g.constant(target.reshape(vec![spec.frames, spec.height * spec.width])?);
                let y = g.constant(rates.reshape(vec![spec.frames, spec.n_cells])?);
                let out = a.forward_nodes(&mut g, &bound, x, y)?;
                g.value(out)
                    .reshape(vec![spec.frames, spec.height, spec.width])
            }
        }
    }
}

/// Targets for one Actor training step.
pub enum TargetBatch<'a> {
    /// Desired output vectors, each `[m]` (or `[2m]`).
    Optical(&'a [Tensor]),
    /// `(exemplar stimulus [T, H, W], desired rates [T, m])` pairs.
    Retina(&'a [(Tensor, Tensor)]),
}

impl TargetBatch<'_> {
    pub fn len(&self) -> usize {
        match self {
            TargetBatch::Optical(v) => v.len(),
            TargetBatch::Retina(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A built Actor loss graph. Model parameters are bound frozen; after
/// `backward` their gradients are exactly zero.
pub struct ActorLossGraph {
    pub graph: Graph,
    pub loss: NodeId,
    pub actor_param_ids: Vec<NodeId>,
    pub model_param_ids: Vec<NodeId>,
}

/// Actor objective: decode the Actor's proposal through the frozen Model with
/// prior-sampled latents and score against the requested output (MSE for the
/// optical task, Poisson NLL for the retina task), averaged over the batch.
pub fn actor_loss_graph(
    actor: &Actor,
    model: &Vae,
    targets: &TargetBatch,
    rng: &mut Stream,
) -> Result<ActorLossGraph> {
    if targets.is_empty() {
        return Err(Error::Invalid("actor_loss: empty target batch".into()));
    }
    let mut g = Graph::new();
    let mut actor_binder = Binder::new(BindMode::Trainable);
    let mut model_binder = Binder::new(BindMode::Frozen);
    let l = model.latent_dim();
    match (actor, model, targets) {
        (Actor::Optical(a), Vae::Optical(m), TargetBatch::Optical(batch)) => {
            let b = batch.len();
            let dim = a.spec.target_dim;
            if dim != m.spec.m {
                return Err(Error::shape(
                    "actor_loss target dim",
                    &[dim],
                    &[m.spec.m],
                ));
            }
            let mut yd = Vec::with_capacity(b * dim);
            for t in batch.iter() {
                if t.len() != dim {
                    return Err(Error::shape("actor_loss target", t.shape(), &[dim]));
                }
                yd.extend_from_slice(t.data());
            }
            let bound_a = a.bind(&mut g, &mut actor_binder);
            let bound_m = m.bind(&mut g, &mut model_binder);
            let y = g.constant(Tensor::new(vec![b, dim], yd)?);
            let x = a.forward_nodes(&mut g, &bound_a, y)?;
            let z = g.constant(rng::standard_normal(&[b, l], rng));
            let pred = m.decode_nodes(&mut g, &bound_m, z, x)?;
            let loss = g.mse_loss(pred, y)?;
            Ok(ActorLossGraph {
                graph: g,
                loss,
                actor_param_ids: actor_binder.into_ids(),
                model_param_ids: model_binder.into_ids(),
            })
        }
        (Actor::Retina(a), Vae::Retina(m), TargetBatch::Retina(batch)) => {
            let spec = a.spec.clone();
            let y_dim = spec.frames * spec.n_cells;
            let bound_a = a.bind(&mut g, &mut actor_binder);
            let bound_m = m.bind(&mut g, &mut model_binder);
            let mut acc: Option<NodeId> = None;
            for (x_star, y_star) in batch.iter() {
                let x = g.constant(
                    x_star.reshape(vec![spec.frames, spec.height * spec.width])?,
                );
                let y_rows =
                    g.constant(y_star.reshape(vec![spec.frames, spec.n_cells])?);
                let y_flat = g.constant(y_star.reshape(vec![1, y_dim])?);
                let stim = a.forward_nodes(&mut g, &bound_a, x, y_rows)?;
                let z = g.constant(rng::standard_normal(&[1, l], rng));
                let pred = m.decode_nodes(&mut g, &bound_m, z, stim)?;
                let nll = g.poisson_nll(pred, y_flat, true)?;
                acc = Some(match acc {
                    None => nll,
                    Some(prev) => g.add(prev, nll)?,
                });
            }
            let loss = g.scale(acc.unwrap(), 1.0 / batch.len() as f64);
            Ok(ActorLossGraph {
                graph: g,
                loss,
                actor_param_ids: actor_binder.into_ids(),
                model_param_ids: model_binder.into_ids(),
            })
        }
        _ => Err(Error::Invalid(
            "actor_loss: actor, model, and targets belong to different tasks".into(),
        )),
    }
}

/// Scalar convenience wrapper around [`actor_loss_graph`].
pub fn actor_loss(
    actor: &Actor,
    model: &Vae,
    targets: &TargetBatch,
    rng: &mut Stream,
) -> Result<f64> {
    let built = actor_loss_graph(actor, model, targets, rng)?;
    Ok(built.graph.value(built.loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::vae::{DecoderHead, OpticalVae, OpticalVaeSpec, RetinaVae, RetinaVaeSpec};
    use crate::optim::{Adam, AdamHyper};
    use crate::rng::Role;

    fn optical_pair() -> (Actor, Vae) {
        let mut r = rng::stream(15, Role::ParamInit);
        let vae = OpticalVae::init(
            OpticalVaeSpec {
                n: 5,
                m: 7,
                latent_dim: 2,
                decoder_hidden: 0,
                hidden_act: Activation::Sigmoid,
                head: DecoderHead::Identity,
                encode_concat_x: true,
            },
            &mut r,
        );
        let actor = OpticalActor::init(
            OpticalActorSpec {
                target_dim: 7,
                n: 5,
                hidden: 9,
                head: ActorHead::Sigmoid,
            },
            &mut r,
        );
        (Actor::Optical(actor), Vae::Optical(vae))
    }

    #[test]
    fn optical_propose_in_unit_interval() {
        let (actor, _) = optical_pair();
        let target = rng::standard_normal(&[7], &mut rng::stream(3, Role::Dataset));
        let x = actor.propose(&target, None).unwrap();
        assert_eq!(x.shape(), &[5]);
        assert!(x.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn frozen_model_grads_are_zero_actor_grads_are_not() {
        let (actor, model) = optical_pair();
        let targets: Vec<Tensor> = (0..3)
            .map(|_| rng::standard_normal(&[7], &mut rng::stream(4, Role::Dataset)))
            .collect();
        let mut built = actor_loss_graph(
            &actor,
            &model,
            &TargetBatch::Optical(&targets),
            &mut rng::stream(5, Role::ActorPhase),
        )
        .unwrap();
        built.graph.backward(built.loss).unwrap();
        for &id in &built.model_param_ids {
            let g = built.graph.grad(id).unwrap();
            assert!(g.data().iter().all(|&v| v == 0.0), "model grad leaked");
        }
        let any_nonzero = built.actor_param_ids.iter().any(|&id| {
            built
                .graph
                .grad(id)
                .unwrap()
                .data()
                .iter()
                .any(|&v| v != 0.0)
        });
        assert!(any_nonzero, "actor received no gradient");
    }

    #[test]
    fn actor_training_leaves_model_untouched() {
        let (mut actor, model) = optical_pair();
        let model_sum_before = model.checksum();
        let targets: Vec<Tensor> = (0..4)
            .map(|_| rng::standard_normal(&[7], &mut rng::stream(6, Role::Dataset)))
            .collect();
        let mut opt = Adam::for_params(
            actor.params(),
            AdamHyper {
                alpha: 0.01,
                ..Default::default()
            },
        );
        let mut phase = rng::stream(8, Role::ActorPhase);
        let batch = TargetBatch::Optical(&targets);
        let first = actor_loss(&actor, &model, &batch, &mut phase.clone()).unwrap();
        let mut last = first;
        for _ in 0..40 {
            let mut built = actor_loss_graph(&actor, &model, &batch, &mut phase).unwrap();
            built.graph.backward(built.loss).unwrap();
            let grads: Vec<Tensor> = built
                .actor_param_ids
                .iter()
                .map(|&id| built.graph.grad(id).unwrap().clone())
                .collect();
            opt.step(actor.params_mut(), &grads).unwrap();
            last = built.graph.value(built.loss).item();
        }
        assert_eq!(model.checksum(), model_sum_before);
        assert!(last < first, "actor loss did not improve: {first} -> {last}");
    }

    #[test]
    fn retina_actor_roundtrip_shapes() {
        let mut r = rng::stream(16, Role::ParamInit);
        let vae = Vae::Retina(RetinaVae::init(
            RetinaVaeSpec {
                frames: 2,
                height: 8,
                width: 8,
                n_cells: 3,
                latent_dim: 2,
                encoder_hidden: 12,
                decoder_hidden: 12,
                encode_concat_x: false,
            },
            &mut r,
        ));
        let actor = Actor::Retina(
            RetinaActor::init(
                RetinaActorSpec {
                    frames: 2,
                    height: 8,
                    width: 8,
                    n_cells: 3,
                    bottleneck: 4,
                },
                &mut r,
            )
            .unwrap(),
        );
        let x_star = rng::uniform01(&[2, 8, 8], &mut rng::stream(1, Role::Dataset));
        let y_star = rng::uniform01(&[2, 3], &mut rng::stream(2, Role::Dataset)).map(|v| 5.0 + v);
        let stim = actor.propose(&x_star, Some(&y_star)).unwrap();
        assert_eq!(stim.shape(), &[2, 8, 8]);
        assert!(stim.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let pairs = [(x_star, y_star)];
        let loss = actor_loss(
            &actor,
            &vae,
            &TargetBatch::Retina(&pairs),
            &mut rng::stream(3, Role::ActorPhase),
        )
        .unwrap();
        assert!(loss.is_finite());
    }

    #[test]
    fn mismatched_task_flavors_rejected() {
        let (actor, _) = optical_pair();
        let mut r = rng::stream(17, Role::ParamInit);
        let retina = Vae::Retina(RetinaVae::init(
            RetinaVaeSpec {
                frames: 1,
                height: 4,
                width: 4,
                n_cells: 2,
                latent_dim: 2,
                encoder_hidden: 4,
                decoder_hidden: 4,
                encode_concat_x: false,
            },
            &mut r,
        ));
        let targets = [Tensor::zeros(&[7])];
        assert!(actor_loss(
            &actor,
            &retina,
            &TargetBatch::Optical(&targets),
            &mut rng::stream(0, Role::ActorPhase)
        )
        .is_err());
    }

    #[test]
    fn non_divisible_frame_dims_rejected() {
        let mut r = rng::stream(18, Role::ParamInit);
        assert!(RetinaActor::init(
            RetinaActorSpec {
                frames: 1,
                height: 6,
                width: 8,
                n_cells: 2,
                bottleneck: 1,
            },
            &mut r,
        )
        .is_err());
    }
}
