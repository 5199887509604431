//! Conditional beta-VAE forward model: encoder q(z|y), decoder p(y|z, x).
//!
//! Two task-specific architectures share one training surface. The optical
//! model is fully connected; its decoder sees the input phase map through a
//! fixed phasor featurization (cos/sin of the modulation angle), matching how
//! the phase-only modulator drives the physical system. The retina model uses
//! a small convolutional trunk shared across stimulus frames and an
//! exponential rate head.

use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, NodeId};
use crate::models::layers::{Binder, BindMode, BoundConv2d, BoundDense, Conv2dLayer, Dense};
use crate::models::TaskKind;
use crate::rng::{self, Stream};
use crate::systems::SampleTuple;
use crate::tensor::{params_checksum, Tensor};
use std::f64::consts::TAU;

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub prediction: Tensor,
    pub mu: Tensor,
    pub log_var: Tensor,
    pub z: Tensor,
}

/// Output head of the optical decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderHead {
    /// Pointwise sigmoid: predictions constrained to (0,1).
    Sigmoid,
    /// Linear output (used for full-complex field prediction).
    Identity,
    /// Squared complex field: a linear layer predicts 2m field components
    /// (real and imaginary halves) and the head emits their pairwise squared
    /// modulus. Matches the modulus-squared measurement, so an intensity
    /// system is exactly representable.
    Intensity,
}

#[derive(Clone, Debug)]
pub struct OpticalVaeSpec {
    pub n: usize,
    /// Output vector length (m for intensity, 2m for complex pairs).
    pub m: usize,
    pub latent_dim: usize,
    /// 0 selects a linear decoder (no hidden layer).
    pub decoder_hidden: usize,
    pub hidden_act: Activation,
    pub head: DecoderHead,
    pub encode_concat_x: bool,
}

pub struct OpticalVae {
    pub spec: OpticalVaeSpec,
    enc: Dense,
    dec_hidden: Option<Dense>,
    dec_out: Dense,
}

pub struct BoundOpticalVae {
    enc: BoundDense,
    dec_hidden: Option<BoundDense>,
    dec_out: BoundDense,
}

impl OpticalVae {
    pub fn init(spec: OpticalVaeSpec, rng: &mut Stream) -> Self {
        let enc_in = spec.m + if spec.encode_concat_x { spec.n } else { 0 };
        let enc = Dense::init(enc_in, 2 * spec.latent_dim, Activation::Identity, rng);
        let dec_in = spec.latent_dim + 2 * spec.n;
        let (dec_hidden, out_in) = if spec.decoder_hidden > 0 {
            (
                Some(Dense::init(dec_in, spec.decoder_hidden, spec.hidden_act, rng)),
                spec.decoder_hidden,
            )
        } else {
            (None, dec_in)
        };
        let dec_out = match spec.head {
            DecoderHead::Sigmoid => Dense::init(out_in, spec.m, Activation::Sigmoid, rng),
            DecoderHead::Identity => Dense::init(out_in, spec.m, Activation::Identity, rng),
            DecoderHead::Intensity => {
                Dense::init(out_in, 2 * spec.m, Activation::Identity, rng)
            }
        };
        OpticalVae {
            spec,
            enc,
            dec_hidden,
            dec_out,
        }
    }

    pub fn bind(&self, g: &mut Graph, binder: &mut Binder) -> BoundOpticalVae {
        BoundOpticalVae {
            enc: self.enc.bind(g, binder),
            dec_hidden: self.dec_hidden.as_ref().map(|d| d.bind(g, binder)),
            dec_out: self.dec_out.bind(g, binder),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.enc.params();
        if let Some(d) = &self.dec_hidden {
            p.extend(d.params());
        }
        p.extend(self.dec_out.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.enc.params_mut();
        if let Some(d) = &mut self.dec_hidden {
            p.extend(d.params_mut());
        }
        p.extend(self.dec_out.params_mut());
        p
    }

    /// `y: [B, m]` (optionally concatenated with `x: [B, n]`) -> `(mu, log_var)`, each `[B, l]`.
    pub fn encode_nodes(
        &self,
        g: &mut Graph,
        bound: &BoundOpticalVae,
        y: NodeId,
        x: Option<NodeId>,
    ) -> Result<(NodeId, NodeId)> {
        let input = if self.spec.encode_concat_x {
            let x = x.ok_or_else(|| {
                Error::Invalid("encoder configured to concat x but none given".into())
            })?;
            g.concat_cols(y, x)?
        } else {
            y
        };
        let out = bound.enc.forward(g, input)?;
        let l = self.spec.latent_dim;
        let mu = g.slice_cols(out, 0, l)?;
        let log_var = g.slice_cols(out, l, 2 * l)?;
        Ok((mu, log_var))
    }

    /// `z: [B, l]`, `x: [B, n]` phase maps -> prediction `[B, m]`.
    pub fn decode_nodes(
        &self,
        g: &mut Graph,
        bound: &BoundOpticalVae,
        z: NodeId,
        x: NodeId,
    ) -> Result<NodeId> {
        let angle = g.scale(x, TAU);
        let c = g.activation(angle, Activation::Cos);
        let s = g.activation(angle, Activation::Sin);
        let phasor = g.concat_cols(c, s)?;
        let input = g.concat_cols(z, phasor)?;
        let h = match &bound.dec_hidden {
            Some(d) => d.forward(g, input)?,
            None => input,
        };
        let out = bound.dec_out.forward(g, h)?;
        match self.spec.head {
            DecoderHead::Sigmoid | DecoderHead::Identity => Ok(out),
            DecoderHead::Intensity => {
                let m = self.spec.m;
                let re = g.slice_cols(out, 0, m)?;
                let im = g.slice_cols(out, m, 2 * m)?;
                let re2 = g.mul(re, re)?;
                let im2 = g.mul(im, im)?;
                g.add(re2, im2)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct RetinaVaeSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub n_cells: usize,
    pub latent_dim: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub encode_concat_x: bool,
}

pub struct RetinaVae {
    pub spec: RetinaVaeSpec,
    enc_hidden: Dense,
    enc_out: Dense,
    dec_conv1: Conv2dLayer,
    dec_conv2: Conv2dLayer,
    dec_fc: Dense,
    dec_out: Dense,
}

pub struct BoundRetinaVae {
    enc_hidden: BoundDense,
    enc_out: BoundDense,
    dec_conv1: BoundConv2d,
    dec_conv2: BoundConv2d,
    dec_fc: BoundDense,
    dec_out: BoundDense,
}

const DEC_C1: usize = 8;
const DEC_C2: usize = 4;

impl RetinaVae {
    pub fn init(spec: RetinaVaeSpec, rng: &mut Stream) -> Self {
        use crate::graph::Padding;
        let y_dim = spec.frames * spec.n_cells;
        let enc_in = y_dim
            + if spec.encode_concat_x {
                spec.frames * spec.height * spec.width
            } else {
                0
            };
        let enc_hidden = Dense::init(enc_in, spec.encoder_hidden, Activation::Relu, rng);
        let enc_out = Dense::init(
            spec.encoder_hidden,
            2 * spec.latent_dim,
            Activation::Identity,
            rng,
        );
        let dec_conv1 =
            Conv2dLayer::init(1, DEC_C1, 3, 3, Padding::Same, Activation::Relu, rng);
        let dec_conv2 =
            Conv2dLayer::init(DEC_C1, DEC_C2, 3, 3, Padding::Same, Activation::Relu, rng);
        let feat = Self::feature_dim(&spec);
        let dec_fc = Dense::init(
            feat + spec.latent_dim,
            spec.decoder_hidden,
            Activation::Relu,
            rng,
        );
        let dec_out = Dense::init(
            spec.decoder_hidden,
            spec.n_cells,
            Activation::Exponential,
            rng,
        );
        RetinaVae {
            spec,
            enc_hidden,
            enc_out,
            dec_conv1,
            dec_conv2,
            dec_fc,
            dec_out,
        }
    }

    fn feature_dim(spec: &RetinaVaeSpec) -> usize {
        DEC_C2 * spec.height.div_ceil(2).div_ceil(2) * spec.width.div_ceil(2).div_ceil(2)
    }

    pub fn bind(&self, g: &mut Graph, binder: &mut Binder) -> BoundRetinaVae {
        BoundRetinaVae {
            enc_hidden: self.enc_hidden.bind(g, binder),
            enc_out: self.enc_out.bind(g, binder),
            dec_conv1: self.dec_conv1.bind(g, binder),
            dec_conv2: self.dec_conv2.bind(g, binder),
            dec_fc: self.dec_fc.bind(g, binder),
            dec_out: self.dec_out.bind(g, binder),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.enc_hidden.params();
        p.extend(self.enc_out.params());
        p.extend(self.dec_conv1.params());
        p.extend(self.dec_conv2.params());
        p.extend(self.dec_fc.params());
        p.extend(self.dec_out.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.enc_hidden.params_mut();
        p.extend(self.enc_out.params_mut());
        p.extend(self.dec_conv1.params_mut());
        p.extend(self.dec_conv2.params_mut());
        p.extend(self.dec_fc.params_mut());
        p.extend(self.dec_out.params_mut());
        p
    }

    /// `y: [1, frames * n_cells]` -> `(mu, log_var)`, each `[1, l]`.
    pub fn encode_nodes(
        &self,
        g: &mut Graph,
        bound: &BoundRetinaVae,
        y: NodeId,
        x: Option<NodeId>,
    ) -> Result<(NodeId, NodeId)> {
        let input = if self.spec.encode_concat_x {
            let x = x.ok_or_else(|| {
                Error::Invalid("encoder configured to concat x but none given".into())
            })?;
            g.concat_cols(y, x)?
        } else {
            y
        };
        let h = bound.enc_hidden.forward(g, input)?;
        let out = bound.enc_out.forward(g, h)?;
        let l = self.spec.latent_dim;
        let mu = g.slice_cols(out, 0, l)?;
        let log_var = g.slice_cols(out, l, 2 * l)?;
        Ok((mu, log_var))
    }

    /// `z: [1, l]`, `x: [frames, height * width]` -> rates `[1, frames * n_cells]`.
    pub fn decode_nodes(
        &self,
        g: &mut Graph,
        bound: &BoundRetinaVae,
        z: NodeId,
        x: NodeId,
    ) -> Result<NodeId> {
        let spec = &self.spec;
        let feat = Self::feature_dim(spec);
        let mut rows: Option<NodeId> = None;
        for t in 0..spec.frames {
            let row = g.slice_rows(x, t, t + 1)?;
            let frame = g.reshape(row, vec![1, spec.height, spec.width])?;
            let c1 = bound.dec_conv1.forward(g, frame)?;
            let p1 = g.maxpool2x2(c1)?;
            let c2 = bound.dec_conv2.forward(g, p1)?;
            let p2 = g.maxpool2x2(c2)?;
            let flat = g.reshape(p2, vec![1, feat])?;
            let joint = g.concat_cols(z, flat)?;
            let h = bound.dec_fc.forward(g, joint)?;
            let rates = bound.dec_out.forward(g, h)?;
            rows = Some(match rows {
                None => rates,
                Some(prev) => g.concat_cols(prev, rates)?,
            });
        }
        Ok(rows.expect("frames >= 1"))
    }
}

/// The forward Model, either task flavor behind one surface.
pub enum Vae {
    Optical(OpticalVae),
    Retina(RetinaVae),
}

impl Vae {
    pub fn task_kind(&self) -> TaskKind {
        match self {
            Vae::Optical(_) => TaskKind::Optical,
            Vae::Retina(_) => TaskKind::Retina,
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            Vae::Optical(v) => v.spec.latent_dim,
            Vae::Retina(v) => v.spec.latent_dim,
        }
    }

    /// Flat output length of one prediction.
    pub fn output_len(&self) -> usize {
        match self {
            Vae::Optical(v) => v.spec.m,
            Vae::Retina(v) => v.spec.frames * v.spec.n_cells,
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Vae::Optical(v) => v.params(),
            Vae::Retina(v) => v.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Vae::Optical(v) => v.params_mut(),
            Vae::Retina(v) => v.params_mut(),
        }
    }

    pub fn checksum(&self) -> u64 {
        params_checksum(self.params())
    }

    fn flat_input(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Vae::Optical(v) => x.reshape(vec![1, v.spec.n]),
            Vae::Retina(v) => x.reshape(vec![v.spec.frames, v.spec.height * v.spec.width]),
        }
    }

    fn flat_output(&self, y: &Tensor) -> Result<Tensor> {
        Ok(y.reshape(vec![1, self.output_len()])?)
    }

    /// Deterministic encoder pass on one observation.
    pub fn encode(&self, y: &Tensor, x: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let mut binder = Binder::new(BindMode::Frozen);
        let y_node = g.constant(self.flat_output(y)?);
        let x_node = match x {
            Some(x) => Some(g.constant(self.flat_input(x)?.reshape(vec![1, x.len()])?)),
            None => None,
        };
        let (mu, lv) = match self {
            Vae::Optical(v) => {
                let bound = v.bind(&mut g, &mut binder);
                v.encode_nodes(&mut g, &bound, y_node, x_node)?
            }
            Vae::Retina(v) => {
                let bound = v.bind(&mut g, &mut binder);
                v.encode_nodes(&mut g, &bound, y_node, x_node)?
            }
        };
        let l = self.latent_dim();
        Ok((
            g.value(mu).reshape(vec![l])?,
            g.value(lv).reshape(vec![l])?,
        ))
    }

    /// Deterministic decoder pass for a given latent and system input.
    pub fn decode(&self, z: &Tensor, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut binder = Binder::new(BindMode::Frozen);
        let z_node = g.constant(z.reshape(vec![1, self.latent_dim()])?);
        let x_node = g.constant(self.flat_input(x)?);
        let pred = match self {
            Vae::Optical(v) => {
                let bound = v.bind(&mut g, &mut binder);
                v.decode_nodes(&mut g, &bound, z_node, x_node)?
            }
            Vae::Retina(v) => {
                let bound = v.bind(&mut g, &mut binder);
                v.decode_nodes(&mut g, &bound, z_node, x_node)?
            }
        };
        self.shape_prediction(g.value(pred))
    }

    fn shape_prediction(&self, flat: &Tensor) -> Result<Tensor> {
        match self {
            Vae::Optical(v) => flat.reshape(vec![v.spec.m]),
            Vae::Retina(v) => flat.reshape(vec![v.spec.frames, v.spec.n_cells]),
        }
    }

    /// Training-mode forward: encode -> reparameterize -> decode.
    pub fn model_forward(&self, x: &Tensor, y: &Tensor, rng: &mut Stream) -> Result<ModelOutput> {
        let (mu, log_var) = self.encode(y, Some(x))?;
        let eps = rng::standard_normal(&[self.latent_dim()], rng);
        let z_data: Vec<f64> = mu
            .data()
            .iter()
            .zip(log_var.data())
            .zip(eps.data())
            .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
            .collect();
        let z = Tensor::from_vec(z_data);
        let prediction = self.decode(&z, x)?;
        Ok(ModelOutput {
            prediction,
            mu,
            log_var,
            z,
        })
    }

    /// Generation-mode forward: z drawn from the prior N(0, I).
    pub fn generate(&self, x: &Tensor, rng: &mut Stream) -> Result<ModelOutput> {
        let l = self.latent_dim();
        let z = rng::standard_normal(&[l], rng);
        let prediction = self.decode(&z, x)?;
        Ok(ModelOutput {
            prediction,
            mu: Tensor::zeros(&[l]),
            log_var: Tensor::zeros(&[l]),
            z,
        })
    }
}

/// A built VAE loss graph ready for `backward` + optimizer step.
pub struct VaeLossGraph {
    pub graph: Graph,
    pub loss: NodeId,
    pub recon: NodeId,
    pub kl: NodeId,
    pub param_ids: Vec<NodeId>,
}

/// Reconstruction + beta * KL, both averaged over the batch. Reconstruction is
/// mean squared error for the optical task and Poisson NLL (clamped rates) for
/// the retina task.
pub fn vae_loss_graph(
    vae: &Vae,
    batch: &[SampleTuple],
    beta: f64,
    rng: &mut Stream,
) -> Result<VaeLossGraph> {
    if batch.is_empty() {
        return Err(Error::Invalid("vae_loss: empty batch".into()));
    }
    let mut g = Graph::new();
    let mut binder = Binder::new(BindMode::Trainable);
    let b = batch.len();
    let l = vae.latent_dim();
    match vae {
        Vae::Optical(v) => {
            let bound = v.bind(&mut g, &mut binder);
            let (n, m) = (v.spec.n, v.spec.m);
            let mut xd = Vec::with_capacity(b * n);
            let mut yd = Vec::with_capacity(b * m);
            for s in batch {
                if s.x.len() != n || s.y.len() != m {
                    return Err(Error::shape("vae_loss batch", s.x.shape(), &[n]));
                }
                xd.extend_from_slice(s.x.data());
                yd.extend_from_slice(s.y.data());
            }
            let x = g.constant(Tensor::new(vec![b, n], xd)?);
            let y = g.constant(Tensor::new(vec![b, m], yd)?);
            let (mu, log_var) = v.encode_nodes(&mut g, &bound, y, Some(x))?;
            let eps = rng::standard_normal(&[b, l], rng);
            let z = g.reparameterize(mu, log_var, eps)?;
            let pred = v.decode_nodes(&mut g, &bound, z, x)?;
            let recon = g.mse_loss(pred, y)?;
            let kl_total = g.kl_diag_gaussian(mu, log_var)?;
            let kl = g.scale(kl_total, 1.0 / b as f64);
            let weighted = g.scale(kl, beta);
            let loss = g.add(recon, weighted)?;
            Ok(VaeLossGraph {
                graph: g,
                loss,
                recon,
                kl,
                param_ids: binder.into_ids(),
            })
        }
        Vae::Retina(v) => {
            let bound = v.bind(&mut g, &mut binder);
            let spec = v.spec.clone();
            let y_dim = spec.frames * spec.n_cells;
            let mut recon_acc: Option<NodeId> = None;
            let mut kl_acc: Option<NodeId> = None;
            for s in batch {
                let x = g.constant(
                    s.x.reshape(vec![spec.frames, spec.height * spec.width])?,
                );
                let y = g.constant(s.y.reshape(vec![1, y_dim])?);
                let x_flat = if spec.encode_concat_x {
                    Some(g.reshape(x, vec![1, spec.frames * spec.height * spec.width])?)
                } else {
                    None
                };
                let (mu, log_var) = v.encode_nodes(&mut g, &bound, y, x_flat)?;
                let eps = rng::standard_normal(&[1, l], rng);
                let z = g.reparameterize(mu, log_var, eps)?;
                let pred = v.decode_nodes(&mut g, &bound, z, x)?;
                let recon_i = g.poisson_nll(pred, y, true)?;
                let kl_i = g.kl_diag_gaussian(mu, log_var)?;
                recon_acc = Some(match recon_acc {
                    None => recon_i,
                    Some(prev) => g.add(prev, recon_i)?,
                });
                kl_acc = Some(match kl_acc {
                    None => kl_i,
                    Some(prev) => g.add(prev, kl_i)?,
                });
            }
            let recon = g.scale(recon_acc.unwrap(), 1.0 / b as f64);
            let kl = g.scale(kl_acc.unwrap(), 1.0 / b as f64);
            let weighted = g.scale(kl, beta);
            let loss = g.add(recon, weighted)?;
            Ok(VaeLossGraph {
                graph: g,
                loss,
                recon,
                kl,
                param_ids: binder.into_ids(),
            })
        }
    }
}

/// Scalar convenience wrapper around [`vae_loss_graph`].
pub fn vae_loss(vae: &Vae, batch: &[SampleTuple], beta: f64, rng: &mut Stream) -> Result<f64> {
    let built = vae_loss_graph(vae, batch, beta, rng)?;
    Ok(built.graph.value(built.loss).item())
}
