//! Finite-difference validation of analytic gradients.
//!
//! Every registered operation (and, once the models are wired, both full task
//! losses) is checked against central differences on toy shapes. The harness
//! treats the graph as a black box: the loss is re-evaluated from scratch for
//! every coordinate probe, so the oracle never shares code with `backward`.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn line(&self) -> String {
        format!(
            "{:<28} max_rel_err={:>12.3e} tol={:>8.1e}  {}",
            self.name,
            self.max_rel_err,
            self.tol,
            if self.pass { "pass" } else { "FAIL" }
        )
    }
}

/// Builds a scalar loss node from parameter nodes inserted in order.
pub type LossBuilder<'a> = &'a dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>;

fn evaluate(params: &[Tensor], build: LossBuilder) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &ids)?;
    let value = g.value(loss).item();
    g.backward(loss)?;
    let grads = ids.iter().map(|&id| g.grad(id).unwrap().clone()).collect();
    Ok((value, grads))
}

fn evaluate_value(params: &[Tensor], build: LossBuilder) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &ids)?;
    Ok(g.value(loss).item())
}

/// Central-difference check: `(f(p+h) - f(p-h)) / 2h` per coordinate against
/// the analytic gradient. The relative error uses an absolute floor of 1e-4
/// on the denominator so near-zero gradients do not produce spurious blowups.
pub fn finite_difference_check(
    name: &str,
    params: &[Tensor],
    h: f64,
    tol: f64,
    build: LossBuilder,
) -> Result<GradCheckReport> {
    finite_difference_check_inner(name, params, h, tol, build, false)
}

/// Negative-control variant: perturbs one analytic gradient coordinate so the
/// check must fail. Exists so the harness itself can be tested.
pub fn finite_difference_check_sabotaged(
    name: &str,
    params: &[Tensor],
    h: f64,
    tol: f64,
    build: LossBuilder,
) -> Result<GradCheckReport> {
    finite_difference_check_inner(name, params, h, tol, build, true)
}

fn finite_difference_check_inner(
    name: &str,
    params: &[Tensor],
    h: f64,
    tol: f64,
    build: LossBuilder,
    sabotage: bool,
) -> Result<GradCheckReport> {
    assert!(h > 0.0, "finite difference step must be positive");
    let (_, mut analytic) = evaluate(params, build)?;
    if sabotage {
        analytic[0].data_mut()[0] += 0.05;
    }
    let mut max_rel_err = 0.0f64;
    let mut probe: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for ci in 0..p.len() {
            let orig = p.data()[ci];
            probe[pi].data_mut()[ci] = orig + h;
            let plus = evaluate_value(&probe, build)?;
            probe[pi].data_mut()[ci] = orig - h;
            let minus = evaluate_value(&probe, build)?;
            probe[pi].data_mut()[ci] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let a = analytic[pi].data()[ci];
            let denom = a.abs().max(fd.abs()).max(1e-4);
            let rel = (a - fd).abs() / denom;
            if rel > max_rel_err {
                max_rel_err = rel;
            }
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err,
        tol,
        pass: max_rel_err < tol,
    })
}

/// One check per registered graph operation plus both full task losses.
/// `sabotage` perturbs the first row's analytic gradient as a negative
/// control for the harness itself.
pub fn standard_suite(seed: u64, sabotage: bool) -> Result<Vec<GradCheckReport>> {
    suite::run(seed, sabotage)
}

mod suite {
    use super::*;
    use crate::graph::{Activation, Padding};
    use crate::models::layers::{BoundConv2d, BoundDense};
    use crate::rng::{self, Role, Stream};
    use std::f64::consts::TAU;

    const H: f64 = 1e-5;
    const TOL: f64 = 1e-3;

    fn normal(shape: &[usize], r: &mut Stream) -> Tensor {
        rng::standard_normal(shape, r)
    }

    /// Standard normals shifted away from zero so relu kinks and maxpool
    /// argmax switches stay outside the probe radius.
    fn kink_safe(shape: &[usize], r: &mut Stream) -> Tensor {
        normal(shape, r).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
    }

    pub fn run(seed: u64, sabotage: bool) -> Result<Vec<GradCheckReport>> {
        let mut r = rng::stream(seed, Role::ParamInit);
        let mut reports = Vec::new();
        let mut first = sabotage;
        let mut check =
            |name: &str, params: &[Tensor], build: LossBuilder, out: &mut Vec<GradCheckReport>| {
                let rep = if std::mem::take(&mut first) {
                    finite_difference_check_sabotaged(name, params, H, TOL, build)
                } else {
                    finite_difference_check(name, params, H, TOL, build)
                };
                rep.map(|x| out.push(x))
            };

        // ---- elementwise / linear ops ----
        let a = normal(&[3, 4], &mut r);
        let b = normal(&[4, 2], &mut r);
        check("matmul", &[a, b], &|g, ids| {
            let y = g.matmul(ids[0], ids[1])?;
            Ok(g.sum_all(y))
        }, &mut reports)?;

        let a = normal(&[2, 3], &mut r);
        let b = normal(&[2, 3], &mut r);
        check("add", &[a, b], &|g, ids| {
            let y = g.add(ids[0], ids[1])?;
            let sq = g.mul(y, y)?;
            Ok(g.sum_all(sq))
        }, &mut reports)?;

        let a = normal(&[3, 4], &mut r);
        let b = normal(&[4], &mut r);
        check("add_row_broadcast", &[a, b], &|g, ids| {
            let y = g.add_row_broadcast(ids[0], ids[1])?;
            let sq = g.mul(y, y)?;
            Ok(g.sum_all(sq))
        }, &mut reports)?;

        let a = normal(&[2, 3, 3], &mut r);
        let b = normal(&[2], &mut r);
        check("add_channel_broadcast", &[a, b], &|g, ids| {
            let y = g.add_channel_broadcast(ids[0], ids[1])?;
            let sq = g.mul(y, y)?;
            Ok(g.sum_all(sq))
        }, &mut reports)?;

        let a = normal(&[2, 3], &mut r);
        let b = normal(&[2, 3], &mut r);
        check("mul", &[a, b], &|g, ids| {
            let y = g.mul(ids[0], ids[1])?;
            Ok(g.sum_all(y))
        }, &mut reports)?;

        let a = normal(&[5], &mut r);
        check("scale", &[a], &|g, ids| {
            let y = g.scale(ids[0], -1.75);
            let sq = g.mul(y, y)?;
            Ok(g.sum_all(sq))
        }, &mut reports)?;

        for (name, act) in [
            ("relu", Activation::Relu),
            ("sigmoid", Activation::Sigmoid),
            ("exponential", Activation::Exponential),
            ("identity", Activation::Identity),
            ("cos", Activation::Cos),
            ("sin", Activation::Sin),
        ] {
            let a = kink_safe(&[2, 4], &mut r);
            check(&format!("activation_{name}"), &[a], &move |g, ids| {
                let y = g.activation(ids[0], act);
                let sq = g.mul(y, y)?;
                Ok(g.sum_all(sq))
            }, &mut reports)?;
        }

        // ---- structural ops ----
        for (name, padding) in [("conv2d_same", Padding::Same), ("conv2d_valid", Padding::None)] {
            let x = normal(&[2, 4, 4], &mut r);
            let k = normal(&[3, 2, 3, 3], &mut r);
            let b = normal(&[3], &mut r);
            check(name, &[x, k, b], &move |g, ids| {
                let y = g.conv2d(ids[0], ids[1], 1, padding)?;
                let y = g.add_channel_broadcast(y, ids[2])?;
                let sq = g.mul(y, y)?;
                Ok(g.sum_all(sq))
            }, &mut reports)?;
        }

        let x = kink_safe(&[2, 4, 4], &mut r);
        check("maxpool2x2", &[x], &|g, ids| {
            let y = g.maxpool2x2(ids[0])?;
            let sq = g.mul(y, y)?;
            Ok(g.sum_all(sq))
        }, &mut reports)?;

        let x = normal(&[2, 2, 2], &mut r);
        check("upsample2x2", &[x], &|g, ids| {
            let y = g.upsample2x2(ids[0])?;
            let sq = g.mul(y, y)?;
            Ok(g.sum_all(sq))
        }, &mut reports)?;

        let x = normal(&[1, 2, 2], &mut r);
        check("zero_pad4", &[x], &|g, ids| {
            let y = g.zero_pad4(ids[0], 1)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum_all(sq))
        }, &mut reports)?;

        let x = normal(&[2, 6], &mut r);
        check("reshape", &[x], &|g, ids| {
            let y = g.reshape(ids[0], vec![3, 4])?;
            let sq = g.mul(y, y)?;
            Ok(g.sum_all(sq))
        }, &mut reports)?;

        let a = normal(&[2, 3], &mut r);
        let b = normal(&[2, 2], &mut r);
        check("concat_cols", &[a, b], &|g, ids| {
            let y = g.concat_cols(ids[0], ids[1])?;
            let sq = g.mul(y, y)?;
            Ok(g.sum_all(sq))
        }, &mut reports)?;

        let x = normal(&[2, 5], &mut r);
        check("slice_cols", &[x], &|g, ids| {
            let y = g.slice_cols(ids[0], 1, 4)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum_all(sq))
        }, &mut reports)?;

        let x = normal(&[4, 3], &mut r);
        check("slice_rows", &[x], &|g, ids| {
            let y = g.slice_rows(ids[0], 1, 3)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum_all(sq))
        }, &mut reports)?;

        // ---- reductions and losses ----
        let x = normal(&[2, 3], &mut r);
        check("mean_all", &[x], &|g, ids| {
            let sq = g.mul(ids[0], ids[0])?;
            Ok(g.mean_all(sq))
        }, &mut reports)?;

        let x = normal(&[2, 3], &mut r);
        check("sum_all", &[x], &|g, ids| {
            let sq = g.mul(ids[0], ids[0])?;
            Ok(g.sum_all(sq))
        }, &mut reports)?;

        let pred = normal(&[2, 4], &mut r);
        let target = normal(&[2, 4], &mut r);
        check("mse_loss", &[pred], &move |g, ids| {
            let t = g.constant(target.clone());
            g.mse_loss(ids[0], t)
        }, &mut reports)?;

        let raw = normal(&[2, 3], &mut r);
        let counts = rng::uniform01(&[2, 3], &mut r).map(|v| (v * 5.0).round());
        check("poisson_nll", &[raw], &move |g, ids| {
            // exp keeps rates positive for every probe
            let rate = g.activation(ids[0], Activation::Exponential);
            let c = g.constant(counts.clone());
            g.poisson_nll(rate, c, false)
        }, &mut reports)?;

        let mu = normal(&[2, 3], &mut r);
        let lv = normal(&[2, 3], &mut r);
        check("kl_diag_gaussian", &[mu, lv], &|g, ids| {
            g.kl_diag_gaussian(ids[0], ids[1])
        }, &mut reports)?;

        let mu = normal(&[2, 3], &mut r);
        let lv = normal(&[2, 3], &mut r);
        let eps = normal(&[2, 3], &mut r);
        check("reparameterize", &[mu, lv], &move |g, ids| {
            let z = g.reparameterize(ids[0], ids[1], eps.clone())?;
            let sq = g.mul(z, z)?;
            Ok(g.sum_all(sq))
        }, &mut reports)?;

        // ---- full task losses ----
        reports.push(optical_vae_loss_check(&mut r)?);
        reports.push(optical_intensity_head_check(&mut r)?);
        reports.push(retina_vae_loss_check(&mut r)?);
        reports.push(optical_actor_loss_check(&mut r)?);
        reports.push(retina_actor_loss_check(&mut r)?);
        Ok(reports)
    }

    /// Full optical Model loss: encoder -> reparameterize -> phasor-featurized
    /// decoder -> MSE + beta * KL.
    fn optical_vae_loss_check(r: &mut Stream) -> Result<GradCheckReport> {
        let (n, m, l, hid) = (3usize, 4usize, 2usize, 5usize);
        let params = [
            normal(&[m + n, 2 * l], r), // enc w
            normal(&[2 * l], r),        // enc b
            normal(&[l + 2 * n, hid], r),
            normal(&[hid], r),
            normal(&[hid, m], r),
            normal(&[m], r),
        ];
        let x = rng::uniform01(&[1, n], r);
        let y = normal(&[1, m], r);
        let eps = normal(&[1, l], r);
        let build = move |g: &mut Graph, ids: &[NodeId]| -> Result<NodeId> {
            let xc = g.constant(x.clone());
            let yc = g.constant(y.clone());
            let enc = BoundDense { w: ids[0], b: ids[1], act: Activation::Identity };
            let hid_l = BoundDense { w: ids[2], b: ids[3], act: Activation::Sigmoid };
            let out = BoundDense { w: ids[4], b: ids[5], act: Activation::Sigmoid };
            let joint = g.concat_cols(yc, xc)?;
            let stats = enc.forward(g, joint)?;
            let mu = g.slice_cols(stats, 0, l)?;
            let lv = g.slice_cols(stats, l, 2 * l)?;
            let z = g.reparameterize(mu, lv, eps.clone())?;
            let angle = g.scale(xc, TAU);
            let c = g.activation(angle, Activation::Cos);
            let s = g.activation(angle, Activation::Sin);
            let phasor = g.concat_cols(c, s)?;
            let dec_in = g.concat_cols(z, phasor)?;
            let h = hid_l.forward(g, dec_in)?;
            let pred = out.forward(g, h)?;
            let recon = g.mse_loss(pred, yc)?;
            let kl = g.kl_diag_gaussian(mu, lv)?;
            let weighted = g.scale(kl, 0.5);
            g.add(recon, weighted)
        };
        finite_difference_check("vae_loss_optical", &params, H, TOL, &build)
    }

    /// Optical Model loss with the squared-field intensity head: a linear
    /// layer predicts 2m field components whose pairwise squared modulus is
    /// the intensity prediction.
    fn optical_intensity_head_check(r: &mut Stream) -> Result<GradCheckReport> {
        let (n, m, l) = (3usize, 4usize, 2usize);
        let params = [
            normal(&[m + n, 2 * l], r), // enc w
            normal(&[2 * l], r),        // enc b
            normal(&[l + 2 * n, 2 * m], r),
            normal(&[2 * m], r),
        ];
        let x = rng::uniform01(&[1, n], r);
        let y = normal(&[1, m], r);
        let eps = normal(&[1, l], r);
        let build = move |g: &mut Graph, ids: &[NodeId]| -> Result<NodeId> {
            let xc = g.constant(x.clone());
            let yc = g.constant(y.clone());
            let enc = BoundDense { w: ids[0], b: ids[1], act: Activation::Identity };
            let out = BoundDense { w: ids[2], b: ids[3], act: Activation::Identity };
            let joint = g.concat_cols(yc, xc)?;
            let stats = enc.forward(g, joint)?;
            let mu = g.slice_cols(stats, 0, l)?;
            let lv = g.slice_cols(stats, l, 2 * l)?;
            let z = g.reparameterize(mu, lv, eps.clone())?;
            let angle = g.scale(xc, TAU);
            let c = g.activation(angle, Activation::Cos);
            let s = g.activation(angle, Activation::Sin);
            let phasor = g.concat_cols(c, s)?;
            let dec_in = g.concat_cols(z, phasor)?;
            let field = out.forward(g, dec_in)?;
            let re = g.slice_cols(field, 0, m)?;
            let im = g.slice_cols(field, m, 2 * m)?;
            let re2 = g.mul(re, re)?;
            let im2 = g.mul(im, im)?;
            let pred = g.add(re2, im2)?;
            let recon = g.mse_loss(pred, yc)?;
            let kl = g.kl_diag_gaussian(mu, lv)?;
            let weighted = g.scale(kl, 0.5);
            g.add(recon, weighted)
        };
        finite_difference_check("vae_loss_optical_intensity", &params, H, TOL, &build)
    }

    /// Full retina Model loss: MLP encoder -> reparameterize -> conv decoder
    /// with exponential rate head -> Poisson NLL + beta * KL.
    fn retina_vae_loss_check(r: &mut Stream) -> Result<GradCheckReport> {
        let (hgt, wid, cells, l, enc_h) = (4usize, 4usize, 2usize, 2usize, 4usize);
        let feat = 2usize; // 2 channels * 1 * 1 after two pools of 4x4
        let params = [
            normal(&[cells, enc_h], r),
            normal(&[enc_h], r),
            normal(&[enc_h, 2 * l], r),
            normal(&[2 * l], r),
            normal(&[2, 1, 3, 3], r), // conv1
            normal(&[2], r),
            normal(&[2, 2, 3, 3], r), // conv2
            normal(&[2], r),
            normal(&[feat + l, 4], r), // fc
            normal(&[4], r),
            normal(&[4, cells], r), // out
            normal(&[cells], r),
        ];
        let x = rng::uniform01(&[1, hgt, wid], r);
        let y = rng::uniform01(&[1, cells], r).map(|v| (v * 4.0).round());
        let eps = normal(&[1, l], r);
        let build = move |g: &mut Graph, ids: &[NodeId]| -> Result<NodeId> {
            let xc = g.constant(x.clone());
            let yc = g.constant(y.clone());
            let enc_hid = BoundDense { w: ids[0], b: ids[1], act: Activation::Relu };
            let enc_out = BoundDense { w: ids[2], b: ids[3], act: Activation::Identity };
            let conv1 = BoundConv2d {
                k: ids[4], b: ids[5], stride: 1, padding: Padding::Same, act: Activation::Relu,
            };
            let conv2 = BoundConv2d {
                k: ids[6], b: ids[7], stride: 1, padding: Padding::Same, act: Activation::Relu,
            };
            let fc = BoundDense { w: ids[8], b: ids[9], act: Activation::Relu };
            let out = BoundDense { w: ids[10], b: ids[11], act: Activation::Exponential };
            let h = enc_hid.forward(g, yc)?;
            let stats = enc_out.forward(g, h)?;
            let mu = g.slice_cols(stats, 0, l)?;
            let lv = g.slice_cols(stats, l, 2 * l)?;
            let z = g.reparameterize(mu, lv, eps.clone())?;
            let c1 = conv1.forward(g, xc)?;
            let p1 = g.maxpool2x2(c1)?;
            let c2 = conv2.forward(g, p1)?;
            let p2 = g.maxpool2x2(c2)?;
            let flat = g.reshape(p2, vec![1, feat])?;
            let joint = g.concat_cols(z, flat)?;
            let hd = fc.forward(g, joint)?;
            let rates = out.forward(g, hd)?;
            let recon = g.poisson_nll(rates, yc, true)?;
            let kl = g.kl_diag_gaussian(mu, lv)?;
            let weighted = g.scale(kl, 0.5);
            g.add(recon, weighted)
        };
        finite_difference_check("vae_loss_retina", &params, H, TOL, &build)
    }

    /// Full optical Actor loss: actor proposes phases, frozen decoder predicts
    /// the outcome with a prior latent, MSE against the requested target.
    fn optical_actor_loss_check(r: &mut Stream) -> Result<GradCheckReport> {
        let (n, m, l, ah) = (3usize, 4usize, 2usize, 4usize);
        let params = [
            normal(&[m, ah], r),
            normal(&[ah], r),
            normal(&[ah, n], r),
            normal(&[n], r),
        ];
        let dec_w = normal(&[l + 2 * n, m], r);
        let dec_b = normal(&[m], r);
        let target = normal(&[1, m], r);
        let z = normal(&[1, l], r);
        let build = move |g: &mut Graph, ids: &[NodeId]| -> Result<NodeId> {
            let t = g.constant(target.clone());
            let hid = BoundDense { w: ids[0], b: ids[1], act: Activation::Relu };
            let out = BoundDense { w: ids[2], b: ids[3], act: Activation::Sigmoid };
            let h = hid.forward(g, t)?;
            let phases = out.forward(g, h)?;
            let dec = BoundDense {
                w: g.constant(dec_w.clone()),
                b: g.constant(dec_b.clone()),
                act: Activation::Identity,
            };
            let zc = g.constant(z.clone());
            let angle = g.scale(phases, TAU);
            let c = g.activation(angle, Activation::Cos);
            let s = g.activation(angle, Activation::Sin);
            let phasor = g.concat_cols(c, s)?;
            let dec_in = g.concat_cols(zc, phasor)?;
            let pred = dec.forward(g, dec_in)?;
            g.mse_loss(pred, t)
        };
        finite_difference_check("actor_loss_optical", &params, H, TOL, &build)
    }

    /// Full retina Actor loss: bottlenecked conv Actor proposes a stimulus,
    /// frozen conv decoder rates it, Poisson NLL against the requested rates.
    fn retina_actor_loss_check(r: &mut Stream) -> Result<GradCheckReport> {
        let (hgt, wid, cells, l, bott) = (4usize, 4usize, 2usize, 2usize, 2usize);
        let feat = 2usize;
        let params = [
            normal(&[2, 1, 3, 3], r), // actor conv1
            normal(&[2], r),
            normal(&[2, 2, 3, 3], r), // actor conv2
            normal(&[2], r),
            normal(&[feat + cells, bott], r), // fc_in
            normal(&[bott], r),
            normal(&[bott, feat], r), // fc_out
            normal(&[feat], r),
            normal(&[2, 2, 3, 3], r), // conv3
            normal(&[2], r),
            normal(&[2, 2, 3, 3], r), // conv4
            normal(&[2], r),
            normal(&[1, 2, 3, 3], r), // conv_out
            normal(&[1], r),
        ];
        // frozen decoder
        let dk1 = normal(&[2, 1, 3, 3], r);
        let db1 = normal(&[2], r);
        let dk2 = normal(&[2, 2, 3, 3], r);
        let db2 = normal(&[2], r);
        let dfw = normal(&[feat + l, 4], r);
        let dfb = normal(&[4], r);
        let dow = normal(&[4, cells], r);
        let dob = normal(&[cells], r);
        let x_star = rng::uniform01(&[1, hgt, wid], r);
        let y_star = rng::uniform01(&[1, cells], r).map(|v| (v * 4.0).round() + 1.0);
        let z = normal(&[1, l], r);
        let build = move |g: &mut Graph, ids: &[NodeId]| -> Result<NodeId> {
            let xc = g.constant(x_star.clone());
            let yc = g.constant(y_star.clone());
            let ac1 = BoundConv2d {
                k: ids[0], b: ids[1], stride: 1, padding: Padding::Same, act: Activation::Relu,
            };
            let ac2 = BoundConv2d {
                k: ids[2], b: ids[3], stride: 1, padding: Padding::Same, act: Activation::Relu,
            };
            let fc_in = BoundDense { w: ids[4], b: ids[5], act: Activation::Identity };
            let fc_out = BoundDense { w: ids[6], b: ids[7], act: Activation::Relu };
            let ac3 = BoundConv2d {
                k: ids[8], b: ids[9], stride: 1, padding: Padding::Same, act: Activation::Relu,
            };
            let ac4 = BoundConv2d {
                k: ids[10], b: ids[11], stride: 1, padding: Padding::Same, act: Activation::Relu,
            };
            let ac_out = BoundConv2d {
                k: ids[12], b: ids[13], stride: 1, padding: Padding::Same,
                act: Activation::Sigmoid,
            };
            let c1 = ac1.forward(g, xc)?;
            let p1 = g.maxpool2x2(c1)?;
            let c2 = ac2.forward(g, p1)?;
            let p2 = g.maxpool2x2(c2)?;
            let flat = g.reshape(p2, vec![1, feat])?;
            let joint = g.concat_cols(flat, yc)?;
            let code = fc_in.forward(g, joint)?;
            let expanded = fc_out.forward(g, code)?;
            let grid = g.reshape(expanded, vec![2, 1, 1])?;
            let c3 = ac3.forward(g, grid)?;
            let u1 = g.upsample2x2(c3)?;
            let c4 = ac4.forward(g, u1)?;
            let u2 = g.upsample2x2(c4)?;
            let stim = ac_out.forward(g, u2)?;
            // frozen decoder pass
            let dec1 = BoundConv2d {
                k: g.constant(dk1.clone()), b: g.constant(db1.clone()),
                stride: 1, padding: Padding::Same, act: Activation::Relu,
            };
            let dec2 = BoundConv2d {
                k: g.constant(dk2.clone()), b: g.constant(db2.clone()),
                stride: 1, padding: Padding::Same, act: Activation::Relu,
            };
            let dfc = BoundDense {
                w: g.constant(dfw.clone()), b: g.constant(dfb.clone()), act: Activation::Relu,
            };
            let dout = BoundDense {
                w: g.constant(dow.clone()), b: g.constant(dob.clone()),
                act: Activation::Exponential,
            };
            let d1 = dec1.forward(g, stim)?;
            let q1 = g.maxpool2x2(d1)?;
            let d2 = dec2.forward(g, q1)?;
            let q2 = g.maxpool2x2(d2)?;
            let dflat = g.reshape(q2, vec![1, feat])?;
            let zc = g.constant(z.clone());
            let djoint = g.concat_cols(zc, dflat)?;
            let dh = dfc.forward(g, djoint)?;
            let rates = dout.forward(g, dh)?;
            g.poisson_nll(rates, yc, true)
        };
        finite_difference_check("actor_loss_retina", &params, H, TOL, &build)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_of_squares(g: &mut Graph, ids: &[NodeId]) -> Result<NodeId> {
        let sq = g.mul(ids[0], ids[0])?;
        Ok(g.sum_all(sq))
    }

    #[test]
    fn quadratic_passes_tight_tolerance() {
        let p = Tensor::from_vec(vec![1.0, -2.0, 0.5]);
        let r =
            finite_difference_check("sum_sq", &[p], 1e-4, 1e-5, &sum_of_squares).unwrap();
        assert!(r.pass, "{}", r.line());
    }

    #[test]
    fn standard_suite_all_pass() {
        let reports = standard_suite(11, false).unwrap();
        assert!(reports.len() >= 25, "only {} rows", reports.len());
        for rep in &reports {
            assert!(rep.pass, "{}", rep.line());
        }
    }

    #[test]
    fn standard_suite_negative_control_fails() {
        let reports = standard_suite(11, true).unwrap();
        assert!(!reports[0].pass);
        assert!(reports[1..].iter().all(|r| r.pass));
    }

    #[test]
    fn sabotage_fails() {
        let p = Tensor::from_vec(vec![1.0, -2.0, 0.5]);
        let r = finite_difference_check_sabotaged("sum_sq", &[p], 1e-4, 1e-5, &sum_of_squares)
            .unwrap();
        assert!(!r.pass);
    }
}
