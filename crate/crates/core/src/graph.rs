//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape of operation records built eagerly during a forward
//! pass and rebuilt on every pass. Node ids are handed out in insertion order,
//! which is therefore already a topological order; `backward` walks the tape in
//! reverse and accumulates gradients into every node, leaving trainable leaves
//! with gradients congruent to their values.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Exponential,
    Identity,
    Cos,
    Sin,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    None,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    /// Element-wise addition of same-shaped tensors.
    Add(NodeId, NodeId),
    /// `[B, d] + [d]`, bias broadcast over rows.
    AddRowBroadcast(NodeId, NodeId),
    /// `[C, H, W] + [C]`, bias broadcast over channels.
    AddChannelBroadcast(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Activation(NodeId, Activation),
    Conv2d {
        input: NodeId,
        kernels: NodeId,
        stride: usize,
        padding: Padding,
    },
    MaxPool2x2(NodeId),
    Upsample2x2(NodeId),
    ZeroPad4(NodeId, usize),
    Reshape(NodeId),
    ConcatCols(NodeId, NodeId),
    SliceCols {
        input: NodeId,
        start: usize,
        end: usize,
    },
    SliceRows {
        input: NodeId,
        start: usize,
        end: usize,
    },
    MeanAll(NodeId),
    SumAll(NodeId),
    MseLoss(NodeId, NodeId),
    PoissonNll {
        rate: NodeId,
        counts: NodeId,
        clamp: bool,
    },
    KlDiagGaussian {
        mu: NodeId,
        log_var: NodeId,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    trainable: bool,
    frozen: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Rate floor used by the Poisson NLL when clamping is enabled.
pub const POISSON_RATE_FLOOR: f64 = 1e-8;

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            trainable,
            frozen: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; `backward` always populates its gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Frozen leaf: participates in the forward pass but its gradient is
    /// forced to zero after every backward sweep.
    pub fn frozen(&mut self, value: Tensor) -> NodeId {
        let id = self.push(value, Op::Leaf, false);
        self.nodes[id.0].frozen = true;
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::shape("matmul", va.shape(), vb.shape()));
        }
        let (r, k, c) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![0.0; r * c];
        let (da, db) = (va.data(), vb.data());
        for i in 0..r {
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let row = &db[p * c..(p + 1) * c];
                let orow = &mut out[i * c..(i + 1) * c];
                for j in 0..c {
                    orow[j] += aip * row[j];
                }
            }
        }
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::Matmul(a, b), false))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(Error::shape("add", va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = va.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), false))
    }

    /// `[B, d] + [d]`: add a bias row to every row of a matrix.
    pub fn add_row_broadcast(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(bias));
        if va.rank() != 2 || vb.rank() != 1 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::shape("add_row_broadcast", va.shape(), vb.shape()));
        }
        let (rows, d) = (va.shape()[0], va.shape()[1]);
        let mut data = va.data().to_vec();
        for i in 0..rows {
            for j in 0..d {
                data[i * d + j] += vb.data()[j];
            }
        }
        Ok(self.push(
            Tensor::new(vec![rows, d], data)?,
            Op::AddRowBroadcast(a, bias),
            false,
        ))
    }

    /// `[C, H, W] + [C]`: per-channel bias.
    pub fn add_channel_broadcast(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(bias));
        if va.rank() != 3 || vb.rank() != 1 || va.shape()[0] != vb.shape()[0] {
            return Err(Error::shape(
                "add_channel_broadcast",
                va.shape(),
                vb.shape(),
            ));
        }
        let (c, h, w) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let mut data = va.data().to_vec();
        for ch in 0..c {
            let b = vb.data()[ch];
            for v in &mut data[ch * h * w..(ch + 1) * h * w] {
                *v += b;
            }
        }
        Ok(self.push(
            Tensor::new(vec![c, h, w], data)?,
            Op::AddChannelBroadcast(a, bias),
            false,
        ))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(Error::shape("mul", va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = va.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), false))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).map(|v| v * factor);
        self.push(value, Op::Scale(a, factor), false)
    }

    pub fn activation(&mut self, a: NodeId, kind: Activation) -> NodeId {
        let value = self.value(a).map(|v| apply_activation(v, kind));
        self.push(value, Op::Activation(a, kind), false)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let (vi, vk) = (self.value(input), self.value(kernels));
        if vi.rank() != 3 || vk.rank() != 4 {
            return Err(Error::shape("conv2d", vi.shape(), vk.shape()));
        }
        if stride < 1 {
            return Err(Error::Dimension("conv2d stride must be >= 1".into()));
        }
        let (c_in, h, w) = (vi.shape()[0], vi.shape()[1], vi.shape()[2]);
        let (c_out, kc_in, kh, kw) = (
            vk.shape()[0],
            vk.shape()[1],
            vk.shape()[2],
            vk.shape()[3],
        );
        if kc_in != c_in {
            return Err(Error::shape("conv2d channels", vi.shape(), vk.shape()));
        }
        let geom = ConvGeometry::new(h, w, kh, kw, stride, padding)?;
        let mut out = vec![0.0; c_out * geom.h_out * geom.w_out];
        let (di, dk) = (vi.data(), vk.data());
        for co in 0..c_out {
            for oy in 0..geom.h_out {
                for ox in 0..geom.w_out {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - geom.pad_top as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - geom.pad_left as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += di[(ci * h + iy as usize) * w + ix as usize]
                                    * dk[((co * c_in + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[(co * geom.h_out + oy) * geom.w_out + ox] = acc;
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![c_out, geom.h_out, geom.w_out], out)?,
            Op::Conv2d {
                input,
                kernels,
                stride,
                padding,
            },
            false,
        ))
    }

    pub fn maxpool2x2(&mut self, input: NodeId) -> Result<NodeId> {
        let vi = self.value(input);
        if vi.rank() != 3 {
            return Err(Error::shape("maxpool2x2", vi.shape(), &[]));
        }
        let (c, h, w) = (vi.shape()[0], vi.shape()[1], vi.shape()[2]);
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = vec![0.0; c * ho * wo];
        let d = vi.data();
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    for iy in (2 * oy)..((2 * oy + 2).min(h)) {
                        for ix in (2 * ox)..((2 * ox + 2).min(w)) {
                            let v = d[(ch * h + iy) * w + ix];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out[(ch * ho + oy) * wo + ox] = best;
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![c, ho, wo], out)?,
            Op::MaxPool2x2(input),
            false,
        ))
    }

    pub fn upsample2x2(&mut self, input: NodeId) -> Result<NodeId> {
        let vi = self.value(input);
        if vi.rank() != 3 {
            return Err(Error::shape("upsample2x2", vi.shape(), &[]));
        }
        let (c, h, w) = (vi.shape()[0], vi.shape()[1], vi.shape()[2]);
        let mut out = vec![0.0; c * 4 * h * w];
        let d = vi.data();
        for ch in 0..c {
            for oy in 0..(2 * h) {
                for ox in 0..(2 * w) {
                    out[(ch * 2 * h + oy) * 2 * w + ox] = d[(ch * h + oy / 2) * w + ox / 2];
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![c, 2 * h, 2 * w], out)?,
            Op::Upsample2x2(input),
            false,
        ))
    }

    pub fn zero_pad4(&mut self, input: NodeId, p: usize) -> Result<NodeId> {
        let vi = self.value(input);
        if vi.rank() != 3 {
            return Err(Error::shape("zero_pad4", vi.shape(), &[]));
        }
        let (c, h, w) = (vi.shape()[0], vi.shape()[1], vi.shape()[2]);
        let (ho, wo) = (h + 2 * p, w + 2 * p);
        let mut out = vec![0.0; c * ho * wo];
        let d = vi.data();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(ch * ho + y + p) * wo + x + p] = d[(ch * h + y) * w + x];
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![c, ho, wo], out)?,
            Op::ZeroPad4(input, p),
            false,
        ))
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(input).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(input), false))
    }

    /// Concatenate along the last axis: two vectors, or two matrices with the
    /// same row count.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let value = match (va.rank(), vb.rank()) {
            (1, 1) => {
                let mut data = va.data().to_vec();
                data.extend_from_slice(vb.data());
                Tensor::new(vec![va.len() + vb.len()], data)?
            }
            (2, 2) if va.shape()[0] == vb.shape()[0] => {
                let rows = va.shape()[0];
                let (ca, cb) = (va.shape()[1], vb.shape()[1]);
                let mut data = Vec::with_capacity(rows * (ca + cb));
                for i in 0..rows {
                    data.extend_from_slice(&va.data()[i * ca..(i + 1) * ca]);
                    data.extend_from_slice(&vb.data()[i * cb..(i + 1) * cb]);
                }
                Tensor::new(vec![rows, ca + cb], data)?
            }
            _ => return Err(Error::shape("concat_cols", va.shape(), vb.shape())),
        };
        Ok(self.push(value, Op::ConcatCols(a, b), false))
    }

    /// Columns `[start, end)` of a vector or matrix.
    pub fn slice_cols(&mut self, input: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let vi = self.value(input);
        let cols = *vi.shape().last().unwrap();
        if start >= end || end > cols {
            return Err(Error::Dimension(format!(
                "slice_cols [{start}, {end}) out of range for {cols} columns"
            )));
        }
        let value = match vi.rank() {
            1 => Tensor::new(vec![end - start], vi.data()[start..end].to_vec())?,
            2 => {
                let rows = vi.shape()[0];
                let mut data = Vec::with_capacity(rows * (end - start));
                for i in 0..rows {
                    data.extend_from_slice(&vi.data()[i * cols + start..i * cols + end]);
                }
                Tensor::new(vec![rows, end - start], data)?
            }
            _ => return Err(Error::shape("slice_cols", vi.shape(), &[])),
        };
        Ok(self.push(value, Op::SliceCols { input, start, end }, false))
    }

    /// Rows `[start, end)` of a matrix.
    pub fn slice_rows(&mut self, input: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let vi = self.value(input);
        if vi.rank() != 2 {
            return Err(Error::shape("slice_rows", vi.shape(), &[]));
        }
        let (rows, cols) = (vi.shape()[0], vi.shape()[1]);
        if start >= end || end > rows {
            return Err(Error::Dimension(format!(
                "slice_rows [{start}, {end}) out of range for {rows} rows"
            )));
        }
        let value = Tensor::new(
            vec![end - start, cols],
            vi.data()[start * cols..end * cols].to_vec(),
        )?;
        Ok(self.push(value, Op::SliceRows { input, start, end }, false))
    }

    pub fn mean_all(&mut self, input: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(input).mean());
        self.push(value, Op::MeanAll(input), false)
    }

    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(input).sum());
        self.push(value, Op::SumAll(input), false)
    }

    /// Mean squared error: `sum((pred - target)^2) / N`.
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (vp, vt) = (self.value(pred), self.value(target));
        if !vp.same_shape(vt) {
            return Err(Error::shape("mse_loss", vp.shape(), vt.shape()));
        }
        let mut acc = 0.0f64;
        for (p, t) in vp.data().iter().zip(vt.data()) {
            let d = p - t;
            acc += d * d;
        }
        let value = Tensor::scalar(acc / vp.len() as f64);
        Ok(self.push(value, Op::MseLoss(pred, target), false))
    }

    /// Poisson negative log-likelihood, mean over elements of `rate - counts * ln(rate)`.
    /// The `ln(counts!)` constant is omitted. With `clamp` the rate is floored
    /// at [`POISSON_RATE_FLOOR`]; otherwise non-positive rates are a domain error.
    pub fn poisson_nll(&mut self, rate: NodeId, counts: NodeId, clamp: bool) -> Result<NodeId> {
        let (vr, vc) = (self.value(rate), self.value(counts));
        if !vr.same_shape(vc) {
            return Err(Error::shape("poisson_nll", vr.shape(), vc.shape()));
        }
        let mut acc = 0.0f64;
        for (&l, &y) in vr.data().iter().zip(vc.data()) {
            let le = if clamp { l.max(POISSON_RATE_FLOOR) } else { l };
            if le <= 0.0 {
                return Err(Error::Domain(format!(
                    "poisson_nll requires positive rates, got {l}"
                )));
            }
            acc += le - y * le.ln();
        }
        let value = Tensor::scalar(acc / vr.len() as f64);
        Ok(self.push(value, Op::PoissonNll { rate, counts, clamp }, false))
    }

    /// KL divergence of a diagonal Gaussian from the standard normal:
    /// `0.5 * sum(mu^2 + exp(log_var) - 1 - log_var)`.
    pub fn kl_diag_gaussian(&mut self, mu: NodeId, log_var: NodeId) -> Result<NodeId> {
        let (vm, vl) = (self.value(mu), self.value(log_var));
        if !vm.same_shape(vl) {
            return Err(Error::shape("kl_diag_gaussian", vm.shape(), vl.shape()));
        }
        let mut acc = 0.0f64;
        for (&m, &lv) in vm.data().iter().zip(vl.data()) {
            acc += m * m + lv.exp() - 1.0 - lv;
        }
        let value = Tensor::scalar(0.5 * acc);
        Ok(self.push(value, Op::KlDiagGaussian { mu, log_var }, false))
    }

    /// Reparameterized Gaussian sample `z = mu + exp(log_var / 2) * eps`.
    /// Gradients flow into `mu` and `log_var`; `eps` is a constant leaf.
    pub fn reparameterize(&mut self, mu: NodeId, log_var: NodeId, eps: Tensor) -> Result<NodeId> {
        let (vm, vl) = (self.value(mu), self.value(log_var));
        if !vm.same_shape(vl) || !vm.same_shape(&eps) {
            return Err(Error::shape("reparameterize", vm.shape(), vl.shape()));
        }
        let eps_node = self.constant(eps);
        let half = self.scale(log_var, 0.5);
        let std = self.activation(half, Activation::Exponential);
        let noise = self.mul(std, eps_node)?;
        self.add(mu, noise)
    }

    /// Reverse-mode sweep from a scalar loss node. Populates gradients on
    /// every node; trainable leaves unreachable from the loss get zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = Some(Tensor::zeros(node.value.shape()));
        }
        self.nodes[loss.0].grad.as_mut().unwrap().data_mut()[0] = 1.0;

        for idx in (0..=loss.0).rev() {
            let op = self.nodes[idx].op.clone();
            let grad = self.nodes[idx].grad.as_ref().unwrap().clone();
            match op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (va, vb) = (self.nodes[a.0].value.clone(), self.nodes[b.0].value.clone());
                    let (r, k, c) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                    {
                        let ga = self.nodes[a.0].grad.as_mut().unwrap().data_mut();
                        for i in 0..r {
                            for p in 0..k {
                                let mut acc = 0.0;
                                for j in 0..c {
                                    acc += grad.data()[i * c + j] * vb.data()[p * c + j];
                                }
                                ga[i * k + p] += acc;
                            }
                        }
                    }
                    {
                        let gb = self.nodes[b.0].grad.as_mut().unwrap().data_mut();
                        for p in 0..k {
                            for i in 0..r {
                                let aip = va.data()[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for j in 0..c {
                                    gb[p * c + j] += aip * grad.data()[i * c + j];
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(self.nodes[a.0].grad.as_mut().unwrap(), grad.data());
                    accumulate(self.nodes[b.0].grad.as_mut().unwrap(), grad.data());
                }
                Op::AddRowBroadcast(a, bias) => {
                    accumulate(self.nodes[a.0].grad.as_mut().unwrap(), grad.data());
                    let d = self.nodes[bias.0].value.len();
                    let gb = self.nodes[bias.0].grad.as_mut().unwrap().data_mut();
                    for (i, g) in grad.data().iter().enumerate() {
                        gb[i % d] += g;
                    }
                }
                Op::AddChannelBroadcast(a, bias) => {
                    accumulate(self.nodes[a.0].grad.as_mut().unwrap(), grad.data());
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    let hw = shape[1] * shape[2];
                    let gb = self.nodes[bias.0].grad.as_mut().unwrap().data_mut();
                    for (i, g) in grad.data().iter().enumerate() {
                        gb[i / hw] += g;
                    }
                }
                Op::Mul(a, b) => {
                    let vb = self.nodes[b.0].value.clone();
                    let va = self.nodes[a.0].value.clone();
                    {
                        let ga = self.nodes[a.0].grad.as_mut().unwrap().data_mut();
                        for i in 0..grad.len() {
                            ga[i] += grad.data()[i] * vb.data()[i];
                        }
                    }
                    {
                        let gb = self.nodes[b.0].grad.as_mut().unwrap().data_mut();
                        for i in 0..grad.len() {
                            gb[i] += grad.data()[i] * va.data()[i];
                        }
                    }
                }
                Op::Scale(a, factor) => {
                    let ga = self.nodes[a.0].grad.as_mut().unwrap().data_mut();
                    for i in 0..grad.len() {
                        ga[i] += grad.data()[i] * factor;
                    }
                }
                Op::Activation(a, kind) => {
                    let vin = self.nodes[a.0].value.clone();
                    let vout = self.nodes[idx].value.clone();
                    let ga = self.nodes[a.0].grad.as_mut().unwrap().data_mut();
                    for i in 0..grad.len() {
                        ga[i] += grad.data()[i]
                            * activation_derivative(vin.data()[i], vout.data()[i], kind);
                    }
                }
                Op::Conv2d {
                    input,
                    kernels,
                    stride,
                    padding,
                } => {
                    let vi = self.nodes[input.0].value.clone();
                    let vk = self.nodes[kernels.0].value.clone();
                    let (c_in, h, w) = (vi.shape()[0], vi.shape()[1], vi.shape()[2]);
                    let (c_out, _, kh, kw) = (
                        vk.shape()[0],
                        vk.shape()[1],
                        vk.shape()[2],
                        vk.shape()[3],
                    );
                    let geom = ConvGeometry::new(h, w, kh, kw, stride, padding).unwrap();
                    let mut gi = vec![0.0; vi.len()];
                    let mut gk = vec![0.0; vk.len()];
                    for co in 0..c_out {
                        for oy in 0..geom.h_out {
                            for ox in 0..geom.w_out {
                                let g = grad.data()[(co * geom.h_out + oy) * geom.w_out + ox];
                                if g == 0.0 {
                                    continue;
                                }
                                for ci in 0..c_in {
                                    for ky in 0..kh {
                                        let iy =
                                            (oy * stride + ky) as isize - geom.pad_top as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize
                                                - geom.pad_left as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            let ii = (ci * h + iy as usize) * w + ix as usize;
                                            let ki = ((co * c_in + ci) * kh + ky) * kw + kx;
                                            gi[ii] += g * vk.data()[ki];
                                            gk[ki] += g * vi.data()[ii];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    accumulate(self.nodes[input.0].grad.as_mut().unwrap(), &gi);
                    accumulate(self.nodes[kernels.0].grad.as_mut().unwrap(), &gk);
                }
                Op::MaxPool2x2(input) => {
                    let vi = self.nodes[input.0].value.clone();
                    let (c, h, w) = (vi.shape()[0], vi.shape()[1], vi.shape()[2]);
                    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
                    let gi = self.nodes[input.0].grad.as_mut().unwrap().data_mut();
                    for ch in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                // first occurrence wins on ties
                                let mut best = f64::NEG_INFINITY;
                                let mut best_idx = 0;
                                for iy in (2 * oy)..((2 * oy + 2).min(h)) {
                                    for ix in (2 * ox)..((2 * ox + 2).min(w)) {
                                        let i = (ch * h + iy) * w + ix;
                                        if vi.data()[i] > best {
                                            best = vi.data()[i];
                                            best_idx = i;
                                        }
                                    }
                                }
                                gi[best_idx] += grad.data()[(ch * ho + oy) * wo + ox];
                            }
                        }
                    }
                }
                Op::Upsample2x2(input) => {
                    let shape = self.nodes[input.0].value.shape().to_vec();
                    let (c, h, w) = (shape[0], shape[1], shape[2]);
                    let gi = self.nodes[input.0].grad.as_mut().unwrap().data_mut();
                    for ch in 0..c {
                        for oy in 0..(2 * h) {
                            for ox in 0..(2 * w) {
                                gi[(ch * h + oy / 2) * w + ox / 2] +=
                                    grad.data()[(ch * 2 * h + oy) * 2 * w + ox];
                            }
                        }
                    }
                }
                Op::ZeroPad4(input, p) => {
                    let shape = self.nodes[input.0].value.shape().to_vec();
                    let (c, h, w) = (shape[0], shape[1], shape[2]);
                    let (ho, wo) = (h + 2 * p, w + 2 * p);
                    let gi = self.nodes[input.0].grad.as_mut().unwrap().data_mut();
                    for ch in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                gi[(ch * h + y) * w + x] +=
                                    grad.data()[(ch * ho + y + p) * wo + x + p];
                            }
                        }
                    }
                }
                Op::Reshape(input) => {
                    accumulate(self.nodes[input.0].grad.as_mut().unwrap(), grad.data());
                }
                Op::ConcatCols(a, b) => {
                    let (sa, sb) = (
                        self.nodes[a.0].value.shape().to_vec(),
                        self.nodes[b.0].value.shape().to_vec(),
                    );
                    let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
                    let rows = if sa.len() == 2 { sa[0] } else { 1 };
                    {
                        let ga = self.nodes[a.0].grad.as_mut().unwrap().data_mut();
                        for i in 0..rows {
                            for j in 0..ca {
                                ga[i * ca + j] += grad.data()[i * (ca + cb) + j];
                            }
                        }
                    }
                    {
                        let gb = self.nodes[b.0].grad.as_mut().unwrap().data_mut();
                        for i in 0..rows {
                            for j in 0..cb {
                                gb[i * cb + j] += grad.data()[i * (ca + cb) + ca + j];
                            }
                        }
                    }
                }
                Op::SliceCols { input, start, end } => {
                    let shape = self.nodes[input.0].value.shape().to_vec();
                    let cols = *shape.last().unwrap();
                    let rows = if shape.len() == 2 { shape[0] } else { 1 };
                    let gi = self.nodes[input.0].grad.as_mut().unwrap().data_mut();
                    for i in 0..rows {
                        for j in 0..(end - start) {
                            gi[i * cols + start + j] += grad.data()[i * (end - start) + j];
                        }
                    }
                }
                Op::SliceRows { input, start, end } => {
                    let cols = self.nodes[input.0].value.shape()[1];
                    debug_assert_eq!(grad.data().len(), (end - start) * cols);
                    let gi = self.nodes[input.0].grad.as_mut().unwrap().data_mut();
                    for (i, gv) in grad.data().iter().enumerate() {
                        gi[start * cols + i] += gv;
                    }
                }
                Op::MeanAll(input) => {
                    let n = self.nodes[input.0].value.len() as f64;
                    let g = grad.data()[0] / n;
                    for v in self.nodes[input.0].grad.as_mut().unwrap().data_mut() {
                        *v += g;
                    }
                }
                Op::SumAll(input) => {
                    let g = grad.data()[0];
                    for v in self.nodes[input.0].grad.as_mut().unwrap().data_mut() {
                        *v += g;
                    }
                }
                Op::MseLoss(pred, target) => {
                    let vp = self.nodes[pred.0].value.clone();
                    let vt = self.nodes[target.0].value.clone();
                    let n = vp.len() as f64;
                    let g = grad.data()[0];
                    {
                        let gp = self.nodes[pred.0].grad.as_mut().unwrap().data_mut();
                        for i in 0..vp.len() {
                            gp[i] += g * 2.0 * (vp.data()[i] - vt.data()[i]) / n;
                        }
                    }
                    {
                        let gt = self.nodes[target.0].grad.as_mut().unwrap().data_mut();
                        for i in 0..vp.len() {
                            gt[i] -= g * 2.0 * (vp.data()[i] - vt.data()[i]) / n;
                        }
                    }
                }
                Op::PoissonNll { rate, counts, clamp } => {
                    let vr = self.nodes[rate.0].value.clone();
                    let vc = self.nodes[counts.0].value.clone();
                    let n = vr.len() as f64;
                    let g = grad.data()[0];
                    {
                        let gr = self.nodes[rate.0].grad.as_mut().unwrap().data_mut();
                        for i in 0..vr.len() {
                            let l = vr.data()[i];
                            // clamped rates sit on the flat side of max(l, floor)
                            if clamp && l < POISSON_RATE_FLOOR {
                                continue;
                            }
                            gr[i] += g * (1.0 - vc.data()[i] / l) / n;
                        }
                    }
                    {
                        let gc = self.nodes[counts.0].grad.as_mut().unwrap().data_mut();
                        for i in 0..vr.len() {
                            let le = if clamp {
                                vr.data()[i].max(POISSON_RATE_FLOOR)
                            } else {
                                vr.data()[i]
                            };
                            gc[i] -= g * le.ln() / n;
                        }
                    }
                }
                Op::KlDiagGaussian { mu, log_var } => {
                    let vm = self.nodes[mu.0].value.clone();
                    let vl = self.nodes[log_var.0].value.clone();
                    let g = grad.data()[0];
                    {
                        let gm = self.nodes[mu.0].grad.as_mut().unwrap().data_mut();
                        for i in 0..vm.len() {
                            gm[i] += g * vm.data()[i];
                        }
                    }
                    {
                        let gl = self.nodes[log_var.0].grad.as_mut().unwrap().data_mut();
                        for i in 0..vl.len() {
                            gl[i] += g * 0.5 * (vl.data()[i].exp() - 1.0);
                        }
                    }
                }
            }
        }

        for node in &mut self.nodes {
            if node.frozen {
                node.grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
        debug_assert!(self
            .nodes
            .iter()
            .filter(|n| n.trainable)
            .all(|n| n.grad.as_ref().unwrap().same_shape(&n.value)));
        Ok(())
    }
}

struct ConvGeometry {
    h_out: usize,
    w_out: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeometry {
    fn new(
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        match padding {
            Padding::Same => {
                let h_out = h.div_ceil(stride);
                let w_out = w.div_ceil(stride);
                let pad_h = ((h_out - 1) * stride + kh).saturating_sub(h);
                let pad_w = ((w_out - 1) * stride + kw).saturating_sub(w);
                Ok(ConvGeometry {
                    h_out,
                    w_out,
                    pad_top: pad_h / 2,
                    pad_left: pad_w / 2,
                })
            }
            Padding::None => {
                if kh > h || kw > w {
                    return Err(Error::Dimension(format!(
                        "conv2d kernel {kh}x{kw} larger than input {h}x{w}"
                    )));
                }
                Ok(ConvGeometry {
                    h_out: (h - kh) / stride + 1,
                    w_out: (w - kw) / stride + 1,
                    pad_top: 0,
                    pad_left: 0,
                })
            }
        }
    }
}

fn accumulate(grad: &mut Tensor, delta: &[f64]) {
    let g = grad.data_mut();
    for i in 0..delta.len() {
        g[i] += delta[i];
    }
}

pub fn apply_activation(v: f64, kind: Activation) -> f64 {
    match kind {
        Activation::Relu => v.max(0.0),
        Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        Activation::Exponential => v.exp(),
        Activation::Identity => v,
        Activation::Cos => v.cos(),
        Activation::Sin => v.sin(),
    }
}

fn activation_derivative(input: f64, output: f64, kind: Activation) -> f64 {
    match kind {
        // derivative at exactly 0 is 0
        Activation::Relu => {
            if input > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Sigmoid => output * (1.0 - output),
        Activation::Exponential => output,
        Activation::Identity => 1.0,
        Activation::Cos => -input.sin(),
        Activation::Sin => input.cos(),
    }
}
