//! Parameterized layers and their per-graph bindings.
//!
//! Parameter tensors live in plain structs between passes. Each forward pass
//! binds them into the current graph (as trainable params, or as frozen leaves
//! when the owning network is held fixed) and records the node ids in
//! insertion order, matching the order `params`/`params_mut` report.

use crate::error::Result;
use crate::graph::{Activation, Graph, NodeId, Padding};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum BindMode {
    Trainable,
    Frozen,
}

/// Tracks the parameter nodes bound into one graph.
pub struct Binder {
    mode: BindMode,
    ids: Vec<NodeId>,
}

impl Binder {
    pub fn new(mode: BindMode) -> Self {
        Binder {
            mode,
            ids: Vec::new(),
        }
    }

    pub fn bind(&mut self, g: &mut Graph, t: &Tensor) -> NodeId {
        let id = match self.mode {
            BindMode::Trainable => g.param(t.clone()),
            BindMode::Frozen => g.frozen(t.clone()),
        };
        self.ids.push(id);
        id
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn into_ids(self) -> Vec<NodeId> {
        self.ids
    }

    /// Gradients of all bound parameters, in binding order.
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.ids
            .iter()
            .map(|&id| g.grad(id).expect("backward was run").clone())
            .collect()
    }
}

/// Fully connected layer, weights `[in, out]`, acting on `[B, in]` rows.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
    pub act: Activation,
}

impl Dense {
    pub fn init(in_dim: usize, out_dim: usize, act: Activation, rng: &mut Stream) -> Self {
        Dense {
            w: rng::glorot_uniform(&[in_dim, out_dim], in_dim, out_dim, rng),
            b: Tensor::zeros(&[out_dim]),
            act,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }

    /// Bind parameters into the graph once; the binding can then be applied
    /// to any number of inputs within that graph.
    pub fn bind(&self, g: &mut Graph, binder: &mut Binder) -> BoundDense {
        BoundDense {
            w: binder.bind(g, &self.w),
            b: binder.bind(g, &self.b),
            act: self.act,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, binder: &mut Binder) -> Result<NodeId> {
        let bound = self.bind(g, binder);
        bound.forward(g, x)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }
}

#[derive(Copy, Clone)]
pub struct BoundDense {
    pub w: NodeId,
    pub b: NodeId,
    pub act: Activation,
}

impl BoundDense {
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let z = g.matmul(x, self.w)?;
        let z = g.add_row_broadcast(z, self.b)?;
        Ok(g.activation(z, self.act))
    }
}

/// 2D convolution layer on `[C, H, W]` inputs, kernels `[C_out, C_in, kh, kw]`.
#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub k: Tensor,
    pub b: Tensor,
    pub stride: usize,
    pub padding: Padding,
    pub act: Activation,
}

impl Conv2dLayer {
    pub fn init(
        c_in: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        padding: Padding,
        act: Activation,
        rng: &mut Stream,
    ) -> Self {
        let fan_in = c_in * kh * kw;
        let fan_out = c_out * kh * kw;
        Conv2dLayer {
            k: rng::glorot_uniform(&[c_out, c_in, kh, kw], fan_in, fan_out, rng),
            b: Tensor::zeros(&[c_out]),
            stride: 1,
            padding,
            act,
        }
    }

    pub fn bind(&self, g: &mut Graph, binder: &mut Binder) -> BoundConv2d {
        BoundConv2d {
            k: binder.bind(g, &self.k),
            b: binder.bind(g, &self.b),
            stride: self.stride,
            padding: self.padding,
            act: self.act,
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.k, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.k, &mut self.b]
    }
}

#[derive(Copy, Clone)]
pub struct BoundConv2d {
    pub k: NodeId,
    pub b: NodeId,
    pub stride: usize,
    pub padding: Padding,
    pub act: Activation,
}

impl BoundConv2d {
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let z = g.conv2d(x, self.k, self.stride, self.padding)?;
        let z = g.add_channel_broadcast(z, self.b)?;
        Ok(g.activation(z, self.act))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Role;

    #[test]
    fn dense_init_glorot_with_zero_bias() {
        let mut r = rng::stream(1, Role::ParamInit);
        let d = Dense::init(4, 3, Activation::Identity, &mut r);
        assert_eq!(d.w.shape(), &[4, 3]);
        assert!(d.b.data().iter().all(|&v| v == 0.0));
        let same = Dense::init(4, 3, Activation::Identity, &mut rng::stream(1, Role::ParamInit));
        assert_eq!(d.w, same.w);
        let other = Dense::init(4, 3, Activation::Identity, &mut rng::stream(2, Role::ParamInit));
        assert_ne!(d.w, other.w);
    }

    #[test]
    fn frozen_binding_gets_zero_grads() {
        let mut r = rng::stream(3, Role::ParamInit);
        let d = Dense::init(2, 2, Activation::Identity, &mut r);
        let mut g = Graph::new();
        let mut binder = Binder::new(BindMode::Frozen);
        let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let out = d.forward(&mut g, x, &mut binder).unwrap();
        let loss = g.sum_all(out);
        g.backward(loss).unwrap();
        for grad in binder.grads(&g) {
            assert!(grad.data().iter().all(|&v| v == 0.0));
        }
    }
}
