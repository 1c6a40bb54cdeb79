//! Layers: thin structs owning parameter ids plus a tape-forward method.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{NodeId, Tape};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Kaiming-style uniform init, fan-in scaled.
pub fn kaiming_uniform(rng: &mut ChaCha8Rng, dims: &[usize], fan_in: usize) -> ArrayD<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(dims), |_| rng.random_range(-bound..bound))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        group: &str,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = cin * k * k;
        let w = store.add(group, &format!("{name}.w"), kaiming_uniform(rng, &[cout, cin, k, k], fan_in));
        let b = store.add(group, &format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout])));
        Conv2d { w, b, stride, pad }
    }

    /// Same-shape conv with all weights and bias at zero (identity-start
    /// heads build on this).
    pub fn new_zeroed(
        store: &mut ParamStore,
        group: &str,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.add(group, &format!("{name}.w"), ArrayD::zeros(IxDyn(&[cout, cin, k, k])));
        let b = store.add(group, &format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout])));
        Conv2d { w, b, stride, pad }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let w = t.param(store, self.w);
        let b = t.param(store, self.b);
        t.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Per-sample, per-channel normalization with learnable affine.
#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl InstanceNorm {
    pub fn new(store: &mut ParamStore, group: &str, name: &str, channels: usize) -> Self {
        let gamma = store.add(group, &format!("{name}.gamma"), ArrayD::ones(IxDyn(&[1, channels, 1, 1])));
        let beta = store.add(group, &format!("{name}.beta"), ArrayD::zeros(IxDyn(&[1, channels, 1, 1])));
        InstanceNorm {
            gamma,
            beta,
            eps: INSTANCE_NORM_EPS,
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let mean = t.mean_axes(x, &[2, 3]);
        let centered = t.sub(x, mean);
        let sq = t.square(centered);
        let var = t.mean_axes(sq, &[2, 3]);
        let var = t.add_scalar(var, self.eps);
        let std = t.sqrt(var);
        let normed = t.div(centered, std);
        let g = t.param(store, self.gamma);
        let b = t.param(store, self.beta);
        let scaled = t.mul(normed, g);
        t.add(scaled, b)
    }
}

/// 3x3 conv + instance norm + ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: InstanceNorm,
}

impl ConvBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        group: &str,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        ConvBlock {
            conv: Conv2d::new(store, rng, group, &format!("{name}.conv"), cin, cout, 3, stride, 1),
            norm: InstanceNorm::new(store, group, &format!("{name}.norm"), cout),
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let c = self.conv.forward(t, store, x);
        let n = self.norm.forward(t, store, c);
        t.relu(n)
    }
}

/// Fully connected layer: `y = x W + b` with `x: [n, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        group: &str,
        name: &str,
        dim_in: usize,
        dim_out: usize,
    ) -> Self {
        let w = store.add(group, &format!("{name}.w"), kaiming_uniform(rng, &[dim_in, dim_out], dim_in));
        let b = store.add(group, &format!("{name}.b"), ArrayD::zeros(IxDyn(&[1, dim_out])));
        Linear { w, b }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let w = t.param(store, self.w);
        let b = t.param(store, self.b);
        let y = t.matmul(x, w);
        t.add(y, b)
    }
}
