//! Weighted fusion of the base/shared/private streams under a spatially
//! varying softmax: a 1x1 reduction of the channel concatenation drives a
//! 3x3 conv whose per-position softmax over the streams weights the sum,
//! plus a residual enhancement of the reduced feature.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::params::ParamStore;
use crate::tensor::{NodeId, Tape};

pub const GROUP: &str = "fusion";

/// Streams a fusion module consumes, in weight-channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Base,
    Shared,
    Private,
}

#[derive(Clone, Debug)]
pub struct FusionModule {
    pub reduce: Conv2d,
    pub weight_conv: Conv2d,
    pub enhance: Conv2d,
    streams: Vec<Stream>,
}

/// Everything one fusion pass produces (weights are kept for diagnostics
/// and debug dumps).
#[derive(Clone, Debug)]
pub struct FusionOutput {
    pub fused: NodeId,
    pub reduced: NodeId,
    pub weights: Vec<NodeId>,
}

impl FusionModule {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        c_f: usize,
        streams: Vec<Stream>,
    ) -> Self {
        assert!(!streams.is_empty(), "fusion needs at least one stream");
        let n = streams.len();
        FusionModule {
            reduce: Conv2d::new(store, rng, GROUP, "reduce", n * c_f, c_f, 1, 1, 0),
            weight_conv: Conv2d::new(store, rng, GROUP, "weights", c_f, n, 3, 1, 1),
            enhance: Conv2d::new(store, rng, GROUP, "enhance", c_f, c_f, 1, 1, 0),
            streams,
        }
    }

    pub fn streams(&self) -> &[Stream] {
        &self.streams
    }

    fn check_inputs(&self, t: &Tape, feats: &[NodeId]) -> Result<()> {
        if feats.len() != self.streams.len() {
            return Err(Error::Shape(format!(
                "fusion expects {} streams, got {}",
                self.streams.len(),
                feats.len()
            )));
        }
        let first = t.shape(feats[0]).to_vec();
        for &f in feats {
            if t.shape(f) != first.as_slice() {
                return Err(Error::Shape("fusion streams must share shape".into()));
            }
        }
        Ok(())
    }

    /// 1x1 reduction of the channel concatenation.
    pub fn fuse_concat(&self, t: &mut Tape, store: &ParamStore, feats: &[NodeId]) -> Result<NodeId> {
        self.check_inputs(t, feats)?;
        let cat = t.concat(feats, 1);
        Ok(self.reduce.forward(t, store, cat))
    }

    /// Per-position weights over the streams: conv, softmax over its
    /// channels, split into `[n, 1, h, w]` maps.
    pub fn fusion_weights(&self, t: &mut Tape, store: &ParamStore, reduced: NodeId) -> Vec<NodeId> {
        let logits = self.weight_conv.forward(t, store, reduced);
        let soft = t.softmax_axis1(logits);
        (0..self.streams.len())
            .map(|i| t.narrow(soft, 1, i, 1))
            .collect()
    }

    /// Pointwise-weighted sum of the streams.
    pub fn weighted_sum(&self, t: &mut Tape, feats: &[NodeId], weights: &[NodeId]) -> NodeId {
        let mut acc: Option<NodeId> = None;
        for (&f, &w) in feats.iter().zip(weights) {
            let term = t.mul(w, f);
            acc = Some(match acc {
                Some(a) => t.add(a, term),
                None => term,
            });
        }
        acc.expect("at least one stream")
    }

    /// Enhancement block: residual 1x1 conv of the reduced feature.
    pub fn enhancement(&self, t: &mut Tape, store: &ParamStore, reduced: NodeId) -> NodeId {
        let conv = self.enhance.forward(t, store, reduced);
        t.add(reduced, conv)
    }

    /// Full fusion: weighted sum plus the enhancement of the reduction.
    pub fn fuse(&self, t: &mut Tape, store: &ParamStore, feats: &[NodeId]) -> Result<FusionOutput> {
        let reduced = self.fuse_concat(t, store, feats)?;
        let weights = self.fusion_weights(t, store, reduced);
        let ws = self.weighted_sum(t, feats, &weights);
        let g = self.enhancement(t, store, reduced);
        let fused = t.add(ws, g);
        Ok(FusionOutput {
            fused,
            reduced,
            weights,
        })
    }
}
