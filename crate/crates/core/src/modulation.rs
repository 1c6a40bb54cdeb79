//! Affine modulation of the private stream conditioned on the shared one,
//! wired in only for fine-tuning and testing. A 3x3 interaction conv over
//! the concatenated streams feeds a 1x1 conv whose tanh output splits into
//! per-position scale and shift, applied as `P * (1 + gamma) + beta`.
//!
//! The parameter-generating conv starts at zero, so a freshly attached
//! module is exactly the identity.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::params::ParamStore;
use crate::tensor::{NodeId, Tape};

pub const GROUP: &str = "modulation";

#[derive(Clone, Debug)]
pub struct ModulationModule {
    pub interact: Conv2d,
    pub gen: Conv2d,
    c_f: usize,
}

/// Tape handles of one generated (scale, shift) pair, both in `[-1, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct ModulationParams {
    pub gamma: NodeId,
    pub beta: NodeId,
}

impl ModulationModule {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, c_f: usize) -> Self {
        ModulationModule {
            interact: Conv2d::new(store, rng, GROUP, "interact", 2 * c_f, c_f, 3, 1, 1),
            // zero-init: gamma = beta = 0 until fine-tuning moves them
            gen: Conv2d::new_zeroed(store, GROUP, "gen", c_f, 2 * c_f, 1, 1, 0),
            c_f,
        }
    }

    /// `relu(conv3x3(concat[shared; private]))`
    pub fn interact(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        shared: NodeId,
        private: NodeId,
    ) -> Result<NodeId> {
        if t.shape(shared) != t.shape(private) {
            return Err(Error::Shape("modulation streams must share shape".into()));
        }
        let cat = t.concat(&[shared, private], 1);
        let conv = self.interact.forward(t, store, cat);
        Ok(t.relu(conv))
    }

    /// 1x1 conv to `2*c_f` channels, tanh, split into gamma and beta.
    pub fn gen_params(&self, t: &mut Tape, store: &ParamStore, f_a: NodeId) -> ModulationParams {
        let conv = self.gen.forward(t, store, f_a);
        let bounded = t.tanh(conv);
        ModulationParams {
            gamma: t.narrow(bounded, 1, 0, self.c_f),
            beta: t.narrow(bounded, 1, self.c_f, self.c_f),
        }
    }

    /// `private * (1 + gamma) + beta`
    pub fn modulate(t: &mut Tape, private: NodeId, params: ModulationParams) -> Result<NodeId> {
        if t.shape(private) != t.shape(params.gamma) || t.shape(private) != t.shape(params.beta) {
            return Err(Error::Shape("modulation parameter shape mismatch".into()));
        }
        let scale = t.add_scalar(params.gamma, 1.0);
        let scaled = t.mul(private, scale);
        Ok(t.add(scaled, params.beta))
    }

    /// Full pass: interaction, parameter generation, modulation.
    pub fn apply(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        shared: NodeId,
        private: NodeId,
    ) -> Result<NodeId> {
        let f_a = self.interact(t, store, shared, private)?;
        let params = self.gen_params(t, store, f_a);
        Self::modulate(t, private, params)
    }
}
