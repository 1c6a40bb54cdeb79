//! Optimizers over a [`ParamStore`].

use std::collections::HashMap;

use ndarray::ArrayD;

use crate::params::{ParamId, ParamStore};
use crate::tensor::Gradients;

/// Stochastic gradient descent with classical momentum.
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    params: Vec<ParamId>,
    velocity: HashMap<ParamId, ArrayD<f64>>,
}

impl Sgd {
    pub fn new(params: Vec<ParamId>, lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            params,
            velocity: HashMap::new(),
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        for &p in &self.params {
            let Some(g) = grads.param(p) else { continue };
            if !store.is_trainable(p) {
                continue;
            }
            let v = self
                .velocity
                .entry(p)
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            *v *= self.momentum;
            *v += g;
            let lr = self.lr;
            store.value_mut(p).zip_mut_with(v, |pv, vv| *pv -= lr * vv);
        }
    }
}

/// Adam with L2 weight decay folded into the gradient.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    params: Vec<ParamId>,
    m: HashMap<ParamId, ArrayD<f64>>,
    v: HashMap<ParamId, ArrayD<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(params: Vec<ParamId>, lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            params,
            m: HashMap::new(),
            v: HashMap::new(),
            t: 0,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for &p in &self.params {
            let Some(g) = grads.param(p) else { continue };
            if !store.is_trainable(p) {
                continue;
            }
            let mut g = g.clone();
            if self.weight_decay != 0.0 {
                let wd = self.weight_decay;
                g.zip_mut_with(store.value(p), |gv, pv| *gv += wd * pv);
            }
            let m = self
                .m
                .entry(p)
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(p)
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            m.zip_mut_with(&g, |mv, gv| *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv);
            v.zip_mut_with(&g, |vv, gv| *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv);
            let (lr, eps) = (self.lr, self.eps);
            let val = store.value_mut(p);
            ndarray::Zip::from(val)
                .and(&*m)
                .and(&*v)
                .for_each(|pv, &mv, &vv| {
                    let mh = mv / bc1;
                    let vh = vv / bc2;
                    *pv -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}
