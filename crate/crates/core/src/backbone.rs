//! Small hierarchical convolutional feature extractor with three taps:
//! a low-level tap at 1/4 resolution, a high-level tap at 1/8, and a base
//! feature projected 1x1 from the high-level tap.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBlock};
use crate::params::ParamStore;
use crate::tensor::{NodeId, Tape};

pub const GROUP: &str = "backbone";

/// Tape handles for the three taps of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BackboneFeatures {
    /// `[n, c_shared, h/4, w/4]`
    pub low: NodeId,
    /// `[n, c_private, h/8, w/8]`
    pub high: NodeId,
    /// `[n, c_f, h/8, w/8]`
    pub base: NodeId,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    stage1: [ConvBlock; 2],
    stage2: [ConvBlock; 2],
    stage3: [ConvBlock; 2],
    base_proj: Conv2d,
    image_size: usize,
}

impl Backbone {
    /// Three stages of two conv blocks each; downsampling lives in stage 1
    /// (x4) and at the entry of stage 2 (x2), so the low tap sits at 1/4 and
    /// the high tap at 1/8 of the input resolution.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        image_size: usize,
        c_shared: usize,
        c_private: usize,
        c_f: usize,
    ) -> Self {
        assert!(image_size % 8 == 0, "image size must be divisible by 8");
        let s1a = ConvBlock::new(store, rng, GROUP, "stage1.0", 3, c_shared, 2);
        let s1b = ConvBlock::new(store, rng, GROUP, "stage1.1", c_shared, c_shared, 2);
        let s2a = ConvBlock::new(store, rng, GROUP, "stage2.0", c_shared, c_private, 2);
        let s2b = ConvBlock::new(store, rng, GROUP, "stage2.1", c_private, c_private, 1);
        let s3a = ConvBlock::new(store, rng, GROUP, "stage3.0", c_private, c_private, 1);
        let s3b = ConvBlock::new(store, rng, GROUP, "stage3.1", c_private, c_private, 1);
        let base_proj = Conv2d::new(store, rng, GROUP, "base_proj", c_private, c_f, 1, 1, 0);
        Backbone {
            stage1: [s1a, s1b],
            stage2: [s2a, s2b],
            stage3: [s3a, s3b],
            base_proj,
            image_size,
        }
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    /// Spatial side of the high tap (and of every fused feature map).
    pub fn feature_side(&self) -> usize {
        self.image_size / 8
    }

    pub fn extract(&self, t: &mut Tape, store: &ParamStore, images: NodeId) -> Result<BackboneFeatures> {
        let s = t.shape(images).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] != self.image_size || s[3] != self.image_size {
            return Err(Error::Shape(format!(
                "backbone expects [n,3,{0},{0}], got {s:?}",
                self.image_size
            )));
        }
        let mut x = images;
        for b in &self.stage1 {
            x = b.forward(t, store, x);
        }
        let low = x;
        for b in &self.stage2 {
            x = b.forward(t, store, x);
        }
        for b in &self.stage3 {
            x = b.forward(t, store, x);
        }
        let high = x;
        let base = self.base_proj.forward(t, store, high);
        Ok(BackboneFeatures { low, high, base })
    }

    /// Mark every backbone parameter untrainable. Idempotent.
    pub fn freeze(&self, store: &mut ParamStore) {
        store.set_group_trainable(GROUP, false);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::default_benchmark;
    use crate::opt::Sgd;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;

    fn image_node(t: &mut Tape, img: &crate::data::ImageGrid) -> NodeId {
        let (c, h, w) = img.pixels.dim();
        let arr = ArrayD::from_shape_vec(IxDyn(&[1, c, h, w]), img.pixels.iter().copied().collect())
            .unwrap();
        t.constant(arr)
    }

    fn build(image_size: usize) -> (ParamStore, Backbone) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = Backbone::new(&mut store, &mut rng, image_size, 32, 64, 64);
        (store, bb)
    }

    #[test]
    fn tap_shapes_match_contract() {
        let (store, bb) = build(64);
        let mut t = Tape::new();
        let x = t.constant(ArrayD::zeros(IxDyn(&[1, 3, 64, 64])));
        let f = bb.extract(&mut t, &store, x).unwrap();
        assert_eq!(t.shape(f.low), &[1, 32, 16, 16]);
        assert_eq!(t.shape(f.high), &[1, 64, 8, 8]);
        assert_eq!(t.shape(f.base), &[1, 64, 8, 8]);
    }

    #[test]
    fn zero_image_gives_finite_outputs() {
        let (store, bb) = build(32);
        let mut t = Tape::new();
        let x = t.constant(ArrayD::zeros(IxDyn(&[2, 3, 32, 32])));
        let f = bb.extract(&mut t, &store, x).unwrap();
        for id in [f.low, f.high, f.base] {
            assert!(t.value(id).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn wrong_size_is_shape_error() {
        let (store, bb) = build(32);
        let mut t = Tape::new();
        let x = t.constant(ArrayD::zeros(IxDyn(&[1, 3, 48, 48])));
        assert!(bb.extract(&mut t, &store, x).is_err());
    }

    #[test]
    fn single_pixel_change_moves_outputs() {
        let (store, bb) = build(32);
        let b = default_benchmark();
        let (img, _) = crate::data::generate_scene(3, &b.source, 1, 32).unwrap();
        let mut img2 = img.clone();
        img2.pixels[[0, 16, 16]] = (img2.pixels[[0, 16, 16]] + 0.5).min(1.0);

        let mut t = Tape::new();
        let x1 = image_node(&mut t, &img);
        let f1 = bb.extract(&mut t, &store, x1).unwrap();
        let x2 = image_node(&mut t, &img2);
        let f2 = bb.extract(&mut t, &store, x2).unwrap();
        let d = (t.value(f1.base) - t.value(f2.base)).mapv(f64::abs).sum();
        assert!(d > 0.0, "receptive field must reach the center pixel");
    }

    #[test]
    fn freeze_pins_parameters_and_is_idempotent() {
        let (mut store, bb) = build(32);
        let train_step = |store: &mut ParamStore, bb: &Backbone, opt: &mut Sgd| {
            let mut t = Tape::new();
            let x = t.constant(ArrayD::from_elem(IxDyn(&[1, 3, 32, 32]), 0.3));
            let f = bb.extract(&mut t, store, x).unwrap();
            let sq = t.square(f.base);
            let loss = t.mean_all(sq);
            let grads = t.backward(loss);
            opt.step(store, &grads);
        };

        // without freeze the checksum moves
        let before = store.checksum_group(GROUP);
        let mut opt = Sgd::new(store.group_ids(GROUP), 0.01, 0.9);
        for _ in 0..10 {
            train_step(&mut store, &bb, &mut opt);
        }
        assert_ne!(store.checksum_group(GROUP), before);

        // frozen: bit-identical across further steps
        bb.freeze(&mut store);
        bb.freeze(&mut store); // idempotent
        let frozen = store.checksum_group(GROUP);
        for _ in 0..10 {
            train_step(&mut store, &bb, &mut opt);
        }
        assert_eq!(store.checksum_group(GROUP), frozen);
    }
}
