//! Network assembly: backbone, decomposition branches, fusion, modulation
//! and the heads, wired according to a set of ablation switches and the
//! current phase.

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneFeatures};
use crate::data::ImageGrid;
use crate::decomp::{Discriminator, PrivateBranch, ProjectionHead, SharedBranch};
use crate::error::{Error, Result};
use crate::fusion::{FusionModule, Stream};
use crate::head::HeadConfig;
use crate::modulation::ModulationModule;
use crate::params::ParamStore;
use crate::tensor::{NodeId, Tape};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct ArchConfig {
    pub image_size: usize,
    pub c_shared: usize,
    pub c_private: usize,
    pub c_f: usize,
    pub d_proj: usize,
    pub disc_hidden: usize,
    pub ca_reduction: usize,
    /// Auxiliary class head on the discriminator (off: the plain binary
    /// real/pseudo head).
    pub disc_class_head: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            image_size: 64,
            c_shared: 32,
            c_private: 64,
            c_f: 64,
            d_proj: 32,
            disc_hidden: 64,
            ca_reduction: 4,
            disc_class_head: false,
        }
    }
}

/// Which modules, streams and objectives participate.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct AblationSwitches {
    /// Weighted fusion of decomposed streams (off: base features only).
    pub use_fusion: bool,
    /// Decomposition objectives as a whole.
    pub use_decomp: bool,
    /// Modulation module during fine-tuning/testing.
    pub use_modulation: bool,
    pub use_base: bool,
    pub use_shared: bool,
    pub use_private: bool,
    pub use_adv: bool,
    pub use_cont: bool,
    pub use_ortho: bool,
}

impl AblationSwitches {
    /// Everything on.
    pub fn full() -> Self {
        AblationSwitches {
            use_fusion: true,
            use_decomp: true,
            use_modulation: true,
            use_base: true,
            use_shared: true,
            use_private: true,
            use_adv: true,
            use_cont: true,
            use_ortho: true,
        }
    }

    /// Frozen-backbone baseline.
    pub fn none() -> Self {
        AblationSwitches {
            use_fusion: false,
            use_decomp: false,
            use_modulation: false,
            use_base: true,
            use_shared: false,
            use_private: false,
            use_adv: false,
            use_cont: false,
            use_ortho: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_fusion && !(self.use_base || self.use_shared || self.use_private) {
            return Err(Error::Config {
                line: 0,
                msg: "fusion enabled but no stream selected".into(),
            });
        }
        Ok(())
    }

    pub fn adv_active(&self) -> bool {
        self.use_decomp && self.use_adv && self.use_fusion && self.use_shared
    }

    pub fn cont_active(&self) -> bool {
        self.use_decomp && self.use_cont && self.use_fusion && self.use_private
    }

    pub fn ortho_active(&self) -> bool {
        self.use_decomp && self.use_ortho && self.use_fusion && self.use_shared && self.use_private
    }

    fn stream_order(&self) -> Vec<Stream> {
        let mut v = Vec::new();
        if self.use_base {
            v.push(Stream::Base);
        }
        if self.use_shared {
            v.push(Stream::Shared);
        }
        if self.use_private {
            v.push(Stream::Private);
        }
        v
    }
}

/// Forward phase: `Source` is the training wiring (no modulation,
/// self-support head); `Adapt` is the fine-tuning/testing wiring
/// (modulation when attached, refinement head).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Source,
    Adapt,
}

/// Per-batch stream features of one forward pass.
#[derive(Clone, Debug)]
pub struct StreamFeatures {
    pub base: NodeId,
    pub shared: Option<NodeId>,
    pub private: Option<NodeId>,
    /// Private stream before modulation (equals `private` in Source phase).
    pub private_raw: Option<NodeId>,
    pub fused: NodeId,
    pub fusion_weights: Option<Vec<NodeId>>,
}

pub struct Network {
    pub arch: ArchConfig,
    pub switches: AblationSwitches,
    pub head_cfg: HeadConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub shared_branch: Option<SharedBranch>,
    pub private_branch: Option<PrivateBranch>,
    pub projection: ProjectionHead,
    pub discriminator: Discriminator,
    pub fusion: Option<FusionModule>,
    pub modulation: Option<ModulationModule>,
}

impl Network {
    pub fn new(
        arch: ArchConfig,
        switches: AblationSwitches,
        head_cfg: HeadConfig,
        seed: u64,
    ) -> Result<Self> {
        switches.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(
            &mut store,
            &mut rng,
            arch.image_size,
            arch.c_shared,
            arch.c_private,
            arch.c_f,
        );
        let feature_side = backbone.feature_side();

        let shared_branch = (switches.use_fusion && switches.use_shared).then(|| {
            SharedBranch::new(&mut store, &mut rng, arch.c_shared, arch.c_f, feature_side)
        });
        let private_branch = (switches.use_fusion && switches.use_private).then(|| {
            PrivateBranch::new(&mut store, &mut rng, arch.c_private, arch.c_f, arch.ca_reduction)
        });
        let projection = ProjectionHead::new(&mut store, &mut rng, arch.c_f, arch.d_proj);
        let discriminator = Discriminator::new(
            &mut store,
            &mut rng,
            arch.c_f,
            arch.disc_hidden,
            arch.disc_class_head
                .then_some(crate::data::N_SOURCE_CLASSES as usize),
        );
        let fusion = switches
            .use_fusion
            .then(|| FusionModule::new(&mut store, &mut rng, arch.c_f, switches.stream_order()));

        Ok(Network {
            arch,
            switches,
            head_cfg,
            store,
            backbone,
            shared_branch,
            private_branch,
            projection,
            discriminator,
            fusion,
            modulation: None,
        })
    }

    /// Fresh identity-start modulation module (fine-tuning entry point).
    /// No-op when one is already attached.
    pub fn attach_modulation(&mut self, seed: u64) {
        if self.modulation.is_none() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            self.modulation = Some(ModulationModule::new(&mut self.store, &mut rng, self.arch.c_f));
        }
    }

    pub fn feature_side(&self) -> usize {
        self.backbone.feature_side()
    }

    /// Stack image grids into a `[n, 3, h, w]` constant node.
    pub fn images_node(&self, t: &mut Tape, images: &[&ImageGrid]) -> NodeId {
        let n = images.len();
        let side = self.arch.image_size;
        let mut arr = ArrayD::zeros(IxDyn(&[n, 3, side, side]));
        for (i, img) in images.iter().enumerate() {
            for c in 0..3 {
                for y in 0..side {
                    for x in 0..side {
                        arr[[i, c, y, x]] = img.pixels[[c, y, x]];
                    }
                }
            }
        }
        t.constant(arr)
    }

    /// Full stream computation for a batch of images.
    pub fn features(&self, t: &mut Tape, images: NodeId, phase: Phase) -> Result<StreamFeatures> {
        let BackboneFeatures { low, high, base } = self.backbone.extract(t, &self.store, images)?;
        if !self.switches.use_fusion {
            return Ok(StreamFeatures {
                base,
                shared: None,
                private: None,
                private_raw: None,
                fused: base,
                fusion_weights: None,
            });
        }
        let shared = self
            .shared_branch
            .as_ref()
            .map(|b| b.forward(t, &self.store, low));
        let private_raw = self
            .private_branch
            .as_ref()
            .map(|b| b.forward(t, &self.store, high));
        // modulation only participates in the adapt phase
        let private = match (&self.modulation, phase, shared, private_raw) {
            (Some(m), Phase::Adapt, Some(s), Some(p)) => Some(m.apply(t, &self.store, s, p)?),
            _ => private_raw,
        };

        let fusion = self.fusion.as_ref().expect("fusion exists when enabled");
        let mut feats = Vec::new();
        for s in fusion.streams() {
            feats.push(match s {
                Stream::Base => base,
                Stream::Shared => shared.expect("shared stream enabled"),
                Stream::Private => private.expect("private stream enabled"),
            });
        }
        let out = fusion.fuse(t, &self.store, &feats)?;
        Ok(StreamFeatures {
            base,
            shared,
            private,
            private_raw,
            fused: out.fused,
            fusion_weights: Some(out.weights),
        })
    }

    /// Shared-branch features only (pseudo-target stream of the adversarial
    /// pair); `None` when the shared branch is disabled.
    pub fn shared_features(&self, t: &mut Tape, images: NodeId) -> Result<Option<NodeId>> {
        let Some(branch) = &self.shared_branch else {
            return Ok(None);
        };
        let BackboneFeatures { low, .. } = self.backbone.extract(t, &self.store, images)?;
        Ok(Some(branch.forward(t, &self.store, low)))
    }

    /// Groups the main optimizer updates (everything but the frozen
    /// backbone and the discriminator's own parameters).
    pub fn main_group_names(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.shared_branch.is_some() {
            v.push(crate::decomp::GROUP_SHARED);
        }
        if self.private_branch.is_some() {
            v.push(crate::decomp::GROUP_PRIVATE);
        }
        v.push(crate::decomp::GROUP_PROJECTION);
        if self.fusion.is_some() {
            v.push(crate::fusion::GROUP);
        }
        v
    }
}
