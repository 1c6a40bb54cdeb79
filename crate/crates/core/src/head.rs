//! Prototype-based prediction heads and the mIoU metric.
//!
//! Training phase: support prototypes, cosine-similarity scoring with a
//! temperature-scaled two-way softmax, and one self-support refinement round
//! from confident query pixels. Fine-tuning/testing phase: prototype-mask
//! cyclic refinement that re-extracts query prototypes from the current mask
//! and re-predicts with blended prototypes. Both heads are parameter-free;
//! they exist on the tape so the training loss can flow through them.

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::data::MaskGrid;
use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape};

pub const GROUP: &str = "seg_head";

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct HeadConfig {
    /// Similarity temperature for the two-way softmax.
    pub temperature: f64,
    /// Confidence thresholds picking self-support pixels.
    pub conf_hi: f64,
    pub conf_lo: f64,
    /// Support/self blend weight for refined prototypes.
    pub blend: f64,
    /// Rounds of prototype-mask refinement at fine-tune/test time.
    pub refine_rounds: usize,
    /// Score threshold deriving the binary mask.
    pub threshold: f64,
    /// Blend query prototypes during refinement (off = plain matching).
    pub query_fusion: bool,
    /// Report foreground-only mIoU instead of the fg/bg average.
    pub fg_only_miou: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            temperature: 0.1,
            conf_hi: 0.7,
            conf_lo: 0.3,
            blend: 0.5,
            refine_rounds: 3,
            threshold: 0.5,
            query_fusion: true,
            fg_only_miou: false,
        }
    }
}

// ---------------------------------------------------------------------------
// mask resolution helpers
// ---------------------------------------------------------------------------

/// Area-average the binary mask onto `side x side` cells, re-binarized at
/// 0.5 (ties to foreground). The image side must be a multiple of `side`.
pub fn downsample_mask(mask: &MaskGrid, side: usize) -> Array2<u8> {
    let full = mask.side();
    assert!(full % side == 0, "mask side {full} not a multiple of {side}");
    let block = full / side;
    Array2::from_shape_fn((side, side), |(y, x)| {
        let mut s = 0usize;
        for by in 0..block {
            for bx in 0..block {
                s += mask.labels[[y * block + by, x * block + bx]] as usize;
            }
        }
        u8::from(2 * s >= block * block)
    })
}

/// Per-pixel class labels at feature resolution: `class_id` on foreground
/// cells, the background class elsewhere.
pub fn mask_labels(mask: &MaskGrid, class_id: u32, side: usize) -> Array2<u32> {
    let ds = downsample_mask(mask, side);
    ds.mapv(|v| if v == 1 { class_id } else { crate::data::BACKGROUND_CLASS })
}

fn mask_node(t: &mut Tape, ds: &Array2<u8>) -> NodeId {
    let (h, w) = ds.dim();
    let arr = ArrayD::from_shape_vec(
        IxDyn(&[1, 1, h, w]),
        ds.iter().map(|&v| f64::from(v)).collect(),
    )
    .unwrap();
    t.constant(arr)
}

// ---------------------------------------------------------------------------
// prototypes
// ---------------------------------------------------------------------------

/// L2-normalized mean of the feature columns selected by a feature-res
/// binary mask; empty masks fall back to the global average.
/// `feat: [1, c, h, w] -> [1, c]`.
pub fn masked_average_pool(t: &mut Tape, feat: NodeId, mask_ds: &Array2<u8>) -> NodeId {
    let s = t.shape(feat).to_vec();
    debug_assert_eq!(s[0], 1, "pool one image at a time");
    let count = mask_ds.iter().filter(|&&v| v == 1).count();
    let pooled = if count == 0 {
        t.mean_axes(feat, &[2, 3])
    } else {
        let m = mask_node(t, mask_ds);
        let masked = t.mul(feat, m);
        let summed = t.sum_axes(masked, &[2, 3]);
        t.scale(summed, 1.0 / count as f64)
    };
    let flat = t.reshape(pooled, &[1, s[1]]);
    t.l2_normalize_rows(flat, 1e-12)
}

/// Same, downsampling the image-resolution mask first.
pub fn masked_average_pool_image(t: &mut Tape, feat: NodeId, mask: &MaskGrid) -> NodeId {
    let side = t.shape(feat)[2];
    let ds = downsample_mask(mask, side);
    masked_average_pool(t, feat, &ds)
}

/// Unit foreground/background prototype pair.
#[derive(Clone, Copy, Debug)]
pub struct Prototype {
    pub fg: NodeId,
    pub bg: NodeId,
}

fn complement(ds: &Array2<u8>) -> Array2<u8> {
    ds.mapv(|v| 1 - v)
}

fn average_protos(t: &mut Tape, protos: &[NodeId]) -> NodeId {
    let mut acc = protos[0];
    for &p in &protos[1..] {
        acc = t.add(acc, p);
    }
    let mean = t.scale(acc, 1.0 / protos.len() as f64);
    t.l2_normalize_rows(mean, 1e-12)
}

/// Shot prototypes averaged across the K supports, renormalized.
pub fn support_prototypes(
    t: &mut Tape,
    support_feats: &[NodeId],
    support_masks: &[&MaskGrid],
) -> Result<Prototype> {
    if support_feats.is_empty() || support_feats.len() != support_masks.len() {
        return Err(Error::EmptyBatch("support_prototypes"));
    }
    let side = t.shape(support_feats[0])[2];
    let mut fgs = Vec::new();
    let mut bgs = Vec::new();
    for (&f, m) in support_feats.iter().zip(support_masks) {
        let ds = downsample_mask(m, side);
        fgs.push(masked_average_pool(t, f, &ds));
        bgs.push(masked_average_pool(t, f, &complement(&ds)));
    }
    Ok(Prototype {
        fg: average_protos(t, &fgs),
        bg: average_protos(t, &bgs),
    })
}

// ---------------------------------------------------------------------------
// scoring
// ---------------------------------------------------------------------------

/// Temperature-scaled logit difference between the foreground and
/// background cosine similarities: `[1, 1, h, w]`. The foreground score is
/// its sigmoid (two-way softmax over `(sim_fg/T, sim_bg/T)`).
pub fn score_logits(t: &mut Tape, query_feat: NodeId, proto: Prototype, temperature: f64) -> NodeId {
    let s = t.shape(query_feat).to_vec();
    let sq = t.square(query_feat);
    let ss = t.sum_axes(sq, &[1]);
    let ss = t.add_scalar(ss, 1e-12);
    let norm = t.sqrt(ss);
    let qhat = t.div(query_feat, norm);
    let mut sims = Vec::new();
    for p in [proto.fg, proto.bg] {
        let p4 = t.reshape(p, &[1, s[1], 1, 1]);
        let prod = t.mul(qhat, p4);
        sims.push(t.sum_axes(prod, &[1]));
    }
    let diff = t.sub(sims[0], sims[1]);
    t.scale(diff, 1.0 / temperature)
}

/// One head pass, with the per-round feature-resolution masks kept for
/// diagnostics.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    /// Final logit difference at feature resolution, `[1, 1, h, w]`.
    pub logits: NodeId,
    /// Logits of the plain support-prototype match (round 0 / step 1).
    pub initial_logits: NodeId,
    /// Whether the self-support / query-fusion refinement actually ran.
    pub refined: bool,
    /// Binary masks per refinement round (feature resolution).
    pub round_masks: Vec<Array2<u8>>,
}

fn score_to_mask(t: &Tape, logits: NodeId, threshold: f64) -> Array2<u8> {
    let v = t.value(logits);
    let (h, w) = (v.shape()[2], v.shape()[3]);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let p = 1.0 / (1.0 + (-v[[0, 0, y, x]]).exp());
        u8::from(p > threshold)
    })
}

/// Training-phase head: cosine match against support prototypes plus one
/// self-support round built from confident query pixels.
pub fn predict_with_self_support(
    t: &mut Tape,
    cfg: &HeadConfig,
    support_feats: &[NodeId],
    support_masks: &[&MaskGrid],
    query_feat: NodeId,
) -> Result<HeadOutput> {
    let proto = support_prototypes(t, support_feats, support_masks)?;
    let initial = score_logits(t, query_feat, proto, cfg.temperature);

    // confident pixels from the detached score
    let v = t.value(initial);
    let (h, w) = (v.shape()[2], v.shape()[3]);
    let mut hi = Array2::<u8>::zeros((h, w));
    let mut lo = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let p = 1.0 / (1.0 + (-v[[0, 0, y, x]]).exp());
            if p > cfg.conf_hi {
                hi[[y, x]] = 1;
            } else if p < cfg.conf_lo {
                lo[[y, x]] = 1;
            }
        }
    }
    let n_hi = hi.iter().filter(|&&m| m == 1).count();
    let n_lo = lo.iter().filter(|&&m| m == 1).count();
    if n_hi == 0 || n_lo == 0 {
        return Ok(HeadOutput {
            logits: initial,
            initial_logits: initial,
            refined: false,
            round_masks: Vec::new(),
        });
    }

    let self_fg = masked_average_pool(t, query_feat, &hi);
    let self_bg = masked_average_pool(t, query_feat, &lo);
    let blend = |t: &mut Tape, a: NodeId, b: NodeId| {
        let wa = t.scale(a, cfg.blend);
        let wb = t.scale(b, 1.0 - cfg.blend);
        let s = t.add(wa, wb);
        t.l2_normalize_rows(s, 1e-12)
    };
    let refined_proto = Prototype {
        fg: blend(t, proto.fg, self_fg),
        bg: blend(t, proto.bg, self_bg),
    };
    let logits = score_logits(t, query_feat, refined_proto, cfg.temperature);
    Ok(HeadOutput {
        logits,
        initial_logits: initial,
        refined: true,
        round_masks: Vec::new(),
    })
}

/// Fine-tune/test-phase head: initial support-prototype match, then
/// `refine_rounds` cycles of (extract query prototypes from the current
/// mask) -> (blend with support prototypes) -> (re-score).
pub fn predict_with_refinement(
    t: &mut Tape,
    cfg: &HeadConfig,
    support_feats: &[NodeId],
    support_masks: &[&MaskGrid],
    query_feat: NodeId,
    rounds: usize,
) -> Result<HeadOutput> {
    if rounds == 0 {
        return Err(Error::Shape("refinement needs rounds >= 1".into()));
    }
    let proto = support_prototypes(t, support_feats, support_masks)?;
    let initial = score_logits(t, query_feat, proto, cfg.temperature);

    let mut logits = initial;
    let mut round_masks = Vec::new();
    let mut refined = false;
    for _ in 1..=rounds {
        if !cfg.query_fusion {
            round_masks.push(score_to_mask(t, logits, cfg.threshold));
            continue;
        }
        let mut mask = score_to_mask(t, logits, cfg.threshold);
        let n_fg = mask.iter().filter(|&&m| m == 1).count();
        let total = mask.len();
        if n_fg == 0 || n_fg == total {
            // degenerate: re-threshold at the score median for prototype
            // extraction only
            let v = t.value(logits);
            let mut scores: Vec<f64> = v.iter().copied().collect();
            scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = scores[scores.len() / 2];
            let (h, w) = mask.dim();
            mask = Array2::from_shape_fn((h, w), |(y, x)| u8::from(v[[0, 0, y, x]] > median));
            let n2 = mask.iter().filter(|&&m| m == 1).count();
            if n2 == 0 || n2 == total {
                round_masks.push(mask);
                continue; // scores are flat; keep current prototypes
            }
        }
        let qfg = masked_average_pool(t, query_feat, &mask);
        let qbg = masked_average_pool(t, query_feat, &complement(&mask));
        let fuse = |t: &mut Tape, a: NodeId, b: NodeId| {
            let s = t.add(a, b);
            let m = t.scale(s, 0.5);
            t.l2_normalize_rows(m, 1e-12)
        };
        let fused = Prototype {
            fg: fuse(t, proto.fg, qfg),
            bg: fuse(t, proto.bg, qbg),
        };
        logits = score_logits(t, query_feat, fused, cfg.temperature);
        refined = true;
        round_masks.push(score_to_mask(t, logits, cfg.threshold));
    }
    Ok(HeadOutput {
        logits,
        initial_logits: initial,
        refined,
        round_masks,
    })
}

// ---------------------------------------------------------------------------
// image-resolution prediction + loss
// ---------------------------------------------------------------------------

/// Foreground score in `[0, 1]` and its thresholded mask at image
/// resolution.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub fg_score: Array2<f64>,
    pub mask: Array2<u8>,
}

/// Bilinearly upsample feature-res logits and threshold the sigmoid.
pub fn upsample_prediction(
    t: &mut Tape,
    logits: NodeId,
    image_side: usize,
    threshold: f64,
) -> Prediction {
    let up = t.bilinear_resize(logits, image_side, image_side);
    let v = t.value(up);
    let fg_score =
        Array2::from_shape_fn((image_side, image_side), |(y, x)| {
            1.0 / (1.0 + (-v[[0, 0, y, x]]).exp())
        });
    let mask = fg_score.mapv(|p| u8::from(p > threshold));
    Prediction { fg_score, mask }
}

/// Pixel-wise binary cross-entropy of the upsampled logits against the
/// query mask: `mean(softplus(d) - y*d)`.
pub fn query_ce_loss(t: &mut Tape, logits: NodeId, query_mask: &MaskGrid) -> NodeId {
    let side = query_mask.side();
    let up = t.bilinear_resize(logits, side, side);
    let y = ArrayD::from_shape_vec(
        IxDyn(&[1, 1, side, side]),
        query_mask.labels.iter().map(|&v| f64::from(v)).collect(),
    )
    .unwrap();
    let y = t.constant(y);
    let e = t.exp(up);
    let e1 = t.add_scalar(e, 1.0);
    let softplus = t.ln(e1);
    let yd = t.mul(y, up);
    let pix = t.sub(softplus, yd);
    t.mean_all(pix)
}

// ---------------------------------------------------------------------------
// mIoU
// ---------------------------------------------------------------------------

/// Running intersection/union totals per class (bg = 0, fg = 1).
#[derive(Clone, Copy, Debug, Default)]
pub struct IouAccumulator {
    inter: [u64; 2],
    union: [u64; 2],
}

impl IouAccumulator {
    pub fn add(&mut self, pred: &Array2<u8>, gt: &MaskGrid) {
        debug_assert_eq!(pred.dim(), gt.labels.dim());
        for (p, g) in pred.iter().zip(gt.labels.iter()) {
            for class in 0..2u8 {
                let pm = *p == class;
                let gm = *g == class;
                if pm && gm {
                    self.inter[class as usize] += 1;
                }
                if pm || gm {
                    self.union[class as usize] += 1;
                }
            }
        }
    }

    /// Zero union (class absent everywhere, never predicted) counts as a
    /// vacuous 1.
    pub fn class_iou(&self, class: usize) -> f64 {
        if self.union[class] == 0 {
            1.0
        } else {
            self.inter[class] as f64 / self.union[class] as f64
        }
    }

    pub fn foreground_iou(&self) -> f64 {
        self.class_iou(1)
    }

    pub fn background_iou(&self) -> f64 {
        self.class_iou(0)
    }

    pub fn miou(&self, fg_only: bool) -> f64 {
        if fg_only {
            self.foreground_iou()
        } else {
            0.5 * (self.foreground_iou() + self.background_iou())
        }
    }
}

/// Episode-set mIoU: per-class totals accumulated over all pairs, then
/// averaged over the two classes.
pub fn miou(preds: &[Prediction], gts: &[MaskGrid], fg_only: bool) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::Shape("miou needs equal-length lists".into()));
    }
    let mut acc = IouAccumulator::default();
    for (p, g) in preds.iter().zip(gts) {
        if p.mask.dim() != g.labels.dim() {
            return Err(Error::Shape("miou shape mismatch".into()));
        }
        acc.add(&p.mask, g);
    }
    Ok(acc.miou(fg_only))
}
