//! Feature decomposition: a shared (domain-oriented) branch over the low
//! tap, a private (category-oriented) branch over the high tap, and the
//! three objectives that shape them — an adversarial real/pseudo loss
//! through a gradient-reversal layer, a pixel-contrastive loss against a
//! FIFO memory bank, and a batch-wise cross-Gram orthogonality penalty.

use std::collections::VecDeque;

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBlock, Linear};
use crate::params::ParamStore;
use crate::tensor::{NodeId, Tape};

pub const GROUP_SHARED: &str = "shared_branch";
pub const GROUP_PRIVATE: &str = "private_branch";
pub const GROUP_PROJECTION: &str = "projection_head";
pub const GROUP_DISCRIMINATOR: &str = "discriminator";

/// Sigmoid outputs are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

/// Gradient-reversal strength; the forward pass is the identity.
#[derive(Clone, Copy, Debug)]
pub struct GrlConfig {
    pub lambda: f64,
}

impl GrlConfig {
    pub fn new(lambda: f64) -> Self {
        assert!(lambda >= 0.0, "GRL strength must be nonnegative");
        GrlConfig { lambda }
    }
}

// ---------------------------------------------------------------------------
// attention gates
// ---------------------------------------------------------------------------

/// Position gate in (0,1): channel mean/max maps through a 7x7 conv and a
/// sigmoid.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    conv: Conv2d,
}

impl SpatialAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, group: &str, name: &str) -> Self {
        SpatialAttention {
            // explicit replicate pad keeps the gate translation-invariant:
            // a constant input yields a spatially constant map
            conv: Conv2d::new(store, rng, group, name, 2, 1, 7, 1, 0),
        }
    }

    /// `[n, c, h, w] -> [n, 1, h, w]`
    pub fn map(&self, t: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let mean = t.channel_mean_map(x);
        let max = t.channel_max_map(x);
        let cat = t.concat(&[mean, max], 1);
        let padded = t.replicate_pad(cat, 3);
        let conv = self.conv.forward(t, store, padded);
        t.sigmoid(conv)
    }
}

/// Channel gate in (0,1): global average and max pooling through a shared
/// bottleneck perceptron and a sigmoid.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    fc1: Linear,
    fc2: Linear,
    channels: usize,
}

impl ChannelAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        group: &str,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Self {
        let hidden = (channels / reduction).max(1);
        ChannelAttention {
            fc1: Linear::new(store, rng, group, &format!("{name}.fc1"), channels, hidden),
            fc2: Linear::new(store, rng, group, &format!("{name}.fc2"), hidden, channels),
            channels,
        }
    }

    /// `[n, c, h, w] -> [n, c, 1, 1]`
    pub fn map(&self, t: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let n = t.shape(x)[0];
        let avg = t.global_avg_pool(x);
        let mx = t.global_max_pool(x);
        let branch = |t: &mut Tape, v: NodeId| {
            let h = self.fc1.forward(t, store, v);
            let h = t.relu(h);
            self.fc2.forward(t, store, h)
        };
        let a = branch(t, avg);
        let m = branch(t, mx);
        let s = t.add(a, m);
        let s = t.sigmoid(s);
        t.reshape(s, &[n, self.channels, 1, 1])
    }
}

// ---------------------------------------------------------------------------
// branches
// ---------------------------------------------------------------------------

/// Shared branch over the low tap: `SA(x) * ConvBlock(ConvBlock(x))`,
/// resized down to the high-tap resolution and 1x1-projected to `c_f`.
#[derive(Clone, Debug)]
pub struct SharedBranch {
    blocks: [ConvBlock; 2],
    attention: SpatialAttention,
    proj: Conv2d,
    out_side: usize,
}

impl SharedBranch {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        c_shared: usize,
        c_f: usize,
        out_side: usize,
    ) -> Self {
        SharedBranch {
            blocks: [
                ConvBlock::new(store, rng, GROUP_SHARED, "block1", c_shared, c_shared, 1),
                ConvBlock::new(store, rng, GROUP_SHARED, "block2", c_shared, c_shared, 1),
            ],
            attention: SpatialAttention::new(store, rng, GROUP_SHARED, "sa"),
            proj: Conv2d::new(store, rng, GROUP_SHARED, "proj", c_shared, c_f, 1, 1, 0),
            out_side,
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, low: NodeId) -> NodeId {
        self.forward_with_gate(t, store, low, None)
    }

    /// `gate` overrides the computed spatial attention (tests force the
    /// multiplicative identity / annihilator).
    pub fn forward_with_gate(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        low: NodeId,
        gate: Option<NodeId>,
    ) -> NodeId {
        let g = gate.unwrap_or_else(|| self.attention.map(t, store, low));
        let mut y = low;
        for b in &self.blocks {
            y = b.forward(t, store, y);
        }
        let gated = t.mul(g, y);
        let resized = t.bilinear_resize(gated, self.out_side, self.out_side);
        self.proj.forward(t, store, resized)
    }
}

/// Private branch over the high tap: `CA(x) * ConvBlock(ConvBlock(x))`,
/// 1x1-projected to `c_f`.
#[derive(Clone, Debug)]
pub struct PrivateBranch {
    blocks: [ConvBlock; 2],
    attention: ChannelAttention,
    proj: Conv2d,
}

impl PrivateBranch {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        c_private: usize,
        c_f: usize,
        ca_reduction: usize,
    ) -> Self {
        PrivateBranch {
            blocks: [
                ConvBlock::new(store, rng, GROUP_PRIVATE, "block1", c_private, c_private, 1),
                ConvBlock::new(store, rng, GROUP_PRIVATE, "block2", c_private, c_private, 1),
            ],
            attention: ChannelAttention::new(
                store,
                rng,
                GROUP_PRIVATE,
                "ca",
                c_private,
                ca_reduction,
            ),
            proj: Conv2d::new(store, rng, GROUP_PRIVATE, "proj", c_private, c_f, 1, 1, 0),
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, high: NodeId) -> NodeId {
        self.forward_with_gate(t, store, high, None)
    }

    pub fn forward_with_gate(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        high: NodeId,
        gate: Option<NodeId>,
    ) -> NodeId {
        let g = gate.unwrap_or_else(|| self.attention.map(t, store, high));
        let mut y = high;
        for b in &self.blocks {
            y = b.forward(t, store, y);
        }
        let gated = t.mul(y, g);
        self.proj.forward(t, store, gated)
    }
}

// ---------------------------------------------------------------------------
// discriminator
// ---------------------------------------------------------------------------

/// Global-average-pool followed by a two-layer perceptron. The main head is
/// one real/pseudo logit; an optional auxiliary head predicts source
/// classes (discriminator-step supervision only).
#[derive(Clone, Debug)]
pub struct Discriminator {
    fc1: Linear,
    fc2: Linear,
    class_head: Option<Linear>,
}

impl Discriminator {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        c_f: usize,
        hidden: usize,
        n_classes_aux: Option<usize>,
    ) -> Self {
        Discriminator {
            fc1: Linear::new(store, rng, GROUP_DISCRIMINATOR, "fc1", c_f, hidden),
            fc2: Linear::new(store, rng, GROUP_DISCRIMINATOR, "fc2", hidden, 1),
            class_head: n_classes_aux.map(|n| {
                Linear::new(store, rng, GROUP_DISCRIMINATOR, "class_head", hidden, n)
            }),
        }
    }

    fn hidden(&self, t: &mut Tape, store: &ParamStore, shared: NodeId) -> NodeId {
        let pooled = t.global_avg_pool(shared);
        let h = self.fc1.forward(t, store, pooled);
        t.relu(h)
    }

    /// Real/pseudo logit per sample: `[n, c, h, w] -> [n, 1]`.
    pub fn logits(&self, t: &mut Tape, store: &ParamStore, shared: NodeId) -> NodeId {
        let h = self.hidden(t, store, shared);
        self.fc2.forward(t, store, h)
    }

    /// Clamped sigmoid probability of "real source".
    pub fn prob(&self, t: &mut Tape, store: &ParamStore, shared: NodeId) -> NodeId {
        let l = self.logits(t, store, shared);
        let p = t.sigmoid(l);
        t.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
    }

    /// Auxiliary class logits, when configured.
    pub fn class_logits(&self, t: &mut Tape, store: &ParamStore, shared: NodeId) -> Option<NodeId> {
        self.class_head.as_ref().map(|head| {
            let h = self.hidden(t, store, shared);
            head.forward(t, store, h)
        })
    }
}

// ---------------------------------------------------------------------------
// adversarial loss
// ---------------------------------------------------------------------------

/// `(1/n) * sum[ log D(S(x_s)) + log(1 - D(S(x_t))) ]` with both feature
/// batches routed through the gradient-reversal layer, so the main update
/// reaches the shared branch with reversed sign while the discriminator
/// itself is left to its own optimizer.
pub fn adversarial_loss(
    t: &mut Tape,
    store: &ParamStore,
    disc: &Discriminator,
    shared_src: NodeId,
    shared_pseudo: NodeId,
    grl: GrlConfig,
) -> Result<NodeId> {
    let ns = t.shape(shared_src)[0];
    let nt = t.shape(shared_pseudo)[0];
    if ns == 0 || nt == 0 {
        return Err(Error::EmptyBatch("adversarial_loss"));
    }
    if ns != nt {
        return Err(Error::Shape(format!(
            "adversarial batches must pair up: {ns} vs {nt}"
        )));
    }
    let src = t.grad_reversal(shared_src, grl.lambda);
    let tgt = t.grad_reversal(shared_pseudo, grl.lambda);
    let p_src = disc.prob(t, store, src);
    let p_tgt = disc.prob(t, store, tgt);
    let ln_src = t.ln(p_src);
    let one = t.scalar_const(1.0);
    let q_tgt = t.sub(one, p_tgt);
    let ln_tgt = t.ln(q_tgt);
    let s1 = t.sum_all(ln_src);
    let s2 = t.sum_all(ln_tgt);
    let s = t.add(s1, s2);
    Ok(t.scale(s, 1.0 / ns as f64))
}

// ---------------------------------------------------------------------------
// projection head + memory bank
// ---------------------------------------------------------------------------

/// Linear map from `c_f`-dim pixel features to unit vectors of `d_proj`.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub lin: Linear,
    pub d_proj: usize,
}

impl ProjectionHead {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, c_f: usize, d_proj: usize) -> Self {
        ProjectionHead {
            lin: Linear::new(store, rng, GROUP_PROJECTION, "proj", c_f, d_proj),
            d_proj,
        }
    }

    /// `[m, c_f] -> [m, d_proj]`, rows L2-normalized.
    pub fn embed(&self, t: &mut Tape, store: &ParamStore, pixels: NodeId) -> NodeId {
        let z = self.lin.forward(t, store, pixels);
        t.l2_normalize_rows(z, 1e-12)
    }
}

/// FIFO ring of unit embeddings tagged with their pixel class.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    entries: VecDeque<(Array1<f64>, u32)>,
    capacity: usize,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        MemoryBank {
            entries: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, embedding: Array1<f64>, class_id: u32) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((embedding, class_id));
    }

    pub fn iter(&self) -> impl Iterator<Item = &(Array1<f64>, u32)> {
        self.entries.iter()
    }

    fn same_class_indices(&self, class: u32) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, (_, c))| *c == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// Dense matrix of all entries plus their classes (row order = FIFO).
    fn as_matrix(&self, d: usize) -> (Array2<f64>, Vec<u32>) {
        let q = self.entries.len();
        let mut m = Array2::<f64>::zeros((q, d));
        let mut classes = Vec::with_capacity(q);
        for (i, (e, c)) in self.entries.iter().enumerate() {
            m.row_mut(i).assign(e);
            classes.push(*c);
        }
        (m, classes)
    }
}

// ---------------------------------------------------------------------------
// contrastive loss
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default)]
pub struct ContrastiveDiagnostics {
    pub sampled_pixels: usize,
    pub used_pixels: usize,
    pub no_pair: bool,
}

/// Pixel sampling budget per image and per step.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub max_pixels_per_class: usize,
    pub bank_push_per_step: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: 0.1,
            max_pixels_per_class: 64,
            bank_push_per_step: 32,
        }
    }
}

/// InfoNCE over sampled pixels of the private features.
///
/// For each sampled pixel the positive is a same-class embedding (in-batch
/// first, bank fallback; pixels without any positive are skipped) and the
/// negatives are the different-class bank entries. The positive term is part
/// of the denominator, so the loss is nonnegative. Fresh embeddings are
/// enqueued (detached) after the loss is built.
#[allow(clippy::too_many_arguments)]
pub fn contrastive_loss(
    t: &mut Tape,
    store: &ParamStore,
    proj: &ProjectionHead,
    private: NodeId,
    pixel_labels: &[Array2<u32>],
    bank: &mut MemoryBank,
    cfg: &ContrastiveConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(NodeId, ContrastiveDiagnostics)> {
    let shape = t.shape(private).to_vec();
    if shape[0] == 0 {
        return Err(Error::EmptyBatch("contrastive_loss"));
    }
    if pixel_labels.len() != shape[0] {
        return Err(Error::Shape(format!(
            "label grids ({}) must match batch ({})",
            pixel_labels.len(),
            shape[0]
        )));
    }
    let (h, w) = (shape[2], shape[3]);

    // sample up to max_pixels_per_class foreground + background coords/image
    let mut coords: Vec<(usize, usize, usize)> = Vec::new();
    let mut labels: Vec<u32> = Vec::new();
    for (b, grid) in pixel_labels.iter().enumerate() {
        debug_assert_eq!(grid.dim(), (h, w));
        let mut fg: Vec<(usize, usize)> = Vec::new();
        let mut bg: Vec<(usize, usize)> = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if grid[[y, x]] == crate::data::BACKGROUND_CLASS {
                    bg.push((y, x));
                } else {
                    fg.push((y, x));
                }
            }
        }
        fg.shuffle(rng);
        bg.shuffle(rng);
        for &(y, x) in fg.iter().take(cfg.max_pixels_per_class) {
            coords.push((b, y, x));
            labels.push(grid[[y, x]]);
        }
        for &(y, x) in bg.iter().take(cfg.max_pixels_per_class) {
            coords.push((b, y, x));
            labels.push(crate::data::BACKGROUND_CLASS);
        }
    }
    let m = coords.len();
    let mut diag = ContrastiveDiagnostics {
        sampled_pixels: m,
        ..Default::default()
    };
    if m == 0 {
        diag.no_pair = true;
        return Ok((t.scalar_const(0.0), diag));
    }

    let picked = t.gather_pixels(private, &coords);
    let z = proj.embed(t, store, picked); // [m, d]
    let d = proj.d_proj;

    // choose a positive per pixel: in-batch same-class first, bank fallback
    let mut used: Vec<usize> = Vec::new();
    let mut pos_idx: Vec<usize> = Vec::new(); // in-batch positive (or self for fallback rows)
    let mut fallback_rows: Vec<(usize, Array1<f64>)> = Vec::new(); // row in `used` -> bank vec
    for i in 0..m {
        let in_batch: Vec<usize> = (0..m).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if !in_batch.is_empty() {
            let j = in_batch[rng.random_range(0..in_batch.len())];
            pos_idx.push(j);
            used.push(i);
            continue;
        }
        let from_bank = bank.same_class_indices(labels[i]);
        if !from_bank.is_empty() {
            let k = from_bank[rng.random_range(0..from_bank.len())];
            fallback_rows.push((used.len(), bank.iter().nth(k).unwrap().0.clone()));
            pos_idx.push(i); // placeholder, masked out below
            used.push(i);
            continue;
        }
        // no positive anywhere: skip this pixel
    }
    diag.used_pixels = used.len();
    if used.is_empty() {
        diag.no_pair = true;
        enqueue_embeddings(t, z, &labels, bank, cfg, rng);
        return Ok((t.scalar_const(0.0), diag));
    }

    let u = used.len();
    let z_used = t.gather_rows(z, &used);
    let pos_in_batch = t.gather_rows(z, &pos_idx);

    // blend in-batch positives with constant bank fallbacks
    let mut in_mask = ArrayD::zeros(IxDyn(&[u, 1]));
    let mut fb = ArrayD::zeros(IxDyn(&[u, d]));
    for r in 0..u {
        in_mask[[r, 0]] = 1.0;
    }
    for (r, v) in &fallback_rows {
        in_mask[[*r, 0]] = 0.0;
        for j in 0..d {
            fb[[*r, j]] = v[j];
        }
    }
    let in_mask = t.constant(in_mask);
    let fb = t.constant(fb);
    let masked = t.mul(pos_in_batch, in_mask);
    let pos = t.add(masked, fb);

    let prod = t.mul(z_used, pos);
    let s_pos = t.sum_axes(prod, &[1]); // [u, 1]
    let s_pos_tau = t.scale(s_pos, 1.0 / cfg.tau);
    let exp_pos = t.exp(s_pos_tau);

    // negatives: different-class bank entries
    let denom = if bank.is_empty() {
        exp_pos
    } else {
        let (bank_mat, bank_classes) = bank.as_matrix(d);
        let q = bank_classes.len();
        let bank_node = t.constant(bank_mat.into_dyn());
        let bank_t = t.transpose2(bank_node);
        let sims = t.matmul(z_used, bank_t); // [u, q]
        let sims_tau = t.scale(sims, 1.0 / cfg.tau);
        let exp_neg = t.exp(sims_tau);
        let mut neg_mask = ArrayD::zeros(IxDyn(&[u, q]));
        for (r, &i) in used.iter().enumerate() {
            for (col, &bc) in bank_classes.iter().enumerate() {
                if bc != labels[i] {
                    neg_mask[[r, col]] = 1.0;
                }
            }
        }
        let neg_mask = t.constant(neg_mask);
        let masked_neg = t.mul(exp_neg, neg_mask);
        let neg_sum = t.sum_axes(masked_neg, &[1]); // [u, 1]
        t.add(exp_pos, neg_sum)
    };

    let ln_den = t.ln(denom);
    let ratio = t.sub(ln_den, s_pos_tau);
    let loss = t.mean_all(ratio);

    enqueue_embeddings(t, z, &labels, bank, cfg, rng);
    Ok((loss, diag))
}

/// Detach up to `bank_push_per_step` fresh unit embeddings into the bank.
fn enqueue_embeddings(
    t: &Tape,
    z: NodeId,
    labels: &[u32],
    bank: &mut MemoryBank,
    cfg: &ContrastiveConfig,
    rng: &mut ChaCha8Rng,
) {
    let values = t.value(z);
    let m = labels.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(rng);
    for &i in order.iter().take(cfg.bank_push_per_step) {
        let row: Array1<f64> = (0..values.shape()[1]).map(|j| values[[i, j]]).collect();
        let norm = row.dot(&row).sqrt();
        if (norm - 1.0).abs() < 1e-5 {
            bank.push(row, labels[i]);
        }
    }
}

// ---------------------------------------------------------------------------
// orthogonality loss
// ---------------------------------------------------------------------------

/// `(1/B) * sum_b ||S_b^T P_b||_F^2 / (||S_b||_F * ||P_b||_F)` where each
/// sample is flattened to a (pixels x channels) matrix. Samples whose norm
/// product underflows the guard contribute zero.
pub fn orthogonality_loss(t: &mut Tape, shared: NodeId, private: NodeId) -> Result<NodeId> {
    let s_shape = t.shape(shared).to_vec();
    let p_shape = t.shape(private).to_vec();
    if s_shape != p_shape {
        return Err(Error::Shape(format!(
            "orthogonality expects equal shapes, got {s_shape:?} vs {p_shape:?}"
        )));
    }
    let b = s_shape[0];
    if b == 0 {
        return Err(Error::EmptyBatch("orthogonality_loss"));
    }
    let (c, h, w) = (s_shape[1], s_shape[2], s_shape[3]);
    const GUARD: f64 = 1e-8;

    let mut total: Option<NodeId> = None;
    for i in 0..b {
        let s_i = t.narrow(shared, 0, i, 1);
        let p_i = t.narrow(private, 0, i, 1);
        let s_cm = t.reshape(s_i, &[c, h * w]); // channels x pixels = S^T
        let p_cm = t.reshape(p_i, &[c, h * w]);

        let ns2 = t.value(s_cm).iter().map(|v| v * v).sum::<f64>();
        let np2 = t.value(p_cm).iter().map(|v| v * v).sum::<f64>();
        if ns2.sqrt() * np2.sqrt() <= GUARD {
            continue; // zero contribution, guarded denominator
        }

        let p_hw = t.transpose2(p_cm); // pixels x channels = P
        let gram = t.matmul(s_cm, p_hw); // S^T P, channels x channels
        let gram_sq = t.square(gram);
        let num = t.sum_all(gram_sq);

        let s_sq = t.square(s_cm);
        let s_ss = t.sum_all(s_sq);
        let ns = t.sqrt(s_ss);
        let p_sq = t.square(p_cm);
        let p_ss = t.sum_all(p_sq);
        let np = t.sqrt(p_ss);
        let den = t.mul(ns, np);
        let term = t.div(num, den);
        total = Some(match total {
            Some(acc) => t.add(acc, term),
            None => term,
        });
    }
    Ok(match total {
        Some(acc) => t.scale(acc, 1.0 / b as f64),
        None => t.scalar_const(0.0),
    })
}
