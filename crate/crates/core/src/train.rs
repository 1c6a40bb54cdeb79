//! Training pipeline: baseline pretraining, source training with
//! alternating main/discriminator updates, support-only target fine-tuning,
//! and evaluation.

use std::path::Path;

use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{
    episode_seed, pseudo_target_transform, augment_support, Episode, MaskGrid, QueryMaskGuard,
    SceneSource,
};
use crate::decomp::{
    adversarial_loss, contrastive_loss, orthogonality_loss, ContrastiveConfig, GrlConfig,
    MemoryBank, GROUP_DISCRIMINATOR,
};
use crate::error::{Error, Result};
use crate::head::{
    mask_labels, miou, predict_with_refinement, predict_with_self_support, query_ce_loss,
    upsample_prediction, IouAccumulator, Prediction,
};
use crate::model::{Network, Phase};
use crate::opt::{Adam, Sgd};
use crate::tensor::{NodeId, Tape};

/// Paper-scale schedule kept for reference; the defaults below are the
/// desk-scale configuration.
pub const FULL_SCALE_EPOCHS: usize = 20;
pub const FULL_SCALE_FINETUNE_EPOCHS: usize = 40;
pub const FULL_SCALE_IMAGE_SIZE: usize = 400;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub lambda_ce: f64,
    pub lambda_adv: f64,
    pub lambda_cont: f64,
    pub lambda_ortho: f64,
    pub s_steps: usize,
    pub d_steps: usize,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub batch_size: usize,
    pub k_shots: usize,
    pub lr_main: f64,
    pub lr_disc: f64,
    pub lr_finetune: f64,
    pub momentum: f64,
    pub weight_decay_disc: f64,
    pub seed: u64,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    /// Support sets drawn per target domain during fine-tuning.
    pub finetune_episodes: usize,
    /// Episodes per domain for evaluation passes.
    pub eval_episodes: usize,
    /// Epochs between mid-training evaluations (0 = none).
    pub eval_every: usize,
    pub grl_lambda: f64,
    /// Fraction of main updates over which the GRL strength warms up.
    pub grl_warmup_frac: f64,
    pub tau: f64,
    pub bank_capacity: usize,
    pub bank_push: usize,
    pub pixels_per_class: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_ce: 1.0,
            lambda_adv: 0.1,
            lambda_cont: 0.1,
            lambda_ortho: 0.01,
            s_steps: 1,
            d_steps: 1,
            epochs: 10,
            episodes_per_epoch: 200,
            batch_size: 8,
            k_shots: 1,
            lr_main: 1e-3,
            lr_disc: 1e-4,
            lr_finetune: 5e-4,
            momentum: 0.9,
            weight_decay_disc: 0.01,
            seed: 0,
            pretrain_epochs: 5,
            finetune_epochs: 15,
            finetune_episodes: 12,
            eval_episodes: 32,
            eval_every: 0,
            grl_lambda: 1.0,
            grl_warmup_frac: 0.1,
            tau: 0.1,
            bank_capacity: 2048,
            bank_push: 32,
            pixels_per_class: 64,
        }
    }
}

impl TrainConfig {
    /// The full-scale schedule the desk-scale defaults stand in for.
    pub fn paper_scale() -> Self {
        TrainConfig {
            epochs: FULL_SCALE_EPOCHS,
            finetune_epochs: FULL_SCALE_FINETUNE_EPOCHS,
            ..TrainConfig::default()
        }
    }

    fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            tau: self.tau,
            max_pixels_per_class: self.pixels_per_class,
            bank_push_per_step: self.bank_push,
        }
    }
}

/// Named scalar losses of one step (weighted composite in `total`).
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub ce: f64,
    pub adv: f64,
    pub cont: f64,
    pub ortho: f64,
    pub disc_real: f64,
    pub disc_fake: f64,
    pub total: f64,
}

impl LossBundle {
    fn check_finite(&self, step: usize) -> Result<()> {
        for (name, v) in [
            ("ce", self.ce),
            ("adv", self.adv),
            ("cont", self.cont),
            ("ortho", self.ortho),
            ("disc_real", self.disc_real),
            ("disc_fake", self.disc_fake),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    component: name.into(),
                    step,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum UpdateKind {
    Main,
    Discriminator,
}

/// Group checksums captured after each parameter update.
#[derive(Clone, Copy, Debug)]
pub struct ChecksumRecord {
    pub kind: UpdateKind,
    pub backbone: u64,
    pub main: u64,
    pub discriminator: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: String,
    pub losses: LossBundle,
    pub no_pair_steps: usize,
    /// `(domain_id, miou)` pairs when an evaluation ran this epoch.
    pub miou_per_domain: Vec<(u32, f64)>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainRun {
    pub records: Vec<EpochRecord>,
    pub update_log: Vec<UpdateKind>,
    pub checksum_log: Vec<ChecksumRecord>,
}

fn main_checksum(net: &Network) -> u64 {
    let mut h = 0u64;
    for g in net.main_group_names() {
        h ^= net.store.checksum_group(g).rotate_left(11);
    }
    if net.modulation.is_some() {
        h ^= net.store.checksum_group(crate::modulation::GROUP).rotate_left(23);
    }
    h
}

fn record_checksums(net: &Network, kind: UpdateKind, run: &mut TrainRun) {
    run.update_log.push(kind);
    run.checksum_log.push(ChecksumRecord {
        kind,
        backbone: net.store.checksum_group(crate::backbone::GROUP),
        main: main_checksum(net),
        discriminator: net.store.checksum_group(GROUP_DISCRIMINATOR),
    });
}

// ---------------------------------------------------------------------------
// one main-model step
// ---------------------------------------------------------------------------

/// Detached shared features cached for the discriminator phase.
struct DiscBatch {
    src: ArrayD<f64>,
    pseudo: ArrayD<f64>,
}

struct MainStepOut {
    bundle: LossBundle,
    no_pair: bool,
    disc_batch: Option<DiscBatch>,
}

#[allow(clippy::too_many_arguments)]
fn main_step(
    net: &mut Network,
    episodes: &[Episode],
    cfg: &TrainConfig,
    bank: &mut MemoryBank,
    grl_lambda: f64,
    step: usize,
    optimizer: &mut Sgd,
    rng: &mut ChaCha8Rng,
) -> Result<MainStepOut> {
    let sw = net.switches;
    let mut t = Tape::new();
    let feat_side = net.feature_side();

    let mut ce_terms = Vec::new();
    let mut shared_q = Vec::new();
    let mut private_q = Vec::new();
    let mut label_grids = Vec::new();
    let mut query_imgs = Vec::new();

    for ep in episodes {
        let sup_imgs: Vec<&crate::data::ImageGrid> = ep.support.iter().map(|(i, _)| i).collect();
        let sup_node = net.images_node(&mut t, &sup_imgs);
        let sup_feats = net.features(&mut t, sup_node, Phase::Source)?;
        let sup_slices: Vec<NodeId> = (0..ep.support.len())
            .map(|k| t.narrow(sup_feats.fused, 0, k, 1))
            .collect();
        let sup_masks: Vec<&MaskGrid> = ep.support.iter().map(|(_, m)| m).collect();

        let q_node = net.images_node(&mut t, &[&ep.query_image]);
        let q_feats = net.features(&mut t, q_node, Phase::Source)?;
        let out = predict_with_self_support(
            &mut t,
            &net.head_cfg,
            &sup_slices,
            &sup_masks,
            q_feats.fused,
        )?;
        ce_terms.push(query_ce_loss(&mut t, out.logits, &ep.query_mask));

        if let Some(s) = q_feats.shared {
            shared_q.push(s);
        }
        if let Some(p) = q_feats.private_raw {
            private_q.push(p);
            label_grids.push(mask_labels(&ep.query_mask, ep.class_id, feat_side));
        }
        query_imgs.push(&ep.query_image);
    }

    let mut ce = ce_terms[0];
    for &term in &ce_terms[1..] {
        ce = t.add(ce, term);
    }
    let ce = t.scale(ce, 1.0 / ce_terms.len() as f64);

    let mut bundle = LossBundle {
        ce: t.scalar(ce),
        ..Default::default()
    };
    let mut total = t.scale(ce, cfg.lambda_ce);
    let mut no_pair = false;
    let mut disc_batch = None;

    if sw.adv_active() {
        let shared_src = t.concat(&shared_q, 0);
        let pseudo: Vec<crate::data::ImageGrid> = query_imgs
            .iter()
            .enumerate()
            .map(|(i, img)| {
                pseudo_target_transform(img, episode_seed(cfg.seed, 0x77, step * 1031 + i))
            })
            .collect();
        let pseudo_refs: Vec<&crate::data::ImageGrid> = pseudo.iter().collect();
        let pseudo_node = net.images_node(&mut t, &pseudo_refs);
        let shared_pseudo = net
            .shared_features(&mut t, pseudo_node)?
            .expect("shared branch active");
        let adv = adversarial_loss(
            &mut t,
            &net.store,
            &net.discriminator,
            shared_src,
            shared_pseudo,
            GrlConfig::new(grl_lambda),
        )?;
        bundle.adv = t.scalar(adv);
        let weighted = t.scale(adv, cfg.lambda_adv);
        total = t.add(total, weighted);
        disc_batch = Some(DiscBatch {
            src: t.value(shared_src).clone(),
            pseudo: t.value(shared_pseudo).clone(),
        });
    }

    if sw.cont_active() {
        let private = t.concat(&private_q, 0);
        let (cont, diag) = contrastive_loss(
            &mut t,
            &net.store,
            &net.projection,
            private,
            &label_grids,
            bank,
            &cfg.contrastive(),
            rng,
        )?;
        bundle.cont = t.scalar(cont);
        no_pair = diag.no_pair;
        let weighted = t.scale(cont, cfg.lambda_cont);
        total = t.add(total, weighted);
    }

    if sw.ortho_active() {
        let shared = t.concat(&shared_q, 0);
        let private = t.concat(&private_q, 0);
        let ortho = orthogonality_loss(&mut t, shared, private)?;
        bundle.ortho = t.scalar(ortho);
        let weighted = t.scale(ortho, cfg.lambda_ortho);
        total = t.add(total, weighted);
    }

    bundle.total = t.scalar(total);
    bundle.check_finite(step)?;

    let grads = t.backward(total);
    optimizer.step(&mut net.store, &grads);
    Ok(MainStepOut {
        bundle,
        no_pair,
        disc_batch,
    })
}

// ---------------------------------------------------------------------------
// one discriminator step
// ---------------------------------------------------------------------------

/// Eq.-13-style update on detached features: BCE toward 1 for real source
/// features and 0 for pseudo-target ones.
fn disc_step(
    net: &mut Network,
    batch: &DiscBatch,
    optimizer: &mut Adam,
    step: usize,
) -> Result<(f64, f64)> {
    if batch.src.shape()[0] == 0 || batch.pseudo.shape()[0] == 0 {
        return Err(Error::EmptyBatch("disc_step"));
    }
    let mut t = Tape::new();
    let src = t.constant(batch.src.clone());
    let pseudo = t.constant(batch.pseudo.clone());
    let p_real = net.discriminator.prob(&mut t, &net.store, src);
    let p_fake = net.discriminator.prob(&mut t, &net.store, pseudo);
    let ln_real = t.ln(p_real);
    let l_real = t.mean_all(ln_real);
    let l_real = t.neg(l_real);
    let one = t.scalar_const(1.0);
    let q = t.sub(one, p_fake);
    let ln_fake = t.ln(q);
    let l_fake = t.mean_all(ln_fake);
    let l_fake = t.neg(l_fake);
    let loss = t.add(l_real, l_fake);

    let (real_v, fake_v) = (t.scalar(l_real), t.scalar(l_fake));
    if !real_v.is_finite() || !fake_v.is_finite() {
        return Err(Error::NonFinite {
            component: "disc".into(),
            step,
        });
    }
    let grads = t.backward(loss);
    optimizer.step(&mut net.store, &grads);
    Ok((real_v, fake_v))
}

// ---------------------------------------------------------------------------
// pretraining
// ---------------------------------------------------------------------------

/// Cross-entropy training of the backbone (plus base projection) with the
/// self-support head on source episodes. The caller freezes the backbone
/// afterwards.
pub fn pretrain_baseline(
    net: &mut Network,
    source: &SceneSource,
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    let mut run = TrainRun::default();
    let mut opt = Sgd::new(
        net.store.group_ids(crate::backbone::GROUP),
        cfg.lr_main,
        cfg.momentum,
    );
    let side = net.arch.image_size;
    let mut step = 0usize;
    for epoch in 0..cfg.pretrain_epochs {
        let mut sum = LossBundle::default();
        let mut batches = 0usize;
        let mut idx = 0usize;
        while idx < cfg.episodes_per_epoch {
            let n = cfg.batch_size.min(cfg.episodes_per_epoch - idx);
            let mut t = Tape::new();
            let mut terms = Vec::new();
            for i in 0..n {
                let ep = source.sample_episode(
                    episode_seed(cfg.seed, epoch, idx + i),
                    cfg.k_shots,
                    side,
                )?;
                let sup_imgs: Vec<&crate::data::ImageGrid> =
                    ep.support.iter().map(|(im, _)| im).collect();
                let sup_node = net.images_node(&mut t, &sup_imgs);
                let sup_feats = net.features(&mut t, sup_node, Phase::Source)?;
                let slices: Vec<NodeId> = (0..ep.support.len())
                    .map(|k| t.narrow(sup_feats.fused, 0, k, 1))
                    .collect();
                let masks: Vec<&MaskGrid> = ep.support.iter().map(|(_, m)| m).collect();
                let q_node = net.images_node(&mut t, &[&ep.query_image]);
                let q = net.features(&mut t, q_node, Phase::Source)?;
                let out =
                    predict_with_self_support(&mut t, &net.head_cfg, &slices, &masks, q.fused)?;
                terms.push(query_ce_loss(&mut t, out.logits, &ep.query_mask));
            }
            let mut ce = terms[0];
            for &term in &terms[1..] {
                ce = t.add(ce, term);
            }
            let ce = t.scale(ce, 1.0 / terms.len() as f64);
            let v = t.scalar(ce);
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    component: "ce".into(),
                    step,
                });
            }
            let grads = t.backward(ce);
            opt.step(&mut net.store, &grads);
            record_checksums(net, UpdateKind::Main, &mut run);
            sum.ce += v;
            sum.total += v;
            batches += 1;
            step += 1;
            idx += n;
        }
        run.records.push(EpochRecord {
            epoch,
            phase: "pretrain".into(),
            losses: LossBundle {
                ce: sum.ce / batches as f64,
                total: sum.total / batches as f64,
                ..Default::default()
            },
            no_pair_steps: 0,
            miou_per_domain: Vec::new(),
        });
    }
    Ok(run)
}

// ---------------------------------------------------------------------------
// source training
// ---------------------------------------------------------------------------

/// Alternating optimization: `s_steps` main updates (SGD on the weighted
/// composite) then `d_steps` discriminator updates (Adam on the detached
/// BCE), per iteration. The backbone must already be frozen.
#[allow(clippy::too_many_arguments)]
pub fn train_source(
    net: &mut Network,
    source: &SceneSource,
    cfg: &TrainConfig,
    eval_domains: &[SceneSource],
    ckpt_dir: Option<&Path>,
) -> Result<TrainRun> {
    let mut run = TrainRun::default();
    let groups = net.main_group_names();
    let main_ids = net.store.trainable_in(&groups);
    let mut main_opt = Sgd::new(main_ids, cfg.lr_main, cfg.momentum);
    let mut disc_opt = Adam::new(
        net.store.group_ids(GROUP_DISCRIMINATOR),
        cfg.lr_disc,
        cfg.weight_decay_disc,
    );
    let mut bank = MemoryBank::new(cfg.bank_capacity);
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(cfg.seed, 0x5a17, 1));

    let episodes_per_iter = cfg.batch_size * cfg.s_steps;
    let iters_per_epoch = cfg.episodes_per_epoch.div_ceil(episodes_per_iter).max(1);
    let planned_main = (cfg.epochs * iters_per_epoch * cfg.s_steps) as f64;
    let warmup = (cfg.grl_warmup_frac * planned_main).max(1.0);
    let side = net.arch.image_size;

    let mut main_done = 0usize;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut sums = LossBundle::default();
        let mut n_main = 0usize;
        let mut n_disc = 0usize;
        let mut no_pair_steps = 0usize;
        for iter in 0..iters_per_epoch {
            let mut cached: Option<DiscBatch> = None;
            for s in 0..cfg.s_steps {
                let mut episodes = Vec::with_capacity(cfg.batch_size);
                for b in 0..cfg.batch_size {
                    let idx = iter * episodes_per_iter + s * cfg.batch_size + b;
                    episodes.push(source.sample_episode(
                        episode_seed(cfg.seed, 0x100 + epoch, idx),
                        cfg.k_shots,
                        side,
                    )?);
                }
                let grl = cfg.grl_lambda * ((main_done as f64 + 1.0) / warmup).min(1.0);
                let out = main_step(
                    net, &episodes, cfg, &mut bank, grl, step, &mut main_opt, &mut rng,
                )?;
                record_checksums(net, UpdateKind::Main, &mut run);
                sums.ce += out.bundle.ce;
                sums.adv += out.bundle.adv;
                sums.cont += out.bundle.cont;
                sums.ortho += out.bundle.ortho;
                sums.total += out.bundle.total;
                if out.no_pair {
                    no_pair_steps += 1;
                }
                if out.disc_batch.is_some() {
                    cached = out.disc_batch;
                }
                main_done += 1;
                n_main += 1;
                step += 1;
            }
            if let Some(batch) = &cached {
                for _ in 0..cfg.d_steps {
                    let (real, fake) = disc_step(net, batch, &mut disc_opt, step)?;
                    record_checksums(net, UpdateKind::Discriminator, &mut run);
                    sums.disc_real += real;
                    sums.disc_fake += fake;
                    n_disc += 1;
                    step += 1;
                }
            }
        }
        let losses = LossBundle {
            ce: sums.ce / n_main as f64,
            adv: sums.adv / n_main as f64,
            cont: sums.cont / n_main as f64,
            ortho: sums.ortho / n_main as f64,
            disc_real: if n_disc > 0 { sums.disc_real / n_disc as f64 } else { 0.0 },
            disc_fake: if n_disc > 0 { sums.disc_fake / n_disc as f64 } else { 0.0 },
            total: sums.total / n_main as f64,
        };
        let mut miou_per_domain = Vec::new();
        if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 && !eval_domains.is_empty() {
            let report = evaluate(
                net,
                eval_domains,
                &EvalConfig {
                    episodes: cfg.eval_episodes,
                    k_shots: cfg.k_shots,
                    seed: episode_seed(cfg.seed, 0xe7a1, epoch),
                },
            )?;
            for d in &report.domains {
                miou_per_domain.push((d.domain_id, d.miou));
            }
        }
        run.records.push(EpochRecord {
            epoch,
            phase: "train".into(),
            losses,
            no_pair_steps,
            miou_per_domain,
        });
        if let Some(dir) = ckpt_dir {
            checkpoint::save(&dir.join("model.ckpt"), net)?;
        }
    }
    Ok(run)
}

// ---------------------------------------------------------------------------
// fine-tuning
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct FinetuneReport {
    pub steps: usize,
    pub loss_curve: Vec<f64>,
    pub guard_accesses: usize,
    /// False when the configuration has nothing to fine-tune.
    pub trained: bool,
}

/// Support-only adaptation on one target domain: a fresh identity-start
/// modulation module is trained with cross-entropy on leave-one-out pseudo
/// episodes built from augmented supports. Query masks stay behind a locked
/// guard for the whole run.
pub fn finetune_target(
    net: &mut Network,
    target: &SceneSource,
    k_shots: usize,
    cfg: &TrainConfig,
) -> Result<FinetuneReport> {
    let guard = QueryMaskGuard::locked();
    let side = net.arch.image_size;
    let mut support_sets = Vec::new();
    for i in 0..cfg.finetune_episodes {
        let ep = target.sample_episode(episode_seed(cfg.seed, 0xf7, i), k_shots, side)?;
        support_sets.push(ep.into_guarded(&guard));
    }

    if !(net.switches.use_modulation
        && net.switches.use_fusion
        && net.switches.use_shared
        && net.switches.use_private)
    {
        return Ok(FinetuneReport {
            steps: 0,
            loss_curve: Vec::new(),
            guard_accesses: guard.access_count(),
            trained: false,
        });
    }

    net.attach_modulation(episode_seed(cfg.seed, 0xca, 0));
    let mut opt = Sgd::new(
        net.store.group_ids(crate::modulation::GROUP),
        cfg.lr_finetune,
        cfg.momentum,
    );

    let mut loss_curve = Vec::new();
    let mut steps = 0usize;
    for epoch in 0..cfg.finetune_epochs {
        for (si, set) in support_sets.iter().enumerate() {
            let salt = epoch * support_sets.len() + si;
            // pseudo episode from supports only
            let k = set.support.len();
            let q_idx = (epoch + si) % k;
            let mut sup_pairs = Vec::new();
            for (j, (img, mask)) in set.support.iter().enumerate() {
                if j == q_idx && k > 1 {
                    continue;
                }
                sup_pairs.push(augment_support(
                    img,
                    mask,
                    episode_seed(cfg.seed, 0xa9, salt * 64 + j),
                ));
            }
            let (q_img, q_mask) = augment_support(
                &set.support[q_idx].0,
                &set.support[q_idx].1,
                episode_seed(cfg.seed, 0xbe, salt),
            );

            let mut t = Tape::new();
            let sup_imgs: Vec<&crate::data::ImageGrid> =
                sup_pairs.iter().map(|(im, _)| im).collect();
            let sup_node = net.images_node(&mut t, &sup_imgs);
            let sup_feats = net.features(&mut t, sup_node, Phase::Adapt)?;
            let slices: Vec<NodeId> = (0..sup_pairs.len())
                .map(|j| t.narrow(sup_feats.fused, 0, j, 1))
                .collect();
            let masks: Vec<&MaskGrid> = sup_pairs.iter().map(|(_, m)| m).collect();
            let q_node = net.images_node(&mut t, &[&q_img]);
            let q_feats = net.features(&mut t, q_node, Phase::Adapt)?;
            let out = predict_with_refinement(
                &mut t,
                &net.head_cfg,
                &slices,
                &masks,
                q_feats.fused,
                net.head_cfg.refine_rounds,
            )?;
            let loss = query_ce_loss(&mut t, out.logits, &q_mask);
            let v = t.scalar(loss);
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    component: "finetune_ce".into(),
                    step: steps,
                });
            }
            let grads = t.backward(loss);
            opt.step(&mut net.store, &grads);
            loss_curve.push(v);
            steps += 1;
        }
    }
    Ok(FinetuneReport {
        steps,
        loss_curve,
        guard_accesses: guard.access_count(),
        trained: true,
    })
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct EvalConfig {
    pub episodes: usize,
    pub k_shots: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EpisodeRow {
    pub episode_id: usize,
    pub domain_id: u32,
    pub class_id: u32,
    pub fg_iou: f64,
    pub bg_iou: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DomainEval {
    pub domain_id: u32,
    pub miou: f64,
    pub fg_iou: f64,
    pub bg_iou: f64,
    pub rows: Vec<EpisodeRow>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub domains: Vec<DomainEval>,
    pub mean_miou: f64,
}

/// Adapt-phase evaluation (refinement head; modulation when attached) with
/// per-class totals accumulated over the episode set.
pub fn evaluate(net: &Network, domains: &[SceneSource], ec: &EvalConfig) -> Result<EvalReport> {
    let side = net.arch.image_size;
    let mut out = Vec::new();
    for src in domains {
        let mut acc = IouAccumulator::default();
        let mut rows = Vec::new();
        for i in 0..ec.episodes {
            let ep = src.sample_episode(
                episode_seed(ec.seed, 0xe0 + src.domain_id() as usize, i),
                ec.k_shots,
                side,
            )?;
            let pred = predict_episode(net, &ep)?;
            let mut one = IouAccumulator::default();
            one.add(&pred.mask, &ep.query_mask);
            rows.push(EpisodeRow {
                episode_id: i,
                domain_id: ep.domain_id,
                class_id: ep.class_id,
                fg_iou: one.foreground_iou(),
                bg_iou: one.background_iou(),
            });
            acc.add(&pred.mask, &ep.query_mask);
        }
        out.push(DomainEval {
            domain_id: src.domain_id(),
            miou: acc.miou(net.head_cfg.fg_only_miou),
            fg_iou: acc.foreground_iou(),
            bg_iou: acc.background_iou(),
            rows,
        });
    }
    let mean = out.iter().map(|d| d.miou).sum::<f64>() / out.len().max(1) as f64;
    Ok(EvalReport {
        domains: out,
        mean_miou: mean,
    })
}

/// Single-episode prediction at image resolution.
pub fn predict_episode(net: &Network, ep: &Episode) -> Result<Prediction> {
    let mut t = Tape::new();
    let sup_imgs: Vec<&crate::data::ImageGrid> = ep.support.iter().map(|(im, _)| im).collect();
    let sup_node = net.images_node(&mut t, &sup_imgs);
    let sup_feats = net.features(&mut t, sup_node, Phase::Adapt)?;
    let slices: Vec<NodeId> = (0..ep.support.len())
        .map(|k| t.narrow(sup_feats.fused, 0, k, 1))
        .collect();
    let masks: Vec<&MaskGrid> = ep.support.iter().map(|(_, m)| m).collect();
    let q_node = net.images_node(&mut t, &[&ep.query_image]);
    let q_feats = net.features(&mut t, q_node, Phase::Adapt)?;
    let out = predict_with_refinement(
        &mut t,
        &net.head_cfg,
        &slices,
        &masks,
        q_feats.fused,
        net.head_cfg.refine_rounds,
    )?;
    Ok(upsample_prediction(
        &mut t,
        out.logits,
        net.arch.image_size,
        net.head_cfg.threshold,
    ))
}

/// Convenience for tests and the self-check: episode-set mIoU of a network
/// on one domain.
pub fn domain_miou(net: &Network, source: &SceneSource, ec: &EvalConfig) -> Result<f64> {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for i in 0..ec.episodes {
        let ep = source.sample_episode(
            episode_seed(ec.seed, 0xe0 + source.domain_id() as usize, i),
            ec.k_shots,
            net.arch.image_size,
        )?;
        preds.push(predict_episode(net, &ep)?);
        gts.push(ep.query_mask);
    }
    miou(&preds, &gts, net.head_cfg.fg_only_miou)
}
