//! Acceptance suite: one test per criterion, each printing a PASS line
//! (run with `--nocapture` to see them). The trend criteria share one
//! ablation-suite run over three seeds at the shipped reduced-size
//! configuration (`configs/acceptance.conf`).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use once_cell::sync::Lazy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use decoseg_core::ablation::{run_ablation_suite, AblationReport};
use decoseg_core::checkpoint;
use decoseg_core::config::RunSettings;
use decoseg_core::data::{default_benchmark, episode_seed, SceneSource};
use decoseg_core::decomp::{
    adversarial_loss, contrastive_loss, orthogonality_loss, ContrastiveConfig, Discriminator,
    GrlConfig, MemoryBank, ProjectionHead,
};
use decoseg_core::head::HeadConfig;
use decoseg_core::model::{AblationSwitches, ArchConfig, Network};
use decoseg_core::params::ParamStore;
use decoseg_core::selfcheck::run_self_checks;
use decoseg_core::tensor::Tape;
use decoseg_core::train::{
    evaluate, finetune_target, pretrain_baseline, train_source, EvalConfig, TrainConfig,
    UpdateKind,
};

const POINT: f64 = 0.01; // one mIoU point on the [0, 1] scale
const BAND: f64 = 0.005; // 0.5-point tolerance band

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn acceptance_settings() -> RunSettings {
    let mut s = RunSettings::default();
    s.apply_file(&workspace_root().join("configs/acceptance.conf")).unwrap();
    s.validate().unwrap();
    s
}

struct TrendArtifacts {
    report: AblationReport,
    /// Per seed: (domain_id, five_shot_miou) for the fine-tuned full model.
    five_shot: Vec<Vec<(u32, f64)>>,
    suite_runtime: Duration,
    _dir: TempDir,
}

static TREND: Lazy<TrendArtifacts> = Lazy::new(|| {
    let s = acceptance_settings();
    let dir = TempDir::new().unwrap();
    let t0 = Instant::now();
    let report = run_ablation_suite(
        s.arch,
        s.head,
        &s.train,
        &s.ablation_seeds,
        dir.path(),
        None,
    )
    .expect("ablation suite");

    // 5-shot protocol on the full model: fine-tune with k=5 supports per
    // domain, evaluate with 5-shot conditioning on the same eval stream
    let bench = default_benchmark();
    let targets: Vec<SceneSource> = bench
        .targets
        .iter()
        .map(|d| SceneSource::Live(d.clone()))
        .collect();
    let mut five_shot = Vec::new();
    for fm in &report.full_models {
        let mut cfg = s.train.clone();
        cfg.seed = fm.seed;
        let ec5 = EvalConfig {
            episodes: cfg.eval_episodes,
            k_shots: 5,
            seed: episode_seed(fm.seed, 0xeea, 0),
        };
        let mut per_domain = Vec::new();
        for tgt in &targets {
            let mut net = checkpoint::load(&fm.trained_ckpt).unwrap();
            net.backbone.freeze(&mut net.store);
            net.switches.use_modulation = true;
            finetune_target(&mut net, tgt, 5, &cfg).unwrap();
            let rep = evaluate(&net, std::slice::from_ref(tgt), &ec5).unwrap();
            per_domain.push((tgt.domain_id(), rep.domains[0].miou));
        }
        five_shot.push(per_domain);
    }
    TrendArtifacts {
        report,
        five_shot,
        suite_runtime: t0.elapsed(),
        _dir: dir,
    }
});

fn seed_mean_per_domain(per_seed: &[Vec<(u32, f64)>]) -> Vec<(u32, f64)> {
    let mut out: Vec<(u32, f64)> = Vec::new();
    for entries in per_seed {
        for &(d, m) in entries {
            match out.iter_mut().find(|(id, _)| *id == d) {
                Some((_, acc)) => *acc += m,
                None => out.push((d, m)),
            }
        }
    }
    for (_, m) in &mut out {
        *m /= per_seed.len() as f64;
    }
    out
}

// ---------------------------------------------------------------------------
// 1. numerical invariant suite
// ---------------------------------------------------------------------------

#[test]
fn acceptance_1_numerical_invariant_suite() {
    let t0 = Instant::now();
    let results = run_self_checks(false);
    let elapsed = t0.elapsed();
    for r in &results {
        assert!(r.pass, "invariant {} failed: {}", r.name, r.detail);
    }
    assert!(elapsed.as_secs() < 60, "suite took {elapsed:?}");
    println!(
        "ACCEPTANCE 1 PASS - invariant suite: {} checks green in {:.2}s (GRL sign, cross-Gram zeros/ones, weight normalization, modulation identity, fusion oracle, finite differences)",
        results.len(),
        elapsed.as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// 2. oracle equivalence on random batches
// ---------------------------------------------------------------------------

fn rand_map(rng: &mut ChaCha8Rng, dims: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(dims), |_| rng.random_range(-1.0..1.0))
}

fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

#[test]
fn acceptance_2_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;

    for trial in 0..10 {
        // --- adversarial: scalar re-implementation over the same D outputs
        let mut store = ParamStore::new();
        let disc = Discriminator::new(&mut store, &mut rng, 6, 8, None);
        let mut t = Tape::new();
        let n = 2 + trial % 3;
        let src = t.constant(rand_map(&mut rng, &[n, 6, 3, 3]));
        let tgt = t.constant(rand_map(&mut rng, &[n, 6, 3, 3]));
        let impl_loss =
            adversarial_loss(&mut t, &store, &disc, src, tgt, GrlConfig::new(1.0)).unwrap();
        let p_src = disc.prob(&mut t, &store, src);
        let p_tgt = disc.prob(&mut t, &store, tgt);
        let mut oracle = 0.0;
        for i in 0..n {
            oracle += t.value(p_src)[[i, 0]].ln() + (1.0 - t.value(p_tgt)[[i, 0]]).ln();
        }
        oracle /= n as f64;
        worst = worst.max(rel_diff(t.scalar(impl_loss), oracle));

        // --- orthogonality: looped scalar re-implementation
        let b = 2 + trial % 2;
        let (c, h, w) = (5, 3, 3);
        let s_arr = rand_map(&mut rng, &[b, c, h, w]);
        let p_arr = rand_map(&mut rng, &[b, c, h, w]);
        let mut t2 = Tape::new();
        let sid = t2.constant(s_arr.clone());
        let pid = t2.constant(p_arr.clone());
        let impl_ortho = orthogonality_loss(&mut t2, sid, pid).unwrap();
        let mut oracle_ortho = 0.0;
        for bi in 0..b {
            let mut gram = vec![vec![0.0; c]; c];
            for ci in 0..c {
                for cj in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            gram[ci][cj] += s_arr[[bi, ci, y, x]] * p_arr[[bi, cj, y, x]];
                        }
                    }
                }
            }
            let num: f64 = gram.iter().flatten().map(|v| v * v).sum();
            let ns: f64 = s_arr
                .index_axis(ndarray::Axis(0), bi)
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            let np: f64 = p_arr
                .index_axis(ndarray::Axis(0), bi)
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if ns * np > 1e-8 {
                oracle_ortho += num / (ns * np);
            }
        }
        oracle_ortho /= b as f64;
        worst = worst.max(rel_diff(t2.scalar(impl_ortho), oracle_ortho));

        // --- contrastive: unambiguous positives, hand-built InfoNCE
        let tau = [1.0, 0.5, 0.1][trial % 3];
        let c_f = 4;
        let d_proj = 3;
        let mut store3 = ParamStore::new();
        let proj = ProjectionHead::new(&mut store3, &mut rng, c_f, d_proj);
        let private = rand_map(&mut rng, &[1, c_f, 2, 2]);
        let labels_grid = Array2::from_shape_vec((2, 2), vec![5u32, 5, 0, 0]).unwrap();
        let mut bank = MemoryBank::new(16);
        let mut bank_rows = Vec::new();
        for bc in [9u32, 9, 0, 5] {
            let mut v: Array1<f64> = Array1::from_shape_fn(d_proj, |_| rng.random_range(-1.0..1.0));
            let norm = v.dot(&v).sqrt();
            v /= norm;
            bank.push(v.clone(), bc);
            bank_rows.push((v, bc));
        }
        let cfg = ContrastiveConfig {
            tau,
            max_pixels_per_class: 64,
            bank_push_per_step: 0,
        };
        let mut t3 = Tape::new();
        let pid3 = t3.constant(private.clone());
        let (impl_cont, diag) = contrastive_loss(
            &mut t3,
            &store3,
            &proj,
            pid3,
            std::slice::from_ref(&labels_grid),
            &mut bank,
            &cfg,
            &mut rng,
        )
        .unwrap();
        assert!(!diag.no_pair);
        assert_eq!(diag.used_pixels, 4);
        // oracle: z = normalize(x W + b) per pixel; unique same-class
        // positive; negatives are different-class bank entries
        let w = store3.value(proj.lin.w).clone();
        let bvec = store3.value(proj.lin.b).clone();
        let z_of = |y: usize, x: usize| -> Vec<f64> {
            let mut z = vec![0.0; d_proj];
            for j in 0..d_proj {
                let mut s = bvec[[0, j]];
                for i in 0..c_f {
                    s += private[[0, i, y, x]] * w[[i, j]];
                }
                z[j] = s;
            }
            let norm = (z.iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
            z.iter().map(|v| v / norm).collect()
        };
        let coords = [(0, 0), (0, 1), (1, 0), (1, 1)];
        let partner = [1usize, 0, 3, 2];
        let mut oracle_cont = 0.0;
        for (i, &(y, x)) in coords.iter().enumerate() {
            let zi = z_of(y, x);
            let (py, px) = coords[partner[i]];
            let zp = z_of(py, px);
            let s_pos: f64 = zi.iter().zip(&zp).map(|(a, b)| a * b).sum();
            let mut den = (s_pos / tau).exp();
            for (bv, bc) in &bank_rows {
                if *bc != labels_grid[[y, x]] {
                    let s: f64 = zi.iter().zip(bv.iter()).map(|(a, b)| a * b).sum();
                    den += (s / tau).exp();
                }
            }
            oracle_cont += den.ln() - s_pos / tau;
        }
        oracle_cont /= 4.0;
        worst = worst.max(rel_diff(t3.scalar(impl_cont), oracle_cont));
    }

    // --- composite: epoch records must satisfy the weighted-sum identity
    let mut cfg = TrainConfig {
        epochs: 1,
        episodes_per_epoch: 4,
        batch_size: 2,
        pretrain_epochs: 1,
        lambda_adv: 0.3,
        lambda_cont: 0.2,
        lambda_ortho: 0.05,
        seed: 77,
        ..TrainConfig::default()
    };
    cfg.bank_capacity = 64;
    cfg.bank_push = 8;
    cfg.pixels_per_class = 6;
    let arch = ArchConfig {
        image_size: 24,
        c_shared: 8,
        c_private: 12,
        c_f: 12,
        d_proj: 8,
        disc_hidden: 8,
        ..ArchConfig::default()
    };
    let source = SceneSource::Live(default_benchmark().source);
    let mut pre = Network::new(arch, AblationSwitches::none(), HeadConfig::default(), 1).unwrap();
    pretrain_baseline(&mut pre, &source, &cfg).unwrap();
    pre.backbone.freeze(&mut pre.store);
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("pre.ckpt");
    checkpoint::save(&p, &pre).unwrap();
    let mut net = Network::new(arch, AblationSwitches::full(), HeadConfig::default(), 2).unwrap();
    checkpoint::adopt_groups(&mut net, &p, &[decoseg_core::backbone::GROUP]).unwrap();
    net.backbone.freeze(&mut net.store);
    let run = train_source(&mut net, &source, &cfg, &[], None).unwrap();
    let mut worst_total: f64 = 0.0;
    for r in &run.records {
        let expect = cfg.lambda_ce * r.losses.ce
            + cfg.lambda_adv * r.losses.adv
            + cfg.lambda_cont * r.losses.cont
            + cfg.lambda_ortho * r.losses.ortho;
        worst_total = worst_total.max(rel_diff(r.losses.total, expect));
    }
    assert!(
        worst_total < 1e-7,
        "composite loss mismatch: rel {worst_total:.3e}"
    );

    assert!(worst < 1e-6, "oracle mismatch: rel {worst:.3e}");
    println!(
        "ACCEPTANCE 2 PASS - adversarial/contrastive/orthogonality losses match independent scalar oracles on 10 random batches (worst rel {worst:.2e}); composite matches the weighted sum (worst rel {worst_total:.2e})"
    );
}

// ---------------------------------------------------------------------------
// 3. alternation & gradient-path contracts
// ---------------------------------------------------------------------------

#[test]
fn acceptance_3_alternation_and_gradient_paths() {
    let arch = ArchConfig {
        image_size: 24,
        c_shared: 8,
        c_private: 12,
        c_f: 12,
        d_proj: 8,
        disc_hidden: 8,
        ..ArchConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 1,
        episodes_per_epoch: 8,
        batch_size: 2,
        s_steps: 2,
        d_steps: 3,
        pretrain_epochs: 1,
        finetune_epochs: 1,
        finetune_episodes: 2,
        bank_capacity: 64,
        bank_push: 8,
        pixels_per_class: 6,
        seed: 31,
        ..TrainConfig::default()
    };
    let source = SceneSource::Live(default_benchmark().source);
    let target = SceneSource::Live(default_benchmark().targets[0].clone());

    let mut pre = Network::new(arch, AblationSwitches::none(), HeadConfig::default(), 3).unwrap();
    pretrain_baseline(&mut pre, &source, &cfg).unwrap();
    pre.backbone.freeze(&mut pre.store);
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("pre.ckpt");
    checkpoint::save(&p, &pre).unwrap();

    let mut net = Network::new(arch, AblationSwitches::full(), HeadConfig::default(), 4).unwrap();
    checkpoint::adopt_groups(&mut net, &p, &[decoseg_core::backbone::GROUP]).unwrap();
    net.backbone.freeze(&mut net.store);
    let backbone_ck = net.store.checksum_group(decoseg_core::backbone::GROUP);

    let run = train_source(&mut net, &source, &cfg, &[], None).unwrap();
    // 8 episodes / (2 batch * 2 s_steps) = 2 iterations of Main,Main,D,D,D
    let expect: Vec<UpdateKind> = (0..2)
        .flat_map(|_| {
            [UpdateKind::Main; 2]
                .into_iter()
                .chain([UpdateKind::Discriminator; 3])
        })
        .collect();
    assert_eq!(run.update_log, expect, "update sequence must follow s_steps/d_steps");
    for w in run.checksum_log.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        match b.kind {
            UpdateKind::Main => {
                assert_eq!(a.discriminator, b.discriminator, "main update moved the discriminator");
                assert_ne!(a.main, b.main, "main update must move main parameters");
            }
            UpdateKind::Discriminator => {
                assert_eq!(a.main, b.main, "disc update moved main parameters");
                assert_ne!(a.discriminator, b.discriminator, "disc update must move the discriminator");
            }
        }
        assert_eq!(a.backbone, b.backbone, "frozen backbone moved");
    }
    assert_eq!(
        net.store.checksum_group(decoseg_core::backbone::GROUP),
        backbone_ck,
        "backbone checksum changed during source training"
    );
    // ...and stays frozen through fine-tuning
    net.switches.use_modulation = true;
    finetune_target(&mut net, &target, 1, &cfg).unwrap();
    assert_eq!(
        net.store.checksum_group(decoseg_core::backbone::GROUP),
        backbone_ck,
        "backbone checksum changed during fine-tuning"
    );
    println!(
        "ACCEPTANCE 3 PASS - update log matches s_steps=2/d_steps=3 exactly; cross-updates leave the other side's checksums bit-identical; frozen backbone constant through both phases"
    );
}

// ---------------------------------------------------------------------------
// 4. support-only fine-tuning contract
// ---------------------------------------------------------------------------

#[test]
fn acceptance_4_support_only_contract() {
    let trend = &*TREND;
    let total: usize = trend
        .report
        .full_models
        .iter()
        .map(|fm| fm.guard_accesses)
        .sum();
    let runs = trend.report.full_models.len() * 3; // seeds x domains
    assert_eq!(total, 0, "query-mask guard recorded {total} accesses");
    println!(
        "ACCEPTANCE 4 PASS - query-mask guard recorded zero accesses across {runs} full fine-tuning runs"
    );
}

// ---------------------------------------------------------------------------
// 5. module ablation trend
// ---------------------------------------------------------------------------

#[test]
fn acceptance_5_module_ablation_trend() {
    let trend = &*TREND;
    let rows = &trend.report.module_rows;
    assert_eq!(rows.len(), 4);
    let means: Vec<f64> = rows.iter().map(|r| r.mean).collect();
    for pair in means.windows(2) {
        assert!(
            pair[1] >= pair[0],
            "module trend must be non-decreasing: {means:?}"
        );
    }
    assert!(
        means[3] >= means[0] + POINT,
        "full model must exceed baseline by >= 1 point: baseline {:.4}, full {:.4}",
        means[0],
        means[3]
    );
    assert!(
        trend.suite_runtime < Duration::from_secs(30 * 60),
        "suite took {:?}",
        trend.suite_runtime
    );
    println!(
        "ACCEPTANCE 5 PASS - module trend over 3 seeds: {:.4} -> {:.4} -> {:.4} -> {:.4} (non-decreasing, full-baseline = {:.2} points, suite {:.1}s < 30min)",
        means[0],
        means[1],
        means[2],
        means[3],
        (means[3] - means[0]) / POINT,
        trend.suite_runtime.as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// 6. loss ablation trend
// ---------------------------------------------------------------------------

#[test]
fn acceptance_6_loss_ablation_trend() {
    let trend = &*TREND;
    let rows = &trend.report.loss_rows;
    assert_eq!(rows.len(), 5);
    let by_label = |l: &str| rows.iter().find(|r| r.label == l).unwrap().mean;
    let none = by_label("ce_only");
    let adv = by_label("+adv");
    let cont = by_label("+cont");
    let both = by_label("+adv+cont");
    let max_single = adv.max(cont);
    assert!(
        both >= max_single - BAND,
        "adv+cont ({both:.4}) must reach max(adv, cont) ({max_single:.4}) within 0.5 points"
    );
    assert!(
        max_single >= none - BAND,
        "max(adv, cont) ({max_single:.4}) must reach ce-only ({none:.4}) within 0.5 points"
    );
    println!(
        "ACCEPTANCE 6 PASS - loss trend over 3 seeds: none {none:.4}, adv {adv:.4}, cont {cont:.4}, adv+cont {both:.4} (adv+cont >= max(single) >= none within the 0.5-point band)"
    );
}

// ---------------------------------------------------------------------------
// 7. fine-tuning benefit
// ---------------------------------------------------------------------------

#[test]
fn acceptance_7_finetuning_benefit() {
    let trend = &*TREND;
    let pre: Vec<Vec<(u32, f64)>> = trend
        .report
        .full_models
        .iter()
        .map(|f| f.pre_ft_per_domain.clone())
        .collect();
    let post: Vec<Vec<(u32, f64)>> = trend
        .report
        .full_models
        .iter()
        .map(|f| f.post_ft_per_domain.clone())
        .collect();
    let pre_mean = seed_mean_per_domain(&pre);
    let post_mean = seed_mean_per_domain(&post);
    let mut msg = String::new();
    for (d, pm) in &pre_mean {
        let (_, qm) = post_mean.iter().find(|(id, _)| id == d).unwrap();
        assert!(
            qm >= pm,
            "domain {d}: post-fine-tune mIoU {qm:.4} < pre {pm:.4}"
        );
        msg.push_str(&format!("d{d}: {pm:.4}->{qm:.4} "));
    }
    println!(
        "ACCEPTANCE 7 PASS - post-fine-tune >= pre-fine-tune on every target domain (3-seed means): {msg}"
    );
}

// ---------------------------------------------------------------------------
// 8. five-shot vs one-shot
// ---------------------------------------------------------------------------

#[test]
fn acceptance_8_five_shot_vs_one_shot() {
    let trend = &*TREND;
    let one: Vec<Vec<(u32, f64)>> = trend
        .report
        .full_models
        .iter()
        .map(|f| f.post_ft_per_domain.clone())
        .collect();
    let one_mean = seed_mean_per_domain(&one);
    let five_mean = seed_mean_per_domain(&trend.five_shot);
    let mut msg = String::new();
    for (d, m1) in &one_mean {
        let (_, m5) = five_mean.iter().find(|(id, _)| id == d).unwrap();
        assert!(
            *m5 >= m1 - BAND,
            "domain {d}: 5-shot {m5:.4} below 1-shot {m1:.4} - 0.5 points"
        );
        msg.push_str(&format!("d{d}: 1shot {m1:.4} / 5shot {m5:.4} "));
    }
    println!("ACCEPTANCE 8 PASS - 5-shot >= 1-shot - 0.5 points on every target domain: {msg}");
}

// ---------------------------------------------------------------------------
// 9. determinism of the train command
// ---------------------------------------------------------------------------

#[test]
fn acceptance_9_train_determinism() {
    let dir = TempDir::new().unwrap();
    let cfg_path = dir.path().join("d.conf");
    fs::write(
        &cfg_path,
        format!(
            "image_size=24\nc_shared=8\nc_private=12\nc_f=12\nd_proj=8\ndisc_hidden=8\n\
             epochs=1\nepisodes_per_epoch=4\nbatch_size=2\npretrain_epochs=1\n\
             eval_episodes=3\neval_every=1\nbank_capacity=64\nbank_push=8\npixels_per_class=6\n\
             out_dir={}\n",
            dir.path().display()
        ),
    )
    .unwrap();
    let bin = env!("CARGO_BIN_EXE_decoseg");
    let run = |name: &str, cmd: &str, extra: &[String]| {
        let mut c = Command::new(bin);
        c.args([cmd, "--config", cfg_path.to_str().unwrap(), "--seed", "5"])
            .args(["--override", &format!("run_name={name}")]);
        for e in extra {
            c.args(["--override", e]);
        }
        let out = c.output().unwrap();
        assert!(out.status.success(), "{cmd} failed: {out:?}");
    };
    run("pre", "pretrain", &[]);
    let pre = format!("pretrain_ckpt={}/pre/pretrain.ckpt", dir.path().display());
    run("a", "train", std::slice::from_ref(&pre));
    run("b", "train", std::slice::from_ref(&pre));
    let csv_a = fs::read(dir.path().join("a/train.csv")).unwrap();
    let csv_b = fs::read(dir.path().join("b/train.csv")).unwrap();
    assert_eq!(csv_a, csv_b, "train.csv must be byte-identical across runs");
    let sum_a = fs::read(dir.path().join("a/summary.json")).unwrap();
    let sum_b = fs::read(dir.path().join("b/summary.json")).unwrap();
    assert_eq!(sum_a, sum_b, "summary.json must be byte-identical across runs");
    println!(
        "ACCEPTANCE 9 PASS - identical-seed train runs produce byte-identical metric CSVs ({} bytes) and summaries",
        csv_a.len()
    );
}
