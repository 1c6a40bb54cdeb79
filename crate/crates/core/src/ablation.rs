//! Ablation harness: module, feature-stream and loss tables over a fixed
//! seed set, with one training run shared by every row that resolves to the
//! same effective configuration. Cells are mean target-domain mIoU.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::backbone;
use crate::checkpoint;
use crate::data::{default_benchmark, episode_seed, SceneSource};
use crate::error::Result;
use crate::head::HeadConfig;
use crate::model::{AblationSwitches, ArchConfig, Network};
use crate::train::{
    evaluate, finetune_target, pretrain_baseline, train_source, EvalConfig, TrainConfig,
};

/// Reference mIoU (%) of the corresponding full-scale experiments; kept
/// beside the desk-scale cells for orientation, not reproduced here.
pub const FULLSCALE_MODULE_REF: [f64; 4] = [80.1, 80.6, 81.3, 81.7];
pub const FULLSCALE_FEATURE_REF: [f64; 3] = [80.6, 81.4, 81.7];
pub const FULLSCALE_LOSS_REF: [f64; 5] = [80.6, 81.0, 81.1, 81.5, 81.7];

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub label: String,
    pub switches: AblationSwitches,
    /// Mean target-domain mIoU per seed (order matches `seeds`).
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub fullscale_ref: f64,
}

/// Per-seed artifacts of the full configuration, reused by the fine-tuning
/// and shot-count comparisons.
#[derive(Clone, Debug)]
pub struct FullModelSeed {
    pub seed: u64,
    pub trained_ckpt: PathBuf,
    pub pre_ft_per_domain: Vec<(u32, f64)>,
    pub post_ft_per_domain: Vec<(u32, f64)>,
    /// Query-mask guard accesses summed over the per-domain fine-tune runs
    /// (the support-only contract demands zero).
    pub guard_accesses: usize,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub module_rows: Vec<AblationRow>,
    pub feature_rows: Vec<AblationRow>,
    pub loss_rows: Vec<AblationRow>,
    pub full_models: Vec<FullModelSeed>,
}

fn sw_fusion_only() -> AblationSwitches {
    AblationSwitches {
        use_decomp: false,
        use_modulation: false,
        use_adv: false,
        use_cont: false,
        use_ortho: false,
        ..AblationSwitches::full()
    }
}

fn sw_fusion_decomp() -> AblationSwitches {
    AblationSwitches {
        use_modulation: false,
        ..AblationSwitches::full()
    }
}

fn sw_streams(base: bool, shared: bool, private: bool) -> AblationSwitches {
    AblationSwitches {
        use_modulation: false,
        use_base: base,
        use_shared: shared,
        use_private: private,
        ..AblationSwitches::full()
    }
}

fn sw_losses(adv: bool, cont: bool, ortho: bool) -> AblationSwitches {
    AblationSwitches {
        use_modulation: false,
        use_adv: adv,
        use_cont: cont,
        use_ortho: ortho,
        ..AblationSwitches::full()
    }
}

/// Key identifying configurations that train identically (modulation only
/// matters at fine-tune time).
fn effective_key(sw: &AblationSwitches) -> String {
    format!(
        "f{}b{}s{}p{}_a{}c{}o{}",
        u8::from(sw.use_fusion),
        u8::from(sw.use_base),
        u8::from(sw.use_shared),
        u8::from(sw.use_private),
        u8::from(sw.adv_active()),
        u8::from(sw.cont_active()),
        u8::from(sw.ortho_active()),
    )
}

struct TrainedConfig {
    ckpt: PathBuf,
    per_domain: Vec<(u32, f64)>,
    mean_target: f64,
}

/// Run the whole suite. When `pretrain_ckpt` is given its backbone is
/// adopted for every seed; otherwise each seed pretrains its own.
pub fn run_ablation_suite(
    arch: ArchConfig,
    head: HeadConfig,
    base_cfg: &TrainConfig,
    seeds: &[u64],
    work_dir: &Path,
    pretrain_ckpt: Option<&Path>,
) -> Result<AblationReport> {
    let bench = default_benchmark();
    let source = SceneSource::Live(bench.source.clone());
    let targets: Vec<SceneSource> = bench
        .targets
        .iter()
        .map(|d| SceneSource::Live(d.clone()))
        .collect();

    let module_defs: Vec<(String, AblationSwitches)> = vec![
        ("baseline".into(), AblationSwitches::none()),
        ("+fusion".into(), sw_fusion_only()),
        ("+fusion+decomposition".into(), sw_fusion_decomp()),
        ("+fusion+decomposition+modulation".into(), AblationSwitches::full()),
    ];
    let feature_defs: Vec<(String, AblationSwitches)> = vec![
        ("base".into(), sw_streams(true, false, false)),
        ("shared+private".into(), sw_streams(false, true, true)),
        ("base+shared+private".into(), sw_streams(true, true, true)),
    ];
    let loss_defs: Vec<(String, AblationSwitches)> = vec![
        ("ce_only".into(), sw_losses(false, false, false)),
        ("+adv".into(), sw_losses(true, false, false)),
        ("+cont".into(), sw_losses(false, true, false)),
        ("+adv+cont".into(), sw_losses(true, true, false)),
        ("+adv+cont+ortho".into(), sw_losses(true, true, true)),
    ];

    let mut module_cells: Vec<Vec<f64>> = vec![Vec::new(); module_defs.len()];
    let mut feature_cells: Vec<Vec<f64>> = vec![Vec::new(); feature_defs.len()];
    let mut loss_cells: Vec<Vec<f64>> = vec![Vec::new(); loss_defs.len()];
    let mut full_models = Vec::new();

    for (si, &seed) in seeds.iter().enumerate() {
        let seed_dir = work_dir.join(format!("seed{seed}"));
        std::fs::create_dir_all(&seed_dir)?;
        let mut cfg = base_cfg.clone();
        cfg.seed = seed;
        let ec = EvalConfig {
            episodes: cfg.eval_episodes,
            k_shots: cfg.k_shots,
            seed: episode_seed(seed, 0xeea, 0),
        };

        // baseline backbone
        let pre_path = seed_dir.join("pretrain.ckpt");
        if let Some(p) = pretrain_ckpt {
            std::fs::copy(p, &pre_path)?;
        } else {
            let mut pre = Network::new(
                arch,
                AblationSwitches::none(),
                head,
                episode_seed(seed, 0x9e7, 0),
            )?;
            pretrain_baseline(&mut pre, &source, &cfg)?;
            pre.backbone.freeze(&mut pre.store);
            checkpoint::save(&pre_path, &pre)?;
        }

        // baseline row: the frozen pretrained model itself
        let baseline_eval = {
            let mut net = checkpoint::load(&pre_path)?;
            net.backbone.freeze(&mut net.store);
            evaluate(&net, &targets, &ec)?
        };
        let baseline_mean = baseline_eval.mean_miou;

        // train each distinct effective configuration once
        let mut cache: BTreeMap<String, TrainedConfig> = BTreeMap::new();
        let mut train_eval = |sw: AblationSwitches| -> Result<(PathBuf, Vec<(u32, f64)>, f64)> {
            let key = effective_key(&sw);
            if let Some(tc) = cache.get(&key) {
                return Ok((tc.ckpt.clone(), tc.per_domain.clone(), tc.mean_target));
            }
            let mut net = Network::new(arch, sw, head, episode_seed(seed, 0x0e7, 1))?;
            checkpoint::adopt_groups(&mut net, &pre_path, &[backbone::GROUP])?;
            net.backbone.freeze(&mut net.store);
            train_source(&mut net, &source, &cfg, &[], None)?;
            let ckpt = seed_dir.join(format!("{key}.ckpt"));
            checkpoint::save(&ckpt, &net)?;
            let report = evaluate(&net, &targets, &ec)?;
            let per_domain: Vec<(u32, f64)> =
                report.domains.iter().map(|d| (d.domain_id, d.miou)).collect();
            let mean = report.mean_miou;
            cache.insert(
                key,
                TrainedConfig {
                    ckpt: ckpt.clone(),
                    per_domain: per_domain.clone(),
                    mean_target: mean,
                },
            );
            Ok((ckpt, per_domain, mean))
        };

        // module table
        for (ri, (_, sw)) in module_defs.iter().enumerate() {
            let cell = if ri == 0 {
                baseline_mean
            } else if *sw == AblationSwitches::full() {
                // fine-tune the shared full-model training per domain
                let (ckpt, pre_ft, _) = train_eval(sw_fusion_decomp())?;
                let mut post_ft = Vec::new();
                let mut guard_accesses = 0usize;
                for tgt in &targets {
                    let mut net = checkpoint::load(&ckpt)?;
                    net.backbone.freeze(&mut net.store);
                    net.switches.use_modulation = true;
                    let ft = finetune_target(&mut net, tgt, cfg.k_shots, &cfg)?;
                    guard_accesses += ft.guard_accesses;
                    let rep = evaluate(&net, std::slice::from_ref(tgt), &ec)?;
                    post_ft.push((tgt.domain_id(), rep.domains[0].miou));
                }
                full_models.push(FullModelSeed {
                    seed,
                    trained_ckpt: ckpt,
                    pre_ft_per_domain: pre_ft,
                    post_ft_per_domain: post_ft.clone(),
                    guard_accesses,
                });
                post_ft.iter().map(|(_, m)| m).sum::<f64>() / post_ft.len() as f64
            } else {
                train_eval(*sw)?.2
            };
            module_cells[ri].push(cell);
        }
        // feature table
        for (ri, (_, sw)) in feature_defs.iter().enumerate() {
            feature_cells[ri].push(train_eval(*sw)?.2);
        }
        // loss table
        for (ri, (_, sw)) in loss_defs.iter().enumerate() {
            loss_cells[ri].push(train_eval(*sw)?.2);
        }
        let _ = si;
    }

    let build_rows = |defs: Vec<(String, AblationSwitches)>,
                      cells: Vec<Vec<f64>>,
                      refs: &[f64]| {
        defs.into_iter()
            .zip(cells)
            .zip(refs)
            .map(|(((label, switches), per_seed), &fullscale_ref)| {
                let mean = per_seed.iter().sum::<f64>() / per_seed.len().max(1) as f64;
                AblationRow {
                    label,
                    switches,
                    per_seed,
                    mean,
                    fullscale_ref,
                }
            })
            .collect::<Vec<_>>()
    };

    Ok(AblationReport {
        seeds: seeds.to_vec(),
        module_rows: build_rows(module_defs, module_cells, &FULLSCALE_MODULE_REF),
        feature_rows: build_rows(feature_defs, feature_cells, &FULLSCALE_FEATURE_REF),
        loss_rows: build_rows(loss_defs, loss_cells, &FULLSCALE_LOSS_REF),
        full_models,
    })
}

fn render_table(out: &mut String, title: &str, seeds: &[u64], rows: &[AblationRow]) {
    let _ = writeln!(out, "## {title}\n");
    let mut header = String::from("| configuration |");
    let mut sep = String::from("|---|");
    for s in seeds {
        let _ = write!(header, " seed{s} |");
        sep.push_str("---|");
    }
    header.push_str(" mean_miou | fullscale_ref |");
    sep.push_str("---|---|");
    let _ = writeln!(out, "{header}\n{sep}");
    for r in rows {
        let mut line = format!("| {} |", r.label);
        for v in &r.per_seed {
            let _ = write!(line, " {v:.4} |");
        }
        let _ = write!(line, " {:.4} | {:.1} |", r.mean, r.fullscale_ref);
        let _ = writeln!(out, "{line}");
    }
    out.push('\n');
}

/// Markdown rendering of all three tables (cells are mIoU in `[0, 1]`; the
/// reference column is the full-scale percentage it mirrors).
pub fn render_markdown(report: &AblationReport) -> String {
    let mut out = String::from("# Ablation tables (desk scale)\n\n");
    out.push_str("Cells: mean target-domain mIoU over the synthetic benchmark.\n");
    out.push_str("`fullscale_ref` quotes the corresponding full-scale study results (%) for orientation; desk-scale numbers are not expected to match them.\n\n");
    render_table(&mut out, "Modules", &report.seeds, &report.module_rows);
    render_table(&mut out, "Feature streams", &report.seeds, &report.feature_rows);
    render_table(&mut out, "Losses", &report.seeds, &report.loss_rows);
    out
}

/// CSV rendering: one row per (table, configuration, seed-cells).
pub fn render_csv(report: &AblationReport) -> String {
    let mut out = String::from("table,configuration,");
    for s in &report.seeds {
        let _ = write!(out, "seed{s},");
    }
    out.push_str("mean_miou,fullscale_ref\n");
    let mut emit = |table: &str, rows: &[AblationRow]| {
        for r in rows {
            let _ = write!(out, "{table},{},", r.label);
            for v in &r.per_seed {
                let _ = write!(out, "{v:.6},");
            }
            let _ = writeln!(out, "{:.6},{:.1}", r.mean, r.fullscale_ref);
        }
    };
    emit("modules", &report.module_rows);
    emit("features", &report.feature_rows);
    emit("losses", &report.loss_rows);
    out
}
