//! One function per subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use decoseg_core::ablation::{render_csv, render_markdown, run_ablation_suite};
use decoseg_core::backbone;
use decoseg_core::checkpoint;
use decoseg_core::config::RunSettings;
use decoseg_core::data::{
    default_benchmark, episode_seed, export_domain, write_gray_pgm, ExportedDomain, SceneSource,
};
use decoseg_core::metrics::{episode_csv, eval_table, json_summary, train_csv};
use decoseg_core::model::{AblationSwitches, Network, Phase};
use decoseg_core::selfcheck::run_self_checks;
use decoseg_core::tensor::Tape;
use decoseg_core::train::{
    evaluate, finetune_target, pretrain_baseline, train_source, EvalConfig,
};
use decoseg_core::{Error, Result};

use crate::rundir::RunDir;

fn scene_source(settings: &RunSettings, domain_id: u32) -> Result<SceneSource> {
    if settings.data_dir.is_empty() {
        let bench = default_benchmark();
        bench
            .domain(domain_id)
            .cloned()
            .map(SceneSource::Live)
            .ok_or_else(|| Error::Config {
                line: 0,
                msg: format!("unknown domain {domain_id}"),
            })
    } else {
        let dir = Path::new(&settings.data_dir).join(format!("domain{domain_id}"));
        Ok(SceneSource::Exported(ExportedDomain::load(&dir, domain_id)?))
    }
}

fn target_sources(settings: &RunSettings) -> Result<Vec<SceneSource>> {
    settings
        .domains
        .iter()
        .map(|&d| scene_source(settings, d))
        .collect()
}

fn require_path(value: &str, key: &str) -> Result<PathBuf> {
    if value.is_empty() {
        return Err(Error::MissingArtifact(format!(
            "config key '{key}' is empty; point it at a checkpoint"
        )));
    }
    Ok(PathBuf::from(value))
}

// ---------------------------------------------------------------------------

pub fn export_data(settings: &RunSettings) -> Result<()> {
    let run = RunDir::create(settings)?;
    let data_dir = run.file("data");
    fs::create_dir_all(&data_dir)?;
    let bench = default_benchmark();
    let mut ids = vec![bench.source.domain_id];
    ids.extend(settings.domains.iter().copied());
    for id in ids {
        let domain = bench.domain(id).expect("benchmark domain");
        let dir = export_domain(
            &data_dir,
            domain,
            settings.export_scenes,
            settings.train.seed,
            settings.arch.image_size,
        )?;
        println!("exported domain {id} -> {}", dir.display());
    }
    println!("episode source: set data_dir={}", data_dir.display());
    Ok(())
}

pub fn pretrain(settings: &RunSettings) -> Result<()> {
    let run = RunDir::create(settings)?;
    let source = scene_source(settings, 0)?;
    let mut net = Network::new(
        settings.arch,
        AblationSwitches::none(),
        settings.head,
        episode_seed(settings.train.seed, 0x11e7, 0),
    )?;
    let report = pretrain_baseline(&mut net, &source, &settings.train)?;
    net.backbone.freeze(&mut net.store);
    let ckpt = run.file("pretrain.ckpt");
    checkpoint::save(&ckpt, &net)?;
    fs::write(run.file("train.csv"), train_csv(&report.records, &[]))?;

    let ec = EvalConfig {
        episodes: settings.train.eval_episodes,
        k_shots: settings.shots,
        seed: episode_seed(settings.train.seed, 0xe0a1, 0),
    };
    let source_eval = evaluate(&net, std::slice::from_ref(&source), &ec)?;
    fs::write(
        run.file("summary.json"),
        json_summary(&[
            ("source_miou", source_eval.mean_miou),
            (
                "final_ce",
                report.records.last().map(|r| r.losses.ce).unwrap_or(0.0),
            ),
        ]),
    )?;
    println!(
        "pretrained {} epochs; source mIoU {:.4}; checkpoint {}",
        settings.train.pretrain_epochs,
        source_eval.mean_miou,
        ckpt.display()
    );
    Ok(())
}

pub fn train(settings: &RunSettings) -> Result<()> {
    let run = RunDir::create(settings)?;
    let pre = require_path(&settings.pretrain_ckpt, "pretrain_ckpt")?;
    let source = scene_source(settings, 0)?;
    let targets = target_sources(settings)?;

    let mut net = Network::new(
        settings.arch,
        settings.switches.into(),
        settings.head,
        episode_seed(settings.train.seed, 0x7a21, 0),
    )?;
    checkpoint::adopt_groups(&mut net, &pre, &[backbone::GROUP])?;
    net.backbone.freeze(&mut net.store);

    let report = train_source(&mut net, &source, &settings.train, &targets, Some(&run.path))?;
    let domain_ids: Vec<u32> = settings.domains.clone();
    fs::write(run.file("train.csv"), train_csv(&report.records, &domain_ids))?;

    let ec = EvalConfig {
        episodes: settings.train.eval_episodes,
        k_shots: settings.shots,
        seed: episode_seed(settings.train.seed, 0xe0a1, 0),
    };
    let eval_report = evaluate(&net, &targets, &ec)?;
    let mut summary: Vec<(String, f64)> = vec![("mean_target_miou".into(), eval_report.mean_miou)];
    for d in &eval_report.domains {
        summary.push((format!("miou_domain{}", d.domain_id), d.miou));
    }
    let entries: Vec<(&str, f64)> = summary.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    fs::write(run.file("summary.json"), json_summary(&entries))?;
    println!(
        "trained {} epochs; mean target mIoU {:.4}; checkpoint {}",
        settings.train.epochs,
        eval_report.mean_miou,
        run.file("model.ckpt").display()
    );
    Ok(())
}

pub fn finetune(settings: &RunSettings) -> Result<()> {
    let run = RunDir::create(settings)?;
    let src_ckpt = require_path(&settings.source_ckpt, "source_ckpt")?;
    let ec = EvalConfig {
        episodes: settings.train.eval_episodes,
        k_shots: settings.shots,
        seed: episode_seed(settings.train.seed, 0xe0a1, 0),
    };

    let mut csv = String::from("domain_id,step,loss\n");
    let mut summary: Vec<(String, f64)> = Vec::new();
    for &d in &settings.domains {
        let target = scene_source(settings, d)?;
        let mut net = checkpoint::load(&src_ckpt)?;
        net.backbone.freeze(&mut net.store);
        net.switches.use_modulation = true;

        let pre_eval = evaluate(&net, std::slice::from_ref(&target), &ec)?;
        let report = finetune_target(&mut net, &target, settings.shots, &settings.train)?;
        let post_eval = evaluate(&net, std::slice::from_ref(&target), &ec)?;

        for (i, l) in report.loss_curve.iter().enumerate() {
            csv.push_str(&format!("{d},{i},{l:.6}\n"));
        }
        let ckpt = run.file(format!("finetuned_domain{d}.ckpt"));
        checkpoint::save(&ckpt, &net)?;
        summary.push((format!("pre_miou_domain{d}"), pre_eval.mean_miou));
        summary.push((format!("post_miou_domain{d}"), post_eval.mean_miou));
        summary.push((format!("guard_accesses_domain{d}"), report.guard_accesses as f64));
        println!(
            "domain {d}: mIoU {:.4} -> {:.4} ({} steps, {} guarded query-mask accesses) -> {}",
            pre_eval.mean_miou,
            post_eval.mean_miou,
            report.steps,
            report.guard_accesses,
            ckpt.display()
        );
    }
    fs::write(run.file("finetune.csv"), csv)?;
    let entries: Vec<(&str, f64)> = summary.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    fs::write(run.file("summary.json"), json_summary(&entries))?;
    Ok(())
}

pub fn eval(settings: &RunSettings) -> Result<()> {
    let run = RunDir::create(settings)?;
    let src_ckpt = require_path(&settings.source_ckpt, "source_ckpt")?;
    let mut net = checkpoint::load(&src_ckpt)?;
    net.backbone.freeze(&mut net.store);
    let targets = target_sources(settings)?;

    // the benchmark reports both shot settings unless --shots narrowed it
    let shot_list: Vec<usize> = if settings.shots == 1 { vec![1, 5] } else { vec![settings.shots] };
    let mut reports = Vec::new();
    for &shots in &shot_list {
        let ec = EvalConfig {
            episodes: settings.train.eval_episodes,
            k_shots: shots,
            seed: episode_seed(settings.train.seed, 0xe0a1, 0),
        };
        let rep = evaluate(&net, &targets, &ec)?;
        fs::write(run.file(format!("episodes_{shots}shot.csv")), episode_csv(&rep))?;
        reports.push((shots, rep));
    }
    let refs: Vec<(usize, &decoseg_core::train::EvalReport)> =
        reports.iter().map(|(s, r)| (*s, r)).collect();
    let table = eval_table(&refs);
    print!("{table}");
    fs::write(run.file("eval_table.txt"), &table)?;

    let mut summary: Vec<(String, f64)> = Vec::new();
    for (shots, rep) in &reports {
        summary.push((format!("mean_miou_{shots}shot"), rep.mean_miou));
        for d in &rep.domains {
            summary.push((format!("miou_domain{}_{shots}shot", d.domain_id), d.miou));
        }
    }
    let entries: Vec<(&str, f64)> = summary.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    fs::write(run.file("summary.json"), json_summary(&entries))?;

    if settings.dump_weights {
        dump_fusion_weights(&net, &targets, settings, &run)?;
    }
    Ok(())
}

/// Debug dump: fusion weight maps of each domain's first eval episode.
fn dump_fusion_weights(
    net: &Network,
    targets: &[SceneSource],
    settings: &RunSettings,
    run: &RunDir,
) -> Result<()> {
    for src in targets {
        let ep = src.sample_episode(
            episode_seed(
                episode_seed(settings.train.seed, 0xe0a1, 0),
                0xe0 + src.domain_id() as usize,
                0,
            ),
            settings.shots,
            settings.arch.image_size,
        )?;
        let mut t = Tape::new();
        let img = net.images_node(&mut t, &[&ep.query_image]);
        let feats = net.features(&mut t, img, Phase::Adapt)?;
        let Some(weights) = feats.fusion_weights else {
            continue;
        };
        for (i, &w) in weights.iter().enumerate() {
            let v = t.value(w);
            let (h, wd) = (v.shape()[2], v.shape()[3]);
            let map = Array2::from_shape_fn((h, wd), |(y, x)| v[[0, 0, y, x]]);
            write_gray_pgm(
                &run.file(format!("weights_domain{}_stream{i}.pgm", src.domain_id())),
                &map,
            )?;
        }
    }
    Ok(())
}

pub fn ablate(settings: &RunSettings, from_scratch_flag: bool) -> Result<()> {
    let run = RunDir::create(settings)?;
    let from_scratch = from_scratch_flag || settings.from_scratch;
    let pre = if from_scratch {
        None
    } else {
        Some(require_path(&settings.pretrain_ckpt, "pretrain_ckpt")?)
    };
    let work = run.file("work");
    fs::create_dir_all(&work)?;
    let report = run_ablation_suite(
        settings.arch,
        settings.head,
        &settings.train,
        &settings.ablation_seeds,
        &work,
        pre.as_deref(),
    )?;
    let md = render_markdown(&report);
    let csv = render_csv(&report);
    fs::write(run.file("ablation.md"), &md)?;
    fs::write(run.file("ablation.csv"), &csv)?;

    let mut summary: Vec<(String, f64)> = Vec::new();
    for r in report
        .module_rows
        .iter()
        .chain(&report.feature_rows)
        .chain(&report.loss_rows)
    {
        summary.push((format!("miou[{}]", r.label), r.mean));
    }
    let entries: Vec<(&str, f64)> = summary.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    fs::write(run.file("summary.json"), json_summary(&entries))?;
    print!("{md}");
    Ok(())
}

pub fn check(corrupt_grl: bool) -> Result<()> {
    let t0 = std::time::Instant::now();
    let results = run_self_checks(corrupt_grl);
    let mut failures = 0usize;
    for r in &results {
        println!(
            "[{}] {}: {}",
            if r.pass { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
        if !r.pass {
            failures += 1;
        }
    }
    println!(
        "{}/{} checks passed in {:.2}s",
        results.len() - failures,
        results.len(),
        t0.elapsed().as_secs_f64()
    );
    if failures > 0 {
        return Err(Error::CheckFailed(format!("{failures} invariant(s) violated")));
    }
    Ok(())
}
