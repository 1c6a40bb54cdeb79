//! Deterministic CSV and JSON rendering of training/evaluation records.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::train::{EpochRecord, EvalReport};

fn f(v: f64) -> String {
    format!("{v:.6}")
}

/// Per-epoch training CSV: losses plus one mIoU column per domain id.
pub fn train_csv(records: &[EpochRecord], domain_ids: &[u32]) -> String {
    let mut out = String::from("epoch,phase,loss_ce,loss_adv,loss_cont,loss_ortho,loss_disc_real,loss_disc_fake,loss_total,no_pair_steps");
    for d in domain_ids {
        let _ = write!(out, ",miou_domain{d}");
    }
    out.push('\n');
    for r in records {
        let l = &r.losses;
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.phase,
            f(l.ce),
            f(l.adv),
            f(l.cont),
            f(l.ortho),
            f(l.disc_real),
            f(l.disc_fake),
            f(l.total),
            r.no_pair_steps
        );
        for d in domain_ids {
            match r.miou_per_domain.iter().find(|(id, _)| id == d) {
                Some((_, m)) => {
                    let _ = write!(out, ",{}", f(*m));
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// Per-episode evaluation CSV.
pub fn episode_csv(report: &EvalReport) -> String {
    let mut out = String::from("episode_id,domain_id,class_id,fg_iou,bg_iou\n");
    for d in &report.domains {
        for r in &d.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.episode_id,
                r.domain_id,
                r.class_id,
                f(r.fg_iou),
                f(r.bg_iou)
            );
        }
    }
    out
}

/// Per-domain mIoU table for one or more shot settings.
pub fn eval_table(reports: &[(usize, &EvalReport)]) -> String {
    let mut out = String::from("domain");
    for (shots, _) in reports {
        let _ = write!(out, "  {shots}-shot_miou");
    }
    out.push('\n');
    if let Some((_, first)) = reports.first() {
        for (i, d) in first.domains.iter().enumerate() {
            let _ = write!(out, "{:<6}", d.domain_id);
            for (_, rep) in reports {
                let _ = write!(out, "  {:>12}", f(rep.domains[i].miou));
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<6}", "mean");
        for (_, rep) in reports {
            let _ = write!(out, "  {:>12}", f(rep.mean_miou));
        }
        out.push('\n');
    }
    out
}

/// Deterministic JSON summary (sorted keys).
pub fn json_summary(entries: &[(&str, f64)]) -> String {
    let map: BTreeMap<&str, String> = entries.iter().map(|(k, v)| (*k, f(*v))).collect();
    let mut out = String::from("{\n");
    let n = map.len();
    for (i, (k, v)) in map.iter().enumerate() {
        let _ = write!(out, "  \"{k}\": {v}");
        out.push_str(if i + 1 < n { ",\n" } else { "\n" });
    }
    out.push_str("}\n");
    out
}
