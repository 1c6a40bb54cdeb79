//! Flat key=value run configuration: a plain-text file plus command-line
//! overrides. Unknown keys are rejected with their line number, and every
//! run writes the fully resolved configuration beside its outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::model::{AblationSwitches, ArchConfig};
use crate::train::TrainConfig;

/// Everything a command needs, resolved from defaults, file and overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSettings {
    pub arch: ArchConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub switches: SwitchSettings,
    /// Evaluation shot count (the benchmark reports 1 and 5).
    pub shots: usize,
    /// Target domain ids to fine-tune/evaluate on.
    pub domains: Vec<u32>,
    pub out_dir: String,
    /// Run directory name; empty means timestamp-seed.
    pub run_name: String,
    /// Directory of exported scenes; empty means live generation.
    pub data_dir: String,
    /// Scenes per class for the export command.
    pub export_scenes: usize,
    pub ablation_seeds: Vec<u64>,
    pub pretrain_ckpt: String,
    pub source_ckpt: String,
    pub from_scratch: bool,
    /// Dump fusion weight maps as image files during eval.
    pub dump_weights: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SwitchSettings {
    pub use_fusion: bool,
    pub use_decomp: bool,
    pub use_modulation: bool,
    pub use_base: bool,
    pub use_shared: bool,
    pub use_private: bool,
    pub use_adv: bool,
    pub use_cont: bool,
    pub use_ortho: bool,
}

impl From<SwitchSettings> for AblationSwitches {
    fn from(s: SwitchSettings) -> Self {
        AblationSwitches {
            use_fusion: s.use_fusion,
            use_decomp: s.use_decomp,
            use_modulation: s.use_modulation,
            use_base: s.use_base,
            use_shared: s.use_shared,
            use_private: s.use_private,
            use_adv: s.use_adv,
            use_cont: s.use_cont,
            use_ortho: s.use_ortho,
        }
    }
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            arch: ArchConfig::default(),
            head: HeadConfig::default(),
            train: TrainConfig::default(),
            switches: SwitchSettings {
                use_fusion: true,
                use_decomp: true,
                use_modulation: true,
                use_base: true,
                use_shared: true,
                use_private: true,
                use_adv: true,
                use_cont: true,
                use_ortho: true,
            },
            shots: 1,
            domains: vec![1, 2, 3],
            out_dir: "runs".into(),
            run_name: String::new(),
            data_dir: String::new(),
            export_scenes: 24,
            ablation_seeds: vec![0, 1, 2],
            pretrain_ckpt: String::new(),
            source_ckpt: String::new(),
            from_scratch: false,
            dump_weights: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config {
        line,
        msg: format!("invalid value '{value}' for key '{key}'"),
    })
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config {
            line,
            msg: format!("invalid bool '{value}' for key '{key}'"),
        }),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<Vec<T>> {
    let v = value.trim();
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| {
            s.trim().parse().map_err(|_| Error::Config {
                line,
                msg: format!("invalid list entry '{s}' for key '{key}'"),
            })
        })
        .collect()
}

impl RunSettings {
    /// Apply one `key=value` assignment (line number for diagnostics).
    pub fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let k = key.trim();
        let v = value;
        match k {
            // architecture
            "image_size" => self.arch.image_size = parse(k, v, line)?,
            "c_shared" => self.arch.c_shared = parse(k, v, line)?,
            "c_private" => self.arch.c_private = parse(k, v, line)?,
            "c_f" => self.arch.c_f = parse(k, v, line)?,
            "d_proj" => self.arch.d_proj = parse(k, v, line)?,
            "disc_hidden" => self.arch.disc_hidden = parse(k, v, line)?,
            "ca_reduction" => self.arch.ca_reduction = parse(k, v, line)?,
            "disc_class_head" => self.arch.disc_class_head = parse_bool(k, v, line)?,
            // head
            "temperature" => self.head.temperature = parse(k, v, line)?,
            "conf_hi" => self.head.conf_hi = parse(k, v, line)?,
            "conf_lo" => self.head.conf_lo = parse(k, v, line)?,
            "blend" => self.head.blend = parse(k, v, line)?,
            "refine_rounds" => self.head.refine_rounds = parse(k, v, line)?,
            "threshold" => self.head.threshold = parse(k, v, line)?,
            "query_fusion" => self.head.query_fusion = parse_bool(k, v, line)?,
            "fg_only_miou" => self.head.fg_only_miou = parse_bool(k, v, line)?,
            // training
            "lambda_ce" => self.train.lambda_ce = parse(k, v, line)?,
            "lambda_adv" => self.train.lambda_adv = parse(k, v, line)?,
            "lambda_cont" => self.train.lambda_cont = parse(k, v, line)?,
            "lambda_ortho" => self.train.lambda_ortho = parse(k, v, line)?,
            "s_steps" => self.train.s_steps = parse(k, v, line)?,
            "d_steps" => self.train.d_steps = parse(k, v, line)?,
            "epochs" => self.train.epochs = parse(k, v, line)?,
            "episodes_per_epoch" => self.train.episodes_per_epoch = parse(k, v, line)?,
            "batch_size" => self.train.batch_size = parse(k, v, line)?,
            "k_shots" => self.train.k_shots = parse(k, v, line)?,
            "lr_main" => self.train.lr_main = parse(k, v, line)?,
            "lr_disc" => self.train.lr_disc = parse(k, v, line)?,
            "lr_finetune" => self.train.lr_finetune = parse(k, v, line)?,
            "momentum" => self.train.momentum = parse(k, v, line)?,
            "weight_decay_disc" => self.train.weight_decay_disc = parse(k, v, line)?,
            "seed" => self.train.seed = parse(k, v, line)?,
            "pretrain_epochs" => self.train.pretrain_epochs = parse(k, v, line)?,
            "finetune_epochs" => self.train.finetune_epochs = parse(k, v, line)?,
            "finetune_episodes" => self.train.finetune_episodes = parse(k, v, line)?,
            "eval_episodes" => self.train.eval_episodes = parse(k, v, line)?,
            "eval_every" => self.train.eval_every = parse(k, v, line)?,
            "grl_lambda" => self.train.grl_lambda = parse(k, v, line)?,
            "grl_warmup_frac" => self.train.grl_warmup_frac = parse(k, v, line)?,
            "tau" => self.train.tau = parse(k, v, line)?,
            "bank_capacity" => self.train.bank_capacity = parse(k, v, line)?,
            "bank_push" => self.train.bank_push = parse(k, v, line)?,
            "pixels_per_class" => self.train.pixels_per_class = parse(k, v, line)?,
            // switches
            "use_fusion" => self.switches.use_fusion = parse_bool(k, v, line)?,
            "use_decomp" => self.switches.use_decomp = parse_bool(k, v, line)?,
            "use_modulation" => self.switches.use_modulation = parse_bool(k, v, line)?,
            "use_base" => self.switches.use_base = parse_bool(k, v, line)?,
            "use_shared" => self.switches.use_shared = parse_bool(k, v, line)?,
            "use_private" => self.switches.use_private = parse_bool(k, v, line)?,
            "use_adv" => self.switches.use_adv = parse_bool(k, v, line)?,
            "use_cont" => self.switches.use_cont = parse_bool(k, v, line)?,
            "use_ortho" => self.switches.use_ortho = parse_bool(k, v, line)?,
            // run plumbing
            "shots" => self.shots = parse(k, v, line)?,
            "domains" => self.domains = parse_list(k, v, line)?,
            "out_dir" => self.out_dir = v.trim().to_string(),
            "run_name" => self.run_name = v.trim().to_string(),
            "data_dir" => self.data_dir = v.trim().to_string(),
            "export_scenes" => self.export_scenes = parse(k, v, line)?,
            "ablation_seeds" => self.ablation_seeds = parse_list(k, v, line)?,
            "pretrain_ckpt" => self.pretrain_ckpt = v.trim().to_string(),
            "source_ckpt" => self.source_ckpt = v.trim().to_string(),
            "from_scratch" => self.from_scratch = parse_bool(k, v, line)?,
            "dump_weights" => self.dump_weights = parse_bool(k, v, line)?,
            _ => {
                return Err(Error::Config {
                    line,
                    msg: format!("unknown key '{k}'"),
                })
            }
        }
        Ok(())
    }

    /// Parse a whole config file (`#` comments, blank lines allowed).
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config {
            line: 0,
            msg: format!("cannot read {}: {e}", path.display()),
        })?;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            let Some((k, v)) = s.split_once('=') else {
                return Err(Error::Config {
                    line,
                    msg: format!("expected key=value, got '{s}'"),
                });
            };
            self.apply(k, v, line)?;
        }
        Ok(())
    }

    /// Apply a `key=value` override from the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let Some((k, v)) = assignment.split_once('=') else {
            return Err(Error::Config {
                line: 0,
                msg: format!("override must be key=value, got '{assignment}'"),
            });
        };
        self.apply(k, v, 0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.arch.image_size % 8 != 0 {
            return Err(Error::Config {
                line: 0,
                msg: "image_size must be divisible by 8".into(),
            });
        }
        if self.shots != 1 && self.shots != 5 {
            return Err(Error::Config {
                line: 0,
                msg: format!("shots must be 1 or 5, got {}", self.shots),
            });
        }
        if self.train.grl_lambda < 0.0 {
            return Err(Error::Config {
                line: 0,
                msg: "grl_lambda must be nonnegative".into(),
            });
        }
        if self.domains.iter().any(|&d| d == 0 || d > 3) {
            return Err(Error::Config {
                line: 0,
                msg: "domains must be target ids in 1..=3".into(),
            });
        }
        AblationSwitches::from(self.switches).validate()
    }

    /// Serialize the fully resolved configuration, keys sorted.
    pub fn resolved(&self) -> String {
        let mut pairs: Vec<(String, String)> = Vec::new();
        let mut p = |k: &str, v: String| pairs.push((k.to_string(), v));
        p("image_size", self.arch.image_size.to_string());
        p("c_shared", self.arch.c_shared.to_string());
        p("c_private", self.arch.c_private.to_string());
        p("c_f", self.arch.c_f.to_string());
        p("d_proj", self.arch.d_proj.to_string());
        p("disc_hidden", self.arch.disc_hidden.to_string());
        p("ca_reduction", self.arch.ca_reduction.to_string());
        p("disc_class_head", self.arch.disc_class_head.to_string());
        p("temperature", format!("{}", self.head.temperature));
        p("conf_hi", format!("{}", self.head.conf_hi));
        p("conf_lo", format!("{}", self.head.conf_lo));
        p("blend", format!("{}", self.head.blend));
        p("refine_rounds", self.head.refine_rounds.to_string());
        p("threshold", format!("{}", self.head.threshold));
        p("query_fusion", self.head.query_fusion.to_string());
        p("fg_only_miou", self.head.fg_only_miou.to_string());
        p("lambda_ce", format!("{}", self.train.lambda_ce));
        p("lambda_adv", format!("{}", self.train.lambda_adv));
        p("lambda_cont", format!("{}", self.train.lambda_cont));
        p("lambda_ortho", format!("{}", self.train.lambda_ortho));
        p("s_steps", self.train.s_steps.to_string());
        p("d_steps", self.train.d_steps.to_string());
        p("epochs", self.train.epochs.to_string());
        p("episodes_per_epoch", self.train.episodes_per_epoch.to_string());
        p("batch_size", self.train.batch_size.to_string());
        p("k_shots", self.train.k_shots.to_string());
        p("lr_main", format!("{}", self.train.lr_main));
        p("lr_disc", format!("{}", self.train.lr_disc));
        p("lr_finetune", format!("{}", self.train.lr_finetune));
        p("momentum", format!("{}", self.train.momentum));
        p("weight_decay_disc", format!("{}", self.train.weight_decay_disc));
        p("seed", self.train.seed.to_string());
        p("pretrain_epochs", self.train.pretrain_epochs.to_string());
        p("finetune_epochs", self.train.finetune_epochs.to_string());
        p("finetune_episodes", self.train.finetune_episodes.to_string());
        p("eval_episodes", self.train.eval_episodes.to_string());
        p("eval_every", self.train.eval_every.to_string());
        p("grl_lambda", format!("{}", self.train.grl_lambda));
        p("grl_warmup_frac", format!("{}", self.train.grl_warmup_frac));
        p("tau", format!("{}", self.train.tau));
        p("bank_capacity", self.train.bank_capacity.to_string());
        p("bank_push", self.train.bank_push.to_string());
        p("pixels_per_class", self.train.pixels_per_class.to_string());
        p("use_fusion", self.switches.use_fusion.to_string());
        p("use_decomp", self.switches.use_decomp.to_string());
        p("use_modulation", self.switches.use_modulation.to_string());
        p("use_base", self.switches.use_base.to_string());
        p("use_shared", self.switches.use_shared.to_string());
        p("use_private", self.switches.use_private.to_string());
        p("use_adv", self.switches.use_adv.to_string());
        p("use_cont", self.switches.use_cont.to_string());
        p("use_ortho", self.switches.use_ortho.to_string());
        p("shots", self.shots.to_string());
        p(
            "domains",
            self.domains
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        p("out_dir", self.out_dir.clone());
        p("run_name", self.run_name.clone());
        p("data_dir", self.data_dir.clone());
        p("export_scenes", self.export_scenes.to_string());
        p(
            "ablation_seeds",
            self.ablation_seeds
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        p("pretrain_ckpt", self.pretrain_ckpt.clone());
        p("source_ckpt", self.source_ckpt.clone());
        p("from_scratch", self.from_scratch.to_string());
        p("dump_weights", self.dump_weights.to_string());
        pairs.sort();
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}
