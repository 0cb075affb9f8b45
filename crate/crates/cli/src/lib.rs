//! Experiment runner for dynamic visual prompting: config parsing, run
//! modes and report emission. The `dvp` binary is a thin wrapper.

pub mod commands;
pub mod config;
pub mod report;

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

pub use config::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    GenData,
    Train,
    Sweep,
    Search,
    BanditTest,
    Flops,
    DumpAttn,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::GenData => "gen-data",
            Mode::Train => "train",
            Mode::Sweep => "sweep",
            Mode::Search => "search",
            Mode::BanditTest => "bandit-test",
            Mode::Flops => "flops",
            Mode::DumpAttn => "dump-attn",
        }
    }
}

/// Loads the config (or defaults), applies command-line overrides and
/// validates.
pub fn resolve_config(path: Option<&Path>, seed: Option<u64>, out: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out = o;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one mode, writing into `cfg.out`. Returns a short human summary.
pub fn run(mode: Mode, cfg: &RunConfig, quiet: bool) -> Result<String> {
    let out = cfg.out.as_path();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let log = |line: &str| {
        if !quiet {
            eprintln!("{line}");
        }
    };
    let summary = match mode {
        Mode::GenData => commands::gen_data(cfg, out)?,
        Mode::Train => {
            let r = commands::run_train(cfg, out, log)?;
            let val = r.history.last().map_or(0.0, |m| m.val_acc);
            format!("final val accuracy {val:.4}")
        }
        Mode::Sweep => {
            let r = commands::run_sweep(cfg, out)?;
            format!("best layer {}", r.best_layer)
        }
        Mode::Search => {
            let r = commands::run_search(cfg, out)?;
            format!("best layer {}", r.outcome.best_arm)
        }
        Mode::BanditTest => {
            let r = commands::run_bandit_test(cfg, out)?;
            format!("best arm {} recovered in {:.1}% of seeds", r.best_arm, 100.0 * r.recovery_rate)
        }
        Mode::Flops => {
            let rows = commands::run_flops(cfg, out)?;
            format!("{} strategy/layer rows", rows.len())
        }
        Mode::DumpAttn => {
            let n = commands::run_dump_attn(cfg, out, log)?;
            format!("{n} attention maps")
        }
    };
    Ok(summary)
}
