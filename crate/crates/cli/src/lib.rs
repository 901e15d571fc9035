//! Command implementations behind the `physgraph` binary. Each command is a
//! plain function so tests can drive it without spawning a process.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use physgraph::encoder::Arch;
use physgraph::ppo::{build_policy, install_params, load_policy};
use physgraph::{PolicyModel, RunConfig, Scene};

pub mod count;
pub mod eval;
pub mod inspect;
pub mod train;

#[derive(Debug, Parser)]
#[command(name = "physgraph", version, about = "Train and evaluate kinematic-graph transformer policies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one run per configured seed.
    Train(train::TrainArgs),
    /// Deterministic evaluation of a checkpoint.
    Eval(eval::EvalArgs),
    /// Dump per-head bias components as token-labeled CSV files.
    InspectBias(inspect::InspectArgs),
    /// Per-submodule parameter counts.
    CountParams(count::CountArgs),
}

/// Config file plus `--override key.path=value` pairs.
#[derive(Clone, Debug, Default, Args)]
pub struct ConfigArgs {
    /// Run config (TOML). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. `ppo.lr=1e-4`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--override arch=<ARCH>`.
    #[arg(long)]
    pub arch: Option<Arch>,
}

impl ConfigArgs {
    fn all_overrides(&self) -> Vec<String> {
        let mut o = self.overrides.clone();
        if let Some(a) = self.arch {
            o.push(format!("arch=\"{a}\""));
        }
        o
    }

    /// Loads `--config` (or defaults) with overrides applied.
    pub fn load(&self) -> Result<RunConfig> {
        let o = self.all_overrides();
        Ok(match &self.config {
            Some(p) => RunConfig::load(p, &o)?,
            None => RunConfig::from_toml_str("", &o, None)?,
        })
    }

    /// Like [`ConfigArgs::load`], but starts from `base` when no file is given.
    pub fn load_over(&self, base: &RunConfig) -> Result<RunConfig> {
        let o = self.all_overrides();
        Ok(match &self.config {
            Some(p) => RunConfig::load(p, &o)?,
            None => RunConfig::from_toml_str(&base.to_toml_string(), &o, None)?,
        })
    }
}

/// A checkpoint's weights installed into a model built from `args` (or the
/// checkpoint's own config); layout differences are reported per parameter.
pub fn model_from_checkpoint(path: &Path, args: &ConfigArgs) -> Result<(RunConfig, u64, Scene, Box<dyn PolicyModel>)> {
    let (saved, seed, loaded) = load_policy(path).with_context(|| format!("loading {}", path.display()))?;
    let cfg = args.load_over(&saved)?;
    let scene = cfg.scene()?;
    let mut model = build_policy(&cfg, &scene.graph, scene.action_dim(), seed)?;
    install_params(model.as_mut(), loaded.store().clone())
        .with_context(|| format!("{} does not fit the requested config", path.display()))?;
    Ok((cfg, seed, scene, model))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train::run(&a).map(|_| ()),
        Command::Eval(a) => eval::run(&a).map(|_| ()),
        Command::InspectBias(a) => inspect::run(&a).map(|_| ()),
        Command::CountParams(a) => {
            print!("{}", count::run(&a)?);
            Ok(())
        }
    }
}
