use std::fmt::Write;

use anyhow::Result;
use clap::Args;
use physgraph::encoder::{param_count, Arch};
use physgraph::ppo::build_policy;
use physgraph::RunConfig;

use crate::ConfigArgs;

#[derive(Clone, Debug, Args)]
pub struct CountArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Print physgraph and mlp-baseline side by side with their ratio.
    #[arg(long)]
    pub compare: bool,
}

/// `(submodule, scalars)` rows and the exact total for `cfg.arch`.
pub fn breakdown(cfg: &RunConfig) -> Result<(Vec<(String, usize)>, usize)> {
    let scene = cfg.scene()?;
    let model = build_policy(cfg, &scene.graph, scene.action_dim(), 0)?;
    Ok((model.param_breakdown(), param_count(model.as_ref())))
}

fn table(out: &mut String, arch: Arch, rows: &[(String, usize)], total: usize) {
    writeln!(out, "{arch}").unwrap();
    for (name, n) in rows {
        writeln!(out, "  {name:<40} {n:>10}").unwrap();
    }
    writeln!(out, "  {:<40} {total:>10}", "total").unwrap();
}

/// physgraph total / mlp-baseline total under the same config.
pub fn compare_ratio(cfg: &RunConfig) -> Result<(usize, usize, f64)> {
    let mut c = cfg.clone();
    c.arch = Arch::PhysGraph;
    let (_, pg) = breakdown(&c)?;
    c.arch = Arch::MlpBaseline;
    let (_, mlp) = breakdown(&c)?;
    Ok((pg, mlp, pg as f64 / mlp as f64))
}

pub fn run(args: &CountArgs) -> Result<String> {
    let cfg = args.config.load()?;
    let mut out = String::new();
    if !args.compare {
        let (rows, total) = breakdown(&cfg)?;
        table(&mut out, cfg.arch, &rows, total);
        return Ok(out);
    }
    for arch in [Arch::PhysGraph, Arch::MlpBaseline] {
        let mut c = cfg.clone();
        c.arch = arch;
        let (rows, total) = breakdown(&c)?;
        table(&mut out, arch, &rows, total);
    }
    let (pg, mlp, ratio) = compare_ratio(&cfg)?;
    writeln!(out, "ratio physgraph/mlp-baseline = {pg}/{mlp} = {ratio:.3}").unwrap();
    Ok(out)
}
