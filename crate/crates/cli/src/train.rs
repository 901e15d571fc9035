use std::fs;
use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use physgraph::ppo::{train_seed, TrainSummary, UpdateRecord, CONFIG_FILE};

use crate::ConfigArgs;

#[derive(Clone, Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Continue each seed from its `latest.ckpt` when present.
    #[arg(long)]
    pub resume: bool,
    /// No per-update progress lines.
    #[arg(long)]
    pub quiet: bool,
}

/// Directory of one seed inside the run's output directory.
pub fn seed_dir(output: &std::path::Path, seed: u64) -> PathBuf {
    output.join(format!("seed{seed}"))
}

fn progress_line(seed: u64, r: &UpdateRecord) -> String {
    let mut s = format!(
        "seed {seed} update {:>4}  reward {:.4}  policy {:+.4}  value {:.4}  kl {:.4}",
        r.update, r.mean_reward, r.losses.policy_loss, r.losses.value_loss, r.losses.approx_kl
    );
    if let Some(e) = &r.eval {
        s.push_str(&format!(
            "  | eval SR {:.1}%  E_t {:.3}  E_j {:.3}  E_ft {:.3}",
            100.0 * e.sr,
            e.e_t_cm,
            e.e_j_cm,
            e.e_ft_cm
        ));
        if r.best {
            s.push_str(" *");
        }
    }
    s
}

pub fn run(args: &TrainArgs) -> Result<Vec<TrainSummary>> {
    let cfg = args.config.load()?;
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join(CONFIG_FILE), cfg.to_toml_string())?;
    let mut out = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let dir = seed_dir(&cfg.output_dir, seed);
        let quiet = args.quiet;
        let s = train_seed(&cfg, seed, &dir, args.resume, &mut |r| {
            if !quiet {
                eprintln!("{}", progress_line(seed, r));
            }
        })?;
        match &s.best {
            Some(b) => println!(
                "seed {seed}: {} updates, best update {} with SR {:.1}% -> {}",
                s.updates,
                s.best_update.unwrap_or(0),
                100.0 * b.sr,
                dir.display()
            ),
            None => println!("seed {seed}: {} updates (no evaluation ran) -> {}", s.updates, dir.display()),
        }
        out.push(s);
    }
    Ok(out)
}
