use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Result};
use clap::Args;
use physgraph::ppo::{eval_episode_seeds, evaluate_policy, run_episodes};
use physgraph::toyenv::{batch_metrics, BatchMetrics, EpisodeMetrics, GeometrySwap};
use physgraph::Task;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{model_from_checkpoint, ConfigArgs};

#[derive(Clone, Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Config to evaluate under; the checkpoint's own config when omitted.
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Episodes per seed (default: `ppo.eval_episodes`).
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Evaluation seeds (default: the checkpoint's training seed).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub task: Option<Task>,
    /// Eval-time geometry change, e.g. `tool_scale=0.6,object_shape=sphere`.
    #[arg(long)]
    pub geometry_swap: Option<String>,
    /// Uniform random actions instead of the checkpoint's policy.
    #[arg(long)]
    pub random_policy: bool,
    /// CSV destination (default: `eval.csv` next to the checkpoint).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// One CSV row; `seed` is `all` on the aggregate row. SR is a percentage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub arch: String,
    pub task: String,
    pub seed: String,
    pub episodes: usize,
    #[serde(rename = "SR")]
    pub sr: f64,
    #[serde(rename = "E_t_cm")]
    pub e_t_cm: f64,
    #[serde(rename = "E_j_cm")]
    pub e_j_cm: f64,
    #[serde(rename = "E_ft_cm")]
    pub e_ft_cm: f64,
}

impl EvalRow {
    fn new(arch: &str, task: Task, seed: String, m: &BatchMetrics) -> Self {
        Self {
            arch: arch.into(),
            task: task.to_string(),
            seed,
            episodes: m.episodes,
            sr: 100.0 * m.sr,
            e_t_cm: m.e_t_cm,
            e_j_cm: m.e_j_cm,
            e_ft_cm: m.e_ft_cm,
        }
    }
}

pub fn write_rows(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn format_table(rows: &[EvalRow]) -> String {
    let mut s = format!(
        "{:<18} {:<15} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "arch", "task", "seed", "episodes", "SR", "E_t_cm", "E_j_cm", "E_ft_cm"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<18} {:<15} {:>6} {:>8} {:>8.2} {:>8.4} {:>8.4} {:>8.4}\n",
            r.arch, r.task, r.seed, r.episodes, r.sr, r.e_t_cm, r.e_j_cm, r.e_ft_cm
        ));
    }
    s
}

/// Per-seed rows followed by the aggregate row.
pub fn run(args: &EvalArgs) -> Result<Vec<EvalRow>> {
    let (mut cfg, ckpt_seed, scene, model) = model_from_checkpoint(&args.checkpoint, &args.config)?;
    let episodes = args.episodes.unwrap_or(cfg.ppo.eval_episodes);
    if episodes == 0 {
        bail!("--episodes must be at least 1");
    }
    if let Some(t) = args.task {
        cfg.env.task = t;
    }
    let scene = match &args.geometry_swap {
        Some(s) => {
            cfg.env.geometry_swap = Some(GeometrySwap::parse(s)?);
            cfg.scene()?
        }
        None => scene,
    };
    let scene = Arc::new(scene);
    let seeds = if args.seeds.is_empty() {
        vec![ckpt_seed]
    } else {
        args.seeds.clone()
    };
    let arch = if args.random_policy { "random" } else { cfg.arch.as_str() };
    let mut rows = Vec::with_capacity(seeds.len() + 1);
    let mut all: Vec<EpisodeMetrics> = Vec::new();
    for &seed in &seeds {
        let ep_seeds = eval_episode_seeds(seed, episodes);
        let eps = if args.random_policy {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dim = scene.action_dim();
            run_episodes(scene.clone(), &cfg.env, &ep_seeds, |batch| {
                Ok(batch
                    .iter()
                    .map(|_| (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect())
                    .collect())
            })?
        } else {
            evaluate_policy(model.as_ref(), scene.clone(), &cfg.env, &ep_seeds)?.1
        };
        rows.push(EvalRow::new(arch, cfg.env.task, seed.to_string(), &batch_metrics(&eps)));
        all.extend(eps);
    }
    rows.push(EvalRow::new(arch, cfg.env.task, "all".into(), &batch_metrics(&all)));

    print!("{}", format_table(&rows));
    let out = match &args.out {
        Some(p) => p.clone(),
        None => args.checkpoint.parent().unwrap_or(Path::new(".")).join("eval.csv"),
    };
    write_rows(&out, &rows)?;
    Ok(rows)
}
