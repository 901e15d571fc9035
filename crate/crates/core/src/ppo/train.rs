use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{collect_rollouts, evaluate_policy, mix, ppo_update, EvalSummary, LossReport, PpoError, VecEnv, VecEnvState};
use crate::config::RunConfig;
use crate::encoder::{Arch, MlpBaseline, PhysGraphNet, PolicyModel};
use crate::kingraph::KinematicGraph;
use crate::nncore::{load_checkpoint, save_checkpoint, Adam, AdamConfig, Checkpoint, NnError, ParamStore};
use crate::toyenv::{EpisodeMetrics, Scene};

pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EPISODES_FILE: &str = "episodes.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

const SELECTION_STREAM: u64 = 0x5E1E_C710;

/// Episode seeds of the periodic evaluation of run `seed`; a standalone
/// evaluation with the same seed replays exactly these episodes.
pub fn eval_episode_seeds(seed: u64, episodes: usize) -> Vec<u64> {
    (0..episodes as u64).map(|i| mix(seed ^ SELECTION_STREAM, i)).collect()
}

/// Fresh model for `cfg.arch`, initialized from `seed`.
pub fn build_policy(cfg: &RunConfig, graph: &KinematicGraph, action_dim: usize, seed: u64) -> Result<Box<dyn PolicyModel>, NnError> {
    Ok(match cfg.arch {
        Arch::PhysGraph | Arch::PhysGraphNoBias => {
            Box::new(PhysGraphNet::new(graph, action_dim, cfg.encoder.clone(), cfg.arch, seed)?)
        }
        Arch::MlpBaseline => Box::new(MlpBaseline::new(graph, action_dim, &cfg.baseline, seed)?),
    })
}

/// Replaces the model's parameters, refusing any name or shape difference.
pub fn install_params(model: &mut dyn PolicyModel, store: ParamStore) -> Result<(), PpoError> {
    let have: Vec<(String, Vec<usize>)> = model
        .store()
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.shape().to_vec()))
        .collect();
    let got: Vec<(String, Vec<usize>)> = store.iter().map(|(_, p)| (p.name.clone(), p.value.shape().to_vec())).collect();
    if have != got {
        let mut diff = Vec::new();
        for (name, shape) in &have {
            match got.iter().find(|(n, _)| n == name) {
                None => diff.push(format!("  {name}: model {shape:?}, checkpoint missing")),
                Some((_, s)) if s != shape => diff.push(format!("  {name}: model {shape:?}, checkpoint {s:?}")),
                _ => {}
            }
        }
        for (name, shape) in &got {
            if !have.iter().any(|(n, _)| n == name) {
                diff.push(format!("  {name}: model missing, checkpoint {shape:?}"));
            }
        }
        if diff.is_empty() {
            diff.push("  parameter order differs".into());
        }
        return Err(PpoError::CheckpointMismatch(diff.join("\n")));
    }
    *model.store_mut() = store;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointConfig {
    run: RunConfig,
    seed: u64,
}

/// Loads a checkpoint's run config and model.
pub fn load_policy(path: &Path) -> Result<(RunConfig, u64, Box<dyn PolicyModel>), PpoError> {
    let ckpt = load_checkpoint(path)?;
    let cc: CheckpointConfig = serde_json::from_value(ckpt.config).map_err(|e| PpoError::Serde(e.to_string()))?;
    let scene = cc.run.scene()?;
    let mut model = build_policy(&cc.run, &scene.graph, scene.action_dim(), cc.seed)?;
    install_params(model.as_mut(), ckpt.store)?;
    Ok((cc.run, cc.seed, model))
}

/// Current bias coefficients, logged every update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasLog {
    pub lambda_sp: f64,
    pub lambda_edge: f64,
    pub lambda_geo: f64,
    pub lambda_anat: Vec<f64>,
    pub sigma: f64,
    pub alpha_ser: f64,
    pub alpha_syn: f64,
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    /// 1-based count of completed updates.
    pub update: usize,
    /// Cumulative training seconds.
    pub wall_time: f64,
    pub mean_reward: f64,
    /// Training episodes finished during this update's rollout.
    pub episodes: usize,
    pub eval: Option<EvalSummary>,
    #[serde(flatten)]
    pub losses: LossReport,
    pub bias: Option<BiasLog>,
    /// This update produced a new best eval checkpoint.
    pub best: bool,
}

#[derive(Serialize, Deserialize)]
struct EpisodeRecord {
    update: usize,
    run_seed: u64,
    #[serde(flatten)]
    metrics: EpisodeMetrics,
}

/// Trainer progress stored in checkpoints next to the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub update: usize,
    pub elapsed: f64,
    pub best: Option<(usize, EvalSummary)>,
    pub venv: VecEnvState,
}

pub struct Trainer {
    cfg: RunConfig,
    seed: u64,
    scene: Arc<Scene>,
    model: Box<dyn PolicyModel>,
    opt: Adam,
    venv: VecEnv,
    update: usize,
    elapsed: f64,
    best: Option<(usize, EvalSummary)>,
    eval_seeds: Vec<u64>,
}

impl Trainer {
    pub fn new(cfg: RunConfig, seed: u64) -> Result<Self, PpoError> {
        let scene = Arc::new(cfg.scene()?);
        let model = build_policy(&cfg, &scene.graph, scene.action_dim(), seed)?;
        let opt = Adam::new(
            AdamConfig {
                lr: cfg.ppo.lr,
                ..AdamConfig::default()
            },
            model.store(),
        );
        let venv = VecEnv::new(scene.clone(), &cfg.env, cfg.ppo.num_envs, seed, cfg.ppo.effective_threads())?;
        let eval_seeds = eval_episode_seeds(seed, cfg.ppo.eval_episodes);
        Ok(Self {
            cfg,
            seed,
            scene,
            model,
            opt,
            venv,
            update: 0,
            elapsed: 0.0,
            best: None,
            eval_seeds,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, PpoError> {
        let cc: CheckpointConfig = serde_json::from_value(ckpt.config).map_err(|e| PpoError::Serde(e.to_string()))?;
        let state: TrainerState = serde_json::from_value(ckpt.extra).map_err(|e| PpoError::Serde(e.to_string()))?;
        let mut t = Self::new(cc.run, cc.seed)?;
        install_params(t.model.as_mut(), ckpt.store)?;
        t.opt = ckpt
            .optimizer
            .ok_or_else(|| PpoError::State("checkpoint has no optimizer state; cannot resume".into()))?;
        t.venv.restore(&state.venv)?;
        t.update = state.update;
        t.elapsed = state.elapsed;
        t.best = state.best;
        Ok(t)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn model(&self) -> &dyn PolicyModel {
        self.model.as_ref()
    }

    pub fn scene(&self) -> &Arc<Scene> {
        &self.scene
    }

    /// Completed updates.
    pub fn updates(&self) -> usize {
        self.update
    }

    pub fn best(&self) -> Option<&(usize, EvalSummary)> {
        self.best.as_ref()
    }

    pub fn eval_seeds(&self) -> &[u64] {
        &self.eval_seeds
    }

    pub fn checkpoint(&self) -> Result<Checkpoint, PpoError> {
        let cc = CheckpointConfig {
            run: self.cfg.clone(),
            seed: self.seed,
        };
        let state = TrainerState {
            update: self.update,
            elapsed: self.elapsed,
            best: self.best.clone(),
            venv: self.venv.state(),
        };
        Ok(Checkpoint {
            config: serde_json::to_value(cc).map_err(|e| PpoError::Serde(e.to_string()))?,
            store: self.model.store().clone(),
            optimizer: Some(self.opt.clone()),
            extra: serde_json::to_value(state).map_err(|e| PpoError::Serde(e.to_string()))?,
        })
    }

    pub fn evaluate(&self, seeds: &[u64]) -> Result<(EvalSummary, Vec<EpisodeMetrics>), PpoError> {
        evaluate_policy(self.model.as_ref(), self.scene.clone(), &self.cfg.env, seeds)
    }

    /// One collect/GAE/update cycle plus the scheduled evaluation.
    pub fn step(&mut self) -> Result<(UpdateRecord, Vec<EpisodeMetrics>), PpoError> {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, self.update as u64));
        let batch = collect_rollouts(self.model.as_ref(), &mut self.venv, &self.cfg.ppo, &mut rng)?;
        let losses = ppo_update(self.model.as_mut(), &mut self.opt, &batch, &self.cfg.ppo, &mut rng, self.update)?;
        self.update += 1;
        let every = self.cfg.ppo.eval_every;
        let mut best = false;
        let eval = if every > 0 && self.update % every == 0 {
            let (summary, _) = self.evaluate(&self.eval_seeds)?;
            if self.best.as_ref().is_none_or(|(_, b)| better(&summary, b)) {
                self.best = Some((self.update, summary.clone()));
                best = true;
            }
            Some(summary)
        } else {
            None
        };
        self.elapsed += start.elapsed().as_secs_f64();
        let bias = self.model.bias_params().map(|b| {
            let v = b.values(self.model.store());
            BiasLog {
                lambda_sp: v.lambda_sp,
                lambda_edge: v.lambda_edge,
                lambda_geo: v.lambda_geo,
                lambda_anat: v.lambda_anat,
                sigma: v.sigma,
                alpha_ser: v.alpha_ser,
                alpha_syn: v.alpha_syn,
            }
        });
        let record = UpdateRecord {
            update: self.update,
            wall_time: self.elapsed,
            mean_reward: batch.mean_reward,
            episodes: batch.finished.len(),
            eval,
            losses,
            bias,
            best,
        };
        Ok((record, batch.finished))
    }
}

/// Higher SR wins; ties go to the lower summed tracking error.
fn better(a: &EvalSummary, b: &EvalSummary) -> bool {
    let err = |s: &EvalSummary| s.e_t_cm + s.e_j_cm + s.e_ft_cm;
    a.sr > b.sr || (a.sr == b.sr && err(a) < err(b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub updates: usize,
    pub best_update: Option<usize>,
    pub best: Option<EvalSummary>,
    pub last: Option<UpdateRecord>,
}

/// Keeps only lines whose `update` field is at most `upto`.
fn truncate_jsonl(path: &Path, upto: usize) -> Result<(), PpoError> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = String::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let v: serde_json::Value = serde_json::from_str(&line).map_err(|e| PpoError::Serde(e.to_string()))?;
        if v.get("update").and_then(|u| u.as_u64()).is_some_and(|u| u as usize <= upto) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

fn append_line<T: Serialize>(file: &mut File, v: &T) -> Result<(), PpoError> {
    let s = serde_json::to_string(v).map_err(|e| PpoError::Serde(e.to_string()))?;
    writeln!(file, "{s}")?;
    Ok(())
}

fn differing_keys(a: &serde_json::Value, b: &serde_json::Value, prefix: &str, out: &mut Vec<String>) {
    match (a.as_object(), b.as_object()) {
        (Some(x), Some(y)) => {
            let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            for k in keys {
                let null = serde_json::Value::Null;
                let name = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                differing_keys(x.get(k).unwrap_or(&null), y.get(k).unwrap_or(&null), &name, out);
            }
        }
        _ if a != b => out.push(prefix.to_string()),
        _ => {}
    }
}

/// A resumed run keeps its checkpointed config except for the budget and
/// output settings, which follow the request. Anything else must match.
fn adopt_schedule(mut t: Trainer, cfg: &RunConfig) -> Result<Trainer, PpoError> {
    let mut want = cfg.clone();
    want.seeds = t.cfg.seeds.clone();
    want.output_dir = t.cfg.output_dir.clone();
    want.ppo.max_updates = t.cfg.ppo.max_updates;
    want.ppo.checkpoint_every = t.cfg.ppo.checkpoint_every;
    let to_json = |c: &RunConfig| serde_json::to_value(c).map_err(|e| PpoError::Serde(e.to_string()));
    let mut diff = Vec::new();
    differing_keys(&to_json(&t.cfg)?, &to_json(&want)?, "", &mut diff);
    if !diff.is_empty() {
        return Err(PpoError::State(format!(
            "cannot resume: config differs from the checkpoint in {}",
            diff.join(", ")
        )));
    }
    t.cfg.seeds = cfg.seeds.clone();
    t.cfg.output_dir = cfg.output_dir.clone();
    t.cfg.ppo.max_updates = cfg.ppo.max_updates;
    t.cfg.ppo.checkpoint_every = cfg.ppo.checkpoint_every;
    Ok(t)
}

/// Trains one seed into `out_dir`, writing the resolved config, metrics and
/// episode logs and the latest/best checkpoints. With `resume`, continues
/// from `out_dir/latest.ckpt` when it exists.
pub fn train_seed(
    cfg: &RunConfig,
    seed: u64,
    out_dir: &Path,
    resume: bool,
    progress: &mut dyn FnMut(&UpdateRecord),
) -> Result<TrainSummary, PpoError> {
    fs::create_dir_all(out_dir)?;
    let latest = out_dir.join(LATEST_CHECKPOINT);
    let metrics_path = out_dir.join(METRICS_FILE);
    let episodes_path = out_dir.join(EPISODES_FILE);
    let mut trainer = if resume && latest.exists() {
        let t = Trainer::from_checkpoint(load_checkpoint(&latest)?)?;
        if t.seed != seed || t.cfg.arch != cfg.arch {
            return Err(PpoError::State(format!(
                "{} holds seed {} ({}) but seed {seed} ({}) was requested",
                latest.display(),
                t.seed,
                t.cfg.arch,
                cfg.arch
            )));
        }
        adopt_schedule(t, cfg)?
    } else {
        Trainer::new(cfg.clone(), seed)?
    };
    let mut resolved = trainer.cfg.clone();
    resolved.seeds = vec![seed];
    fs::write(out_dir.join(CONFIG_FILE), resolved.to_toml_string())?;
    truncate_jsonl(&metrics_path, trainer.update)?;
    truncate_jsonl(&episodes_path, trainer.update)?;
    let open = |p: &Path| OpenOptions::new().create(true).append(true).open(p);
    let mut metrics = open(&metrics_path)?;
    let mut episodes = open(&episodes_path)?;

    let max = trainer.cfg.ppo.max_updates;
    let every = trainer.cfg.ppo.checkpoint_every;
    let mut last = None;
    while trainer.update < max {
        let (rec, finished) = trainer.step()?;
        append_line(&mut metrics, &rec)?;
        for m in finished {
            append_line(
                &mut episodes,
                &EpisodeRecord {
                    update: rec.update,
                    run_seed: seed,
                    metrics: m,
                },
            )?;
        }
        if rec.best {
            save_checkpoint(&out_dir.join(BEST_CHECKPOINT), &trainer.checkpoint()?)?;
        }
        if trainer.update == max || (every > 0 && trainer.update % every == 0) {
            save_checkpoint(&latest, &trainer.checkpoint()?)?;
        }
        progress(&rec);
        last = Some(rec);
    }
    if !latest.exists() {
        save_checkpoint(&latest, &trainer.checkpoint()?)?;
    }
    Ok(TrainSummary {
        seed,
        out_dir: out_dir.to_path_buf(),
        updates: trainer.update,
        best_update: trainer.best.as_ref().map(|b| b.0),
        best: trainer.best.map(|b| b.1),
        last,
    })
}
