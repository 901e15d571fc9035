use serde::{Deserialize, Serialize};

use super::config::{RewardConfig, Task, Thresholds};

/// Instantaneous tracking errors, centimeters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepErrors {
    /// Worst tool/object position error.
    pub e_t_cm: f64,
    /// Mean position error over palm and finger-link nodes of all hands.
    pub e_j_cm: f64,
    /// Mean fingertip position error.
    pub e_ft_cm: f64,
}

impl StepErrors {
    pub fn exceeds(&self, th: &Thresholds) -> bool {
        !(self.e_t_cm < th.e_t_cm && self.e_j_cm < th.e_j_cm && self.e_ft_cm < th.e_ft_cm)
    }
}

/// Reward for one step; `consistency` is the fraction of bodies whose contact
/// state agrees with the reference's implied grasp.
pub fn compute_reward(err: &StepErrors, consistency: f64, cfg: &RewardConfig) -> f64 {
    cfg.w_task * (-cfg.c_t * err.e_t_cm).exp()
        + cfg.w_joint * (-cfg.c_j * err.e_j_cm).exp()
        + cfg.w_ft * (-cfg.c_ft * err.e_ft_cm).exp()
        + cfg.w_contact * consistency
}

/// Per-episode summary; one JSONL record in episode logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub task: Task,
    pub seed: u64,
    pub steps: usize,
    pub e_t_cm: f64,
    pub e_j_cm: f64,
    pub e_ft_cm: f64,
    pub success: bool,
    /// Terminated early on a threshold violation.
    pub failed: bool,
    #[serde(rename = "return")]
    pub ret: f64,
}

/// Episode metrics from a per-step error sequence.
///
/// Means run over all recorded steps. Success needs the episode to have
/// reached its horizon and every consecutive window of `window` steps to
/// have mean errors strictly below the thresholds; a trailing partial window
/// is judged on its own mean.
pub fn episode_metrics(
    task: Task,
    seed: u64,
    errors: &[StepErrors],
    completed: bool,
    ret: f64,
    th: &Thresholds,
    window: usize,
) -> EpisodeMetrics {
    let n = errors.len().max(1) as f64;
    let mean = |f: fn(&StepErrors) -> f64| errors.iter().map(f).sum::<f64>() / n;
    let windows_ok = errors.chunks(window.max(1)).all(|w| {
        let m = w.len() as f64;
        let avg = StepErrors {
            e_t_cm: w.iter().map(|e| e.e_t_cm).sum::<f64>() / m,
            e_j_cm: w.iter().map(|e| e.e_j_cm).sum::<f64>() / m,
            e_ft_cm: w.iter().map(|e| e.e_ft_cm).sum::<f64>() / m,
        };
        !avg.exceeds(th)
    });
    EpisodeMetrics {
        task,
        seed,
        steps: errors.len(),
        e_t_cm: mean(|e| e.e_t_cm),
        e_j_cm: mean(|e| e.e_j_cm),
        e_ft_cm: mean(|e| e.e_ft_cm),
        success: completed && windows_ok,
        failed: !completed,
        ret,
    }
}

/// Aggregate over a batch of episodes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub episodes: usize,
    /// Fraction in `[0, 1]`.
    pub sr: f64,
    pub e_t_cm: f64,
    pub e_j_cm: f64,
    pub e_ft_cm: f64,
    pub mean_return: f64,
}

pub fn batch_metrics(eps: &[EpisodeMetrics]) -> BatchMetrics {
    let n = eps.len();
    if n == 0 {
        return BatchMetrics::default();
    }
    let m = |f: fn(&EpisodeMetrics) -> f64| eps.iter().map(f).sum::<f64>() / n as f64;
    BatchMetrics {
        episodes: n,
        sr: eps.iter().filter(|e| e.success).count() as f64 / n as f64,
        e_t_cm: m(|e| e.e_t_cm),
        e_j_cm: m(|e| e.e_j_cm),
        e_ft_cm: m(|e| e.e_ft_cm),
        mean_return: m(|e| e.ret),
    }
}
