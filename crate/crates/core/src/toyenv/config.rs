use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::EnvError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    ReachGrasp,
    CarryTool,
    ToolToObject,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::ReachGrasp, Task::CarryTool, Task::ToolToObject];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::ReachGrasp => "reach-grasp",
            Task::CarryTool => "carry-tool",
            Task::ToolToObject => "tool-to-object",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown task `{s}` (expected reach-grasp, carry-tool or tool-to-object)"))
    }
}

/// Success gate and failure termination, in centimeters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub e_t_cm: f64,
    pub e_j_cm: f64,
    pub e_ft_cm: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            e_t_cm: 3.0,
            e_j_cm: 5.0,
            e_ft_cm: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraspConfig {
    /// Fingertips of one hand that must touch a body to grasp it.
    pub k: usize,
    /// Maximum wrist-to-body distance for a grasp, meters.
    pub r_grasp: f64,
    /// Consecutive steps below `k` contacts before release.
    pub release_steps: usize,
}

impl Default for GraspConfig {
    fn default() -> Self {
        Self {
            k: 2,
            r_grasp: 0.06,
            release_steps: 5,
        }
    }
}

/// `w_task exp(-c_t E_t) + w_joint exp(-c_j E_j) + w_ft exp(-c_ft E_ft) + w_contact * consistency`,
/// errors in centimeters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub w_task: f64,
    pub w_joint: f64,
    pub w_ft: f64,
    pub w_contact: f64,
    pub c_t: f64,
    pub c_j: f64,
    pub c_ft: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            w_task: 0.3,
            w_joint: 0.3,
            w_ft: 0.3,
            w_contact: 0.1,
            c_t: 1.0,
            c_j: 1.0,
            c_ft: 1.0,
        }
    }
}

impl RewardConfig {
    pub fn total_weight(&self) -> f64 {
        self.w_task + self.w_joint + self.w_ft + self.w_contact
    }
}

/// Largest per-step target change an action of magnitude 1 produces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActionLimits {
    pub wrist_pos: f64,
    pub wrist_rot: f64,
    pub joint: f64,
}

impl Default for ActionLimits {
    fn default() -> Self {
        Self {
            wrist_pos: 0.008,
            wrist_rot: 0.03,
            joint: 0.1,
        }
    }
}

/// Fixed observation scales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObsScales {
    /// Applied to world positions (meters).
    pub position: f64,
    /// Applied to linear velocities (m/s).
    pub velocity: f64,
    /// Applied to angular velocities (rad/s).
    pub angular_velocity: f64,
    /// Applied to reference position deltas (meters).
    pub delta: f64,
}

impl Default for ObsScales {
    fn default() -> Self {
        Self {
            position: 10.0,
            velocity: 2.0,
            angular_velocity: 0.2,
            delta: 100.0,
        }
    }
}

/// Uniform reset noise half-widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub wrist_pos: f64,
    pub joint: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            wrist_pos: 0.005,
            joint: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectShape {
    Sphere,
}

/// Eval-time geometry change applied before the reference is generated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometrySwap {
    /// Scales tool radius and length.
    pub tool_scale: f64,
    /// Scales the object radius.
    pub object_scale: f64,
    pub object_shape: ObjectShape,
}

impl Default for GeometrySwap {
    fn default() -> Self {
        Self {
            tool_scale: 1.0,
            object_scale: 1.0,
            object_shape: ObjectShape::Sphere,
        }
    }
}

impl GeometrySwap {
    /// Parses `key=value[,key=value...]`.
    pub fn parse(s: &str) -> Result<Self, EnvError> {
        let mut out = Self::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| EnvError::Config(format!("geometry swap `{part}` is not key=value")))?;
            let num = || {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| EnvError::Config(format!("geometry swap `{k}`: `{v}` is not a number")))
            };
            match k.trim() {
                "tool_scale" => out.tool_scale = num()?,
                "object_scale" => out.object_scale = num()?,
                "object_shape" => {
                    out.object_shape = match v.trim() {
                        "sphere" => ObjectShape::Sphere,
                        other => return Err(EnvError::Config(format!("unsupported object_shape `{other}`"))),
                    }
                }
                other => return Err(EnvError::Config(format!("unknown geometry swap key `{other}`"))),
            }
        }
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        for (k, v) in [("tool_scale", self.tool_scale), ("object_scale", self.object_scale)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(EnvError::Config(format!("geometry_swap.{k} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub task: Task,
    /// Episode length in steps.
    pub horizon: usize,
    pub dt: f64,
    pub noise: NoiseConfig,
    pub thresholds: Thresholds,
    /// Success needs every consecutive window of this many steps to have mean errors below threshold.
    pub sr_window: usize,
    pub grasp: GraspConfig,
    pub reward: RewardConfig,
    pub limits: ActionLimits,
    pub scales: ObsScales,
    /// Joint angle range, radians.
    pub joint_min: f64,
    pub joint_max: f64,
    /// Wrist positions are clamped to this box half-width, meters.
    pub workspace: f64,
    pub geometry_swap: Option<GeometrySwap>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            task: Task::ReachGrasp,
            horizon: 300,
            dt: 1.0 / 60.0,
            noise: NoiseConfig::default(),
            thresholds: Thresholds::default(),
            sr_window: 1,
            grasp: GraspConfig::default(),
            reward: RewardConfig::default(),
            limits: ActionLimits::default(),
            scales: ObsScales::default(),
            joint_min: -0.3,
            joint_max: 1.6,
            workspace: 1.0,
            geometry_swap: None,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |field: &str, why: &str| Err(EnvError::Config(format!("env.{field}: {why}")));
        if self.horizon < 10 {
            return bad("horizon", "must be at least 10");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt", "must be positive");
        }
        if self.sr_window == 0 {
            return bad("sr_window", "must be at least 1");
        }
        if self.grasp.k == 0 {
            return bad("grasp.k", "must be at least 1");
        }
        if !(self.grasp.r_grasp > 0.0) {
            return bad("grasp.r_grasp", "must be positive");
        }
        let r = &self.reward;
        for (k, v) in [
            ("w_task", r.w_task),
            ("w_joint", r.w_joint),
            ("w_ft", r.w_ft),
            ("w_contact", r.w_contact),
            ("c_t", r.c_t),
            ("c_j", r.c_j),
            ("c_ft", r.c_ft),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("reward.{k}"), "must be a non-negative number");
            }
        }
        if !(r.total_weight() > 0.0) {
            return bad("reward", "weights must not all be zero");
        }
        let l = &self.limits;
        if !(l.wrist_pos > 0.0 && l.wrist_rot > 0.0 && l.joint > 0.0) {
            return bad("limits", "all limits must be positive");
        }
        let t = &self.thresholds;
        if !(t.e_t_cm > 0.0 && t.e_j_cm > 0.0 && t.e_ft_cm > 0.0) {
            return bad("thresholds", "all thresholds must be positive");
        }
        if !(self.noise.wrist_pos >= 0.0 && self.noise.joint >= 0.0) {
            return bad("noise", "must be non-negative");
        }
        if !(self.joint_min < self.joint_max) {
            return bad("joint_min", "must be below joint_max");
        }
        if !(self.workspace > 0.0) {
            return bad("workspace", "must be positive");
        }
        if let Some(g) = &self.geometry_swap {
            g.validate()?;
        }
        Ok(())
    }
}
