use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{EnvConfig, Task};
use super::kinematics::{arr3, compose_pose, relative_pose, HandGeometry, Quat, Vec3, IDENTITY};
use super::{EnvError, Scene};
use crate::kingraph::Hand;

/// Resting flexion of every finger joint, radians.
pub const REST_FLEX: f64 = 0.15;
/// Tool tip stops this far from the object surface in `tool-to-object`.
pub const TIP_GAP: f64 = 0.005;

/// Reference at one timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefFrame {
    /// Per hand in scene order.
    pub wrists: Vec<(Vec3, Quat)>,
    pub joints: Vec<Vec<f64>>,
    pub tool: (Vec3, Quat),
    pub object: Option<(Vec3, Quat)>,
    /// Hand the reference implies is grasping the tool / the object.
    pub tool_grasp: Option<Hand>,
    pub object_grasp: Option<Hand>,
    /// Every graph node, indexed by node id.
    pub nodes: Vec<Vec3>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTrajectory {
    pub task: Task,
    pub seed: u64,
    /// `horizon + 1` frames; frame 0 is the initial state.
    pub frames: Vec<RefFrame>,
}

impl ReferenceTrajectory {
    pub fn horizon(&self) -> usize {
        self.frames.len() - 1
    }

    /// Frame `t`, clamped to the last frame.
    pub fn frame(&self, t: usize) -> &RefFrame {
        &self.frames[t.min(self.frames.len() - 1)]
    }
}

/// Finger posture that closes around a body, and the wrist-frame point the
/// body's center must occupy.
#[derive(Clone, Debug, PartialEq)]
pub struct GraspPose {
    pub joints: Vec<f64>,
    pub point: Vec3,
}

/// Searches total curl for a posture where the `k` central fingertips all
/// touch a body of radius `body_radius` centered at a point within reach of the wrist.
pub fn grasp_pose(hand: &HandGeometry, node_radius: f64, body_radius: f64, cfg: &EnvConfig) -> Result<GraspPose, EnvError> {
    let k = cfg.grasp.k;
    if hand.fingers < k {
        return Err(EnvError::Infeasible(format!(
            "{} hand has {} fingers but a grasp needs {k}",
            hand.side.as_str(),
            hand.fingers
        )));
    }
    let first = (hand.fingers - k) / 2;
    let reach = 0.85 * (node_radius + body_radius);
    let max_wrist = 0.8 * cfg.grasp.r_grasp;
    let mut best: Option<(f64, GraspPose)> = None;
    for step in 0..=60 {
        let curl = 0.6 + 0.05 * step as f64;
        let theta = curl / hand.links as f64;
        if theta > cfg.joint_max || theta < cfg.joint_min {
            continue;
        }
        let joints = vec![theta; hand.n_joints()];
        let tips = hand.local_tips(&joints);
        let chosen = &tips[first..first + k];
        let mut g = chosen.iter().fold(Vector3::zeros(), |a, t| a + t) / k as f64;
        if g.norm() > max_wrist {
            g *= max_wrist / g.norm();
        }
        let worst = chosen.iter().map(|t| (t - g).norm()).fold(0.0, f64::max);
        if worst <= reach && best.as_ref().is_none_or(|(w, _)| worst < *w) {
            best = Some((worst, GraspPose { joints, point: arr3(&g) }));
        }
    }
    best.map(|(_, p)| p).ok_or_else(|| {
        EnvError::Infeasible(format!(
            "no grasp posture of the {} hand reaches a body of radius {body_radius:.4} m within r_grasp",
            hand.side.as_str()
        ))
    })
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Progress in `[0, 1]` of a move that runs from `t0` to `t1` (fractions of the horizon).
fn phase(t: usize, horizon: usize, t0: f64, t1: f64) -> f64 {
    let s = t as f64 / horizon as f64;
    smoothstep((s - t0) / (t1 - t0))
}

fn lerp3(a: Vec3, b: Vec3, u: f64) -> Vec3 {
    [a[0] + (b[0] - a[0]) * u, a[1] + (b[1] - a[1]) * u, a[2] + (b[2] - a[2]) * u]
}

fn lerpv(a: &[f64], b: &[f64], u: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + (y - x) * u).collect()
}

fn bezier(p0: Vec3, p1: Vec3, p2: Vec3, u: f64) -> Vec3 {
    let (a, b, c) = ((1.0 - u) * (1.0 - u), 2.0 * u * (1.0 - u), u * u);
    [0, 1, 2].map(|i| a * p0[i] + b * p1[i] + c * p2[i])
}

fn jitter(rng: &mut ChaCha8Rng, base: Vec3, half: Vec3) -> Vec3 {
    [0, 1, 2].map(|i| base[i] + if half[i] > 0.0 { rng.random_range(-half[i]..=half[i]) } else { 0.0 })
}

fn start_wrist(side: Hand) -> Vec3 {
    match side {
        Hand::Right => [-0.02, -0.20, 0.14],
        Hand::Left => [-0.02, 0.20, 0.14],
    }
}

/// Per-hand plan: wrist position and joints as functions of time.
type HandPlan = Box<dyn Fn(usize) -> (Vec3, Vec<f64>)>;

/// Deterministic in `(task, seed)` for a given scene and config.
pub fn generate_reference(scene: &Scene, cfg: &EnvConfig, task: Task, seed: u64) -> Result<ReferenceTrajectory, EnvError> {
    let horizon = cfg.horizon;
    if horizon < 10 {
        return Err(EnvError::Config(format!("horizon {horizon} is below the minimum of 10")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (task as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let node_r = scene.node_radius;
    let right = scene.hand_index(Hand::Right).ok_or_else(|| EnvError::Infeasible("tasks need a right hand".into()))?;
    let left = scene.hand_index(Hand::Left);
    if task == Task::ToolToObject && (left.is_none() || scene.object.is_none()) {
        return Err(EnvError::Infeasible("tool-to-object needs a left hand and an object".into()));
    }

    let tool_start = jitter(&mut rng, [0.10, -0.08, 0.03], [0.015, 0.015, 0.0]);
    let object_start = jitter(&mut rng, [0.10, 0.08, 0.04], [0.015, 0.015, 0.0]);
    let wrist_starts: Vec<Vec3> = scene
        .hands
        .iter()
        .map(|h| jitter(&mut rng, start_wrist(h.side), [0.01, 0.01, 0.01]))
        .collect();
    let rest: Vec<Vec<f64>> = scene.hands.iter().map(|h| vec![REST_FLEX; h.n_joints()]).collect();
    let tool_grasp = grasp_pose(&scene.hands[right], node_r, scene.tool_radius, cfg)?;
    let object_grasp = match (left, scene.object) {
        (Some(l), Some(_)) => Some(grasp_pose(&scene.hands[l], node_r, scene.object_radius, cfg)?),
        _ => None,
    };

    let mut plans: Vec<HandPlan> = Vec::new();
    let tool_path: Box<dyn Fn(usize) -> Vec3>;
    let object_path: Box<dyn Fn(usize) -> Vec3>;
    match task {
        Task::ReachGrasp => {
            for (i, h) in scene.hands.iter().enumerate() {
                let (target, grasp) = match (h.side, &object_grasp) {
                    (Hand::Right, _) => (tool_start, Some(tool_grasp.clone())),
                    (Hand::Left, Some(g)) => (object_start, Some(g.clone())),
                    _ => (wrist_starts[i], None),
                };
                let start = wrist_starts[i];
                let r = rest[i].clone();
                match grasp {
                    Some(g) => {
                        let pre = [0, 1, 2].map(|k| target[k] - g.point[k]);
                        plans.push(Box::new(move |t| {
                            let w = lerp3(start, pre, phase(t, horizon, 0.0, 0.6));
                            let j = lerpv(&r, &g.joints, phase(t, horizon, 0.6, 0.85));
                            (w, j)
                        }));
                    }
                    None => plans.push(Box::new(move |_| (start, r.clone()))),
                }
            }
            tool_path = Box::new(move |_| tool_start);
            object_path = Box::new(move |_| object_start);
        }
        Task::CarryTool => {
            let d = [
                rng.random_range(0.04..=0.08),
                rng.random_range(0.06..=0.10),
                rng.random_range(0.04..=0.08),
            ];
            let end = [0, 1, 2].map(|k| tool_start[k] + d[k]);
            let mid = [0, 1, 2].map(|k| 0.5 * (tool_start[k] + end[k]) + if k == 2 { 0.03 } else { 0.0 });
            let path = move |t: usize| bezier(tool_start, mid, end, phase(t, horizon, 0.1, 0.9));
            for (i, h) in scene.hands.iter().enumerate() {
                if h.side == Hand::Right {
                    let g = tool_grasp.clone();
                    plans.push(Box::new(move |t| {
                        let p = path(t);
                        ([0, 1, 2].map(|k| p[k] - g.point[k]), g.joints.clone())
                    }));
                } else {
                    let (s, r) = (wrist_starts[i], rest[i].clone());
                    plans.push(Box::new(move |_| (s, r.clone())));
                }
            }
            tool_path = Box::new(path);
            object_path = Box::new(move |_| object_start);
        }
        Task::ToolToObject => {
            let og = object_grasp.clone().expect("checked above");
            let meet = jitter(&mut rng, [0.16, 0.0, 0.10], [0.01, 0.01, 0.01]);
            let tip_offset = scene.object_radius + TIP_GAP + scene.tool_length / 2.0;
            let tool_end = [meet[0] - tip_offset, meet[1], meet[2]];
            let obj = move |t: usize| lerp3(object_start, meet, phase(t, horizon, 0.1, 0.8));
            let tool = move |t: usize| lerp3(tool_start, tool_end, phase(t, horizon, 0.1, 0.8));
            for h in &scene.hands {
                let g = if h.side == Hand::Right { tool_grasp.clone() } else { og.clone() };
                let right_hand = h.side == Hand::Right;
                plans.push(Box::new(move |t| {
                    let p = if right_hand { tool(t) } else { obj(t) };
                    ([0, 1, 2].map(|k| p[k] - g.point[k]), g.joints.clone())
                }));
            }
            tool_path = Box::new(tool);
            object_path = Box::new(obj);
        }
    }

    let mut frames = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        let mut wrists = Vec::with_capacity(plans.len());
        let mut joints = Vec::with_capacity(plans.len());
        for p in &plans {
            let (w, j) = p(t);
            wrists.push((w, IDENTITY));
            joints.push(j);
        }
        let tool = (tool_path(t), IDENTITY);
        let object = scene.object.map(|_| (object_path(t), IDENTITY));
        let nodes = scene.node_positions(&wrists, &joints, tool.0, object.map(|o| o.0));
        let (tg, og) = scene.implied_grasps(cfg, &wrists, &nodes);
        frames.push(RefFrame {
            wrists,
            joints,
            tool,
            object,
            tool_grasp: tg,
            object_grasp: og,
            nodes,
        });
    }
    // grasped bodies ride on the wrist exactly as the env attaches them
    attach_bodies(scene, &mut frames);
    check_feasible(scene, cfg, &frames)?;
    Ok(ReferenceTrajectory { task, seed, frames })
}

/// Re-expresses grasped body poses through the relative pose captured at grasp
/// onset, reproducing the env's attachment arithmetic bit-for-bit.
fn attach_bodies(scene: &Scene, frames: &mut [RefFrame]) {
    let mut tool_rel: Option<(usize, (Vec3, Quat))> = None;
    let mut object_rel: Option<(usize, (Vec3, Quat))> = None;
    for f in frames.iter_mut() {
        let mut changed = false;
        match (f.tool_grasp, tool_rel) {
            (Some(h), Some((hi, rel))) if scene.hand_index(h) == Some(hi) => {
                f.tool = compose_pose(f.wrists[hi], rel);
                changed = true;
            }
            (Some(h), _) => {
                let hi = scene.hand_index(h).expect("grasping hand exists");
                tool_rel = Some((hi, relative_pose(f.wrists[hi], f.tool)));
            }
            (None, _) => tool_rel = None,
        }
        if let Some(obj) = f.object {
            match (f.object_grasp, object_rel) {
                (Some(h), Some((hi, rel))) if scene.hand_index(h) == Some(hi) => {
                    f.object = Some(compose_pose(f.wrists[hi], rel));
                    changed = true;
                }
                (Some(h), _) => {
                    let hi = scene.hand_index(h).expect("grasping hand exists");
                    object_rel = Some((hi, relative_pose(f.wrists[hi], obj)));
                }
                (None, _) => object_rel = None,
            }
        }
        if changed {
            f.nodes[scene.tool.0] = f.tool.0;
            if let (Some(o), Some(p)) = (scene.object, f.object) {
                f.nodes[o.0] = p.0;
            }
        }
    }
}

fn check_feasible(scene: &Scene, cfg: &EnvConfig, frames: &[RefFrame]) -> Result<(), EnvError> {
    let l = &cfg.limits;
    for (t, w) in frames.windows(2).enumerate() {
        for (hi, h) in scene.hands.iter().enumerate() {
            let (a, b) = (w[0].wrists[hi].0, w[1].wrists[hi].0);
            let dp = (0..3).map(|k| (b[k] - a[k]).abs()).fold(0.0, f64::max);
            if dp > 0.95 * l.wrist_pos {
                return Err(EnvError::Infeasible(format!(
                    "{} wrist moves {dp:.4} m between steps {t} and {} (limit {}); lengthen the horizon",
                    h.side.as_str(),
                    t + 1,
                    l.wrist_pos
                )));
            }
            let dj = w[0].joints[hi]
                .iter()
                .zip(&w[1].joints[hi])
                .map(|(x, y)| (y - x).abs())
                .fold(0.0, f64::max);
            if dj > 0.95 * l.joint {
                return Err(EnvError::Infeasible(format!(
                    "{} joints move {dj:.4} rad between steps {t} and {} (limit {})",
                    h.side.as_str(),
                    t + 1,
                    l.joint
                )));
            }
        }
    }
    for f in frames {
        for (p, _) in &f.wrists {
            if p.iter().any(|x| x.abs() > cfg.workspace) {
                return Err(EnvError::Infeasible(format!("reference wrist {p:?} leaves the workspace")));
            }
        }
    }
    Ok(())
}
