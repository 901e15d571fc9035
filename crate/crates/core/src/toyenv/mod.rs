//! Kinematic bimanual tracking environment.
//!
//! Two hands of planar finger chains on free-floating wrists, a tool and an
//! object. Actions are bounded per-step target deltas that the joints and
//! wrists reach exactly within the step (an idealized position controller).
//! Bodies are static unless grasped; a grasped body rides rigidly on the
//! grasping wrist. Rewards and metrics compare node positions with a
//! procedurally generated reference.

mod config;
pub mod kinematics;
mod metrics;
mod reference;

pub use config::{
    ActionLimits, EnvConfig, GeometrySwap, GraspConfig, NoiseConfig, ObjectShape, ObsScales, RewardConfig, Task,
    Thresholds,
};
pub use metrics::{batch_metrics, compute_reward, episode_metrics, BatchMetrics, EpisodeMetrics, StepErrors};
pub use reference::{generate_reference, grasp_pose, GraspPose, RefFrame, ReferenceTrajectory, REST_FLEX, TIP_GAP};

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{PolicySample, TokenMap, TokenSignature};
use crate::kingraph::{build_graph, detect_contacts, ContactSet, GraphError, GraphSpec, Hand, KinematicGraph, NodeId};
use crate::nncore::NnError;
use kinematics::{arr3, arr4, compose_pose, dist, relative_pose, uq, v3, HandGeometry, Quat, Vec3, IDENTITY};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid env config: {0}")]
    Config(String),
    #[error("infeasible reference: {0}")]
    Infeasible(String),
    #[error("action has {got} entries, expected {expected}")]
    ActionDim { expected: usize, got: usize },
    #[error("non-finite action entry at index {0}")]
    NonFiniteAction(usize),
    #[error("step called on a finished episode; call reset")]
    EpisodeDone,
    #[error("env state does not match the scene: {0}")]
    BadState(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Static per-morphology data shared by every env instance.
#[derive(Clone, Debug)]
pub struct Scene {
    pub graph: KinematicGraph,
    pub token_map: TokenMap,
    /// In graph spec order.
    pub hands: Vec<HandGeometry>,
    /// Per hand: palm node, then finger-major link nodes (FK order).
    pub hand_nodes: Vec<Vec<NodeId>>,
    pub tips: Vec<Vec<NodeId>>,
    pub tool: NodeId,
    pub object: Option<NodeId>,
    pub radii: Vec<f64>,
    pub node_radius: f64,
    pub tool_radius: f64,
    pub tool_length: f64,
    pub object_radius: f64,
}

impl Scene {
    /// Builds the graph after applying an optional geometry swap.
    pub fn new(spec: &GraphSpec, swap: Option<&GeometrySwap>) -> Result<Self, EnvError> {
        let mut spec = spec.clone();
        if let Some(s) = swap {
            s.validate()?;
            spec.geometry.tool_radius *= s.tool_scale;
            spec.geometry.tool_length *= s.tool_scale;
            spec.geometry.object_radius *= s.object_scale;
        }
        if !spec.tool {
            return Err(EnvError::Config("the environment needs a tool node".into()));
        }
        let graph = build_graph(&spec)?;
        let token_map = TokenMap::new(&graph)?;
        let mut hands = Vec::new();
        let mut hand_nodes = Vec::new();
        let mut tips = Vec::new();
        for hs in &spec.hands {
            let geom = HandGeometry::new(hs, &spec.geometry);
            let mut ids = vec![graph.palm(hs.side).expect("hand has a palm")];
            for f in 0..geom.fingers {
                for l in 0..geom.links {
                    ids.push(graph.link(hs.side, f, l).expect("link exists"));
                }
            }
            tips.push(graph.fingertips(hs.side));
            hand_nodes.push(ids);
            hands.push(geom);
        }
        Ok(Self {
            tool: graph.tool().expect("tool checked"),
            object: graph.object(),
            radii: graph.radii(),
            token_map,
            hands,
            hand_nodes,
            tips,
            node_radius: spec.node_radius,
            tool_radius: spec.geometry.tool_radius,
            tool_length: spec.geometry.tool_length,
            object_radius: spec.geometry.object_radius,
            graph,
        })
    }

    pub fn hand_index(&self, side: Hand) -> Option<usize> {
        self.hands.iter().position(|h| h.side == side)
    }

    /// `6 + F*L` per hand: wrist translation, wrist rotation vector, joints.
    pub fn action_dim(&self) -> usize {
        self.hands.iter().map(|h| 6 + h.n_joints()).sum()
    }

    fn action_offset(&self, hand: usize) -> usize {
        self.hands[..hand].iter().map(|h| 6 + h.n_joints()).sum()
    }

    /// Node poses for the given hand configurations and body positions.
    fn node_poses(
        &self,
        wrists: &[(Vec3, Quat)],
        joints: &[Vec<f64>],
        tool: (Vec3, Quat),
        object: Option<(Vec3, Quat)>,
    ) -> Vec<(Vec3, Quat)> {
        let mut out = vec![([0.0; 3], IDENTITY); self.graph.n()];
        for (hi, h) in self.hands.iter().enumerate() {
            for (id, pose) in self.hand_nodes[hi].iter().zip(h.fk(wrists[hi].0, wrists[hi].1, &joints[hi])) {
                out[id.0] = pose;
            }
        }
        out[self.tool.0] = tool;
        if let (Some(o), Some(p)) = (self.object, object) {
            out[o.0] = p;
        }
        out
    }

    pub(crate) fn node_positions(
        &self,
        wrists: &[(Vec3, Quat)],
        joints: &[Vec<f64>],
        tool: Vec3,
        object: Option<Vec3>,
    ) -> Vec<Vec3> {
        self.node_poses(wrists, joints, (tool, IDENTITY), object.map(|o| (o, IDENTITY)))
            .into_iter()
            .map(|p| p.0)
            .collect()
    }

    fn tips_touching(&self, hand: usize, body: NodeId, contacts: &ContactSet) -> usize {
        self.tips[hand].iter().filter(|&&t| contacts.contains(t, body)).count()
    }

    /// First hand (scene order) satisfying the grasp rule on `body`.
    fn grasping_hand(&self, cfg: &EnvConfig, body: NodeId, wrists: &[(Vec3, Quat)], nodes: &[Vec3], contacts: &ContactSet) -> Option<usize> {
        (0..self.hands.len()).find(|&hi| {
            self.tips_touching(hi, body, contacts) >= cfg.grasp.k && dist(wrists[hi].0, nodes[body.0]) < cfg.grasp.r_grasp
        })
    }

    pub(crate) fn implied_grasps(&self, cfg: &EnvConfig, wrists: &[(Vec3, Quat)], nodes: &[Vec3]) -> (Option<Hand>, Option<Hand>) {
        let contacts = detect_contacts(&self.graph, nodes, &self.radii, 0).expect("reference positions are finite");
        let side = |i: Option<usize>| i.map(|i| self.hands[i].side);
        (
            side(self.grasping_hand(cfg, self.tool, wrists, nodes, &contacts)),
            self.object
                .and_then(|o| side(self.grasping_hand(cfg, o, wrists, nodes, &contacts))),
        )
    }

    /// Tracking errors of `nodes` against a reference frame.
    pub fn step_errors(&self, nodes: &[Vec3], frame: &RefFrame) -> StepErrors {
        let cm = |id: NodeId| 100.0 * dist(nodes[id.0], frame.nodes[id.0]);
        let mut e_t = cm(self.tool);
        if let Some(o) = self.object {
            e_t = e_t.max(cm(o));
        }
        let all: Vec<NodeId> = self.hand_nodes.iter().flatten().copied().collect();
        let tips: Vec<NodeId> = self.tips.iter().flatten().copied().collect();
        let mean = |ids: &[NodeId]| ids.iter().map(|&i| cm(i)).sum::<f64>() / ids.len().max(1) as f64;
        StepErrors {
            e_t_cm: e_t,
            e_j_cm: mean(&all),
            e_ft_cm: mean(&tips),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandState {
    pub wrist_pos: Vec3,
    pub wrist_rot: Quat,
    /// Finger-major, radians.
    pub joints: Vec<f64>,
    pub wrist_lin_vel: Vec3,
    /// World frame.
    pub wrist_ang_vel: Vec3,
    pub joint_vel: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attachment {
    Free,
    GraspedBy { hand: Hand, rel_pos: Vec3, rel_rot: Quat },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyState {
    pub pos: Vec3,
    pub rot: Quat,
    pub lin_vel: Vec3,
    pub ang_vel: Vec3,
    pub attachment: Attachment,
    /// Consecutive steps with fewer than `k` fingertip contacts while grasped.
    pub release_count: usize,
}

impl BodyState {
    fn at_rest(pose: (Vec3, Quat)) -> Self {
        Self {
            pos: pose.0,
            rot: pose.1,
            lin_vel: [0.0; 3],
            ang_vel: [0.0; 3],
            attachment: Attachment::Free,
            release_count: 0,
        }
    }

    pub fn grasped_by(&self) -> Option<Hand> {
        match self.attachment {
            Attachment::Free => None,
            Attachment::GraspedBy { hand, .. } => Some(hand),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub t: usize,
    pub hands: Vec<HandState>,
    pub tool: BodyState,
    pub object: Option<BodyState>,
    /// Node positions and linear velocities, indexed by node id.
    pub positions: Vec<Vec3>,
    pub node_vel: Vec<Vec3>,
    pub contacts: ContactSet,
}

/// Outcome of one [`ToyEnv::step`].
#[derive(Clone, Debug)]
pub struct StepResult {
    pub sample: PolicySample,
    pub reward: f64,
    pub done: bool,
    pub errors: StepErrors,
    /// Present when `done`.
    pub episode: Option<EpisodeMetrics>,
}

/// Everything needed to continue an episode exactly; the reference is
/// regenerated from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSnapshot {
    pub seed: u64,
    pub state: EnvState,
    pub errors: Vec<StepErrors>,
    pub ret: f64,
    pub done: bool,
}

pub struct ToyEnv {
    scene: std::sync::Arc<Scene>,
    cfg: EnvConfig,
    seed: u64,
    reference: ReferenceTrajectory,
    state: EnvState,
    errors: Vec<StepErrors>,
    ret: f64,
    done: bool,
}

impl ToyEnv {
    /// Creates an env and resets it with `seed`.
    pub fn new(scene: std::sync::Arc<Scene>, cfg: EnvConfig, seed: u64) -> Result<Self, EnvError> {
        cfg.validate()?;
        let reference = generate_reference(&scene, &cfg, cfg.task, seed)?;
        let state = initial_state(&scene, &cfg, &reference, seed)?;
        Ok(Self {
            scene,
            cfg,
            seed,
            reference,
            state,
            errors: Vec::new(),
            ret: 0.0,
            done: false,
        })
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn reference(&self) -> &ReferenceTrajectory {
        &self.reference
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn action_dim(&self) -> usize {
        self.scene.action_dim()
    }

    /// New episode: regenerates the reference and samples the initial state.
    pub fn reset(&mut self, seed: u64) -> Result<PolicySample, EnvError> {
        self.reference = generate_reference(&self.scene, &self.cfg, self.cfg.task, seed)?;
        self.state = initial_state(&self.scene, &self.cfg, &self.reference, seed)?;
        self.seed = seed;
        self.errors.clear();
        self.ret = 0.0;
        self.done = false;
        Ok(self.observe())
    }

    pub fn snapshot(&self) -> EnvSnapshot {
        EnvSnapshot {
            seed: self.seed,
            state: self.state.clone(),
            errors: self.errors.clone(),
            ret: self.ret,
            done: self.done,
        }
    }

    pub fn restore(&mut self, snap: &EnvSnapshot) -> Result<(), EnvError> {
        if snap.state.hands.len() != self.scene.hands.len() || snap.state.positions.len() != self.scene.graph.n() {
            return Err(EnvError::BadState(format!(
                "snapshot has {} hands and {} nodes, scene has {} and {}",
                snap.state.hands.len(),
                snap.state.positions.len(),
                self.scene.hands.len(),
                self.scene.graph.n()
            )));
        }
        self.reference = generate_reference(&self.scene, &self.cfg, self.cfg.task, snap.seed)?;
        self.seed = snap.seed;
        self.state = snap.state.clone();
        self.errors = snap.errors.clone();
        self.ret = snap.ret;
        self.done = snap.done;
        Ok(())
    }

    /// Errors of the current state against the reference at the current step.
    pub fn current_errors(&self) -> StepErrors {
        self.scene.step_errors(&self.state.positions, self.reference.frame(self.state.t))
    }

    /// The action that drives every wrist and joint exactly onto the next
    /// reference frame (clamped to `[-1, 1]`).
    pub fn reference_action(&self) -> Vec<f64> {
        let next = self.reference.frame(self.state.t + 1);
        let l = &self.cfg.limits;
        let mut a = vec![0.0; self.action_dim()];
        for (hi, h) in self.state.hands.iter().enumerate() {
            let o = self.scene.action_offset(hi);
            let (wp, wr) = next.wrists[hi];
            for k in 0..3 {
                a[o + k] = (wp[k] - h.wrist_pos[k]) / l.wrist_pos;
            }
            let rotvec = (uq(h.wrist_rot).inverse() * uq(wr)).scaled_axis();
            for k in 0..3 {
                a[o + 3 + k] = rotvec[k] / l.wrist_rot;
            }
            for (j, (r, q)) in next.joints[hi].iter().zip(&h.joints).enumerate() {
                a[o + 6 + j] = (r - q) / l.joint;
            }
        }
        a.iter_mut().for_each(|x| *x = x.clamp(-1.0, 1.0));
        a
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        let dim = self.action_dim();
        if action.len() != dim {
            return Err(EnvError::ActionDim {
                expected: dim,
                got: action.len(),
            });
        }
        if let Some(i) = action.iter().position(|a| !a.is_finite()) {
            return Err(EnvError::NonFiniteAction(i));
        }
        let scene = self.scene.clone();
        let cfg = &self.cfg;
        let dt = cfg.dt;
        let l = &cfg.limits;
        let s = &mut self.state;

        for (hi, h) in s.hands.iter_mut().enumerate() {
            let a = &action[scene.action_offset(hi)..];
            let a = |k: usize| a[k].clamp(-1.0, 1.0);
            let mut lin = [0.0; 3];
            for k in 0..3 {
                let p = (h.wrist_pos[k] + a(k) * l.wrist_pos).clamp(-cfg.workspace, cfg.workspace);
                lin[k] = (p - h.wrist_pos[k]) / dt;
                h.wrist_pos[k] = p;
            }
            h.wrist_lin_vel = lin;
            let omega = Vector3::new(a(3), a(4), a(5)) * l.wrist_rot;
            let r_old = uq(h.wrist_rot);
            let r_new = r_old * UnitQuaternion::from_scaled_axis(omega);
            h.wrist_ang_vel = arr3(&(r_old * omega / dt));
            h.wrist_rot = arr4(&r_new);
            for j in 0..h.joints.len() {
                let q = (h.joints[j] + a(6 + j) * l.joint).clamp(cfg.joint_min, cfg.joint_max);
                h.joint_vel[j] = (q - h.joints[j]) / dt;
                h.joints[j] = q;
            }
        }

        let wrists: Vec<(Vec3, Quat)> = s.hands.iter().map(|h| (h.wrist_pos, h.wrist_rot)).collect();
        for body in std::iter::once(&mut s.tool).chain(s.object.as_mut()) {
            let (old_p, old_r) = (body.pos, body.rot);
            if let Attachment::GraspedBy { hand, rel_pos, rel_rot } = body.attachment {
                let hi = scene.hand_index(hand).expect("grasping hand exists");
                let (p, r) = compose_pose(wrists[hi], (rel_pos, rel_rot));
                body.pos = p;
                body.rot = r;
            }
            body.lin_vel = [0, 1, 2].map(|k| (body.pos[k] - old_p[k]) / dt);
            body.ang_vel = arr3(&((uq(old_r).inverse() * uq(body.rot)).scaled_axis() / dt));
        }

        let joints: Vec<Vec<f64>> = s.hands.iter().map(|h| h.joints.clone()).collect();
        let positions = scene.node_positions(&wrists, &joints, s.tool.pos, s.object.as_ref().map(|o| o.pos));
        for (v, (p, q)) in s.node_vel.iter_mut().zip(positions.iter().zip(&s.positions)) {
            *v = [0, 1, 2].map(|k| (p[k] - q[k]) / dt);
        }
        s.positions = positions;
        s.t += 1;
        s.contacts = detect_contacts(&scene.graph, &s.positions, &scene.radii, s.t)?;
        update_grasps(&scene, cfg, s, &wrists);

        let frame = self.reference.frame(s.t);
        let errors = scene.step_errors(&s.positions, frame);
        let consistency = contact_consistency(&scene, cfg, s, frame);
        let reward = compute_reward(&errors, consistency, &cfg.reward);
        self.errors.push(errors);
        self.ret += reward;
        let failed = errors.exceeds(&cfg.thresholds);
        self.done = failed || s.t >= cfg.horizon;
        let episode = self.done.then(|| {
            episode_metrics(
                cfg.task,
                self.seed,
                &self.errors,
                !failed,
                self.ret,
                &cfg.thresholds,
                cfg.sr_window,
            )
        });
        Ok(StepResult {
            sample: self.observe(),
            reward,
            done: self.done,
            errors,
            episode,
        })
    }

    /// Structured observation, flattened in token-map order.
    pub fn observe(&self) -> PolicySample {
        let scene = &*self.scene;
        let s = &self.state;
        let sc = &self.cfg.scales;
        let next = self.reference.frame(s.t + 1);
        let mut obs = Vec::with_capacity(scene.token_map.obs_width());
        let scaled = |v: Vec3, k: f64| v.map(|x| x * k);
        for tok in scene.token_map.tokens().iter().skip(1) {
            let node = tok.node.expect("non-policy token has a node");
            match tok.signature.expect("non-policy token has a signature") {
                TokenSignature::HandGlobal => {
                    let hi = scene.hand_nodes.iter().position(|ids| ids[0] == node).expect("palm of a hand");
                    let h = &s.hands[hi];
                    obs.extend(scaled(h.wrist_pos, sc.position));
                    obs.extend(h.wrist_rot);
                    obs.extend(scaled(h.wrist_lin_vel, sc.velocity));
                    obs.extend(scaled(h.wrist_ang_vel, sc.angular_velocity));
                    let tips = &scene.tips[hi];
                    let mut d = [0.0; 3];
                    for t in tips {
                        for k in 0..3 {
                            d[k] += (next.nodes[t.0][k] - s.positions[t.0][k]) / tips.len() as f64;
                        }
                    }
                    obs.extend(scaled(d, sc.delta));
                }
                TokenSignature::Palm | TokenSignature::Link(_) => {
                    let (hi, li) = scene
                        .hand_nodes
                        .iter()
                        .enumerate()
                        .find_map(|(hi, ids)| ids.iter().position(|&i| i == node).map(|li| (hi, li)))
                        .expect("hand node");
                    let (rot, ang) = link_orientation(&scene.hands[hi], &s.hands[hi], li);
                    obs.extend(scaled(s.positions[node.0], sc.position));
                    obs.extend(rot);
                    obs.extend(scaled(s.node_vel[node.0], sc.velocity));
                    obs.extend(scaled(ang, sc.angular_velocity));
                    obs.extend(scaled(kinematics::sub(next.nodes[node.0], s.positions[node.0]), sc.delta));
                    obs.push(f64::from(u8::from(s.contacts.degree(node) > 0)));
                }
                TokenSignature::Tool | TokenSignature::Object => {
                    let (body, target) = if node == scene.tool {
                        (&s.tool, next.tool)
                    } else {
                        (s.object.as_ref().expect("object state"), next.object.expect("object reference"))
                    };
                    obs.extend(scaled(body.pos, sc.position));
                    obs.extend(body.rot);
                    obs.extend(scaled(body.lin_vel, sc.velocity));
                    obs.extend(scaled(body.ang_vel, sc.angular_velocity));
                    obs.extend(scaled(kinematics::sub(target.0, body.pos), sc.delta));
                    obs.extend(arr4(&(uq(target.1) * uq(body.rot).inverse())));
                }
            }
        }
        debug_assert_eq!(obs.len(), scene.token_map.obs_width());
        PolicySample {
            obs,
            positions: s.positions.clone(),
            contacts: s.contacts.clone(),
        }
    }
}

/// World orientation and angular velocity of hand node `li` (0 is the palm).
fn link_orientation(geom: &HandGeometry, h: &HandState, li: usize) -> (Quat, Vec3) {
    let r = uq(h.wrist_rot);
    if li == 0 {
        return (h.wrist_rot, h.wrist_ang_vel);
    }
    let (f, l) = ((li - 1) / geom.links, (li - 1) % geom.links);
    let range = f * geom.links..f * geom.links + l + 1;
    let phi: f64 = h.joints[range.clone()].iter().sum();
    let phidot: f64 = h.joint_vel[range].iter().sum();
    let q = r * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), phi);
    let w = v3(h.wrist_ang_vel) + r * Vector3::new(0.0, phidot, 0.0);
    (arr4(&q), arr3(&w))
}

fn initial_state(scene: &Scene, cfg: &EnvConfig, reference: &ReferenceTrajectory, seed: u64) -> Result<EnvState, EnvError> {
    let f0 = &reference.frames[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xD1B5_4A32_D192_ED03).wrapping_add(17));
    let mut noise = |half: f64| if half > 0.0 { rng.random_range(-half..=half) } else { 0.0 };
    let hands: Vec<HandState> = scene
        .hands
        .iter()
        .enumerate()
        .map(|(hi, h)| {
            let (p, r) = f0.wrists[hi];
            HandState {
                wrist_pos: p.map(|x| x + noise(cfg.noise.wrist_pos)),
                wrist_rot: r,
                joints: f0.joints[hi]
                    .iter()
                    .map(|q| (q + noise(cfg.noise.joint)).clamp(cfg.joint_min, cfg.joint_max))
                    .collect(),
                wrist_lin_vel: [0.0; 3],
                wrist_ang_vel: [0.0; 3],
                joint_vel: vec![0.0; h.n_joints()],
            }
        })
        .collect();
    let mut state = EnvState {
        t: 0,
        tool: BodyState::at_rest(f0.tool),
        object: f0.object.map(BodyState::at_rest),
        positions: Vec::new(),
        node_vel: vec![[0.0; 3]; scene.graph.n()],
        contacts: ContactSet::new(0),
        hands,
    };
    let wrists: Vec<(Vec3, Quat)> = state.hands.iter().map(|h| (h.wrist_pos, h.wrist_rot)).collect();
    let joints: Vec<Vec<f64>> = state.hands.iter().map(|h| h.joints.clone()).collect();
    state.positions = scene.node_positions(&wrists, &joints, state.tool.pos, state.object.as_ref().map(|o| o.pos));
    state.contacts = detect_contacts(&scene.graph, &state.positions, &scene.radii, 0)?;
    update_grasps(scene, cfg, &mut state, &wrists);
    Ok(state)
}

/// Grasp onset and hysteretic release for every body.
fn update_grasps(scene: &Scene, cfg: &EnvConfig, s: &mut EnvState, wrists: &[(Vec3, Quat)]) {
    let ids: Vec<NodeId> = std::iter::once(scene.tool).chain(scene.object).collect();
    for id in ids {
        let body = if id == scene.tool {
            &mut s.tool
        } else {
            s.object.as_mut().expect("object state")
        };
        match body.attachment {
            Attachment::Free => {
                let hi = (0..scene.hands.len()).find(|&hi| {
                    scene.tips_touching(hi, id, &s.contacts) >= cfg.grasp.k && dist(wrists[hi].0, body.pos) < cfg.grasp.r_grasp
                });
                if let Some(hi) = hi {
                    let (rel_pos, rel_rot) = relative_pose(wrists[hi], (body.pos, body.rot));
                    body.attachment = Attachment::GraspedBy {
                        hand: scene.hands[hi].side,
                        rel_pos,
                        rel_rot,
                    };
                    body.release_count = 0;
                }
            }
            Attachment::GraspedBy { hand, .. } => {
                let hi = scene.hand_index(hand).expect("grasping hand exists");
                if scene.tips_touching(hi, id, &s.contacts) >= cfg.grasp.k {
                    body.release_count = 0;
                } else {
                    body.release_count += 1;
                    if body.release_count >= cfg.grasp.release_steps {
                        body.attachment = Attachment::Free;
                        body.release_count = 0;
                    }
                }
            }
        }
    }
}

fn contact_consistency(scene: &Scene, cfg: &EnvConfig, s: &EnvState, frame: &RefFrame) -> f64 {
    let mut bodies = vec![(scene.tool, frame.tool_grasp)];
    if let Some(o) = scene.object {
        bodies.push((o, frame.object_grasp));
    }
    let ok = bodies
        .iter()
        .filter(|(id, implied)| match implied {
            None => true,
            Some(h) => scene
                .hand_index(*h)
                .is_some_and(|hi| scene.tips_touching(hi, *id, &s.contacts) >= cfg.grasp.k),
        })
        .count();
    ok as f64 / bodies.len() as f64
}

#[cfg(test)]
mod tests;
