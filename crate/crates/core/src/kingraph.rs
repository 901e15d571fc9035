//! Physical graph of the bimanual system: body nodes, static bone edges,
//! per-step contact edges, hop distances and the anatomical relation masks.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Hop distance between nodes in different bone components.
pub const HOP_INF: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid graph spec: field `{field}`: {reason}")]
    Validation { field: String, reason: String },
    #[error("duplicate node declaration: {0}")]
    Duplicate(String),
    #[error("node id {0} out of range for a graph with {1} nodes")]
    BadNode(usize, usize),
    #[error("self contact on node {0}")]
    SelfContact(usize),
    #[error("non-finite position for node `{0}`")]
    NonFinitePosition(String),
    #[error("non-positive radius for node `{0}`")]
    BadRadius(String),
    #[error("unknown node name `{0}`")]
    UnknownName(String),
    #[error("graph spec parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeRole {
    PalmRoot,
    FingerLink,
    Tool,
    Object,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hand {
    Right,
    Left,
}

impl Hand {
    pub fn as_str(self) -> &'static str {
        match self {
            Hand::Right => "right",
            Hand::Left => "left",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyNode {
    pub id: NodeId,
    pub role: NodeRole,
    pub hand: Option<Hand>,
    pub finger_index: Option<usize>,
    /// 0 is the most proximal link; increases toward the fingertip.
    pub link_level: Option<usize>,
    pub name: String,
    /// Contact radius in meters.
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum EdgeType {
    Disconnected = 0,
    Bone = 1,
    Contact = 2,
    SelfLoop = 3,
}

impl EdgeType {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandSpec {
    pub side: Hand,
    pub fingers: i64,
    pub links_per_finger: i64,
}

/// Rest geometry of the toy hands and the free bodies, in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometrySpec {
    /// Distance from the wrist to the row of finger bases along the hand's forward axis.
    pub palm_length: f64,
    /// Lateral spacing between neighbouring finger bases.
    pub finger_spacing: f64,
    pub link_length: f64,
    pub tool_radius: f64,
    pub tool_length: f64,
    pub object_radius: f64,
}

impl Default for GeometrySpec {
    fn default() -> Self {
        Self {
            palm_length: 0.04,
            finger_spacing: 0.02,
            link_length: 0.025,
            tool_radius: 0.02,
            tool_length: 0.12,
            object_radius: 0.03,
        }
    }
}

/// Declarative morphology description (the graph spec file).
///
/// ```toml
/// node_radius = 0.01
/// tool = true
/// object = true
///
/// [[hands]]
/// side = "right"
/// fingers = 3
/// links_per_finger = 3
///
/// [[hands]]
/// side = "left"
/// fingers = 3
/// links_per_finger = 3
///
/// [geometry]          # optional, all keys optional
/// palm_length = 0.04
/// finger_spacing = 0.02
/// link_length = 0.025
/// tool_radius = 0.02
/// tool_length = 0.12
/// object_radius = 0.03
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub hands: Vec<HandSpec>,
    #[serde(default)]
    pub tool: bool,
    #[serde(default)]
    pub object: bool,
    pub node_radius: f64,
    #[serde(default)]
    pub geometry: GeometrySpec,
}

impl GraphSpec {
    /// Two identical hands with `fingers` x `links` chains plus tool and object.
    pub fn bimanual(fingers: usize, links: usize) -> Self {
        let hand = |side| HandSpec {
            side,
            fingers: fingers as i64,
            links_per_finger: links as i64,
        };
        Self {
            hands: vec![hand(Hand::Right), hand(Hand::Left)],
            tool: true,
            object: true,
            node_radius: 0.01,
            geometry: GeometrySpec::default(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, GraphError> {
        let spec: Self = toml::from_str(s).map_err(|e| GraphError::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, GraphError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("graph spec serializes")
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let bad = |field: String, reason: &str| GraphError::Validation {
            field,
            reason: reason.to_string(),
        };
        if self.hands.is_empty() {
            return Err(bad("hands".into(), "at least one hand is required"));
        }
        let mut sides = BTreeSet::new();
        for (i, h) in self.hands.iter().enumerate() {
            if !sides.insert(h.side) {
                return Err(GraphError::Duplicate(format!("hand `{}`", h.side.as_str())));
            }
            if h.fingers <= 0 {
                return Err(bad(format!("hands[{i}].fingers"), "must be >= 1"));
            }
            if h.links_per_finger <= 0 {
                return Err(bad(format!("hands[{i}].links_per_finger"), "must be >= 1"));
            }
        }
        if !(self.node_radius > 0.0 && self.node_radius.is_finite()) {
            return Err(bad("node_radius".into(), "must be a positive number"));
        }
        let g = &self.geometry;
        for (name, v) in [
            ("geometry.palm_length", g.palm_length),
            ("geometry.finger_spacing", g.finger_spacing),
            ("geometry.link_length", g.link_length),
            ("geometry.tool_radius", g.tool_radius),
            ("geometry.tool_length", g.tool_length),
            ("geometry.object_radius", g.object_radius),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad(name.into(), "must be a positive number"));
            }
        }
        Ok(())
    }
}

/// Contact pairs at one timestep; stored as ordered pairs `(min, max)`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContactSet {
    pairs: BTreeSet<(NodeId, NodeId)>,
    pub step: usize,
}

impl ContactSet {
    pub fn new(step: usize) -> Self {
        Self {
            pairs: BTreeSet::new(),
            step,
        }
    }

    fn key(u: NodeId, v: NodeId) -> (NodeId, NodeId) {
        if u <= v {
            (u, v)
        } else {
            (v, u)
        }
    }

    pub fn insert(&mut self, u: NodeId, v: NodeId) -> Result<bool, GraphError> {
        if u == v {
            return Err(GraphError::SelfContact(u.0));
        }
        Ok(self.pairs.insert(Self::key(u, v)))
    }

    pub fn remove(&mut self, u: NodeId, v: NodeId) -> bool {
        self.pairs.remove(&Self::key(u, v))
    }

    pub fn contains(&self, u: NodeId, v: NodeId) -> bool {
        u != v && self.pairs.contains(&Self::key(u, v))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.pairs.iter().copied()
    }

    /// Number of contacts that involve `node`.
    pub fn degree(&self, node: NodeId) -> usize {
        self.pairs.iter().filter(|(a, b)| *a == node || *b == node).count()
    }
}

/// Boolean node-space relations used by the anatomical bias.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationMasks {
    pub n: usize,
    /// `hop <= 1`, row-major `n x n`.
    pub serial: Vec<bool>,
    /// Same hand, same link level, different finger, row-major `n x n`.
    pub synergy: Vec<bool>,
}

impl RelationMasks {
    pub fn serial(&self, u: NodeId, v: NodeId) -> bool {
        self.serial[u.0 * self.n + v.0]
    }

    pub fn synergy(&self, u: NodeId, v: NodeId) -> bool {
        self.synergy[u.0 * self.n + v.0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KinematicGraph {
    spec: GraphSpec,
    nodes: Vec<BodyNode>,
    bone_edges: Vec<(NodeId, NodeId)>,
    bone: Vec<bool>,
    hop: Vec<u32>,
}

/// Builds nodes (hands in spec order: palm, then finger-major links; tool; object),
/// bone edges and the BFS hop matrix.
pub fn build_graph(spec: &GraphSpec) -> Result<KinematicGraph, GraphError> {
    spec.validate()?;
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    let r = spec.node_radius;
    for h in &spec.hands {
        let palm = NodeId(nodes.len());
        nodes.push(BodyNode {
            id: palm,
            role: NodeRole::PalmRoot,
            hand: Some(h.side),
            finger_index: None,
            link_level: None,
            name: format!("{}.palm", h.side.as_str()),
            radius: r,
        });
        for f in 0..h.fingers as usize {
            let mut parent = palm;
            for l in 0..h.links_per_finger as usize {
                let id = NodeId(nodes.len());
                nodes.push(BodyNode {
                    id,
                    role: NodeRole::FingerLink,
                    hand: Some(h.side),
                    finger_index: Some(f),
                    link_level: Some(l),
                    name: format!("{}.f{f}.l{l}", h.side.as_str()),
                    radius: r,
                });
                edges.push((parent, id));
                parent = id;
            }
        }
    }
    if spec.tool {
        let id = NodeId(nodes.len());
        nodes.push(BodyNode {
            id,
            role: NodeRole::Tool,
            hand: None,
            finger_index: None,
            link_level: None,
            name: "tool".into(),
            radius: spec.geometry.tool_radius,
        });
    }
    if spec.object {
        let id = NodeId(nodes.len());
        nodes.push(BodyNode {
            id,
            role: NodeRole::Object,
            hand: None,
            finger_index: None,
            link_level: None,
            name: "object".into(),
            radius: spec.geometry.object_radius,
        });
    }
    KinematicGraph::from_parts(spec.clone(), nodes, edges)
}

impl KinematicGraph {
    fn from_parts(
        spec: GraphSpec,
        nodes: Vec<BodyNode>,
        edges: Vec<(NodeId, NodeId)>,
    ) -> Result<Self, GraphError> {
        let n = nodes.len();
        let mut bone = vec![false; n * n];
        let mut bone_edges = Vec::with_capacity(edges.len());
        let mut adj = vec![Vec::new(); n];
        for (u, v) in edges {
            if u.0 >= n || v.0 >= n {
                return Err(GraphError::BadNode(u.0.max(v.0), n));
            }
            if u == v {
                return Err(GraphError::Duplicate(format!("self-loop bone edge on {}", nodes[u.0].name)));
            }
            if bone[u.0 * n + v.0] {
                return Err(GraphError::Duplicate(format!(
                    "bone edge {}-{}",
                    nodes[u.0].name, nodes[v.0].name
                )));
            }
            bone[u.0 * n + v.0] = true;
            bone[v.0 * n + u.0] = true;
            adj[u.0].push(v.0);
            adj[v.0].push(u.0);
            bone_edges.push((u.min(v), u.max(v)));
        }
        bone_edges.sort();
        let mut hop = vec![HOP_INF; n * n];
        let mut queue = VecDeque::new();
        for s in 0..n {
            let row = &mut hop[s * n..(s + 1) * n];
            row[s] = 0;
            queue.push_back(s);
            while let Some(u) = queue.pop_front() {
                for &w in &adj[u] {
                    if row[w] == HOP_INF {
                        row[w] = row[u] + 1;
                        queue.push_back(w);
                    }
                }
            }
        }
        Ok(Self {
            spec,
            nodes,
            bone_edges,
            bone,
            hop,
        })
    }

    /// Relabels nodes: old node `i` becomes new node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self, GraphError> {
        let n = self.n();
        let mut seen = vec![false; n];
        if perm.len() != n {
            return Err(GraphError::Validation {
                field: "perm".into(),
                reason: format!("length {} != {n}", perm.len()),
            });
        }
        for &p in perm {
            if p >= n || seen[p] {
                return Err(GraphError::Validation {
                    field: "perm".into(),
                    reason: "not a permutation".into(),
                });
            }
            seen[p] = true;
        }
        let mut nodes = self.nodes.clone();
        for (old, node) in self.nodes.iter().enumerate() {
            let mut moved = node.clone();
            moved.id = NodeId(perm[old]);
            nodes[perm[old]] = moved;
        }
        let edges = self
            .bone_edges
            .iter()
            .map(|(u, v)| (NodeId(perm[u.0]), NodeId(perm[v.0])))
            .collect();
        Self::from_parts(self.spec.clone(), nodes, edges)
    }

    pub fn spec(&self) -> &GraphSpec {
        &self.spec
    }

    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[BodyNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &BodyNode {
        &self.nodes[id.0]
    }

    pub fn check(&self, id: NodeId) -> Result<(), GraphError> {
        if id.0 < self.n() {
            Ok(())
        } else {
            Err(GraphError::BadNode(id.0, self.n()))
        }
    }

    pub fn node_by_name(&self, name: &str) -> Result<NodeId, GraphError> {
        self.nodes
            .iter()
            .find(|n| n.name == name)
            .map(|n| n.id)
            .ok_or_else(|| GraphError::UnknownName(name.to_string()))
    }

    pub fn bone_edges(&self) -> &[(NodeId, NodeId)] {
        &self.bone_edges
    }

    pub fn is_bone(&self, u: NodeId, v: NodeId) -> bool {
        self.bone[u.0 * self.n() + v.0]
    }

    /// Shortest bone-path length, or [`HOP_INF`].
    pub fn hop(&self, u: NodeId, v: NodeId) -> u32 {
        self.hop[u.0 * self.n() + v.0]
    }

    /// Row-major `n x n` hop matrix.
    pub fn hop_matrix(&self) -> &[u32] {
        &self.hop
    }

    /// `min(hop, d_max)`; disconnected pairs map to `d_max`.
    pub fn hop_clipped(&self, u: NodeId, v: NodeId, d_max: u32) -> u32 {
        self.hop(u, v).min(d_max)
    }

    /// Self beats contact beats bone beats disconnected.
    pub fn edge_type(&self, contacts: &ContactSet, u: NodeId, v: NodeId) -> Result<EdgeType, GraphError> {
        self.check(u)?;
        self.check(v)?;
        Ok(if u == v {
            EdgeType::SelfLoop
        } else if contacts.contains(u, v) {
            EdgeType::Contact
        } else if self.is_bone(u, v) {
            EdgeType::Bone
        } else {
            EdgeType::Disconnected
        })
    }

    pub fn relation_masks(&self) -> RelationMasks {
        let n = self.n();
        let mut serial = vec![false; n * n];
        let mut synergy = vec![false; n * n];
        for u in 0..n {
            for v in 0..n {
                serial[u * n + v] = self.hop[u * n + v] <= 1;
                let (a, b) = (&self.nodes[u], &self.nodes[v]);
                synergy[u * n + v] = a.role == NodeRole::FingerLink
                    && b.role == NodeRole::FingerLink
                    && a.hand == b.hand
                    && a.link_level == b.link_level
                    && a.finger_index != b.finger_index;
            }
        }
        RelationMasks { n, serial, synergy }
    }

    pub fn hands(&self) -> Vec<Hand> {
        self.spec.hands.iter().map(|h| h.side).collect()
    }

    pub fn hand_spec(&self, hand: Hand) -> Option<&HandSpec> {
        self.spec.hands.iter().find(|h| h.side == hand)
    }

    pub fn palm(&self, hand: Hand) -> Option<NodeId> {
        self.nodes
            .iter()
            .find(|n| n.role == NodeRole::PalmRoot && n.hand == Some(hand))
            .map(|n| n.id)
    }

    /// Link node of `hand`, finger `f`, level `l`.
    pub fn link(&self, hand: Hand, f: usize, l: usize) -> Option<NodeId> {
        self.nodes
            .iter()
            .find(|n| n.hand == Some(hand) && n.finger_index == Some(f) && n.link_level == Some(l))
            .map(|n| n.id)
    }

    /// All nodes of `hand` (palm and finger links) in id order.
    pub fn hand_nodes(&self, hand: Hand) -> Vec<NodeId> {
        self.nodes.iter().filter(|n| n.hand == Some(hand)).map(|n| n.id).collect()
    }

    /// Distal link of every finger of `hand`, ordered by finger index.
    pub fn fingertips(&self, hand: Hand) -> Vec<NodeId> {
        let Some(h) = self.hand_spec(hand) else {
            return Vec::new();
        };
        let last = h.links_per_finger as usize - 1;
        (0..h.fingers as usize)
            .filter_map(|f| self.link(hand, f, last))
            .collect()
    }

    pub fn tool(&self) -> Option<NodeId> {
        self.nodes.iter().find(|n| n.role == NodeRole::Tool).map(|n| n.id)
    }

    pub fn object(&self) -> Option<NodeId> {
        self.nodes.iter().find(|n| n.role == NodeRole::Object).map(|n| n.id)
    }

    pub fn radii(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.radius).collect()
    }
}

/// Sphere-overlap contacts between non-adjacent bodies:
/// `(u, v)` is a contact iff `|p_u - p_v| <= r_u + r_v`, `u != v`, and `u`, `v` are not bone-adjacent.
pub fn detect_contacts(
    graph: &KinematicGraph,
    positions: &[[f64; 3]],
    radii: &[f64],
    step: usize,
) -> Result<ContactSet, GraphError> {
    let n = graph.n();
    if positions.len() != n || radii.len() != n {
        return Err(GraphError::Validation {
            field: "positions".into(),
            reason: format!("expected {n} positions and radii, got {} and {}", positions.len(), radii.len()),
        });
    }
    for (i, (p, r)) in positions.iter().zip(radii).enumerate() {
        if !p.iter().all(|x| x.is_finite()) {
            return Err(GraphError::NonFinitePosition(graph.nodes[i].name.clone()));
        }
        if !(*r > 0.0) {
            return Err(GraphError::BadRadius(graph.nodes[i].name.clone()));
        }
    }
    let mut set = ContactSet::new(step);
    for u in 0..n {
        for v in u + 1..n {
            if graph.is_bone(NodeId(u), NodeId(v)) {
                continue;
            }
            let d2: f64 = (0..3).map(|k| (positions[u][k] - positions[v][k]).powi(2)).sum();
            let reach = radii[u] + radii[v];
            if d2 <= reach * reach {
                set.pairs.insert((NodeId(u), NodeId(v)));
            }
        }
    }
    Ok(set)
}
