use serde::{Deserialize, Serialize};

use crate::kingraph::{Hand, KinematicGraph, NodeId, NodeRole};
use crate::nncore::NnError;

/// Per-link token: position 3, orientation quaternion 4, linear velocity 3,
/// angular velocity 3, reference position delta 3, contact flag 1.
pub const LINK_FEATURES: usize = 17;
/// Hand-global token: wrist pose 7, wrist velocities 6, mean fingertip reference delta 3.
pub const HAND_FEATURES: usize = 16;
/// Tool/object token: pose 7, velocities 6, reference pose delta 7.
pub const BODY_FEATURES: usize = 20;

/// Tokens sharing a signature share one tokenizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TokenSignature {
    HandGlobal,
    Palm,
    Link(usize),
    Tool,
    Object,
}

impl TokenSignature {
    pub fn width(self) -> usize {
        match self {
            TokenSignature::HandGlobal => HAND_FEATURES,
            TokenSignature::Palm | TokenSignature::Link(_) => LINK_FEATURES,
            TokenSignature::Tool | TokenSignature::Object => BODY_FEATURES,
        }
    }

    pub fn label(self) -> String {
        match self {
            TokenSignature::HandGlobal => "hand".into(),
            TokenSignature::Palm => "palm".into(),
            TokenSignature::Link(l) => format!("link{l}"),
            TokenSignature::Tool => "tool".into(),
            TokenSignature::Object => "object".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenDesc {
    pub name: String,
    /// `None` only for the policy token.
    pub node: Option<NodeId>,
    pub signature: Option<TokenSignature>,
    pub width: usize,
    /// Offset of this token's features inside a flat observation.
    pub offset: usize,
}

/// Token layout: `[POL]`, then per hand (right before left) the hand-global
/// token followed by that hand's per-link tokens in node order, then tool and
/// object. Hand-global tokens map to the hand's palm node.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMap {
    tokens: Vec<TokenDesc>,
    obs_width: usize,
    n_nodes: usize,
}

impl TokenMap {
    pub fn new(graph: &KinematicGraph) -> Result<Self, NnError> {
        let mut tokens = vec![TokenDesc {
            name: "[POL]".into(),
            node: None,
            signature: None,
            width: 0,
            offset: 0,
        }];
        let mut offset = 0;
        let mut push = |name: String, node: NodeId, sig: TokenSignature, tokens: &mut Vec<TokenDesc>| {
            let width = sig.width();
            tokens.push(TokenDesc {
                name,
                node: Some(node),
                signature: Some(sig),
                width,
                offset,
            });
            offset += width;
        };
        let mut hands = graph.hands();
        hands.sort();
        for hand in hands {
            let palm = graph
                .palm(hand)
                .ok_or_else(|| NnError::Invalid(format!("hand {} has no palm node", hand.as_str())))?;
            push(format!("{}.hand", hand.as_str()), palm, TokenSignature::HandGlobal, &mut tokens);
            for id in graph.hand_nodes(hand) {
                let node = graph.node(id);
                let sig = match node.role {
                    NodeRole::PalmRoot => TokenSignature::Palm,
                    _ => TokenSignature::Link(node.link_level.expect("finger link has a level")),
                };
                push(node.name.clone(), id, sig, &mut tokens);
            }
        }
        if let Some(t) = graph.tool() {
            push("tool".into(), t, TokenSignature::Tool, &mut tokens);
        }
        if let Some(o) = graph.object() {
            push("object".into(), o, TokenSignature::Object, &mut tokens);
        }
        let map = Self {
            tokens,
            obs_width: offset,
            n_nodes: graph.n(),
        };
        map.validate(graph)?;
        Ok(map)
    }

    fn validate(&self, graph: &KinematicGraph) -> Result<(), NnError> {
        let mut covered = vec![0usize; graph.n()];
        for t in &self.tokens[1..] {
            let node = t.node.ok_or_else(|| NnError::Invalid(format!("token {} is unmapped", t.name)))?;
            if t.signature != Some(TokenSignature::HandGlobal) {
                covered[node.0] += 1;
            }
        }
        if let Some(i) = covered.iter().position(|&c| c != 1) {
            return Err(NnError::Invalid(format!(
                "node {} covered by {} per-node tokens",
                graph.node(NodeId(i)).name,
                covered[i]
            )));
        }
        Ok(())
    }

    /// Token count including `[POL]`.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[TokenDesc] {
        &self.tokens
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Width of a flat observation (concatenation of all token features in token order).
    pub fn obs_width(&self) -> usize {
        self.obs_width
    }

    pub fn token_nodes(&self) -> Vec<Option<NodeId>> {
        self.tokens.iter().map(|t| t.node).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.name.clone()).collect()
    }

    /// Distinct signatures in first-appearance order, each with its token indices.
    pub fn signature_groups(&self) -> Vec<(TokenSignature, Vec<usize>)> {
        let mut groups: Vec<(TokenSignature, Vec<usize>)> = Vec::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let Some(sig) = t.signature else { continue };
            match groups.iter_mut().find(|(s, _)| *s == sig) {
                Some((_, v)) => v.push(i),
                None => groups.push((sig, vec![i])),
            }
        }
        groups
    }

    /// Index of the hand-global token of `hand`.
    pub fn hand_token(&self, hand: Hand) -> Option<usize> {
        let name = format!("{}.hand", hand.as_str());
        self.tokens.iter().position(|t| t.name == name)
    }

    /// Index of the per-node token of `node`.
    pub fn node_token(&self, node: NodeId) -> Option<usize> {
        self.tokens
            .iter()
            .position(|t| t.node == Some(node) && t.signature != Some(TokenSignature::HandGlobal))
    }

    /// Features of token `i` inside a flat observation.
    pub fn slice<'a>(&self, obs: &'a [f64], i: usize) -> &'a [f64] {
        let t = &self.tokens[i];
        &obs[t.offset..t.offset + t.width]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kingraph::{build_graph, GraphSpec};

    #[test]
    fn layout_for_default_morphology() {
        let g = build_graph(&GraphSpec::bimanual(3, 3)).unwrap();
        let m = TokenMap::new(&g).unwrap();
        // 20 hand nodes + 2 hand tokens + tool + object + [POL]
        assert_eq!(m.len(), 25);
        assert_eq!(m.tokens()[1].name, "right.hand");
        assert_eq!(m.tokens()[2].name, "right.palm");
        assert_eq!(m.tokens()[12].name, "left.hand");
        assert_eq!(m.tokens()[23].name, "tool");
        assert_eq!(m.tokens()[24].name, "object");
        assert_eq!(m.tokens()[1].node, g.palm(Hand::Right));
        assert_eq!(m.obs_width(), 2 * 16 + 20 * 17 + 2 * 20);
        let groups = m.signature_groups();
        assert_eq!(groups.len(), 7);
        let link2 = groups.iter().find(|(s, _)| *s == TokenSignature::Link(2)).unwrap();
        assert_eq!(link2.1.len(), 6);
    }
}
