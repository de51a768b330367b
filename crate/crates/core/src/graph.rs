//! Event mentions, labeled-edge event graphs, and the lossless conversion
//! between them.
//!
//! Every graph has a single anchorless top node. Trigger nodes hang off the
//! top node through an edge carrying the event type; argument nodes hang off
//! trigger nodes through edges carrying the argument role. Argument spans that
//! occur in several mentions collapse into one shared node.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Half-open token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Result<Self, GraphError> {
        if start >= end {
            return Err(GraphError::EmptySpan { start, end });
        }
        Ok(Span { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    /// Number of token indices shared with `other`.
    pub fn intersection_len(&self, other: &Span) -> usize {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        hi.saturating_sub(lo)
    }

    pub fn contains(&self, token: usize) -> bool {
        self.start <= token && token < self.end
    }

    fn check_bounds(&self, n_tokens: usize) -> Result<(), GraphError> {
        if self.start >= self.end || self.end > n_tokens {
            return Err(GraphError::OutOfBounds {
                span: *self,
                n_tokens,
            });
        }
        Ok(())
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{})", self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub tokens: Vec<String>,
}

impl Sentence {
    pub fn new(id: impl Into<String>, tokens: Vec<String>) -> Result<Self, GraphError> {
        let id = id.into();
        if tokens.is_empty() {
            return Err(GraphError::EmptySentence(id));
        }
        Ok(Sentence { id, tokens })
    }

    /// Whitespace tokenization, handy for tests and examples.
    pub fn from_text(id: impl Into<String>, text: &str) -> Result<Self, GraphError> {
        Self::new(id, text.split_whitespace().map(str::to_owned).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn span_text(&self, span: Span) -> String {
        self.tokens[span.start..span.end].join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Argument {
    pub role: String,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EventMention {
    pub trigger: Span,
    pub event_type: String,
    pub arguments: Vec<Argument>,
}

impl EventMention {
    pub fn new(trigger: Span, event_type: impl Into<String>) -> Self {
        EventMention {
            trigger,
            event_type: event_type.into(),
            arguments: Vec::new(),
        }
    }

    pub fn with_argument(mut self, role: impl Into<String>, span: Span) -> Self {
        self.arguments.push(Argument {
            role: role.into(),
            span,
        });
        self
    }

    /// Checks spans against the sentence length and rejects repeated
    /// (role, span) pairs.
    pub fn check(&self, n_tokens: usize) -> Result<(), GraphError> {
        self.trigger.check_bounds(n_tokens)?;
        let mut seen = BTreeSet::new();
        for arg in &self.arguments {
            arg.span.check_bounds(n_tokens)?;
            if !seen.insert((&arg.role, arg.span)) {
                return Err(GraphError::DuplicateAnnotation {
                    event_type: self.event_type.clone(),
                    trigger: self.trigger,
                    role: arg.role.clone(),
                    span: arg.span,
                });
            }
        }
        Ok(())
    }

    /// Copy with arguments sorted, used for multiset comparison.
    pub fn canonical(&self) -> EventMention {
        let mut m = self.clone();
        m.arguments.sort();
        m
    }
}

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub anchors: Vec<Span>,
}

impl Node {
    /// Builds a node with anchors merged into maximal disjoint runs sorted by
    /// start.
    pub fn new(id: NodeId, anchors: impl IntoIterator<Item = Span>) -> Self {
        Node {
            id,
            anchors: normalize_anchors(anchors),
        }
    }

    pub fn top(id: NodeId) -> Self {
        Node {
            id,
            anchors: Vec::new(),
        }
    }

    /// The single span of a contiguous anchor, if it is one.
    pub fn contiguous_span(&self) -> Option<Span> {
        match self.anchors.as_slice() {
            [span] => Some(*span),
            _ => None,
        }
    }
}

/// Sorts spans and merges overlapping or adjacent ones.
pub fn normalize_anchors(anchors: impl IntoIterator<Item = Span>) -> Vec<Span> {
    let mut spans: Vec<Span> = anchors.into_iter().filter(|s| !s.is_empty()).collect();
    spans.sort();
    let mut merged: Vec<Span> = Vec::with_capacity(spans.len());
    for span in spans {
        match merged.last_mut() {
            Some(last) if span.start <= last.end => last.end = last.end.max(span.end),
            _ => merged.push(span),
        }
    }
    merged
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub source: NodeId,
    pub target: NodeId,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventGraph {
    pub sentence_id: String,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    pub top: NodeId,
}

impl EventGraph {
    /// A graph holding only the top node.
    pub fn empty(sentence_id: impl Into<String>) -> Self {
        EventGraph {
            sentence_id: sentence_id.into(),
            nodes: vec![Node::top(0)],
            edges: Vec::new(),
            top: 0,
        }
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Ids of nodes that receive an edge from the top node, in edge order.
    pub fn trigger_ids(&self) -> Vec<NodeId> {
        let mut ids = Vec::new();
        for e in &self.edges {
            if e.source == self.top && !ids.contains(&e.target) {
                ids.push(e.target);
            }
        }
        ids
    }

    pub fn validate(&self) -> Result<(), Violation> {
        validate_graph_inner(self, None)
    }

    pub fn validate_for(&self, sentence: &Sentence) -> Result<(), Violation> {
        validate_graph(self, sentence)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("span [{start},{end}) is empty")]
    EmptySpan { start: usize, end: usize },
    #[error("span {span} out of bounds for sentence of {n_tokens} tokens")]
    OutOfBounds { span: Span, n_tokens: usize },
    #[error("sentence `{0}` has no tokens")]
    EmptySentence(String),
    #[error("duplicate annotation: {event_type} at {trigger} with {role} at {span}")]
    DuplicateAnnotation {
        event_type: String,
        trigger: Span,
        role: String,
        span: Span,
    },
    #[error("two mentions share trigger {trigger} and event type {event_type}")]
    DuplicateTrigger { event_type: String, trigger: Span },
    #[error("graph for `{graph}` does not belong to sentence `{sentence}`")]
    SentenceMismatch { graph: String, sentence: String },
    #[error("invalid event graph: {0}")]
    Invalid(#[from] Violation),
    #[error("node {0} has a discontiguous anchor and cannot become a mention span")]
    DiscontiguousAnchor(NodeId),
}

/// The first broken invariant found by [`validate_graph`].
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Violation {
    #[error("top node {0} does not exist")]
    MissingTop(NodeId),
    #[error("top must be a dummy node: node {0} has anchors")]
    AnchoredTop(NodeId),
    #[error("duplicate node id {0}")]
    DuplicateNodeId(NodeId),
    #[error("node {0} has no anchor")]
    UnanchoredNode(NodeId),
    #[error("node {node} anchors are not merged and sorted")]
    UnnormalizedAnchors { node: NodeId },
    #[error("node {node} anchor {span} out of bounds for {n_tokens} tokens")]
    AnchorOutOfBounds {
        node: NodeId,
        span: Span,
        n_tokens: usize,
    },
    #[error("edge {index} refers to unknown node {node}")]
    DanglingEdge { index: usize, node: NodeId },
    #[error("edge {index} is a self loop on node {node}")]
    SelfLoop { index: usize, node: NodeId },
    #[error("edge {index} has an empty label")]
    EmptyLabel { index: usize },
    #[error("edge {index} points into the top node")]
    EdgeIntoTop { index: usize },
    #[error("edge source is not top or a trigger (edge {index}, node {source_node})")]
    BadEdgeSource { index: usize, source_node: NodeId },
    #[error("edge {index} links trigger {source_node} to trigger {target}")]
    TriggerToTrigger {
        index: usize,
        source_node: NodeId,
        target: NodeId,
    },
    #[error("edge {index} duplicates ({source_node}, {target}, {label})")]
    DuplicateEdge {
        index: usize,
        source_node: NodeId,
        target: NodeId,
        label: String,
    },
    #[error("trigger node {0} has more than one event type")]
    MultiTypedTrigger(NodeId),
    #[error("nodes {first} and {second} share anchors and role")]
    DuplicateAnchors { first: NodeId, second: NodeId },
    #[error("node {0} is not reachable from the top node")]
    OrphanNode(NodeId),
}

/// Checks every event-graph invariant, including that anchors fit the
/// sentence. Returns the first violation found.
pub fn validate_graph(graph: &EventGraph, sentence: &Sentence) -> Result<(), Violation> {
    validate_graph_inner(graph, Some(sentence.len()))
}

fn validate_graph_inner(graph: &EventGraph, n_tokens: Option<usize>) -> Result<(), Violation> {
    let mut index: HashMap<NodeId, &Node> = HashMap::with_capacity(graph.nodes.len());
    for node in &graph.nodes {
        if index.insert(node.id, node).is_some() {
            return Err(Violation::DuplicateNodeId(node.id));
        }
    }
    let top = *index
        .get(&graph.top)
        .ok_or(Violation::MissingTop(graph.top))?;
    if !top.anchors.is_empty() {
        return Err(Violation::AnchoredTop(top.id));
    }
    for node in &graph.nodes {
        if node.id == graph.top {
            continue;
        }
        if node.anchors.is_empty() {
            return Err(Violation::UnanchoredNode(node.id));
        }
        if normalize_anchors(node.anchors.iter().copied()) != node.anchors {
            return Err(Violation::UnnormalizedAnchors { node: node.id });
        }
        if let Some(n) = n_tokens {
            if let Some(span) = node.anchors.iter().find(|s| s.end > n) {
                return Err(Violation::AnchorOutOfBounds {
                    node: node.id,
                    span: *span,
                    n_tokens: n,
                });
            }
        }
    }

    let mut trigger_type: HashMap<NodeId, &str> = HashMap::new();
    for (i, e) in graph.edges.iter().enumerate() {
        for id in [e.source, e.target] {
            if !index.contains_key(&id) {
                return Err(Violation::DanglingEdge { index: i, node: id });
            }
        }
        if e.source == e.target {
            return Err(Violation::SelfLoop {
                index: i,
                node: e.source,
            });
        }
        if e.label.is_empty() {
            return Err(Violation::EmptyLabel { index: i });
        }
        if e.target == graph.top {
            return Err(Violation::EdgeIntoTop { index: i });
        }
        if e.source == graph.top {
            match trigger_type.get(&e.target) {
                Some(_) => return Err(Violation::MultiTypedTrigger(e.target)),
                None => {
                    trigger_type.insert(e.target, e.label.as_str());
                }
            }
        }
    }

    let mut seen_edges = BTreeSet::new();
    let mut reached = BTreeSet::new();
    for (i, e) in graph.edges.iter().enumerate() {
        if e.source != graph.top {
            if !trigger_type.contains_key(&e.source) {
                return Err(Violation::BadEdgeSource {
                    index: i,
                    source_node: e.source,
                });
            }
            if trigger_type.contains_key(&e.target) {
                return Err(Violation::TriggerToTrigger {
                    index: i,
                    source_node: e.source,
                    target: e.target,
                });
            }
        }
        if !seen_edges.insert((e.source, e.target, e.label.as_str())) {
            return Err(Violation::DuplicateEdge {
                index: i,
                source_node: e.source,
                target: e.target,
                label: e.label.clone(),
            });
        }
        reached.insert(e.target);
    }

    // Trigger nodes are unique per (anchors, event type); argument nodes per anchors.
    let mut owners: HashMap<(Vec<Span>, Option<&str>), NodeId> = HashMap::new();
    for node in &graph.nodes {
        if node.id == graph.top {
            continue;
        }
        if !reached.contains(&node.id) {
            return Err(Violation::OrphanNode(node.id));
        }
        let key = (node.anchors.clone(), trigger_type.get(&node.id).copied());
        if let Some(first) = owners.insert(key, node.id) {
            return Err(Violation::DuplicateAnchors {
                first,
                second: node.id,
            });
        }
    }
    Ok(())
}

/// Encodes the mentions of one sentence as a labeled-edge graph.
///
/// Node ids: top is 0, then one trigger per mention in mention order, then
/// argument nodes in order of first occurrence.
pub fn encode_graph(
    sentence: &Sentence,
    mentions: &[EventMention],
) -> Result<EventGraph, GraphError> {
    let n = sentence.len();
    let mut trigger_keys = BTreeSet::new();
    for m in mentions {
        m.check(n)?;
        if !trigger_keys.insert((m.trigger, m.event_type.as_str())) {
            return Err(GraphError::DuplicateTrigger {
                event_type: m.event_type.clone(),
                trigger: m.trigger,
            });
        }
    }

    let mut graph = EventGraph::empty(sentence.id.clone());
    for (i, m) in mentions.iter().enumerate() {
        let id = i + 1;
        graph.nodes.push(Node::new(id, [m.trigger]));
        graph.edges.push(Edge {
            source: graph.top,
            target: id,
            label: m.event_type.clone(),
        });
    }

    let mut arg_nodes: HashMap<Span, NodeId> = HashMap::new();
    for (i, m) in mentions.iter().enumerate() {
        for arg in &m.arguments {
            let next = graph.nodes.len();
            let target = *arg_nodes.entry(arg.span).or_insert_with(|| {
                graph.nodes.push(Node::new(next, [arg.span]));
                next
            });
            graph.edges.push(Edge {
                source: i + 1,
                target,
                label: arg.role.clone(),
            });
        }
    }
    debug_assert!(graph.validate_for(sentence).is_ok());
    Ok(graph)
}

/// Recovers one mention per top edge; each trigger's outgoing edges become
/// its arguments.
pub fn decode_graph(
    graph: &EventGraph,
    sentence: &Sentence,
) -> Result<Vec<EventMention>, GraphError> {
    if graph.sentence_id != sentence.id {
        return Err(GraphError::SentenceMismatch {
            graph: graph.sentence_id.clone(),
            sentence: sentence.id.clone(),
        });
    }
    validate_graph(graph, sentence)?;

    let span_of = |id: NodeId| -> Result<Span, GraphError> {
        graph
            .node(id)
            .and_then(Node::contiguous_span)
            .ok_or(GraphError::DiscontiguousAnchor(id))
    };

    let mut mentions = Vec::new();
    for top_edge in graph.edges.iter().filter(|e| e.source == graph.top) {
        let mut mention = EventMention::new(span_of(top_edge.target)?, top_edge.label.clone());
        for e in graph.edges.iter().filter(|e| e.source == top_edge.target) {
            mention.arguments.push(Argument {
                role: e.label.clone(),
                span: span_of(e.target)?,
            });
        }
        mentions.push(mention);
    }
    Ok(mentions)
}

/// Canonical multiset form of a mention list.
pub fn mention_multiset(mentions: &[EventMention]) -> Vec<EventMention> {
    let mut out: Vec<EventMention> = mentions.iter().map(EventMention::canonical).collect();
    out.sort();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sp(start: usize, end: usize) -> Span {
        Span::new(start, end).unwrap()
    }

    fn kurdish() -> (Sentence, Vec<EventMention>) {
        let s = Sentence::from_text(
            "ff",
            "A Kurdish journalist died in a U.S. friendly-fire accident in the north .",
        )
        .unwrap();
        let die = EventMention::new(sp(3, 4), "Die").with_argument("Agent", sp(6, 7));
        let attack = EventMention::new(sp(7, 8), "Attack").with_argument("Attacker", sp(6, 7));
        (s, vec![die, attack])
    }

    #[test]
    fn encodes_shared_argument_once() {
        let (s, mentions) = kurdish();
        let g = encode_graph(&s, &mentions).unwrap();
        assert_eq!(g.nodes.len(), 4);
        assert_eq!(g.nodes[1].anchors, vec![sp(3, 4)]);
        assert_eq!(g.nodes[2].anchors, vec![sp(7, 8)]);
        assert_eq!(g.nodes[3].anchors, vec![sp(6, 7)]);
        assert_eq!(s.span_text(sp(6, 7)), "U.S.");
        let edges: Vec<(usize, usize, &str)> = g
            .edges
            .iter()
            .map(|e| (e.source, e.target, e.label.as_str()))
            .collect();
        assert_eq!(
            edges,
            vec![
                (0, 1, "Die"),
                (0, 2, "Attack"),
                (1, 3, "Agent"),
                (2, 3, "Attacker")
            ]
        );
        assert_eq!(validate_graph(&g, &s), Ok(()));
    }

    #[test]
    fn decodes_shared_argument_into_each_mention() {
        let (s, mentions) = kurdish();
        let g = encode_graph(&s, &mentions).unwrap();
        assert_eq!(decode_graph(&g, &s).unwrap(), mentions);
    }

    #[test]
    fn empty_mentions_give_top_only() {
        let (s, _) = kurdish();
        let g = encode_graph(&s, &[]).unwrap();
        assert_eq!(g, EventGraph::empty("ff"));
        assert!(decode_graph(&g, &s).unwrap().is_empty());
    }

    #[test]
    fn nested_arguments_stay_distinct() {
        let s = Sentence::from_text(
            "jets",
            "That 's because coalition fighter jets pummeled this Iraqi position",
        )
        .unwrap();
        let attack = EventMention::new(sp(6, 7), "Attack").with_argument("Attacker", sp(3, 6));
        let other = EventMention::new(sp(4, 5), "Attack").with_argument("Attacker", sp(3, 4));
        let g = encode_graph(&s, &[attack.clone(), other.clone()]).unwrap();
        assert_eq!(g.nodes.len(), 5);
        assert!(g.nodes.iter().any(|n| n.anchors == vec![sp(3, 6)]));
        assert!(g.nodes.iter().any(|n| n.anchors == vec![sp(3, 4)]));
        assert_eq!(decode_graph(&g, &s).unwrap(), vec![attack, other]);
    }

    #[test]
    fn same_trigger_span_different_types_get_two_nodes() {
        let (s, _) = kurdish();
        let a = EventMention::new(sp(3, 4), "Die");
        let b = EventMention::new(sp(3, 4), "Injure");
        let g = encode_graph(&s, &[a, b]).unwrap();
        assert_eq!(g.nodes.len(), 3);
        assert_eq!(g.validate(), Ok(()));
    }

    #[test]
    fn trigger_inside_argument_of_other_event() {
        let (s, _) = kurdish();
        let a = EventMention::new(sp(3, 4), "Die").with_argument("Instrument", sp(5, 9));
        let b = EventMention::new(sp(7, 8), "Attack").with_argument("Place", sp(7, 8));
        let g = encode_graph(&s, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(g.validate(), Ok(()));
        assert_eq!(decode_graph(&g, &s).unwrap(), vec![a, b]);
    }

    #[test]
    fn two_roles_on_one_argument_node() {
        let (s, _) = kurdish();
        let g = EventGraph {
            sentence_id: "ff".into(),
            nodes: vec![Node::top(0), Node::new(1, [sp(3, 4)]), Node::new(2, [sp(0, 3)])],
            edges: vec![
                Edge {
                    source: 0,
                    target: 1,
                    label: "Die".into(),
                },
                Edge {
                    source: 1,
                    target: 2,
                    label: "Victim".into(),
                },
                Edge {
                    source: 1,
                    target: 2,
                    label: "Person".into(),
                },
            ],
            top: 0,
        };
        let mentions = decode_graph(&g, &s).unwrap();
        assert_eq!(mentions.len(), 1);
        assert_eq!(
            mentions[0].arguments,
            vec![
                Argument {
                    role: "Victim".into(),
                    span: sp(0, 3)
                },
                Argument {
                    role: "Person".into(),
                    span: sp(0, 3)
                }
            ]
        );
    }

    #[test]
    fn rejects_edge_between_arguments() {
        let (s, mentions) = kurdish();
        let mut g = encode_graph(&s, &mentions).unwrap();
        g.nodes.push(Node::new(4, [sp(0, 3)]));
        g.edges.push(Edge {
            source: 3,
            target: 4,
            label: "Part".into(),
        });
        let err = validate_graph(&g, &s).unwrap_err();
        assert_eq!(
            err,
            Violation::BadEdgeSource {
                index: 4,
                source_node: 3
            }
        );
        assert!(err.to_string().contains("edge source is not top or a trigger"));
    }

    #[test]
    fn rejects_anchored_top() {
        let (s, mentions) = kurdish();
        let mut g = encode_graph(&s, &mentions).unwrap();
        g.nodes[0].anchors = vec![sp(0, 1)];
        let err = validate_graph(&g, &s).unwrap_err();
        assert_eq!(err, Violation::AnchoredTop(0));
        assert!(err.to_string().contains("top must be a dummy node"));
    }

    #[test]
    fn rejects_orphans_duplicates_and_bounds() {
        let (s, mentions) = kurdish();
        let base = encode_graph(&s, &mentions).unwrap();

        let mut g = base.clone();
        g.nodes.push(Node::new(9, [sp(0, 1)]));
        assert_eq!(g.validate(), Err(Violation::OrphanNode(9)));

        let mut g = base.clone();
        g.edges.push(g.edges[2].clone());
        assert!(matches!(g.validate(), Err(Violation::DuplicateEdge { .. })));

        let mut g = base.clone();
        g.nodes[3].anchors = vec![sp(6, 20)];
        assert!(matches!(
            validate_graph(&g, &s),
            Err(Violation::AnchorOutOfBounds { node: 3, .. })
        ));

        let mut g = base.clone();
        g.edges.push(Edge {
            source: 0,
            target: 1,
            label: "Attack".into(),
        });
        assert_eq!(g.validate(), Err(Violation::MultiTypedTrigger(1)));

        let mut g = base;
        g.edges.push(Edge {
            source: 1,
            target: 2,
            label: "Target".into(),
        });
        assert!(matches!(g.validate(), Err(Violation::TriggerToTrigger { .. })));
    }

    #[test]
    fn encode_errors() {
        let (s, _) = kurdish();
        let oob = EventMention::new(sp(3, 14), "Die");
        assert!(matches!(
            encode_graph(&s, &[oob]),
            Err(GraphError::OutOfBounds { .. })
        ));
        let dup = EventMention::new(sp(3, 4), "Die")
            .with_argument("Agent", sp(6, 7))
            .with_argument("Agent", sp(6, 7));
        assert!(matches!(
            encode_graph(&s, &[dup]),
            Err(GraphError::DuplicateAnnotation { .. })
        ));
        let a = EventMention::new(sp(3, 4), "Die");
        assert!(matches!(
            encode_graph(&s, &[a.clone(), a]),
            Err(GraphError::DuplicateTrigger { .. })
        ));
    }

    #[test]
    fn anchors_normalize() {
        let n = Node::new(1, [sp(4, 6), sp(0, 2), sp(1, 3), sp(6, 7)]);
        assert_eq!(n.anchors, vec![sp(0, 3), sp(4, 7)]);
        assert_eq!(n.contiguous_span(), None);
    }
}
