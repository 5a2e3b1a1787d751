//! In-memory labeled property graph that ties software elements, mechatronic
//! groups and observed sensor positions together.
//!
//! Node ids are category-prefixed (`sig:`, `fb:`, `db:`, `hw:`, `grp:`,
//! `pos:`), so fragments built independently merge on shared ids.

mod export;

pub use export::{export_graphml, export_json, import_json};

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{GroupAssignment, GroupAssignments, SensorEstimate};

pub mod labels {
    pub const SIGNAL: &str = "Signal";
    pub const FUNCTION_BLOCK: &str = "FunctionBlock";
    pub const DATA_BLOCK: &str = "DataBlock";
    pub const HARDWARE_MODULE: &str = "HardwareModule";
    pub const POSITION: &str = "Position";
    pub const MECHATRONIC_GROUP: &str = "MechatronicGroup";
}

pub mod edge_types {
    pub const READS: &str = "READS";
    pub const WRITES: &str = "WRITES";
    pub const CALLS: &str = "CALLS";
    pub const MAPPED_TO: &str = "MAPPED_TO";
    pub const LOCATED_AT: &str = "LOCATED_AT";
    pub const BELONGS_TO: &str = "BELONGS_TO";
}

pub fn signal_node_id(name: &str) -> String {
    format!("sig:{name}")
}
pub fn function_block_node_id(name: &str) -> String {
    format!("fb:{name}")
}
pub fn data_block_node_id(name: &str) -> String {
    format!("db:{name}")
}
pub fn hardware_node_id(id: &str) -> String {
    format!("hw:{id}")
}
pub fn group_node_id(id: &str) -> String {
    format!("grp:{id}")
}
pub fn position_node_id(signal: &str) -> String {
    format!("pos:{signal}")
}
pub fn edge_id(edge_type: &str, source: &str, target: &str) -> String {
    format!("{edge_type}:{source}->{target}")
}

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("edge {edge} references missing node {node}")]
    DanglingEdge { edge: String, node: String },
    #[error("node {0} has no labels")]
    Unlabeled(String),
    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: String },
    #[error("node {0} not found")]
    NotFound(String),
    #[error("invalid graph document: {0}")]
    Import(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PropValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

impl From<bool> for PropValue {
    fn from(v: bool) -> Self {
        PropValue::Bool(v)
    }
}
impl From<i64> for PropValue {
    fn from(v: i64) -> Self {
        PropValue::Int(v)
    }
}
impl From<usize> for PropValue {
    fn from(v: usize) -> Self {
        PropValue::Int(v as i64)
    }
}
impl From<f64> for PropValue {
    fn from(v: f64) -> Self {
        PropValue::Float(v)
    }
}
impl From<&str> for PropValue {
    fn from(v: &str) -> Self {
        PropValue::Str(v.to_string())
    }
}
impl From<String> for PropValue {
    fn from(v: String) -> Self {
        PropValue::Str(v)
    }
}

impl std::fmt::Display for PropValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PropValue::Bool(v) => write!(f, "{v}"),
            PropValue::Int(v) => write!(f, "{v}"),
            PropValue::Float(v) => write!(f, "{v}"),
            PropValue::Str(v) => f.write_str(v),
        }
    }
}

pub type Props = BTreeMap<String, PropValue>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub labels: BTreeSet<String>,
    #[serde(default)]
    pub props: Props,
}

impl Node {
    pub fn new(id: impl Into<String>, label: &str) -> Self {
        Self {
            id: id.into(),
            labels: BTreeSet::from([label.to_string()]),
            props: Props::new(),
        }
    }

    pub fn with_prop(mut self, key: &str, value: impl Into<PropValue>) -> Self {
        self.props.insert(key.to_string(), value.into());
        self
    }

    pub fn has_label(&self, label: &str) -> bool {
        self.labels.contains(label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub id: String,
    #[serde(rename = "type")]
    pub edge_type: String,
    pub source: String,
    pub target: String,
    #[serde(default)]
    pub props: Props,
}

impl Edge {
    /// Edge with the canonical `TYPE:source->target` id.
    pub fn new(edge_type: &str, source: impl Into<String>, target: impl Into<String>) -> Self {
        let (source, target) = (source.into(), target.into());
        Self {
            id: edge_id(edge_type, &source, &target),
            edge_type: edge_type.to_string(),
            source,
            target,
            props: Props::new(),
        }
    }

    pub fn with_prop(mut self, key: &str, value: impl Into<PropValue>) -> Self {
        self.props.insert(key.to_string(), value.into());
        self
    }

    fn dedup_key(&self) -> (String, String, String, String) {
        (
            self.edge_type.clone(),
            self.source.clone(),
            self.target.clone(),
            serde_json::to_string(&self.props).expect("props serialize"),
        )
    }
}

/// A batch of nodes and edges produced by one analysis stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GraphFragment {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropConflict {
    pub node: String,
    pub key: String,
    pub previous: PropValue,
    pub current: PropValue,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub created_at: String,
    #[serde(default)]
    pub source_versions: BTreeMap<String, String>,
    #[serde(default)]
    pub conflicts: Vec<PropConflict>,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeGraph {
    pub metadata: Metadata,
    nodes: BTreeMap<String, Node>,
    edges: BTreeMap<String, Edge>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MergeReport {
    pub nodes_added: usize,
    pub nodes_updated: usize,
    pub edges_added: usize,
    pub conflicts: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AttachReport {
    pub located: usize,
    pub grouped: usize,
    /// Signals that had no node yet and were created as `observed_only`.
    pub unknown_signals: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Outgoing,
    Incoming,
    Both,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn edge(&self, id: &str) -> Option<&Edge> {
        self.edges.get(id)
    }

    /// Nodes in id order.
    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    /// Edges in id order.
    pub fn edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.values()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes_with_label<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a Node> + 'a {
        self.nodes.values().filter(move |n| n.has_label(label))
    }

    pub fn edges_of_type<'a>(&'a self, edge_type: &'a str) -> impl Iterator<Item = &'a Edge> + 'a {
        self.edges
            .values()
            .filter(move |e| e.edge_type == edge_type)
    }

    /// Union by node id. Existing nodes gain labels and props; a prop whose
    /// value changes is overwritten and recorded in `metadata.conflicts`.
    /// Edges equal in (type, source, target, props) are stored once.
    ///
    /// The fragment is validated before anything is mutated.
    pub fn merge_fragment(&mut self, fragment: &GraphFragment) -> Result<MergeReport, GraphError> {
        let fragment_ids: HashSet<&str> = fragment.nodes.iter().map(|n| n.id.as_str()).collect();
        for node in &fragment.nodes {
            if node.labels.is_empty() {
                return Err(GraphError::Unlabeled(node.id.clone()));
            }
        }
        for edge in &fragment.edges {
            for endpoint in [&edge.source, &edge.target] {
                if !fragment_ids.contains(endpoint.as_str()) && !self.nodes.contains_key(endpoint) {
                    return Err(GraphError::DanglingEdge {
                        edge: edge.id.clone(),
                        node: endpoint.clone(),
                    });
                }
            }
        }

        let mut report = MergeReport::default();
        for node in &fragment.nodes {
            match self.nodes.get_mut(&node.id) {
                None => {
                    self.nodes.insert(node.id.clone(), node.clone());
                    report.nodes_added += 1;
                }
                Some(existing) => {
                    let mut changed = false;
                    for label in &node.labels {
                        changed |= existing.labels.insert(label.clone());
                    }
                    for (key, value) in &node.props {
                        match existing.props.insert(key.clone(), value.clone()) {
                            None => changed = true,
                            Some(prev) if prev != *value => {
                                changed = true;
                                report.conflicts += 1;
                                self.metadata.conflicts.push(PropConflict {
                                    node: node.id.clone(),
                                    key: key.clone(),
                                    previous: prev,
                                    current: value.clone(),
                                });
                            }
                            Some(_) => {}
                        }
                    }
                    if changed {
                        report.nodes_updated += 1;
                    }
                }
            }
        }

        let mut seen: HashSet<_> = self.edges.values().map(Edge::dedup_key).collect();
        for edge in &fragment.edges {
            if !seen.insert(edge.dedup_key()) {
                continue;
            }
            let mut edge = edge.clone();
            if self.edges.contains_key(&edge.id) {
                let base = edge.id.clone();
                let mut n = 2;
                while self.edges.contains_key(&edge.id) {
                    edge.id = format!("{base}#{n}");
                    n += 1;
                }
            }
            self.edges.insert(edge.id.clone(), edge);
            report.edges_added += 1;
        }
        Ok(report)
    }

    /// Link sensor estimates and group assignments to their signal nodes.
    /// Estimates for signals unknown to the graph get an `observed_only`
    /// signal node, which is listed in the report and in `metadata.notes`.
    pub fn attach_estimates(
        &mut self,
        estimates: &[SensorEstimate],
        assignments: &GroupAssignments,
    ) -> AttachReport {
        let mut report = AttachReport::default();
        let mut fragment = GraphFragment::default();

        fn ensure_signal(
            graph: &KnowledgeGraph,
            fragment: &mut GraphFragment,
            unknown: &mut Vec<String>,
            name: &str,
        ) -> String {
            let id = signal_node_id(name);
            if !graph.nodes.contains_key(&id) && !fragment.nodes.iter().any(|n| n.id == id) {
                fragment.nodes.push(
                    Node::new(id.clone(), labels::SIGNAL)
                        .with_prop("name", name)
                        .with_prop("provenance", "observed_only"),
                );
                unknown.push(name.to_string());
            }
            id
        }

        for est in estimates {
            let sig = ensure_signal(
                self,
                &mut fragment,
                &mut report.unknown_signals,
                &est.signal_name,
            );
            let pos = position_node_id(&est.signal_name);
            fragment.nodes.push(
                Node::new(pos.clone(), labels::POSITION)
                    .with_prop("kind", "switching_position")
                    .with_prop("x", est.position.x)
                    .with_prop("y", est.position.y)
                    .with_prop("z", est.position.z)
                    .with_prop("dispersion", est.dispersion)
                    .with_prop("support", est.support)
                    .with_prop("discarded", est.discarded),
            );
            fragment
                .edges
                .push(Edge::new(edge_types::LOCATED_AT, sig, pos));
            report.located += 1;
        }

        for (signal, assignment) in assignments.iter() {
            let GroupAssignment::Group { id, votes, tie } = assignment else {
                continue;
            };
            let sig = ensure_signal(self, &mut fragment, &mut report.unknown_signals, signal);
            let grp = group_node_id(id);
            if !fragment.nodes.iter().any(|n| n.id == grp) {
                fragment.nodes.push(
                    Node::new(grp.clone(), labels::MECHATRONIC_GROUP)
                        .with_prop("name", id.as_str()),
                );
            }
            fragment.edges.push(
                Edge::new(edge_types::BELONGS_TO, sig, grp)
                    .with_prop("votes", *votes)
                    .with_prop("tie", *tie),
            );
            report.grouped += 1;
        }

        self.merge_fragment(&fragment)
            .expect("fragment endpoints are created alongside their edges");
        for name in &report.unknown_signals {
            self.metadata.notes.push(format!(
                "unknown signal {name}: node created from observations only"
            ));
        }
        report
    }

    /// Neighbors over edges of `edge_type` (any type when `None`), id-ordered.
    pub fn query_neighbors(
        &self,
        id: &str,
        edge_type: Option<&str>,
        direction: Direction,
    ) -> Result<Vec<&Node>, GraphError> {
        if !self.nodes.contains_key(id) {
            return Err(GraphError::NotFound(id.to_string()));
        }
        let mut ids = BTreeSet::new();
        for e in self.edges.values() {
            if edge_type.is_some_and(|t| t != e.edge_type) {
                continue;
            }
            if matches!(direction, Direction::Outgoing | Direction::Both) && e.source == id {
                ids.insert(e.target.as_str());
            }
            if matches!(direction, Direction::Incoming | Direction::Both) && e.target == id {
                ids.insert(e.source.as_str());
            }
        }
        Ok(ids.into_iter().map(|i| &self.nodes[i]).collect())
    }

    pub fn check_integrity(&self) -> Result<(), GraphError> {
        for node in self.nodes.values() {
            if node.labels.is_empty() {
                return Err(GraphError::Unlabeled(node.id.clone()));
            }
        }
        for edge in self.edges.values() {
            for endpoint in [&edge.source, &edge.target] {
                if !self.nodes.contains_key(endpoint) {
                    return Err(GraphError::DanglingEdge {
                        edge: edge.id.clone(),
                        node: endpoint.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub(crate) fn from_parts(
        metadata: Metadata,
        nodes: Vec<Node>,
        edges: Vec<Edge>,
    ) -> Result<Self, GraphError> {
        let mut graph = KnowledgeGraph {
            metadata,
            ..Default::default()
        };
        for n in nodes {
            if graph.nodes.contains_key(&n.id) {
                return Err(GraphError::DuplicateId {
                    kind: "node",
                    id: n.id,
                });
            }
            graph.nodes.insert(n.id.clone(), n);
        }
        for e in edges {
            if graph.edges.contains_key(&e.id) {
                return Err(GraphError::DuplicateId {
                    kind: "edge",
                    id: e.id,
                });
            }
            graph.edges.insert(e.id.clone(), e);
        }
        graph.check_integrity()?;
        Ok(graph)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::SensorEstimate;
    use crate::geom::Point3;

    fn plc_fragment() -> GraphFragment {
        GraphFragment {
            nodes: vec![
                Node::new("sig:lb2", labels::SIGNAL).with_prop("address", "%I0.1"),
                Node::new("fb:rowctl", labels::FUNCTION_BLOCK),
            ],
            edges: vec![Edge::new(edge_types::READS, "fb:rowctl", "sig:lb2")],
        }
    }

    fn estimate(name: &str, x: f64) -> SensorEstimate {
        SensorEstimate {
            signal_name: name.into(),
            position: Point3::new(x, 0.0, 0.0),
            support: 5,
            dispersion: 0.01,
            discarded: 1,
            outlier_removal_skipped: false,
        }
    }

    #[test]
    fn merge_into_empty_is_identity() {
        let mut g = KnowledgeGraph::new();
        let frag = plc_fragment();
        g.merge_fragment(&frag).unwrap();
        assert_eq!(g.nodes().cloned().collect::<Vec<_>>().len(), 2);
        assert_eq!(g.node("sig:lb2"), Some(&frag.nodes[0]));
        assert_eq!(
            g.edges().collect::<Vec<_>>(),
            frag.edges.iter().collect::<Vec<_>>()
        );
    }

    #[test]
    fn merging_twice_is_idempotent() {
        let mut g = KnowledgeGraph::new();
        g.merge_fragment(&plc_fragment()).unwrap();
        let once = g.clone();
        let report = g.merge_fragment(&plc_fragment()).unwrap();
        assert_eq!(g, once);
        assert_eq!(report, MergeReport::default());
    }

    #[test]
    fn shared_signal_nodes_combine_props() {
        let mut g = KnowledgeGraph::new();
        g.merge_fragment(&plc_fragment()).unwrap();
        let fusion = GraphFragment {
            nodes: vec![Node::new("sig:lb2", labels::SIGNAL).with_prop("x", 1.5)],
            edges: vec![],
        };
        g.merge_fragment(&fusion).unwrap();
        assert_eq!(g.nodes_with_label(labels::SIGNAL).count(), 1);
        let node = g.node("sig:lb2").unwrap();
        assert_eq!(node.props["address"], PropValue::from("%I0.1"));
        assert_eq!(node.props["x"], PropValue::Float(1.5));
    }

    #[test]
    fn prop_conflict_is_last_writer_and_recorded() {
        let mut g = KnowledgeGraph::new();
        g.merge_fragment(&plc_fragment()).unwrap();
        let other = GraphFragment {
            nodes: vec![Node::new("sig:lb2", labels::SIGNAL).with_prop("address", "%I9.9")],
            edges: vec![],
        };
        let report = g.merge_fragment(&other).unwrap();
        assert_eq!(report.conflicts, 1);
        assert_eq!(g.node("sig:lb2").unwrap().props["address"], "%I9.9".into());
        assert_eq!(g.metadata.conflicts[0].previous, "%I0.1".into());
    }

    #[test]
    fn dangling_edge_rejected_without_mutation() {
        let mut g = KnowledgeGraph::new();
        let frag = GraphFragment {
            nodes: vec![Node::new("fb:a", labels::FUNCTION_BLOCK)],
            edges: vec![Edge::new(edge_types::READS, "fb:a", "sig:ghost")],
        };
        let err = g.merge_fragment(&frag).unwrap_err();
        assert!(matches!(err, GraphError::DanglingEdge { ref node, .. } if node == "sig:ghost"));
        assert_eq!(g.node_count(), 0);
    }

    #[test]
    fn parallel_edges_with_distinct_props_get_distinct_ids() {
        let mut g = KnowledgeGraph::new();
        g.merge_fragment(&plc_fragment()).unwrap();
        let frag = GraphFragment {
            nodes: vec![],
            edges: vec![Edge::new(edge_types::READS, "fb:rowctl", "sig:lb2").with_prop("n", 2i64)],
        };
        g.merge_fragment(&frag).unwrap();
        assert_eq!(g.edge_count(), 2);
        assert!(g.edge("READS:fb:rowctl->sig:lb2#2").is_some());
    }

    #[test]
    fn attach_estimate_for_known_and_unknown_signal() {
        let mut g = KnowledgeGraph::new();
        g.merge_fragment(&plc_fragment()).unwrap();
        let groups = GroupAssignments::from_iter([(
            "lb2".to_string(),
            GroupAssignment::Group {
                id: "R1".into(),
                votes: 3,
                tie: false,
            },
        )]);
        let report = g.attach_estimates(&[estimate("lb2", 1.0), estimate("lbX", 2.0)], &groups);
        assert_eq!(report.unknown_signals, vec!["lbX".to_string()]);
        assert!(g.edge("LOCATED_AT:sig:lb2->pos:lb2").is_some());
        assert!(g.edge("LOCATED_AT:sig:lbX->pos:lbX").is_some());
        assert_eq!(
            g.node("sig:lbX").unwrap().props["provenance"],
            "observed_only".into()
        );
        assert!(g
            .node("grp:R1")
            .unwrap()
            .has_label(labels::MECHATRONIC_GROUP));
        assert_eq!(g.metadata.notes.len(), 1);
        g.check_integrity().unwrap();

        let located = g
            .query_neighbors("sig:lb2", Some(edge_types::LOCATED_AT), Direction::Outgoing)
            .unwrap();
        assert_eq!(located.len(), 1);
        assert_eq!(located[0].id, "pos:lb2");
        let members = g
            .query_neighbors("grp:R1", Some(edge_types::BELONGS_TO), Direction::Incoming)
            .unwrap();
        assert_eq!(
            members.iter().map(|n| n.id.as_str()).collect::<Vec<_>>(),
            ["sig:lb2"]
        );
    }

    #[test]
    fn unknown_query_id() {
        let g = KnowledgeGraph::new();
        assert_eq!(
            g.query_neighbors("sig:nope", None, Direction::Both)
                .unwrap_err(),
            GraphError::NotFound("sig:nope".into())
        );
    }
}
