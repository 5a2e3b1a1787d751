use std::collections::BTreeMap;

use quick_xml::events::{BytesDecl, BytesEnd, BytesStart, BytesText, Event};
use quick_xml::Writer;
use serde::{Deserialize, Serialize};

use super::{Edge, GraphError, KnowledgeGraph, Metadata, Node, PropValue};

#[derive(Serialize)]
struct DocumentRef<'a> {
    metadata: &'a Metadata,
    nodes: Vec<&'a Node>,
    edges: Vec<&'a Edge>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    metadata: Metadata,
    nodes: Vec<Node>,
    edges: Vec<Edge>,
}

/// Pretty-printed JSON with nodes and edges in id order. The output is a
/// pure function of the graph contents.
pub fn export_json(graph: &KnowledgeGraph) -> Vec<u8> {
    let doc = DocumentRef {
        metadata: &graph.metadata,
        nodes: graph.nodes().collect(),
        edges: graph.edges().collect(),
    };
    let mut out = serde_json::to_vec_pretty(&doc).expect("graph serializes");
    out.push(b'\n');
    out
}

pub fn import_json(bytes: &[u8]) -> Result<KnowledgeGraph, GraphError> {
    let doc: Document =
        serde_json::from_slice(bytes).map_err(|e| GraphError::Import(e.to_string()))?;
    KnowledgeGraph::from_parts(doc.metadata, doc.nodes, doc.edges)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum KeyType {
    Boolean,
    Long,
    Double,
    String,
}

impl KeyType {
    fn of(v: &PropValue) -> Self {
        match v {
            PropValue::Bool(_) => KeyType::Boolean,
            PropValue::Int(_) => KeyType::Long,
            PropValue::Float(_) => KeyType::Double,
            PropValue::Str(_) => KeyType::String,
        }
    }

    fn unify(self, other: Self) -> Self {
        use KeyType::*;
        match (self, other) {
            (a, b) if a == b => a,
            (Long, Double) | (Double, Long) => Double,
            _ => String,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            KeyType::Boolean => "boolean",
            KeyType::Long => "long",
            KeyType::Double => "double",
            KeyType::String => "string",
        }
    }
}

fn key_table<'a>(
    props: impl Iterator<Item = (&'a String, &'a PropValue)>,
) -> BTreeMap<String, KeyType> {
    let mut table: BTreeMap<String, KeyType> = BTreeMap::new();
    for (k, v) in props {
        let t = KeyType::of(v);
        table
            .entry(k.clone())
            .and_modify(|cur| *cur = cur.unify(t))
            .or_insert(t);
    }
    table
}

fn format_value(v: &PropValue, as_type: KeyType) -> String {
    match (v, as_type) {
        // doubles keep a decimal point so readers infer the right type
        (PropValue::Int(i), KeyType::Double) => format!("{}", *i as f64),
        (PropValue::Float(f), _) if f.fract() == 0.0 && f.is_finite() => format!("{f:.1}"),
        _ => v.to_string(),
    }
}

type XmlResult = Result<(), quick_xml::Error>;

fn write_data(w: &mut Writer<Vec<u8>>, key: &str, value: &str) -> XmlResult {
    let mut start = BytesStart::new("data");
    start.push_attribute(("key", key));
    w.write_event(Event::Start(start))?;
    w.write_event(Event::Text(BytesText::new(value)))?;
    w.write_event(Event::End(BytesEnd::new("data")))?;
    Ok(())
}

fn write_graphml(graph: &KnowledgeGraph) -> Result<Vec<u8>, quick_xml::Error> {
    let node_keys = key_table(graph.nodes().flat_map(|n| n.props.iter()));
    let edge_keys = key_table(graph.edges().flat_map(|e| e.props.iter()));
    // key ids: n0 = labels, n1.. = node props; e0 = type, e1.. = edge props
    let node_key_id: BTreeMap<&str, String> = node_keys
        .keys()
        .enumerate()
        .map(|(i, k)| (k.as_str(), format!("n{}", i + 1)))
        .collect();
    let edge_key_id: BTreeMap<&str, String> = edge_keys
        .keys()
        .enumerate()
        .map(|(i, k)| (k.as_str(), format!("e{}", i + 1)))
        .collect();

    let mut w = Writer::new_with_indent(Vec::new(), b' ', 2);
    w.write_event(Event::Decl(BytesDecl::new("1.0", Some("UTF-8"), None)))?;
    let mut root = BytesStart::new("graphml");
    root.push_attribute(("xmlns", "http://graphml.graphdrawing.org/xmlns"));
    w.write_event(Event::Start(root))?;

    let key = |w: &mut Writer<Vec<u8>>, id: &str, scope: &str, name: &str, ty: KeyType| {
        let mut k = BytesStart::new("key");
        k.push_attribute(("id", id));
        k.push_attribute(("for", scope));
        k.push_attribute(("attr.name", name));
        k.push_attribute(("attr.type", ty.as_str()));
        w.write_event(Event::Empty(k))
    };
    key(&mut w, "n0", "node", "labels", KeyType::String)?;
    for (name, ty) in &node_keys {
        key(&mut w, &node_key_id[name.as_str()], "node", name, *ty)?;
    }
    key(&mut w, "e0", "edge", "type", KeyType::String)?;
    for (name, ty) in &edge_keys {
        key(&mut w, &edge_key_id[name.as_str()], "edge", name, *ty)?;
    }

    let mut g = BytesStart::new("graph");
    g.push_attribute(("id", "G"));
    g.push_attribute(("edgedefault", "directed"));
    w.write_event(Event::Start(g))?;
    for node in graph.nodes() {
        let mut n = BytesStart::new("node");
        n.push_attribute(("id", node.id.as_str()));
        w.write_event(Event::Start(n))?;
        let labels: Vec<&str> = node.labels.iter().map(String::as_str).collect();
        write_data(&mut w, "n0", &labels.join(","))?;
        for (k, v) in &node.props {
            write_data(
                &mut w,
                &node_key_id[k.as_str()],
                &format_value(v, node_keys[k]),
            )?;
        }
        w.write_event(Event::End(BytesEnd::new("node")))?;
    }
    for edge in graph.edges() {
        let mut e = BytesStart::new("edge");
        e.push_attribute(("id", edge.id.as_str()));
        e.push_attribute(("source", edge.source.as_str()));
        e.push_attribute(("target", edge.target.as_str()));
        w.write_event(Event::Start(e))?;
        write_data(&mut w, "e0", &edge.edge_type)?;
        for (k, v) in &edge.props {
            write_data(
                &mut w,
                &edge_key_id[k.as_str()],
                &format_value(v, edge_keys[k]),
            )?;
        }
        w.write_event(Event::End(BytesEnd::new("edge")))?;
    }
    w.write_event(Event::End(BytesEnd::new("graph")))?;
    w.write_event(Event::End(BytesEnd::new("graphml")))?;
    let mut out = w.into_inner();
    out.push(b'\n');
    Ok(out)
}

/// GraphML with labels as a comma-joined `labels` key and one typed key per
/// property name. Keys, nodes and edges are emitted in sorted order.
pub fn export_graphml(graph: &KnowledgeGraph) -> Vec<u8> {
    write_graphml(graph).expect("writing to memory cannot fail")
}
