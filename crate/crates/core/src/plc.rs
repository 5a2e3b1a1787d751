//! Vendor-neutral PLC project export: parsing, canonical serialization and the
//! rule table that turns a project into software-element graph nodes.
//!
//! The document grammar is normative in `schemas/plc_export.xsd`:
//!
//! ```xml
//! <PlcProject name="...">
//!   <Hardware><Module id="DI1" type="DI"/></Hardware>
//!   <Signals><Signal name="lb1" address="%I0.0" direction="in" datatype="BOOL" module="DI1"/></Signals>
//!   <Blocks>
//!     <FunctionBlock name="rowctl"><Reads signal="lb1"/><Writes signal="m1"/><Calls block="x"/></FunctionBlock>
//!     <DataBlock name="cfg"><Field name="speed" datatype="REAL"/></DataBlock>
//!   </Blocks>
//! </PlcProject>
//! ```

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use quick_xml::events::{BytesDecl, BytesEnd, BytesStart, Event};
use quick_xml::{Reader, Writer};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    data_block_node_id, edge_types, function_block_node_id, hardware_node_id, labels,
    signal_node_id, Edge, GraphFragment, Node,
};

#[derive(Debug, Error, PartialEq)]
pub enum PlcError {
    #[error("schema violation at {path}: {reason}")]
    SchemaViolation { path: String, reason: String },
    #[error("{} dangling reference(s): {}", .0.len(), join_refs(.0))]
    DanglingReferences(Vec<DanglingReference>),
}

fn join_refs(refs: &[DanglingReference]) -> String {
    refs.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum RefKind {
    Signal,
    Block,
    Module,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct DanglingReference {
    /// Element holding the reference, e.g. `FunctionBlock rowctl`.
    pub referrer: String,
    pub kind: RefKind,
    pub name: String,
}

impl fmt::Display for DanglingReference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -> {:?} {:?}", self.referrer, self.kind, self.name)
    }
}

macro_rules! keyword_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "invalid {} {other:?} (expected one of: {})",
                        stringify!($name),
                        [$($text),+].join(", ")
                    )),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

keyword_enum!(ModuleKind { Cpu => "CPU", Di => "DI", Do => "DO", Ai => "AI", Ao => "AO" });
keyword_enum!(SignalDirection { In => "in", Out => "out" });
keyword_enum!(DataType { Bool => "BOOL", Int => "INT", Real => "REAL" });

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardwareModule {
    pub id: String,
    pub kind: ModuleKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Signal {
    pub name: String,
    pub address: String,
    pub direction: SignalDirection,
    pub datatype: DataType,
    pub module: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FunctionBlock {
    pub name: String,
    pub reads: Vec<String>,
    pub writes: Vec<String>,
    pub calls: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataField {
    pub name: String,
    pub datatype: DataType,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DataBlock {
    pub name: String,
    pub fields: Vec<DataField>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PlcProject {
    pub name: String,
    pub hardware_modules: Vec<HardwareModule>,
    pub signals: Vec<Signal>,
    pub function_blocks: Vec<FunctionBlock>,
    pub data_blocks: Vec<DataBlock>,
}

impl PlcProject {
    pub fn signal(&self, name: &str) -> Option<&Signal> {
        self.signals.iter().find(|s| s.name == name)
    }

    /// Every unresolved signal, block or module reference, sorted.
    pub fn dangling_references(&self) -> Vec<DanglingReference> {
        let modules: HashSet<&str> = self
            .hardware_modules
            .iter()
            .map(|m| m.id.as_str())
            .collect();
        let signals: HashSet<&str> = self.signals.iter().map(|s| s.name.as_str()).collect();
        let blocks: HashSet<&str> = self
            .function_blocks
            .iter()
            .map(|b| b.name.as_str())
            .collect();
        let mut out = BTreeSet::new();
        for s in &self.signals {
            if !modules.contains(s.module.as_str()) {
                out.insert(DanglingReference {
                    referrer: format!("Signal {}", s.name),
                    kind: RefKind::Module,
                    name: s.module.clone(),
                });
            }
        }
        for fb in &self.function_blocks {
            let referrer = format!("FunctionBlock {}", fb.name);
            let refs = fb
                .reads
                .iter()
                .chain(&fb.writes)
                .map(|n| (RefKind::Signal, n, &signals))
                .chain(fb.calls.iter().map(|n| (RefKind::Block, n, &blocks)));
            for (kind, name, known) in refs {
                if !known.contains(name.as_str()) {
                    out.insert(DanglingReference {
                        referrer: referrer.clone(),
                        kind,
                        name: name.clone(),
                    });
                }
            }
        }
        out.into_iter().collect()
    }
}

struct Frame {
    name: String,
    path: String,
    child_counts: HashMap<String, usize>,
}

struct Attrs {
    path: String,
    values: Vec<(String, String)>,
}

impl Attrs {
    fn read(e: &BytesStart<'_>, path: &str, allowed: &[&str]) -> Result<Self, PlcError> {
        let mut values = Vec::new();
        for attr in e.attributes() {
            let attr = attr.map_err(|err| violation(path, err.to_string()))?;
            let key = String::from_utf8_lossy(attr.key.as_ref()).into_owned();
            if !allowed.contains(&key.as_str()) {
                return Err(violation(path, format!("unexpected attribute {key:?}")));
            }
            let value = attr
                .unescape_value()
                .map_err(|err| violation(path, err.to_string()))?
                .into_owned();
            values.push((key, value));
        }
        Ok(Self {
            path: path.to_string(),
            values,
        })
    }

    fn required(&self, key: &str) -> Result<String, PlcError> {
        match self.values.iter().find(|(k, _)| k == key) {
            Some((_, v)) if !v.is_empty() => Ok(v.clone()),
            Some(_) => Err(violation(&self.path, format!("attribute {key:?} is empty"))),
            None => Err(violation(&self.path, format!("missing attribute {key:?}"))),
        }
    }

    fn keyword<T: FromStr<Err = String>>(&self, key: &str) -> Result<T, PlcError> {
        self.required(key)?
            .parse()
            .map_err(|reason| violation(&self.path, reason))
    }
}

fn violation(path: &str, reason: impl Into<String>) -> PlcError {
    PlcError::SchemaViolation {
        path: path.to_string(),
        reason: reason.into(),
    }
}

fn allowed_children(parent: Option<&str>) -> &'static [&'static str] {
    match parent {
        None => &["PlcProject"],
        Some("PlcProject") => &["Hardware", "Signals", "Blocks"],
        Some("Hardware") => &["Module"],
        Some("Signals") => &["Signal"],
        Some("Blocks") => &["FunctionBlock", "DataBlock"],
        Some("FunctionBlock") => &["Reads", "Writes", "Calls"],
        Some("DataBlock") => &["Field"],
        _ => &[],
    }
}

#[derive(Default)]
struct Builder {
    project: PlcProject,
    seen_root: bool,
    module_ids: HashSet<String>,
    signal_names: HashSet<String>,
    fb_names: HashSet<String>,
    db_names: HashSet<String>,
    field_names: HashSet<String>,
    fb_refs: HashSet<(u8, String)>,
}

impl Builder {
    fn open(&mut self, name: &str, e: &BytesStart<'_>, path: &str) -> Result<(), PlcError> {
        let duplicate = |what: &str, id: &str| violation(path, format!("duplicate {what} {id:?}"));
        match name {
            "PlcProject" => {
                if std::mem::replace(&mut self.seen_root, true) {
                    return Err(violation(path, "multiple root elements"));
                }
                self.project.name = Attrs::read(e, path, &["name"])?.required("name")?;
            }
            "Hardware" | "Signals" | "Blocks" => {
                Attrs::read(e, path, &[])?;
            }
            "Module" => {
                let a = Attrs::read(e, path, &["id", "type"])?;
                let module = HardwareModule {
                    id: a.required("id")?,
                    kind: a.keyword("type")?,
                };
                if !self.module_ids.insert(module.id.clone()) {
                    return Err(duplicate("module id", &module.id));
                }
                self.project.hardware_modules.push(module);
            }
            "Signal" => {
                let a = Attrs::read(
                    e,
                    path,
                    &["name", "address", "direction", "datatype", "module"],
                )?;
                let signal = Signal {
                    name: a.required("name")?,
                    address: a.required("address")?,
                    direction: a.keyword("direction")?,
                    datatype: a.keyword("datatype")?,
                    module: a.required("module")?,
                };
                if !self.signal_names.insert(signal.name.clone()) {
                    return Err(duplicate("signal", &signal.name));
                }
                self.project.signals.push(signal);
            }
            "FunctionBlock" => {
                let fb_name = Attrs::read(e, path, &["name"])?.required("name")?;
                if !self.fb_names.insert(fb_name.clone()) {
                    return Err(duplicate("function block", &fb_name));
                }
                self.fb_refs.clear();
                self.project.function_blocks.push(FunctionBlock {
                    name: fb_name,
                    ..Default::default()
                });
            }
            "Reads" | "Writes" | "Calls" => {
                let (attr, tag) = match name {
                    "Reads" => ("signal", 0u8),
                    "Writes" => ("signal", 1),
                    _ => ("block", 2),
                };
                let target = Attrs::read(e, path, &[attr])?.required(attr)?;
                if !self.fb_refs.insert((tag, target.clone())) {
                    return Err(duplicate(&format!("{name} entry"), &target));
                }
                let fb = self
                    .project
                    .function_blocks
                    .last_mut()
                    .expect("parent FunctionBlock open");
                match tag {
                    0 => fb.reads.push(target),
                    1 => fb.writes.push(target),
                    _ => fb.calls.push(target),
                }
            }
            "DataBlock" => {
                let db_name = Attrs::read(e, path, &["name"])?.required("name")?;
                if !self.db_names.insert(db_name.clone()) {
                    return Err(duplicate("data block", &db_name));
                }
                self.field_names.clear();
                self.project.data_blocks.push(DataBlock {
                    name: db_name,
                    fields: Vec::new(),
                });
            }
            "Field" => {
                let a = Attrs::read(e, path, &["name", "datatype"])?;
                let field = DataField {
                    name: a.required("name")?,
                    datatype: a.keyword("datatype")?,
                };
                if !self.field_names.insert(field.name.clone()) {
                    return Err(duplicate("field", &field.name));
                }
                self.project
                    .data_blocks
                    .last_mut()
                    .expect("parent DataBlock open")
                    .fields
                    .push(field);
            }
            other => unreachable!("element {other} passed the child table"),
        }
        Ok(())
    }
}

/// Parse without reference resolution. Structural errors are reported at
/// the first offending element.
pub fn parse_plc_export_unresolved(xml: &[u8]) -> Result<PlcProject, PlcError> {
    let mut reader = Reader::from_reader(xml);
    reader.config_mut().trim_text(true);
    let mut stack: Vec<Frame> = Vec::new();
    let mut root_counts: HashMap<String, usize> = HashMap::new();
    let mut builder = Builder::default();
    let mut buf = Vec::new();

    loop {
        let current_path = stack.last().map_or("/", |f| f.path.as_str()).to_string();
        let event = reader.read_event_into(&mut buf).map_err(|e| {
            violation(
                &current_path,
                format!("malformed XML at byte {}: {e}", reader.error_position()),
            )
        })?;
        match event {
            Event::Start(ref e) | Event::Empty(ref e) => {
                let name = String::from_utf8_lossy(e.name().as_ref()).into_owned();
                let parent = stack.last().map(|f| f.name.clone());
                let parent_path = stack.last().map_or(String::new(), |f| f.path.clone());
                let counts = match stack.last_mut() {
                    Some(f) => &mut f.child_counts,
                    None => &mut root_counts,
                };
                let ordinal = {
                    let c = counts.entry(name.clone()).or_default();
                    *c += 1;
                    *c
                };
                let path = format!("{parent_path}/{name}[{ordinal}]");
                if !allowed_children(parent.as_deref()).contains(&name.as_str()) {
                    return Err(violation(&path, format!("unexpected element <{name}>")));
                }
                if matches!(name.as_str(), "Hardware" | "Signals" | "Blocks") && ordinal > 1 {
                    return Err(violation(&path, format!("repeated section <{name}>")));
                }
                builder.open(&name, e, &path)?;
                if matches!(event, Event::Start(_)) {
                    stack.push(Frame {
                        name,
                        path,
                        child_counts: HashMap::new(),
                    });
                }
            }
            Event::End(_) => {
                stack.pop();
            }
            Event::Text(t) => {
                let text = String::from_utf8_lossy(t.as_ref());
                if !text.trim().is_empty() {
                    return Err(violation(&current_path, "unexpected text content"));
                }
            }
            Event::CData(_) => return Err(violation(&current_path, "unexpected CDATA")),
            Event::Eof => break,
            _ => {}
        }
        buf.clear();
    }
    if !builder.seen_root {
        return Err(violation("/", "missing <PlcProject> root element"));
    }
    Ok(builder.project)
}

/// Parse and resolve. All dangling references are collected before failing.
pub fn parse_plc_export(xml: &[u8]) -> Result<PlcProject, PlcError> {
    let project = parse_plc_export_unresolved(xml)?;
    let dangling = project.dangling_references();
    if dangling.is_empty() {
        Ok(project)
    } else {
        Err(PlcError::DanglingReferences(dangling))
    }
}

fn element<'a>(name: &'a str, attrs: &[(&'a str, &'a str)]) -> BytesStart<'a> {
    let mut e = BytesStart::new(name);
    for attr in attrs {
        e.push_attribute(*attr);
    }
    e
}

fn write_section<T>(
    w: &mut Writer<Vec<u8>>,
    name: &str,
    items: &[T],
    mut body: impl FnMut(&mut Writer<Vec<u8>>, &T) -> std::io::Result<()>,
) -> Result<(), quick_xml::Error> {
    if items.is_empty() {
        w.write_event(Event::Empty(BytesStart::new(name)))?;
        return Ok(());
    }
    w.write_event(Event::Start(BytesStart::new(name)))?;
    for item in items {
        body(w, item)?;
    }
    w.write_event(Event::End(BytesEnd::new(name)))?;
    Ok(())
}

fn write_project(p: &PlcProject) -> Result<Vec<u8>, quick_xml::Error> {
    let mut w = Writer::new_with_indent(Vec::new(), b' ', 2);
    w.write_event(Event::Decl(BytesDecl::new("1.0", Some("UTF-8"), None)))?;
    w.write_event(Event::Start(element("PlcProject", &[("name", &p.name)])))?;
    write_section(&mut w, "Hardware", &p.hardware_modules, |w, m| {
        w.write_event(Event::Empty(element(
            "Module",
            &[("id", &m.id), ("type", m.kind.as_str())],
        )))
    })?;
    write_section(&mut w, "Signals", &p.signals, |w, s| {
        w.write_event(Event::Empty(element(
            "Signal",
            &[
                ("name", &s.name),
                ("address", &s.address),
                ("direction", s.direction.as_str()),
                ("datatype", s.datatype.as_str()),
                ("module", &s.module),
            ],
        )))
    })?;

    let has_blocks = !p.function_blocks.is_empty() || !p.data_blocks.is_empty();
    if has_blocks {
        w.write_event(Event::Start(BytesStart::new("Blocks")))?;
        for fb in &p.function_blocks {
            let start = element("FunctionBlock", &[("name", &fb.name)]);
            if fb.reads.is_empty() && fb.writes.is_empty() && fb.calls.is_empty() {
                w.write_event(Event::Empty(start))?;
                continue;
            }
            w.write_event(Event::Start(start))?;
            for s in &fb.reads {
                w.write_event(Event::Empty(element("Reads", &[("signal", s)])))?;
            }
            for s in &fb.writes {
                w.write_event(Event::Empty(element("Writes", &[("signal", s)])))?;
            }
            for b in &fb.calls {
                w.write_event(Event::Empty(element("Calls", &[("block", b)])))?;
            }
            w.write_event(Event::End(BytesEnd::new("FunctionBlock")))?;
        }
        for db in &p.data_blocks {
            let start = element("DataBlock", &[("name", &db.name)]);
            if db.fields.is_empty() {
                w.write_event(Event::Empty(start))?;
                continue;
            }
            w.write_event(Event::Start(start))?;
            for f in &db.fields {
                w.write_event(Event::Empty(element(
                    "Field",
                    &[("name", &f.name), ("datatype", f.datatype.as_str())],
                )))?;
            }
            w.write_event(Event::End(BytesEnd::new("DataBlock")))?;
        }
        w.write_event(Event::End(BytesEnd::new("Blocks")))?;
    } else {
        w.write_event(Event::Empty(BytesStart::new("Blocks")))?;
    }
    w.write_event(Event::End(BytesEnd::new("PlcProject")))?;
    let mut out = w.into_inner();
    out.push(b'\n');
    Ok(out)
}

/// Canonical document: fixed attribute order, two-space indentation, every
/// section present (empty ones self-closed), function blocks before data blocks.
pub fn serialize_plc_export(project: &PlcProject) -> Vec<u8> {
    write_project(project).expect("writing to memory cannot fail")
}

/// Apply the fixed rule table:
///
/// | element        | node label       | edges                          |
/// |----------------|------------------|--------------------------------|
/// | Module         | `HardwareModule` |                                |
/// | Signal         | `Signal`         | `MAPPED_TO` → module           |
/// | FunctionBlock  | `FunctionBlock`  | `READS`/`WRITES` → signal, `CALLS` → block |
/// | DataBlock      | `DataBlock`      |                                |
pub fn build_software_graph(project: &PlcProject) -> GraphFragment {
    let mut frag = GraphFragment::default();
    for m in &project.hardware_modules {
        frag.nodes.push(
            Node::new(hardware_node_id(&m.id), labels::HARDWARE_MODULE)
                .with_prop("id", m.id.as_str())
                .with_prop("kind", m.kind.as_str()),
        );
    }
    for s in &project.signals {
        let id = signal_node_id(&s.name);
        frag.nodes.push(
            Node::new(id.clone(), labels::SIGNAL)
                .with_prop("name", s.name.as_str())
                .with_prop("address", s.address.as_str())
                .with_prop("direction", s.direction.as_str())
                .with_prop("datatype", s.datatype.as_str())
                .with_prop("module", s.module.as_str())
                .with_prop("provenance", "plc"),
        );
        frag.edges.push(Edge::new(
            edge_types::MAPPED_TO,
            id,
            hardware_node_id(&s.module),
        ));
    }
    for fb in &project.function_blocks {
        let id = function_block_node_id(&fb.name);
        frag.nodes.push(
            Node::new(id.clone(), labels::FUNCTION_BLOCK).with_prop("name", fb.name.as_str()),
        );
        for s in &fb.reads {
            frag.edges
                .push(Edge::new(edge_types::READS, id.clone(), signal_node_id(s)));
        }
        for s in &fb.writes {
            frag.edges
                .push(Edge::new(edge_types::WRITES, id.clone(), signal_node_id(s)));
        }
        for b in &fb.calls {
            frag.edges.push(Edge::new(
                edge_types::CALLS,
                id.clone(),
                function_block_node_id(b),
            ));
        }
    }
    for db in &project.data_blocks {
        let fields: Vec<String> = db
            .fields
            .iter()
            .map(|f| format!("{}:{}", f.name, f.datatype))
            .collect();
        frag.nodes.push(
            Node::new(data_block_node_id(&db.name), labels::DATA_BLOCK)
                .with_prop("name", db.name.as_str())
                .with_prop("field_count", db.fields.len())
                .with_prop("fields", fields.join(";")),
        );
    }
    frag
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MINIMAL: &str = r#"<?xml version="1.0" encoding="UTF-8"?>
<PlcProject name="mini">
  <Hardware><Module id="DI1" type="DI"/></Hardware>
  <Signals><Signal name="lb1" address="%I0.0" direction="in" datatype="BOOL" module="DI1"/></Signals>
</PlcProject>"#;

    #[test]
    fn minimal_export() {
        let p = parse_plc_export(MINIMAL.as_bytes()).unwrap();
        assert_eq!(p.name, "mini");
        assert_eq!(p.signals.len(), 1);
        assert!(p.function_blocks.is_empty());
        assert_eq!(p.signals[0].direction, SignalDirection::In);
    }

    #[test]
    fn undeclared_signal_is_dangling() {
        let xml = r#"<PlcProject name="p"><Blocks>
            <FunctionBlock name="fb"><Reads signal="X"/></FunctionBlock></Blocks></PlcProject>"#;
        let err = parse_plc_export(xml.as_bytes()).unwrap_err();
        let PlcError::DanglingReferences(refs) = err else {
            panic!("expected dangling references")
        };
        assert_eq!(refs.len(), 1);
        assert_eq!(refs[0].name, "X");
        assert_eq!(refs[0].kind, RefKind::Signal);
    }

    #[test]
    fn all_danglers_are_collected() {
        let xml = r#"<PlcProject name="p">
            <Signals><Signal name="s" address="%I0.0" direction="in" datatype="BOOL" module="M9"/></Signals>
            <Blocks><FunctionBlock name="a"><Reads signal="x1"/><Writes signal="x2"/><Calls block="nope"/></FunctionBlock>
            <DataBlock name="d"/><FunctionBlock name="b"><Calls block="d"/></FunctionBlock></Blocks></PlcProject>"#;
        let Err(PlcError::DanglingReferences(refs)) = parse_plc_export(xml.as_bytes()) else {
            panic!()
        };
        let names: BTreeSet<&str> = refs.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, BTreeSet::from(["M9", "x1", "x2", "nope", "d"]));
    }

    #[test]
    fn schema_violations_carry_paths() {
        let cases = [
            (r#"<Project/>"#, "/Project[1]"),
            (
                r#"<PlcProject name="p"><Signals><Signal name="s" address="%I0.0" direction="sideways" datatype="BOOL" module="m"/></Signals></PlcProject>"#,
                "/PlcProject[1]/Signals[1]/Signal[1]",
            ),
            (
                r#"<PlcProject name="p"><Hardware><Module id="a" type="DI"/><Module id="a" type="DO"/></Hardware></PlcProject>"#,
                "/PlcProject[1]/Hardware[1]/Module[2]",
            ),
            (
                r#"<PlcProject name="p"><Hardware><Module id="a"/></Hardware></PlcProject>"#,
                "/PlcProject[1]/Hardware[1]/Module[1]",
            ),
            (
                r#"<PlcProject name="p"><Blocks><DataBlock name="d"><Field name="f" datatype="INT"/><Field name="f" datatype="INT"/></DataBlock></Blocks></PlcProject>"#,
                "/PlcProject[1]/Blocks[1]/DataBlock[1]/Field[2]",
            ),
            (
                r#"<PlcProject name="p">text</PlcProject>"#,
                "/PlcProject[1]",
            ),
            (r#"<PlcProject name="p" x="1"/>"#, "/PlcProject[1]"),
            (
                r#"<PlcProject name="p"><Signals/><Signals/></PlcProject>"#,
                "/PlcProject[1]/Signals[2]",
            ),
            ("", "/"),
        ];
        for (xml, expected) in cases {
            match parse_plc_export(xml.as_bytes()) {
                Err(PlcError::SchemaViolation { path, .. }) => assert_eq!(path, expected, "{xml}"),
                other => panic!("{xml}: {other:?}"),
            }
        }
    }

    #[test]
    fn rule_application() {
        let p = PlcProject {
            name: "p".into(),
            hardware_modules: vec![
                HardwareModule {
                    id: "DI1".into(),
                    kind: ModuleKind::Di,
                },
                HardwareModule {
                    id: "DO1".into(),
                    kind: ModuleKind::Do,
                },
            ],
            signals: vec![
                Signal {
                    name: "lb1".into(),
                    address: "%I0.0".into(),
                    direction: SignalDirection::In,
                    datatype: DataType::Bool,
                    module: "DI1".into(),
                },
                Signal {
                    name: "m1".into(),
                    address: "%Q0.0".into(),
                    direction: SignalDirection::Out,
                    datatype: DataType::Bool,
                    module: "DO1".into(),
                },
            ],
            function_blocks: vec![FunctionBlock {
                name: "rowctl".into(),
                reads: vec!["lb1".into()],
                writes: vec!["m1".into()],
                calls: vec![],
            }],
            data_blocks: vec![DataBlock {
                name: "cfg".into(),
                fields: vec![DataField {
                    name: "v".into(),
                    datatype: DataType::Real,
                }],
            }],
        };
        let frag = build_software_graph(&p);
        assert_eq!(frag.nodes.len(), 2 + 2 + 1 + 1);
        let ids: Vec<&str> = frag.edges.iter().map(|e| e.id.as_str()).collect();
        assert!(ids.contains(&"READS:fb:rowctl->sig:lb1"));
        assert!(ids.contains(&"WRITES:fb:rowctl->sig:m1"));
        assert!(ids.contains(&"MAPPED_TO:sig:lb1->hw:DI1"));
        assert_eq!(frag.edges.len(), 4);
        assert_eq!(
            build_software_graph(&PlcProject::default()),
            GraphFragment::default()
        );
    }

    #[test]
    fn empty_project_serializes_with_empty_sections() {
        let bytes = serialize_plc_export(&PlcProject {
            name: "empty".into(),
            ..Default::default()
        });
        let text = String::from_utf8(bytes.clone()).unwrap();
        for section in ["<Hardware/>", "<Signals/>", "<Blocks/>"] {
            assert!(text.contains(section), "{text}");
        }
        assert_eq!(parse_plc_export(&bytes).unwrap().name, "empty");
    }

    #[test]
    fn one_signal_round_trips() {
        let p = parse_plc_export(MINIMAL.as_bytes()).unwrap();
        assert_eq!(parse_plc_export(&serialize_plc_export(&p)).unwrap(), p);
    }

    fn arb_name() -> impl Strategy<Value = String> {
        "[A-Za-z][A-Za-z0-9_.<>&\"']{0,8}"
    }

    fn arb_project() -> impl Strategy<Value = PlcProject> {
        (
            arb_name(),
            proptest::collection::btree_set(arb_name(), 1..4),
            proptest::collection::btree_set(arb_name(), 0..6),
            proptest::collection::btree_set(arb_name(), 0..4),
            proptest::collection::btree_set(arb_name(), 0..3),
            any::<u64>(),
        )
            .prop_map(|(name, modules, signals, blocks, dbs, seed)| {
                let modules: Vec<String> = modules.into_iter().collect();
                let signals: Vec<String> = signals.into_iter().collect();
                let blocks: Vec<String> = blocks.into_iter().collect();
                let pick = |i: usize| (seed >> (i % 64)) & 1 == 1;
                PlcProject {
                    name,
                    hardware_modules: modules
                        .iter()
                        .map(|id| HardwareModule {
                            id: id.clone(),
                            kind: ModuleKind::Di,
                        })
                        .collect(),
                    signals: signals
                        .iter()
                        .enumerate()
                        .map(|(i, s)| Signal {
                            name: s.clone(),
                            address: format!("%I{i}.0"),
                            direction: if pick(i) {
                                SignalDirection::In
                            } else {
                                SignalDirection::Out
                            },
                            datatype: DataType::Bool,
                            module: modules[i % modules.len()].clone(),
                        })
                        .collect(),
                    function_blocks: blocks
                        .iter()
                        .enumerate()
                        .map(|(i, b)| FunctionBlock {
                            name: b.clone(),
                            reads: signals
                                .iter()
                                .enumerate()
                                .filter(|(j, _)| pick(i + j))
                                .map(|(_, s)| s.clone())
                                .collect(),
                            writes: signals
                                .iter()
                                .enumerate()
                                .filter(|(j, _)| pick(i + j + 7))
                                .map(|(_, s)| s.clone())
                                .collect(),
                            calls: blocks
                                .iter()
                                .filter(|c| *c != b && pick(i + 13))
                                .cloned()
                                .collect(),
                        })
                        .collect(),
                    data_blocks: dbs
                        .into_iter()
                        .map(|d| DataBlock {
                            name: d,
                            fields: vec![DataField {
                                name: "f".into(),
                                datatype: DataType::Int,
                            }],
                        })
                        .collect(),
                }
            })
    }

    proptest! {
        #[test]
        fn parse_after_serialize_is_identity(p in arb_project()) {
            let bytes = serialize_plc_export(&p);
            let back = parse_plc_export(&bytes).unwrap();
            prop_assert_eq!(&back, &p);
            prop_assert_eq!(serialize_plc_export(&back), bytes);
        }

        #[test]
        fn graph_has_one_node_per_element_and_one_edge_per_entry(p in arb_project()) {
            let frag = build_software_graph(&p);
            prop_assert_eq!(
                frag.nodes.len(),
                p.hardware_modules.len() + p.signals.len() + p.function_blocks.len() + p.data_blocks.len()
            );
            let refs: usize = p.function_blocks.iter().map(|f| f.reads.len() + f.writes.len() + f.calls.len()).sum();
            prop_assert_eq!(frag.edges.len(), refs + p.signals.len());
            let ids: HashSet<&str> = frag.nodes.iter().map(|n| n.id.as_str()).collect();
            prop_assert_eq!(ids.len(), frag.nodes.len());
            prop_assert_eq!(build_software_graph(&p), frag);
        }
    }
}
