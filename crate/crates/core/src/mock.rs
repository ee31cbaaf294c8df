//! Simulated stock-quote services with configurable parser, dispatch, hash
//! and field-handling models, plus fault injection for quorum tests.
//!
//! Each fleet runs on its own tokio runtime so that cost-model sleeps and
//! parsing never share worker threads with the client under test.

use std::cell::Cell;
use std::collections::hash_map::RandomState;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::BuildHasher;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use base64::Engine as _;
use base64::engine::general_purpose::STANDARD as BASE64;
use quick_xml::Reader;
use quick_xml::events::{BytesStart, Event};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::{TcpListener, TcpSocket, TcpStream};
use tokio::runtime::Runtime;
use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::attack::{self, OPAQUE_ELEMENT, OPAQUE_VALUE_ELEMENT};
use crate::http::{self, HttpRequest, HttpResponse};
use crate::soap::{self, OP_GET_QUOTE, OP_PURCHASE_STOCK, OPERATION_HEADER};

/// Symbol → price table every mock answers from.
pub const QUOTES: &[(&str, &str)] =
    &[("ACME", "101.25"), ("GLOBEX", "57.10"), ("HOOLI", "230.50"), ("INITECH", "12.75"), ("UMBRELLA", "88.00")];

pub fn quote(symbol: &str) -> Option<&'static str> {
    QUOTES.iter().find(|(s, _)| *s == symbol).map(|(_, p)| *p)
}

#[derive(Debug, Error)]
pub enum MockError {
    #[error("mock `{id}` cannot listen on {addr}: {source}")]
    Bind { id: String, addr: SocketAddr, source: std::io::Error },
    #[error("invalid profile `{id}`: {reason}")]
    InvalidProfile { id: String, reason: String },
    #[error("duplicate mock id `{0}`")]
    DuplicateId(String),
    #[error("no mock named `{0}`")]
    NotFound(String),
    #[error("runtime: {0}")]
    Runtime(std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParserModel {
    /// Builds the whole document tree before handling the request.
    EagerTree,
    /// Single pass with a depth counter; rejects deep or large messages early.
    Streaming,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DispatchModel {
    /// The operation header wins over the body.
    HeaderTrusting,
    BodyBased,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HashModel {
    WeakHash,
    RandomizedHash,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InjectionModel {
    /// A repeated field silently replaces the earlier value.
    Lenient,
    /// A repeated field is a schema violation.
    SchemaStrict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultMode {
    #[default]
    None,
    /// Listener closed; connections are refused.
    Crash,
    ByzantineWrongAnswer,
    Slow {
        ms: u64,
    },
    /// The next `count` connections are closed without a response.
    FailNext {
        count: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockServiceProfile {
    pub id: String,
    pub parser_model: ParserModel,
    pub dispatch_model: DispatchModel,
    pub hash_model: HashModel,
    #[serde(default = "default_injection")]
    pub injection_model: InjectionModel,
    #[serde(rename = "base_latency_ms", with = "crate::durations::ms", default = "default_base_latency")]
    pub base_latency: Duration,
    #[serde(rename = "per_element_cost_us", with = "crate::durations::us", default = "default_element_cost")]
    pub per_element_cost: Duration,
    #[serde(default = "default_depth_limit")]
    pub depth_limit: usize,
    /// Streaming services refuse larger messages before parsing.
    #[serde(default = "default_max_message")]
    pub max_message_bytes: usize,
    #[serde(rename = "per_collision_cost_us", with = "crate::durations::us", default = "default_collision_cost")]
    pub per_collision_cost: Duration,
    #[serde(default)]
    pub fault_mode: FaultMode,
    #[serde(default = "default_operations")]
    pub operations: Vec<String>,
    /// Fixed port; otherwise derived from the fleet's listen base.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub port: Option<u16>,
}

fn default_injection() -> InjectionModel {
    InjectionModel::SchemaStrict
}
fn default_base_latency() -> Duration {
    Duration::from_millis(10)
}
fn default_element_cost() -> Duration {
    Duration::from_micros(20)
}
fn default_depth_limit() -> usize {
    1000
}
fn default_max_message() -> usize {
    1024 * 1024
}
fn default_collision_cost() -> Duration {
    Duration::from_micros(3)
}
fn default_operations() -> Vec<String> {
    vec![OP_GET_QUOTE.to_string(), OP_PURCHASE_STOCK.to_string()]
}

impl MockServiceProfile {
    /// Tree-building, header-trusting, weak-hash, last-wins service.
    pub fn eager_tree(id: &str) -> Self {
        MockServiceProfile {
            id: id.to_string(),
            parser_model: ParserModel::EagerTree,
            dispatch_model: DispatchModel::HeaderTrusting,
            hash_model: HashModel::WeakHash,
            injection_model: InjectionModel::Lenient,
            base_latency: default_base_latency(),
            per_element_cost: default_element_cost(),
            depth_limit: default_depth_limit(),
            max_message_bytes: default_max_message(),
            per_collision_cost: default_collision_cost(),
            fault_mode: FaultMode::None,
            operations: default_operations(),
            port: None,
        }
    }

    /// Hardened counterpart of [`eager_tree`](Self::eager_tree).
    pub fn streaming(id: &str) -> Self {
        MockServiceProfile {
            parser_model: ParserModel::Streaming,
            dispatch_model: DispatchModel::BodyBased,
            hash_model: HashModel::RandomizedHash,
            injection_model: InjectionModel::SchemaStrict,
            ..MockServiceProfile::eager_tree(id)
        }
    }

    pub fn with_fault(mut self, fault: FaultMode) -> Self {
        self.fault_mode = fault;
        self
    }

    pub fn with_base_latency(mut self, d: Duration) -> Self {
        self.base_latency = d;
        self
    }

    pub fn validate(&self) -> Result<(), MockError> {
        let bad = |reason: &str| Err(MockError::InvalidProfile { id: self.id.clone(), reason: reason.to_string() });
        if self.id.trim().is_empty() {
            return bad("id is empty");
        }
        match self.parser_model {
            ParserModel::EagerTree if self.per_element_cost.is_zero() => {
                bad("EagerTree needs a positive per_element_cost")
            }
            ParserModel::Streaming if self.depth_limit == 0 => bad("Streaming needs depth_limit >= 1"),
            _ if self.operations.is_empty() => bad("at least one operation is required"),
            _ => Ok(()),
        }
    }
}

/// The five-service fleet: two tree-building services and three streaming ones.
pub fn table2_fleet() -> Vec<MockServiceProfile> {
    vec![
        MockServiceProfile::eager_tree("axis2-a"),
        MockServiceProfile::eager_tree("axis2-b"),
        MockServiceProfile::streaming("aspnet-a"),
        MockServiceProfile::streaming("aspnet-b"),
        MockServiceProfile::streaming("aspnet-c"),
    ]
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockStats {
    pub requests_received: u64,
    pub requests_served: u64,
    pub executions_completed: u64,
    pub executions_cancelled: u64,
    pub operations: BTreeMap<String, u64>,
}

#[derive(Default)]
struct Counters {
    received: AtomicU64,
    served: AtomicU64,
    completed: AtomicU64,
    cancelled: AtomicU64,
    operations: Mutex<BTreeMap<String, u64>>,
}

impl Counters {
    fn snapshot(&self) -> MockStats {
        MockStats {
            requests_received: self.received.load(Ordering::SeqCst),
            requests_served: self.served.load(Ordering::SeqCst),
            executions_completed: self.completed.load(Ordering::SeqCst),
            executions_cancelled: self.cancelled.load(Ordering::SeqCst),
            operations: self.operations.lock().unwrap().clone(),
        }
    }
}

/// Result of running one SOAP request through a service model.
#[derive(Debug, Clone, PartialEq)]
pub struct Handled {
    pub status: u16,
    pub body: String,
    /// Simulated processing time to sleep before answering.
    pub cost: Duration,
    pub executed: Option<String>,
}

#[derive(Debug, Default)]
struct Message {
    operation: Option<String>,
    attributes: Vec<String>,
    fields: Vec<(String, String)>,
    cipher: Option<String>,
    elements: usize,
}

enum ParseFailure {
    Fault(String),
    Abandoned,
}

/// Per-service behaviour, independent of networking.
pub struct ServiceModel {
    profile: MockServiceProfile,
    seed: RandomState,
}

impl ServiceModel {
    pub fn new(profile: MockServiceProfile) -> Self {
        ServiceModel { profile, seed: RandomState::new() }
    }

    pub fn profile(&self) -> &MockServiceProfile {
        &self.profile
    }

    /// Processes one request; `fault` is the current fault mode.
    pub fn handle(&self, envelope: &[u8], headers: &[(String, String)], fault: FaultMode) -> Handled {
        self.run(envelope, headers, fault, &Pacing::none()).expect("never abandoned")
    }

    /// Processes one request as a live server: tree building sleeps its
    /// per-element cost as it goes and stops with `None` once `abandoned` is
    /// set. The returned cost is what remains to be waited.
    pub fn handle_live(
        &self,
        envelope: &[u8],
        headers: &[(String, String)],
        fault: FaultMode,
        abandoned: &AtomicBool,
    ) -> Option<Handled> {
        let pacing = Pacing { abandoned: Some(abandoned), slept: Cell::new(Duration::ZERO) };
        let mut handled = self.run(envelope, headers, fault, &pacing)?;
        handled.cost = handled.cost.saturating_sub(pacing.slept.get());
        Some(handled)
    }

    fn run(
        &self,
        envelope: &[u8],
        headers: &[(String, String)],
        fault: FaultMode,
        pacing: &Pacing<'_>,
    ) -> Option<Handled> {
        let mut cost = self.profile.base_latency;
        if let FaultMode::Slow { ms } = fault {
            cost += Duration::from_millis(ms);
        }
        match self.parse_with_opaque(envelope, pacing) {
            Ok((msg, parse_cost)) => Some(self.respond(msg, cost + parse_cost, headers, fault)),
            Err(ParseFailure::Fault(reason)) => Some(self.fault(cost + pacing.slept.get(), "Sender", &reason)),
            Err(ParseFailure::Abandoned) => None,
        }
    }

    fn respond(&self, msg: Message, mut cost: Duration, headers: &[(String, String)], fault: FaultMode) -> Handled {
        let comparisons = self.insert_attributes(&msg.attributes);
        cost += self.profile.per_collision_cost * comparisons.min(u32::MAX as u64) as u32;

        let Some(body_op) = msg.operation.clone() else {
            return self.fault(cost, "Sender", "empty body");
        };
        let operation = match (self.profile.dispatch_model, soap::header(headers, OPERATION_HEADER)) {
            (DispatchModel::HeaderTrusting, Some(h)) if !soap::normalize_action(h).is_empty() => {
                soap::normalize_action(h).to_string()
            }
            _ => body_op,
        };
        if !self.profile.operations.contains(&operation) {
            return self.fault(cost, "Sender", &format!("unsupported operation {operation}"));
        }
        let fields = match self.resolve_fields(&msg.fields) {
            Ok(f) => f,
            Err(reason) => return self.fault(cost, "Sender", &reason),
        };
        let symbol = fields.get("symbol").cloned().unwrap_or_default();
        let Some(price) = quote(&symbol) else {
            return self.fault(cost, "Sender", &format!("unknown symbol {symbol}"));
        };
        let cents = price_cents(price) + if fault == FaultMode::ByzantineWrongAnswer { 100 } else { 0 };
        let response = if operation == OP_PURCHASE_STOCK {
            let qty: u64 = match fields.get("quantity").map(|q| q.parse()) {
                None => 1,
                Some(Ok(q)) if q > 0 => q,
                Some(_) => return self.fault(cost, "Sender", "quantity must be a positive integer"),
            };
            vec![
                ("symbol".to_string(), symbol),
                ("quantity".to_string(), qty.to_string()),
                ("total".to_string(), format_cents(cents * qty)),
            ]
        } else {
            vec![("symbol".to_string(), symbol), ("price".to_string(), format_cents(cents))]
        };
        Handled {
            status: 200,
            body: self.render(&attack::operation_marker(&operation), &response),
            cost,
            executed: Some(operation),
        }
    }

    fn fault(&self, cost: Duration, code: &str, reason: &str) -> Handled {
        let body = soap::fault(code, reason);
        let body = if self.profile.parser_model == ParserModel::EagerTree { pretty(&body) } else { body };
        Handled { status: 500, body, cost, executed: None }
    }

    fn render(&self, element: &str, fields: &[(String, String)]) -> String {
        match self.profile.parser_model {
            ParserModel::Streaming => {
                let inner: String = fields.iter().map(|(k, v)| format!("<{k}>{}</{k}>", xml_escape(v))).collect();
                soap::envelope(&format!("<{element}>{inner}</{element}>"))
            }
            ParserModel::EagerTree => {
                let mut out = format!(
                    "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<soap:Envelope xmlns:soap=\"{}\">\n  <soap:Header/>\n  <soap:Body>\n    <{element}>\n",
                    soap::SOAP_NS
                );
                for (k, v) in fields {
                    out.push_str(&format!("      <{k}>{}</{k}>\n", xml_escape(v)));
                }
                out.push_str(&format!("    </{element}>\n  </soap:Body>\n</soap:Envelope>\n"));
                out
            }
        }
    }

    fn resolve_fields(&self, fields: &[(String, String)]) -> Result<BTreeMap<String, String>, String> {
        let mut out = BTreeMap::new();
        for (k, v) in fields {
            if out.insert(k.clone(), v.clone()).is_some()
                && self.profile.injection_model == InjectionModel::SchemaStrict
            {
                return Err(format!("element {k} appears more than once"));
            }
        }
        Ok(out)
    }

    /// Inserts keys into a chained table of 1024 buckets and returns the
    /// number of key comparisons made.
    fn insert_attributes(&self, keys: &[String]) -> u64 {
        let buckets = attack::WEAK_HASH_BUCKETS as usize;
        let mut table: Vec<Vec<&str>> = vec![Vec::new(); buckets];
        let mut comparisons = 0u64;
        for key in keys {
            let b = match self.profile.hash_model {
                HashModel::WeakHash => attack::weak_bucket(key.as_bytes()) as usize,
                HashModel::RandomizedHash => (self.seed.hash_one(key) % buckets as u64) as usize,
            };
            let chain = &mut table[b];
            let mut present = false;
            for existing in chain.iter() {
                comparisons += 1;
                if *existing == key {
                    present = true;
                    break;
                }
            }
            if !present {
                chain.push(key);
            }
        }
        comparisons
    }

    fn parse_with_opaque(&self, envelope: &[u8], pacing: &Pacing<'_>) -> Result<(Message, Duration), ParseFailure> {
        let (msg, mut cost) = self.parse(envelope, pacing)?;
        let Some(cipher) = msg.cipher.as_deref() else {
            return Ok((msg, cost));
        };
        let mut cleaned = cipher.as_bytes().to_vec();
        if cleaned.iter().any(u8::is_ascii_whitespace) {
            cleaned.retain(|b| !b.is_ascii_whitespace());
        }
        let inner =
            BASE64.decode(&cleaned).map_err(|_| ParseFailure::Fault("opaque region is not valid base64".into()))?;
        let inner = String::from_utf8(inner).map_err(|_| ParseFailure::Fault("opaque region is not UTF-8".into()))?;
        let (inner_msg, inner_cost) = self.parse(soap::envelope(&inner).as_bytes(), pacing)?;
        if inner_msg.cipher.is_some() {
            return Err(ParseFailure::Fault("nested opaque regions are not supported".into()));
        }
        cost += inner_cost;
        Ok((inner_msg, cost))
    }

    fn parse(&self, envelope: &[u8], pacing: &Pacing<'_>) -> Result<(Message, Duration), ParseFailure> {
        match self.profile.parser_model {
            ParserModel::EagerTree => {
                let tree = Tree::build(envelope, |n| pacing.pay(self.profile.per_element_cost * n as u32))?;
                let cost = self.profile.per_element_cost * tree.nodes.len().min(u32::MAX as usize) as u32;
                Ok((tree.message(), cost))
            }
            ParserModel::Streaming => {
                if envelope.len() > self.profile.max_message_bytes {
                    return Err(ParseFailure::Fault(format!(
                        "message exceeds {} bytes",
                        self.profile.max_message_bytes
                    )));
                }
                stream_message(envelope, self.profile.depth_limit).map(|m| (m, Duration::ZERO))
            }
        }
    }
}

fn price_cents(price: &str) -> u64 {
    let (whole, frac) = price.split_once('.').unwrap_or((price, "0"));
    whole.parse::<u64>().unwrap_or(0) * 100 + format!("{frac:0<2}")[..2].parse::<u64>().unwrap_or(0)
}

fn format_cents(c: u64) -> String {
    format!("{}.{:02}", c / 100, c % 100)
}

fn xml_escape(s: &str) -> String {
    quick_xml::escape::escape(s).into_owned()
}

/// Re-indents the compact fault envelope for tree-building services.
fn pretty(compact: &str) -> String {
    compact.replace("><", ">\n<")
}

fn local_bytes(name: &[u8]) -> &[u8] {
    match name.iter().rposition(|&b| b == b':') {
        Some(i) => &name[i + 1..],
        None => name,
    }
}

fn local(name: &[u8]) -> String {
    String::from_utf8_lossy(local_bytes(name)).into_owned()
}

fn attribute_keys(e: &BytesStart<'_>) -> Result<Vec<String>, String> {
    e.attributes()
        .with_checks(false)
        .map(|a| {
            a.map(|a| String::from_utf8_lossy(a.key.as_ref()).into_owned())
                .map_err(|err| format!("bad attribute: {err}"))
        })
        .filter(|k| !matches!(k, Ok(k) if k == "xmlns" || k.starts_with("xmlns:")))
        .collect()
}

fn text_of(ev: &Event<'_>) -> Result<Option<String>, String> {
    let bad = |e: &dyn std::fmt::Display| format!("malformed text: {e}");
    Ok(match ev {
        Event::Text(t) => Some(t.xml10_content().map_err(|e| bad(&e))?.into_owned()),
        Event::CData(c) => Some(c.xml10_content().map_err(|e| bad(&e))?.into_owned()),
        Event::GeneralRef(r) => {
            if r.is_char_ref() {
                r.resolve_char_ref().map_err(|e| bad(&e))?.map(String::from)
            } else {
                let name = r.decode().map_err(|e| bad(&e))?;
                Some(
                    quick_xml::escape::resolve_predefined_entity(&name)
                        .ok_or_else(|| format!("undefined entity {name}"))?
                        .to_string(),
                )
            }
        }
        _ => None,
    })
}

struct Node {
    name: usize,
    parent: Option<usize>,
    attributes: Vec<String>,
    text: String,
}

/// The whole document in memory, as a tree-building parser holds it.
struct Tree {
    names: Vec<String>,
    nodes: Vec<Node>,
}

impl Tree {
    /// `slice` is called after every [`PACE_SLICE`] nodes and may stop the build.
    fn build(doc: &[u8], mut slice: impl FnMut(usize) -> Result<(), ParseFailure>) -> Result<Tree, ParseFailure> {
        let fault = |m: String| ParseFailure::Fault(m);
        let mut reader = Reader::from_reader(doc);
        let mut names: Vec<String> = Vec::new();
        let mut interned: HashMap<Vec<u8>, usize> = HashMap::new();
        let mut nodes: Vec<Node> = Vec::new();
        let mut stack: Vec<usize> = Vec::new();
        loop {
            let ev = reader.read_event().map_err(|e| fault(format!("malformed request: {e}")))?;
            match &ev {
                Event::Start(e) | Event::Empty(e) => {
                    let qname = e.name();
                    let local = local_bytes(qname.as_ref());
                    let name = match interned.get(local) {
                        Some(&i) => i,
                        None => {
                            names.push(String::from_utf8_lossy(local).into_owned());
                            interned.insert(local.to_vec(), names.len() - 1);
                            names.len() - 1
                        }
                    };
                    let id = nodes.len();
                    nodes.push(Node {
                        name,
                        parent: stack.last().copied(),
                        attributes: attribute_keys(e).map_err(fault)?,
                        text: String::new(),
                    });
                    if matches!(ev, Event::Start(_)) {
                        stack.push(id);
                    }
                    if nodes.len().is_multiple_of(PACE_SLICE) {
                        slice(PACE_SLICE)?;
                    }
                }
                Event::End(_) => {
                    stack.pop();
                }
                Event::Eof => break,
                other => {
                    if let (Some(t), Some(&cur)) = (text_of(other).map_err(fault)?, stack.last()) {
                        nodes[cur].text.push_str(&t);
                    }
                }
            }
        }
        if nodes.is_empty() || !stack.is_empty() {
            return Err(fault("malformed request: incomplete document".into()));
        }
        Ok(Tree { names, nodes })
    }

    fn name(&self, node: &Node) -> &str {
        &self.names[node.name]
    }

    fn children(&self, parent: usize) -> impl Iterator<Item = (usize, &Node)> {
        self.nodes.iter().enumerate().skip(parent + 1).filter(move |(_, n)| n.parent == Some(parent))
    }

    fn message(&self) -> Message {
        let mut msg = Message { elements: self.nodes.len(), ..Message::default() };
        let Some(body) = self.nodes.iter().position(|n| self.name(n) == "Body") else {
            return msg;
        };
        let Some((op_id, op)) = self.children(body).next() else {
            return msg;
        };
        let op_name = self.name(op).to_string();
        msg.attributes = op.attributes.clone();
        if op_name == OPAQUE_ELEMENT {
            msg.cipher =
                self.children(op_id).find(|(_, n)| self.name(n) == OPAQUE_VALUE_ELEMENT).map(|(_, n)| n.text.clone());
        } else {
            let mut has_children = vec![false; self.nodes.len()];
            for p in self.nodes.iter().filter_map(|n| n.parent) {
                has_children[p] = true;
            }
            for (id, n) in self.children(op_id) {
                if !has_children[id] {
                    msg.fields.push((self.name(n).to_string(), n.text.trim().to_string()));
                }
            }
        }
        msg.operation = Some(op_name);
        msg
    }
}

/// Single pass keeping a depth counter and the operation's direct fields.
fn stream_message(doc: &[u8], depth_limit: usize) -> Result<Message, ParseFailure> {
    let mut reader = Reader::from_reader(doc);
    reader.config_mut().check_end_names = false;
    let fault = |m: String| ParseFailure::Fault(m);
    let mut msg = Message::default();
    let mut depth = 0usize;
    let mut body_depth: Option<usize> = None;
    let mut op_depth: Option<usize> = None;
    let mut field: Option<(String, String)> = None;
    loop {
        let ev = reader.read_event().map_err(|e| fault(format!("malformed request: {e}")))?;
        match &ev {
            Event::Start(e) | Event::Empty(e) => {
                let d = depth + 1;
                if d > depth_limit {
                    return Err(fault(format!("nesting depth exceeds {depth_limit}")));
                }
                msg.elements += 1;
                let name = local(e.name().as_ref());
                match (body_depth, op_depth) {
                    (None, _) if name == "Body" => body_depth = Some(d),
                    (Some(b), None) if d == b + 1 => {
                        msg.operation = Some(name.clone());
                        msg.attributes = attribute_keys(e).map_err(fault)?;
                        op_depth = Some(d);
                    }
                    (_, Some(o)) if d == o + 1 => field = Some((name.clone(), String::new())),
                    _ => {}
                }
                if matches!(ev, Event::Start(_)) {
                    depth = d;
                } else if let Some((n, v)) = field.take() {
                    msg.fields.push((n, v));
                }
            }
            Event::End(_) => {
                if let (Some(o), Some(_)) = (op_depth, &field) {
                    if depth == o + 1 {
                        let (n, v) = field.take().expect("field open");
                        msg.fields.push((n, v.trim().to_string()));
                    }
                }
                if op_depth == Some(depth) {
                    // only the first operation element is read
                    break;
                }
                depth = depth.saturating_sub(1);
            }
            Event::Eof => break,
            other => {
                if let Some((_, v)) = field.as_mut() {
                    if let Some(t) = text_of(other).map_err(fault)? {
                        v.push_str(&t);
                    }
                }
            }
        }
    }
    if msg.operation.as_deref() == Some(OPAQUE_ELEMENT) {
        msg.cipher = msg.fields.iter().find(|(n, _)| n == OPAQUE_VALUE_ELEMENT).map(|(_, v)| v.clone());
        msg.fields.clear();
    }
    Ok(msg)
}

/// Operation listing served at `GET ...?wsdl`.
pub fn operation_listing(profile: &MockServiceProfile) -> String {
    let ops: String = profile.operations.iter().map(|o| format!("<operation name=\"{o}\"/>")).collect();
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<definitions name=\"stock-purchase\"><portType name=\"{}\">{ops}</portType></definitions>",
        profile.id
    )
}

struct MockState {
    model: ServiceModel,
    addr: SocketAddr,
    fault: Mutex<FaultMode>,
    fail_next: AtomicUsize,
    counters: Counters,
    accept_task: Mutex<Option<JoinHandle<()>>>,
    /// Bumped on crash so in-flight connections drop.
    epoch: watch::Sender<u64>,
}

/// A running fleet. Dropping it stops every mock.
pub struct Fleet {
    runtime: Option<Runtime>,
    mocks: Vec<Arc<MockState>>,
}

impl std::fmt::Debug for Fleet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fleet").field("endpoints", &self.endpoints()).finish()
    }
}

fn bind(addr: SocketAddr) -> std::io::Result<TcpListener> {
    let socket = if addr.is_ipv4() { TcpSocket::new_v4()? } else { TcpSocket::new_v6()? };
    socket.set_reuseaddr(true)?;
    socket.bind(addr)?;
    socket.listen(1024)
}

/// Starts one HTTP endpoint per profile. With port 0 in `listen_base` every
/// mock gets an ephemeral port; otherwise mock `i` listens on `port + i`
/// unless its profile fixes a port.
pub fn spawn_fleet(profiles: Vec<MockServiceProfile>, listen_base: SocketAddr) -> Result<Fleet, MockError> {
    let mut seen = HashSet::new();
    for p in &profiles {
        p.validate()?;
        if !seen.insert(p.id.clone()) {
            return Err(MockError::DuplicateId(p.id.clone()));
        }
    }
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .thread_name("mock-fleet")
        .build()
        .map_err(MockError::Runtime)?;
    let mut mocks = Vec::with_capacity(profiles.len());
    {
        let _enter = runtime.enter();
        for (i, profile) in profiles.into_iter().enumerate() {
            let port = match (profile.port, listen_base.port()) {
                (Some(p), _) => p,
                (None, 0) => 0,
                (None, base) => base + i as u16,
            };
            let addr = SocketAddr::new(listen_base.ip(), port);
            let listener = bind(addr).map_err(|source| MockError::Bind { id: profile.id.clone(), addr, source })?;
            let addr = listener.local_addr().map_err(MockError::Runtime)?;
            let fault = profile.fault_mode;
            let state = Arc::new(MockState {
                model: ServiceModel::new(profile),
                addr,
                fault: Mutex::new(FaultMode::None),
                fail_next: AtomicUsize::new(0),
                counters: Counters::default(),
                accept_task: Mutex::new(None),
                epoch: watch::channel(0).0,
            });
            *state.accept_task.lock().unwrap() = Some(tokio::spawn(accept_loop(state.clone(), listener)));
            apply_fault(&state, fault)?;
            mocks.push(state);
        }
    }
    Ok(Fleet { runtime: Some(runtime), mocks })
}

fn apply_fault(state: &Arc<MockState>, mode: FaultMode) -> Result<(), MockError> {
    let mut current = state.fault.lock().unwrap();
    let was_crashed = *current == FaultMode::Crash;
    match mode {
        FaultMode::Crash if !was_crashed => {
            if let Some(task) = state.accept_task.lock().unwrap().take() {
                task.abort();
            }
            state.epoch.send_modify(|e| *e += 1);
        }
        FaultMode::Crash => {}
        _ if was_crashed => {
            let listener = bind(state.addr).map_err(|source| MockError::Bind {
                id: state.model.profile.id.clone(),
                addr: state.addr,
                source,
            })?;
            *state.accept_task.lock().unwrap() = Some(tokio::spawn(accept_loop(state.clone(), listener)));
        }
        _ => {}
    }
    if let FaultMode::FailNext { count } = mode {
        state.fail_next.store(count, Ordering::SeqCst);
    }
    *current = mode;
    Ok(())
}

impl Fleet {
    /// `(id, endpoint)` for every mock, in profile order.
    pub fn endpoints(&self) -> Vec<(String, String)> {
        self.mocks.iter().map(|m| (m.model.profile.id.clone(), endpoint_url(m.addr))).collect()
    }

    pub fn endpoint(&self, id: &str) -> Result<String, MockError> {
        Ok(endpoint_url(self.get(id)?.addr))
    }

    pub fn profiles(&self) -> Vec<MockServiceProfile> {
        self.mocks.iter().map(|m| m.model.profile.clone()).collect()
    }

    fn get(&self, id: &str) -> Result<&Arc<MockState>, MockError> {
        self.mocks.iter().find(|m| m.model.profile.id == id).ok_or_else(|| MockError::NotFound(id.to_string()))
    }

    pub fn fleet_stats(&self, id: &str) -> Result<MockStats, MockError> {
        Ok(self.get(id)?.counters.snapshot())
    }

    pub fn set_fault_mode(&self, id: &str, mode: FaultMode) -> Result<(), MockError> {
        let state = self.get(id)?;
        let _enter = self.runtime.as_ref().expect("runtime alive").enter();
        apply_fault(state, mode)
    }

    pub fn fault_mode(&self, id: &str) -> Result<FaultMode, MockError> {
        Ok(*self.get(id)?.fault.lock().unwrap())
    }

    /// Stops accepting connections, as a crashed process would.
    pub fn kill(&self, id: &str) -> Result<(), MockError> {
        self.set_fault_mode(id, FaultMode::Crash)
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_background();
        }
    }
}

impl Drop for Fleet {
    fn drop(&mut self) {
        self.stop();
    }
}

pub fn endpoint_url(addr: SocketAddr) -> String {
    format!("http://{addr}/ws")
}

async fn accept_loop(state: Arc<MockState>, listener: TcpListener) {
    loop {
        let Ok((stream, _)) = listener.accept().await else {
            continue;
        };
        let state = state.clone();
        tokio::spawn(async move {
            let mut epoch = state.epoch.subscribe();
            tokio::select! {
                _ = serve_connection(&state, stream) => {}
                _ = epoch.changed() => {}
            }
        });
    }
}

async fn serve_connection(state: &Arc<MockState>, mut stream: TcpStream) {
    let _ = stream.set_nodelay(true);
    let request = match http::read_request(&mut stream).await {
        Ok(Some(r)) => r,
        Ok(None) => return,
        Err(e) => {
            let _ = http::write_response(&mut stream, &HttpResponse::text(400, e.to_string())).await;
            return;
        }
    };
    if request.method == "POST" {
        state.counters.received.fetch_add(1, Ordering::SeqCst);
        let dropped = state.fail_next.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1)).is_ok();
        if dropped {
            return;
        }
    }
    let response = match route(state, request, &mut stream).await {
        Some(r) => r,
        None => return,
    };
    if http::write_response(&mut stream, &response).await.is_ok() && response.header("X-Soap").is_some() {
        state.counters.served.fetch_add(1, Ordering::SeqCst);
    }
}

const PACE_SLICE: usize = 4096;

/// How a live parse spends its simulated time.
struct Pacing<'a> {
    abandoned: Option<&'a AtomicBool>,
    slept: Cell<Duration>,
}

impl Pacing<'_> {
    fn none() -> Self {
        Pacing { abandoned: None, slept: Cell::new(Duration::ZERO) }
    }

    fn pay(&self, cost: Duration) -> Result<(), ParseFailure> {
        let Some(abandoned) = self.abandoned else {
            return Ok(());
        };
        if abandoned.load(Ordering::Relaxed) {
            return Err(ParseFailure::Abandoned);
        }
        std::thread::sleep(cost);
        self.slept.set(self.slept.get() + cost);
        Ok(())
    }
}

struct SetOnDrop(Arc<AtomicBool>);

impl Drop for SetOnDrop {
    fn drop(&mut self) {
        self.0.store(true, Ordering::Relaxed);
    }
}

/// `None` when the client went away before the work finished.
async fn route(state: &Arc<MockState>, request: HttpRequest, stream: &mut TcpStream) -> Option<HttpResponse> {
    match request.method.as_str() {
        "GET" if request.query().is_some_and(|q| q.eq_ignore_ascii_case("wsdl")) => {
            Some(HttpResponse::xml(200, operation_listing(&state.model.profile)))
        }
        "GET" if request.path() == "/stats" => {
            let json = serde_json::to_vec(&state.counters.snapshot()).expect("stats serialize");
            Some(HttpResponse::json(200, json))
        }
        "POST" => {
            let fault = *state.fault.lock().unwrap();
            let abandoned = Arc::new(AtomicBool::new(false));
            // dropping the work future (client gone) stops the parse early
            let _abandon_on_drop = SetOnDrop(abandoned.clone());
            let work = {
                let state = state.clone();
                async move {
                    let handled = tokio::task::spawn_blocking(move || {
                        state.model.handle_live(&request.body, &request.headers, fault, &abandoned)
                    })
                    .await
                    .expect("model does not panic")?;
                    tokio::time::sleep(handled.cost).await;
                    Some(handled)
                }
            };
            tokio::select! {
                Some(handled) = work => {
                    state.counters.completed.fetch_add(1, Ordering::SeqCst);
                    if let Some(op) = &handled.executed {
                        *state.counters.operations.lock().unwrap().entry(op.clone()).or_default() += 1;
                    }
                    let mut r = HttpResponse::xml(handled.status, handled.body);
                    r.headers.push(("X-Soap".into(), "1".into()));
                    Some(r)
                }
                _ = http::peer_closed(stream) => {
                    state.counters.cancelled.fetch_add(1, Ordering::SeqCst);
                    None
                }
            }
        }
        "GET" => Some(HttpResponse::text(404, "not found")),
        _ => Some(HttpResponse::text(405, "method not allowed")),
    }
}
