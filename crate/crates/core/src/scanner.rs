//! Request scanner: which vulnerability classes could this request exploit?
//!
//! The scan is a single streaming pass over the envelope bytes. It keeps a
//! depth counter instead of an element stack and never builds a tree, so
//! memory use does not grow with nesting depth.

use std::collections::BTreeSet;
use std::time::SystemTime;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{AttackVector, OPAQUE_ELEMENT};
use crate::soap::{self, OPERATION_HEADER};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RequestError {
    #[error("request envelope is empty")]
    EmptyEnvelope,
}

/// A request received from a client of the composite service.
#[derive(Debug, Clone)]
pub struct ClientRequest {
    envelope_bytes: Vec<u8>,
    transport_headers: Vec<(String, String)>,
    pub received_at: SystemTime,
}

impl ClientRequest {
    pub fn new(
        envelope_bytes: impl Into<Vec<u8>>,
        transport_headers: Vec<(String, String)>,
    ) -> Result<Self, RequestError> {
        let envelope_bytes = envelope_bytes.into();
        if envelope_bytes.is_empty() {
            return Err(RequestError::EmptyEnvelope);
        }
        Ok(ClientRequest { envelope_bytes, transport_headers, received_at: SystemTime::now() })
    }

    pub fn envelope_bytes(&self) -> &[u8] {
        &self.envelope_bytes
    }

    pub fn transport_headers(&self) -> &[(String, String)] {
        &self.transport_headers
    }

    pub fn operation_header(&self) -> Option<&str> {
        soap::header(&self.transport_headers, OPERATION_HEADER)
    }

    /// Copy of this request with the operation header set.
    pub fn with_operation_header(&self, value: &str) -> ClientRequest {
        let mut headers: Vec<_> =
            self.transport_headers.iter().filter(|(k, _)| !k.eq_ignore_ascii_case(OPERATION_HEADER)).cloned().collect();
        headers.push((OPERATION_HEADER.to_string(), value.to_string()));
        ClientRequest {
            envelope_bytes: self.envelope_bytes.clone(),
            transport_headers: headers,
            received_at: self.received_at,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScannerThresholds {
    pub depth_flag: usize,
    pub size_flag: usize,
    pub attr_fanout_flag: usize,
    pub element_count_flag: usize,
}

impl Default for ScannerThresholds {
    fn default() -> Self {
        ScannerThresholds { depth_flag: 16, size_flag: 1_048_576, attr_fanout_flag: 64, element_count_flag: 10_000 }
    }
}

impl ScannerThresholds {
    pub fn validate(&self) -> Result<(), String> {
        let all = [self.depth_flag, self.size_flag, self.attr_fanout_flag, self.element_count_flag];
        if all.contains(&0) {
            return Err("scanner thresholds must all be at least 1".into());
        }
        Ok(())
    }
}

/// Diagnostic observation made during a scan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "feature", rename_all = "snake_case")]
pub enum Feature {
    NestingDepth { depth: usize },
    ElementCount { count: usize },
    ByteSize { bytes: usize },
    OperationHeader { value: String },
    OpaqueRegion { count: usize },
    AttributeFanout { max_attributes: usize },
    MarkupInText { occurrences: usize },
    EscapeSequence { occurrences: usize },
    CdataSection { occurrences: usize },
    Malformed { offset: usize, reason: String },
}

impl Feature {
    /// The vector this feature justifies under `thresholds`, if any.
    pub fn supports(&self, thresholds: &ScannerThresholds) -> Option<AttackVector> {
        match *self {
            Feature::NestingDepth { depth } if depth > thresholds.depth_flag => Some(AttackVector::CoerciveParsing),
            Feature::ElementCount { count } if count > thresholds.element_count_flag => {
                Some(AttackVector::CoerciveParsing)
            }
            Feature::ByteSize { bytes } if bytes > thresholds.size_flag => Some(AttackVector::OversizePayload),
            Feature::OperationHeader { .. } => Some(AttackVector::SoapActionSpoofing),
            Feature::OpaqueRegion { count } if count > 0 => Some(AttackVector::AttackObfuscation),
            Feature::AttributeFanout { max_attributes } if max_attributes > thresholds.attr_fanout_flag => {
                Some(AttackVector::HashCollision)
            }
            Feature::MarkupInText { occurrences }
            | Feature::EscapeSequence { occurrences }
            | Feature::CdataSection { occurrences }
                if occurrences > 0 =>
            {
                Some(AttackVector::XmlInjection)
            }
            _ => None,
        }
    }
}

/// Vectors a request could exploit, with the features that justify them.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreatProfile {
    pub vectors: BTreeSet<AttackVector>,
    pub features: Vec<Feature>,
}

impl ThreatProfile {
    pub fn empty() -> Self {
        ThreatProfile::default()
    }

    /// Profile with the given vectors and no diagnostics; for callers that
    /// already know the threat.
    pub fn of(vectors: impl IntoIterator<Item = AttackVector>) -> Self {
        ThreatProfile { vectors: vectors.into_iter().collect(), features: Vec::new() }
    }

    pub fn contains(&self, v: AttackVector) -> bool {
        self.vectors.contains(&v)
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn is_malformed(&self) -> bool {
        self.features.iter().any(|f| matches!(f, Feature::Malformed { .. }))
    }
}

#[derive(Default)]
struct Tally {
    depth: usize,
    max_depth: usize,
    elements: usize,
    max_attrs: usize,
    opaque: usize,
    markup_text: usize,
    escapes: usize,
    cdata: usize,
    malformed: Option<(usize, String)>,
}

impl Tally {
    fn open(&mut self, attrs: usize, local_name: &[u8], self_closing: bool) {
        self.elements += 1;
        self.max_attrs = self.max_attrs.max(attrs);
        if local_name == OPAQUE_ELEMENT.as_bytes() {
            self.opaque += 1;
        }
        self.max_depth = self.max_depth.max(self.depth + 1);
        if !self_closing {
            self.depth += 1;
        }
    }
}

/// Scans `request` and reports every vector whose structural trigger fires.
pub fn scan(request: &ClientRequest, thresholds: &ScannerThresholds) -> ThreatProfile {
    let bytes = request.envelope_bytes();
    let tally = structural_pass(bytes);

    let mut features = vec![
        Feature::NestingDepth { depth: tally.max_depth },
        Feature::ElementCount { count: tally.elements },
        Feature::ByteSize { bytes: bytes.len() },
        Feature::AttributeFanout { max_attributes: tally.max_attrs },
    ];
    if let Some(value) = request.operation_header() {
        features.push(Feature::OperationHeader { value: value.to_string() });
    }
    if tally.opaque > 0 {
        features.push(Feature::OpaqueRegion { count: tally.opaque });
    }
    if tally.markup_text > 0 {
        features.push(Feature::MarkupInText { occurrences: tally.markup_text });
    }
    if tally.escapes > 0 {
        features.push(Feature::EscapeSequence { occurrences: tally.escapes });
    }
    if tally.cdata > 0 {
        features.push(Feature::CdataSection { occurrences: tally.cdata });
    }
    if let Some((offset, reason)) = tally.malformed {
        features.push(Feature::Malformed { offset, reason });
    }

    let vectors = features.iter().filter_map(|f| f.supports(thresholds)).collect();
    ThreatProfile { vectors, features }
}

/// Position of `needle` in `hay` at or after `from`.
fn find(hay: &[u8], from: usize, needle: &[u8]) -> Option<usize> {
    memchr::memmem::find(hay.get(from..)?, needle).map(|i| i + from)
}

/// End of a start tag: the first `>` outside a quoted attribute value.
fn tag_end(bytes: &[u8], from: usize) -> Option<usize> {
    let mut quote = None;
    for (i, &b) in bytes.iter().enumerate().skip(from) {
        match (quote, b) {
            (None, b'"' | b'\'') => quote = Some(b),
            (Some(q), _) if b == q => quote = None,
            (None, b'>') => return Some(i),
            _ => {}
        }
    }
    None
}

/// Attribute count of a start tag's contents (after the name).
fn count_attributes(rest: &[u8]) -> usize {
    let mut quote = None;
    let mut n = 0;
    for &b in rest {
        match (quote, b) {
            (None, b'"' | b'\'') => quote = Some(b),
            (Some(q), _) if b == q => quote = None,
            (None, b'=') => n += 1,
            _ => {}
        }
    }
    n
}

/// Tag-level tokenizer. Per-element work is a handful of byte comparisons:
/// the scan sits in front of every request, including the large ones it
/// exists to catch.
fn structural_pass(bytes: &[u8]) -> Tally {
    let mut t = Tally::default();
    let mut i = 0;
    while i < bytes.len() {
        let lt = bytes[i..].iter().position(|&b| b == b'<').map_or(bytes.len(), |p| p + i);
        let text = &bytes[i..lt];
        if text.contains(&b'>') {
            t.markup_text += 1;
        }
        t.escapes += text.iter().filter(|&&b| b == b'&').count();
        if lt == bytes.len() {
            break;
        }
        let rest = &bytes[lt..];
        let (close, unterminated) = match rest.get(1) {
            Some(b'!') if rest.starts_with(b"<!--") => {
                (find(bytes, lt + 4, b"-->").map(|p| p + 3), "unterminated comment")
            }
            Some(b'!') if rest.starts_with(b"<![CDATA[") => {
                t.cdata += 1;
                (find(bytes, lt + 9, b"]]>").map(|p| p + 3), "unterminated CDATA section")
            }
            Some(b'!') => {
                let gt = find(bytes, lt, b">");
                let internal_subset = find(bytes, lt, b"[").is_some_and(|b| gt.is_none_or(|g| b < g));
                let end = if internal_subset { find(bytes, lt, b"]>").map(|p| p + 2) } else { gt.map(|p| p + 1) };
                (end, "unterminated declaration")
            }
            Some(b'?') => (find(bytes, lt + 2, b"?>").map(|p| p + 2), "unterminated processing instruction"),
            Some(b'/') => {
                let end = rest.iter().position(|&b| b == b'>').map(|p| p + lt + 1);
                if end.is_some() {
                    if t.depth == 0 && t.malformed.is_none() {
                        t.malformed = Some((lt, "unmatched end tag".into()));
                    }
                    t.depth = t.depth.saturating_sub(1);
                }
                (end, "unterminated end tag")
            }
            _ => {
                let end = tag_end(bytes, lt + 1);
                if let Some(gt) = end {
                    let inner = &bytes[lt + 1..gt];
                    let self_closing = inner.last() == Some(&b'/');
                    let inner = if self_closing { &inner[..inner.len() - 1] } else { inner };
                    let name_len = inner.iter().position(|b| b.is_ascii_whitespace()).unwrap_or(inner.len());
                    let (name, attrs) = inner.split_at(name_len);
                    let local = name.iter().rposition(|&b| b == b':').map_or(name, |c| &name[c + 1..]);
                    t.open(if attrs.is_empty() { 0 } else { count_attributes(attrs) }, local, self_closing);
                }
                (end.map(|p| p + 1), "unterminated start tag")
            }
        };
        match close {
            Some(next) => i = next,
            None => {
                t.malformed.get_or_insert((lt, unterminated.into()));
                return t;
            }
        }
    }
    if t.depth != 0 && t.malformed.is_none() {
        t.malformed = Some((bytes.len(), format!("{} unclosed element(s)", t.depth)));
    }
    t
}
