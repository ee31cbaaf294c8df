//! Structural canonical form of XML responses, used to decide which replica
//! answers are "the same" for voting.
//!
//! Two documents are equivalent when they have the same element names, the
//! same attribute name/value sets (order ignored), and the same text after
//! entity resolution and whitespace normalization. Comments, processing
//! instructions and the XML declaration are ignored; `<a/>` equals `<a></a>`.

use quick_xml::Reader;
use quick_xml::escape::{escape, resolve_predefined_entity};
use quick_xml::events::{BytesStart, Event};
use sha2::{Digest, Sha256};

/// Canonical text of `bytes`, or `None` if it is not well-formed XML.
pub fn canonicalize(bytes: &[u8]) -> Option<String> {
    let mut reader = Reader::from_reader(bytes);
    let mut out = String::with_capacity(bytes.len());
    let mut text = String::new();
    let mut depth = 0usize;
    let mut seen_root = false;
    loop {
        match reader.read_event().ok()? {
            Event::Start(e) => {
                flush_text(&mut out, &mut text);
                push_start(&mut out, &e)?;
                depth += 1;
                seen_root = true;
            }
            Event::Empty(e) => {
                flush_text(&mut out, &mut text);
                push_start(&mut out, &e)?;
                push_end(&mut out, e.name().as_ref())?;
                seen_root = true;
            }
            Event::End(e) => {
                flush_text(&mut out, &mut text);
                push_end(&mut out, e.name().as_ref())?;
                depth = depth.checked_sub(1)?;
            }
            Event::Text(t) => text.push_str(&t.xml10_content().ok()?),
            Event::CData(c) => text.push_str(&c.xml10_content().ok()?),
            Event::GeneralRef(r) => {
                if r.is_char_ref() {
                    text.push(r.resolve_char_ref().ok()??);
                } else {
                    let name = r.decode().ok()?;
                    text.push_str(resolve_predefined_entity(&name)?);
                }
            }
            Event::Eof => break,
            _ => {}
        }
    }
    (depth == 0 && seen_root).then_some(out)
}

fn flush_text(out: &mut String, text: &mut String) {
    let normalized = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if !normalized.is_empty() {
        out.push_str(&escape(normalized.as_str()));
    }
    text.clear();
}

fn push_start(out: &mut String, e: &BytesStart<'_>) -> Option<()> {
    out.push('<');
    out.push_str(std::str::from_utf8(e.name().as_ref()).ok()?);
    let mut attrs = Vec::new();
    for a in e.attributes() {
        let a = a.ok()?;
        let key = std::str::from_utf8(a.key.as_ref()).ok()?.to_string();
        let value = a.unescape_value().ok()?.into_owned();
        attrs.push((key, value));
    }
    attrs.sort();
    for (k, v) in attrs {
        out.push(' ');
        out.push_str(&k);
        out.push_str("=\"");
        out.push_str(&escape(v.as_str()));
        out.push('"');
    }
    out.push('>');
    Some(())
}

fn push_end(out: &mut String, name: &[u8]) -> Option<()> {
    out.push_str("</");
    out.push_str(std::str::from_utf8(name).ok()?);
    out.push('>');
    Some(())
}

/// Short stable label for a response class.
pub fn class_of(bytes: &[u8]) -> String {
    let digest = match canonicalize(bytes) {
        Some(c) => Sha256::digest(c.as_bytes()),
        None => {
            let mut h = Sha256::new();
            h.update(b"raw:");
            h.update(bytes);
            h.finalize()
        }
    };
    hex::encode(&digest[..8])
}
