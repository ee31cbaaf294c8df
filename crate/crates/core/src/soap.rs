//! Canonical SOAP envelope skeleton shared by generators, mocks and the gateway.
//!
//! Every request and response built by this crate has the byte layout
//!
//! ```text
//! <?xml version="1.0" encoding="UTF-8"?>\n
//! <soap:Envelope xmlns:soap="http://www.w3.org/2003/05/soap-envelope"><soap:Header/><soap:Body>BODY</soap:Body></soap:Envelope>
//! ```
//!
//! with no trailing newline. `BODY` is the operation element. See
//! `docs/wire-format.md` for the full catalogue of payload shapes.

/// SOAP 1.2 envelope namespace.
pub const SOAP_NS: &str = "http://www.w3.org/2003/05/soap-envelope";

/// Transport header naming the requested operation.
pub const OPERATION_HEADER: &str = "SOAPAction";

pub const ENVELOPE_PREFIX: &str = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<soap:Envelope xmlns:soap=\"http://www.w3.org/2003/05/soap-envelope\"><soap:Header/><soap:Body>";
pub const ENVELOPE_SUFFIX: &str = "</soap:Body></soap:Envelope>";

/// The two operations offered by the stock-purchase functionality.
pub const OP_GET_QUOTE: &str = "GetQuote";
pub const OP_PURCHASE_STOCK: &str = "PurchaseStock";

/// Symbol used by benign probe requests.
pub const DEFAULT_SYMBOL: &str = "ACME";

/// Wraps an operation body in the canonical envelope.
pub fn envelope(body: &str) -> String {
    let mut out = String::with_capacity(ENVELOPE_PREFIX.len() + body.len() + ENVELOPE_SUFFIX.len());
    out.push_str(ENVELOPE_PREFIX);
    out.push_str(body);
    out.push_str(ENVELOPE_SUFFIX);
    out
}

/// Returns the bytes between `<soap:Body>` and `</soap:Body>` of a canonical envelope.
pub fn body_of(envelope: &[u8]) -> Option<&[u8]> {
    let open = b"<soap:Body>";
    let close = b"</soap:Body>";
    let start = find(envelope, open)? + open.len();
    let end = rfind(envelope, close)?;
    (end >= start).then(|| &envelope[start..end])
}

pub fn quote_request(symbol: &str) -> String {
    envelope(&format!("<{OP_GET_QUOTE}><symbol>{}</symbol></{OP_GET_QUOTE}>", quick_xml::escape::escape(symbol)))
}

pub fn purchase_request(symbol: &str, quantity: u32) -> String {
    envelope(&format!(
        "<{OP_PURCHASE_STOCK}><symbol>{}</symbol><quantity>{quantity}</quantity></{OP_PURCHASE_STOCK}>",
        quick_xml::escape::escape(symbol)
    ))
}

/// The benign request used as the untampered probe and the spoofing template.
pub fn benign_request() -> String {
    quote_request(DEFAULT_SYMBOL)
}

/// A SOAP 1.2 fault envelope.
pub fn fault(code: &str, reason: &str) -> String {
    envelope(&format!(
        "<soap:Fault><soap:Code><soap:Value>soap:{code}</soap:Value></soap:Code><soap:Reason><soap:Text>{}</soap:Text></soap:Reason></soap:Fault>",
        quick_xml::escape::escape(reason)
    ))
}

/// Strips surrounding quotes and whitespace from an operation header value.
pub fn normalize_action(value: &str) -> &str {
    let v = value.trim();
    let v = v.strip_prefix('"').unwrap_or(v);
    let v = v.strip_suffix('"').unwrap_or(v);
    v.rsplit(['/', '#']).next().unwrap_or(v)
}

/// Looks a header up case-insensitively.
pub fn header<'a>(headers: &'a [(String, String)], name: &str) -> Option<&'a str> {
    headers.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
}

pub(crate) fn find(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

fn rfind(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).rposition(|w| w == needle)
}
