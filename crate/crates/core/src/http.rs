//! Minimal HTTP/1.1 framing over tokio TCP streams.
//!
//! One exchange per connection (`Connection: close`), `Content-Length`
//! bodies only. The client records the instant the last request byte was
//! handed to the socket and the instant the first response byte arrived,
//! which is the response-time definition the probe harness uses.

use std::time::{Duration, Instant};

use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};
use tokio::net::TcpStream;

const MAX_HEAD: usize = 64 * 1024;
const MAX_HEADERS: usize = 64;
/// Upper bound on accepted bodies, well above the largest generated payload.
pub const MAX_BODY: usize = 128 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("connect to {addr}: {source}")]
    Connect { addr: String, source: std::io::Error },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("connection closed before a complete message")]
    Closed,
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("invalid endpoint `{0}`")]
    Endpoint(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpRequest {
    pub method: String,
    pub target: String,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl HttpRequest {
    pub fn header(&self, name: &str) -> Option<&str> {
        crate::soap::header(&self.headers, name)
    }

    pub fn path(&self) -> &str {
        self.target.split('?').next().unwrap_or("")
    }

    pub fn query(&self) -> Option<&str> {
        self.target.split_once('?').map(|(_, q)| q)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl HttpResponse {
    pub fn xml(status: u16, body: impl Into<Vec<u8>>) -> Self {
        HttpResponse {
            status,
            headers: vec![("Content-Type".into(), "application/soap+xml; charset=utf-8".into())],
            body: body.into(),
        }
    }

    pub fn json(status: u16, body: impl Into<Vec<u8>>) -> Self {
        HttpResponse { status, headers: vec![("Content-Type".into(), "application/json".into())], body: body.into() }
    }

    pub fn text(status: u16, body: impl Into<String>) -> Self {
        HttpResponse {
            status,
            headers: vec![("Content-Type".into(), "text/plain; charset=utf-8".into())],
            body: body.into().into_bytes(),
        }
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        crate::soap::header(&self.headers, name)
    }
}

fn reason(status: u16) -> &'static str {
    match status {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        405 => "Method Not Allowed",
        409 => "Conflict",
        411 => "Length Required",
        413 => "Payload Too Large",
        500 => "Internal Server Error",
        502 => "Bad Gateway",
        503 => "Service Unavailable",
        _ => "Status",
    }
}

/// `http://host:port/path` split into what a client needs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    pub host: String,
    pub port: u16,
    pub path: String,
}

impl Endpoint {
    pub fn parse(s: &str) -> Result<Self, HttpError> {
        let url = url::Url::parse(s).map_err(|_| HttpError::Endpoint(s.to_string()))?;
        if url.scheme() != "http" {
            return Err(HttpError::Endpoint(s.to_string()));
        }
        let host = url.host_str().ok_or_else(|| HttpError::Endpoint(s.to_string()))?;
        let host = host.trim_start_matches('[').trim_end_matches(']').to_string();
        let port = url.port_or_known_default().unwrap_or(80);
        let mut path = url.path().to_string();
        if let Some(q) = url.query() {
            path.push('?');
            path.push_str(q);
        }
        Ok(Endpoint { host, port, path })
    }

    pub fn authority(&self) -> String {
        if self.host.contains(':') {
            format!("[{}]:{}", self.host, self.port)
        } else {
            format!("{}:{}", self.host, self.port)
        }
    }

    pub fn with_path(&self, path: &str) -> Endpoint {
        Endpoint { path: path.to_string(), ..self.clone() }
    }
}

fn find_head_end(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == b"\r\n\r\n").map(|p| p + 4)
}

fn content_length(headers: &[(String, String)]) -> Result<usize, HttpError> {
    if let Some(te) = crate::soap::header(headers, "Transfer-Encoding") {
        if !te.eq_ignore_ascii_case("identity") {
            return Err(HttpError::Unsupported(format!("transfer-encoding {te}")));
        }
    }
    match crate::soap::header(headers, "Content-Length") {
        None => Ok(0),
        Some(v) => {
            let n: usize = v.trim().parse().map_err(|_| HttpError::Malformed(format!("content-length `{v}`")))?;
            if n > MAX_BODY {
                return Err(HttpError::Unsupported(format!("body of {n} bytes")));
            }
            Ok(n)
        }
    }
}

/// Reads one request. `Ok(None)` when the peer closed without sending anything.
pub async fn read_request<R: AsyncRead + Unpin>(reader: &mut R) -> Result<Option<HttpRequest>, HttpError> {
    let mut buf = Vec::with_capacity(4096);
    let head_end = loop {
        if let Some(end) = find_head_end(&buf) {
            break end;
        }
        if buf.len() > MAX_HEAD {
            return Err(HttpError::Malformed("request head too large".into()));
        }
        let mut chunk = [0u8; 8192];
        let n = reader.read(&mut chunk).await?;
        if n == 0 {
            return if buf.is_empty() { Ok(None) } else { Err(HttpError::Closed) };
        }
        buf.extend_from_slice(&chunk[..n]);
    };

    let mut raw_headers = [httparse::EMPTY_HEADER; MAX_HEADERS];
    let mut parsed = httparse::Request::new(&mut raw_headers);
    parsed.parse(&buf[..head_end]).map_err(|e| HttpError::Malformed(e.to_string()))?;
    let method = parsed.method.unwrap_or_default().to_string();
    let target = parsed.path.unwrap_or("/").to_string();
    let headers = collect_headers(parsed.headers);
    let len = content_length(&headers)?;
    let body = read_body(reader, buf.split_off(head_end), len).await?;
    Ok(Some(HttpRequest { method, target, headers, body }))
}

fn collect_headers(raw: &[httparse::Header<'_>]) -> Vec<(String, String)> {
    raw.iter().map(|h| (h.name.to_string(), String::from_utf8_lossy(h.value).into_owned())).collect()
}

async fn read_body<R: AsyncRead + Unpin>(reader: &mut R, mut body: Vec<u8>, len: usize) -> Result<Vec<u8>, HttpError> {
    if body.len() > len {
        body.truncate(len);
    }
    body.reserve(len - body.len());
    let mut chunk = vec![0u8; 64 * 1024];
    while body.len() < len {
        let want = (len - body.len()).min(chunk.len());
        let n = reader.read(&mut chunk[..want]).await?;
        if n == 0 {
            return Err(HttpError::Closed);
        }
        body.extend_from_slice(&chunk[..n]);
    }
    Ok(body)
}

pub async fn write_response<W: AsyncWrite + Unpin>(writer: &mut W, response: &HttpResponse) -> Result<(), HttpError> {
    let mut head = format!("HTTP/1.1 {} {}\r\n", response.status, reason(response.status));
    for (k, v) in &response.headers {
        if k.eq_ignore_ascii_case("content-length") || k.eq_ignore_ascii_case("connection") {
            continue;
        }
        head.push_str(&format!("{k}: {v}\r\n"));
    }
    head.push_str(&format!("Content-Length: {}\r\nConnection: close\r\n\r\n", response.body.len()));
    writer.write_all(head.as_bytes()).await?;
    writer.write_all(&response.body).await?;
    writer.flush().await?;
    Ok(())
}

/// Resolves once the peer has closed its sending side (or the socket errored).
pub async fn peer_closed<R: AsyncRead + Unpin>(reader: &mut R) {
    let mut scratch = [0u8; 1024];
    loop {
        match reader.read(&mut scratch).await {
            Ok(0) | Err(_) => return,
            Ok(_) => {}
        }
    }
}

/// Response plus the timing of one client exchange.
#[derive(Debug, Clone)]
pub struct Exchange {
    pub response: HttpResponse,
    /// When the last request byte was written to the socket.
    pub request_sent_at: Instant,
    /// From the last request byte written to the first response byte read.
    pub response_time: Duration,
}

/// Sends one request on a fresh connection and reads the full response.
pub async fn send(
    endpoint: &Endpoint,
    method: &str,
    headers: &[(String, String)],
    body: &[u8],
) -> Result<Exchange, HttpError> {
    let addr = endpoint.authority();
    let mut stream =
        TcpStream::connect(&addr).await.map_err(|source| HttpError::Connect { addr: addr.clone(), source })?;
    stream.set_nodelay(true)?;

    let mut head = format!("{method} {} HTTP/1.1\r\nHost: {addr}\r\n", endpoint.path);
    let mut has_type = false;
    for (k, v) in headers {
        if ["host", "content-length", "connection", "transfer-encoding"].iter().any(|h| k.eq_ignore_ascii_case(h)) {
            continue;
        }
        has_type |= k.eq_ignore_ascii_case("content-type");
        head.push_str(&format!("{k}: {v}\r\n"));
    }
    if !has_type && !body.is_empty() {
        head.push_str("Content-Type: application/soap+xml; charset=utf-8\r\n");
    }
    head.push_str(&format!("Content-Length: {}\r\nConnection: close\r\n\r\n", body.len()));
    stream.write_all(head.as_bytes()).await?;
    stream.write_all(body).await?;
    stream.flush().await?;
    let request_sent_at = Instant::now();

    let mut buf = Vec::with_capacity(4096);
    let mut chunk = [0u8; 8192];
    let n = stream.read(&mut chunk).await?;
    let response_time = request_sent_at.elapsed();
    if n == 0 {
        return Err(HttpError::Closed);
    }
    buf.extend_from_slice(&chunk[..n]);

    let head_end = loop {
        if let Some(end) = find_head_end(&buf) {
            break end;
        }
        if buf.len() > MAX_HEAD {
            return Err(HttpError::Malformed("response head too large".into()));
        }
        let n = stream.read(&mut chunk).await?;
        if n == 0 {
            return Err(HttpError::Closed);
        }
        buf.extend_from_slice(&chunk[..n]);
    };
    let mut raw_headers = [httparse::EMPTY_HEADER; MAX_HEADERS];
    let mut parsed = httparse::Response::new(&mut raw_headers);
    parsed.parse(&buf[..head_end]).map_err(|e| HttpError::Malformed(e.to_string()))?;
    let status = parsed.code.unwrap_or(0);
    let headers = collect_headers(parsed.headers);
    let rest = buf.split_off(head_end);
    let body = match crate::soap::header(&headers, "Content-Length") {
        Some(_) => read_body(&mut stream, rest, content_length(&headers)?).await?,
        None => {
            let mut rest = rest;
            stream.read_to_end(&mut rest).await?;
            rest
        }
    };
    Ok(Exchange { response: HttpResponse { status, headers, body }, request_sent_at, response_time })
}

/// [`send`] bounded by `timeout`; `None` when the deadline passed.
pub async fn send_with_timeout(
    endpoint: &Endpoint,
    method: &str,
    headers: &[(String, String)],
    body: &[u8],
    timeout: Duration,
) -> Option<Result<Exchange, HttpError>> {
    tokio::time::timeout(timeout, send(endpoint, method, headers, body)).await.ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tokio::net::TcpListener;

    #[test]
    fn endpoint_parsing() {
        let e = Endpoint::parse("http://127.0.0.1:8080/ws?wsdl").unwrap();
        assert_eq!(e.authority(), "127.0.0.1:8080");
        assert_eq!(e.path, "/ws?wsdl");
        assert_eq!(Endpoint::parse("http://localhost/").unwrap().port, 80);
        assert!(Endpoint::parse("https://x/").is_err());
        assert!(Endpoint::parse("nonsense").is_err());
    }

    #[tokio::test]
    async fn round_trip_over_loopback() {
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let server = tokio::spawn(async move {
            let (mut sock, _) = listener.accept().await.unwrap();
            let req = read_request(&mut sock).await.unwrap().unwrap();
            assert_eq!(req.method, "POST");
            assert_eq!(req.header("soapaction"), Some("X"));
            let body = req.body.clone();
            write_response(&mut sock, &HttpResponse::xml(200, body)).await.unwrap();
        });
        let ep = Endpoint::parse(&format!("http://{addr}/ws")).unwrap();
        let big = vec![b'a'; 300_000];
        let ex = send(&ep, "POST", &[("SOAPAction".into(), "X".into())], &big).await.unwrap();
        assert_eq!(ex.response.status, 200);
        assert_eq!(ex.response.body, big);
        server.await.unwrap();
    }

    #[tokio::test]
    async fn chunked_requests_are_refused() {
        let mut input: &[u8] = b"POST / HTTP/1.1\r\nTransfer-Encoding: chunked\r\n\r\n0\r\n\r\n";
        assert!(matches!(read_request(&mut input).await, Err(HttpError::Unsupported(_))));
        let mut empty: &[u8] = b"";
        assert!(read_request(&mut empty).await.unwrap().is_none());
        let mut short: &[u8] = b"POST / HTTP/1.1\r\nContent-Length: 10\r\n\r\nabc";
        assert!(matches!(read_request(&mut short).await, Err(HttpError::Closed)));
    }
}
