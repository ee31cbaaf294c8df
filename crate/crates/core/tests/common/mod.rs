//! Helpers shared by several integration test targets.
#![allow(dead_code)]

use std::net::SocketAddr;
use std::time::Duration;

use itertools::Itertools;
use quorumgate::attack::AttackVector;
use quorumgate::registry::{SelectionPolicy, ServiceRecord, Verdict};
use quorumgate::scanner::ThreatProfile;
use quorumgate::soap;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpListener;

pub fn offends(r: &ServiceRecord, threat: &ThreatProfile, policy: &SelectionPolicy) -> Vec<AttackVector> {
    threat
        .vectors
        .iter()
        .copied()
        .filter(|v| match r.vulnerabilities.get(v).copied().unwrap_or(Verdict::Untested) {
            Verdict::Vulnerable => true,
            Verdict::Untested => !policy.untested_is_clean,
            Verdict::NotVulnerable => false,
        })
        .collect()
}

/// 0 when clean, else (number of vectors) minus the worst vector's position in the priority list.
pub fn severity(r: &ServiceRecord, threat: &ThreatProfile, policy: &SelectionPolicy) -> usize {
    offends(r, threat, policy)
        .iter()
        .map(|v| 6 - policy.vulnerability_priority.iter().position(|p| p == v).unwrap())
        .max()
        .unwrap_or(0)
}

/// Best replica set by exhaustive search: most clean members, then smallest
/// penalty sum, then smallest failure-rate sum, then lexicographically
/// smallest sorted id list. Returns the sorted ids, or `None` if too few candidates.
pub fn best_subset(cands: &[ServiceRecord], threat: &ThreatProfile, policy: &SelectionPolicy) -> Option<Vec<String>> {
    let k = 3 * policy.f + 1;
    (0..cands.len())
        .combinations(k)
        .map(|set| {
            let clean = set.iter().filter(|&&i| severity(&cands[i], threat, policy) == 0).count();
            let pen: usize = set.iter().map(|&i| severity(&cands[i], threat, policy)).sum();
            let mut rates: Vec<f64> =
                set.iter().map(|&i| cands[i].effective_failure_rate(policy.sla_prior_weight)).collect();
            rates.sort_by(f64::total_cmp);
            let rate: f64 = rates.iter().sum();
            let mut ids: Vec<String> = set.iter().map(|&i| cands[i].id.clone()).collect();
            ids.sort();
            (std::cmp::Reverse(clean), pen, rate, ids)
        })
        .min_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.total_cmp(&b.2)).then_with(|| a.3.cmp(&b.3)))
        .map(|best| best.3)
}

/// HTTP server that reads the whole request, sleeps `delay`, and answers with a fixed body.
pub async fn constant_stub(delay: Duration) -> SocketAddr {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        loop {
            let Ok((mut sock, _)) = listener.accept().await else { return };
            tokio::spawn(async move {
                let mut buf = Vec::new();
                let mut chunk = vec![0u8; 64 * 1024];
                let (head_end, len) = loop {
                    let n = sock.read(&mut chunk).await.unwrap_or(0);
                    if n == 0 {
                        return;
                    }
                    buf.extend_from_slice(&chunk[..n]);
                    if let Some(i) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
                        let head = String::from_utf8_lossy(&buf[..i]).to_ascii_lowercase();
                        let len = head
                            .lines()
                            .find_map(|l| l.strip_prefix("content-length:"))
                            .map(|v| v.trim().parse::<usize>().unwrap())
                            .unwrap_or(0);
                        break (i + 4, len);
                    }
                };
                while buf.len() < head_end + len {
                    let n = sock.read(&mut chunk).await.unwrap_or(0);
                    if n == 0 {
                        return;
                    }
                    buf.extend_from_slice(&chunk[..n]);
                }
                tokio::time::sleep(delay).await;
                let body = soap::envelope("<ok/>");
                let resp = format!(
                    "HTTP/1.1 200 OK\r\nContent-Type: application/soap+xml\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = sock.write_all(resp.as_bytes()).await;
            });
        }
    });
    addr
}

pub fn url(addr: SocketAddr) -> String {
    format!("http://{addr}/ws")
}
