//! Vulnerability-aware replica selection.
//!
//! Exactly `3f+1` services are chosen. Services with no vulnerability to
//! any vector in the request's threat profile come first, cheapest failure
//! rate first. When there are too few of them, the set is completed with
//! vulnerable services whose worst offending vector matters least to the
//! owner, again preferring low failure rates. Every remaining tie is broken
//! by ascending id.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::AttackVector;
use crate::registry::{SelectionPolicy, ServiceRecord, Verdict};
use crate::scanner::ThreatProfile;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SelectionError {
    #[error("insufficient diversity: need {needed} candidates, have {available} (short by {})", needed - available)]
    InsufficientDiversity { needed: usize, available: usize },
    #[error("candidate id `{0}` appears more than once")]
    DuplicateCandidate(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub chosen: Vec<String>,
    pub clean_count: usize,
    pub backfilled: Vec<(String, Vec<AttackVector>)>,
}

/// Threat vectors for which `record` must be avoided under `policy`.
pub fn offending_vectors(
    record: &ServiceRecord,
    threat: &ThreatProfile,
    policy: &SelectionPolicy,
) -> Vec<AttackVector> {
    threat
        .vectors
        .iter()
        .copied()
        .filter(|v| match record.verdict(*v) {
            Verdict::Vulnerable => true,
            Verdict::Untested => !policy.untested_is_clean,
            Verdict::NotVulnerable => false,
        })
        .collect()
}

/// Severity of the worst offending vector; 0 for a clean service.
pub fn penalty(offending: &[AttackVector], policy: &SelectionPolicy) -> usize {
    offending.iter().map(|v| policy.severity(*v)).max().unwrap_or(0)
}

struct Ranked<'a> {
    record: &'a ServiceRecord,
    rate: f64,
    offending: Vec<AttackVector>,
    penalty: usize,
}

fn by_rate_then_id(a: &Ranked<'_>, b: &Ranked<'_>) -> Ordering {
    a.rate.total_cmp(&b.rate).then_with(|| a.record.id.cmp(&b.record.id))
}

pub fn select(
    candidates: &[ServiceRecord],
    threat: &ThreatProfile,
    policy: &SelectionPolicy,
) -> Result<SelectionResult, SelectionError> {
    policy.validate().map_err(SelectionError::InvalidPolicy)?;
    let needed = policy.replicas();
    if candidates.len() < needed {
        return Err(SelectionError::InsufficientDiversity { needed, available: candidates.len() });
    }
    let mut ids: Vec<&str> = candidates.iter().map(|c| c.id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(SelectionError::DuplicateCandidate(w[0].to_string()));
    }

    let (mut clean, mut tainted): (Vec<Ranked<'_>>, Vec<Ranked<'_>>) = candidates
        .iter()
        .map(|record| {
            let offending = offending_vectors(record, threat, policy);
            Ranked {
                record,
                rate: record.effective_failure_rate(policy.sla_prior_weight),
                penalty: penalty(&offending, policy),
                offending,
            }
        })
        .partition(|r| r.offending.is_empty());

    clean.sort_by(by_rate_then_id);
    tainted.sort_by(|a, b| a.penalty.cmp(&b.penalty).then_with(|| by_rate_then_id(a, b)));

    let clean_count = clean.len().min(needed);
    let backfill = needed - clean_count;
    let chosen =
        clean.iter().take(clean_count).chain(tainted.iter().take(backfill)).map(|r| r.record.id.clone()).collect();
    let backfilled = tainted.iter().take(backfill).map(|r| (r.record.id.clone(), r.offending.clone())).collect();
    Ok(SelectionResult { chosen, clean_count, backfilled })
}
