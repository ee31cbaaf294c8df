//! Selection checked against exhaustive enumeration of every replica set.

mod common;

use common::{best_subset as oracle, offends, severity};
use proptest::prelude::*;
use quorumgate::attack::AttackVector;
use quorumgate::registry::{SelectionPolicy, ServiceRecord, Verdict};
use quorumgate::scanner::ThreatProfile;
use quorumgate::selector::{self, SelectionError};

fn verdict() -> impl Strategy<Value = Verdict> {
    prop_oneof![Just(Verdict::Vulnerable), Just(Verdict::NotVulnerable), Just(Verdict::Untested)]
}

fn candidate(i: usize) -> impl Strategy<Value = ServiceRecord> {
    // few distinct rates so ties are common
    (0u32..4, proptest::collection::vec(verdict(), 6)).prop_map(move |(rate, verdicts)| {
        let mut r = ServiceRecord::new(&format!("s{i}"), "http://127.0.0.1:1/ws", "f").with_sla(rate as f64 / 10.0);
        for (v, verdict) in AttackVector::ALL.into_iter().zip(verdicts) {
            r = r.with_verdict(v, verdict);
        }
        r
    })
}

fn instance() -> impl Strategy<Value = (Vec<ServiceRecord>, ThreatProfile, SelectionPolicy)> {
    (1usize..=8)
        .prop_flat_map(|n| (0..n).map(candidate).collect::<Vec<_>>())
        .prop_flat_map(|cands| {
            (
                Just(cands),
                proptest::sample::subsequence(AttackVector::ALL.to_vec(), 0..=3),
                Just(AttackVector::ALL.to_vec()).prop_shuffle(),
                0usize..=2,
                any::<bool>(),
            )
        })
        .prop_map(|(cands, threat, priority, f, untested_is_clean)| {
            let policy =
                SelectionPolicy { f, vulnerability_priority: priority, sla_prior_weight: 10.0, untested_is_clean };
            (cands, ThreatProfile::of(threat), policy)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1500))]

    #[test]
    fn matches_exhaustive_search((cands, threat, policy) in instance()) {
        let got = selector::select(&cands, &threat, &policy);
        match oracle(&cands, &threat, &policy) {
            None => {
                let shortfall = matches!(got, Err(SelectionError::InsufficientDiversity { .. }));
                prop_assert!(shortfall, "{:?}", got);
            }
            Some(best) => {
                let r = got.unwrap();
                let mut chosen = r.chosen.clone();
                chosen.sort();
                prop_assert_eq!(&chosen, &best);
                prop_assert_eq!(r.chosen.len(), policy.replicas());
                let clean = r
                    .chosen
                    .iter()
                    .filter(|id| severity(cands.iter().find(|c| &c.id == *id).unwrap(), &threat, &policy) == 0)
                    .count();
                prop_assert_eq!(r.clean_count, clean);
                prop_assert_eq!(r.backfilled.len(), policy.replicas() - clean);
                // clean services are listed before backfilled ones
                prop_assert!(r.chosen[clean..].iter().zip(&r.backfilled).all(|(a, (b, _))| a == b));
                for (id, offending) in &r.backfilled {
                    let c = cands.iter().find(|c| &c.id == id).unwrap();
                    prop_assert_eq!(offending, &offends(c, &threat, &policy));
                    prop_assert!(!offending.is_empty());
                }
            }
        }
    }

    #[test]
    fn empty_threat_ignores_verdicts((cands, _, policy) in instance()) {
        if let Ok(r) = selector::select(&cands, &ThreatProfile::empty(), &policy) {
            prop_assert_eq!(r.clean_count, policy.replicas());
            prop_assert!(r.backfilled.is_empty());
        }
    }
}

#[test]
fn published_fleet_instance() {
    let svc = |id: &str, v| {
        ServiceRecord::new(id, "http://127.0.0.1:1/ws", "stock-purchase").with_verdict(AttackVector::CoerciveParsing, v)
    };
    let cands = vec![
        svc("axis2-a", Verdict::Vulnerable),
        svc("axis2-b", Verdict::Vulnerable),
        svc("aspnet-a", Verdict::NotVulnerable),
        svc("aspnet-b", Verdict::NotVulnerable),
        svc("aspnet-c", Verdict::NotVulnerable),
    ];
    let threat = ThreatProfile::of([AttackVector::CoerciveParsing]);
    let r = selector::select(&cands, &threat, &SelectionPolicy::default()).unwrap();
    assert_eq!(r.clean_count, 3);
    assert_eq!(r.chosen.len(), 4);
    assert_eq!(r.chosen[..3], ["aspnet-a", "aspnet-b", "aspnet-c"]);
    assert_eq!(r.backfilled.len(), 1);
    assert!(r.backfilled[0].0.starts_with("axis2"));
    // benign traffic needs no backfill
    let r = selector::select(&cands, &ThreatProfile::empty(), &SelectionPolicy::default()).unwrap();
    assert_eq!(r.clean_count, 4);
}

#[test]
fn f_zero_selects_one() {
    let cands = vec![
        ServiceRecord::new("b", "http://127.0.0.1:1/ws", "f").with_sla(0.1),
        ServiceRecord::new("a", "http://127.0.0.1:1/ws", "f").with_sla(0.2),
    ];
    let r = selector::select(&cands, &ThreatProfile::empty(), &SelectionPolicy::default().with_f(0)).unwrap();
    assert_eq!(r.chosen, ["b"]);
}
