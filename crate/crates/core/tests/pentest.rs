use std::net::SocketAddr;

use proptest::prelude::*;
use quorumgate::attack::AttackVector;
use quorumgate::config::FleetConfig;
use quorumgate::mock::{self, MockServiceProfile};
use quorumgate::probe::{self, ProbeSettings};
use quorumgate::registry::{InvocationOutcome, LoggedVerdict, Registry, ServiceRecord, SharedRegistry, Verdict};

fn loopback() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn pentest_updates_verdicts_only() {
    let profiles = vec![
        MockServiceProfile::eager_tree("weak"),
        MockServiceProfile::streaming("hard"),
        MockServiceProfile::streaming("gone"),
    ];
    let fleet = mock::spawn_fleet(profiles.clone(), loopback()).unwrap();
    fleet.kill("gone").unwrap();
    let registry =
        SharedRegistry::new(FleetConfig::from_profiles(profiles).registry(&fleet.endpoints(), 10.0).unwrap());
    let before = registry.snapshot();

    let settings = ProbeSettings::scaled(10);
    let vectors = [AttackVector::CoerciveParsing, AttackVector::AttackObfuscation];
    let entries = probe::pentest_all(&registry, &settings, &vectors).await.unwrap();
    assert_eq!(entries.len(), 6);

    let after = registry.snapshot();
    let v = |id: &str, vec| after.get(id).unwrap().verdict(vec);
    assert_eq!(v("weak", AttackVector::CoerciveParsing), Verdict::Vulnerable);
    assert_eq!(v("hard", AttackVector::CoerciveParsing), Verdict::NotVulnerable);
    assert_eq!(v("gone", AttackVector::CoerciveParsing), Verdict::Untested);
    for id in ["weak", "hard", "gone"] {
        assert_eq!(v(id, AttackVector::AttackObfuscation), Verdict::Untested);
        // probing is not traffic: counters stay put
        let (b, a) = (before.get(id).unwrap(), after.get(id).unwrap());
        assert_eq!((a.invocations, a.failures), (b.invocations, b.failures));
    }
    let gone: Vec<_> = entries.iter().filter(|e| e.service_id == "gone").collect();
    assert_eq!(gone[0].verdict, LoggedVerdict::Untested);
    assert!(gone[0].note.is_some());
    assert_eq!(gone[1].verdict, LoggedVerdict::NotProbeable);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.jsonl");
    probe::write_report(&path, &entries, &settings).unwrap();
    assert_eq!(probe::read_report(&path).unwrap(), entries);
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(text.contains(&settings.fingerprint()));
}

#[tokio::test]
async fn no_vectors_leaves_registry_alone() {
    let mut reg = Registry::new(10.0);
    reg.register_service(ServiceRecord::new("a", "http://127.0.0.1:1/ws", "f")).unwrap();
    let shared = SharedRegistry::new(reg.clone());
    let entries = probe::pentest_all(&shared, &ProbeSettings::scaled(10), &[]).await.unwrap();
    assert!(entries.is_empty());
    assert_eq!(shared.snapshot(), reg);
}

#[test]
fn estimator_worked_examples() {
    let mut reg = Registry::new(10.0);
    reg.register_service(ServiceRecord::new("a", "http://127.0.0.1:1/ws", "f").with_sla(0.1)).unwrap();
    // fresh: exactly the stated rate
    assert!((reg.effective_failure_rate("a").unwrap() - 0.1).abs() < 1e-12);
    // ten successes: (0 + 1) / 20
    for _ in 0..10 {
        reg.record_invocation("a", InvocationOutcome::Success).unwrap();
    }
    assert!((reg.effective_failure_rate("a").unwrap() - 0.05).abs() < 1e-12);

    let mut reg = Registry::new(10.0);
    reg.register_service(ServiceRecord::new("b", "http://127.0.0.1:1/ws", "f")).unwrap();
    // one failure against a zero-rate SLA: 1 / 11
    let r = reg.record_invocation("b", InvocationOutcome::Failure).unwrap();
    assert!((r - 1.0 / 11.0).abs() < 1e-12);
    assert!(reg.record_invocation("nope", InvocationOutcome::Success).is_err());
}

#[test]
fn registry_toml_round_trip() {
    let mut reg = Registry::new(4.0);
    reg.register_service(
        ServiceRecord::new("a", "http://127.0.0.1:8080/ws", "stock-purchase")
            .with_sla(0.02)
            .with_label("eager-tree")
            .with_verdict(AttackVector::CoerciveParsing, Verdict::Vulnerable),
    )
    .unwrap();
    reg.register_service(ServiceRecord::new("b", "http://127.0.0.1:8081/ws", "stock-purchase")).unwrap();
    reg.record_invocation("a", InvocationOutcome::Failure).unwrap();
    let back = Registry::from_toml(&reg.to_toml()).unwrap();
    assert_eq!(back, reg);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("registry.toml");
    reg.save(&path).unwrap();
    assert_eq!(Registry::load(&path).unwrap(), reg);
    assert!(Registry::from_toml("[[service]]\nid = \"x\"\nendpoint = \"ftp://h/\"\nfunctionality = \"f\"\n").is_err());
}

proptest! {
    #[test]
    fn estimate_converges_to_observed_rate(
        sla in 0.0f64..1.0,
        w in 0.0f64..50.0,
        outcomes in proptest::collection::vec(any::<bool>(), 1..400),
    ) {
        let mut reg = Registry::new(w);
        reg.register_service(ServiceRecord::new("s", "http://127.0.0.1:1/ws", "f").with_sla(sla)).unwrap();
        let mut last = 0.0;
        for ok in &outcomes {
            last = reg.record_invocation("s", if *ok { InvocationOutcome::Success } else { InvocationOutcome::Failure }).unwrap();
        }
        let n = outcomes.len() as f64;
        let failures = outcomes.iter().filter(|ok| !**ok).count() as f64;
        let expected = (failures + sla * w) / (n + w);
        prop_assert!((last - expected).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&last));
        // the prior's pull is bounded by w / (n + w)
        prop_assert!((last - failures / n).abs() <= w / (n + w) + 1e-9);
    }
}
