//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::alloc::{GlobalAlloc, Layout, System};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use itertools::Itertools;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use quorumgate::attack::{self, AttackVector};
use quorumgate::config::{FleetConfig, RunConfig};
use quorumgate::gateway::{self, GatewayConfig};
use quorumgate::http::{self, Endpoint};
use quorumgate::mock::{self, FaultMode, MockServiceProfile};
use quorumgate::probe::ProbeSettings;
use quorumgate::quorum::{
    self, NoopRecorder, QuorumError, ReplicaTarget, ReplicationSettings, SimReply, SimulatedTransport,
};
use quorumgate::registry::{InvocationOutcome, Registry, SelectionPolicy, ServiceRecord, SharedRegistry, Verdict};
use quorumgate::replay;
use quorumgate::scanner::{self, ClientRequest, ScannerThresholds, ThreatProfile};
use quorumgate::selector;
use quorumgate::soap;

mod common;

/// Tracks live and peak heap bytes.
struct Counting;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = LIVE.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        LIVE.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg()) }
}

fn loopback() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

async fn c1_table2_replay() -> Check {
    let config = RunConfig::default();
    let started = Instant::now();
    let report = replay::cmd_replay_table2(&config).await.map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let pattern = report.pattern();
    let expected = [Some(100), Some(100), Some(1), Some(1), Some(1), Some(1)];
    ensure(pattern == expected, || format!("pattern {pattern:?}, expected {expected:?}"))?;
    for row in &report.services {
        let o = row.outcome.as_ref().unwrap();
        if o.percentage_encoding == 100 {
            let r = o.ratio.unwrap_or(f64::INFINITY);
            ensure(r >= 2.0, || format!("{} ratio {r:.2} below 2.0", row.id))?;
        }
    }
    let eager = report.composite_replicas.iter().filter(|id| id.starts_with("axis2")).count();
    ensure(report.composite_replicas.len() == 4 && eager == 1, || {
        format!("composite replicas {:?}", report.composite_replicas)
    })?;
    ensure(elapsed <= Duration::from_secs(180), || format!("took {elapsed:?}"))?;
    let ratios: Vec<String> = report
        .services
        .iter()
        .chain([&report.composite])
        .map(|r| format!("{:.2}", r.outcome.as_ref().and_then(|o| o.ratio).unwrap_or(f64::NAN)))
        .collect();
    Ok(format!("pattern 100/100/1/1/1 composite 1, ratios [{}], {:.0}s", ratios.join(", "), elapsed.as_secs_f64()))
}

async fn c2_timing_fidelity() -> Check {
    let mut notes = Vec::new();
    for d in [10u64, 100, 500] {
        let delay = Duration::from_millis(d);
        let ep = Endpoint::parse(&common::url(common::constant_stub(delay).await)).unwrap();
        let mut worst = Duration::ZERO;
        for _ in 0..5 {
            let ex =
                http::send(&ep, "POST", &[], soap::benign_request().as_bytes()).await.map_err(|e| e.to_string())?;
            let t = ex.response_time;
            ensure(t >= delay && t <= delay + Duration::from_millis(50), || format!("D={d}ms measured {t:?}"))?;
            worst = worst.max(t);
        }
        notes.push(format!("D={d}ms max {:.1}ms", worst.as_secs_f64() * 1e3));
    }
    Ok(notes.join(", "))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Behaviour {
    Correct,
    Crash,
    Wrong(u8),
    Slow,
}

async fn c3_quorum_safety() -> Check {
    let good = b"<r>ok</r>".to_vec();
    let request = ClientRequest::new(soap::benign_request().into_bytes(), vec![]).unwrap();
    let mut runs = 0;
    for f in [1usize, 2] {
        let n = 3 * f + 1;
        let targets: Vec<ReplicaTarget> =
            (0..n).map(|i| ReplicaTarget { id: format!("r{i}"), endpoint: String::new() }).collect();
        let faults = [Behaviour::Crash, Behaviour::Wrong(0), Behaviour::Wrong(1), Behaviour::Slow];
        for k in 0..=f {
            for placed in (0..k).map(|_| faults).multi_cartesian_product() {
                let mut seq = placed;
                seq.resize(n, Behaviour::Correct);
                // every distinct arrival order; replica i arrives i-th, slow ones last
                for order in seq.into_iter().permutations(n).unique() {
                    for extension in [false, true] {
                        let mut t = SimulatedTransport::new();
                        for (i, b) in order.iter().enumerate() {
                            let at = Duration::from_millis(i as u64 + 1);
                            let (delay, reply) = match b {
                                Behaviour::Correct => (at, SimReply::Respond(good.clone())),
                                Behaviour::Crash => (at, SimReply::Fail),
                                Behaviour::Wrong(w) => (at, SimReply::Respond(format!("<r>bad{w}</r>").into_bytes())),
                                Behaviour::Slow => (Duration::from_millis(2000), SimReply::Respond(good.clone())),
                            };
                            t = t.replica(&format!("r{i}"), delay, reply);
                        }
                        let settings = ReplicationSettings {
                            vote_extension: extension,
                            ..ReplicationSettings::default().with_f(f)
                        };
                        let r = quorum::invoke_quorum(&t, &targets, &request, &settings, &NoopRecorder).await;
                        match r {
                            Ok(res) if res.winner == good => runs += 1,
                            other => return Err(format!("f={f} order {order:?}: {other:?}")),
                        }
                    }
                }
            }
        }
    }
    Ok(format!("{runs} runs over fault placements, arrival orders and both vote modes; 0 counterexamples"))
}

async fn c4_straggler() -> Check {
    let mut profiles: Vec<_> = (0..4).map(|i| MockServiceProfile::streaming(&format!("s{i}"))).collect();
    // 10 ms base latency plus 1990 ms of injected delay
    profiles[3] = profiles[3].clone().with_fault(FaultMode::Slow { ms: 1990 });
    let fleet = mock::spawn_fleet(profiles.clone(), loopback()).map_err(|e| e.to_string())?;
    let registry =
        FleetConfig::from_profiles(profiles).registry(&fleet.endpoints(), 10.0).map_err(|e| e.to_string())?;
    let gw =
        gateway::serve(GatewayConfig::default(), SharedRegistry::new(registry)).await.map_err(|e| e.to_string())?;
    let ep = Endpoint::parse(&gw.endpoint(gateway::DEFAULT_FUNCTIONALITY)).unwrap();
    let mut worst = Duration::ZERO;
    for _ in 0..5 {
        let start = Instant::now();
        let ex = http::send(&ep, "POST", &[], soap::benign_request().as_bytes()).await.map_err(|e| e.to_string())?;
        let took = start.elapsed();
        ensure(ex.response.status == 200, || format!("status {}", ex.response.status))?;
        ensure(took < Duration::from_millis(500), || format!("end-to-end {took:?}"))?;
        worst = worst.max(took);
    }
    gw.shutdown().await;
    Ok(format!("replicas 10/10/10/2000 ms, worst end-to-end {:.1} ms over 5 requests", worst.as_secs_f64() * 1e3))
}

fn random_instance(rng: &mut StdRng) -> (Vec<ServiceRecord>, ThreatProfile, SelectionPolicy) {
    let n = rng.random_range(1..=8);
    let verdicts = [Verdict::Vulnerable, Verdict::NotVulnerable, Verdict::Untested];
    let cands = (0..n)
        .map(|i| {
            let mut r = ServiceRecord::new(&format!("s{i}"), "http://127.0.0.1:1/ws", "f")
                .with_sla(rng.random_range(0..4) as f64 / 10.0);
            for v in AttackVector::ALL {
                r = r.with_verdict(v, verdicts[rng.random_range(0..3)]);
            }
            r
        })
        .collect();
    let mut all = AttackVector::ALL.to_vec();
    all.shuffle(rng);
    let threat = ThreatProfile::of(all[..rng.random_range(0..=3)].iter().copied());
    let mut priority = AttackVector::ALL.to_vec();
    priority.shuffle(rng);
    let policy = SelectionPolicy {
        f: rng.random_range(0..=2),
        vulnerability_priority: priority,
        sla_prior_weight: 10.0,
        untested_is_clean: rng.random_bool(0.5),
    };
    (cands, threat, policy)
}

async fn c5_selection_oracle() -> Check {
    let mut rng = StdRng::seed_from_u64(0x5e1ec7);
    let mut solvable = 0;
    const N: usize = 2000;
    for case in 0..N {
        let (cands, threat, policy) = random_instance(&mut rng);
        let got = selector::select(&cands, &threat, &policy);
        match (common::best_subset(&cands, &threat, &policy), got) {
            (None, Err(selector::SelectionError::InsufficientDiversity { .. })) => {}
            (Some(best), Ok(r)) => {
                let mut chosen = r.chosen.clone();
                chosen.sort();
                ensure(chosen == best, || format!("case {case}: got {chosen:?}, oracle {best:?}"))?;
                solvable += 1;
            }
            (best, got) => return Err(format!("case {case}: oracle {best:?}, select {got:?}")),
        }
    }
    // the published composite: three clean services and one backfill
    let svc = |id: &str, v| {
        ServiceRecord::new(id, "http://127.0.0.1:1/ws", "f").with_verdict(AttackVector::CoerciveParsing, v)
    };
    let cands = vec![
        svc("axis2-a", Verdict::Vulnerable),
        svc("axis2-b", Verdict::Vulnerable),
        svc("aspnet-a", Verdict::NotVulnerable),
        svc("aspnet-b", Verdict::NotVulnerable),
        svc("aspnet-c", Verdict::NotVulnerable),
    ];
    let threat = ThreatProfile::of([AttackVector::CoerciveParsing]);
    let r = selector::select(&cands, &threat, &SelectionPolicy::default()).map_err(|e| e.to_string())?;
    let mut chosen = r.chosen.clone();
    chosen.sort();
    ensure(Some(chosen) == common::best_subset(&cands, &threat, &SelectionPolicy::default()), || {
        "published instance".into()
    })?;
    ensure(r.clean_count == 3 && r.backfilled.len() == 1, || format!("{r:?}"))?;
    Ok(format!("{N} random instances ({solvable} solvable) match; published instance 3 clean + 1 backfill"))
}

async fn c6_scanner_closure() -> Check {
    let th = ScannerThresholds::default();
    let s = ProbeSettings::default();
    for v in AttackVector::ALL {
        let p = attack::payload_for(v, s.coercive_depth, s.oversize_bytes, s.collision_key_count)
            .map_err(|e| e.to_string())?;
        let req = ClientRequest::new(p.envelope_bytes, p.transport_headers).unwrap();
        let profile = scanner::scan(&req, &th);
        ensure(profile.contains(v), || format!("{v} not flagged: {:?}", profile.vectors))?;
    }
    let benign = scanner::scan(&ClientRequest::new(soap::benign_request().into_bytes(), vec![]).unwrap(), &th);
    ensure(benign.vectors.is_empty(), || format!("benign flagged {:?}", benign.vectors))?;

    let deep = attack::generate_coercive_payload(1_000_000).map_err(|e| e.to_string())?;
    let input_len = deep.envelope_bytes.len();
    let req = ClientRequest::new(deep.envelope_bytes, vec![]).unwrap();
    let base = LIVE.load(Ordering::SeqCst);
    PEAK.store(base, Ordering::SeqCst);
    let profile = scanner::scan(&req, &th);
    let extra = PEAK.load(Ordering::SeqCst).saturating_sub(base);
    ensure(profile.contains(AttackVector::CoerciveParsing), || "depth 10^6 not flagged".into())?;
    ensure(extra < 64 * 1024, || format!("scan of a {input_len}-byte input peaked at {extra} extra heap bytes"))?;
    Ok(format!("6/6 generators flagged, benign empty, depth-10^6 scan used {extra} B extra heap ({input_len} B input)"))
}

async fn c7_active_time_retry() -> Check {
    let profiles: Vec<_> = (0..4).map(|i| MockServiceProfile::streaming(&format!("s{i}"))).collect();
    let fleet = mock::spawn_fleet(profiles.clone(), loopback()).map_err(|e| e.to_string())?;
    let registry =
        FleetConfig::from_profiles(profiles).registry(&fleet.endpoints(), 10.0).map_err(|e| e.to_string())?;
    let settings = ReplicationSettings::default();
    let gw =
        gateway::serve(GatewayConfig::default(), SharedRegistry::new(registry)).await.map_err(|e| e.to_string())?;
    let ep = Endpoint::parse(&gw.endpoint(gateway::DEFAULT_FUNCTIONALITY)).unwrap();
    let body = soap::benign_request();

    // every replica drops exactly one round, then answers
    for i in 0..4 {
        fleet.set_fault_mode(&format!("s{i}"), FaultMode::FailNext { count: 1 }).map_err(|e| e.to_string())?;
    }
    let ex = http::send(&ep, "POST", &[], body.as_bytes()).await.map_err(|e| e.to_string())?;
    ensure(ex.response.status == 200, || format!("one-round outage: status {}", ex.response.status))?;
    let retries = gw.decisions().last().unwrap().retries;
    ensure(retries == 1, || format!("one-round outage used {retries} re-executions"))?;

    for i in 0..4 {
        fleet.kill(&format!("s{i}")).map_err(|e| e.to_string())?;
    }
    let ex = http::send(&ep, "POST", &[], body.as_bytes()).await.map_err(|e| e.to_string())?;
    ensure(ex.response.status == 502, || format!("permanent outage: status {}", ex.response.status))?;
    let retries = gw.decisions().last().unwrap().retries;
    ensure(retries == settings.max_reexecutions, || format!("permanent outage retried {retries} times"))?;
    gw.shutdown().await;

    // the same two cases through the transport-independent path
    let targets: Vec<ReplicaTarget> =
        (0..4).map(|i| ReplicaTarget { id: format!("r{i}"), endpoint: String::new() }).collect();
    let req = ClientRequest::new(body.into_bytes(), vec![]).unwrap();
    let ms = Duration::from_millis;
    let flaky = (0..4).fold(SimulatedTransport::new(), |t, i| {
        t.replica_rounds(&format!("r{i}"), vec![(ms(5), SimReply::Fail), (ms(5), SimReply::Respond(b"<ok/>".to_vec()))])
    });
    let r = quorum::invoke_quorum(&flaky, &targets, &req, &settings, &NoopRecorder).await.map_err(|e| e.to_string())?;
    ensure(r.retries_used == 1, || format!("simulated retries {}", r.retries_used))?;
    let dead = (0..4).fold(SimulatedTransport::new(), |t, i| t.replica(&format!("r{i}"), ms(5), SimReply::Fail));
    let e = quorum::invoke_quorum(&dead, &targets, &req, &settings, &NoopRecorder).await.unwrap_err();
    ensure(matches!(e, QuorumError::TotalFailure { rounds: 2, .. }), || format!("{e:?}"))?;
    Ok("one-round outage: 200 after 1 re-execution; permanent outage: 502 after 1 re-execution".into())
}

async fn c8_estimator() -> Check {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    let mut reg = Registry::new(10.0);
    reg.register_service(ServiceRecord::new("a", "http://127.0.0.1:1/ws", "f").with_sla(0.1)).unwrap();
    let fresh = reg.effective_failure_rate("a").unwrap();
    ensure(close(fresh, 0.1), || format!("prior-only {fresh}"))?;
    let mut after = 0.0;
    for _ in 0..10 {
        after = reg.record_invocation("a", InvocationOutcome::Success).unwrap();
    }
    ensure(close(after, 0.05), || format!("ten successes {after}"))?;
    let mut reg = Registry::new(10.0);
    reg.register_service(ServiceRecord::new("b", "http://127.0.0.1:1/ws", "f")).unwrap();
    let one = reg.record_invocation("b", InvocationOutcome::Failure).unwrap();
    ensure(close(one, 1.0 / 11.0), || format!("one failure {one}"))?;

    let mut rng = StdRng::seed_from_u64(8);
    let mut steps = 0;
    for _ in 0..500 {
        let sla: f64 = rng.random_range(0.0..=1.0);
        let w: f64 = rng.random_range(0.0..50.0);
        let mut reg = Registry::new(w);
        reg.register_service(ServiceRecord::new("s", "http://127.0.0.1:1/ws", "f").with_sla(sla)).unwrap();
        let (mut n, mut fails) = (0u64, 0u64);
        for _ in 0..rng.random_range(1..300) {
            let p: f64 = rng.random_range(0.0..1.0);
            let fail = rng.random_bool(p);
            let got = reg
                .record_invocation("s", if fail { InvocationOutcome::Failure } else { InvocationOutcome::Success })
                .unwrap();
            n += 1;
            fails += fail as u64;
            let want = (fails as f64 + sla * w) / (n as f64 + w);
            ensure(close(got, want), || format!("sla={sla} w={w} n={n}: {got} vs {want}"))?;
            steps += 1;
        }
    }
    Ok(format!("3 worked examples exact; {steps} random updates within 1e-9"))
}

fn main() {
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(4).enable_all().build().unwrap();
    let paused = tokio::runtime::Builder::new_current_thread().enable_all().start_paused(true).build().unwrap();

    let mut failed = 0;
    let mut report = |n: u8, name: &str, result: Check| match result {
        Ok(detail) => println!("PASS  {n}. {name}: {detail}"),
        Err(why) => {
            failed += 1;
            println!("FAIL  {n}. {name}: {why}");
        }
    };
    report(1, "Fleet replay", rt.block_on(c1_table2_replay()));
    report(2, "Probe-timing fidelity", rt.block_on(c2_timing_fidelity()));
    report(3, "Quorum safety", paused.block_on(c3_quorum_safety()));
    report(4, "Straggler independence", rt.block_on(c4_straggler()));
    report(5, "Selection oracle equivalence", rt.block_on(c5_selection_oracle()));
    report(6, "Scanner/generator closure", rt.block_on(c6_scanner_closure()));
    report(7, "Active+Time retry", rt.block_on(c7_active_time_retry()));
    report(8, "Failure-rate estimator", rt.block_on(c8_estimator()));
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
