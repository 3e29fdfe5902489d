mod common;

use lemb_core::harness::{run_scenario, AttemptKind, ScenarioResult};
use lemb_core::serving::{LatencyDist, Phase};

fn check_invariants(name: &str, r: &ScenarioResult) {
    assert!(r.accounting_consistent, "{name}: accounting");
    assert_eq!(
        r.requests as u64,
        r.completed as u64 + r.error_total() + r.in_flight_at_shutdown as u64,
        "{name}: conservation"
    );
    assert_eq!(r.version_mismatch_count, 0, "{name}");
    assert_eq!(r.fingerprint_mismatches, 0, "{name}");
    assert_eq!(r.score_mismatches, 0, "{name}");
    assert_eq!(r.safety_violations, 0, "{name}");
    assert!(r.safety_samples > 0, "{name}: the safety sampler never ran");
    assert_eq!(r.ordering_violations, 0, "{name}");
    for d in &r.deployments {
        assert_eq!(lemb_core::harness::ordering_violations(&d.report), 0, "{name}: {d:#?}");
        assert_eq!(d.outcome, "ok", "{name}: {d:#?}");
    }
    assert!(r.converged, "{name}: {:?}", r.final_state);
    assert_eq!(r.final_state.phase, Phase::Steady, "{name}");
}

#[test]
fn committed_matrix_holds_every_invariant() {
    let matrix = common::scenario_matrix();
    assert!(matrix.len() >= 6, "{} scenarios", matrix.len());
    for (name, s) in matrix {
        let r = run_scenario(&s).unwrap();
        check_invariants(&name, &r);
        let attempts = s.deployments.deployments + s.deployments.rollbacks;
        assert_eq!(r.deployments.len(), attempts, "{name}");
        if attempts > 0 {
            let served = r.responses_by_version.len();
            assert!(served >= 2, "{name}: traffic only saw {served} version(s)");
        }
    }
}

#[test]
fn crash_in_phase_two_resumes_to_the_candidate() {
    let s = common::load_scenario("crash_phase2.json");
    let r = run_scenario(&s).unwrap();
    let crashes: Vec<_> = r.deployments.iter().filter(|d| d.kind == AttemptKind::CrashDeploy).collect();
    assert_eq!(crashes.len(), s.deployments.crash_cpu_leaf_at.len());
    for d in crashes {
        let unreachable = d.report.iter().any(|e| e.outcome.starts_with("unreachable"));
        assert!(unreachable, "{d:#?}");
        assert_eq!(d.report.last().unwrap().phase, Phase::Steady);
    }
    // the outage shows up as embedding errors, never as a mismatch
    assert!(r.error_total() > 0);
}

#[test]
fn rollbacks_restore_the_stable_version() {
    let s = common::load_scenario("int4_sharded.json");
    let r = run_scenario(&s).unwrap();
    let mut stable = "v000".to_string();
    for d in &r.deployments {
        match d.kind {
            AttemptKind::RollbackPhase1 | AttemptKind::RollbackPhase2 => {
                assert!(d.report.iter().any(|e| e.action == format!("retire_gpu {}", d.version_id)), "{d:#?}");
            }
            _ => stable = d.version_id.clone(),
        }
    }
    assert_eq!(r.final_state.stable_version.as_deref(), Some(stable.as_str()));
}

#[test]
fn equal_seeds_replay_identically_under_chaos() {
    let mut s = common::load_scenario("lognormal_drops.json");
    s.requests = 1500;
    let a = serde_json::to_string(&run_scenario(&s).unwrap()).unwrap();
    for _ in 0..4 {
        assert_eq!(a, serde_json::to_string(&run_scenario(&s).unwrap()).unwrap());
    }
    s.seed += 1;
    let c = serde_json::to_string(&run_scenario(&s).unwrap()).unwrap();
    assert_ne!(a, c);
}

#[test]
fn sequential_pipeline_keeps_versions_consistent() {
    let mut s = common::load_scenario("cvr_head.json");
    s.ads.early_fetch = false;
    s.links.fetch.latency = LatencyDist::Uniform { lo: 0.5, hi: 4.0 };
    let r = run_scenario(&s).unwrap();
    check_invariants("cvr sequential", &r);
}
