//! Simulation rig: synthetic model versions, scenario runs with scheduled
//! deployments and crashes, and the pipeline latency bench.
//!
//! Scenarios are JSON documents (see [`Scenario`]); every field is
//! optional and unknown fields are rejected with a JSON pointer.

pub mod artifacts;
pub mod bench;
pub mod config;
pub mod run;

pub use bench::{bench_latency, BenchResult, LatencySummary};
pub use config::{parse_config, AttemptKind, BenchConfig, Links, ModelSpec, Scenario, Schedule};
pub use run::{ordering_violations, run_scenario, DeploymentRecord, FinalState, ScenarioResult};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::serving::LatencyDist;

    fn small(deployments: usize, rollbacks: usize) -> Scenario {
        Scenario {
            seed: 3,
            requests: 400,
            deployments: Schedule {
                deployments,
                rollbacks,
                ..Default::default()
            },
            deployer: crate::serving::DeployerConfig {
                drain_window_ms: 150,
                drain_poll_ms: 5,
                drain_timeout_ms: 5000,
                call_timeout_ms: 1000,
            },
            ..Default::default()
        }
    }

    #[test]
    fn steady_state_has_no_errors() {
        let r = run_scenario(&small(0, 0)).unwrap();
        assert_eq!(r.completed, 400);
        assert_eq!(r.error_total(), 0);
        assert_eq!(r.version_mismatch_count, 0);
        assert!(r.accounting_consistent && r.converged);
        assert_eq!(r.score_mismatches, 0);
        assert_eq!(r.p50_ms, Some(3.0));
    }

    #[test]
    fn deployments_and_rollbacks_stay_consistent() {
        let r = run_scenario(&small(3, 2)).unwrap();
        assert!(r.deployments.iter().all(|d| d.outcome == "ok"), "{:#?}", r.deployments);
        assert_eq!(r.version_mismatch_count, 0);
        assert_eq!((r.fingerprint_mismatches, r.score_mismatches), (0, 0));
        assert_eq!(r.safety_violations, 0);
        assert_eq!(r.ordering_violations, 0);
        assert!(r.converged, "{:?}", r.final_state);
        assert_eq!(r.final_state.stable_version.as_deref(), Some("v005"));
        assert!(r.responses_by_version.len() >= 3);
    }

    #[test]
    fn equal_seeds_replay_identically() {
        let mut s = small(2, 1);
        s.links.fetch.latency = LatencyDist::Lognormal { mu: 0.5, sigma: 0.5 };
        s.links.fetch.drop_probability = 0.01;
        let a = run_scenario(&s).unwrap();
        let b = run_scenario(&s).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn bench_fixed_latencies() {
        let r = bench_latency(&BenchConfig {
            requests: 50,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(r.errors, 0);
        assert_eq!(r.parallel.unwrap().p50_ms, 25.0);
        assert_eq!(r.sequential.unwrap().p50_ms, 45.0);
    }
}
