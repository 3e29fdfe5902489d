//! In-process scenario runner.
//!
//! Every service runs on one paused-clock tokio runtime, so time is virtual
//! and a scenario replays identically for a given seed. Requests arrive
//! open-loop, deployments are triggered by request counts, and a sampler
//! checks the version-safety invariant throughout.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tokio::task::JoinSet;
use tokio::time::Instant;

use super::artifacts::{write_version, VersionArtifacts, PIN_TABLE, USER_TABLE};
use super::config::{AttemptKind, ModelSpec, Scenario};
use crate::error::{Error, Result};
use crate::metrics::quantile;
use crate::scorer::Scores;
use crate::serving::ads_server::{InferError, InferResponse};
use crate::serving::deployer::{Clock, DeployError, Deployer, DeploymentState, Phase, ReportEntry};
use crate::serving::{
    AdsServer, CpuLeaf, CpuLeafConfig, GpuLeaf, GpuLeafConfig, InferRequest, LatencyDist, LocalTransport, SimLink,
    SwitchTransport, Transport,
};
use crate::tables::splitmix64_mix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentRecord {
    pub attempt: usize,
    pub version_id: String,
    pub kind: AttemptKind,
    /// `ok` or the deployer error code.
    pub outcome: String,
    pub report: Vec<ReportEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalState {
    pub phase: Phase,
    pub stable_version: Option<String>,
    pub cpu_version: Option<String>,
    pub gpu_versions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub seed: u64,
    pub requests: u64,
    pub completed: u64,
    pub errors: BTreeMap<String, u64>,
    pub in_flight_at_shutdown: u64,
    /// Score requests the scorer rejected for naming an uninstalled version.
    pub version_mismatch_count: u64,
    /// Responses whose model fingerprint differs from the one recorded for
    /// their version.
    pub fingerprint_mismatches: u64,
    /// Responses whose score differs from an offline recomputation with
    /// the artifacts of their version.
    pub score_mismatches: u64,
    pub safety_samples: u64,
    /// Samples where the embedding leaf served a version the scorer lacked.
    pub safety_violations: u64,
    /// Reports where a phase started before the previous one completed.
    pub ordering_violations: u64,
    /// Issued requests equal completed plus failed plus in flight, on both
    /// the harness side and the ads server's own counters.
    pub accounting_consistent: bool,
    pub p50_ms: Option<f64>,
    pub p99_ms: Option<f64>,
    pub responses_by_version: BTreeMap<String, u64>,
    pub deployments: Vec<DeploymentRecord>,
    pub final_state: FinalState,
    /// Steady, with the stable version the only one installed anywhere.
    pub converged: bool,
}

impl ScenarioResult {
    pub fn error_total(&self) -> u64 {
        self.errors.values().sum()
    }
}

/// Counts reports where Phase 2 starts before Phase 1 completed, Phase 3
/// starts before Phase 2 started, or timestamps fail to increase.
pub fn ordering_violations(report: &[ReportEntry]) -> u64 {
    let first = |pred: &dyn Fn(&ReportEntry) -> bool| report.iter().find(|e| pred(e)).map(|e| e.timestamp_ms);
    let p1 = first(&|e| e.phase == Phase::Phase1GpuDeployed && e.action.starts_with("install_gpu") && e.outcome == "ok");
    let p2 = first(&|e| e.phase == Phase::Phase2Transition && e.action.starts_with("load_cpu") && e.outcome == "started");
    let p3 = first(&|e| e.phase == Phase::Phase3Cleanup);
    let mut v = 0;
    if let Some(t2) = p2 {
        if p1.is_none_or(|t1| t1 >= t2) {
            v += 1;
        }
    }
    if let Some(t3) = p3 {
        if p2.is_none_or(|t2| t2 >= t3) {
            v += 1;
        }
    }
    v + report.windows(2).filter(|w| w[0].timestamp_ms >= w[1].timestamp_ms).count() as u64
}

pub(crate) struct Planned {
    pub req: InferRequest,
    pub user: u64,
    pub pin: u64,
}

pub(crate) fn plan_requests(seed: u64, n: usize, spec: &ModelSpec, other: &LatencyDist) -> Vec<Planned> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64_mix(seed ^ 0x7472_6166_6669_6300));
    (0..n)
        .map(|i| {
            let user = rng.random_range(0..spec.num_users);
            let pin = rng.random_range(0..spec.num_pins);
            let dense = (0..spec.dense_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect::<Vec<f32>>();
            let other_ms = other.sample(&mut rng).as_secs_f64() * 1000.0;
            Planned {
                req: InferRequest {
                    request_id: format!("req-{i:06}"),
                    ids: BTreeMap::from([(USER_TABLE.to_string(), vec![user]), (PIN_TABLE.to_string(), vec![pin])]),
                    dense,
                    head: spec.head,
                    sim_other_ms: other_ms.round() as u64,
                },
                user,
                pin,
            }
        })
        .collect()
}

pub(crate) fn paused_runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .start_paused(true)
        .build()?)
}

/// The scores as they look after crossing the wire.
fn wire_scores(s: Scores) -> (Option<f32>, Option<[f32; 2]>) {
    let through = |x: f32| serde_json::to_value(x).ok().and_then(|v| v.as_f64()).map(|v| v as f32);
    match s {
        Scores::Ctr(p) => (through(p), None),
        Scores::Cvr { ccvr, vtcvr } => (None, through(ccvr).zip(through(vtcvr)).map(|(a, b)| [a, b])),
    }
}

struct Services {
    cpu: Mutex<Arc<CpuLeaf>>,
    cpu_switch: Arc<SwitchTransport>,
    gpu: Arc<GpuLeaf>,
}

impl Services {
    fn cpu_leaf() -> CpuLeaf {
        CpuLeaf::new(CpuLeafConfig {
            memory_budget_bytes: None,
            load_inline: true,
        })
    }

    /// One safety sample. Returns true when the embedding leaf's version is
    /// not installed on the scorer.
    fn violated(&self) -> bool {
        let cpu = self.cpu.lock().clone();
        loop {
            let before = cpu.switch_count();
            let version = cpu.version();
            let installed = self.gpu.versions();
            if cpu.switch_count() == before {
                return version.is_some_and(|v| !installed.contains(&v));
            }
        }
    }
}

fn outcome_of(r: &std::result::Result<(), DeployError>) -> String {
    match r {
        Ok(()) => "ok".to_string(),
        Err(e) => e.code().to_string(),
    }
}

struct Driver<'a> {
    scenario: &'a Scenario,
    services: &'a Services,
    state_path: &'a Path,
    clock: Clock,
}

impl Driver<'_> {
    fn open(&self) -> Result<Deployer> {
        let gpu: Arc<dyn Transport> = Arc::new(LocalTransport::new(self.services.gpu.clone()));
        Deployer::open(self.services.cpu_switch.clone(), gpu, self.state_path, self.scenario.deployer)
            .map(|d| d.with_clock(self.clock.clone()))
            .map_err(|e| Error::Data(e.to_string()))
    }

    async fn attempt(&self, kind: AttemptKind, artifacts: &VersionArtifacts) -> Result<(String, Vec<ReportEntry>)> {
        let mut d = self.open()?;
        let dir = artifacts.dir.as_path();
        let outcome = match kind {
            AttemptKind::Deploy => d.deploy(dir).await,
            AttemptKind::RollbackPhase1 => match d.begin(dir).await {
                Ok(()) => d.rollback().await,
                e => e,
            },
            AttemptKind::RollbackPhase2 => match d.begin(dir).await {
                Ok(()) => match d.transition().await {
                    Ok(()) => {
                        tokio::time::sleep(Duration::from_millis(self.scenario.deployments.rollback_hold_ms)).await;
                        d.rollback().await
                    }
                    e => e,
                },
                e => e,
            },
            AttemptKind::CrashDeploy => return self.crash_attempt(d, dir).await,
        };
        Ok((outcome_of(&outcome), d.take_report()))
    }

    /// Takes the embedding leaf down in Phase 2, restarts it on the stable
    /// model and lets a fresh deployer resume.
    async fn crash_attempt(&self, mut d: Deployer, dir: &Path) -> Result<(String, Vec<ReportEntry>)> {
        if let Err(e) = d.begin(dir).await {
            return Ok((e.code().to_string(), d.take_report()));
        }
        self.services.cpu_switch.set(None);
        let interrupted = d.transition().await;
        let mut report = d.take_report();
        drop(d);
        tokio::time::sleep(Duration::from_millis(self.scenario.deployments.crash_down_ms)).await;

        let state = DeploymentState::read(self.state_path)?;
        let stable_dir = state
            .stable_dir
            .ok_or_else(|| Error::Data("no stable model to restart on".into()))?;
        let leaf = Arc::new(Services::cpu_leaf());
        leaf.load_model(stable_dir).await?;
        *self.services.cpu.lock() = leaf.clone();
        self.services.cpu_switch.set(Some(Arc::new(LocalTransport::new(leaf))));

        let mut d = self.open()?;
        let resumed = d.resume().await;
        report.extend(d.take_report());
        let outcome = match (&interrupted, &resumed) {
            (Err(DeployError::Unreachable { .. }), r) => outcome_of(r),
            (first, _) => format!("crash not observed: {}", outcome_of(first)),
        };
        Ok((outcome, report))
    }
}

async fn run(s: &Scenario, root: &Path) -> Result<ScenarioResult> {
    let attempts = s.deployments.plan();
    let versions: Vec<VersionArtifacts> = (0..=attempts.len())
        .map(|k| write_version(root, &s.model, s.seed, k))
        .collect::<Result<_>>()?;
    let by_version: BTreeMap<&str, &VersionArtifacts> = versions.iter().map(|v| (v.version_id.as_str(), v)).collect();

    let cpu = Arc::new(Services::cpu_leaf());
    cpu.load_model(&versions[0].dir).await?;
    let gpu = Arc::new(GpuLeaf::new(GpuLeafConfig {
        max_versions: s.max_versions,
        ..Default::default()
    })?);
    gpu.install_model(versions[0].upper.clone())?;
    let services = Arc::new(Services {
        cpu: Mutex::new(cpu.clone()),
        cpu_switch: Arc::new(SwitchTransport::new(Arc::new(LocalTransport::new(cpu)))),
        gpu: gpu.clone(),
    });
    let state_path = root.join("deploy_state.json");
    DeploymentState::steady(&versions[0].version_id, &versions[0].dir).write(&state_path)?;

    let fetch_link = SimLink::new(services.cpu_switch.clone(), s.links.fetch, s.seed, "ads->cpu")?;
    let score_link = SimLink::new(Arc::new(LocalTransport::new(gpu.clone())), s.links.score, s.seed, "ads->gpu")?;
    let ads = Arc::new(AdsServer::new(Arc::new(fetch_link), Arc::new(score_link), s.ads));

    let t0 = Instant::now();
    let clock: Clock = Arc::new(move || t0.elapsed().as_secs_f64() * 1000.0);
    let planned = Arc::new(plan_requests(s.seed, s.requests, &s.model, &s.other));
    let issued = Arc::new(AtomicUsize::new(0));
    let outcomes: Arc<Mutex<Vec<Option<std::result::Result<InferResponse, InferError>>>>> =
        Arc::new(Mutex::new(vec![None; s.requests]));

    let samples = Arc::new(AtomicU64::new(0));
    let violations = Arc::new(AtomicU64::new(0));
    let (stop_tx, mut stop_rx) = tokio::sync::watch::channel(false);
    let sampler = tokio::spawn({
        let (services, samples, violations) = (services.clone(), samples.clone(), violations.clone());
        let period = Duration::from_millis(s.safety_sample_ms);
        async move {
            loop {
                samples.fetch_add(1, Ordering::SeqCst);
                if services.violated() {
                    violations.fetch_add(1, Ordering::SeqCst);
                }
                // a stop landing on a sample tick must not race it
                tokio::select! {
                    biased;
                    _ = stop_rx.changed() => return,
                    _ = tokio::time::sleep(period) => {}
                }
            }
        }
    });

    let traffic = tokio::spawn({
        let (ads, planned, issued, outcomes) = (ads.clone(), planned.clone(), issued.clone(), outcomes.clone());
        let rate = s.rate_rps;
        async move {
            let mut tasks = JoinSet::new();
            for i in 0..planned.len() {
                tokio::time::sleep_until(t0 + Duration::from_secs_f64(i as f64 / rate)).await;
                let (ads, planned, outcomes) = (ads.clone(), planned.clone(), outcomes.clone());
                tasks.spawn(async move {
                    let r = ads.handle_infer(&planned[i].req).await;
                    outcomes.lock()[i] = Some(r);
                });
                issued.store(i + 1, Ordering::SeqCst);
            }
            while tasks.join_next().await.is_some() {}
        }
    });

    let driver = Driver {
        scenario: s,
        services: &services,
        state_path: &state_path,
        clock,
    };
    let mut records = Vec::new();
    for (a, &kind) in attempts.iter().enumerate() {
        let trigger = (a + 1) * s.requests / (attempts.len() + 1);
        while issued.load(Ordering::SeqCst) < trigger {
            tokio::time::sleep(Duration::from_millis(1)).await;
        }
        let artifacts = &versions[a + 1];
        let (outcome, report) = driver.attempt(kind, artifacts).await?;
        records.push(DeploymentRecord {
            attempt: a,
            version_id: artifacts.version_id.clone(),
            kind,
            outcome,
            report,
        });
    }
    traffic.await.map_err(|e| Error::Data(format!("traffic task failed: {e}")))?;
    let _ = stop_tx.send(true);
    let _ = sampler.await;

    let outcomes = std::mem::take(&mut *outcomes.lock());
    let mut completed = 0;
    let mut errors = BTreeMap::new();
    let mut in_flight = 0;
    let mut fingerprint_mismatches = 0;
    let mut score_mismatches = 0;
    let mut latencies = Vec::new();
    let mut responses_by_version = BTreeMap::new();
    for (i, o) in outcomes.iter().enumerate() {
        match o {
            None => in_flight += 1,
            Some(Err(e)) => *errors.entry(e.error.code.clone()).or_insert(0) += 1,
            Some(Ok(r)) => {
                completed += 1;
                latencies.push(r.timing.total_ms);
                *responses_by_version.entry(r.version_id.clone()).or_insert(0) += 1;
                match by_version.get(r.version_id.as_str()) {
                    Some(v) => {
                        if r.fingerprint != v.fingerprint {
                            fingerprint_mismatches += 1;
                        }
                        let p = &planned[i];
                        let expected = v.score(p.user, p.pin, &p.req.dense)?;
                        if wire_scores(expected) != (r.score, r.scores) {
                            score_mismatches += 1;
                        }
                    }
                    None => {
                        fingerprint_mismatches += 1;
                        score_mismatches += 1;
                    }
                }
            }
        }
    }
    let m = ads.metrics();
    let issued = s.requests as u64;
    let error_total: u64 = errors.values().sum();
    let accounting_consistent = issued == completed + error_total + in_flight
        && m.requests == issued
        && m.completed == completed
        && m.error_total() == error_total
        && m.in_flight == in_flight;

    let state = DeploymentState::read(&state_path)?;
    let final_state = FinalState {
        phase: state.phase,
        stable_version: state.stable_version.clone(),
        cpu_version: services.cpu.lock().version(),
        gpu_versions: gpu.versions(),
    };
    let converged = final_state.phase == Phase::Steady
        && final_state.cpu_version == final_state.stable_version
        && final_state.stable_version.as_ref().is_some_and(|v| final_state.gpu_versions == [v.clone()]);

    Ok(ScenarioResult {
        seed: s.seed,
        requests: issued,
        completed,
        errors,
        in_flight_at_shutdown: in_flight,
        version_mismatch_count: gpu.mismatch_count(),
        fingerprint_mismatches,
        score_mismatches,
        safety_samples: samples.load(Ordering::SeqCst),
        safety_violations: violations.load(Ordering::SeqCst),
        ordering_violations: records.iter().map(|r| ordering_violations(&r.report)).sum(),
        accounting_consistent,
        p50_ms: quantile(&latencies, 0.5),
        p99_ms: quantile(&latencies, 0.99),
        responses_by_version,
        deployments: records,
        final_state,
        converged,
    })
}

/// Runs a scenario in-process on a virtual clock.
pub fn run_scenario(scenario: &Scenario) -> Result<ScenarioResult> {
    scenario.validate()?;
    let root = tempfile::tempdir()?;
    let rt = paused_runtime()?;
    rt.block_on(run(scenario, root.path()))
}
