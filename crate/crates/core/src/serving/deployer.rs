//! Three-phase rollout of a paired embedding model and upper model.
//!
//! Phase 1 installs the candidate upper model next to the stable one.
//! Phase 2 switches the embedding leaf to the candidate, after which new
//! responses carry the candidate version and the scorer routes by it.
//! Phase 3 waits for traffic on the old version to stop, then retires it.
//! The state is persisted before every externally visible step, so an
//! interrupted episode can be resumed or rolled back by a later process.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::time::Instant;

use super::cpu_leaf::Manifest;
use super::gpu_leaf::VersionStatus;
use super::transport::{Transport, TransportError};
use super::wire::{into_result, ServiceError};
use crate::error::Error;
use crate::scorer::UpperModel;

pub const UPPER_MODEL_FILE: &str = "upper.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Steady,
    #[serde(rename = "PHASE1_GPU_DEPLOYED")]
    Phase1GpuDeployed,
    #[serde(rename = "PHASE2_TRANSITION")]
    Phase2Transition,
    #[serde(rename = "PHASE3_CLEANUP")]
    Phase3Cleanup,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoints {
    pub cpu_leaf: String,
    pub gpu_leaf: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploymentState {
    pub phase: Phase,
    pub stable_version: Option<String>,
    pub candidate_version: Option<String>,
    /// Artifact directory of the stable version, needed to reload it on
    /// rollback.
    #[serde(default)]
    pub stable_dir: Option<PathBuf>,
    #[serde(default)]
    pub candidate_dir: Option<PathBuf>,
    /// Service addresses, so a later `rollback` can reach them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoints: Option<Endpoints>,
}

impl DeploymentState {
    pub fn empty() -> Self {
        Self {
            phase: Phase::Steady,
            stable_version: None,
            candidate_version: None,
            stable_dir: None,
            candidate_dir: None,
            endpoints: None,
        }
    }

    pub fn steady(version: &str, dir: impl Into<PathBuf>) -> Self {
        Self {
            stable_version: Some(version.to_string()),
            stable_dir: Some(dir.into()),
            ..Self::empty()
        }
    }

    pub fn read(path: &Path) -> crate::error::Result<Self> {
        let read = || -> crate::error::Result<Self> { Ok(serde_json::from_slice(&fs::read(path)?)?) };
        read().map_err(|e| Error::load(path, e))
    }

    /// Writes through a temporary file and a rename.
    pub fn write(&self, path: &Path) -> crate::error::Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub phase: Phase,
    pub timestamp_ms: f64,
    pub action: String,
    pub outcome: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeployerConfig {
    /// Old-version traffic must be absent for this long before retiring.
    pub drain_window_ms: u64,
    pub drain_poll_ms: u64,
    /// Phase 3 gives up (and stays in cleanup) after this long.
    pub drain_timeout_ms: u64,
    pub call_timeout_ms: u64,
}

impl Default for DeployerConfig {
    fn default() -> Self {
        Self {
            drain_window_ms: 5000,
            drain_poll_ms: 50,
            drain_timeout_ms: 60_000,
            call_timeout_ms: 30_000,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DeployError {
    /// The request was refused or undone; the persisted state is steady.
    #[error("{code}: {message}")]
    Refused { code: String, message: String },
    /// A service could not be reached. The state is left in its current
    /// phase for a later resume or rollback.
    #[error("service unreachable during {phase:?}: {message}")]
    Unreachable { phase: Phase, message: String },
    #[error("version {version} still receives traffic after {waited_ms} ms")]
    DrainTimeout { version: String, waited_ms: u64 },
    #[error(transparent)]
    State(#[from] Error),
}

impl DeployError {
    pub fn code(&self) -> &str {
        match self {
            DeployError::Refused { code, .. } => code,
            DeployError::Unreachable { .. } => "unreachable",
            DeployError::DrainTimeout { .. } => "drain_timeout",
            DeployError::State(_) => "state",
        }
    }

    fn refused(code: &str, message: impl Into<String>) -> Self {
        DeployError::Refused {
            code: code.to_string(),
            message: message.into(),
        }
    }
}

type DeployResult<T> = Result<T, DeployError>;

/// `<state>.lock` holding the owner's pid. A lock left by a dead process is
/// taken over.
struct LockFile {
    path: PathBuf,
}

fn pid_alive(pid: u32) -> bool {
    Path::new(&format!("/proc/{pid}")).exists() || !Path::new("/proc/self").exists()
}

impl LockFile {
    fn acquire(state_path: &Path) -> DeployResult<Self> {
        let mut name = state_path.as_os_str().to_owned();
        name.push(".lock");
        let path = PathBuf::from(name);
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    write!(f, "{}", std::process::id()).map_err(Error::from)?;
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let owner = fs::read_to_string(&path).ok().and_then(|s| s.trim().parse::<u32>().ok());
                    match owner {
                        Some(pid) if pid_alive(pid) => {
                            return Err(DeployError::refused(
                                "locked",
                                format!("{} is held by process {pid}", path.display()),
                            ))
                        }
                        _ => {
                            let _ = fs::remove_file(&path);
                        }
                    }
                }
                Err(e) => return Err(Error::from(e).into()),
            }
        }
        Err(DeployError::refused("locked", format!("could not take {}", path.display())))
    }
}

impl Drop for LockFile {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

enum Outcome {
    Ok(Value),
    Service(ServiceError),
    Down(String),
}

/// Milliseconds for report timestamps.
pub type Clock = Arc<dyn Fn() -> f64 + Send + Sync>;

fn system_clock() -> Clock {
    Arc::new(|| SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_secs_f64() * 1000.0)
}

/// One deployer episode over an exclusively locked state file.
pub struct Deployer {
    cpu: Arc<dyn Transport>,
    gpu: Arc<dyn Transport>,
    state_path: PathBuf,
    state: DeploymentState,
    config: DeployerConfig,
    report: Vec<ReportEntry>,
    clock: Clock,
    last_ts: f64,
    _lock: LockFile,
}

impl Deployer {
    /// Locks `state_path` and reads it; a missing file means an empty steady
    /// state.
    pub fn open(
        cpu: Arc<dyn Transport>,
        gpu: Arc<dyn Transport>,
        state_path: impl Into<PathBuf>,
        config: DeployerConfig,
    ) -> DeployResult<Self> {
        let state_path = state_path.into();
        let lock = LockFile::acquire(&state_path)?;
        let state = if state_path.exists() {
            DeploymentState::read(&state_path)?
        } else {
            DeploymentState::empty()
        };
        Ok(Self {
            cpu,
            gpu,
            state_path,
            state,
            config,
            report: Vec::new(),
            clock: system_clock(),
            last_ts: f64::NEG_INFINITY,
            _lock: lock,
        })
    }

    /// Replaces the wall clock used for report timestamps.
    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn state(&self) -> &DeploymentState {
        &self.state
    }

    pub fn report(&self) -> &[ReportEntry] {
        &self.report
    }

    pub fn take_report(&mut self) -> Vec<ReportEntry> {
        std::mem::take(&mut self.report)
    }

    /// Records the service addresses in the persisted state.
    pub fn set_endpoints(&mut self, endpoints: Endpoints) -> DeployResult<()> {
        self.state.endpoints = Some(endpoints);
        self.persist()
    }

    fn persist(&self) -> DeployResult<()> {
        Ok(self.state.write(&self.state_path)?)
    }

    fn set_phase(&mut self, phase: Phase) -> DeployResult<()> {
        self.state.phase = phase;
        self.persist()
    }

    fn record(&mut self, action: &str, outcome: impl Into<String>) {
        let now = (self.clock)();
        let ts = if now > self.last_ts { now } else { self.last_ts + 0.001 };
        self.last_ts = ts;
        self.report.push(ReportEntry {
            phase: self.state.phase,
            timestamp_ms: ts,
            action: action.to_string(),
            outcome: outcome.into(),
        });
    }

    async fn call(&self, to: &dyn Transport, request: Value) -> Outcome {
        let t = Duration::from_millis(self.config.call_timeout_ms);
        match tokio::time::timeout(t, to.call(request)).await {
            Err(_) => Outcome::Down(TransportError::Timeout.to_string()),
            Ok(Err(e)) => Outcome::Down(e.to_string()),
            Ok(Ok(v)) => match into_result(v) {
                Ok(v) => Outcome::Ok(v),
                Err(e) => Outcome::Service(e),
            },
        }
    }

    async fn gpu_status(&self) -> Result<Vec<VersionStatus>, String> {
        match self.call(&*self.gpu, json!({"op": "status"})).await {
            Outcome::Ok(v) => serde_json::from_value(v["versions"].clone()).map_err(|e| e.to_string()),
            Outcome::Service(e) => Err(e.to_string()),
            Outcome::Down(m) => Err(m),
        }
    }

    fn unreachable(&self, message: impl Into<String>) -> DeployError {
        DeployError::Unreachable {
            phase: self.state.phase,
            message: message.into(),
        }
    }

    /// Retires a version from the scorer; a version already gone counts as
    /// retired.
    async fn retire(&mut self, version: &str) -> DeployResult<()> {
        let out = self
            .call(&*self.gpu, json!({"op": "retire_model", "version_id": version}))
            .await;
        match out {
            Outcome::Ok(_) => {
                self.record(&format!("retire_gpu {version}"), "ok");
                Ok(())
            }
            Outcome::Service(e) if e.code == "invalid_argument" => {
                self.record(&format!("retire_gpu {version}"), "already retired");
                Ok(())
            }
            Outcome::Service(e) => {
                self.record(&format!("retire_gpu {version}"), e.to_string());
                Err(DeployError::refused(&e.code, e.message))
            }
            Outcome::Down(m) => {
                self.record(&format!("retire_gpu {version}"), format!("unreachable: {m}"));
                Err(self.unreachable(m))
            }
        }
    }

    /// Loads `dir` on the embedding leaf and checks the version it reports.
    async fn load_cpu(&mut self, dir: &Path, expect: &str) -> DeployResult<Result<(), ServiceError>> {
        let out = self
            .call(&*self.cpu, json!({"op": "load_model", "path": dir}))
            .await;
        match out {
            Outcome::Ok(v) if v["version_id"] == expect => {
                self.record(&format!("load_cpu {expect}"), "ok");
                Ok(Ok(()))
            }
            Outcome::Ok(v) => {
                let e = ServiceError::new("integrity", format!("loaded {} instead of {expect}", v["version_id"]));
                self.record(&format!("load_cpu {expect}"), e.to_string());
                Ok(Err(e))
            }
            Outcome::Service(e) => {
                self.record(&format!("load_cpu {expect}"), e.to_string());
                Ok(Err(e))
            }
            Outcome::Down(m) => {
                self.record(&format!("load_cpu {expect}"), format!("unreachable: {m}"));
                Err(self.unreachable(m))
            }
        }
    }

    /// Waits until the scorer's request count for `version` stays unchanged
    /// for a full drain window.
    async fn drain(&mut self, version: &str) -> DeployResult<()> {
        let window = Duration::from_millis(self.config.drain_window_ms);
        let poll = Duration::from_millis(self.config.drain_poll_ms.max(1));
        let start = Instant::now();
        let mut last: Option<u64> = None;
        let mut quiet_since = start;
        loop {
            let status = self.gpu_status().await.map_err(|m| self.unreachable(m))?;
            let Some(count) = status.iter().find(|s| s.version_id == version).map(|s| s.scored) else {
                self.record(&format!("drain {version}"), "not installed");
                return Ok(());
            };
            let now = Instant::now();
            if last != Some(count) {
                last = Some(count);
                quiet_since = now;
            }
            if now.duration_since(quiet_since) >= window {
                self.record(&format!("drain {version}"), "quiet");
                return Ok(());
            }
            if now.duration_since(start) >= Duration::from_millis(self.config.drain_timeout_ms) {
                let waited_ms = now.duration_since(start).as_millis() as u64;
                self.record(&format!("drain {version}"), "timeout");
                return Err(DeployError::DrainTimeout {
                    version: version.to_string(),
                    waited_ms,
                });
            }
            tokio::time::sleep(poll).await;
        }
    }

    /// Checks the candidate pair and installs its upper model (Phase 1).
    pub async fn begin(&mut self, candidate_dir: &Path) -> DeployResult<()> {
        if self.state.phase != Phase::Steady {
            return Err(DeployError::refused(
                "not_steady",
                format!("a deployment is in progress ({:?}); resume or roll back", self.state.phase),
            ));
        }
        let manifest = Manifest::read(candidate_dir).map_err(|e| DeployError::refused("bad_candidate", e.to_string()))?;
        let upper_path = candidate_dir.join(UPPER_MODEL_FILE);
        let upper = UpperModel::load(&upper_path).map_err(|e| DeployError::refused("bad_candidate", e.to_string()))?;
        if manifest.version_id != upper.version_id {
            return Err(DeployError::refused(
                "paired_version_mismatch",
                format!("embedding model is {}, upper model is {}", manifest.version_id, upper.version_id),
            ));
        }
        let version = upper.version_id.clone();
        if self.state.stable_version.as_deref() == Some(version.as_str()) {
            return Err(DeployError::refused("same_version", format!("{version} is already stable")));
        }
        let out = self.call(&*self.gpu, json!({"op": "install_model", "path": upper_path})).await;
        let failure = match out {
            Outcome::Ok(_) => match self.gpu_status().await {
                Ok(status) if status.iter().any(|s| s.version_id == version && s.fingerprint == upper.fingerprint()) => None,
                Ok(_) => Some(("gpu_verify_failed", format!("{version} not listed with the expected fingerprint"))),
                Err(m) => Some(("gpu_verify_failed", m)),
            },
            Outcome::Service(e) => Some(("gpu_install_failed", e.to_string())),
            Outcome::Down(m) => Some(("gpu_install_failed", m)),
        };
        if let Some((code, message)) = failure {
            self.record(&format!("install_gpu {version}"), format!("{code}: {message}"));
            if code == "gpu_verify_failed" {
                let _ = self.retire(&version).await;
            }
            return Err(DeployError::refused(code, message));
        }
        self.state.candidate_version = Some(version.clone());
        self.state.candidate_dir = Some(candidate_dir.to_path_buf());
        self.set_phase(Phase::Phase1GpuDeployed)?;
        self.record(&format!("install_gpu {version}"), "ok");
        Ok(())
    }

    fn candidate(&self) -> DeployResult<(String, PathBuf)> {
        match (&self.state.candidate_version, &self.state.candidate_dir) {
            (Some(v), Some(d)) => Ok((v.clone(), d.clone())),
            _ => Err(DeployError::refused("corrupt_state", "candidate missing from deployment state")),
        }
    }

    /// Switches the embedding leaf to the candidate (Phase 2). A load the
    /// leaf rejects rolls the candidate back; an unreachable leaf leaves the
    /// state in Phase 2 for a later resume.
    pub async fn transition(&mut self) -> DeployResult<()> {
        let (version, dir) = self.candidate()?;
        self.set_phase(Phase::Phase2Transition)?;
        self.record(&format!("load_cpu {version}"), "started");
        match self.load_cpu(&dir, &version).await? {
            Ok(()) => Ok(()),
            Err(e) => {
                self.retire(&version).await?;
                self.finish_steady_on_stable()?;
                Err(DeployError::refused("cpu_load_failed", e.to_string()))
            }
        }
    }

    /// Confirms the switch, drains the old version and retires it (Phase 3).
    pub async fn cleanup(&mut self) -> DeployResult<()> {
        let (version, dir) = self.candidate()?;
        self.set_phase(Phase::Phase3Cleanup)?;
        let serving = match self.call(&*self.cpu, json!({"op": "status"})).await {
            Outcome::Ok(v) => v["version_id"].as_str().map(str::to_string),
            Outcome::Service(e) => return Err(self.unreachable(e.to_string())),
            Outcome::Down(m) => return Err(self.unreachable(m)),
        };
        if serving.as_deref() != Some(version.as_str()) {
            self.record("verify_cpu", format!("serving {serving:?}, reloading"));
            if let Err(e) = self.load_cpu(&dir, &version).await? {
                return Err(DeployError::refused("cpu_load_failed", e.to_string()));
            }
        } else {
            self.record("verify_cpu", "ok");
        }
        if let Some(old) = self.state.stable_version.clone() {
            self.drain(&old).await?;
            self.retire(&old).await?;
        }
        self.state = DeploymentState {
            phase: Phase::Steady,
            stable_version: Some(version),
            candidate_version: None,
            stable_dir: Some(dir),
            candidate_dir: None,
            endpoints: self.state.endpoints.take(),
        };
        self.persist()?;
        self.record("mark_steady", "ok");
        Ok(())
    }

    fn finish_steady_on_stable(&mut self) -> DeployResult<()> {
        self.state.candidate_version = None;
        self.state.candidate_dir = None;
        self.set_phase(Phase::Steady)?;
        self.record("mark_steady", "ok");
        Ok(())
    }

    /// Runs all three phases.
    pub async fn deploy(&mut self, candidate_dir: &Path) -> DeployResult<()> {
        self.begin(candidate_dir).await?;
        self.transition().await?;
        self.cleanup().await
    }

    /// Continues an interrupted deployment from its persisted phase.
    pub async fn resume(&mut self) -> DeployResult<()> {
        match self.state.phase {
            Phase::Steady => {
                self.record("resume", "nothing to resume");
                Ok(())
            }
            Phase::Phase1GpuDeployed | Phase::Phase2Transition => {
                self.transition().await?;
                self.cleanup().await
            }
            Phase::Phase3Cleanup => self.cleanup().await,
        }
    }

    /// Undoes the steps of an unfinished deployment in reverse order.
    pub async fn rollback(&mut self) -> DeployResult<()> {
        match self.state.phase {
            Phase::Steady => {
                self.record("rollback", "no deployment in progress");
                Ok(())
            }
            Phase::Phase1GpuDeployed => {
                let (version, _) = self.candidate()?;
                self.retire(&version).await?;
                self.finish_steady_on_stable()
            }
            Phase::Phase2Transition => {
                let (version, _) = self.candidate()?;
                let (Some(stable), Some(dir)) = (self.state.stable_version.clone(), self.state.stable_dir.clone()) else {
                    return Err(DeployError::refused("no_stable", "no stable model to return to"));
                };
                if let Err(e) = self.load_cpu(&dir, &stable).await? {
                    return Err(DeployError::refused("cpu_load_failed", e.to_string()));
                }
                self.drain(&version).await?;
                self.retire(&version).await?;
                self.finish_steady_on_stable()
            }
            Phase::Phase3Cleanup => Err(DeployError::refused(
                "rollback_unavailable",
                "cleanup has started; resume to finish it",
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::{HeadKind, Layout, LogisticHead, TableSlot};
    use crate::serving::cpu_leaf::{CpuLeaf, CpuLeafConfig};
    use crate::serving::gpu_leaf::{GpuLeaf, GpuLeafConfig};
    use crate::serving::transport::{LocalTransport, SwitchTransport};
    use crate::tables::EmbeddingTable;
    use std::collections::BTreeMap;

    fn write_pair(root: &Path, version: &str, upper_version: &str) -> PathBuf {
        let dir = root.join(version);
        fs::create_dir_all(&dir).unwrap();
        EmbeddingTable::from_f32("user", version, 4, 2, vec![0.25; 8])
            .unwrap()
            .save(dir.join("user.pemb"))
            .unwrap();
        Manifest {
            version_id: version.into(),
            tables: BTreeMap::from([("user".to_string(), "user.pemb".to_string())]),
        }
        .write(&dir)
        .unwrap();
        UpperModel {
            version_id: upper_version.into(),
            head_kind: HeadKind::Ctr,
            layout: Layout {
                tables: vec![TableSlot {
                    name: "user".into(),
                    dim: 2,
                }],
                dense_dim: 0,
            },
            heads: vec![LogisticHead {
                weights: vec![1.0, 0.0],
                bias: 0.0,
            }],
        }
        .save(dir.join(UPPER_MODEL_FILE))
        .unwrap();
        dir
    }

    struct Rig {
        root: tempfile::TempDir,
        cpu: Arc<CpuLeaf>,
        gpu: Arc<GpuLeaf>,
        cpu_switch: Arc<SwitchTransport>,
        state: PathBuf,
    }

    async fn rig() -> Rig {
        let root = tempfile::tempdir().unwrap();
        let v1 = write_pair(root.path(), "v1", "v1");
        let cpu = Arc::new(CpuLeaf::new(CpuLeafConfig::default()));
        cpu.load_model(&v1).await.unwrap();
        let gpu = Arc::new(GpuLeaf::new(GpuLeafConfig::default()).unwrap());
        gpu.install_model(UpperModel::load(v1.join(UPPER_MODEL_FILE)).unwrap()).unwrap();
        let state = root.path().join("state.json");
        DeploymentState::steady("v1", &v1).write(&state).unwrap();
        let cpu_switch = Arc::new(SwitchTransport::new(Arc::new(LocalTransport::new(cpu.clone()))));
        Rig {
            root,
            cpu,
            gpu,
            cpu_switch,
            state,
        }
    }

    fn cfg() -> DeployerConfig {
        DeployerConfig {
            drain_window_ms: 100,
            drain_poll_ms: 10,
            drain_timeout_ms: 1000,
            call_timeout_ms: 1000,
        }
    }

    fn deployer(r: &Rig) -> Deployer {
        Deployer::open(
            r.cpu_switch.clone(),
            Arc::new(LocalTransport::new(r.gpu.clone())),
            &r.state,
            cfg(),
        )
        .unwrap()
    }

    #[tokio::test(start_paused = true)]
    async fn happy_path_orders_phases() {
        let r = rig().await;
        let v2 = write_pair(r.root.path(), "v2", "v2");
        let mut d = deployer(&r);
        d.deploy(&v2).await.unwrap();
        assert_eq!(d.state().phase, Phase::Steady);
        assert_eq!(d.state().stable_version.as_deref(), Some("v2"));
        assert_eq!(r.cpu.version().as_deref(), Some("v2"));
        assert_eq!(r.gpu.versions(), ["v2"]);
        let rep = d.report();
        let at = |phase: Phase, action: &str, outcome: &str| {
            rep.iter()
                .find(|e| e.phase == phase && e.action.starts_with(action) && e.outcome == outcome)
                .unwrap_or_else(|| panic!("no {action} in {rep:#?}"))
                .timestamp_ms
        };
        let p1 = at(Phase::Phase1GpuDeployed, "install_gpu", "ok");
        let p2 = at(Phase::Phase2Transition, "load_cpu", "started");
        let p3 = at(Phase::Phase3Cleanup, "verify_cpu", "ok");
        assert!(p1 < p2 && p2 < p3);
        assert!(rep.windows(2).all(|w| w[0].timestamp_ms < w[1].timestamp_ms));
        assert_eq!(DeploymentState::read(&r.state).unwrap(), *d.state());
    }

    #[tokio::test(start_paused = true)]
    async fn refusals_leave_services_untouched() {
        let r = rig().await;
        let bad = write_pair(r.root.path(), "v2", "v3");
        let mut d = deployer(&r);
        assert_eq!(d.deploy(&bad).await.unwrap_err().code(), "paired_version_mismatch");
        let missing = write_pair(r.root.path(), "v4", "v4");
        fs::remove_file(missing.join(UPPER_MODEL_FILE)).unwrap();
        assert_eq!(d.deploy(&missing).await.unwrap_err().code(), "bad_candidate");
        assert_eq!(d.deploy(&r.root.path().join("v1")).await.unwrap_err().code(), "same_version");
        assert_eq!(r.gpu.versions(), ["v1"]);
        assert_eq!(r.cpu.switch_count(), 1);
        assert_eq!(d.state().phase, Phase::Steady);
    }

    #[tokio::test(start_paused = true)]
    async fn integrity_failure_rolls_back() {
        let r = rig().await;
        let v2 = write_pair(r.root.path(), "v2", "v2");
        Manifest {
            version_id: "v2".into(),
            tables: BTreeMap::from([("user".to_string(), "../v1/user.pemb".to_string())]),
        }
        .write(&v2)
        .unwrap();
        let mut d = deployer(&r);
        assert_eq!(d.deploy(&v2).await.unwrap_err().code(), "cpu_load_failed");
        assert_eq!(d.state().phase, Phase::Steady);
        assert_eq!(r.gpu.versions(), ["v1"]);
        assert_eq!(r.cpu.version().as_deref(), Some("v1"));
    }

    #[tokio::test(start_paused = true)]
    async fn crash_in_phase2_then_resume() {
        let r = rig().await;
        let v2 = write_pair(r.root.path(), "v2", "v2");
        let mut d = deployer(&r);
        d.begin(&v2).await.unwrap();
        r.cpu_switch.set(None);
        assert_eq!(d.transition().await.unwrap_err().code(), "unreachable");
        drop(d);
        assert_eq!(DeploymentState::read(&r.state).unwrap().phase, Phase::Phase2Transition);

        let restarted = Arc::new(CpuLeaf::new(CpuLeafConfig::default()));
        restarted.load_model(r.root.path().join("v1")).await.unwrap();
        r.cpu_switch.set(Some(Arc::new(LocalTransport::new(restarted.clone()))));
        let mut d = deployer(&r);
        d.resume().await.unwrap();
        assert_eq!(d.state().phase, Phase::Steady);
        assert_eq!(restarted.version().as_deref(), Some("v2"));
        assert_eq!(r.gpu.versions(), ["v2"]);
    }

    #[tokio::test(start_paused = true)]
    async fn rollbacks() {
        let r = rig().await;
        let v2 = write_pair(r.root.path(), "v2", "v2");
        let mut d = deployer(&r);
        d.begin(&v2).await.unwrap();
        d.rollback().await.unwrap();
        assert_eq!(r.gpu.versions(), ["v1"]);
        assert_eq!(d.state().phase, Phase::Steady);
        d.rollback().await.unwrap();
        assert_eq!(d.report().last().unwrap().outcome, "no deployment in progress");

        d.begin(&v2).await.unwrap();
        d.transition().await.unwrap();
        assert_eq!(r.cpu.version().as_deref(), Some("v2"));
        d.rollback().await.unwrap();
        assert_eq!(r.cpu.version().as_deref(), Some("v1"));
        assert_eq!(r.gpu.versions(), ["v1"]);
        assert_eq!(d.state().stable_version.as_deref(), Some("v1"));
    }

    #[tokio::test(start_paused = true)]
    async fn drain_timeout_stays_in_cleanup() {
        let r = rig().await;
        let v2 = write_pair(r.root.path(), "v2", "v2");
        let gpu = r.gpu.clone();
        let traffic = tokio::spawn(async move {
            for i in 0.. {
                let req = crate::serving::gpu_leaf::ScoreRequest {
                    request_id: format!("r{i}"),
                    version_id: "v1".into(),
                    embeddings: BTreeMap::from([("user".to_string(), vec![vec![0.0, 0.0]])]),
                    dense: vec![],
                    head: HeadKind::Ctr,
                };
                let _ = gpu.score(&req);
                tokio::time::sleep(Duration::from_millis(20)).await;
            }
        });
        let mut d = deployer(&r);
        let e = d.deploy(&v2).await.unwrap_err();
        traffic.abort();
        assert_eq!(e.code(), "drain_timeout");
        assert_eq!(d.state().phase, Phase::Phase3Cleanup);
        assert_eq!(r.gpu.versions(), ["v1", "v2"]);
        assert_eq!(d.rollback().await.unwrap_err().code(), "rollback_unavailable");
        d.resume().await.unwrap();
        assert_eq!(r.gpu.versions(), ["v2"]);
    }

    #[test]
    fn lock_is_exclusive_and_stale_locks_are_taken() {
        let dir = tempfile::tempdir().unwrap();
        let state = dir.path().join("s.json");
        let a = LockFile::acquire(&state).unwrap();
        assert_eq!(LockFile::acquire(&state).err().unwrap().code(), "locked");
        drop(a);
        fs::write(dir.path().join("s.json.lock"), "4294967295").unwrap();
        LockFile::acquire(&state).unwrap();
    }

    #[test]
    fn state_json_shape() {
        let s = DeploymentState::steady("v1", "/m/v1");
        let v = serde_json::to_value(&s).unwrap();
        assert_eq!(v["phase"], "STEADY");
        assert_eq!(v["stable_version"], "v1");
        assert!(v["candidate_version"].is_null());
        assert_eq!(serde_json::to_value(Phase::Phase2Transition).unwrap(), "PHASE2_TRANSITION");
    }
}
