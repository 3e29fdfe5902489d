//! The scorer service. Several upper-model versions stay installed side by
//! side and each score request is answered only by the version it names.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::transport::Handler;
use super::wire::{error_body, request_id_of, ServiceError};
use crate::error::{Error, Result};
use crate::scorer::{HeadKind, Scores, UpperModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GpuLeafConfig {
    pub max_versions: usize,
    /// How many recent (request_id, version) answers are remembered so a
    /// repeated score request is answered without scoring twice.
    pub dedupe_capacity: usize,
}

impl Default for GpuLeafConfig {
    fn default() -> Self {
        Self {
            max_versions: 2,
            dedupe_capacity: 4096,
        }
    }
}

struct Slot {
    model: UpperModel,
    fingerprint: String,
    scored: AtomicU64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionStatus {
    pub version_id: String,
    pub fingerprint: String,
    /// Score requests answered by this version so far.
    pub scored: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub request_id: String,
    pub version_id: String,
    pub embeddings: BTreeMap<String, Vec<Vec<f32>>>,
    #[serde(default)]
    pub dense: Vec<f32>,
    pub head: HeadKind,
}

#[derive(Default)]
struct Dedupe {
    answers: HashMap<(String, String), Value>,
    order: VecDeque<(String, String)>,
}

pub struct GpuLeaf {
    slots: RwLock<BTreeMap<String, Arc<Slot>>>,
    config: GpuLeafConfig,
    dedupe: Mutex<Dedupe>,
    mismatches: AtomicU64,
}

impl GpuLeaf {
    pub fn new(config: GpuLeafConfig) -> Result<Self> {
        if config.max_versions == 0 {
            return Err(Error::invalid("max_versions must be at least 1"));
        }
        Ok(Self {
            slots: RwLock::new(BTreeMap::new()),
            config,
            dedupe: Mutex::new(Dedupe::default()),
            mismatches: AtomicU64::new(0),
        })
    }

    /// Installs every `*.json` model file in `dir`, in name order.
    pub fn install_dir(&self, dir: &Path) -> Result<Vec<String>> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        paths.iter().map(|p| self.install_model(UpperModel::load(p)?)).collect()
    }

    /// Adds a version. Installing an identical model again is a no-op; a
    /// different model under an installed version id is refused.
    pub fn install_model(&self, model: UpperModel) -> Result<String> {
        model.validate()?;
        let fingerprint = model.fingerprint();
        let mut slots = self.slots.write();
        if let Some(existing) = slots.get(&model.version_id) {
            if existing.fingerprint == fingerprint {
                return Ok(model.version_id);
            }
            return Err(Error::Integrity(format!(
                "version {} is installed with different weights",
                model.version_id
            )));
        }
        if slots.len() >= self.config.max_versions {
            return Err(Error::invalid(format!(
                "{} versions installed, the limit is {}",
                slots.len(),
                self.config.max_versions
            )));
        }
        let version = model.version_id.clone();
        slots.insert(
            version.clone(),
            Arc::new(Slot {
                model,
                fingerprint,
                scored: AtomicU64::new(0),
            }),
        );
        Ok(version)
    }

    /// Removes a version, then waits until no scoring call still holds it.
    pub async fn retire_model(&self, version_id: &str) -> std::result::Result<(), ServiceError> {
        let slot = {
            let mut slots = self.slots.write();
            if !slots.contains_key(version_id) {
                return Err(ServiceError::new(
                    "invalid_argument",
                    format!("version {version_id} is not installed"),
                ));
            }
            if slots.len() == 1 {
                return Err(ServiceError::new(
                    "last_version",
                    format!("{version_id} is the only installed version"),
                ));
            }
            slots.remove(version_id).expect("checked above")
        };
        while Arc::strong_count(&slot) > 1 {
            tokio::time::sleep(Duration::from_millis(1)).await;
        }
        Ok(())
    }

    pub fn status(&self) -> Vec<VersionStatus> {
        self.slots
            .read()
            .iter()
            .map(|(v, s)| VersionStatus {
                version_id: v.clone(),
                fingerprint: s.fingerprint.clone(),
                scored: s.scored.load(Ordering::SeqCst),
            })
            .collect()
    }

    pub fn versions(&self) -> Vec<String> {
        self.slots.read().keys().cloned().collect()
    }

    pub fn fingerprint_of(&self, version_id: &str) -> Option<String> {
        self.slots.read().get(version_id).map(|s| s.fingerprint.clone())
    }

    /// Requests that named a version not installed here.
    pub fn mismatch_count(&self) -> u64 {
        self.mismatches.load(Ordering::SeqCst)
    }

    /// Scores with exactly the model named by the request, or fails.
    pub fn score(&self, req: &ScoreRequest) -> std::result::Result<(Scores, String), ServiceError> {
        let slot = self.slots.read().get(&req.version_id).cloned();
        let Some(slot) = slot else {
            self.mismatches.fetch_add(1, Ordering::SeqCst);
            return Err(ServiceError::new(
                "version_mismatch",
                format!("version {} is not installed", req.version_id),
            ));
        };
        if slot.model.head_kind != req.head {
            return Err(ServiceError::new(
                "bad_payload",
                format!("model {} is {:?}, request asked for {:?}", req.version_id, slot.model.head_kind, req.head),
            ));
        }
        let scores = slot
            .model
            .score(&req.embeddings, &req.dense)
            .map_err(|m| ServiceError::new("bad_payload", m))?;
        slot.scored.fetch_add(1, Ordering::SeqCst);
        Ok((scores, slot.fingerprint.clone()))
    }

    fn score_response(&self, req: &ScoreRequest) -> Value {
        let key = (req.request_id.clone(), req.version_id.clone());
        if let Some(v) = self.dedupe.lock().answers.get(&key) {
            return v.clone();
        }
        let body = match self.score(req) {
            Ok((scores, fingerprint)) => {
                let mut body = json!({
                    "request_id": req.request_id,
                    "version_id": req.version_id,
                    "fingerprint": fingerprint,
                });
                match scores {
                    Scores::Ctr(p) => body["score"] = json!(p),
                    Scores::Cvr { ccvr, vtcvr } => body["scores"] = json!([ccvr, vtcvr]),
                }
                body
            }
            Err(e) => return error_body(Some(&req.request_id), &e),
        };
        if self.config.dedupe_capacity > 0 {
            let mut d = self.dedupe.lock();
            if d.answers.insert(key.clone(), body.clone()).is_none() {
                d.order.push_back(key);
            }
            while d.order.len() > self.config.dedupe_capacity {
                let old = d.order.pop_front().expect("non-empty");
                d.answers.remove(&old);
            }
        }
        body
    }
}

#[derive(Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum GpuRequest {
    Score(ScoreRequest),
    InstallModel { path: PathBuf },
    RetireModel { version_id: String },
    Status {},
}

#[async_trait]
impl Handler for GpuLeaf {
    async fn handle(&self, request: Value) -> Value {
        let rid = request_id_of(&request).map(str::to_string);
        let parsed: GpuRequest = match serde_json::from_value(request) {
            Ok(r) => r,
            Err(e) => {
                let code = if rid.is_some() { "bad_payload" } else { "bad_request" };
                return error_body(rid.as_deref(), &ServiceError::new(code, e.to_string()));
            }
        };
        match parsed {
            GpuRequest::Score(req) => self.score_response(&req),
            GpuRequest::InstallModel { path } => {
                let installed = UpperModel::load(&path).and_then(|m| self.install_model(m));
                match installed {
                    Ok(v) => json!({ "version_id": v, "fingerprint": self.fingerprint_of(&v) }),
                    Err(e) => error_body(None, &ServiceError::new("install_failed", e.to_string())),
                }
            }
            GpuRequest::RetireModel { version_id } => match self.retire_model(&version_id).await {
                Ok(()) => json!({ "retired": version_id }),
                Err(e) => error_body(None, &e),
            },
            GpuRequest::Status {} => json!({ "versions": self.status() }),
        }
    }
}
