//! The orchestrator. Each inference request fetches embeddings and the
//! version that produced them, then asks the scorer for that exact version.
//! The fetch starts as soon as the request arrives and overlaps the
//! unrelated feature work.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::time::Instant;

use super::transport::{Handler, Transport, TransportError};
use super::wire::{error_body, into_result, request_id_of, ServiceError};
use crate::metrics::quantile_sorted;
use crate::scorer::HeadKind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdsServerConfig {
    pub fetch_timeout_ms: u64,
    pub score_timeout_ms: u64,
    /// Start the embedding fetch together with the other feature work.
    /// When false the fetch waits for that work to finish.
    pub early_fetch: bool,
    /// Number of most recent request latencies the quantiles cover.
    pub latency_window: usize,
}

impl Default for AdsServerConfig {
    fn default() -> Self {
        Self {
            fetch_timeout_ms: 1000,
            score_timeout_ms: 1000,
            early_fetch: true,
            latency_window: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferRequest {
    pub request_id: String,
    pub ids: BTreeMap<String, Vec<u64>>,
    #[serde(default)]
    pub dense: Vec<f32>,
    pub head: HeadKind,
    /// Duration of the simulated unrelated feature work.
    #[serde(default)]
    pub sim_other_ms: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub fetch_ms: f64,
    pub other_ms: f64,
    pub score_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferResponse {
    pub request_id: String,
    pub version_id: String,
    /// Fingerprint of the upper model that produced the score.
    pub fingerprint: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<[f32; 2]>,
    pub timing: Timing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Fetch,
    Score,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferError {
    pub error: ServiceError,
    /// The phase that timed out, for `timeout` errors.
    pub phase: Option<Stage>,
}

impl From<ServiceError> for InferError {
    fn from(error: ServiceError) -> Self {
        Self { error, phase: None }
    }
}

impl InferError {
    fn timeout(phase: Stage) -> Self {
        Self {
            error: ServiceError::new("timeout", format!("{phase:?} phase timed out twice").to_lowercase()),
            phase: Some(phase),
        }
    }

    pub fn to_body(&self, request_id: &str) -> Value {
        let mut body = error_body(Some(request_id), &self.error);
        if let Some(p) = self.phase {
            body["error"]["phase"] = json!(p);
        }
        body
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineMetrics {
    pub requests: u64,
    pub completed: u64,
    pub in_flight: u64,
    /// Completed requests per second of server uptime.
    pub throughput_rps: f64,
    pub p50_ms: Option<f64>,
    pub p99_ms: Option<f64>,
    /// Score attempts rejected because the scorer lacked the version.
    pub version_mismatch_count: u64,
    pub errors: BTreeMap<String, u64>,
}

impl PipelineMetrics {
    pub fn error_total(&self) -> u64 {
        self.errors.values().sum()
    }
}

struct MetricsState {
    started: Instant,
    requests: u64,
    completed: u64,
    in_flight: u64,
    mismatches: u64,
    errors: BTreeMap<String, u64>,
    latencies: VecDeque<f64>,
}

pub struct AdsServer {
    cpu: Arc<dyn Transport>,
    gpu: Arc<dyn Transport>,
    config: AdsServerConfig,
    state: Mutex<MetricsState>,
    active: Mutex<HashSet<String>>,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

struct Fetched {
    version_id: String,
    embeddings: Value,
}

struct Scored {
    body: Value,
}

impl AdsServer {
    pub fn new(cpu: Arc<dyn Transport>, gpu: Arc<dyn Transport>, config: AdsServerConfig) -> Self {
        Self {
            cpu,
            gpu,
            config,
            state: Mutex::new(MetricsState {
                started: Instant::now(),
                requests: 0,
                completed: 0,
                in_flight: 0,
                mismatches: 0,
                errors: BTreeMap::new(),
                latencies: VecDeque::new(),
            }),
            active: Mutex::new(HashSet::new()),
        }
    }

    pub fn metrics(&self) -> PipelineMetrics {
        let s = self.state.lock();
        let mut sorted: Vec<f64> = s.latencies.iter().copied().collect();
        sorted.sort_by(f64::total_cmp);
        let uptime = s.started.elapsed().as_secs_f64();
        PipelineMetrics {
            requests: s.requests,
            completed: s.completed,
            in_flight: s.in_flight,
            throughput_rps: if uptime > 0.0 { s.completed as f64 / uptime } else { 0.0 },
            p50_ms: quantile_sorted(&sorted, 0.5),
            p99_ms: quantile_sorted(&sorted, 0.99),
            version_mismatch_count: s.mismatches,
            errors: s.errors.clone(),
        }
    }

    async fn call(
        &self,
        transport: &dyn Transport,
        request: &Value,
        timeout_ms: u64,
    ) -> Result<Result<Value, ServiceError>, TransportError> {
        let attempt = tokio::time::timeout(Duration::from_millis(timeout_ms), transport.call(request.clone()));
        match attempt.await {
            Err(_) => Err(TransportError::Timeout),
            Ok(Err(e)) => Err(e),
            Ok(Ok(v)) => Ok(into_result(v)),
        }
    }

    /// Runs one phase with a single retry on timeout.
    async fn call_with_retry(
        &self,
        transport: &dyn Transport,
        request: &Value,
        timeout_ms: u64,
        stage: Stage,
    ) -> Result<Value, InferError> {
        let unavailable = match stage {
            Stage::Fetch => "embedding_unavailable",
            Stage::Score => "scorer_unavailable",
        };
        for _ in 0..2 {
            match self.call(transport, request, timeout_ms).await {
                Err(TransportError::Timeout) => continue,
                Err(TransportError::Unavailable(m)) => return Err(ServiceError::new(unavailable, m).into()),
                Err(TransportError::Protocol(m)) => return Err(ServiceError::internal(m).into()),
                Ok(Err(e)) if stage == Stage::Fetch && e.code == "no_model" => {
                    return Err(ServiceError::new(unavailable, e.message).into())
                }
                Ok(r) => return r.map_err(InferError::from),
            }
        }
        Err(InferError::timeout(stage))
    }

    async fn fetch(&self, req: &InferRequest) -> Result<Fetched, InferError> {
        let msg = json!({"op": "generate_embeddings", "request_id": req.request_id, "ids": req.ids});
        let mut body = self
            .call_with_retry(&*self.cpu, &msg, self.config.fetch_timeout_ms, Stage::Fetch)
            .await?;
        let version_id = match body.get("version_id").and_then(Value::as_str) {
            Some(v) if !v.is_empty() => v.to_string(),
            _ => return Err(ServiceError::internal("embedding response without version_id").into()),
        };
        Ok(Fetched {
            version_id,
            embeddings: body["embeddings"].take(),
        })
    }

    async fn score(&self, req: &InferRequest, fetched: &Fetched) -> Result<Scored, InferError> {
        let msg = json!({
            "op": "score",
            "request_id": req.request_id,
            "version_id": fetched.version_id,
            "embeddings": fetched.embeddings,
            "dense": req.dense,
            "head": req.head,
        });
        let body = self
            .call_with_retry(&*self.gpu, &msg, self.config.score_timeout_ms, Stage::Score)
            .await?;
        if body.get("version_id").and_then(Value::as_str) != Some(fetched.version_id.as_str()) {
            return Err(ServiceError::internal("scorer answered for a different version").into());
        }
        Ok(Scored { body })
    }

    /// Runs the two-step pipeline for one request.
    pub async fn infer(&self, req: &InferRequest) -> Result<InferResponse, InferError> {
        let start = Instant::now();
        let other = async {
            let t = Instant::now();
            if req.sim_other_ms > 0 {
                tokio::time::sleep(Duration::from_millis(req.sim_other_ms)).await;
            }
            t.elapsed()
        };
        let timed_fetch = async {
            let t = Instant::now();
            let r = self.fetch(req).await;
            (r, t.elapsed())
        };
        let ((mut fetched, mut fetch_time), other_time) = if self.config.early_fetch {
            tokio::join!(timed_fetch, other)
        } else {
            let o = other.await;
            (timed_fetch.await, o)
        };

        let mut score_time = Duration::ZERO;
        let mut restarted = false;
        let scored = loop {
            let f = fetched?;
            let t = Instant::now();
            let r = self.score(req, &f).await;
            score_time += t.elapsed();
            match r {
                Ok(s) => break (f, s),
                Err(e) if e.error.code == "version_mismatch" => {
                    self.state.lock().mismatches += 1;
                    if restarted {
                        return Err(e);
                    }
                    restarted = true;
                    let t = Instant::now();
                    fetched = self.fetch(req).await;
                    fetch_time += t.elapsed();
                }
                Err(e) => return Err(e),
            }
        };
        let (f, Scored { body }) = scored;
        let score = body.get("score").and_then(Value::as_f64).map(|s| s as f32);
        let scores = body.get("scores").and_then(|s| serde_json::from_value::<[f32; 2]>(s.clone()).ok());
        if score.is_none() && scores.is_none() {
            return Err(ServiceError::internal("scorer response without scores").into());
        }
        Ok(InferResponse {
            request_id: req.request_id.clone(),
            version_id: f.version_id,
            fingerprint: body.get("fingerprint").and_then(Value::as_str).unwrap_or_default().to_string(),
            score,
            scores,
            timing: Timing {
                fetch_ms: ms(fetch_time),
                other_ms: ms(other_time),
                score_ms: ms(score_time),
                total_ms: ms(start.elapsed()),
            },
        })
    }

    /// `infer` plus duplicate-id rejection and metrics accounting.
    pub async fn handle_infer(&self, req: &InferRequest) -> Result<InferResponse, InferError> {
        {
            let mut s = self.state.lock();
            s.requests += 1;
            s.in_flight += 1;
        }
        let fresh = self.active.lock().insert(req.request_id.clone());
        let result = if fresh {
            let r = self.infer(req).await;
            self.active.lock().remove(&req.request_id);
            r
        } else {
            Err(ServiceError::bad_request(format!("request {} is already in flight", req.request_id)).into())
        };
        let mut s = self.state.lock();
        s.in_flight -= 1;
        match &result {
            Ok(r) => {
                s.completed += 1;
                s.latencies.push_back(r.timing.total_ms);
                while s.latencies.len() > self.config.latency_window.max(1) {
                    s.latencies.pop_front();
                }
            }
            Err(e) => *s.errors.entry(e.error.code.clone()).or_insert(0) += 1,
        }
        result
    }
}

#[derive(Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum AdsRequest {
    Infer(InferRequest),
    Metrics {},
}

#[async_trait]
impl Handler for AdsServer {
    async fn handle(&self, request: Value) -> Value {
        let rid = request_id_of(&request).map(str::to_string);
        match serde_json::from_value::<AdsRequest>(request) {
            Ok(AdsRequest::Infer(req)) => match self.handle_infer(&req).await {
                Ok(r) => serde_json::to_value(r).expect("response serializes"),
                Err(e) => e.to_body(&req.request_id),
            },
            Ok(AdsRequest::Metrics {}) => serde_json::to_value(self.metrics()).expect("metrics serialize"),
            Err(e) => error_body(rid.as_deref(), &ServiceError::bad_request(e.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::{Layout, LogisticHead, TableSlot, UpperModel};
    use crate::serving::cpu_leaf::{CpuLeaf, CpuLeafConfig, EmbeddingModel, ModelTable};
    use crate::serving::gpu_leaf::{GpuLeaf, GpuLeafConfig};
    use crate::serving::simnet::{LatencyDist, LinkConfig, SimLink};
    use crate::serving::transport::{LocalTransport, SwitchTransport};
    use crate::tables::EmbeddingTable;

    fn leaves(version: &str) -> (Arc<CpuLeaf>, Arc<GpuLeaf>) {
        let cpu = Arc::new(CpuLeaf::new(CpuLeafConfig::default()));
        let t = EmbeddingTable::from_f32("user", version, 4, 2, vec![0.5; 8]).unwrap();
        cpu.install(EmbeddingModel {
            version_id: version.into(),
            tables: BTreeMap::from([("user".to_string(), ModelTable::Single(t))]),
        });
        let gpu = Arc::new(GpuLeaf::new(GpuLeafConfig::default()).unwrap());
        gpu.install_model(UpperModel {
            version_id: version.into(),
            head_kind: HeadKind::Ctr,
            layout: Layout {
                tables: vec![TableSlot {
                    name: "user".into(),
                    dim: 2,
                }],
                dense_dim: 0,
            },
            heads: vec![LogisticHead {
                weights: vec![1.0, 1.0],
                bias: -1.0,
            }],
        })
        .unwrap();
        (cpu, gpu)
    }

    fn link(h: Arc<dyn Handler>, ms: f64, name: &str) -> Arc<dyn Transport> {
        let cfg = LinkConfig {
            latency: LatencyDist::Fixed { ms },
            drop_probability: 0.0,
        };
        Arc::new(SimLink::new(Arc::new(LocalTransport::new(h)), cfg, 0, name).unwrap())
    }

    fn request(id: &str, other: u64) -> InferRequest {
        InferRequest {
            request_id: id.into(),
            ids: BTreeMap::from([("user".to_string(), vec![7])]),
            dense: vec![],
            head: HeadKind::Ctr,
            sim_other_ms: other,
        }
    }

    fn server(fetch: f64, score: f64, early: bool) -> AdsServer {
        let (cpu, gpu) = leaves("v1");
        AdsServer::new(
            link(cpu, fetch, "cpu"),
            link(gpu, score, "gpu"),
            AdsServerConfig {
                early_fetch: early,
                ..Default::default()
            },
        )
    }

    #[tokio::test(start_paused = true)]
    async fn early_fetch_overlaps_other_work() {
        let par = server(20.0, 5.0, true).handle_infer(&request("a", 20)).await.unwrap();
        assert_eq!(par.version_id, "v1");
        assert_eq!(par.score, Some(0.5));
        assert!(par.timing.total_ms <= 30.0, "{:?}", par.timing);
        let seq = server(20.0, 5.0, false).handle_infer(&request("a", 20)).await.unwrap();
        assert!(seq.timing.total_ms >= 44.0, "{:?}", seq.timing);
        let none = server(20.0, 5.0, true).handle_infer(&request("a", 0)).await.unwrap();
        assert!((none.timing.total_ms - 25.0).abs() < 1.0);
    }

    #[tokio::test(start_paused = true)]
    async fn unavailable_and_timeouts_are_classified() {
        let (cpu, gpu) = leaves("v1");
        let down: Arc<dyn Transport> = Arc::new(SwitchTransport::default());
        let s = AdsServer::new(down.clone(), Arc::new(LocalTransport::new(gpu.clone())), AdsServerConfig::default());
        let e = s.handle_infer(&request("a", 0)).await.unwrap_err();
        assert_eq!(e.error.code, "embedding_unavailable");

        let s = AdsServer::new(Arc::new(LocalTransport::new(cpu.clone())), down, AdsServerConfig::default());
        assert_eq!(s.handle_infer(&request("a", 0)).await.unwrap_err().error.code, "scorer_unavailable");

        let s = AdsServer::new(
            Arc::new(LocalTransport::new(cpu)),
            link(gpu, 100.0, "gpu"),
            AdsServerConfig {
                score_timeout_ms: 50,
                ..Default::default()
            },
        );
        let e = s.handle_infer(&request("a", 0)).await.unwrap_err();
        assert_eq!(e.error.code, "timeout");
        assert_eq!(e.phase, Some(Stage::Score));
        assert_eq!(e.to_body("a")["error"]["phase"], "score");
        let m = s.metrics();
        assert_eq!((m.requests, m.completed, m.in_flight, m.error_total()), (1, 0, 0, 1));
    }

    #[tokio::test(start_paused = true)]
    async fn mismatch_restarts_once_and_is_counted() {
        let (cpu, _) = leaves("v2");
        let (_, gpu) = leaves("v1");
        let s = AdsServer::new(
            Arc::new(LocalTransport::new(cpu)),
            Arc::new(LocalTransport::new(gpu)),
            AdsServerConfig::default(),
        );
        let e = s.handle_infer(&request("a", 0)).await.unwrap_err();
        assert_eq!(e.error.code, "version_mismatch");
        let m = s.metrics();
        assert_eq!(m.version_mismatch_count, 2);
        assert_eq!(m.errors["version_mismatch"], 1);
    }

    #[tokio::test(start_paused = true)]
    async fn metrics_and_duplicates() {
        let s = Arc::new(server(10.0, 1.0, true));
        assert_eq!(s.metrics(), PipelineMetrics::default());
        let a = tokio::spawn({
            let s = s.clone();
            async move { s.handle_infer(&request("dup", 0)).await }
        });
        tokio::task::yield_now().await;
        let dup = s.handle_infer(&request("dup", 0)).await.unwrap_err();
        assert_eq!(dup.error.code, "bad_request");
        a.await.unwrap().unwrap();
        for i in 0..5 {
            s.handle_infer(&request(&format!("r{i}"), 0)).await.unwrap();
        }
        let m = s.metrics();
        assert_eq!((m.requests, m.completed, m.in_flight, m.error_total()), (7, 6, 0, 1));
        assert_eq!(m.p50_ms, Some(11.0));
        let body = s.handle(json!({"op": "metrics"})).await;
        assert_eq!(body["completed"], 6);
    }
}
