//! Latency of the early-fetch pipeline against a sequentialized one.

use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::task::JoinSet;
use tokio::time::Instant;

use super::artifacts::write_version;
use super::config::BenchConfig;
use super::run::{paused_runtime, plan_requests, Planned};
use crate::error::Result;
use crate::metrics::quantile;
use crate::serving::{
    AdsServer, AdsServerConfig, CpuLeaf, CpuLeafConfig, GpuLeaf, GpuLeafConfig, LinkConfig, LocalTransport, SimLink,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub mean_ms: f64,
    pub max_ms: f64,
}

impl LatencySummary {
    fn of(values: &[f64]) -> Option<Self> {
        Some(Self {
            p50_ms: quantile(values, 0.5)?,
            p99_ms: quantile(values, 0.99)?,
            mean_ms: values.iter().sum::<f64>() / values.len() as f64,
            max_ms: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub requests: usize,
    /// Failed requests over both runs.
    pub errors: usize,
    pub parallel: Option<LatencySummary>,
    pub sequential: Option<LatencySummary>,
}

async fn pipeline(cfg: &BenchConfig, early_fetch: bool, planned: Arc<Vec<Planned>>, root: &std::path::Path) -> Result<(Vec<f64>, usize)> {
    let v = write_version(root, &cfg.model, cfg.seed, 0)?;
    let cpu = Arc::new(CpuLeaf::new(CpuLeafConfig {
        memory_budget_bytes: None,
        load_inline: true,
    }));
    cpu.load_model(&v.dir).await?;
    let gpu = Arc::new(GpuLeaf::new(GpuLeafConfig::default())?);
    gpu.install_model(v.upper.clone())?;
    let link = |latency| LinkConfig {
        latency,
        drop_probability: 0.0,
    };
    let fetch = SimLink::new(Arc::new(LocalTransport::new(cpu)), link(cfg.fetch), cfg.seed, "ads->cpu")?;
    let score = SimLink::new(Arc::new(LocalTransport::new(gpu)), link(cfg.score), cfg.seed, "ads->gpu")?;
    let ads = Arc::new(AdsServer::new(
        Arc::new(fetch),
        Arc::new(score),
        AdsServerConfig {
            fetch_timeout_ms: 3_600_000,
            score_timeout_ms: 3_600_000,
            early_fetch,
            latency_window: planned.len(),
        },
    ));
    let totals = Arc::new(Mutex::new(Vec::with_capacity(planned.len())));
    let errors = Arc::new(Mutex::new(0usize));
    let t0 = Instant::now();
    let mut tasks = JoinSet::new();
    for i in 0..planned.len() {
        tokio::time::sleep_until(t0 + Duration::from_secs_f64(i as f64 / cfg.rate_rps)).await;
        let (ads, planned, totals, errors) = (ads.clone(), planned.clone(), totals.clone(), errors.clone());
        tasks.spawn(async move {
            match ads.handle_infer(&planned[i].req).await {
                Ok(r) => totals.lock().push(r.timing.total_ms),
                Err(_) => *errors.lock() += 1,
            }
        });
    }
    while tasks.join_next().await.is_some() {}
    let totals = std::mem::take(&mut *totals.lock());
    let errors = *errors.lock();
    Ok((totals, errors))
}

/// Runs the same request stream through both pipeline modes on a virtual
/// clock and summarizes end-to-end latency.
pub fn bench_latency(cfg: &BenchConfig) -> Result<BenchResult> {
    cfg.validate()?;
    let root = tempfile::tempdir()?;
    let planned = Arc::new(plan_requests(cfg.seed, cfg.requests, &cfg.model, &cfg.other));
    let mut errors = 0;
    let mut summaries = Vec::new();
    for early in [true, false] {
        let rt = paused_runtime()?;
        let (totals, e) = rt.block_on(pipeline(cfg, early, planned.clone(), root.path()))?;
        errors += e;
        summaries.push(LatencySummary::of(&totals));
    }
    Ok(BenchResult {
        requests: cfg.requests,
        errors,
        parallel: summaries[0],
        sequential: summaries[1],
    })
}
