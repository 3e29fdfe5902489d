//! Scenario and bench configuration documents.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scorer::HeadKind;
use crate::serving::{AdsServerConfig, DeployerConfig, LatencyDist, LinkConfig};
use crate::shardplan::ShardStrategy;

fn config_error(pointer: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        pointer: pointer.into(),
        message: message.into(),
    }
}

/// Parses a JSON config, reporting the offending field as a JSON pointer.
pub fn parse_config<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let mut pointer = String::new();
        for seg in e.path().iter() {
            use serde_path_to_error::Segment;
            match seg {
                Segment::Seq { index } => pointer.push_str(&format!("/{index}")),
                Segment::Map { key } => pointer.push_str(&format!("/{}", key.replace('~', "~0").replace('/', "~1"))),
                Segment::Enum { variant } => pointer.push_str(&format!("/{variant}")),
                Segment::Unknown => pointer.push_str("/?"),
            }
        }
        config_error(pointer, e.into_inner().to_string())
    })
}

/// The synthetic model versions a scenario deploys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub num_rows: usize,
    pub dim: usize,
    pub dense_dim: usize,
    pub num_users: u64,
    pub num_pins: u64,
    pub head: HeadKind,
    /// Store tables as INT4 with this group size.
    pub int4_group_size: Option<usize>,
    /// Split the user table into this many shards.
    pub user_shards: Option<usize>,
    pub shard_strategy: ShardStrategy,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            num_rows: 256,
            dim: 8,
            dense_dim: 2,
            num_users: 1000,
            num_pins: 1000,
            head: HeadKind::Ctr,
            int4_group_size: None,
            user_shards: None,
            shard_strategy: ShardStrategy::Contiguous,
        }
    }
}

impl ModelSpec {
    fn validate(&self, at: &str) -> Result<()> {
        let positive = [
            ("num_rows", self.num_rows as u64),
            ("dim", self.dim as u64),
            ("num_users", self.num_users),
            ("num_pins", self.num_pins),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(config_error(format!("{at}/{field}"), "must be positive"));
            }
        }
        if let Some(g) = self.int4_group_size {
            if g < 2 || self.dim % 2 != 0 {
                return Err(config_error(
                    format!("{at}/int4_group_size"),
                    "INT4 needs group_size >= 2 and an even dim",
                ));
            }
        }
        if let Some(k) = self.user_shards {
            if k == 0 || k > self.num_rows {
                return Err(config_error(format!("{at}/user_shards"), "must lie in [1, num_rows]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Links {
    /// Ads server to embedding leaf.
    pub fetch: LinkConfig,
    /// Ads server to scorer leaf.
    pub score: LinkConfig,
}

impl Default for Links {
    fn default() -> Self {
        Self {
            fetch: LinkConfig {
                latency: LatencyDist::Fixed { ms: 2.0 },
                drop_probability: 0.0,
            },
            score: LinkConfig {
                latency: LatencyDist::Fixed { ms: 1.0 },
                drop_probability: 0.0,
            },
        }
    }
}

impl Links {
    fn validate(&self) -> Result<()> {
        for (name, link) in [("fetch", &self.fetch), ("score", &self.score)] {
            link.latency
                .validate()
                .map_err(|e| config_error(format!("/links/{name}/latency"), e.to_string()))?;
            if !(0.0..1.0).contains(&link.drop_probability) {
                return Err(config_error(format!("/links/{name}/drop_probability"), "must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

/// Deployment attempts spread evenly over the request stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    /// Deployments that should run to completion.
    pub deployments: usize,
    /// Extra attempts that are rolled back, alternately from Phase 1 and
    /// from Phase 2.
    pub rollbacks: usize,
    /// Attempt indices (counting rollbacks) during whose Phase 2 the
    /// embedding leaf crashes and is restarted on the stable model.
    pub crash_cpu_leaf_at: Vec<usize>,
    pub crash_down_ms: u64,
    /// Traffic time between the switch and a Phase 2 rollback.
    pub rollback_hold_ms: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            deployments: 0,
            rollbacks: 0,
            crash_cpu_leaf_at: Vec::new(),
            crash_down_ms: 50,
            rollback_hold_ms: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttemptKind {
    Deploy,
    CrashDeploy,
    RollbackPhase1,
    RollbackPhase2,
}

impl Schedule {
    pub fn attempts(&self) -> usize {
        self.deployments + self.rollbacks
    }

    /// The kind of every attempt, in order.
    pub fn plan(&self) -> Vec<AttemptKind> {
        let n = self.attempts();
        let mut kinds = vec![AttemptKind::Deploy; n];
        for j in 0..self.rollbacks {
            let idx = (2 * j + 1) * n / (2 * self.rollbacks);
            kinds[idx] = if j % 2 == 0 {
                AttemptKind::RollbackPhase1
            } else {
                AttemptKind::RollbackPhase2
            };
        }
        for &i in &self.crash_cpu_leaf_at {
            kinds[i] = AttemptKind::CrashDeploy;
        }
        kinds
    }

    fn validate(&self) -> Result<()> {
        let n = self.attempts();
        let base = self.plan_without_crashes();
        for (k, &i) in self.crash_cpu_leaf_at.iter().enumerate() {
            let at = format!("/deployments/crash_cpu_leaf_at/{k}");
            if i >= n {
                return Err(config_error(at, format!("attempt {i} does not exist ({n} attempts)")));
            }
            if base[i] != AttemptKind::Deploy {
                return Err(config_error(at, format!("attempt {i} is a rollback")));
            }
        }
        Ok(())
    }

    fn plan_without_crashes(&self) -> Vec<AttemptKind> {
        Self {
            crash_cpu_leaf_at: Vec::new(),
            ..self.clone()
        }
        .plan()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub requests: usize,
    /// Open-loop arrival rate.
    pub rate_rps: f64,
    /// Duration of the simulated unrelated feature work per request.
    pub other: LatencyDist,
    pub links: Links,
    pub ads: AdsServerConfig,
    pub deployer: DeployerConfig,
    pub model: ModelSpec,
    pub deployments: Schedule,
    /// Versions the scorer leaf may hold at once.
    pub max_versions: usize,
    /// Period of the version-safety sampler.
    pub safety_sample_ms: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            seed: 0,
            requests: 1000,
            rate_rps: 500.0,
            other: LatencyDist::Fixed { ms: 0.0 },
            links: Links::default(),
            ads: AdsServerConfig {
                fetch_timeout_ms: 50,
                score_timeout_ms: 50,
                early_fetch: true,
                latency_window: 100_000,
            },
            deployer: DeployerConfig {
                drain_window_ms: 300,
                drain_poll_ms: 10,
                drain_timeout_ms: 10_000,
                call_timeout_ms: 1000,
            },
            model: ModelSpec::default(),
            deployments: Schedule::default(),
            max_versions: 2,
            safety_sample_ms: 1,
        }
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = parse_config(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate_rps.is_finite() && self.rate_rps > 0.0) {
            return Err(config_error("/rate_rps", "must be positive"));
        }
        self.other
            .validate()
            .map_err(|e| config_error("/other", e.to_string()))?;
        self.links.validate()?;
        if self.ads.fetch_timeout_ms == 0 || self.ads.score_timeout_ms == 0 {
            return Err(config_error("/ads", "timeouts must be positive"));
        }
        if self.deployer.drain_poll_ms == 0 {
            return Err(config_error("/deployer/drain_poll_ms", "must be positive"));
        }
        self.model.validate("/model")?;
        self.deployments.validate()?;
        if self.max_versions < 2 && self.deployments.attempts() > 0 {
            return Err(config_error("/max_versions", "deployments need room for two versions"));
        }
        if self.safety_sample_ms == 0 {
            return Err(config_error("/safety_sample_ms", "must be positive"));
        }
        Ok(())
    }
}

/// Latency comparison between early-fetch and sequential pipelines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub seed: u64,
    pub requests: usize,
    pub rate_rps: f64,
    pub fetch: LatencyDist,
    pub other: LatencyDist,
    pub score: LatencyDist,
    pub model: ModelSpec,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            requests: 1000,
            rate_rps: 200.0,
            fetch: LatencyDist::Fixed { ms: 20.0 },
            other: LatencyDist::Fixed { ms: 20.0 },
            score: LatencyDist::Fixed { ms: 5.0 },
            model: ModelSpec::default(),
        }
    }
}

impl BenchConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = parse_config(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.requests == 0 {
            return Err(config_error("/requests", "must be positive"));
        }
        if !(self.rate_rps.is_finite() && self.rate_rps > 0.0) {
            return Err(config_error("/rate_rps", "must be positive"));
        }
        for (name, d) in [("fetch", &self.fetch), ("other", &self.other), ("score", &self.score)] {
            d.validate().map_err(|e| config_error(format!("/{name}"), e.to_string()))?;
        }
        self.model.validate("/model")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pointer(text: &str) -> String {
        match Scenario::from_json(text) {
            Err(Error::Config { pointer, .. }) => pointer,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn errors_carry_json_pointers() {
        assert_eq!(pointer(r#"{"requests": "many"}"#), "/requests");
        assert_eq!(pointer(r#"{"links": {"fetch": {"latency": {"kind": "fixed", "ms": -1}}}}"#), "/links/fetch/latency");
        assert_eq!(pointer(r#"{"links": {"score": {"drop_probability": 1.0}}}"#), "/links/score/drop_probability");
        assert_eq!(pointer(r#"{"model": {"dim": 0}}"#), "/model/dim");
        assert_eq!(pointer(r#"{"model": {"colour": 1}}"#), "/model/colour");
        assert_eq!(pointer(r#"{"deployments": {"deployments": 2, "crash_cpu_leaf_at": [0, 7]}}"#), "/deployments/crash_cpu_leaf_at/1");
        assert_eq!(pointer(r#"{"rate_rps": 0}"#), "/rate_rps");
    }

    #[test]
    fn defaults_parse() {
        assert_eq!(Scenario::from_json("{}").unwrap(), Scenario::default());
        assert_eq!(BenchConfig::from_json("{}").unwrap(), BenchConfig::default());
    }

    #[test]
    fn rollbacks_are_spread_out() {
        let s = Schedule {
            deployments: 20,
            rollbacks: 5,
            crash_cpu_leaf_at: vec![0],
            ..Default::default()
        };
        let plan = s.plan();
        assert_eq!(plan.len(), 25);
        let rb: Vec<usize> = (0..25).filter(|&i| plan[i] != AttemptKind::Deploy && plan[i] != AttemptKind::CrashDeploy).collect();
        assert_eq!(rb, [2, 7, 12, 17, 22]);
        assert_eq!(plan[0], AttemptKind::CrashDeploy);
        assert_eq!(plan[7], AttemptKind::RollbackPhase2);
    }
}
