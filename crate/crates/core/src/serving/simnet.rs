//! Simulated network links: seeded latency injection and message drops in
//! front of any transport.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::transport::{Transport, TransportError};
use super::wire::request_id_of;
use crate::error::{Error, Result};

/// Latency in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LatencyDist {
    Fixed { ms: f64 },
    Uniform { lo: f64, hi: f64 },
    /// `exp(N(mu, sigma))` milliseconds.
    Lognormal { mu: f64, sigma: f64 },
}

impl Default for LatencyDist {
    fn default() -> Self {
        LatencyDist::Fixed { ms: 0.0 }
    }
}

impl LatencyDist {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LatencyDist::Fixed { ms } => ms >= 0.0 && ms.is_finite(),
            LatencyDist::Uniform { lo, hi } => lo >= 0.0 && hi >= lo && hi.is_finite(),
            LatencyDist::Lognormal { mu, sigma } => mu.is_finite() && sigma >= 0.0 && sigma.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid latency distribution {self:?}")))
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Duration {
        let ms = match *self {
            LatencyDist::Fixed { ms } => ms,
            LatencyDist::Uniform { lo, hi } if hi > lo => rng.random_range(lo..hi),
            LatencyDist::Uniform { lo, .. } => lo,
            LatencyDist::Lognormal { mu, sigma } => LogNormal::new(mu, sigma).expect("validated").sample(rng),
        };
        Duration::from_secs_f64(ms.max(0.0) / 1000.0)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkConfig {
    pub latency: LatencyDist,
    /// Probability that a request is swallowed and never answered.
    pub drop_probability: f64,
}

impl LinkConfig {
    pub fn validate(&self) -> Result<()> {
        self.latency.validate()?;
        if !(0.0..1.0).contains(&self.drop_probability) {
            return Err(Error::invalid("drop_probability must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Delays (or drops) each request before handing it to the inner transport.
/// The draw for a request depends only on the seed, the link name, the
/// request id and how many times that id has crossed this link.
pub struct SimLink {
    inner: Arc<dyn Transport>,
    config: LinkConfig,
    seed: u64,
    name: String,
    attempts: Mutex<HashMap<String, u32>>,
    anonymous: Mutex<u64>,
}

impl SimLink {
    pub fn new(inner: Arc<dyn Transport>, config: LinkConfig, seed: u64, name: &str) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            inner,
            config,
            seed,
            name: name.to_string(),
            attempts: Mutex::new(HashMap::new()),
            anonymous: Mutex::new(0),
        })
    }

    fn rng_for(&self, request: &Value) -> ChaCha8Rng {
        let (key, attempt) = match request_id_of(request) {
            Some(id) => {
                let mut map = self.attempts.lock();
                let n = map.entry(id.to_string()).or_insert(0);
                *n += 1;
                (id.to_string(), *n)
            }
            None => {
                let mut n = self.anonymous.lock();
                *n += 1;
                (String::new(), *n as u32)
            }
        };
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(self.name.as_bytes());
        h.update([0]);
        h.update(key.as_bytes());
        h.update([0]);
        h.update(attempt.to_le_bytes());
        let digest = h.finalize();
        ChaCha8Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")))
    }
}

#[async_trait]
impl Transport for SimLink {
    async fn call(&self, request: Value) -> Result<Value, TransportError> {
        let mut rng = self.rng_for(&request);
        let dropped = self.config.drop_probability > 0.0 && rng.random_bool(self.config.drop_probability);
        let delay = self.config.latency.sample(&mut rng);
        if dropped {
            std::future::pending::<()>().await;
        }
        if !delay.is_zero() {
            tokio::time::sleep(delay).await;
        }
        self.inner.call(request).await
    }
}
