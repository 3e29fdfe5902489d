//! Synthetic block-model worlds: interaction logs, labeled impressions and a
//! heterogeneous graph, optionally with community drift over time.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::finetune::LabeledExample;
use super::{Entity, EntityType, InteractionKind, InteractionRecord, KgTriple, Relation};
use crate::error::{Error, Result};
use crate::tables::EntityId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub num_users: usize,
    pub num_pins: usize,
    pub communities: usize,
    /// Fraction of interactions whose pin shares the user's community.
    pub within_block_rate: f64,
    pub quality_std: f64,
    /// Spread of the per-community user propensity and pin appeal.
    pub community_effect_std: f64,
    pub label_bias: f64,
    pub same_block_effect: f64,
    pub dense_effect: f64,
    /// Fraction of interactions recorded as conversions.
    pub conversion_rate: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_users: 400,
            num_pins: 400,
            communities: 8,
            within_block_rate: 0.9,
            quality_std: 0.5,
            community_effect_std: 1.0,
            label_bias: -1.5,
            same_block_effect: 0.0,
            dense_effect: 0.5,
            conversion_rate: 0.1,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0 || self.num_pins == 0 || self.communities < 2 {
            return Err(Error::invalid("world needs users, pins and at least 2 communities"));
        }
        for (name, v) in [
            ("within_block_rate", self.within_block_rate),
            ("conversion_rate", self.conversion_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.quality_std >= 0.0) || !(self.community_effect_std >= 0.0) {
            return Err(Error::invalid("effect spreads must be non-negative"));
        }
        Ok(())
    }
}

/// Community membership that switches from `from` to `to` at `switch_at`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Member {
    pub id: EntityId,
    pub from: usize,
    pub to: usize,
    pub switch_at: u64,
}

impl Member {
    pub fn community_at(&self, t: u64) -> usize {
        if t < self.switch_at {
            self.from
        } else {
            self.to
        }
    }
}

/// A labeled impression with the time it was served.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedExample {
    pub timestamp: u64,
    pub example: LabeledExample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWorld {
    pub config: WorldConfig,
    pub users: Vec<Member>,
    pub pins: Vec<Member>,
    pub pin_quality: Vec<f64>,
    /// Logit offset of a user, by the user's current community.
    pub user_effect: Vec<f64>,
    /// Logit offset of a pin, by the pin's current community.
    pub pin_effect: Vec<f64>,
}

fn distinct_ids(n: usize, rng: &mut ChaCha8Rng) -> Vec<EntityId> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let id = rng.random::<u64>();
        if seen.insert(id) {
            out.push(EntityId(id));
        }
    }
    out
}

impl BlockWorld {
    /// A world whose communities never change.
    pub fn generate(config: &WorldConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, None)
    }

    /// Every entity moves to a different, uniformly chosen community at a
    /// time drawn uniformly from `[drift_start, drift_end)`.
    pub fn drifting(config: &WorldConfig, seed: u64, drift_start: u64, drift_end: u64) -> Result<Self> {
        if drift_start >= drift_end {
            return Err(Error::invalid("drift window is empty"));
        }
        Self::build(config, seed, Some((drift_start, drift_end)))
    }

    fn build(config: &WorldConfig, seed: u64, drift: Option<(u64, u64)>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.communities;
        let members = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Member> {
            distinct_ids(n, rng)
                .into_iter()
                .map(|id| {
                    let from = rng.random_range(0..k);
                    match drift {
                        None => Member {
                            id,
                            from,
                            to: from,
                            switch_at: u64::MAX,
                        },
                        Some((lo, hi)) => {
                            let shift = rng.random_range(1..k);
                            Member {
                                id,
                                from,
                                to: (from + shift) % k,
                                switch_at: rng.random_range(lo..hi),
                            }
                        }
                    }
                })
                .collect()
        };
        let users = members(config.num_users, &mut rng);
        let pins = members(config.num_pins, &mut rng);
        let quality = Normal::new(0.0, config.quality_std).map_err(|e| Error::invalid(e.to_string()))?;
        let pin_quality = (0..pins.len()).map(|_| quality.sample(&mut rng)).collect();
        let effect =
            Normal::new(0.0, config.community_effect_std).map_err(|e| Error::invalid(e.to_string()))?;
        let user_effect = (0..k).map(|_| effect.sample(&mut rng)).collect();
        let pin_effect = (0..k).map(|_| effect.sample(&mut rng)).collect();
        Ok(Self {
            config: config.clone(),
            users,
            pins,
            pin_quality,
            user_effect,
            pin_effect,
        })
    }

    /// Index of a pin whose community at `t` does (or does not) equal `c`,
    /// by rejection sampling with a uniform fallback.
    fn pick_pin(&self, c: usize, same: bool, t: u64, rng: &mut ChaCha8Rng) -> usize {
        for _ in 0..1000 {
            let i = rng.random_range(0..self.pins.len());
            if (self.pins[i].community_at(t) == c) == same {
                return i;
            }
        }
        rng.random_range(0..self.pins.len())
    }

    /// `n` interactions with timestamps uniform in `[t0, t1)`, sorted by time.
    pub fn interactions(&self, n: usize, t0: u64, t1: u64, seed: u64) -> Result<Vec<InteractionRecord>> {
        if t0 >= t1 {
            return Err(Error::invalid("interaction window is empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut times: Vec<u64> = (0..n).map(|_| rng.random_range(t0..t1)).collect();
        times.sort_unstable();
        Ok(times
            .into_iter()
            .map(|t| {
                let user = &self.users[rng.random_range(0..self.users.len())];
                let same = rng.random_bool(self.config.within_block_rate);
                let pin = self.pick_pin(user.community_at(t), same, t, &mut rng);
                let kind = if rng.random_bool(self.config.conversion_rate) {
                    InteractionKind::Conversion
                } else {
                    InteractionKind::Click
                };
                InteractionRecord {
                    user_id: user.id,
                    pin_id: self.pins[pin].id,
                    kind,
                    timestamp: t,
                }
            })
            .collect())
    }

    /// `n` uniformly random (user, pin) impressions in `[t0, t1)` with one
    /// standard-normal dense feature and a logistic click label. The logit
    /// adds the user's and pin's community effects, the pin's own quality,
    /// an optional same-community bonus and the dense feature.
    pub fn impressions(&self, n: usize, t0: u64, t1: u64, seed: u64) -> Result<Vec<TimedExample>> {
        if t0 >= t1 {
            return Err(Error::invalid("impression window is empty"));
        }
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut times: Vec<u64> = (0..n).map(|_| rng.random_range(t0..t1)).collect();
        times.sort_unstable();
        Ok(times
            .into_iter()
            .map(|t| {
                let user = &self.users[rng.random_range(0..self.users.len())];
                let pi = rng.random_range(0..self.pins.len());
                let d: f64 = StandardNormal.sample(&mut rng);
                let (cu, cp) = (user.community_at(t), self.pins[pi].community_at(t));
                let logit = c.label_bias
                    + self.user_effect[cu]
                    + self.pin_effect[cp]
                    + if cu == cp { c.same_block_effect } else { 0.0 }
                    + self.pin_quality[pi]
                    + c.dense_effect * d;
                let p = 1.0 / (1.0 + (-logit).exp());
                TimedExample {
                    timestamp: t,
                    example: LabeledExample {
                        user_id: user.id,
                        pin_id: self.pins[pi].id,
                        dense: vec![d as f32],
                        label: u8::from(rng.random_bool(p)),
                        view_label: None,
                    },
                }
            })
            .collect())
    }

    /// Static-world convenience: impressions without timestamps.
    pub fn labeled(&self, n: usize, seed: u64) -> Result<Vec<LabeledExample>> {
        Ok(self.impressions(n, 0, 1, seed)?.into_iter().map(|t| t.example).collect())
    }

    /// A heterogeneous graph over the world at time `t`: engagement and
    /// conversion edges from `interactions`, each pin belonging to one of
    /// `advertisers_per_community` advertisers of its community, and an
    /// image signature depicting it shared by pins of the same community.
    pub fn knowledge_graph(
        &self,
        interactions: &[InteractionRecord],
        advertisers_per_community: usize,
        t: u64,
        seed: u64,
    ) -> Result<Vec<KgTriple>> {
        if advertisers_per_community == 0 {
            return Err(Error::invalid("advertisers_per_community must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(interactions.len() + 2 * self.pins.len());
        for r in interactions {
            let rel = match r.kind {
                InteractionKind::Click => Relation::Engaged,
                InteractionKind::Conversion => Relation::Converted,
            };
            out.push(KgTriple::new(
                Entity {
                    kind: EntityType::User,
                    id: r.user_id,
                },
                rel,
                Entity {
                    kind: EntityType::Pin,
                    id: r.pin_id,
                },
            )?);
        }
        for pin in &self.pins {
            let c = pin.community_at(t) as u64;
            let adv = c * advertisers_per_community as u64 + rng.random_range(0..advertisers_per_community as u64);
            let pin_entity = Entity {
                kind: EntityType::Pin,
                id: pin.id,
            };
            out.push(KgTriple::new(pin_entity, Relation::BelongsTo, Entity::new(EntityType::Advertiser, adv))?);
            out.push(KgTriple::new(Entity::new(EntityType::ImageSig, c), Relation::Depicts, pin_entity)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_distinct_ids() {
        let cfg = WorldConfig::default();
        let a = BlockWorld::generate(&cfg, 3).unwrap();
        assert_eq!(a, BlockWorld::generate(&cfg, 3).unwrap());
        let ids: BTreeSet<_> = a.users.iter().map(|m| m.id).collect();
        assert_eq!(ids.len(), cfg.num_users);
        assert!(a.users.iter().all(|m| m.from == m.to && m.from < cfg.communities));
    }

    #[test]
    fn within_block_rate_is_respected() {
        let w = BlockWorld::generate(&WorldConfig::default(), 1).unwrap();
        let recs = w.interactions(20_000, 0, 100, 2).unwrap();
        let community = |id: EntityId, members: &[Member]| members.iter().find(|m| m.id == id).unwrap().from;
        let same = recs
            .iter()
            .filter(|r| community(r.user_id, &w.users) == community(r.pin_id, &w.pins))
            .count() as f64
            / recs.len() as f64;
        assert!((same - 0.9).abs() < 0.01, "{same}");
        assert!(recs.windows(2).all(|p| p[0].timestamp <= p[1].timestamp));
    }

    #[test]
    fn drift_moves_every_member() {
        let w = BlockWorld::drifting(&WorldConfig::default(), 5, 10, 20).unwrap();
        for m in w.users.iter().chain(&w.pins) {
            assert_ne!(m.from, m.to);
            assert!((10..20).contains(&m.switch_at));
            assert_eq!(m.community_at(9), m.from);
            assert_eq!(m.community_at(20), m.to);
        }
        assert!(BlockWorld::drifting(&WorldConfig::default(), 5, 10, 10).is_err());
    }

    #[test]
    fn community_effects_drive_click_rates() {
        let w = BlockWorld::generate(&WorldConfig::default(), 7).unwrap();
        let ex = w.labeled(40_000, 8).unwrap();
        let comm = |id: EntityId| w.pins.iter().find(|m| m.id == id).unwrap().from;
        let best = (0..8).max_by(|&a, &b| w.pin_effect[a].total_cmp(&w.pin_effect[b])).unwrap();
        let worst = (0..8).min_by(|&a, &b| w.pin_effect[a].total_cmp(&w.pin_effect[b])).unwrap();
        let rate = |c: usize| {
            let hits: Vec<f64> = ex.iter().filter(|e| comm(e.pin_id) == c).map(|e| f64::from(e.label)).collect();
            hits.iter().sum::<f64>() / hits.len() as f64
        };
        assert!(rate(best) > rate(worst) + 0.1);
    }

    #[test]
    fn graph_has_all_relations() {
        let w = BlockWorld::generate(&WorldConfig::default(), 1).unwrap();
        let recs = w.interactions(500, 0, 10, 2).unwrap();
        let g = w.knowledge_graph(&recs, 2, 0, 3).unwrap();
        assert_eq!(g.len(), 500 + 2 * w.pins.len());
        for r in Relation::ALL {
            assert!(g.iter().any(|t| t.relation == r), "{r}");
        }
    }
}
