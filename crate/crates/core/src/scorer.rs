//! Upper scoring models: logistic heads over embeddings and dense features.
//!
//! A [`Layout`] fixes the feature vector: the looked-up rows of each table
//! in order, then the dense features. Scoring sums in that fixed order in f32, so the same
//! model file and payload always give bitwise-identical scores.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSlot {
    pub name: String,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub tables: Vec<TableSlot>,
    pub dense_dim: usize,
}

impl Layout {
    pub fn slot(&self, name: &str) -> Option<&TableSlot> {
        self.tables.iter().find(|s| s.name == name)
    }

    pub fn feature_dim(&self) -> usize {
        self.tables.iter().map(|s| s.dim).sum::<usize>() + self.dense_dim
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.tables.iter().enumerate() {
            if s.dim == 0 {
                return Err(Error::invalid(format!("table {} has zero dim", s.name)));
            }
            if self.tables[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::invalid(format!("table {} listed twice", s.name)));
            }
        }
        Ok(())
    }

    /// Assembles the feature vector from one row per table.
    pub fn features<'a>(
        &self,
        row: impl Fn(&str) -> Option<&'a [f32]>,
        dense: &[f32],
    ) -> std::result::Result<Vec<f32>, String> {
        if dense.len() != self.dense_dim {
            return Err(format!("expected {} dense features, got {}", self.dense_dim, dense.len()));
        }
        let mut x = Vec::with_capacity(self.feature_dim());
        for slot in &self.tables {
            let r = row(&slot.name).ok_or_else(|| format!("missing embeddings for table {}", slot.name))?;
            if r.len() != slot.dim {
                return Err(format!("table {} expects dim {}, got {}", slot.name, slot.dim, r.len()));
            }
            x.extend_from_slice(r);
        }
        x.extend_from_slice(dense);
        Ok(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticHead {
    pub weights: Vec<f32>,
    pub bias: f32,
}

#[inline]
pub fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

impl LogisticHead {
    pub fn zeros(n: usize) -> Self {
        Self {
            weights: vec![0.0; n],
            bias: 0.0,
        }
    }

    pub fn logit(&self, x: &[f32]) -> f32 {
        let mut acc = self.bias;
        for (w, v) in self.weights.iter().zip(x) {
            acc += w * v;
        }
        acc
    }

    pub fn predict(&self, x: &[f32]) -> f32 {
        sigmoid(self.logit(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// One click-through probability.
    Ctr,
    /// Click-through and view-through conversion probabilities.
    Cvr,
}

impl HeadKind {
    pub fn num_heads(self) -> usize {
        match self {
            HeadKind::Ctr => 1,
            HeadKind::Cvr => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scores {
    Ctr(f32),
    Cvr { ccvr: f32, vtcvr: f32 },
}

/// A versioned upper model as stored in its JSON weights document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpperModel {
    pub version_id: String,
    pub head_kind: HeadKind,
    pub layout: Layout,
    pub heads: Vec<LogisticHead>,
}

impl UpperModel {
    pub fn validate(&self) -> Result<()> {
        if self.version_id.is_empty() {
            return Err(Error::invalid("upper model without version_id"));
        }
        self.layout.validate()?;
        if self.heads.len() != self.head_kind.num_heads() {
            return Err(Error::invalid(format!(
                "{:?} model needs {} heads, found {}",
                self.head_kind,
                self.head_kind.num_heads(),
                self.heads.len()
            )));
        }
        let n = self.layout.feature_dim();
        for h in &self.heads {
            if h.weights.len() != n {
                return Err(Error::invalid(format!("head has {} weights, layout needs {n}", h.weights.len())));
            }
            if !h.bias.is_finite() || h.weights.iter().any(|w| !w.is_finite()) {
                return Err(Error::invalid("non-finite weight"));
            }
        }
        Ok(())
    }

    /// Scores one (user, pin) payload: each table contributes exactly one row.
    pub fn score(
        &self,
        embeddings: &BTreeMap<String, Vec<Vec<f32>>>,
        dense: &[f32],
    ) -> std::result::Result<Scores, String> {
        for slot in &self.layout.tables {
            match embeddings.get(&slot.name) {
                Some(rows) if rows.len() == 1 => {}
                Some(rows) => return Err(format!("table {} carries {} rows, expected 1", slot.name, rows.len())),
                None => return Err(format!("missing embeddings for table {}", slot.name)),
            }
        }
        let x = self
            .layout
            .features(|name| embeddings.get(name).map(|rows| rows[0].as_slice()), dense)?;
        Ok(self.score_features(&x))
    }

    pub fn score_features(&self, x: &[f32]) -> Scores {
        match self.head_kind {
            HeadKind::Ctr => Scores::Ctr(self.heads[0].predict(x)),
            HeadKind::Cvr => Scores::Cvr {
                ccvr: self.heads[0].predict(x),
                vtcvr: self.heads[1].predict(x),
            },
        }
    }

    /// Short content hash of the weights, used to prove which model scored.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("model serializes");
        let digest = Sha256::digest(&bytes);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let read = || -> Result<Self> {
            let model: UpperModel = serde_json::from_slice(&fs::read(path)?)?;
            model.validate()?;
            Ok(model)
        };
        read().map_err(|e| Error::load(path, e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Conversion utility: `ctr * ccvr + vtcvr`, clamped to [0, 1].
pub fn combine_utility(ctr: f64, ccvr: f64, vtcvr: f64) -> Result<f64> {
    for (name, v) in [("ctr", ctr), ("ccvr", ccvr), ("vtcvr", vtcvr)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("{name} = {v} is outside [0, 1]")));
        }
    }
    Ok((ctr * ccvr + vtcvr).clamp(0.0, 1.0))
}
