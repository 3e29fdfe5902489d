//! Embedding pretraining, fine-tuning and the ablation experiments.
//!
//! Two pretraining objectives fill the large tables before they reach the
//! ranking model: InfoNCE over user-pin engagements with in-batch and
//! sampled out-of-batch negatives, and TransE link prediction over a
//! heterogeneous graph. All trainers are single-threaded plain SGD in f64
//! and bitwise reproducible from their seed.

pub mod contrastive;
pub mod experiment;
pub mod finetune;
pub mod kge;
pub mod synth;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tables::{EmbeddingTable, EntityId};

pub use contrastive::{contrastive_pretrain, infonce_loss, InfoNce};
pub use experiment::{
    run_benchmark, run_benchmark_seeds, staleness_experiment, BenchmarkConfig, BenchmarkResult, BenchmarkSummary,
    StalenessConfig, StalenessResult,
};
pub use finetune::{evaluate_auc, finetune, DownstreamModel, FinetuneConfig, LabeledExample};
pub use kge::{kge_pretrain, link_prediction_eval, margin_ranking_loss, transe_score, KgeModel, LinkPredOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InteractionKind {
    Click,
    Conversion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: EntityId,
    pub pin_id: EntityId,
    pub kind: InteractionKind,
    /// Seconds since the epoch.
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityType {
    User,
    Pin,
    Advertiser,
    ImageSig,
    Item,
}

impl EntityType {
    pub const ALL: [EntityType; 5] = [
        EntityType::User,
        EntityType::Pin,
        EntityType::Advertiser,
        EntityType::ImageSig,
        EntityType::Item,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EntityType::User => "user",
            EntityType::Pin => "pin",
            EntityType::Advertiser => "advertiser",
            EntityType::ImageSig => "image_sig",
            EntityType::Item => "item",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Engaged,
    Converted,
    BelongsTo,
    Depicts,
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::Engaged,
        Relation::Converted,
        Relation::BelongsTo,
        Relation::Depicts,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Relation::Engaged => "engaged",
            Relation::Converted => "converted",
            Relation::BelongsTo => "belongs_to",
            Relation::Depicts => "depicts",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Entity {
    pub kind: EntityType,
    pub id: EntityId,
}

impl Entity {
    pub fn new(kind: EntityType, id: u64) -> Self {
        Self { kind, id: EntityId(id) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgTriple {
    pub head: Entity,
    pub relation: Relation,
    pub tail: Entity,
}

impl KgTriple {
    pub fn new(head: Entity, relation: Relation, tail: Entity) -> Result<Self> {
        if head == tail {
            return Err(Error::Data(format!("self-loop triple on {head}")));
        }
        Ok(Self { head, relation, tail })
    }
}

macro_rules! name_parse {
    ($ty:ty, $what:literal) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                <$ty>::ALL
                    .into_iter()
                    .find(|v| v.name() == s)
                    .ok_or_else(|| Error::Data(format!("unknown {} '{s}'", $what)))
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

name_parse!(EntityType, "entity type");
name_parse!(Relation, "relation");

impl fmt::Display for Entity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.id.0)
    }
}

impl FromStr for Entity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (kind, id) = s
            .split_once(':')
            .ok_or_else(|| Error::Data(format!("expected type:id, got '{s}'")))?;
        let id = id
            .parse::<u64>()
            .map_err(|_| Error::Data(format!("bad entity id '{id}'")))?;
        Ok(Entity::new(kind.parse()?, id))
    }
}

fn parse_u64(field: &str, what: &str, line: usize) -> Result<u64> {
    field
        .parse()
        .map_err(|_| Error::Data(format!("line {line}: bad {what} '{field}'")))
}

/// Parses `user_id\tpin_id\tkind\ttimestamp` lines. Blank lines and `#`
/// comments are skipped.
pub fn parse_interactions(text: &str) -> Result<Vec<InteractionRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::Data(format!("line {line_no}: expected 4 fields, got {}", f.len())));
        }
        let kind = match f[2] {
            "click" => InteractionKind::Click,
            "conversion" => InteractionKind::Conversion,
            other => return Err(Error::Data(format!("line {line_no}: unknown kind '{other}'"))),
        };
        out.push(InteractionRecord {
            user_id: EntityId(parse_u64(f[0], "user_id", line_no)?),
            pin_id: EntityId(parse_u64(f[1], "pin_id", line_no)?),
            kind,
            timestamp: parse_u64(f[3], "timestamp", line_no)?,
        });
    }
    Ok(out)
}

pub fn format_interactions(records: &[InteractionRecord]) -> String {
    records
        .iter()
        .map(|r| {
            let kind = match r.kind {
                InteractionKind::Click => "click",
                InteractionKind::Conversion => "conversion",
            };
            format!("{}\t{}\t{kind}\t{}\n", r.user_id.0, r.pin_id.0, r.timestamp)
        })
        .collect()
}

/// Parses `head_type:head_id\trelation\ttail_type:tail_id` lines.
pub fn parse_triples(text: &str) -> Result<Vec<KgTriple>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(Error::Data(format!("line {}: expected 3 fields, got {}", i + 1, f.len())));
        }
        let triple = KgTriple::new(f[0].parse()?, f[1].parse()?, f[2].parse()?)
            .map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?;
        out.push(triple);
    }
    Ok(out)
}

pub fn format_triples(triples: &[KgTriple]) -> String {
    triples
        .iter()
        .map(|t| format!("{}\t{}\t{}\n", t.head, t.relation, t.tail))
        .collect()
}

pub fn read_interactions(path: impl AsRef<Path>) -> Result<Vec<InteractionRecord>> {
    parse_interactions(&fs::read_to_string(path)?)
}

pub fn read_triples(path: impl AsRef<Path>) -> Result<Vec<KgTriple>> {
    parse_triples(&fs::read_to_string(path)?)
}

/// Pretraining hyperparameters. None of these are prescribed by the
/// method; defaults are desk-scale choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dim: usize,
    pub num_rows: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub temperature: f64,
    pub margin: f64,
    pub num_out_batch_negatives: usize,
    pub seed: u64,
    pub version_id: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            num_rows: 1 << 16,
            learning_rate: 0.05,
            batch_size: 64,
            epochs: 5,
            temperature: 0.1,
            margin: 1.0,
            num_out_batch_negatives: 16,
            seed: 0,
            version_id: "pretrained".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if self.dim == 0 || self.num_rows == 0 {
            return bad("dim and num_rows must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.temperature > 0.0) || !(self.margin > 0.0) {
            return bad("learning_rate, temperature and margin must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.version_id.is_empty() {
            return bad("version_id must be non-empty");
        }
        Ok(())
    }
}

/// Dense f64 row matrix used while training.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Matrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    /// Seeded uniform(-1/sqrt(dim), 1/sqrt(dim)) initialization.
    pub fn uniform(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let data = (0..rows * dim).map(|_| rng.random_range(-bound..bound)).collect();
        Self { rows, dim, data }
    }

    pub fn from_table(table: &EmbeddingTable) -> Self {
        Self {
            rows: table.num_rows(),
            dim: table.dim(),
            data: table.to_f32_vec().into_iter().map(f64::from).collect(),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn normalize_row(&mut self, r: usize) {
        let row = self.row_mut(r);
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|x| *x /= norm);
        }
    }

    pub fn to_table(&self, table_id: &str, version_id: &str) -> Result<EmbeddingTable> {
        EmbeddingTable::from_f32(
            table_id,
            version_id,
            self.rows,
            self.dim,
            self.data.iter().map(|&x| x as f32).collect(),
        )
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Row-keyed gradient accumulator with deterministic application order.
#[derive(Debug, Default)]
pub(crate) struct SparseGrad {
    pub rows: std::collections::BTreeMap<usize, Vec<f64>>,
}

impl SparseGrad {
    pub fn add(&mut self, row: usize, alpha: f64, g: &[f64]) {
        let acc = self.rows.entry(row).or_insert_with(|| vec![0.0; g.len()]);
        axpy(alpha, g, acc);
    }

    /// `m[row] -= lr * grad` for every touched row; returns the touched rows.
    pub fn apply(self, m: &mut Matrix, lr: f64) -> Vec<usize> {
        let mut touched = Vec::with_capacity(self.rows.len());
        for (row, g) in self.rows {
            axpy(-lr, &g, m.row_mut(row));
            touched.push(row);
        }
        touched
    }
}
