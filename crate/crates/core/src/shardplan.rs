//! Row-wise sharding of a hashed table over simulated devices.
//!
//! Ids are hashed against the *unsharded* row count, the owning shard is
//! derived from the global row, and results are gathered back in query
//! order, so a routed lookup is indistinguishable from a plain one.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tables::{collision_flags, row_for, EmbeddingTable, EntityId, LookupResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShardStrategy {
    /// Balanced consecutive row ranges.
    #[default]
    Contiguous,
    /// Row `r` lives on shard `r % num_shards`.
    Modulo,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardPlan {
    pub num_rows: usize,
    pub dim: usize,
    pub num_shards: usize,
    pub strategy: ShardStrategy,
    /// Half-open `[start, end)` per shard; empty for MODULO.
    #[serde(default)]
    pub ranges: Vec<(usize, usize)>,
}

/// Sizes the plan so each shard stays within `shard_budget_bytes`.
pub fn plan_shards(
    num_rows: usize,
    dim: usize,
    bytes_per_row: usize,
    shard_budget_bytes: usize,
    strategy: ShardStrategy,
) -> Result<ShardPlan> {
    if bytes_per_row == 0 || shard_budget_bytes < bytes_per_row {
        return Err(Error::invalid(format!(
            "shard budget {shard_budget_bytes} B cannot hold one {bytes_per_row} B row"
        )));
    }
    let total = (num_rows as u128) * (bytes_per_row as u128);
    let num_shards = total.div_ceil(shard_budget_bytes as u128).max(1) as usize;
    ShardPlan::with_num_shards(num_rows, dim, num_shards, strategy)
}

impl ShardPlan {
    pub fn with_num_shards(
        num_rows: usize,
        dim: usize,
        num_shards: usize,
        strategy: ShardStrategy,
    ) -> Result<Self> {
        if num_rows == 0 || dim == 0 {
            return Err(Error::invalid("num_rows and dim must be positive"));
        }
        if num_shards == 0 || num_shards > num_rows {
            return Err(Error::invalid(format!(
                "cannot split {num_rows} rows into {num_shards} shards"
            )));
        }
        let ranges = match strategy {
            ShardStrategy::Contiguous => {
                let base = num_rows / num_shards;
                let extra = num_rows % num_shards;
                let mut start = 0;
                (0..num_shards)
                    .map(|k| {
                        let len = base + usize::from(k < extra);
                        let r = (start, start + len);
                        start += len;
                        r
                    })
                    .collect()
            }
            ShardStrategy::Modulo => Vec::new(),
        };
        Ok(Self {
            num_rows,
            dim,
            num_shards,
            strategy,
            ranges,
        })
    }

    /// `(shard, local row)` owning a global row.
    pub fn owner(&self, row: usize) -> (usize, usize) {
        match self.strategy {
            ShardStrategy::Modulo => (row % self.num_shards, row / self.num_shards),
            ShardStrategy::Contiguous => {
                let k = self.ranges.partition_point(|&(_, end)| end <= row);
                (k, row - self.ranges[k].0)
            }
        }
    }

    pub fn shard_rows(&self, shard: usize) -> usize {
        match self.strategy {
            ShardStrategy::Contiguous => self.ranges[shard].1 - self.ranges[shard].0,
            ShardStrategy::Modulo => {
                self.num_rows / self.num_shards + usize::from(shard < self.num_rows % self.num_shards)
            }
        }
    }

    /// Global rows owned by a shard, in local order.
    pub fn global_rows(&self, shard: usize) -> Vec<usize> {
        match self.strategy {
            ShardStrategy::Contiguous => (self.ranges[shard].0..self.ranges[shard].1).collect(),
            ShardStrategy::Modulo => (shard..self.num_rows).step_by(self.num_shards).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rebuilt = Self::with_num_shards(self.num_rows, self.dim, self.num_shards, self.strategy)?;
        if rebuilt.ranges != self.ranges {
            return Err(Error::Integrity("shard ranges are not a balanced partition".into()));
        }
        Ok(())
    }
}

fn shard_table_id(table_id: &str, shard: usize) -> String {
    format!("{table_id}.shard{shard}")
}

/// Splits a table into per-shard tables following `plan`.
pub fn split_table(plan: &ShardPlan, table: &EmbeddingTable) -> Result<Vec<EmbeddingTable>> {
    if plan.num_rows != table.num_rows() || plan.dim != table.dim() {
        return Err(Error::Integrity("plan does not match table shape".into()));
    }
    (0..plan.num_shards)
        .map(|k| {
            table.select_rows(&plan.global_rows(k), shard_table_id(table.table_id(), k))
        })
        .collect()
}

fn check_shards(plan: &ShardPlan, shards: &[EmbeddingTable]) -> Result<()> {
    if shards.len() != plan.num_shards {
        return Err(Error::Integrity(format!(
            "plan has {} shards, got {}",
            plan.num_shards,
            shards.len()
        )));
    }
    for (k, s) in shards.iter().enumerate() {
        if s.dim() != plan.dim || s.num_rows() != plan.shard_rows(k) {
            return Err(Error::Integrity(format!(
                "shard {k} is {}x{}, plan expects {}x{}",
                s.num_rows(),
                s.dim(),
                plan.shard_rows(k),
                plan.dim
            )));
        }
        if s.version_id() != shards[0].version_id() {
            return Err(Error::Integrity("shards disagree on version_id".into()));
        }
    }
    Ok(())
}

/// Lookup across shards; bitwise equal to `lookup` on the unsharded table.
pub fn route_lookup(plan: &ShardPlan, shards: &[EmbeddingTable], ids: &[EntityId]) -> Result<LookupResult> {
    check_shards(plan, shards)?;
    let dim = plan.dim;
    let global: Vec<usize> = ids.iter().map(|&id| row_for(id, plan.num_rows)).collect();

    // per shard: (query positions, local rows)
    let mut buckets: Vec<(Vec<usize>, Vec<usize>)> = vec![(Vec::new(), Vec::new()); plan.num_shards];
    for (pos, &row) in global.iter().enumerate() {
        let (k, local) = plan.owner(row);
        buckets[k].0.push(pos);
        buckets[k].1.push(local);
    }

    let mut embeddings = vec![0.0f32; ids.len() * dim];
    for (shard, (positions, locals)) in shards.iter().zip(&buckets) {
        let rows = shard.gather_rows(locals);
        for (i, &pos) in positions.iter().enumerate() {
            embeddings[pos * dim..(pos + 1) * dim].copy_from_slice(&rows[i * dim..(i + 1) * dim]);
        }
    }
    Ok(LookupResult {
        dim,
        embeddings,
        collided: collision_flags(ids, &global),
    })
}

/// A plan together with its shard tables.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardedTable {
    pub table_id: String,
    pub plan: ShardPlan,
    pub shards: Vec<EmbeddingTable>,
}

#[derive(Serialize, Deserialize)]
struct PlanDoc {
    table_id: String,
    version_id: String,
    #[serde(flatten)]
    plan: ShardPlan,
}

impl ShardedTable {
    pub fn new(plan: ShardPlan, table: &EmbeddingTable) -> Result<Self> {
        let shards = split_table(&plan, table)?;
        Ok(Self {
            table_id: table.table_id().to_string(),
            plan,
            shards,
        })
    }

    pub fn version_id(&self) -> &str {
        self.shards[0].version_id()
    }

    pub fn lookup(&self, ids: &[EntityId]) -> Result<LookupResult> {
        route_lookup(&self.plan, &self.shards, ids)
    }

    pub fn payload_bytes(&self) -> usize {
        self.shards.iter().map(EmbeddingTable::payload_bytes).sum()
    }

    /// Writes `<table_id>.plan.json` and `<table_id>.shard<k>.pemb` into
    /// `dir`; returns the plan path.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        for (k, shard) in self.shards.iter().enumerate() {
            shard.save(dir.join(format!("{}.shard{k}.pemb", self.table_id)))?;
        }
        let doc = PlanDoc {
            table_id: self.table_id.clone(),
            version_id: self.version_id().to_string(),
            plan: self.plan.clone(),
        };
        let path = dir.join(format!("{}.plan.json", self.table_id));
        fs::write(&path, serde_json::to_vec_pretty(&doc)?)?;
        Ok(path)
    }

    pub fn load(plan_path: impl AsRef<Path>) -> Result<Self> {
        let plan_path = plan_path.as_ref();
        let doc: PlanDoc = serde_json::from_slice(&fs::read(plan_path)?)
            .map_err(|e| Error::load(plan_path, e.into()))?;
        doc.plan.validate()?;
        let dir = plan_path.parent().unwrap_or(Path::new("."));
        let shards = (0..doc.plan.num_shards)
            .map(|k| EmbeddingTable::load(dir.join(format!("{}.shard{k}.pemb", doc.table_id))))
            .collect::<Result<Vec<_>>>()?;
        check_shards(&doc.plan, &shards)?;
        if shards[0].version_id() != doc.version_id {
            return Err(Error::Integrity(format!(
                "plan {} names version {}, shards carry {}",
                plan_path.display(),
                doc.version_id,
                shards[0].version_id()
            )));
        }
        Ok(Self {
            table_id: doc.table_id,
            plan: doc.plan,
            shards,
        })
    }
}
