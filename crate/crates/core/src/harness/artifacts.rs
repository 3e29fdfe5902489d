//! Synthetic paired model versions written to disk for the services.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelSpec;
use crate::error::Result;
use crate::quant::quantize_int4;
use crate::scorer::{Layout, LogisticHead, Scores, TableSlot, UpperModel};
use crate::serving::cpu_leaf::{EmbeddingModel, Manifest};
use crate::serving::deployer::UPPER_MODEL_FILE;
use crate::shardplan::{ShardPlan, ShardedTable};
use crate::tables::{splitmix64_mix, EmbeddingTable, EntityId};

pub const USER_TABLE: &str = "user";
pub const PIN_TABLE: &str = "pin";

/// One version on disk plus in-memory copies for offline checks.
pub struct VersionArtifacts {
    pub version_id: String,
    pub dir: PathBuf,
    pub upper: UpperModel,
    pub fingerprint: String,
    pub embeddings: EmbeddingModel,
}

impl VersionArtifacts {
    /// Recomputes a score offline from the stored artifacts.
    pub fn score(&self, user: u64, pin: u64, dense: &[f32]) -> Result<Scores> {
        let ids = BTreeMap::from([
            (USER_TABLE.to_string(), vec![EntityId(user)]),
            (PIN_TABLE.to_string(), vec![EntityId(pin)]),
        ]);
        let emb = self
            .embeddings
            .lookup(&ids)
            .map_err(|e| crate::Error::Data(e.to_string()))?;
        self.upper.score(&emb, dense).map_err(crate::Error::Data)
    }
}

pub fn version_name(index: usize) -> String {
    format!("v{index:03}")
}

fn table(name: &str, version: &str, spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Result<EmbeddingTable> {
    let normal = Normal::new(0.0f32, 0.5).expect("valid");
    let data = (0..spec.num_rows * spec.dim).map(|_| normal.sample(rng)).collect();
    let t = EmbeddingTable::from_f32(name, version, spec.num_rows, spec.dim, data)?;
    match spec.int4_group_size {
        Some(g) => Ok(quantize_int4(&t, g)?.into_table()),
        None => Ok(t),
    }
}

/// Writes version `index` (tables, manifest and upper model) under `root`.
pub fn write_version(root: &Path, spec: &ModelSpec, seed: u64, index: usize) -> Result<VersionArtifacts> {
    let version = version_name(index);
    let dir = root.join(&version);
    fs::create_dir_all(&dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64_mix(seed ^ splitmix64_mix(index as u64 + 1)));

    let user = table(USER_TABLE, &version, spec, &mut rng)?;
    let pin = table(PIN_TABLE, &version, spec, &mut rng)?;
    let mut tables = BTreeMap::new();
    match spec.user_shards {
        Some(k) => {
            let plan = ShardPlan::with_num_shards(spec.num_rows, spec.dim, k, spec.shard_strategy)?;
            let path = ShardedTable::new(plan, &user)?.save(&dir)?;
            let rel = path.file_name().expect("file").to_string_lossy().into_owned();
            tables.insert(USER_TABLE.to_string(), rel);
        }
        None => {
            user.save(dir.join("user.pemb"))?;
            tables.insert(USER_TABLE.to_string(), "user.pemb".to_string());
        }
    }
    pin.save(dir.join("pin.pemb"))?;
    tables.insert(PIN_TABLE.to_string(), "pin.pemb".to_string());
    Manifest {
        version_id: version.clone(),
        tables,
    }
    .write(&dir)?;

    let layout = Layout {
        tables: vec![
            TableSlot {
                name: USER_TABLE.into(),
                dim: spec.dim,
            },
            TableSlot {
                name: PIN_TABLE.into(),
                dim: spec.dim,
            },
        ],
        dense_dim: spec.dense_dim,
    };
    let n = layout.feature_dim();
    let w = Normal::new(0.0f32, 0.3).expect("valid");
    let heads = (0..spec.head.num_heads())
        .map(|_| LogisticHead {
            weights: (0..n).map(|_| w.sample(&mut rng)).collect(),
            bias: w.sample(&mut rng),
        })
        .collect();
    let upper = UpperModel {
        version_id: version.clone(),
        head_kind: spec.head,
        layout,
        heads,
    };
    upper.save(dir.join(UPPER_MODEL_FILE))?;
    let embeddings = EmbeddingModel::load(&dir)?;
    Ok(VersionArtifacts {
        fingerprint: upper.fingerprint(),
        version_id: version,
        dir,
        upper,
        embeddings,
    })
}
