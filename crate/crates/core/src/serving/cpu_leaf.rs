//! The embedding service: hosts one versioned embedding model and answers
//! lookups with the version that produced them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use async_trait::async_trait;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::transport::Handler;
use super::wire::{error_body, request_id_of, ServiceError};
use crate::error::{Error, Result};
use crate::shardplan::ShardedTable;
use crate::tables::{EmbeddingTable, EntityId, LookupResult};

pub const MANIFEST_FILE: &str = "manifest.json";

/// `{"version_id": .., "tables": {name: relative_path}}`. A path ending in
/// `.json` names a shard plan, anything else a single PEMB file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version_id: String,
    pub tables: BTreeMap<String, String>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let read = || -> Result<Self> { Ok(serde_json::from_slice(&fs::read(&path)?)?) };
        read().map_err(|e| Error::load(&path, e))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    fn table_paths<'a>(&'a self, dir: &'a Path) -> impl Iterator<Item = (&'a String, PathBuf)> + 'a {
        self.tables.iter().map(move |(name, rel)| (name, dir.join(rel)))
    }

    /// On-disk bytes of every table file, shard files included.
    pub fn disk_bytes(&self, dir: &Path) -> Result<u64> {
        let mut total = 0;
        for (_, path) in self.table_paths(dir) {
            total += fs::metadata(&path).map_err(|e| Error::load(&path, e.into()))?.len();
            if is_plan(&path) {
                let stem = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                let prefix = stem.trim_end_matches(".plan.json");
                for entry in fs::read_dir(path.parent().unwrap_or(Path::new(".")))? {
                    let entry = entry?;
                    let name = entry.file_name();
                    let name = name.to_string_lossy();
                    if name.starts_with(&format!("{prefix}.shard")) && name.ends_with(".pemb") {
                        total += entry.metadata()?.len();
                    }
                }
            }
        }
        Ok(total)
    }
}

fn is_plan(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "json")
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelTable {
    Single(EmbeddingTable),
    Sharded(ShardedTable),
}

impl ModelTable {
    pub fn version_id(&self) -> &str {
        match self {
            ModelTable::Single(t) => t.version_id(),
            ModelTable::Sharded(t) => t.version_id(),
        }
    }

    pub fn lookup(&self, ids: &[EntityId]) -> Result<LookupResult> {
        match self {
            ModelTable::Single(t) => Ok(t.lookup(ids)),
            ModelTable::Sharded(t) => t.lookup(ids),
        }
    }

    pub fn payload_bytes(&self) -> usize {
        match self {
            ModelTable::Single(t) => t.payload_bytes(),
            ModelTable::Sharded(t) => t.payload_bytes(),
        }
    }
}

/// All tables of one embedding-model version.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub version_id: String,
    pub tables: BTreeMap<String, ModelTable>,
}

pub type Embeddings = BTreeMap<String, Vec<Vec<f32>>>;

impl EmbeddingModel {
    /// Loads and validates every table named by `dir/manifest.json`.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::read(dir)?;
        if manifest.version_id.is_empty() {
            return Err(Error::Integrity("manifest has an empty version_id".into()));
        }
        let mut tables = BTreeMap::new();
        for (name, path) in manifest.table_paths(dir) {
            let table = if is_plan(&path) {
                ModelTable::Sharded(ShardedTable::load(&path)?)
            } else {
                ModelTable::Single(EmbeddingTable::load(&path)?)
            };
            if table.version_id() != manifest.version_id {
                return Err(Error::Integrity(format!(
                    "table {name} has version {} but the manifest says {}",
                    table.version_id(),
                    manifest.version_id
                )));
            }
            tables.insert(name.clone(), table);
        }
        Ok(Self {
            version_id: manifest.version_id,
            tables,
        })
    }

    pub fn payload_bytes(&self) -> u64 {
        self.tables.values().map(|t| t.payload_bytes() as u64).sum()
    }

    pub fn lookup(&self, ids: &BTreeMap<String, Vec<EntityId>>) -> std::result::Result<Embeddings, ServiceError> {
        let mut out = BTreeMap::new();
        for (name, list) in ids {
            let table = self
                .tables
                .get(name)
                .ok_or_else(|| ServiceError::new("unknown_table", format!("unknown table '{name}'")))?;
            let result = table.lookup(list).map_err(|e| ServiceError::internal(e.to_string()))?;
            out.insert(name.clone(), result.rows().map(<[f32]>::to_vec).collect());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CpuLeafConfig {
    /// Upper bound on current plus incoming model bytes, checked before a
    /// load starts.
    pub memory_budget_bytes: Option<u64>,
    /// Read model files on the calling task instead of a blocking thread.
    /// Simulations use this so a load takes no virtual time.
    pub load_inline: bool,
}

pub struct CpuLeaf {
    current: RwLock<Option<Arc<EmbeddingModel>>>,
    load_lock: tokio::sync::Mutex<()>,
    config: CpuLeafConfig,
    switches: AtomicU64,
}

impl CpuLeaf {
    pub fn new(config: CpuLeafConfig) -> Self {
        Self {
            current: RwLock::new(None),
            load_lock: tokio::sync::Mutex::new(()),
            config,
            switches: AtomicU64::new(0),
        }
    }

    pub fn version(&self) -> Option<String> {
        self.current.read().as_ref().map(|m| m.version_id.clone())
    }

    /// Incremented on every model switch.
    pub fn switch_count(&self) -> u64 {
        self.switches.load(Ordering::SeqCst)
    }

    pub fn snapshot(&self) -> Option<Arc<EmbeddingModel>> {
        self.current.read().clone()
    }

    /// Loads `dir` beside the serving model and swaps it in atomically.
    /// Loading the version already served is a no-op. On any error the
    /// previous model keeps serving.
    pub async fn load_model(&self, dir: impl Into<PathBuf>) -> Result<String> {
        let dir = dir.into();
        let _guard = self.load_lock.lock().await;
        let manifest = Manifest::read(&dir)?;
        if self.version().as_deref() == Some(manifest.version_id.as_str()) {
            return Ok(manifest.version_id);
        }
        if let Some(budget) = self.config.memory_budget_bytes {
            let incoming = manifest.disk_bytes(&dir)?;
            let resident = self.snapshot().map_or(0, |m| m.payload_bytes());
            if resident + incoming > budget {
                return Err(Error::invalid(format!(
                    "loading {} needs {incoming} bytes beside {resident} resident, budget is {budget}",
                    manifest.version_id
                )));
            }
        }
        let model = if self.config.load_inline {
            EmbeddingModel::load(&dir)?
        } else {
            tokio::task::spawn_blocking(move || EmbeddingModel::load(&dir))
                .await
                .map_err(|e| Error::invalid(format!("load task failed: {e}")))??
        };
        let version = model.version_id.clone();
        self.install(model);
        Ok(version)
    }

    /// Makes `model` the serving model.
    pub fn install(&self, model: EmbeddingModel) {
        let mut cur = self.current.write();
        *cur = Some(Arc::new(model));
        self.switches.fetch_add(1, Ordering::SeqCst);
    }

    /// Looks up every requested table against one model snapshot.
    pub fn generate_embeddings(
        &self,
        ids: &BTreeMap<String, Vec<EntityId>>,
    ) -> std::result::Result<(String, Embeddings), ServiceError> {
        let model = self
            .snapshot()
            .ok_or_else(|| ServiceError::new("no_model", "no embedding model loaded"))?;
        Ok((model.version_id.clone(), model.lookup(ids)?))
    }
}

#[derive(Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum CpuRequest {
    GenerateEmbeddings {
        request_id: String,
        ids: BTreeMap<String, Vec<u64>>,
    },
    LoadModel {
        path: PathBuf,
    },
    Status {},
}

fn load_error(e: &Error) -> ServiceError {
    let mut root = e;
    while let Error::Load { source, .. } = root {
        root = source;
    }
    let code = match root {
        Error::Integrity(_) => "integrity",
        Error::InvalidArgument(_) => "bad_request",
        _ => "load_failed",
    };
    ServiceError::new(code, e.to_string())
}

#[async_trait]
impl Handler for CpuLeaf {
    async fn handle(&self, request: Value) -> Value {
        let rid = request_id_of(&request).map(str::to_string);
        let parsed: CpuRequest = match serde_json::from_value(request) {
            Ok(r) => r,
            Err(e) => return error_body(rid.as_deref(), &ServiceError::bad_request(e.to_string())),
        };
        match parsed {
            CpuRequest::GenerateEmbeddings { request_id, ids } => {
                let ids = ids
                    .into_iter()
                    .map(|(k, v)| (k, v.into_iter().map(EntityId).collect()))
                    .collect();
                match self.generate_embeddings(&ids) {
                    Ok((version_id, embeddings)) => json!({
                        "request_id": request_id,
                        "version_id": version_id,
                        "embeddings": embeddings,
                    }),
                    Err(e) => error_body(Some(&request_id), &e),
                }
            }
            CpuRequest::LoadModel { path } => match self.load_model(path).await {
                Ok(v) => json!({ "version_id": v }),
                Err(e) => error_body(rid.as_deref(), &load_error(&e)),
            },
            CpuRequest::Status {} => json!({ "version_id": self.version() }),
        }
    }
}
