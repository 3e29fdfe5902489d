//! Python bindings for `lemb-core`.
//!
//! Exposes the table format, quantization, sharding and the scalar
//! building blocks (hashing, AUC, TransE, InfoNCE, utility). Errors from the
//! core surface as `ValueError`, or `OSError` for filesystem failures.

use lemb_core::pretrain::{infonce_loss as core_infonce, transe_score as core_transe};
use lemb_core::quant::{f16_payload_bytes, quantize_int4, size_report as core_size_report};
use lemb_core::shardplan::{plan_shards as core_plan_shards, route_lookup, split_table, ShardPlan, ShardStrategy};
use lemb_core::{metrics, scorer, tables, EmbeddingTable, EntityId, Error};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn ids_of(ids: &[u64]) -> Vec<EntityId> {
    ids.iter().copied().map(EntityId).collect()
}

fn parse_strategy(s: &str) -> PyResult<ShardStrategy> {
    match s.to_ascii_lowercase().as_str() {
        "contiguous" => Ok(ShardStrategy::Contiguous),
        "modulo" => Ok(ShardStrategy::Modulo),
        other => Err(PyValueError::new_err(format!("unknown shard strategy {other:?}"))),
    }
}

#[pyfunction]
fn hash_to_row(id: u64, num_rows: usize) -> PyResult<usize> {
    tables::hash_to_row(EntityId(id), num_rows).map_err(to_py)
}

#[pyfunction]
fn expected_collision_fraction(n_ids: u64, num_rows: u64) -> PyResult<f64> {
    tables::expected_collision_fraction(n_ids, num_rows).map_err(to_py)
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    metrics::roc_auc(&scores, &labels).map_err(to_py)
}

#[pyfunction]
fn transe_score(head: Vec<f64>, relation: Vec<f64>, tail: Vec<f64>) -> PyResult<f64> {
    core_transe(&head, &relation, &tail).map_err(to_py)
}

/// Returns `(loss, grad_anchor, grad_positive, grad_negatives)`.
#[pyfunction]
#[pyo3(signature = (anchor, positive, negatives, temperature = 0.1))]
fn infonce_loss(
    anchor: Vec<f64>,
    positive: Vec<f64>,
    negatives: Vec<Vec<f64>>,
    temperature: f64,
) -> PyResult<(f64, Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
    let r = core_infonce(&anchor, &positive, &negatives, temperature).map_err(to_py)?;
    Ok((r.loss, r.grad_anchor, r.grad_positive, r.grad_negatives))
}

#[pyfunction]
fn combine_utility(ctr: f64, ccvr: f64, vtcvr: f64) -> PyResult<f64> {
    scorer::combine_utility(ctr, ccvr, vtcvr).map_err(to_py)
}

#[pyclass(name = "ShardPlan", frozen)]
struct PyShardPlan(ShardPlan);

#[pymethods]
impl PyShardPlan {
    #[getter]
    fn num_shards(&self) -> usize {
        self.0.num_shards
    }

    #[getter]
    fn strategy(&self) -> &'static str {
        match self.0.strategy {
            ShardStrategy::Contiguous => "contiguous",
            ShardStrategy::Modulo => "modulo",
        }
    }

    /// `(shard, local_row)` holding global row `row`.
    fn owner(&self, row: usize) -> PyResult<(usize, usize)> {
        if row >= self.0.num_rows {
            return Err(PyValueError::new_err(format!("row {row} out of range")));
        }
        Ok(self.0.owner(row))
    }

    fn shard_rows(&self, shard: usize) -> PyResult<usize> {
        if shard >= self.0.num_shards {
            return Err(PyValueError::new_err(format!("shard {shard} out of range")));
        }
        Ok(self.0.shard_rows(shard))
    }

    fn __repr__(&self) -> String {
        format!(
            "ShardPlan(num_rows={}, dim={}, num_shards={}, strategy={:?})",
            self.0.num_rows,
            self.0.dim,
            self.0.num_shards,
            self.strategy()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (num_rows, dim, bytes_per_row, shard_budget_bytes, strategy = "contiguous"))]
fn plan_shards(
    num_rows: usize,
    dim: usize,
    bytes_per_row: usize,
    shard_budget_bytes: usize,
    strategy: &str,
) -> PyResult<PyShardPlan> {
    let strategy = parse_strategy(strategy)?;
    core_plan_shards(num_rows, dim, bytes_per_row, shard_budget_bytes, strategy)
        .map(PyShardPlan)
        .map_err(to_py)
}

/// A versioned embedding table in F32, F16 or INT4 storage.
#[pyclass(name = "EmbeddingTable", frozen)]
struct PyTable(EmbeddingTable);

#[pymethods]
impl PyTable {
    /// Builds an F32 table from a flat row-major list.
    #[new]
    fn new(table_id: String, version_id: String, num_rows: usize, dim: usize, data: Vec<f32>) -> PyResult<Self> {
        EmbeddingTable::from_f32(table_id, version_id, num_rows, dim, data)
            .map(Self)
            .map_err(to_py)
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        EmbeddingTable::load(path).map(Self).map_err(to_py)
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        self.0.save(path).map_err(to_py)
    }

    #[getter]
    fn table_id(&self) -> &str {
        self.0.table_id()
    }

    #[getter]
    fn version_id(&self) -> &str {
        self.0.version_id()
    }

    #[getter]
    fn num_rows(&self) -> usize {
        self.0.num_rows()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn dtype(&self) -> &'static str {
        match self.0.dtype() {
            tables::Dtype::F32 => "f32",
            tables::Dtype::F16 => "f16",
            tables::Dtype::Int4q => "int4q",
        }
    }

    #[getter]
    fn payload_bytes(&self) -> usize {
        self.0.payload_bytes()
    }

    /// Returns `(rows, collided)` for the given ids, in query order.
    fn lookup(&self, ids: Vec<u64>) -> (Vec<Vec<f32>>, Vec<bool>) {
        let r = self.0.lookup(&ids_of(&ids));
        (r.rows().map(<[f32]>::to_vec).collect(), r.collided)
    }

    /// Routed lookup over `plan`'s shards; equal to `lookup` by construction.
    fn sharded_lookup(&self, plan: &PyShardPlan, ids: Vec<u64>) -> PyResult<Vec<Vec<f32>>> {
        let shards = split_table(&plan.0, &self.0).map_err(to_py)?;
        let r = route_lookup(&plan.0, &shards, &ids_of(&ids)).map_err(to_py)?;
        Ok(r.rows().map(<[f32]>::to_vec).collect())
    }

    fn row(&self, row: usize) -> PyResult<Vec<f32>> {
        self.0.row(row).map_err(to_py)
    }

    fn to_f16(&self) -> PyResult<Self> {
        self.0.to_f16().map(Self).map_err(to_py)
    }

    #[pyo3(signature = (group_size = 64))]
    fn quantize(&self, group_size: usize) -> PyResult<Self> {
        quantize_int4(&self.0, group_size)
            .map(|q| Self(q.into_table()))
            .map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "EmbeddingTable(table_id={:?}, version_id={:?}, num_rows={}, dim={}, dtype={:?})",
            self.0.table_id(),
            self.0.version_id(),
            self.0.num_rows(),
            self.0.dim(),
            self.dtype()
        )
    }
}

/// `(quantized_bytes, ratio)` of an INT4 table against its F16 baseline.
#[pyfunction]
fn size_report(table: &PyTable) -> PyResult<(u64, f64)> {
    let q = lemb_core::quant::QuantizedTable::from_table(table.0.clone()).map_err(to_py)?;
    let baseline = f16_payload_bytes(table.0.num_rows(), table.0.dim());
    let r = core_size_report(baseline, &q).map_err(to_py)?;
    Ok((r.quantized_bytes, r.ratio))
}

#[pymodule]
fn lemb(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTable>()?;
    m.add_class::<PyShardPlan>()?;
    m.add_function(wrap_pyfunction!(hash_to_row, m)?)?;
    m.add_function(wrap_pyfunction!(expected_collision_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(transe_score, m)?)?;
    m.add_function(wrap_pyfunction!(infonce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(combine_utility, m)?)?;
    m.add_function(wrap_pyfunction!(plan_shards, m)?)?;
    m.add_function(wrap_pyfunction!(size_report, m)?)?;
    Ok(())
}
