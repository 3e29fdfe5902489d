//! Large hashed embedding tables for ads ranking, end to end.
//!
//! The crate covers the offline side (contrastive and knowledge-graph
//! pretraining, fine-tuning, INT4 post-training quantization, row-wise
//! sharding) and the online side: an embedding service, a multi-version
//! scorer service and an orchestrator that threads the embedding version
//! through to scoring, plus a deployment controller that rolls paired
//! models out without ever letting the two disagree.

pub mod error;
pub mod harness;
pub mod metrics;
pub mod pretrain;
pub mod quant;
pub mod scorer;
pub mod serving;
pub mod shardplan;
pub mod tables;

pub use error::{Error, Result};
pub use tables::{EmbeddingTable, EntityId, LookupResult};
