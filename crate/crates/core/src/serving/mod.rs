//! Online serving: the embedding leaf, the scorer leaf, the ads server
//! that threads versions between them, and the deployer that rolls new
//! versions out.

pub mod ads_server;
pub mod cpu_leaf;
pub mod deployer;
pub mod gpu_leaf;
pub mod simnet;
pub mod transport;
pub mod wire;

pub use ads_server::{AdsServer, AdsServerConfig, InferRequest, PipelineMetrics};
pub use cpu_leaf::{CpuLeaf, CpuLeafConfig, EmbeddingModel, Manifest};
pub use deployer::{Deployer, DeployerConfig, DeploymentState, Phase, ReportEntry};
pub use gpu_leaf::{GpuLeaf, GpuLeafConfig};
pub use simnet::{LatencyDist, LinkConfig, SimLink};
pub use transport::{serve, Handler, LocalTransport, ServerHandle, SwitchTransport, TcpTransport, Transport, TransportError};
pub use wire::ServiceError;
