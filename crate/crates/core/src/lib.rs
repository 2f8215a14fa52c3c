//! Bayesian federated learning with the IVON variational optimizer.
//!
//! Clients fit diagonal Gaussian posteriors to their local data with IVON,
//! a server fuses them by precision-weighted product of Gaussians, and a
//! personalized variant keeps per-client posteriors anchored at the global
//! model. The crate also carries the data generators, non-IID partitioners,
//! calibration metrics and experiment runner used to exercise the protocol.

pub mod aggregation;
pub mod baseline;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod ivon;
pub mod metrics;
pub mod nn;
pub mod seed;

pub use aggregation::{aggregate, fedavg_aggregate, ClientContribution, GlobalModel};
pub use data::{Dataset, PartitionPlan};
pub use error::{Error, Result};
pub use federation::{Algorithm, ClientHandle, EvalData, Federation, FederationConfig, RoundHistory};
pub use ivon::{IvonConfig, IvonState, PriorSpec, VariationalPosterior};
pub use metrics::{MetricsRecord, PredictiveBatch};
pub use nn::{Activation, Batch, ModelSpec, ParamVector};
