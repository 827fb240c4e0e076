//! Federated-learning simulator: a genuine server/client round protocol with
//! percentile-based partial update sharing, four heterogeneous-optimization
//! methods (FedAvg, FedProx, DTP, DWA), and a synthetic multi-task
//! segmentation benchmark with three heterogeneous clients.

pub mod client;
pub mod datagen;
pub mod error;
pub mod experiments;
pub mod model;
pub mod param_math;
pub mod server;
pub mod transport;

pub use error::{FedSimError, Result};
pub use param_math::{ParamVector, SparseUpdate};
