//! Core algorithms for serving a transformer as a swarm of block servers:
//! the toy model and its backward pass, int8 quantization, block allocation,
//! the announcement registry, chain routing, and the binary wire format.

pub mod allocation;
pub mod error;
pub mod footprint;
pub mod model;
pub mod ops;
pub mod quant;
#[cfg(any(test, feature = "reference"))]
pub mod reference;
pub mod registry;
pub mod rng;
pub mod routing;
pub mod tensor;
pub mod tuning;
pub mod wire;

pub use allocation::{BlockRange, SwarmServer, SwarmView};
pub use error::{Error, Result};
pub use model::{Checkpoint, Model, ModelConfig};
pub use registry::{RegistrySnapshot, ServerEntry, ServerId, ServerState};
pub use routing::HopPlan;
pub use tensor::Tensor;
pub use tuning::PromptTuneState;
