//! Depth-recurrent attention mixtures: a small autodiff engine, the attention
//! and routing primitives, the dreamer layer with its caches, the cost model
//! and matcher, a training harness and the routing analysis suite.

pub mod analysis;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod params;
pub mod routing;
pub mod tensor;
pub mod train;

pub use config::{Composition, ModelConfig, Variant};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::Model;
pub use tensor::{Scalar, Tensor};
