//! Knowledge tracing as dynamic link classification on a continuous-time
//! interaction graph.
//!
//! Students and questions are nodes; every answer is a timestamped edge
//! labelled correct or wrong. To score a pending answer the engine pulls the
//! latest answers of both endpoints, encodes each history position
//! (response, time gap, overlap with the pending link, concept), runs one GRU
//! per endpoint and classifies the pair with a small MLP.
//!
//! The numeric stack is generic over [`Scalar`] (`f32`/`f64`); the aliases at
//! the crate root fix it to `f64`, which is what training and the CLI use.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod param;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod towers;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Real = f64;
pub type Tensor = tensor::Tensor<Real>;
pub type Tape = tape::Tape<Real>;
pub type Parameter = param::Parameter<Real>;
pub type ParamStore = param::ParamStore<Real>;
pub type Model = model::DyGkt<Real>;
