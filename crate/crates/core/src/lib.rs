//! Detection and grounding of multi-modal (image + text) media manipulation
//! with a frequency-assisted transformer.

pub mod backbones;
pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod exec;
pub mod famm;
pub mod frequency;
pub mod gradcheck;
pub mod graph;
pub mod heads;
pub mod losses;
mod kernels;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod saliency;
pub mod selftest;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use error::{Error, Result};
pub use graph::{Fault, Graph, Mask, Var};
pub use params::ParamStore;
pub use rng::Rng;
pub use tensor::{Precision, Scalar, Tensor};
