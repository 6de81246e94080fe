pub mod data;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod scalar;
pub mod span;
pub mod syntax;
pub mod tensor;
pub mod training;
pub mod treebank;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use span::Span;

/// Double-precision instantiations used by the command-line tools and tests.
pub type Tensor = tensor::Tensor<f64>;
pub type Graph = tensor::Graph<f64>;
pub type ParamStore = tensor::ParamStore<f64>;
pub type Model = model::StructureLm<f64>;
pub type PhraseSegmentation = syntax::PhraseSegmentation<f64>;
pub type ActivationValues = encoder::ActivationValues<f64>;
