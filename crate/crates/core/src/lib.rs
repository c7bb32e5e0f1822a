pub mod codebook;
pub mod error;
pub mod probability;
pub mod tensor;
pub mod range_coder;
pub mod context;
pub mod synth;
pub mod autodiff;
pub mod hyperprior;
pub mod params;
mod wire;
pub mod bitstream;
pub mod pipeline;
pub mod harness;

pub use bitstream::{Container, Ratios, RoutingMask};
pub use codebook::{Codebook, FeatureGrid, Granularity, IndexGrid};
pub use error::{Error, Result};
pub use hyperprior::{HyperConfig, HyperParams};
pub use pipeline::{CodecOptions, Model, ModelConfig};
pub use probability::{CategoricalField, GaussianField};
pub use range_coder::QuantizedCdf;
pub use tensor::Tensor;
