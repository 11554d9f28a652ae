pub mod attention;
pub mod autograd;
pub mod data;
pub mod detection;
pub mod discriminators;
pub mod error;
pub mod generators;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
pub type TrainStateF32 = trainer::TrainState<f32>;
pub type TrainStateF64 = trainer::TrainState<f64>;
pub type ToyDetectorF32 = detection::ToyDetector<f32>;
pub type ToyDetectorF64 = detection::ToyDetector<f64>;
pub type GeneratorPairF32 = generators::GeneratorPair<f32>;
pub type GeneratorPairF64 = generators::GeneratorPair<f64>;
