pub mod autodiff;
pub mod coordconv;
pub mod error;
pub mod grasp;
pub mod loss;
pub mod net;
pub mod pick;
pub mod scalar;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Scene64 = scene::Scene<f64>;
pub type Scene32 = scene::Scene<f32>;
pub type Model64 = net::Model<f64>;
pub type Model32 = net::Model<f32>;
pub type Grasp64 = grasp::GraspCandidate<f64>;
pub type Grasp32 = grasp::GraspCandidate<f32>;
