//! Concept-modulated world models at desk scale.
//!
//! A toy top-down driving simulator feeds a convolutional VAE and a
//! mixture-density LSTM world model. Action-salient image patches are clustered
//! into visual concepts that condition the world model, and PPO controllers are
//! trained online (model-free) or inside dreamed rollouts (model-based and
//! concept-modulated).

pub mod concepts;
pub mod controller;
pub mod dream;
pub mod env;
pub mod episodes;
pub mod error;
pub mod harness;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod vae;
pub mod verify;
pub mod worldmodel;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamSet32 = nn::ParamSet<f32>;
pub type ParamSet64 = nn::ParamSet<f64>;
pub type Vae32 = vae::Vae<f32>;
pub type Vae64 = vae::Vae<f64>;
pub type Mdn32 = worldmodel::Mdn<f32>;
pub type Mdn64 = worldmodel::Mdn<f64>;
pub type ConceptModel32 = concepts::ConceptModel<f32>;
pub type ConceptModel64 = concepts::ConceptModel<f64>;
pub type Controller32 = controller::Controller<f32>;
pub type Controller64 = controller::Controller<f64>;
pub type PpoTrainer32 = controller::PpoTrainer<f32>;
pub type PpoTrainer64 = controller::PpoTrainer<f64>;
