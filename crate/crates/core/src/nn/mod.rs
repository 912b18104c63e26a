//! Minimal differentiable building blocks shared by the VAE, world model and controller.

pub mod adam;
pub mod checkpoint;
pub mod early_stop;
pub mod gradcheck;
pub mod layers;
pub mod lstm;
pub mod params;

pub use adam::{Adam, AdamConfig};
pub use early_stop::{EarlyStopping, StopDecision};
pub use layers::{Activation, Conv2d, ConvGeometry, ConvTranspose2d, Dense, Layer, Sequential, Tape};
pub use lstm::{Lstm, LstmState, LstmTape};
pub use params::{ParamId, ParamSet};
