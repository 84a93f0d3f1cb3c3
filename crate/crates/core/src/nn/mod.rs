//! Parameters, layers, optimiser and checkpoint files.

pub mod checkpoint;
mod layers;
mod optim;
mod params;

pub use layers::{Activation, Conv2d, ConvTranspose2d};
pub use optim::AdamState;
pub use params::{kaiming_uniform, ParamId, ParamStore};
