//! Parameter storage, layers and the optimizer.

pub mod layers;
pub mod optim;
pub mod params;

pub use layers::{instance_norm, Conv2d, GroupNorm, Padding};
pub use optim::Adam;
pub use params::{ParamStore, Session};
