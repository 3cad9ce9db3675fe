//! Layers and the residual feature extractor.

mod backbone;
mod layers;
mod params;

pub use backbone::{Backbone, BackboneConfig};
pub use layers::{kaiming, BatchNorm2d, Conv2d, Forward, Linear, Mode, ResidualBlock, RunningStats};
pub use params::{Entry, ParamId, ParamStore};
