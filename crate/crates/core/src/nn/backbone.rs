use rand::Rng;

use super::layers::{BatchNorm2d, Conv2d, Forward, ResidualBlock};
use super::params::ParamStore;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Shape of the residual feature extractor: a 3×3 stem followed by one
/// stage per entry of `widths`, each opening with a block of the given
/// stride.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub resolution: usize,
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    pub strides: Vec<usize>,
}

impl Default for BackboneConfig {
    /// Reduced four-stage layout for 32×32 inputs with a 4×4 final map.
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            resolution: 32,
            widths: vec![16, 32, 64, 128],
            blocks: vec![1, 1, 1, 1],
            strides: vec![1, 2, 2, 2],
        }
    }
}

impl BackboneConfig {
    /// Full-width ResNet18 layout (two blocks per stage).
    pub fn resnet18(in_channels: usize, resolution: usize) -> Self {
        BackboneConfig {
            in_channels,
            resolution,
            widths: vec![64, 128, 256, 512],
            blocks: vec![2, 2, 2, 2],
            strides: vec![1, 2, 2, 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.widths.len();
        if n == 0 || self.blocks.len() != n || self.strides.len() != n {
            return Err(Error::Config(format!(
                "backbone needs equal-length widths/blocks/strides, got {}/{}/{}",
                n,
                self.blocks.len(),
                self.strides.len()
            )));
        }
        if self.in_channels == 0 || self.resolution == 0 {
            return Err(Error::Config("backbone input channels and resolution must be positive".into()));
        }
        if self.widths.iter().chain(&self.blocks).chain(&self.strides).any(|&v| v == 0) {
            return Err(Error::Config("backbone widths, blocks and strides must be positive".into()));
        }
        self.out_resolution().map(|_| ())
    }

    /// Side length of the final feature map.
    pub fn out_resolution(&self) -> Result<usize> {
        let mut size = self.resolution;
        for (stage, &s) in self.strides.iter().enumerate() {
            if s > 1 && size < s {
                return Err(Error::Config(format!(
                    "resolution {} too small for {} stages: stage {stage} receives a {size}x{size} map",
                    self.resolution,
                    self.strides.len()
                )));
            }
            // 3×3, padding 1
            size = (size + 2 - 3) / s + 1;
        }
        Ok(size)
    }

    pub fn out_channels(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stem: Conv2d,
    pub stem_bn: BatchNorm2d,
    pub blocks: Vec<ResidualBlock>,
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        config: &BackboneConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let stem = Conv2d::new(store, "stem.conv", config.in_channels, config.widths[0], 3, 1, 1, false, rng);
        let stem_bn = BatchNorm2d::new(store, "stem.bn", config.widths[0]);
        let mut blocks = Vec::new();
        let mut in_ch = config.widths[0];
        for (stage, ((&width, &count), &stride)) in
            config.widths.iter().zip(&config.blocks).zip(&config.strides).enumerate()
        {
            for b in 0..count {
                let s = if b == 0 { stride } else { 1 };
                let name = format!("stage{stage}.block{b}");
                blocks.push(ResidualBlock::new(store, &name, in_ch, width, s, rng));
                in_ch = width;
            }
        }
        Ok(Backbone { config: config.clone(), stem, stem_bn, blocks })
    }

    /// `[B, in_channels, R, R] → [B, out_channels, r, r]`
    pub fn forward<T: Scalar>(&self, cx: &mut Forward<T>, x: Var) -> Result<Var> {
        let shape = cx.tape.shape(x);
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::dim(
                "backbone",
                format!("expected [B, {}, H, W] input, got {shape:?}", self.config.in_channels),
            ));
        }
        let h = self.stem.forward(cx, x)?;
        let h = self.stem_bn.forward(cx, h)?;
        let mut h = cx.tape.relu(h);
        for block in &self.blocks {
            h = block.forward(cx, h)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn final_map_sizes() {
        let c32 = BackboneConfig::default();
        assert_eq!(c32.out_resolution().unwrap(), 4);
        let c64 = BackboneConfig { resolution: 64, ..BackboneConfig::default() };
        assert_eq!(c64.out_resolution().unwrap(), 8);
        assert_eq!(BackboneConfig::resnet18(3, 32).out_resolution().unwrap(), 4);
    }

    #[test]
    fn too_small_resolution_rejected() {
        let tiny = BackboneConfig { resolution: 2, ..BackboneConfig::default() };
        assert!(matches!(tiny.validate(), Err(Error::Config(_))));
        let uneven = BackboneConfig { blocks: vec![1, 1], ..BackboneConfig::default() };
        assert!(uneven.validate().is_err());
    }
}
