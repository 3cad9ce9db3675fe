use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LabeledImageSet, Split};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAX_SYNTHETIC_CLASSES: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub resolution: usize,
    pub channels: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
    pub split: Split,
}

impl SyntheticSpec {
    pub fn new(classes: usize, per_class: usize, resolution: usize, seed: u64) -> Self {
        SyntheticSpec { classes, per_class, resolution, channels: 1, noise: 0.1, seed, split: Split::Train }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_SYNTHETIC_CLASSES).contains(&self.classes) {
            return Err(Error::Config(format!("synthetic classes must be in 2..={MAX_SYNTHETIC_CLASSES}")));
        }
        if self.per_class == 0 || self.channels == 0 {
            return Err(Error::Config("per_class and channels must be positive".into()));
        }
        if self.resolution < 8 {
            return Err(Error::Config("synthetic resolution must be at least 8".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Class-conditional geometric patterns on a dark background, with random
/// placement and contrast, plus Gaussian noise, clamped to [0, 1].
/// Samples are interleaved by class (sample `i` has label `i % classes`).
///
/// | class | pattern |
/// |---|---|
/// | 0 | horizontal bar |
/// | 1 | vertical bar |
/// | 2 | filled square |
/// | 3 | diagonal stroke |
/// | 4 | anti-diagonal stroke |
/// | 5 | plus sign |
/// | 6 | square outline |
/// | 7 | checkerboard |
pub fn make_synthetic<T: Scalar>(spec: &SyntheticSpec) -> Result<LabeledImageSet<T>> {
    spec.validate()?;
    let r = spec.resolution;
    let n = spec.classes * spec.per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(n * spec.channels * r * r);
    let mut labels = Vec::with_capacity(n);
    let mut canvas = vec![0.0f64; r * r];
    for i in 0..n {
        let class = i % spec.classes;
        canvas.iter_mut().for_each(|v| *v = 0.0);
        draw(class, r, &mut canvas, &mut rng);
        let contrast = rng.gen_range(0.7..=1.0);
        for _ in 0..spec.channels {
            for &p in &canvas {
                let v = p * contrast + if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data.push(T::c(v.clamp(0.0, 1.0)));
            }
        }
        labels.push(class);
    }
    let images = Tensor::new(&[n, spec.channels, r, r], data)?;
    Ok(LabeledImageSet { images, labels, split: spec.split, num_classes: spec.classes })
}

fn draw(class: usize, r: usize, px: &mut [f64], rng: &mut ChaCha8Rng) {
    let mut set = |y: usize, x: usize| {
        if y < r && x < r {
            px[y * r + x] = 1.0;
        }
    };
    let thick = if r >= 16 { 2 } else { 1 };
    match class {
        0 => {
            let y0 = rng.gen_range(0..=r - thick);
            for y in y0..y0 + thick {
                (0..r).for_each(|x| set(y, x));
            }
        }
        1 => {
            let x0 = rng.gen_range(0..=r - thick);
            for x in x0..x0 + thick {
                (0..r).for_each(|y| set(y, x));
            }
        }
        2 => {
            let side = r / 3;
            let (y0, x0) = (rng.gen_range(0..=r - side), rng.gen_range(0..=r - side));
            for y in y0..y0 + side {
                (x0..x0 + side).for_each(|x| set(y, x));
            }
        }
        3 | 4 => {
            let shift = rng.gen_range(0..r / 2) as isize - (r / 4) as isize;
            for y in 0..r {
                for t in 0..thick {
                    let x = y as isize + shift + t as isize;
                    if (0..r as isize).contains(&x) {
                        let x = x as usize;
                        set(y, if class == 3 { x } else { r - 1 - x });
                    }
                }
            }
        }
        5 => {
            let arm = r / 3;
            let (cy, cx) = (rng.gen_range(arm..r - arm), rng.gen_range(arm..r - arm));
            for d in 0..=2 * arm {
                set(cy + d - arm, cx);
                set(cy, cx + d - arm);
            }
        }
        6 => {
            let side = r / 2;
            let (y0, x0) = (rng.gen_range(0..=r - side), rng.gen_range(0..=r - side));
            for d in 0..side {
                set(y0, x0 + d);
                set(y0 + side - 1, x0 + d);
                set(y0 + d, x0);
                set(y0 + d, x0 + side - 1);
            }
        }
        _ => {
            let phase = rng.gen_range(0..2);
            for y in 0..r {
                for x in 0..r {
                    if (y / 2 + x / 2 + phase) % 2 == 0 {
                        set(y, x);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_seed() {
        let spec = SyntheticSpec::new(4, 5, 16, 7);
        let a: LabeledImageSet<f64> = make_synthetic(&spec).unwrap();
        let b: LabeledImageSet<f64> = make_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        let c: LabeledImageSet<f64> = make_synthetic(&SyntheticSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn shapes_and_balance() {
        let set: LabeledImageSet<f32> = make_synthetic(&SyntheticSpec::new(4, 500, 16, 1)).unwrap();
        assert_eq!(set.images.shape(), &[2000, 1, 16, 16]);
        assert_eq!(set.class_counts(), vec![500; 4]);
        assert!(set.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn every_class_draws_something() {
        for r in [8, 16, 32] {
            let spec = SyntheticSpec { noise: 0.0, ..SyntheticSpec::new(8, 3, r, 2) };
            let set: LabeledImageSet<f64> = make_synthetic(&spec).unwrap();
            for i in 0..set.len() {
                let (img, _) = set.subset(&[i]).unwrap();
                let lit = img.data().iter().filter(|&&v| v > 0.0).count();
                assert!(lit > 0 && lit < r * r, "class {} at r={r}", i % 8);
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(make_synthetic::<f64>(&SyntheticSpec::new(1, 5, 16, 0)).is_err());
        assert!(make_synthetic::<f64>(&SyntheticSpec::new(9, 5, 16, 0)).is_err());
        assert!(make_synthetic::<f64>(&SyntheticSpec::new(2, 5, 4, 0)).is_err());
    }
}
