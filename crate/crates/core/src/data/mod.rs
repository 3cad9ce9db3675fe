//! Labelled image sets: on-disk format, synthetic generation and batching.

mod batch;
mod format;
mod synthetic;

pub use batch::{iterate_batches, Batch, BatchPlan};
pub use format::{decode_floats, encode_floats, load_dataset, read_file, read_raw, save_dataset, write_file, Dtype, MAGIC, VERSION};
pub use synthetic::{make_synthetic, SyntheticSpec, MAX_SYNTHETIC_CLASSES};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet<T> {
    /// `[N, C, H, W]`.
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub split: Split,
    pub num_classes: usize,
}

impl<T: Scalar> LabeledImageSet<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.images.shape()[2], self.images.shape()[3])
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.images.shape();
        if shape.len() != 4 {
            return Err(Error::dim("dataset", format!("images must be [N, C, H, W], got {shape:?}")));
        }
        if shape[0] != self.labels.len() || self.labels.is_empty() {
            return Err(Error::dim(
                "dataset",
                format!("{} images but {} labels", shape[0], self.labels.len()),
            ));
        }
        if let Some((i, &l)) = self.labels.iter().enumerate().find(|(_, &l)| l >= self.num_classes) {
            return Err(Error::Index(format!("label {l} of sample {i} >= num_classes {}", self.num_classes)));
        }
        Ok(())
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let images = self.images.gather_outer(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((images, labels))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Per-channel standardisation `x ↦ (x − mean) / std`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Channel statistics of `images` (population std, floored at 1e-8).
    pub fn compute<T: Scalar>(images: &Tensor<T>) -> Self {
        let (n, c) = (images.shape()[0], images.shape()[1]);
        let plane: usize = images.shape()[2..].iter().product();
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for (i, &v) in images.data().iter().enumerate() {
            let ch = (i / plane) % c;
            let v = v.f64();
            mean[ch] += v;
            sq[ch] += v * v;
        }
        let count = (n * plane) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= count;
                (s / count - *m * *m).max(0.0).sqrt().max(1e-8)
            })
            .collect();
        Normalization { mean, std }
    }

    pub fn apply<T: Scalar>(&self, images: &mut Tensor<T>) {
        self.map(images, |v, m, s| (v - m) / s);
    }

    pub fn invert<T: Scalar>(&self, images: &mut Tensor<T>) {
        self.map(images, |v, m, s| v * s + m);
    }

    fn map<T: Scalar>(&self, images: &mut Tensor<T>, f: impl Fn(f64, f64, f64) -> f64) {
        let c = images.shape()[1];
        let plane: usize = images.shape()[2..].iter().product();
        for (i, v) in images.data_mut().iter_mut().enumerate() {
            let ch = (i / plane) % c;
            *v = T::c(f(v.f64(), self.mean[ch], self.std[ch]));
        }
    }
}
