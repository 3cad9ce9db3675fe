use crate::data::LabeledImageSet;
use crate::error::Result;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Anything that assigns a label to each image of a batch.
pub trait Predictor<T> {
    fn predict_labels(&self, images: &Tensor<T>) -> Result<Vec<usize>>;
}

impl<T: Scalar> Predictor<T> for Model<T> {
    fn predict_labels(&self, images: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(self.predict(images)?.labels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub top1: f64,
    /// Accuracy per class; `None` for classes absent from the set.
    pub per_class: Vec<Option<f64>>,
    pub correct: usize,
    pub total: usize,
}

/// Top-1 and per-class accuracy, visiting the set in order.
pub fn evaluate<T: Scalar, P: Predictor<T> + ?Sized>(
    predictor: &P,
    set: &LabeledImageSet<T>,
    batch_size: usize,
) -> Result<Evaluation> {
    let n = set.len();
    let bs = batch_size.max(1);
    let mut hits = vec![0usize; set.num_classes];
    let mut seen = vec![0usize; set.num_classes];
    for start in (0..n).step_by(bs) {
        let len = bs.min(n - start);
        let images = set.images.slice_outer(start, len)?;
        let labels = predictor.predict_labels(&images)?;
        for (&p, &y) in labels.iter().zip(&set.labels[start..start + len]) {
            seen[y] += 1;
            if p == y {
                hits[y] += 1;
            }
        }
    }
    let correct: usize = hits.iter().sum();
    Ok(Evaluation {
        top1: correct as f64 / n as f64,
        per_class: hits
            .iter()
            .zip(&seen)
            .map(|(&h, &s)| (s > 0).then(|| h as f64 / s as f64))
            .collect(),
        correct,
        total: n,
    })
}
