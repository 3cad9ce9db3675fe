//! `dataset pack`: write the on-disk format from a synthetic generator or
//! from a directory of per-class raw tensors.
//!
//! A raw directory holds `class_<k>.bin` for `k = 0..K`, each a
//! little-endian `f32` block of `n_k × C × H × W` values in [0, 1].

use std::path::{Path, PathBuf};

use dapnet::data::{
    decode_floats, make_synthetic, read_file, save_dataset, Dtype, LabeledImageSet, Normalization, Split, SyntheticSpec,
};
use dapnet::kv::Doc;
use dapnet::Tensor;

use crate::CliError;

/// Salt separating the test stream from the train stream of one seed.
const TEST_SEED_SALT: u64 = 0x7e57_0000_0000_0000;

#[derive(Clone, Debug)]
pub struct SyntheticPack {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub resolution: usize,
    pub channels: usize,
    pub noise: f64,
    pub seed: u64,
    pub dtype: Dtype,
    pub normalize: bool,
}

/// Writes `train.manifest` and, when `test_per_class > 0`, `test.manifest`.
/// Normalisation statistics come from the train split.
pub fn pack_synthetic(p: &SyntheticPack, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let spec = SyntheticSpec {
        classes: p.classes,
        per_class: p.train_per_class,
        resolution: p.resolution,
        channels: p.channels,
        noise: p.noise,
        seed: p.seed,
        split: Split::Train,
    };
    let train: LabeledImageSet<f64> = make_synthetic(&spec)?;
    let stats = p.normalize.then(|| Normalization::compute(&train.images));
    let mut written = vec![save_dataset(&train, out, p.dtype, stats.as_ref())?];
    if p.test_per_class > 0 {
        let test_spec =
            SyntheticSpec { per_class: p.test_per_class, seed: p.seed ^ TEST_SEED_SALT, split: Split::Test, ..spec };
        let test: LabeledImageSet<f64> = make_synthetic(&test_spec)?;
        written.push(save_dataset(&test, out, p.dtype, stats.as_ref())?);
    }
    Ok(written)
}

#[derive(Clone, Debug)]
pub struct RawPack {
    pub input: PathBuf,
    pub classes: usize,
    /// `[C, H, W]` of one image.
    pub shape: [usize; 3],
    pub split: Split,
    pub dtype: Dtype,
    pub normalize: bool,
    /// Reuse the statistics recorded in another manifest.
    pub stats_from: Option<PathBuf>,
}

fn class_index(name: &str) -> Option<usize> {
    name.strip_prefix("class_")?.strip_suffix(".bin")?.parse().ok()
}

pub fn pack_raw(p: &RawPack, out: &Path) -> Result<PathBuf, CliError> {
    let entries = std::fs::read_dir(&p.input)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.input.display())))?;
    let mut found: Vec<usize> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| class_index(&e.file_name().to_string_lossy()))
        .collect();
    found.sort_unstable();
    if found != (0..p.classes).collect::<Vec<_>>() {
        return Err(CliError::Usage(format!(
            "expected class_0.bin .. class_{}.bin for {} classes, found classes {found:?}",
            p.classes.saturating_sub(1),
            p.classes
        )));
    }
    let per_image: usize = p.shape.iter().product();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for k in 0..p.classes {
        let path = p.input.join(format!("class_{k}.bin"));
        let bytes = read_file(&path)?;
        let image_bytes = per_image * 4;
        if bytes.is_empty() || bytes.len() % image_bytes != 0 {
            return Err(CliError::Failure(format!(
                "{}: format error at byte {}: size is not a positive multiple of one {:?} f32 image",
                path.display(),
                bytes.len() - bytes.len() % image_bytes,
                p.shape
            )));
        }
        let n = bytes.len() / image_bytes;
        let values: Vec<f64> = decode_floats(&bytes, n * per_image, Dtype::F32)?;
        if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(CliError::Failure(format!(
                "{}: format error at byte {}: value {} outside [0, 1]",
                path.display(),
                i * 4,
                values[i]
            )));
        }
        data.extend(values);
        labels.extend(std::iter::repeat(k).take(n));
    }
    let [c, h, w] = p.shape;
    let images = Tensor::new(&[labels.len(), c, h, w], data)?;
    let set = LabeledImageSet { images, labels, split: p.split, num_classes: p.classes };
    let stats = match &p.stats_from {
        Some(m) => Some(read_stats(m)?),
        None => p.normalize.then(|| Normalization::compute(&set.images)),
    };
    if let Some(s) = &stats {
        if s.mean.len() != c || s.std.len() != c {
            return Err(CliError::Usage(format!("statistics cover {} channels, images have {c}", s.mean.len())));
        }
    }
    Ok(save_dataset(&set, out, p.dtype, stats.as_ref())?)
}

/// The `mean`/`std` recorded in a manifest.
pub fn read_stats(manifest: &Path) -> Result<Normalization, CliError> {
    let text = String::from_utf8_lossy(&read_file(manifest)?).into_owned();
    let doc = Doc::parse(&text)?;
    if doc.get("mean").is_none() {
        return Err(CliError::Usage(format!("{} records no statistics", manifest.display())));
    }
    Ok(Normalization { mean: doc.list("mean")?, std: doc.list("std")? })
}
