//! On-disk dataset layout: a text manifest next to two raw little-endian
//! row-major blobs (images as floats, labels as `u32`).
//!
//! ```text
//! magic = DAPSET
//! version = 1
//! split = train
//! dtype = f32
//! shape = 2000,1,16,16
//! num_classes = 4
//! images = train.images.bin
//! labels = train.labels.bin
//! mean = 0.21          # optional, one value per channel
//! std = 0.37
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use super::{LabeledImageSet, Normalization, Split};
use crate::error::{Error, Result};
use crate::kv::{self, Doc};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &str = "DAPSET";
pub const VERSION: u32 = 1;

/// Storage precision of float blobs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Dtype::F32),
            "f64" => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

pub fn encode_floats<T: Scalar>(values: &[T], dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * dtype.width());
    for &v in values {
        match dtype {
            Dtype::F32 => (v.f64() as f32).write_le(&mut out),
            Dtype::F64 => v.f64().write_le(&mut out),
        }
    }
    out
}

/// Decodes exactly `count` floats; short or long blobs are format errors.
pub fn decode_floats<T: Scalar>(bytes: &[u8], count: usize, dtype: Dtype) -> Result<Vec<T>> {
    check_len(bytes.len(), count * dtype.width())?;
    Ok(bytes
        .chunks_exact(dtype.width())
        .map(|c| match dtype {
            Dtype::F32 => T::c(f32::read_le(c) as f64),
            Dtype::F64 => T::c(f64::read_le(c)),
        })
        .collect())
}

fn check_len(actual: usize, expected: usize) -> Result<()> {
    if actual < expected {
        return Err(Error::format(
            actual as u64,
            format!("blob truncated: expected {expected} bytes, found {actual}"),
        ));
    }
    if actual > expected {
        return Err(Error::format(
            expected as u64,
            format!("{} trailing bytes after expected {expected}", actual - expected),
        ));
    }
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `<dir>/<split>.manifest`, `<split>.images.bin` and
/// `<split>.labels.bin`. Images are stored as given (unnormalised);
/// `stats`, when present, are recorded for the loader to apply.
pub fn save_dataset<T: Scalar>(
    set: &LabeledImageSet<T>,
    dir: &Path,
    dtype: Dtype,
    stats: Option<&Normalization>,
) -> Result<PathBuf> {
    set.validate()?;
    let stem = set.split.name();
    let images_name = format!("{stem}.images.bin");
    let labels_name = format!("{stem}.labels.bin");
    write_file(&dir.join(&images_name), &encode_floats(set.images.data(), dtype))?;
    let mut labels = Vec::with_capacity(set.labels.len() * 4);
    for &l in &set.labels {
        labels.extend_from_slice(&(l as u32).to_le_bytes());
    }
    write_file(&dir.join(&labels_name), &labels)?;

    let mut text = String::new();
    text.push_str(&format!("magic = {MAGIC}\nversion = {VERSION}\nsplit = {stem}\n"));
    text.push_str(&format!("dtype = {}\n", dtype.name()));
    text.push_str(&format!("shape = {}\n", kv::join(set.images.shape())));
    text.push_str(&format!("num_classes = {}\n", set.num_classes));
    text.push_str(&format!("images = {images_name}\nlabels = {labels_name}\n"));
    if let Some(s) = stats {
        text.push_str(&format!("mean = {}\nstd = {}\n", kv::join(&s.mean), kv::join(&s.std)));
    }
    let manifest = dir.join(format!("{stem}.manifest"));
    write_file(&manifest, text.as_bytes())?;
    Ok(manifest)
}

/// Reads a dataset exactly as stored, together with any recorded statistics.
pub fn read_raw<T: Scalar>(manifest: &Path) -> Result<(LabeledImageSet<T>, Option<Normalization>)> {
    let text = String::from_utf8(read_file(manifest)?)
        .map_err(|e| Error::format(e.utf8_error().valid_up_to() as u64, "manifest is not UTF-8"))?;
    let doc = Doc::parse(&text)?;
    let magic = doc.require("magic")?;
    if magic.value != MAGIC {
        return Err(Error::format(magic.offset, format!("bad magic `{}`, expected {MAGIC}", magic.value)));
    }
    let version: u32 = doc.parsed("version")?;
    if version != VERSION {
        return Err(Error::format(doc.require("version")?.offset, format!("unsupported version {version}")));
    }
    let dt = doc.require("dtype")?;
    let dtype = Dtype::parse(&dt.value)
        .ok_or_else(|| Error::format(dt.offset, format!("unknown dtype `{}`", dt.value)))?;
    let split_line = doc.require("split")?;
    let split = Split::parse(&split_line.value)
        .ok_or_else(|| Error::format(split_line.offset, format!("unknown split `{}`", split_line.value)))?;
    let shape: Vec<usize> = doc.list("shape")?;
    if shape.len() != 4 || shape.contains(&0) {
        return Err(Error::format(doc.require("shape")?.offset, format!("shape {shape:?} is not [N, C, H, W]")));
    }
    let num_classes: usize = doc.parsed("num_classes")?;
    let base = manifest.parent().unwrap_or(Path::new("."));

    let count: usize = shape.iter().product();
    let image_bytes = read_file(&base.join(&doc.require("images")?.value))?;
    let images = Tensor::new(&shape, decode_floats(&image_bytes, count, dtype)?)?;

    let label_bytes = read_file(&base.join(&doc.require("labels")?.value))?;
    check_len(label_bytes.len(), shape[0] * 4)?;
    let mut labels = Vec::with_capacity(shape[0]);
    for (i, c) in label_bytes.chunks_exact(4).enumerate() {
        let l = u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize;
        if l >= num_classes {
            return Err(Error::format(
                (i * 4) as u64,
                format!("label {l} of sample {i} out of range for {num_classes} classes"),
            ));
        }
        labels.push(l);
    }

    let stats = match (doc.get("mean"), doc.get("std")) {
        (None, None) => None,
        (Some(_), Some(_)) => {
            let s = Normalization { mean: doc.list("mean")?, std: doc.list("std")? };
            if s.mean.len() != shape[1] || s.std.len() != shape[1] || s.std.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::format(
                    doc.require("mean")?.offset,
                    format!("need {} positive per-channel statistics", shape[1]),
                ));
            }
            Some(s)
        }
        _ => return Err(Error::format(0, "mean and std must be given together")),
    };
    let set = LabeledImageSet { images, labels, split, num_classes };
    set.validate()?;
    Ok((set, stats))
}

/// Reads a dataset and standardises it with the manifest's statistics
/// (identity when none are recorded).
pub fn load_dataset<T: Scalar>(manifest: &Path) -> Result<LabeledImageSet<T>> {
    let (mut set, stats) = read_raw(manifest)?;
    if let Some(s) = stats {
        s.apply(&mut set.images);
    }
    Ok(set)
}
