//! Checkpoints: a `checkpoint.manifest` plus raw little-endian blobs for the
//! parameter store (trainable tensors, running statistics and λ) and the
//! momentum buffers.

use std::path::{Path, PathBuf};

use super::TrainRun;
use crate::data::{decode_floats, encode_floats, Dtype};
use crate::error::{Error, Result};
use crate::kv::{self, Doc};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &str = "DAPCKPT";
const VERSION: u32 = 1;
const MANIFEST: &str = "checkpoint.manifest";
const PARAMS: &str = "params.bin";
const VELOCITY: &str = "velocity.bin";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
}

fn native<T: Scalar>() -> Dtype {
    if T::BYTES == 4 {
        Dtype::F32
    } else {
        Dtype::F64
    }
}

/// Writes the run's state into `dir` and returns the manifest path.
pub fn save_checkpoint<T: Scalar>(run: &TrainRun<T>, dir: &Path, config_hash: &str) -> Result<PathBuf> {
    let dtype = native::<T>();
    let o = &run.optimizer.config;
    let mut text = format!(
        "magic = {MAGIC}\nversion = {VERSION}\ndtype = {}\nepoch = {}\nseed = {}\nconfig_hash = {config_hash}\n",
        dtype.name(),
        run.epoch,
        run.config.seed
    );
    text.push_str(&format!(
        "lr = {}\nbase_lr = {}\nfactor = {}\ninterval = {}\nmomentum = {}\nweight_decay = {}\n",
        run.optimizer.lr, o.base_lr, o.factor, o.interval, o.momentum, o.weight_decay
    ));
    text.push_str(&format!("params = {PARAMS}\nvelocity = {VELOCITY}\n"));
    let mut params = Vec::new();
    let mut velocity = Vec::new();
    for (i, e) in run.model.store.entries().iter().enumerate() {
        text.push_str(&format!("tensor.{} = {}\n", e.name, kv::join(e.value.shape())));
        params.extend(encode_floats(e.value.data(), dtype));
        if let Some(Some(v)) = run.optimizer.velocity.get(i) {
            text.push_str(&format!("velocity.{} = {}\n", e.name, kv::join(v.shape())));
            velocity.extend(encode_floats(v.data(), dtype));
        }
    }
    crate::data::write_file(&dir.join(PARAMS), &params)?;
    crate::data::write_file(&dir.join(VELOCITY), &velocity)?;
    let manifest = dir.join(MANIFEST);
    crate::data::write_file(&manifest, text.as_bytes())?;
    Ok(manifest)
}

/// Restores a checkpoint into a run whose model has the same layout.
/// `path` may be the checkpoint directory or its manifest.
pub fn load_checkpoint<T: Scalar>(run: &mut TrainRun<T>, path: &Path) -> Result<CheckpointMeta> {
    let manifest = if path.is_dir() { path.join(MANIFEST) } else { path.to_path_buf() };
    let dir = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let bytes = crate::data::read_file(&manifest)?;
    let text = String::from_utf8(bytes)
        .map_err(|e| Error::format(e.utf8_error().valid_up_to() as u64, "checkpoint manifest is not UTF-8"))?;
    let doc = Doc::parse(&text)?;
    let magic = doc.require("magic")?;
    if magic.value != MAGIC {
        return Err(Error::format(magic.offset, format!("bad magic `{}`, expected {MAGIC}", magic.value)));
    }
    if doc.parsed::<u32>("version")? != VERSION {
        return Err(Error::format(doc.require("version")?.offset, "unsupported checkpoint version"));
    }
    let dt = doc.require("dtype")?;
    let dtype = Dtype::parse(&dt.value).ok_or_else(|| Error::format(dt.offset, format!("unknown dtype `{}`", dt.value)))?;

    let store = &run.model.store;
    let tensors: Vec<_> = doc.lines().iter().filter(|l| l.key.starts_with("tensor.")).collect();
    if tensors.len() != store.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} tensors, model has {}",
            tensors.len(),
            store.len()
        )));
    }
    let mut values = Vec::with_capacity(store.len());
    let params = crate::data::read_file(&dir.join(&doc.require("params")?.value))?;
    let mut offset = 0usize;
    for (line, e) in tensors.iter().zip(store.entries()) {
        let shape: Vec<usize> = kv::parse_list(&line.value)
            .ok_or_else(|| Error::format(line.offset, format!("line {}: bad shape", line.number)))?;
        if line.key["tensor.".len()..] != e.name || shape != e.value.shape() {
            return Err(Error::Config(format!(
                "checkpoint tensor `{}` {shape:?} does not match model tensor `{}` {:?}",
                &line.key["tensor.".len()..],
                e.name,
                e.value.shape()
            )));
        }
        let len = e.value.numel() * dtype.width();
        let chunk = params.get(offset..offset + len).ok_or_else(|| {
            Error::format(params.len() as u64, format!("params blob truncated inside `{}`", e.name))
        })?;
        values.push(Tensor::new(&shape, decode_floats(chunk, e.value.numel(), dtype)?)?);
        offset += len;
    }
    if offset != params.len() {
        return Err(Error::format(offset as u64, "trailing bytes in params blob"));
    }

    let velocity_blob = crate::data::read_file(&dir.join(&doc.require("velocity")?.value))?;
    let mut velocity = vec![None; store.len()];
    let mut offset = 0usize;
    for line in doc.lines().iter().filter(|l| l.key.starts_with("velocity.")) {
        let name = &line.key["velocity.".len()..];
        let idx = store
            .find(name)
            .ok_or_else(|| Error::Config(format!("velocity for unknown tensor `{name}`")))?
            .index();
        let shape = store.entries()[idx].value.shape().to_vec();
        let count: usize = shape.iter().product();
        let len = count * dtype.width();
        let chunk = velocity_blob
            .get(offset..offset + len)
            .ok_or_else(|| Error::format(velocity_blob.len() as u64, format!("velocity blob truncated inside `{name}`")))?;
        velocity[idx] = Some(Tensor::new(&shape, decode_floats(chunk, count, dtype)?)?);
        offset += len;
    }
    if offset != velocity_blob.len() {
        return Err(Error::format(offset as u64, "trailing bytes in velocity blob"));
    }

    for (e, v) in run.model.store.entries_mut().iter_mut().zip(values) {
        e.value = v;
    }
    let o = &mut run.optimizer;
    o.velocity = velocity;
    o.lr = doc.parsed("lr")?;
    o.config.base_lr = doc.parsed("base_lr")?;
    o.config.factor = doc.parsed("factor")?;
    o.config.interval = doc.parsed("interval")?;
    o.config.momentum = doc.parsed("momentum")?;
    o.config.weight_decay = doc.parsed("weight_decay")?;
    run.config.optim = o.config.clone();
    let meta = CheckpointMeta {
        epoch: doc.parsed("epoch")?,
        seed: doc.parsed("seed")?,
        config_hash: doc.require("config_hash")?.value.clone(),
    };
    run.epoch = meta.epoch;
    run.config.seed = meta.seed;
    Ok(meta)
}
