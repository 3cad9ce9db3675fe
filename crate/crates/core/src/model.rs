use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::head::{build_head, Head, HeadConfig, HeadOutputs, Prediction};
use crate::nn::{Backbone, BackboneConfig, Forward, Mode, ParamStore, RunningStats};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const BACKBONE_STREAM: u64 = 0;
const HEAD_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
}

/// Backbone plus head, with every tensor held in one store.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub head: Head,
}

impl<T: Scalar> Model<T> {
    /// Initialises a model from `seed`. Backbone and head draw from separate
    /// random streams, so models that differ only in head kind start from
    /// bit-identical backbones.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.backbone.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(BACKBONE_STREAM);
        let backbone = Backbone::new(&config.backbone, &mut store, &mut rng)?;
        rng.set_stream(HEAD_STREAM);
        rng.set_word_pos(0);
        let map = config.backbone.out_resolution()?;
        let head = build_head(&config.head, &mut store, config.backbone.out_channels(), map, &mut rng)?;
        let model = Model { config: config.clone(), store, backbone, head };
        model.check_shapes()?;
        Ok(model)
    }

    /// Runs one zero image through the network in eval mode.
    pub fn check_shapes(&self) -> Result<()> {
        let b = &self.config.backbone;
        let probe = Tensor::zeros(&[1, b.in_channels, b.resolution, b.resolution]);
        self.predict(&probe)
            .map(|_| ())
            .map_err(|e| Error::Config(format!("shape check failed: {e}")))
    }

    /// Training-mode forward through the head losses. Running statistics are
    /// returned for the caller to apply after the step.
    pub fn forward_train(
        &self,
        tape: &mut Tape<T>,
        images: &Tensor<T>,
        targets: &[usize],
    ) -> Result<(HeadOutputs<T>, RunningStats<T>)> {
        let mut cx = Forward::new(tape, &self.store, Mode::Train);
        let x = cx.tape.constant(images.clone());
        let y = self.backbone.forward(&mut cx, x)?;
        let probs = self.head.forward(&mut cx, y)?;
        let out = self.head.losses(&mut cx, probs, targets)?;
        Ok((out, cx.finish()))
    }

    /// Eval-mode fused prediction.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Prediction<T>> {
        let mut tape = Tape::new();
        let mut cx = Forward::new(&mut tape, &self.store, Mode::Eval);
        let x = cx.tape.constant(images.clone());
        let y = self.backbone.forward(&mut cx, x)?;
        self.head.predict(&mut cx, y)
    }

    pub fn lambdas(&self) -> Vec<T> {
        self.head.lambdas(&self.store)
    }

    /// SHA-256 over the backbone tensors (names, shapes, little-endian values).
    pub fn backbone_checksum(&self) -> String {
        checksum(&self.store, |name| !name.starts_with("head."))
    }

    pub fn checksum(&self) -> String {
        checksum(&self.store, |_| true)
    }
}

fn checksum<T: Scalar>(store: &ParamStore<T>, keep: impl Fn(&str) -> bool) -> String {
    let mut hasher = Sha256::new();
    let mut buf = Vec::new();
    for e in store.entries().iter().filter(|e| keep(&e.name)) {
        hasher.update(e.name.as_bytes());
        for d in e.value.shape() {
            hasher.update((*d as u64).to_le_bytes());
        }
        buf.clear();
        for &v in e.value.data() {
            v.write_le(&mut buf);
        }
        hasher.update(&buf);
    }
    hex(&hasher.finalize())
}

/// Lower-case hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
