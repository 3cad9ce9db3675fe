//! Run configuration: a `key = value` file plus `--set` overrides.
//!
//! Dataset paths are taken relative to the working directory. A relative
//! `out` is placed under `$DAPNET_OUT` when that variable is set.

use std::path::{Path, PathBuf};

use dapnet::head::Routing;
use dapnet::kv;
use dapnet::train::{OptimConfig, TrainConfig};
use dapnet::{BackboneConfig, HeadConfig, HeadKind, ModelConfig};

use crate::CliError;

pub const OUT_ROOT_ENV: &str = "DAPNET_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out: PathBuf,
    pub precision: Precision,
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    pub strides: Vec<usize>,
    pub head: HeadKind,
    pub head_bias: bool,
    pub dap_window: usize,
    pub dap_stride: usize,
    pub dap_ceil_mode: bool,
    pub dap_routing: Routing,
    pub dap_lambda_floor: f64,
    pub optim: OptimConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
    /// Also checkpoint every this many epochs (0: final checkpoint only).
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let b = BackboneConfig::default();
        let d = dapnet::head::DapConfig::default();
        let t = TrainConfig::default();
        RunConfig {
            train: None,
            test: None,
            out: PathBuf::from("run"),
            precision: Precision::F64,
            widths: b.widths,
            blocks: b.blocks,
            strides: b.strides,
            head: HeadKind::Dap,
            head_bias: false,
            dap_window: d.window,
            dap_stride: d.stride,
            dap_ceil_mode: d.ceil_mode,
            dap_routing: d.routing,
            dap_lambda_floor: d.lambda_floor,
            optim: t.optim,
            epochs: t.epochs,
            batch_size: t.batch_size,
            eval_batch_size: t.eval_batch_size,
            seed: t.seed,
            checkpoint_every: 0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "train",
    "test",
    "out",
    "dtype",
    "backbone.widths",
    "backbone.blocks",
    "backbone.strides",
    "head.kind",
    "head.bias",
    "dap.window",
    "dap.stride",
    "dap.ceil_mode",
    "dap.routing",
    "dap.lambda_floor",
    "optim.base_lr",
    "optim.factor",
    "optim.interval",
    "optim.momentum",
    "optim.weight_decay",
    "epochs",
    "batch_size",
    "eval_batch_size",
    "seed",
    "checkpoint_every",
];

fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V, String> {
    value.parse().map_err(|_| format!("bad value `{value}` for `{key}`"))
}

fn list(key: &str, value: &str) -> Result<Vec<usize>, String> {
    kv::parse_list(value).ok_or_else(|| format!("bad list `{value}` for `{key}`"))
}

fn flag(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("bad boolean `{value}` for `{key}`")),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Parses a config document; errors carry the offending line number.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let lines = kv::parse(text).map_err(|e| CliError::Usage(e.to_string()))?;
        let mut cfg = RunConfig::default();
        for l in lines {
            cfg.set(&l.key, &l.value).map_err(|e| CliError::Usage(format!("line {}: {e}", l.number)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<(), CliError> {
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{s}`")))?;
            self.set(k.trim(), v.trim()).map_err(|e| CliError::Usage(format!("--set {s}: {e}")))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "train" => self.train = opt_path(value),
            "test" => self.test = opt_path(value),
            "out" => self.out = PathBuf::from(value),
            "dtype" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(format!("dtype must be f32 or f64, got `{value}`")),
                }
            }
            "backbone.widths" => self.widths = list(key, value)?,
            "backbone.blocks" => self.blocks = list(key, value)?,
            "backbone.strides" => self.strides = list(key, value)?,
            "head.kind" => self.head = HeadKind::parse(value).map_err(|e| e.to_string())?,
            "head.bias" => self.head_bias = flag(key, value)?,
            "dap.window" => self.dap_window = num(key, value)?,
            "dap.stride" => self.dap_stride = num(key, value)?,
            "dap.ceil_mode" => self.dap_ceil_mode = flag(key, value)?,
            "dap.routing" => self.dap_routing = Routing::parse(value).map_err(|e| e.to_string())?,
            "dap.lambda_floor" => self.dap_lambda_floor = num(key, value)?,
            "optim.base_lr" => self.optim.base_lr = num(key, value)?,
            "optim.factor" => self.optim.factor = num(key, value)?,
            "optim.interval" => self.optim.interval = num(key, value)?,
            "optim.momentum" => self.optim.momentum = num(key, value)?,
            "optim.weight_decay" => self.optim.weight_decay = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "eval_batch_size" => self.eval_batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        match key {
            "train" => path(&self.train),
            "test" => path(&self.test),
            "out" => self.out.display().to_string(),
            "dtype" => match self.precision {
                Precision::F32 => "f32".into(),
                Precision::F64 => "f64".into(),
            },
            "backbone.widths" => kv::join(&self.widths),
            "backbone.blocks" => kv::join(&self.blocks),
            "backbone.strides" => kv::join(&self.strides),
            "head.kind" => self.head.name().into(),
            "head.bias" => self.head_bias.to_string(),
            "dap.window" => self.dap_window.to_string(),
            "dap.stride" => self.dap_stride.to_string(),
            "dap.ceil_mode" => self.dap_ceil_mode.to_string(),
            "dap.routing" => self.dap_routing.name().into(),
            "dap.lambda_floor" => self.dap_lambda_floor.to_string(),
            "optim.base_lr" => self.optim.base_lr.to_string(),
            "optim.factor" => self.optim.factor.to_string(),
            "optim.interval" => self.optim.interval.to_string(),
            "optim.momentum" => self.optim.momentum.to_string(),
            "optim.weight_decay" => self.optim.weight_decay.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "eval_batch_size" => self.eval_batch_size.to_string(),
            "seed" => self.seed.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            _ => unreachable!("key table is closed"),
        }
    }

    /// Every key with its resolved value, in table order.
    pub fn render(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k))).collect()
    }

    /// Hash of every setting except `out` and the keys in `skip`.
    pub fn hash_without(&self, skip: &[&str]) -> String {
        let text: String = KEYS
            .iter()
            .filter(|k| **k != "out" && !skip.contains(k))
            .map(|k| format!("{k} = {}\n", self.get(k)))
            .collect();
        dapnet::sha256_hex(text.as_bytes())
    }

    pub fn hash(&self) -> String {
        self.hash_without(&[])
    }

    pub fn out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) if self.out.is_relative() => PathBuf::from(root).join(&self.out),
            _ => self.out.clone(),
        }
    }

    pub fn train_path(&self) -> Result<&Path, CliError> {
        self.train
            .as_deref()
            .ok_or_else(|| CliError::Usage("missing dataset path: set `train` to a manifest".into()))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            optim: self.optim.clone(),
            eval_batch_size: self.eval_batch_size,
        }
    }

    pub fn model_config(&self, in_channels: usize, resolution: usize, num_classes: usize) -> ModelConfig {
        let mut head = HeadConfig::new(self.head, num_classes);
        head.bias = self.head_bias;
        head.dap.window = self.dap_window;
        head.dap.stride = self.dap_stride;
        head.dap.ceil_mode = self.dap_ceil_mode;
        head.dap.routing = self.dap_routing;
        head.dap.lambda_floor = self.dap_lambda_floor;
        ModelConfig {
            backbone: BackboneConfig {
                in_channels,
                resolution,
                widths: self.widths.clone(),
                blocks: self.blocks.clone(),
                strides: self.strides.clone(),
            },
            head,
        }
    }

    /// Checks that do not need the data.
    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        if self.epochs == 0 {
            return usage("epochs must be positive".into());
        }
        if self.widths.is_empty() || self.widths.len() != self.blocks.len() || self.widths.len() != self.strides.len() {
            return usage("backbone.widths, backbone.blocks and backbone.strides must have equal, non-zero lengths".into());
        }
        self.train_config().validate().map_err(|e| CliError::Usage(e.to_string()))
    }
}
