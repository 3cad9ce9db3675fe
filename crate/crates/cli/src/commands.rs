use std::path::{Path, PathBuf};
use std::time::Instant;

use dapnet::data::{load_dataset, write_file, LabeledImageSet, Split};
use dapnet::train::{self, evaluate, load_checkpoint, metrics_csv, save_checkpoint, Evaluation, TrainRun};
use dapnet::verify::{run_suite, CheckResult, SuiteOptions};
use dapnet::{HeadKind, Model, OpKind, Scalar};

use crate::config::{Precision, RunConfig};
use crate::report::{ComparisonReport, ReportRow};
use crate::CliError;

pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const METRICS: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub epochs: usize,
    pub final_test_acc: Option<f64>,
    /// Best test accuracy and its epoch (first on ties).
    pub best_test: Option<(f64, usize)>,
    pub runtime_secs: f64,
    pub init_checksum: String,
}

fn load_split<T: Scalar>(key: &str, path: &Path) -> Result<LabeledImageSet<T>, CliError> {
    load_dataset(path).map_err(|e| CliError::Failure(format!("{key} = {}: {e}", path.display())))
}

struct Data<T> {
    train: LabeledImageSet<T>,
    test: Option<LabeledImageSet<T>>,
}

fn load_data<T: Scalar>(cfg: &RunConfig) -> Result<Data<T>, CliError> {
    let train = load_split("train", cfg.train_path()?)?;
    let test = match &cfg.test {
        Some(p) => Some(load_split("test", p)?),
        None => None,
    };
    let (h, w) = train.resolution();
    if h != w {
        return Err(CliError::Usage(format!("images must be square, got {h}x{w}")));
    }
    if let Some(t) = &test {
        if t.images.shape()[1..] != train.images.shape()[1..] || t.num_classes != train.num_classes {
            return Err(CliError::Usage("train and test sets disagree on image shape or class count".into()));
        }
    }
    Ok(Data { train, test })
}

fn build_model<T: Scalar>(cfg: &RunConfig, data: &LabeledImageSet<T>) -> Result<Model<T>, CliError> {
    let mc = cfg.model_config(data.channels(), data.resolution().0, data.num_classes);
    Model::new(&mc, cfg.seed).map_err(|e| CliError::Usage(format!("model configuration: {e}")))
}

/// Trains one model and writes the resolved config, metrics and checkpoints
/// under the run's output directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome, CliError> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F64 => train_as::<f64>(cfg),
        Precision::F32 => train_as::<f32>(cfg),
    }
}

fn train_as<T: Scalar>(cfg: &RunConfig) -> Result<TrainOutcome, CliError> {
    let data = load_data::<T>(cfg)?;
    let model = build_model(cfg, &data.train)?;
    let init_checksum = model.backbone_checksum();
    let out = cfg.out_dir();
    write_file(&out.join(RESOLVED_CONFIG), cfg.render().as_bytes())?;
    let hash = cfg.hash();
    println!("training {} head, {} parameters, output {}", cfg.head.label(), model.store.num_trainable(), out.display());

    let start = Instant::now();
    let run = train::train(model, &data.train, data.test.as_ref(), cfg.train_config(), |run| {
        let m = run.history.last().expect("epoch finished");
        write_file(&out.join(METRICS), metrics_csv(&run.history).as_bytes())?;
        let test = m.test_acc.map(|a| format!(" test {:.2}%", 100.0 * a)).unwrap_or_default();
        println!(
            "epoch {:>3}  lr {:<8}  loss {:.4}  train {:.2}%{test}  routed {:?}",
            m.epoch,
            m.lr,
            m.train_loss,
            100.0 * m.train_acc,
            m.routed
        );
        if cfg.checkpoint_every > 0 && run.epoch % cfg.checkpoint_every == 0 && run.epoch < run.config.epochs {
            save_checkpoint(run, &out.join(format!("{CHECKPOINT_DIR}_epoch{}", run.epoch)), &hash)?;
        }
        Ok(())
    })?;
    save_checkpoint(&run, &out.join(CHECKPOINT_DIR), &hash)?;
    let runtime_secs = start.elapsed().as_secs_f64();

    let mut best: Option<(f64, usize)> = None;
    for m in &run.history {
        if let Some(a) = m.test_acc {
            if best.map_or(true, |(b, _)| a > b) {
                best = Some((a, m.epoch));
            }
        }
    }
    Ok(TrainOutcome {
        out_dir: out,
        epochs: run.history.len(),
        final_test_acc: run.history.last().and_then(|m| m.test_acc),
        best_test: best,
        runtime_secs,
        init_checksum,
    })
}

/// Restores a checkpoint into a model built from `cfg` and scores a split.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path, split: Split) -> Result<Evaluation, CliError> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F64 => evaluate_as::<f64>(cfg, checkpoint, split),
        Precision::F32 => evaluate_as::<f32>(cfg, checkpoint, split),
    }
}

fn evaluate_as<T: Scalar>(cfg: &RunConfig, checkpoint: &Path, split: Split) -> Result<Evaluation, CliError> {
    let data = load_data::<T>(cfg)?;
    let set = match split {
        Split::Train => &data.train,
        Split::Test => data
            .test
            .as_ref()
            .ok_or_else(|| CliError::Usage("evaluating the test split needs `test` set".into()))?,
    };
    let mut run = TrainRun::new(build_model(cfg, &data.train)?, cfg.train_config())?;
    let meta = load_checkpoint(&mut run, checkpoint)?;
    if meta.config_hash != cfg.hash() {
        eprintln!("warning: checkpoint was written under a different configuration ({})", meta.config_hash);
    }
    Ok(evaluate(&run.model, set, cfg.eval_batch_size)?)
}

fn head_dir(kind: HeadKind) -> &'static str {
    match kind {
        HeadKind::Gap => "gap",
        HeadKind::Gmp => "gmp",
        HeadKind::GapGmp => "gap_gmp",
        HeadKind::Dap => "dap",
    }
}

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";

/// Trains every head kind from the same seed and configuration and writes
/// `report.csv` and `report.txt`.
pub fn cmd_compare(cfg: &RunConfig, heads: &[HeadKind]) -> Result<ComparisonReport, CliError> {
    if heads.is_empty() {
        return Err(CliError::Usage("no head kinds to compare".into()));
    }
    if cfg.test.is_none() {
        return Err(CliError::Usage("compare needs `test` set to a manifest".into()));
    }
    let out = cfg.out_dir();
    let config_hash = cfg.hash_without(&["head.kind"]);
    let mut report = ComparisonReport::default();
    for &kind in heads {
        let sub = RunConfig { head: kind, out: out.join(head_dir(kind)), ..cfg.clone() };
        let o = cmd_train(&sub)?;
        let (best, best_epoch) = o.best_test.expect("test set present");
        report.rows.push(ReportRow {
            head: kind,
            final_test_acc: o.final_test_acc.expect("test set present"),
            best_test_acc: best,
            best_epoch,
            runtime_secs: o.runtime_secs,
            seed: cfg.seed,
            config_hash: config_hash.clone(),
            init_checksum: o.init_checksum,
        });
    }
    write_file(&out.join(REPORT_CSV), report.to_csv().as_bytes())?;
    write_file(&out.join(REPORT_TXT), report.to_table().as_bytes())?;
    Ok(report)
}

/// Runs the property suite, printing one line per check.
pub fn cmd_verify(seed: u64, fault: Option<OpKind>) -> Vec<CheckResult> {
    let results = run_suite(&SuiteOptions { seed, fault });
    for r in &results {
        println!("{} {:<28} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    results
}
