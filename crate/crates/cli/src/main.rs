use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dapnet::data::{Dtype, Split};
use dapnet::{HeadKind, OpKind};
use dapnet_cli::commands::{cmd_compare, cmd_evaluate, cmd_train, cmd_verify};
use dapnet_cli::config::RunConfig;
use dapnet_cli::pack::{pack_raw, pack_synthetic, RawPack, SyntheticPack};
use dapnet_cli::{CliError, EXIT_FAILURE, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "dapnet", version, about = "Train and compare pooling heads for small image classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (key = value lines).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a configuration key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory (same as --set out=DIR).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.sets)?;
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one model.
    Train(ConfigArgs),
    /// Score a checkpoint on the train or test split.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint directory or manifest.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["train", "test"])]
        split: String,
    },
    /// Train several head kinds from one seed and tabulate their accuracy.
    Compare {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated head kinds.
        #[arg(long, default_value = "gap,gmp,gap+gmp,dap")]
        heads: String,
    },
    /// Run the property suite.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true, value_name = "OP")]
        inject_sign_flip: Option<String>,
    },
    /// Dataset utilities.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Write a data set in the on-disk format.
    #[command(subcommand)]
    Pack(PackCommand),
}

#[derive(Subcommand)]
enum PackCommand {
    /// Generate class-conditional geometric patterns.
    Synthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 500)]
        train_per_class: usize,
        #[arg(long, default_value_t = 100)]
        test_per_class: usize,
        #[arg(long, default_value_t = 16)]
        resolution: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "f32", value_parser = ["f32", "f64"])]
        dtype: String,
        /// Record no normalisation statistics.
        #[arg(long)]
        raw: bool,
    },
    /// Convert a directory of `class_<k>.bin` f32 tensors.
    Raw {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        classes: usize,
        /// Image shape as C,H,W.
        #[arg(long)]
        shape: String,
        #[arg(long, default_value = "train", value_parser = ["train", "test"])]
        split: String,
        #[arg(long, default_value = "f32", value_parser = ["f32", "f64"])]
        dtype: String,
        /// Record per-channel statistics of this split.
        #[arg(long)]
        normalize: bool,
        /// Record the statistics of another manifest instead.
        #[arg(long, conflicts_with = "normalize")]
        stats_from: Option<PathBuf>,
    },
}

fn parse_heads(s: &str) -> Result<Vec<HeadKind>, CliError> {
    s.split(',').map(|h| HeadKind::parse(h).map_err(CliError::from)).collect()
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Train(args) => {
            let o = cmd_train(&args.resolve()?)?;
            if let Some(a) = o.final_test_acc {
                println!("final test accuracy {:.2}%", 100.0 * a);
            }
            println!("wrote {}", o.out_dir.display());
        }
        Command::Evaluate { config, checkpoint, split } => {
            let split = Split::parse(&split).expect("clap restricts values");
            let e = cmd_evaluate(&config.resolve()?, &checkpoint, split)?;
            println!("top-1 {:.2}% ({}/{})", 100.0 * e.top1, e.correct, e.total);
            for (k, a) in e.per_class.iter().enumerate() {
                match a {
                    Some(a) => println!("class {k:>3}  {:.2}%", 100.0 * a),
                    None => println!("class {k:>3}  (absent)"),
                }
            }
        }
        Command::Compare { config, heads } => {
            let cfg = config.resolve()?;
            let report = cmd_compare(&cfg, &parse_heads(&heads)?)?;
            print!("{}", report.to_table());
            println!("wrote {}", cfg.out_dir().display());
        }
        Command::Verify { seed, inject_sign_flip } => {
            let fault = match inject_sign_flip {
                Some(name) => Some(
                    OpKind::from_name(&name).ok_or_else(|| CliError::Usage(format!("unknown op `{name}`")))?,
                ),
                None => None,
            };
            let results = cmd_verify(seed, fault);
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
            if !failed.is_empty() {
                eprintln!("failed invariants: {}", failed.join(", "));
                return Ok(EXIT_FAILURE);
            }
            println!("all {} checks passed", results.len());
        }
        Command::Dataset { command: DatasetCommand::Pack(p) } => {
            let written = match p {
                PackCommand::Synthetic {
                    out,
                    classes,
                    train_per_class,
                    test_per_class,
                    resolution,
                    channels,
                    noise,
                    seed,
                    dtype,
                    raw,
                } => {
                    let pack = SyntheticPack {
                        classes,
                        train_per_class,
                        test_per_class,
                        resolution,
                        channels,
                        noise,
                        seed,
                        dtype: Dtype::parse(&dtype).expect("clap restricts values"),
                        normalize: !raw,
                    };
                    pack_synthetic(&pack, &out)?
                }
                PackCommand::Raw { input, out, classes, shape, split, dtype, normalize, stats_from } => {
                    let dims: Vec<usize> = dapnet::kv::parse_list(&shape)
                        .filter(|d: &Vec<usize>| d.len() == 3 && !d.contains(&0))
                        .ok_or_else(|| CliError::Usage(format!("--shape expects C,H,W, got `{shape}`")))?;
                    let pack = RawPack {
                        input,
                        classes,
                        shape: [dims[0], dims[1], dims[2]],
                        split: Split::parse(&split).expect("clap restricts values"),
                        dtype: Dtype::parse(&dtype).expect("clap restricts values"),
                        normalize,
                        stats_from,
                    };
                    vec![pack_raw(&pack, &out)?]
                }
            };
            for w in written {
                println!("wrote {}", w.display());
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
