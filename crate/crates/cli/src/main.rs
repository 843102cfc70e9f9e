//! `bmnet`: train, convert, evaluate and cost BM networks.

mod config;
mod error;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bmnet_core::checkpoint::Checkpoint;
use bmnet_core::cost::{gate_sweep, network_gate_report, CostReport, ShapeTable, SHAPES_FORMAT};
use bmnet_core::data::{load_cifar10, load_mnist, synthetic_dataset, Dataset, Split};
use bmnet_core::netspec::{build_lenet_like_for, build_resnet22, NetworkSpec, SPEC_FORMAT};
use bmnet_core::network::Network;
use bmnet_core::nn::MathMode;
use bmnet_core::training::{
    epochs_to_csv, evaluate, incremental_convert_and_train, stages_to_csv, stages_to_jsonl,
    train_phase, ConversionData, ConversionPlan, PhaseContext, Schedule, TrainConfig,
};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::{DatasetKind, ExperimentConfig};
use error::CliError;

pub const CLASSICAL_CHECKPOINT: &str = "classical.bmnet.json";
pub const CONVERTED_CHECKPOINT: &str = "converted.bmnet.json";

#[derive(Parser)]
#[command(
    name = "bmnet",
    version,
    about = "Bipolar morphological network engine"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluation worker threads (1 is fully deterministic and the default).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory; overrides the config.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the classical network and write a checkpoint plus per-epoch metrics.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Convert layers to BM form one at a time with fine-tuning.
    Convert {
        #[command(flatten)]
        common: Common,
        /// Convert only the first k layers of the plan (`all` by default).
        #[arg(long, value_parser = parse_layers)]
        layers: Option<Layers>,
        /// Classical checkpoint; defaults to the config or the train output.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Report accuracy, macro precision/recall and the confusion matrix.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; defaults to the config or the convert output.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also evaluate with the polynomial ln/exp and report the difference.
        #[arg(long)]
        approx_math: bool,
    },
    /// Gate and latency report for a network spec or a shape table.
    CostReport {
        #[command(flatten)]
        common: Common,
        /// `bmnet-spec-v1` network or `bmnet-shapes-v1` table.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Number of leading conv layers counted in BM form (`all` by default).
        #[arg(long, value_parser = parse_layers)]
        layers: Option<Layers>,
        /// Emit conv-layer gate totals for every k.
        #[arg(long)]
        sweep: bool,
    },
}

/// `--layers` value: a count or `all`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Layers {
    All,
    First(usize),
}

impl Layers {
    fn limit(self) -> Option<usize> {
        match self {
            Self::All => None,
            Self::First(k) => Some(k),
        }
    }
}

fn parse_layers(s: &str) -> Result<Layers, String> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(Layers::All);
    }
    s.parse()
        .map(Layers::First)
        .map_err(|_| format!("expected a layer count or `all`, got {s:?}"))
}

struct Context {
    cfg: ExperimentConfig,
    common: Common,
}

impl Context {
    fn new(common: Common) -> Result<Self, CliError> {
        let cfg = match &common.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig {
                threads: 1,
                ..Default::default()
            },
        };
        Ok(Self { cfg, common })
    }

    fn seed(&self) -> Result<u64, CliError> {
        self.common.seed.or(self.cfg.seed).ok_or_else(|| {
            CliError::Usage("a seed is required (--seed or `seed` in the config)".into())
        })
    }

    fn threads(&self) -> usize {
        self.common.threads.unwrap_or(self.cfg.threads).max(1)
    }

    fn out_dir(&self) -> Result<PathBuf, CliError> {
        let dir = self
            .common
            .out
            .clone()
            .or_else(|| self.cfg.out_dir.clone())
            .ok_or_else(|| {
                CliError::Usage("an output directory is required (--out or `out_dir`)".into())
            })?;
        std::fs::create_dir_all(&dir)
            .map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
        Ok(dir)
    }

    fn train_config(&self) -> TrainConfig {
        let t = &self.cfg.train;
        TrainConfig {
            batch_size: t.batch_size,
            adam: t.adam,
            augment: t.augment,
            threads: self.threads(),
        }
    }

    fn spec(&self, num_classes: usize, input: [usize; 3]) -> Result<NetworkSpec, CliError> {
        let net = self.cfg.network.clone().unwrap_or_default();
        match (&net.spec, net.builtin.as_deref()) {
            (Some(p), _) => Ok(NetworkSpec::load(p)?),
            (None, Some("lenet_like")) => Ok(build_lenet_like_for(input, num_classes)),
            (None, Some("resnet22")) => Ok(build_resnet22(num_classes)),
            (None, Some(other)) => Err(CliError::Config(format!(
                "unknown builtin network {other:?}"
            ))),
            (None, None) => Err(CliError::Config(
                "[network] needs `spec` or `builtin`".into(),
            )),
        }
    }

    fn data(&self, seed: u64) -> Result<Splits, CliError> {
        let d = self
            .cfg
            .dataset
            .clone()
            .ok_or_else(|| CliError::Config("missing [dataset] section".into()))?;
        let path = || {
            self.common
                .data
                .clone()
                .or_else(|| d.path.clone())
                .ok_or_else(|| CliError::Config("dataset path is required".into()))
        };
        let mut s = match d.kind {
            DatasetKind::Mnist => {
                let m = load_mnist(path()?, d.val_fraction, seed)?;
                Splits {
                    train: m.train,
                    val: m.val,
                    test: m.test,
                    mean: None,
                }
            }
            DatasetKind::Cifar10 => {
                let c = load_cifar10(path()?)?;
                let (train, val) = c.train.split_validation(d.val_fraction, seed);
                Splits {
                    train,
                    val,
                    test: c.test,
                    mean: Some(c.mean),
                }
            }
            DatasetKind::Synthetic => {
                let sy = &d.synthetic;
                let full = synthetic_dataset(sy.samples, sy.shape, sy.classes, seed);
                let (train, val) = full.split_validation(d.val_fraction, seed);
                let mut test =
                    synthetic_dataset(sy.test_samples, sy.shape, sy.classes, seed.wrapping_add(1));
                test.split = Split::Test;
                Splits {
                    train,
                    val,
                    test,
                    mean: None,
                }
            }
        };
        let limit = |ds: &mut Dataset<f64>, n: Option<usize>| {
            if let Some(n) = n.filter(|&n| n < ds.len()) {
                *ds = ds.subset(&(0..n).collect::<Vec<_>>(), ds.split);
            }
        };
        limit(&mut s.train, d.train_limit);
        limit(&mut s.test, d.test_limit);
        Ok(s)
    }
}

struct Splits {
    train: Dataset<f64>,
    val: Dataset<f64>,
    test: Dataset<f64>,
    mean: Option<Vec<f64>>,
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn mean_tensor(
    spec: &NetworkSpec,
    mean: &Option<Vec<f64>>,
) -> Result<Option<bmnet_core::TensorF64>, CliError> {
    mean.as_ref()
        .map(|m| {
            bmnet_core::Tensor::from_vec(&spec.input, m.clone())
                .map_err(|e| CliError::Data(e.to_string()))
        })
        .transpose()
}

fn cmd_train(common: Common) -> Result<(), CliError> {
    let ctx = Context::new(common)?;
    let seed = ctx.seed()?;
    let out = ctx.out_dir()?;
    let data = ctx.data(seed)?;
    let spec = ctx.spec(data.train.num_classes, data.train.sample_shape)?;
    let mut net = Network::<f64>::seeded(&spec, seed)?;
    let cfg = ctx.train_config();
    let phase = PhaseContext {
        train: &data.train,
        val: &data.val,
        cfg: &cfg,
        seed,
    };
    let t = &ctx.cfg.train;
    let schedule = match t.patience {
        Some(patience) => Schedule::EarlyStopping {
            max_epochs: t.epochs,
            patience,
        },
        None => Schedule::Fixed { epochs: t.epochs },
    };
    let mut log = Vec::new();
    train_phase(&mut net, &phase, schedule, "classical", 0, &mut log)?;
    let test = evaluate(
        &net,
        &data.test,
        MathMode::Exact,
        cfg.batch_size,
        cfg.threads,
    )?;
    let mean = mean_tensor(&spec, &data.mean)?;
    Checkpoint::from_network(&net, mean.as_ref()).save(out.join(CLASSICAL_CHECKPOINT))?;
    write(&out.join("train_metrics.csv"), &epochs_to_csv(&log))?;
    write(&out.join("train_summary.json"), &to_json(&test))?;
    println!("test accuracy {:.4} ({} epochs)", test.accuracy, log.len());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(Network<f64>, Option<bmnet_core::TensorF64>), CliError> {
    if !path.is_file() {
        return Err(CliError::Config(format!(
            "checkpoint {} not found",
            path.display()
        )));
    }
    Ok(Checkpoint::load(path)?.to_network::<f64>()?)
}

fn cmd_convert(
    common: Common,
    layers: Option<Layers>,
    checkpoint: Option<PathBuf>,
) -> Result<(), CliError> {
    let ctx = Context::new(common)?;
    let seed = ctx.seed()?;
    let out = ctx.out_dir()?;
    let path = checkpoint
        .or_else(|| ctx.cfg.conversion.checkpoint.clone())
        .unwrap_or_else(|| out.join(CLASSICAL_CHECKPOINT));
    let (mut net, mean) = load_checkpoint(&path)?;
    let data = ctx.data(seed)?;
    let c = &ctx.cfg.conversion;
    let plan = ConversionPlan {
        layer_order: c.layer_order.clone(),
        epochs_per_layer: c.epochs_per_layer,
        final_max_epochs: c.final_max_epochs,
        final_patience: c.final_patience,
    };
    let cfg = ctx.train_config();
    let sets = ConversionData {
        train: &data.train,
        val: &data.val,
        test: &data.test,
    };
    let outcome = incremental_convert_and_train(
        &mut net,
        &sets,
        &plan,
        &cfg,
        seed,
        layers.and_then(Layers::limit),
    )?;
    Checkpoint::from_network(&net, mean.as_ref()).save(out.join(CONVERTED_CHECKPOINT))?;
    write(&out.join("stage_log.csv"), &stages_to_csv(&outcome.stages))?;
    write(
        &out.join("stage_log.jsonl"),
        &stages_to_jsonl(&outcome.stages),
    )?;
    write(&out.join("stage_log.json"), &to_json(&outcome.stages))?;
    write(
        &out.join("finetune_metrics.csv"),
        &epochs_to_csv(&outcome.epochs),
    )?;
    print!("{}", stages_to_csv(&outcome.stages));
    Ok(())
}

#[derive(Serialize)]
struct Evaluation {
    checkpoint: String,
    samples: usize,
    exact: bmnet_core::metrics::Metrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    approx: Option<bmnet_core::metrics::Metrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    approx_accuracy_delta: Option<f64>,
}

fn recenter(
    ds: &mut Dataset<f64>,
    from: &Option<Vec<f64>>,
    to: &Option<bmnet_core::TensorF64>,
) -> Result<(), CliError> {
    if let Some(m) = from {
        let neg: Vec<f64> = m.iter().map(|v| -v).collect();
        ds.subtract_mean(&neg)?;
    }
    if let Some(m) = to {
        ds.subtract_mean(m.data())?;
    }
    Ok(())
}

fn cmd_evaluate(
    common: Common,
    checkpoint: Option<PathBuf>,
    approx_flag: bool,
) -> Result<(), CliError> {
    let ctx = Context::new(common)?;
    let seed = ctx.seed()?;
    let out = ctx.out_dir()?;
    let path = checkpoint
        .or_else(|| ctx.cfg.evaluate.checkpoint.clone())
        .unwrap_or_else(|| out.join(CONVERTED_CHECKPOINT));
    let (net, mean) = load_checkpoint(&path)?;
    let mut data = ctx.data(seed)?;
    if data.mean.as_deref() != mean.as_ref().map(|m| m.data()) {
        recenter(&mut data.test, &data.mean, &mean)?;
    }
    let bs = ctx.cfg.train.batch_size;
    let threads = ctx.threads();
    let exact = evaluate(&net, &data.test, MathMode::Exact, bs, threads)?;
    let approx = if approx_flag || ctx.cfg.approx_math {
        Some(evaluate(&net, &data.test, MathMode::Approx, bs, threads)?)
    } else {
        None
    };
    let report = Evaluation {
        checkpoint: path.display().to_string(),
        samples: data.test.len(),
        approx_accuracy_delta: approx.as_ref().map(|a| a.accuracy - exact.accuracy),
        exact,
        approx,
    };
    write(&out.join("evaluation.json"), &to_json(&report))?;
    println!(
        "accuracy {:.4} macro_precision {:.4} macro_recall {:.4}",
        report.exact.accuracy, report.exact.macro_precision, report.exact.macro_recall
    );
    if let Some(a) = &report.approx {
        println!(
            "approx accuracy {:.4} (delta {:+.4})",
            a.accuracy,
            a.accuracy - report.exact.accuracy
        );
    }
    Ok(())
}

enum CostInput {
    Network(NetworkSpec),
    Shapes(ShapeTable),
}

fn read_cost_input(path: &Path) -> Result<CostInput, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let head: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    match head.get("format").and_then(|f| f.as_str()) {
        Some(SHAPES_FORMAT) => Ok(CostInput::Shapes(
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
        )),
        Some(SPEC_FORMAT) => Ok(CostInput::Network(NetworkSpec::from_json(&text)?)),
        other => Err(CliError::Config(format!(
            "{}: unsupported format {other:?}",
            path.display()
        ))),
    }
}

fn cmd_cost_report(
    common: Common,
    spec: Option<PathBuf>,
    layers: Option<Layers>,
    sweep: bool,
) -> Result<(), CliError> {
    let ctx = Context::new(common)?;
    let gates = ctx.cfg.gates;
    let input = match spec.or_else(|| ctx.cfg.network.as_ref().and_then(|n| n.spec.clone())) {
        Some(p) => read_cost_input(&p)?,
        None => CostInput::Network(ctx.spec(10, [28, 28, 1])?),
    };
    let (report, sweep_rows): (CostReport, Option<Vec<(usize, f64)>>) = match &input {
        CostInput::Shapes(t) => {
            if sweep || layers.is_some() {
                return Err(CliError::Usage(
                    "--sweep and --layers apply to network specs only".into(),
                ));
            }
            (t.report(&gates)?, None)
        }
        CostInput::Network(s) => {
            let k = match layers.and_then(Layers::limit) {
                Some(k) => k,
                None => s.conv_count()?,
            };
            let rows = if sweep {
                Some(gate_sweep(s, &gates)?)
            } else {
                None
            };
            (network_gate_report(s, k, &gates)?, rows)
        }
    };
    let sweep_csv = sweep_rows.map(|rows| {
        let mut s = String::from("k,conv_gates\n");
        rows.iter()
            .for_each(|(k, g)| s.push_str(&format!("{k},{g}\n")));
        s
    });
    let target = ctx.common.out.clone().or_else(|| ctx.cfg.out_dir.clone());
    match target {
        Some(dir) => {
            std::fs::create_dir_all(&dir)
                .map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
            write(&dir.join("cost_report.csv"), &report.to_csv())?;
            write(&dir.join("cost_report.json"), &report.to_json())?;
            if let Some(s) = &sweep_csv {
                write(&dir.join("gate_sweep.csv"), s)?;
            }
            print!("{}", report.to_csv());
        }
        None => print!("{}", sweep_csv.unwrap_or_else(|| report.to_csv())),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common } => cmd_train(common),
        Command::Convert {
            common,
            layers,
            checkpoint,
        } => cmd_convert(common, layers, checkpoint),
        Command::Evaluate {
            common,
            checkpoint,
            approx_math,
        } => cmd_evaluate(common, checkpoint, approx_math),
        Command::CostReport {
            common,
            spec,
            layers,
            sweep,
        } => cmd_cost_report(common, spec, layers, sweep),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
