//! `lcnet` — cost analysis, inference, latency benchmarking, ablation
//! sweeps, gradient checking and toy training for the PP-LCNet family.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/file error, 3 check
//! failure.

mod image;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use lcnet_core::analysis::summarize;
use lcnet_core::arch::{build_model, ArchError, ForwardOpts, LcnetConfig, Model};
use lcnet_core::autodiff::{grad_check, grad_check_config, grad_check_negative_control};
use lcnet_core::ops::Mode;
use lcnet_core::tensor::Tensor;
use lcnet_core::train::{train_toy, history_to_csv, OptState, ScheduleCfg, SynthDataset};
use lcnet_core::weights::{load_tensor, load_weights, save_tensor, save_weights};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(
    name = "lcnet",
    version,
    about = "CPU inference engine, cost analyzer and architecture laboratory for the PP-LCNet family",
    after_help = "Exit codes: 0 success, 1 usage error, 2 data/file error, 3 check failure."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Architecture selection flags shared by most subcommands.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Width multiplier (published variants: 0.25 0.35 0.5 0.75 1.0 1.5 2.0 2.5)
    #[arg(long, default_value_t = 1.0)]
    scale: f32,
    /// 13-character SE placement mask, 1 = block carries an SE module
    #[arg(long, default_value = "0000000000011")]
    se_mask: String,
    /// 13-character kernel mask, 1 = 5x5 depthwise kernel, 0 = 3x3
    #[arg(long, default_value = "0000001111111")]
    kernel_mask: String,
    /// Number of output classes
    #[arg(long, default_value_t = 1000)]
    classes: usize,
}

impl ConfigArgs {
    fn to_config(&self) -> Result<LcnetConfig, CliError> {
        let config = LcnetConfig {
            scale: self.scale,
            se_mask: self.se_mask.clone(),
            kernel_mask: self.kernel_mask.clone(),
            num_classes: self.classes,
            ..Default::default()
        };
        config.validate().map_err(|e| {
            CliError::Usage(format!(
                "{e} (check --scale/--se-mask/--kernel-mask/--classes)"
            ))
        })?;
        Ok(config)
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Text,
    Csv,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum AblateMode {
    Se,
    Kernel,
}

#[derive(Subcommand)]
enum Command {
    /// Print the per-layer parameter/MAC report for a configuration
    Analyze {
        #[command(flatten)]
        config: ConfigArgs,
        /// Input resolution (square, >= 32 and divisible by 32)
        #[arg(long, default_value_t = 224)]
        hw: usize,
        #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
        output: OutputFormat,
    },
    /// Classify a stored tensor (.lct) or a binary P6 PPM image
    Infer {
        #[command(flatten)]
        config: ConfigArgs,
        /// Weight file (.lcnw); must match the configured architecture
        #[arg(long)]
        weights: PathBuf,
        /// Input activation tensor (.lct), shape [N, 3, H, W]
        #[arg(long, conflicts_with = "image")]
        input: Option<PathBuf>,
        /// Binary P6 PPM image; resized (short edge 256), center-cropped to
        /// 224 and normalized with the community-standard ImageNet
        /// constants (mean 0.485/0.456/0.406, std 0.229/0.224/0.225)
        #[arg(long)]
        image: Option<PathBuf>,
        /// How many (class, probability) rows to print per sample
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        /// Kernel-internal worker threads
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Write the output probabilities [N, K] as a .lct tensor
        #[arg(long)]
        save_output: Option<PathBuf>,
    },
    /// Time forward passes and report median/mean/p90 latency
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 224)]
        hw: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Unrecorded warmup iterations
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        /// Measured iterations (>= 10)
        #[arg(long, default_value_t = 20)]
        iters: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
        output: OutputFormat,
    },
    /// Sweep SE or kernel masks and report params/MACs/median latency
    Ablate {
        /// Which mask family to sweep
        #[arg(long, value_enum)]
        mode: AblateMode,
        /// Comma-separated 13-character masks; defaults to the published
        /// ablation rows for the chosen mode
        #[arg(long, value_delimiter = ',')]
        masks: Option<Vec<String>>,
        /// Width multiplier (the published ablations use 0.5)
        #[arg(long, default_value_t = 0.5)]
        scale: f32,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        #[arg(long, default_value_t = 224)]
        hw: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
        output: OutputFormat,
    },
    /// Validate every backward rule against 64-bit central differences
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Base finite-difference step; per parameter the step is
        /// h * max(1, |theta|)
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        /// Negative control: corrupt one analytic gradient and require the
        /// check to fail
        #[arg(long, hide = true)]
        negative_control: bool,
    },
    /// Train a tiny variant on synthetic blobs and write history + weights
    TrainToy {
        /// Width multiplier for the toy model
        #[arg(long, default_value_t = 0.25)]
        scale: f32,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 240)]
        samples: usize,
        /// Image side (>= 32 and divisible by 32)
        #[arg(long, default_value_t = 32)]
        hw: usize,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 30)]
        batch: usize,
        #[arg(long, default_value_t = 0.1)]
        base_lr: f32,
        #[arg(long, default_value_t = 5)]
        warmup_epochs: usize,
        #[arg(long, default_value_t = 0.9)]
        momentum: f32,
        #[arg(long, default_value_t = 3e-5)]
        weight_decay: f32,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Checkpoint path (.lcnw)
        #[arg(long, default_value = "train_toy.lcnw")]
        checkpoint: PathBuf,
        /// History CSV path (epoch,loss,accuracy)
        #[arg(long, default_value = "train_toy_history.csv")]
        history: PathBuf,
    },
}

enum CliError {
    Usage(String),
    Data(String),
    Check(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Check(_) => 3,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Check(m) => m,
        }
    }
}

impl From<ArchError> for CliError {
    fn from(e: ArchError) -> Self {
        match e {
            ArchError::InvalidConfig(_) | ArchError::InvalidArgument(_) => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<lcnet_core::weights::WeightsError> for CliError {
    fn from(e: lcnet_core::weights::WeightsError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprintln!("{e}");
            std::process::exit(1);
        }
    };
    if let Err(e) = run(cli.command) {
        eprintln!("error: {}", e.message());
        std::process::exit(e.exit_code());
    }
}

fn validate_hw(hw: usize) -> Result<(), CliError> {
    if hw < 32 || !hw.is_multiple_of(32) {
        return Err(CliError::Usage(format!(
            "--hw must be >= 32 and divisible by 32, got {hw}"
        )));
    }
    Ok(())
}

fn random_input(seed: u64, batch: usize, hw: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(
        &[batch, 3, hw, hw],
        (0..batch * 3 * hw * hw)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

struct BenchStats {
    median_ms: f64,
    mean_ms: f64,
    p90_ms: f64,
}

/// Times `iters` forward passes after `warmup` unrecorded ones. Statistics
/// come from the recorded samples only; the median is the statistic of
/// record.
fn time_forward(
    model: &Model,
    input: &Tensor,
    workers: usize,
    warmup: usize,
    iters: usize,
) -> Result<BenchStats, CliError> {
    let opts = ForwardOpts {
        workers,
        dropout_seed: 0,
    };
    for _ in 0..warmup {
        model.forward_opts(input, Mode::Infer, &opts)?;
    }
    let mut samples: Vec<f64> = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t0 = Instant::now();
        model.forward_opts(input, Mode::Infer, &opts)?;
        samples.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_ms = samples[samples.len() / 2];
    let mean_ms = samples.iter().sum::<f64>() / samples.len() as f64;
    let p90_idx = (samples.len() * 9).div_ceil(10) - 1;
    let p90_ms = samples[p90_idx];
    Ok(BenchStats {
        median_ms,
        mean_ms,
        p90_ms,
    })
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Analyze { config, hw, output } => {
            validate_hw(hw)?;
            let cfg = config.to_config()?;
            let report = summarize(&cfg, (hw, hw))?;
            match output {
                OutputFormat::Text => print!("{}", report.to_text()),
                OutputFormat::Csv => {
                    print!("{}", report.to_csv());
                    println!("total,-,{},{}", report.total_params, report.total_macs);
                }
            }
            Ok(())
        }

        Command::Infer {
            config,
            weights,
            input,
            image,
            top_k,
            workers,
            save_output,
        } => {
            let cfg = config.to_config()?;
            let mut model = build_model(&cfg, 0)?;
            let map = load_weights(&weights)?;
            model
                .load_params(map)
                .map_err(|e| CliError::Data(format!("weights do not match the configured architecture: {e}")))?;

            let tensor = match (&input, &image) {
                (Some(path), None) => {
                    let t = load_tensor(path)?;
                    if t.rank() != 4 || t.dims()[1] != 3 {
                        return Err(CliError::Data(format!(
                            "input tensor must be [N, 3, H, W], got {:?}",
                            t.dims()
                        )));
                    }
                    t
                }
                (None, Some(path)) => {
                    let bytes = std::fs::read(path).map_err(|e| {
                        CliError::Data(format!("cannot read {}: {e}", path.display()))
                    })?;
                    let img = image::decode_ppm(&bytes).map_err(CliError::Data)?;
                    image::preprocess(&img)
                }
                _ => {
                    return Err(CliError::Usage(
                        "exactly one of --input or --image is required".into(),
                    ))
                }
            };

            let opts = ForwardOpts {
                workers,
                dropout_seed: 0,
            };
            let probs = model.forward_opts(&tensor, Mode::Infer, &opts)?;
            let k = cfg.num_classes;
            let top_k = top_k.min(k);
            for n in 0..probs.dims()[0] {
                if probs.dims()[0] > 1 {
                    println!("sample {n}:");
                }
                let row = &probs.data()[n * k..(n + 1) * k];
                let mut ranked: Vec<(usize, f32)> =
                    row.iter().copied().enumerate().collect();
                ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
                for (class, p) in ranked.into_iter().take(top_k) {
                    println!("{class} {p:.6}");
                }
            }
            if let Some(path) = save_output {
                save_tensor(&path, &probs)?;
            }
            Ok(())
        }

        Command::Bench {
            config,
            hw,
            workers,
            warmup,
            iters,
            batch,
            seed,
            output,
        } => {
            if iters < 10 {
                return Err(CliError::Usage(format!(
                    "iters must be >= 10, got {iters}"
                )));
            }
            if batch == 0 {
                return Err(CliError::Usage("--batch must be >= 1".into()));
            }
            validate_hw(hw)?;
            let cfg = config.to_config()?;
            let model = build_model(&cfg, seed)?;
            let input = random_input(seed, batch, hw);
            let stats = time_forward(&model, &input, workers, warmup, iters)?;
            match output {
                OutputFormat::Text => {
                    println!(
                        "config: scale {} se_mask {} kernel_mask {} input {batch}x3x{hw}x{hw}",
                        cfg.scale, cfg.se_mask, cfg.kernel_mask
                    );
                    println!("workers: {workers}  warmup: {warmup}  iters: {iters}");
                    println!(
                        "median: {:.3} ms  mean: {:.3} ms  p90: {:.3} ms",
                        stats.median_ms, stats.mean_ms, stats.p90_ms
                    );
                }
                OutputFormat::Csv => {
                    println!("scale,workers,batch,hw,warmup,iters,median_ms,mean_ms,p90_ms");
                    println!(
                        "{},{workers},{batch},{hw},{warmup},{iters},{:.4},{:.4},{:.4}",
                        cfg.scale, stats.median_ms, stats.mean_ms, stats.p90_ms
                    );
                }
            }
            Ok(())
        }

        Command::Ablate {
            mode,
            masks,
            scale,
            iters,
            hw,
            workers,
            seed,
            output,
        } => {
            if iters < 10 {
                return Err(CliError::Usage(format!(
                    "iters must be >= 10, got {iters}"
                )));
            }
            validate_hw(hw)?;
            // published ablation rows
            let masks = masks.unwrap_or_else(|| match mode {
                AblateMode::Se => vec![
                    "1100000000000".into(),
                    "0000001100000".into(),
                    "0000000000011".into(),
                    "1111111111111".into(),
                ],
                AblateMode::Kernel => vec![
                    "1111111111111".into(),
                    "1111111000000".into(),
                    "0000001111111".into(),
                ],
            });
            if masks.is_empty() {
                return Err(CliError::Usage("mask list must not be empty".into()));
            }

            if output == OutputFormat::Csv {
                println!("mask,params,macs,median_ms");
            } else {
                println!(
                    "{:<15}  {:>10}  {:>12}  {:>10}",
                    "mask", "params", "macs", "median_ms"
                );
            }
            for mask in &masks {
                let mut cfg = LcnetConfig::with_scale(scale);
                match mode {
                    AblateMode::Se => cfg.se_mask = mask.clone(),
                    AblateMode::Kernel => cfg.kernel_mask = mask.clone(),
                }
                cfg.validate().map_err(|e| {
                    CliError::Usage(format!("mask '{mask}' is invalid: {e}"))
                })?;
                let report = summarize(&cfg, (hw, hw))?;
                let model = build_model(&cfg, seed)?;
                let input = random_input(seed, 1, hw);
                let stats = time_forward(&model, &input, workers, 2, iters)?;
                if output == OutputFormat::Csv {
                    println!(
                        "{mask},{},{},{:.4}",
                        report.total_params, report.total_macs, stats.median_ms
                    );
                } else {
                    println!(
                        "{mask:<15}  {:>10}  {:>12}  {:>10.3}",
                        report.total_params, report.total_macs, stats.median_ms
                    );
                }
            }
            Ok(())
        }

        Command::Gradcheck {
            seed,
            h,
            negative_control,
        } => {
            let report = if negative_control {
                grad_check_negative_control(seed)
            } else {
                grad_check(&grad_check_config(), (32, 32), 8, seed, h)
            }
            .map_err(|e| CliError::Data(e.to_string()))?;
            println!(
                "max relative error {:.6e} over {} sampled parameters (worst: {})",
                report.max_rel_error, report.checked, report.worst_param
            );
            if report.max_rel_error < 1e-4 {
                println!("gradcheck: PASS (< 1e-4)");
                Ok(())
            } else {
                Err(CliError::Check(format!(
                    "gradcheck: FAIL — max relative error {:.6e} >= 1e-4",
                    report.max_rel_error
                )))
            }
        }

        Command::TrainToy {
            scale,
            classes,
            samples,
            hw,
            epochs,
            batch,
            base_lr,
            warmup_epochs,
            momentum,
            weight_decay,
            seed,
            checkpoint,
            history,
        } => {
            validate_hw(hw)?;
            if batch == 0 || samples == 0 {
                return Err(CliError::Usage("--batch and --samples must be >= 1".into()));
            }
            let config = LcnetConfig {
                scale,
                num_classes: classes,
                ..Default::default()
            };
            config.validate()?;

            if epochs == 0 {
                // nothing to train: checkpoint equals the initialization
                let model = build_model(&config, seed)?;
                save_weights(&model, &checkpoint)?;
                std::fs::write(&history, history_to_csv(&[]))
                    .map_err(|e| CliError::Data(e.to_string()))?;
                println!(
                    "0 epochs requested; wrote initialization checkpoint to {}",
                    checkpoint.display()
                );
                return Ok(());
            }

            let steps_per_epoch = samples.div_ceil(batch);
            let schedule = ScheduleCfg::new(base_lr, warmup_epochs, epochs, steps_per_epoch)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let data = SynthDataset::generate(seed, classes, samples, hw);
            let mut opt = OptState::new(momentum, weight_decay);
            let outcome = train_toy(&config, &data, &schedule, &mut opt, seed)
                .map_err(|e| CliError::Data(e.to_string()))?;

            save_weights(&outcome.model, &checkpoint)?;
            std::fs::write(&history, history_to_csv(&outcome.history))
                .map_err(|e| CliError::Data(e.to_string()))?;

            let last = outcome.history.last().unwrap();
            println!(
                "trained {} epochs: final loss {:.4}, final accuracy {:.3}",
                epochs, last.loss, last.accuracy
            );
            println!(
                "checkpoint: {}  history: {}",
                checkpoint.display(),
                history.display()
            );
            Ok(())
        }
    }
}
