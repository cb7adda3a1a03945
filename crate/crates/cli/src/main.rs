use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use streamgeo::pipeline::eval::{evaluate, EvalOptions};
use streamgeo::pipeline::infer::{infer, InferOptions};
use streamgeo::pipeline::suite::{run_suite, MODULES};
use streamgeo::pipeline::train::{train, TrainOptions};
use streamgeo::pipeline::ModelConfig;
use streamgeo::synthdata::{generate_sequence, write_dataset, SequenceConfig};
use streamgeo::{Error, Result};

#[derive(Parser)]
#[command(name = "streamgeo", version, about = "Streaming pointmap, pose and illumination estimation for tubular video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic tube sequence with ground truth.
    Generate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        frames: usize,
        /// Image height and width.
        #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [64, 64])]
        size: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Second half of the sequence revisits the first half's viewpoints.
        #[arg(long = "loop")]
        looping: bool,
    },
    /// Pretrain the illumination network, then train the model on a dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Total step count to reach (overrides the config).
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Reuse a pretrained illumination checkpoint, or write one here.
        #[arg(long)]
        ias_ckpt: Option<PathBuf>,
        /// CSV log path (defaults to the checkpoint path with a .csv extension).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Stream frames through a trained model and write depth, poses and a fused cloud.
    Infer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dump_memory_stats: bool,
        #[arg(long, value_name = "DIR")]
        dump_light: Option<PathBuf>,
    },
    /// Compare predicted depth against ground truth and print a JSON report.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        no_median_scale: bool,
        /// Cloud accuracy thresholds in millimetres.
        #[arg(long, value_delimiter = ',', default_values_t = [1.0, 2.0, 5.0])]
        thresholds: Vec<f64>,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks in 64-bit.
    Gradcheck {
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(MODULES))]
        module: Option<String>,
    },
    /// Print the default model configuration.
    Config,
}

fn load_config(path: Option<&Path>) -> Result<ModelConfig> {
    match path {
        Some(p) => ModelConfig::load(p),
        None => {
            let cfg = ModelConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Generate {
            seed,
            frames,
            size,
            out,
            looping,
        } => {
            let mut cfg = SequenceConfig::new(seed, frames, size[0], size[1]);
            cfg.looping = looping;
            let (scene, samples) = generate_sequence(&cfg)?;
            write_dataset(&out, &cfg, &scene, &samples)?;
            println!("wrote {} frames to {}", samples.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            steps,
            resume,
            ias_ckpt,
            log,
        } => {
            let cfg = load_config(config.as_deref())?;
            let opts = TrainOptions {
                steps,
                resume,
                ias_ckpt,
                log,
            };
            let summary = train::<f32>(&cfg, &data, &out, &opts)?;
            if let Some(ias) = &summary.ias {
                println!("ias pretrain: loss {:.6} -> {:.6}", ias.initial_loss, ias.final_loss);
            }
            let last = summary.rows.last();
            println!(
                "steps {}..{}  smoothed total {} -> {}  alpha {}",
                summary.first_step,
                last.map_or(summary.first_step, |r| r.step + 1),
                fmt_opt(summary.initial_smoothed),
                fmt_opt(summary.final_smoothed),
                fmt_opt(last.map(|r| r.alpha)),
            );
            println!("checkpoint {}", out.display());
        }
        Command::Infer {
            config,
            ckpt,
            frames,
            out,
            dump_memory_stats,
            dump_light,
        } => {
            let cfg = load_config(config.as_deref())?;
            let opts = InferOptions {
                dump_memory_stats,
                dump_light,
            };
            let s = infer::<f32>(&cfg, &ckpt, &frames, &out, &opts)?;
            println!(
                "{} frames  confidence threshold {:.6}  cloud points {}  final cache {}",
                s.frames,
                s.confidence_threshold,
                s.cloud_points,
                s.stats.last().map_or(0, |t| t.cache_after)
            );
        }
        Command::Eval {
            pred,
            gt,
            no_median_scale,
            thresholds,
            out,
        } => {
            let opts = EvalOptions {
                median_scale: !no_median_scale,
                thresholds_mm: thresholds,
            };
            let report = evaluate(&pred, &gt, &opts)?;
            let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
            if let Some(path) = out {
                streamgeo::io::write_file(&path, text.as_bytes())?;
            }
            println!("{text}");
        }
        Command::Gradcheck { module } => {
            let entries = run_suite(module.as_deref())?;
            let mut ok = true;
            for e in &entries {
                let passed = e.passed();
                ok &= passed;
                let worst = e.report.worst();
                println!(
                    "{} {}/{}: {} params, worst rel {:.3e}{}",
                    if passed { "PASS" } else { "FAIL" },
                    e.module,
                    e.case,
                    e.report.checked_scalars(),
                    worst.map_or(0.0, |w| w.worst_rel_error),
                    worst.map_or(String::new(), |w| format!(
                        " at {}[{}] (analytic {:.6e}, numeric {:.6e})",
                        w.name, w.worst_index, w.analytic, w.numeric
                    )),
                );
            }
            return Ok(ok);
        }
        Command::Config => print!("{}", ModelConfig::default().to_toml()),
    }
    Ok(true)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
