//! Command line front end. Every subcommand reads the run config (or falls
//! back to per-modality defaults), runs in the requested precision, and
//! writes JSONL/CSV/JSON outputs under --out.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use omnilens::bench;
use omnilens::config::{Modality, RunConfig};
use omnilens::evaluate;
use omnilens::gradcheck;
use omnilens::io;
use omnilens::model::Pipeline;
use omnilens::plot;
use omnilens::synth::{gen_synthetic, Split};
use omnilens::train::run_train;
use omnilens::verify;

use omnilens_core::scalar::Scalar;
use omnilens_core::serialize::encode_feature_store;

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Parser)]
#[command(
    name = "omnilens",
    about = "Multimodal lens alignment: train, evaluate, benchmark",
    version
)]
struct Cli {
    /// Run config JSON; omit to use built-in defaults for --modality.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Compute precision for parameters and activations.
    #[arg(long, global = true, value_enum, default_value = "f32")]
    precision: Precision,
    /// Output directory for metrics, tables, checkpoints, and plots.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Also render SVG plots for commands that produce curves.
    #[arg(long, global = true)]
    plot: bool,
    /// Modality for built-in default configs when --config is not given.
    #[arg(long, global = true, value_enum, default_value = "point_cloud")]
    modality: ModalityArg,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ModalityArg {
    PointCloud,
    Audio,
    Depth,
    Tactile,
    Eeg,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Modality {
        match m {
            ModalityArg::PointCloud => Modality::PointCloud,
            ModalityArg::Audio => Modality::Audio,
            ModalityArg::Depth => Modality::Depth,
            ModalityArg::Tactile => Modality::Tactile,
            ModalityArg::Eeg => Modality::Eeg,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset and write it with a manifest.
    GenData,
    /// Train the lens against frozen teachers.
    Train {
        /// Previous run directory to continue from (same config, more steps).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Zero-shot classification against text-template class embeddings.
    EvalZeroshot {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Cross-modal retrieval against the paired-image gallery.
    EvalRetrieval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Mean average precision over class similarity scores.
    EvalMap {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Few-shot linear probe on frozen embeddings.
    Probe {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Export student and teacher embeddings keyed by sample id.
    Embed {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Which split to export.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Finite-difference gradient check over a small pipeline.
    Gradcheck {
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        /// Maximum relative error allowed.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Analytic FLOP table plus measured attention wall times.
    BenchFlops {
        /// Sequence lengths to measure.
        #[arg(long, value_delimiter = ',', default_values_t = vec![256usize, 512, 1024])]
        lengths: Vec<usize>,
        /// Timing repeats per length (best is kept).
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Run the invariant suite; nonzero exit on any failure.
    Verify,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => io::read_config(path)?,
        None => RunConfig::default_for(cli.modality.into()),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn build_pipeline<S: Scalar>(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
) -> Result<Pipeline<S>> {
    let mut pipe: Pipeline<S> = Pipeline::build(cfg)?;
    if let Some(path) = checkpoint {
        io::load_checkpoint(path, &mut pipe.store)?;
    }
    Ok(pipe)
}

fn split_arg(name: &str) -> Result<Split> {
    Ok(match name {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => bail!("unknown split {other:?}; use train, val, or test"),
    })
}

fn run<S: Scalar>(cli: &Cli) -> Result<i32> {
    match &cli.cmd {
        Cmd::GenData => {
            let cfg = load_config(cli)?;
            cfg.validate()?;
            let dir = out_dir(cli)?;
            let ds = gen_synthetic(&cfg, cfg.seed)?;
            let manifest = io::save_dataset(&dir, &ds, cfg.tokenizer.sample_rate)?;
            println!(
                "wrote {} samples across {} classes to {}",
                ds.samples.len(),
                ds.classes,
                manifest.display()
            );
        }
        Cmd::Train { resume } => {
            let cfg = load_config(cli)?;
            let dir = out_dir(cli)?;
            let result = run_train::<S>(&cfg, Some(&dir), resume.as_deref())?;
            if cli.plot {
                let loss = plot::series_from_metrics(&result.metrics, "step", "loss");
                let svg = plot::line_chart("training loss", "step", "loss", &[loss]);
                std::fs::write(dir.join("loss.svg"), svg)?;
                let acc =
                    plot::series_from_metrics(&result.metrics, "eval", "zero_shot_top1");
                if !acc.points.is_empty() {
                    let svg = plot::line_chart(
                        "validation zero-shot top-1",
                        "step",
                        "accuracy",
                        &[acc],
                    );
                    std::fs::write(dir.join("accuracy.svg"), svg)?;
                }
            }
            match result.final_loss {
                Some(loss) => println!(
                    "trained {} steps, final loss {loss:.6}, frozen params unchanged: {}",
                    result.steps_run, result.frozen_ok
                ),
                None => println!("no steps run; checkpoint equals initialization"),
            }
            println!("outputs in {}", dir.display());
        }
        Cmd::EvalZeroshot { checkpoint } => {
            let cfg = load_config(cli)?;
            let dir = out_dir(cli)?;
            let pipe: Pipeline<S> = build_pipeline(&cfg, checkpoint.as_deref())?;
            let ds = gen_synthetic(&cfg, cfg.seed)?;
            let report = evaluate::zero_shot_report(&pipe, &ds, Split::Test)?;
            io::write_json(&dir.join("zeroshot.json"), &report)?;
            let rows: Vec<Vec<String>> = report
                .top_k
                .iter()
                .map(|&(k, acc)| vec![k.to_string(), format!("{acc:.6}")])
                .collect();
            io::write_csv(&dir.join("zeroshot.csv"), &["k", "top_k_accuracy"], &rows)?;
            for (k, acc) in &report.top_k {
                println!("zero-shot top-{k}: {acc:.4}");
            }
            if let Some(merged) = &report.merged_top_k {
                for (k, acc) in merged {
                    println!("merged zero-shot top-{k}: {acc:.4}");
                }
            }
        }
        Cmd::EvalRetrieval { checkpoint } => {
            let cfg = load_config(cli)?;
            let dir = out_dir(cli)?;
            let pipe: Pipeline<S> = build_pipeline(&cfg, checkpoint.as_deref())?;
            let ds = gen_synthetic(&cfg, cfg.seed)?;
            let report = evaluate::retrieval_report(&pipe, &ds, Split::Test)?;
            io::write_json(&dir.join("retrieval.json"), &report)?;
            let rows: Vec<Vec<String>> = report
                .recall_at
                .iter()
                .map(|&(k, r)| vec![k.to_string(), format!("{r:.6}")])
                .collect();
            io::write_csv(&dir.join("retrieval.csv"), &["k", "recall"], &rows)?;
            for (k, r) in &report.recall_at {
                println!("recall@{k}: {r:.4}");
            }
        }
        Cmd::EvalMap { checkpoint } => {
            let cfg = load_config(cli)?;
            let dir = out_dir(cli)?;
            let pipe: Pipeline<S> = build_pipeline(&cfg, checkpoint.as_deref())?;
            let ds = gen_synthetic(&cfg, cfg.seed)?;
            let report = evaluate::map_report(&pipe, &ds, Split::Test)?;
            io::write_json(&dir.join("map.json"), &report)?;
            println!("mAP: {:.4}", report.mean_average_precision);
        }
        Cmd::Probe { checkpoint } => {
            let cfg = load_config(cli)?;
            let dir = out_dir(cli)?;
            let pipe: Pipeline<S> = build_pipeline(&cfg, checkpoint.as_deref())?;
            let ds = gen_synthetic(&cfg, cfg.seed)?;
            let report = evaluate::probe_report(&pipe, &ds)?;
            io::write_json(&dir.join("probe.json"), &report)?;
            println!(
                "linear probe ({} shots): accuracy {:.4}",
                report.shots, report.accuracy
            );
        }
        Cmd::Embed { checkpoint, split } => {
            let cfg = load_config(cli)?;
            let dir = out_dir(cli)?;
            let pipe: Pipeline<S> = build_pipeline(&cfg, checkpoint.as_deref())?;
            let ds = gen_synthetic(&cfg, cfg.seed)?;
            let which = split_arg(split)?;
            let fs = evaluate::export_features(&pipe, &ds, which)?;
            let path = dir.join(format!("features-{split}.bin"));
            std::fs::write(&path, encode_feature_store(&fs))?;
            println!("wrote {} feature records to {}", fs.len(), path.display());
        }
        Cmd::Gradcheck { h, tolerance } => {
            // Gradient checking always runs the 64-bit micro pipeline for
            // the configured modality; full-size configs would take hours
            // under central differencing.
            let cfg = load_config(cli)?;
            let micro = gradcheck::micro_config(cfg.modality, cfg.seed);
            let check = gradcheck::check_micro(&micro, *h, *tolerance)?;
            println!(
                "{}: {} trainable elements, loss {:.6}, max relative error {:.3e} (tolerance {:.1e}): {}",
                cfg.modality.name(),
                check.trainable,
                check.loss,
                check.report.max_rel_error,
                check.report.tolerance,
                if check.passed() { "pass" } else { "FAIL" }
            );
            if !check.passed() {
                return Ok(1);
            }
        }
        Cmd::BenchFlops { lengths, repeats } => {
            let cfg = load_config(cli)?;
            let dir = out_dir(cli)?;
            let mut flops_rows = Vec::new();
            for &m in lengths {
                let s = bench::trunk_seq_len(&cfg, m);
                flops_rows.push(vec![
                    m.to_string(),
                    s.to_string(),
                    bench::trunk_score_flops(&cfg, m).to_string(),
                    bench::score_flops_per_layer(m, cfg.backbone.d).to_string(),
                ]);
            }
            io::write_csv(
                &dir.join("flops.csv"),
                &["m", "trunk_seq_len", "trunk_score_flops", "full_routing_score_flops_per_layer"],
                &flops_rows,
            )?;
            let timings = bench::routing_timings::<S>(
                lengths,
                cfg.backbone.d,
                cfg.backbone.heads,
                *repeats,
            )?;
            let rows: Vec<Vec<String>> = timings
                .iter()
                .map(|r| {
                    vec![
                        r.m.to_string(),
                        r.score_flops.to_string(),
                        format!("{:.6}", r.seconds),
                        format!("{:.6}", r.predicted),
                    ]
                })
                .collect();
            io::write_csv(
                &dir.join("timing.csv"),
                &["m", "score_flops", "seconds", "quadratic_fit_seconds"],
                &rows,
            )?;
            for r in &timings {
                println!(
                    "m={}: {:.4}s measured, {:.4}s quadratic fit",
                    r.m, r.seconds, r.predicted
                );
            }
            println!("tables in {}", dir.display());
        }
        Cmd::Verify => {
            let seed = cli.seed.unwrap_or(414);
            let checks = verify::run_all(seed);
            let mut failed = 0;
            for c in &checks {
                match &c.error {
                    None => println!("ok - {}", c.name),
                    Some(err) => {
                        failed += 1;
                        println!("FAIL - {}: {err}", c.name);
                    }
                }
            }
            println!("{} checks, {} failed", checks.len(), failed);
            if failed > 0 {
                return Ok(1);
            }
        }
    }
    Ok(0)
}

fn main() {
    let cli = Cli::parse();
    let code = match cli.precision {
        Precision::F32 => run::<f32>(&cli),
        Precision::F64 => run::<f64>(&cli),
    };
    match code {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(2);
        }
    }
}
