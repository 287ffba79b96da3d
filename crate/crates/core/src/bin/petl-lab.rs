use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use petl_core::data::{export_toy_dataset, synthesize_toy_dataset, Split, ToyDatasetConfig};
use petl_core::runner::{
    emit_report, export_checkpoint_embeddings, grad_check_with, run_benchmark, run_single, GradCheckOptions, RunConfig,
};
use petl_core::{PetlError, Result};

#[derive(Parser)]
#[command(
    name = "petl-lab",
    version,
    about = "Parameter-efficient transfer learning for image-text retrieval"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one config and write its checkpoint and report.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every config in a directory over its folds and write the table.
    Bench {
        #[arg(long)]
        configs: PathBuf,
        /// Report directory, `<configs>/report` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients on one batch.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        /// Check a random sample of entries per tensor.
        #[arg(long)]
        max_per_tensor: Option<usize>,
        /// Fail when the maximum relative error reaches this value.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Generate the synthetic dataset as a manifest plus PNG files.
    MakeToyData {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        captions_per_image: usize,
        #[arg(long, default_value_t = 16)]
        image_size: usize,
        #[arg(long, default_value_t = 0.1)]
        noise_std: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump image and caption embeddings of one split as .npy files.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = ["train", "val", "test"])]
        split: String,
        /// Output directory, next to the checkpoint by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_dir(dir: &Path) -> Result<Vec<RunConfig>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| PetlError::config(format!("cannot list {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("toml" | "json")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(PetlError::config(format!(
            "no .toml or .json configs in {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| RunConfig::load(p)).collect()
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run { config, seed, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let art = run_single(&cfg)?;
            let r = &art.result;
            println!(
                "{}: test mR {:.2} (untrained {:.2}), best epoch {}, {} steps, {:.1}s",
                r.label, r.test.mr, r.initial_test.mr, r.best_epoch, r.steps, r.wall_clock_secs
            );
            println!("trainable {} / total {}", r.params.trainable, r.params.total);
            println!("checkpoint {}", art.checkpoint.display());
        }
        Command::Bench { configs, out } => {
            let cfgs = load_dir(&configs)?;
            let table = run_benchmark(&cfgs)?;
            let out = out.unwrap_or_else(|| configs.join("report"));
            emit_report(&table, &[], &out)?;
            for row in &table.rows {
                println!(
                    "{:<24} mR {:>6.2}  trainable {}",
                    row.label, row.metrics.mr, row.metrics.params_trainable
                );
            }
            for f in &table.failures {
                eprintln!("FAILED {} fold {}: {}", f.label, f.fold, f.error);
            }
            println!("report in {}", out.display());
            if table.rows.is_empty() {
                return Err(PetlError::numerical("every benchmark run failed"));
            }
        }
        Command::Gradcheck {
            config,
            epsilon,
            max_per_tensor,
            tolerance,
        } => {
            let cfg = RunConfig::load(&config)?;
            let report = grad_check_with(
                &cfg,
                &GradCheckOptions {
                    epsilon,
                    max_entries_per_tensor: max_per_tensor,
                    ..Default::default()
                },
            )?;
            for (name, err) in &report.per_param {
                println!("{name:<40} {err:.3e}");
            }
            println!(
                "max relative error {:.3e} ({}), {} entries compared, {} skipped at kinks",
                report.max_rel_err, report.worst_param, report.entries_checked, report.kinks_skipped
            );
            if !report.frozen_with_grad.is_empty() {
                return Err(PetlError::numerical(format!(
                    "frozen tensors received gradients: {:?}",
                    report.frozen_with_grad
                )));
            }
            if report.max_rel_err >= tolerance {
                return Err(PetlError::numerical(format!(
                    "gradient check failed: {:.3e} >= {tolerance:.1e}",
                    report.max_rel_err
                )));
            }
        }
        Command::MakeToyData {
            classes,
            per_class,
            out,
            captions_per_image,
            image_size,
            noise_std,
            seed,
        } => {
            let cfg = ToyDatasetConfig {
                n_classes: classes,
                items_per_class: per_class,
                captions_per_image,
                image_size,
                noise_std,
                seed,
                vocab_size: ToyDatasetConfig::default().vocab_size.max(3 * classes),
                ..Default::default()
            };
            let ds = synthesize_toy_dataset(&cfg)?;
            let manifest = export_toy_dataset(&ds, &out)?;
            println!("{} items written, manifest {}", ds.manifest.len(), manifest.display());
        }
        Command::ExportEmbeddings { checkpoint, split, out } => {
            let split = Split::parse(&split)?;
            let out = out.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join("embeddings"));
            for p in export_checkpoint_embeddings(&checkpoint, split, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
