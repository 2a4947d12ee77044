use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mapdistill::core::audit::{audit_all, TOLERANCE};
use mapdistill::core::map::ElementClass;
use mapdistill::core::synth::generate_dataset;
use mapdistill::dataset::{save_dataset, write_text};
use mapdistill::runner::{ablate, eval_files, load_config, train};
use mapdistill::{CliError, Result};

#[derive(Parser)]
#[command(name = "mapdistill", version, about = "Toy-scale camera-to-map distillation from a fusion teacher")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Configuration override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic ground-truth samples as JSON lines.
    SynthData {
        #[arg(long, default_value_t = 256)]
        count: usize,
        /// File name inside the output directory.
        #[arg(long, default_value = "dataset.jsonl")]
        file: String,
    },
    /// Pre-train the teacher and/or distil the student, per `phase`.
    Train {
        /// Teacher checkpoint directory for `phase = student`.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Score a prediction file against ground truth.
    Eval {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Run all eight loss-combination rows over several seeds.
    Ablate {
        /// Comma-separated seeds.
        #[arg(long, default_value = "0,1,2,3,4", value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Compare every differentiable operation with central differences.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
}

fn say(quiet: bool, msg: &str) {
    if !quiet {
        eprintln!("{msg}");
    }
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    let out: &Path = &c.out;
    match cli.command {
        Command::SynthData { count, file } => {
            let cfg = load_config(c.config.as_deref(), &c.set, c.seed)?;
            let seed = c.seed.unwrap_or(cfg.data_seed);
            let scenes = generate_dataset(seed, count, &cfg.pipeline, &cfg.scene)?;
            let samples: Vec<_> = scenes.into_iter().map(|s| s.sample).collect();
            let path = out.join(file);
            save_dataset(&path, &samples)?;
            say(c.quiet, &format!("wrote {} samples to {}", samples.len(), path.display()));
        }
        Command::Train { teacher } => {
            let cfg = load_config(c.config.as_deref(), &c.set, c.seed)?;
            let outcome = train(&cfg, out, teacher.as_deref())?;
            for (name, run) in [("teacher", &outcome.teacher), ("student", &outcome.student)] {
                if let Some(r) = run {
                    say(c.quiet, &format!("{name}: final mAP {:.4} ({:.1}s)", r.final_map(), r.wall_seconds.unwrap_or(0.0)));
                }
            }
        }
        Command::Eval { preds, gt } => {
            let report = eval_files(&preds, &gt, out)?;
            let per_class: serde_json::Map<String, serde_json::Value> = ElementClass::ALL
                .iter()
                .map(|cl| (cl.name().to_string(), serde_json::json!(report.per_class[cl.id()])))
                .collect();
            println!("{}", serde_json::json!({ "map": report.map, "per_class": per_class, "thresholds": report.thresholds }));
        }
        Command::Ablate { seeds } => {
            if seeds.is_empty() {
                return Err(CliError::Usage("--seeds must list at least one seed".into()));
            }
            let cfg = load_config(c.config.as_deref(), &c.set, None)?;
            write_text(&out.join("config.txt"), &cfg.to_kv_text())?;
            let summary = ablate(&cfg, &seeds, Some(out), |m| say(c.quiet, m))?;
            for (row, m) in summary.row_means() {
                say(c.quiet, &format!("{row:9} mean mAP {m:.4}"));
            }
            say(c.quiet, &format!("teacher   mean mAP {:.4}", summary.teacher_mean()));
        }
        Command::GradCheck { instances } => {
            let seed = c.seed.unwrap_or(0);
            let results = audit_all(instances, seed)?;
            let mut csv = String::from("operation,instances,coordinates,max_rel_error,status\n");
            let mut failed = Vec::new();
            for r in &results {
                let status = if r.passed() { "pass" } else { "fail" };
                let _ = writeln!(csv, "{},{},{},{:e},{status}", r.operation, r.instances, r.coordinates, r.max_rel_error);
                say(c.quiet, &format!("{status} {:24} max rel error {:.3e}", r.operation, r.max_rel_error));
                if !r.passed() {
                    failed.push(r.operation);
                }
            }
            write_text(&out.join("grad_check.csv"), &csv)?;
            if !failed.is_empty() {
                return Err(mapdistill::core::Error::Numeric(format!(
                    "gradient check above {TOLERANCE:e} for: {}",
                    failed.join(", ")
                ))
                .into());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let err = CliError::Usage(e.to_string().lines().next().unwrap_or("invalid arguments").to_string());
            eprintln!("{}", err.to_json_line());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
