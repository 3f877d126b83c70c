use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scenestream::enhancer::make_synthetic_weights;
use scenestream::evalkit::{read_report, write_report, ReportRow, ReportTable, TableKind};
use scenestream::numerics::suite::{primitive_suite, ISOLATED_TOLERANCE};
use scenestream::pipeline::{
    ablate, evaluate_baseline, evaluate_checkpoint, pipeline_grad_check, train, Checkpoint, GridSpec, RunConfig,
    BEST_CHECKPOINT, PIPELINE_TOLERANCE,
};
use scenestream::scenario::{read_dataset, synthetic_dataset, write_dataset, SynthConfig};
use scenestream::{Error, Result};

/// Coordinate stride of the default (non-`--full`) pipeline check.
const QUICK_STRIDE: usize = 13;

#[derive(Parser)]
#[command(name = "scenestream", version, about = "Scene-memory motion forecasting toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a seeded synthetic dataset.
    GenData {
        #[arg(long)]
        seed: u64,
        /// Training scenarios.
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Validation scenarios; defaults to a quarter of `--count`.
        #[arg(long)]
        val_count: Option<usize>,
    },
    /// Writes a synthetic foreign-transformer manifest and weight blob.
    MakeWeights {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        layers: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        heads: usize,
        #[arg(long)]
        out: PathBuf,
    },
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Scores a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `.json` or `.csv`.
        #[arg(long)]
        report: PathBuf,
        /// Adds a constant-velocity row.
        #[arg(long)]
        with_baseline: bool,
    },
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Primitive and end-to-end gradient checks.
    Gradcheck {
        /// Checks every pipeline coordinate instead of a stride.
        #[arg(long)]
        full: bool,
    },
    /// Merges reports into one table on stdout.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        table: u32,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            seed,
            count,
            out,
            val_count,
        } => {
            let val = val_count.unwrap_or(count / 4);
            let ds = synthetic_dataset(seed, count, val, &SynthConfig::default());
            write_dataset(&out, &ds)?;
            println!("wrote {count} train and {val} val scenarios to {}", out.display());
        }
        Command::MakeWeights {
            seed,
            layers,
            dim,
            heads,
            out,
        } => {
            let m = make_synthetic_weights(seed, layers, dim, heads, &out)?;
            println!("wrote {} layers of width {} ({} tensors)", layers, dim, m.tensors.len());
        }
        Command::Train {
            config,
            data,
            out,
            resume,
        } => {
            let cfg = RunConfig::load(&config)?;
            let ds = read_dataset(&data)?;
            let resume = resume.map(|p| load_resume(&p)).transpose()?;
            let outcome = train(&cfg, &ds, resume, Some(&out))?;
            for l in &outcome.log {
                let val = l.val.map_or_else(|| "-".into(), |v| format!("{:.4}", v.min_fde6));
                println!(
                    "epoch {:>3}  steps {:>6}  loss {:.5}  reg {:.5}  cls {:.5}  val minFDE6 {val}{}",
                    l.epoch,
                    l.steps,
                    l.train_total,
                    l.train_regression,
                    l.train_classification,
                    if l.partial { "  (partial)" } else { "" }
                );
            }
        }
        Command::Eval {
            ckpt,
            data,
            report,
            with_baseline,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let ds = read_dataset(&data)?;
            let (m, _) = evaluate_checkpoint(&ck, &ds)?;
            let mut table = ReportTable::new(TableKind::Models);
            if with_baseline {
                let (b, _) = evaluate_baseline(&ck.config.model, &ds.val)?;
                table.rows.push(ReportRow {
                    label: "constant-velocity".into(),
                    flags: None,
                    layers: None,
                    metrics: b,
                });
            }
            table.rows.push(ck.report_row(m));
            write_report(&table, &report)?;
            print!("{}", table.render()?);
        }
        Command::Ablate { grid, data, out } => {
            let spec = GridSpec::load(&grid)?;
            let ds = read_dataset(&data)?;
            for t in ablate(&spec, &ds, Some(&out))? {
                println!("{}", t.render()?);
            }
        }
        Command::Gradcheck { full } => {
            let mut failed = Vec::new();
            for (name, r) in primitive_suite()? {
                let ok = r.passes(ISOLATED_TOLERANCE);
                println!("{:<16} {:.3e}  {}", name, r.max_rel_error, if ok { "ok" } else { "FAIL" });
                if !ok {
                    failed.push(name.to_string());
                }
            }
            let r = pipeline_grad_check(if full { 1 } else { QUICK_STRIDE })?;
            let ok = r.passes(PIPELINE_TOLERANCE);
            println!(
                "{:<16} {:.3e}  {}  ({} coordinates)",
                "pipeline",
                r.max_rel_error,
                if ok { "ok" } else { "FAIL" },
                r.coordinates
            );
            if !ok {
                failed.push("pipeline".into());
            }
            if !failed.is_empty() {
                return Err(Error::Numeric(format!("gradient check failed: {}", failed.join(", "))));
            }
        }
        Command::Report { inputs, table } => {
            let kind = TableKind::from_number(table)?;
            let tables = inputs.iter().map(|p| read_report(p)).collect::<Result<Vec<_>>>()?;
            print!("{}", ReportTable::collect(kind, &tables)?.render()?);
        }
    }
    Ok(())
}

/// The checkpoint plus the run's best checkpoint when it sits alongside.
fn load_resume(path: &Path) -> Result<(Checkpoint, Option<Checkpoint>)> {
    let ck = Checkpoint::load(path)?;
    let best_path = path.with_file_name(BEST_CHECKPOINT);
    let best = if best_path == path {
        Some(ck.clone())
    } else if best_path.exists() {
        Some(Checkpoint::load(&best_path)?)
    } else {
        None
    };
    Ok((ck, best))
}
