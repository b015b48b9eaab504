use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rpp::analysis::{export_pattern_pgm, neighbor_overlap, random_overlap_baseline, write_analysis};
use rpp::checkpoint::{check_pattern_consistent, load_checkpoint, save_checkpoint, Checkpoint};
use rpp::experiment::{compare_runs, run_experiment, ExperimentConfig, OutputLock, Pipeline, Protocol, OUTPUT_ROOT_ENV};
use rpp::pattern::extract_sparse_pattern;
use rpp::report::{metrics_csv, write_text};
use rpp::{Error, Result};

#[derive(Parser)]
#[command(name = "rpp", about = "Reweighted proximal pruning experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set rpp.gamma=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: pre-train, prune with `protocol`, fine-tune, analyse.
    Run(ConfigArgs),
    /// Dense pre-training only.
    Pretrain(ConfigArgs),
    PruneRpp(PruneArgs),
    PruneNip(PruneArgs),
    PrunePenalty(PruneArgs),
    /// Fixed-mask fine-tuning on the configured tasks.
    Finetune(PruneArgs),
    /// Structure CSV and Q/K pattern images; neighbour overlap with `--reference`.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// One tensor's zero set as a PGM image.
    ExportPattern {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tensor: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Align eval metrics of several metrics CSVs by prune ratio.
    Compare {
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct PruneArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Checkpoint to start from.
    #[arg(long)]
    from: PathBuf,
}

fn output_root() -> Option<PathBuf> {
    std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from)
}

fn load_config(a: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p, &a.overrides)?,
        None => ExperimentConfig::from_toml_with_overrides("", &a.overrides)?,
    };
    if let Some(out) = &a.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn load_matching(path: &Path, cfg: &ExperimentConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if ck.config != cfg.model {
        return Err(Error::Config(format!("{}: model config differs from the experiment config", path.display())));
    }
    check_pattern_consistent(&ck)?;
    Ok(ck)
}

fn prune(a: &PruneArgs, protocol: Protocol) -> Result<()> {
    let cfg = load_config(&a.cfg)?;
    let out = cfg.resolve_output(output_root().as_deref());
    let _lock = OutputLock::acquire(&out)?;
    let ck = load_matching(&a.from, &cfg)?;
    let pipe = Pipeline::new(cfg.clone())?;
    let r = pipe.prune(ck.params, protocol)?;
    write_text(&out.join("prune.metrics.csv"), &metrics_csv(&r.report.rows))?;
    if let Some(c) = &r.loss_curves {
        write_text(&out.join("loss_curves.csv"), c)?;
    }
    let saved = Checkpoint { pattern: Some(r.pattern.clone()), reweight: r.reweight, ..Checkpoint::new(cfg.model, r.params) };
    save_checkpoint(&out.join("pruned.ckpt"), &saved)?;
    println!("{}: prunable sparsity {}", out.display(), r.pattern.ratio());
    if let Some(f) = r.report.failure {
        println!("stopped early: {f}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(a) => {
            let cfg = load_config(&a)?;
            let s = run_experiment(&cfg, output_root().as_deref())?;
            println!("{}: prunable sparsity {}", s.output_dir.display(), s.pattern.ratio());
            for (task, acc) in &s.task_accuracy {
                println!("  {task}: eval accuracy {acc:.4}");
            }
        }
        Command::Pretrain(a) => {
            let cfg = load_config(&a)?;
            let out = cfg.resolve_output(output_root().as_deref());
            let _lock = OutputLock::acquire(&out)?;
            let pipe = Pipeline::new(cfg.clone())?;
            let mut params = pipe.init_params()?;
            let mut report = pipe.pretrain(&mut params)?;
            report.rows.push(pipe.eval_row(&params, "pretrain", cfg.pretrain.steps)?);
            write_text(&out.join("pretrain.metrics.csv"), &metrics_csv(&report.rows))?;
            save_checkpoint(&out.join("pretrain.ckpt"), &Checkpoint::new(cfg.model, params))?;
            println!("{}", out.join("pretrain.ckpt").display());
        }
        Command::PruneRpp(a) => prune(&a, Protocol::Rpp)?,
        Command::PruneNip(a) => prune(&a, Protocol::Nip)?,
        Command::PrunePenalty(a) => prune(&a, Protocol::Penalty)?,
        Command::Finetune(a) => {
            let cfg = load_config(&a.cfg)?;
            let out = cfg.resolve_output(output_root().as_deref());
            let _lock = OutputLock::acquire(&out)?;
            let ck = load_matching(&a.from, &cfg)?;
            let pattern = ck.pattern.clone().unwrap_or_else(|| extract_sparse_pattern(&ck.params));
            let pipe = Pipeline::new(cfg)?;
            let r = pipe.finetune(&ck.params, &pattern, 0)?;
            write_text(&out.join("finetune.metrics.csv"), &metrics_csv(&r.report.rows))?;
            for (task, o) in &r.outcomes {
                println!("{task}: eval accuracy {:.4}", o.eval_accuracy);
            }
        }
        Command::Analyze { checkpoint, reference, k, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            check_pattern_consistent(&ck)?;
            let pattern = ck.pattern.clone().unwrap_or_else(|| extract_sparse_pattern(&ck.params));
            let label = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
            for (name, p) in write_analysis(&ck.params, &pattern, label, &out)? {
                println!("{name}: density {:.4} column score {:.4} row score {:.4}", p.density, p.column_score, p.row_score);
            }
            if let Some(r) = reference {
                let base = load_checkpoint(&r)?;
                let o = neighbor_overlap(&base.params, &ck.params, k)?;
                let baseline = random_overlap_baseline(ck.config.vocab, k);
                write_text(
                    &out.join("neighbors.csv"),
                    &format!("k,overlap,random_baseline,excluded\n{k},{},{baseline},{}\n", o.mean, o.excluded),
                )?;
                println!("neighbour overlap {:.4} (random {:.4}, {} rows excluded)", o.mean, baseline, o.excluded);
            }
        }
        Command::ExportPattern { checkpoint, tensor, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let t = ck.params.tensor(&tensor)?;
            let [rows, cols] = *t.shape() else {
                return Err(Error::InvalidArgument(format!("`{tensor}` is not a matrix")));
            };
            let zeros: Vec<usize> = t.data().iter().enumerate().filter(|(_, &v)| v == 0.0).map(|(i, _)| i).collect();
            export_pattern_pgm(&zeros, rows, cols, &out)?;
        }
        Command::Compare { reports, out } => {
            let table = compare_runs(&reports)?;
            match out {
                Some(p) => write_text(&p, &table)?,
                None => print!("{table}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::try_parse().unwrap_or_else(|e| {
        let _ = e.print();
        std::process::exit(if e.use_stderr() { 2 } else { 0 });
    });
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
