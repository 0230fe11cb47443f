use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use p2r::checkpoint;
use p2r::config::RunConfig;
use p2r::controller::{delink, Stage};
use p2r::data::{eval_batches, Corpus, Tokenizer};
use p2r::metrics::{export_curves, read_metrics_file};
use p2r::offload::{format_plan_report, layer_size_table, plan_offload, ByteProfile};
use p2r::run::run_from_config;
use p2r::train::eval_loss;
use p2r::Error;

#[derive(Parser)]
#[command(name = "p2r", version, about = "Pseudo-to-Real pretraining with granular offloading")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train according to a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Fast-tier budget in bytes.
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Mean log perplexity of a checkpoint over a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Supplies a vocabulary file when the run used one.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        /// Limit on evaluation batches (0 = whole corpus).
        #[arg(long, default_value_t = 0)]
        max_batches: usize,
        /// Write per-position targets and logits as CSV.
        #[arg(long)]
        dump_logits: Option<PathBuf>,
    },
    /// Print the offload plan for a config without training.
    Plan {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        budget: Option<u64>,
    },
    /// Convert metrics files into plot-ready loss curves.
    ExportCurves {
        /// Metrics files; the run label is `label=path` or the file stem.
        #[arg(required = true)]
        metrics: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert a Pseudo checkpoint into a Real checkpoint.
    Delink {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reset optimizer moments instead of copying them.
        #[arg(long)]
        zero_moments: bool,
    },
}

/// Failure with its exit code: 1 for usage/config, 2 for runtime.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

fn config_failure(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 1,
        err: e.into(),
    }
}

fn runtime_failure(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 2,
        err: e.into(),
    }
}

fn classify(e: Error) -> Failure {
    match e {
        Error::Config(_) => config_failure(e),
        other => runtime_failure(other),
    }
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    RunConfig::load(path)
        .with_context(|| format!("loading config {}", path.display()))
        .map_err(config_failure)
}

fn cmd_train(
    config: &Path,
    seed: Option<u64>,
    budget: Option<u64>,
    out: &Path,
    resume: Option<&Path>,
) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(b) = budget {
        cfg.offload_budget = Some(b);
    }
    cfg.validate().map_err(config_failure)?;
    let outcome = run_from_config(&cfg, Some(out), resume).map_err(classify)?;
    let delinks = outcome
        .records
        .iter()
        .filter(|r| r.event.as_deref() == Some("DELINK"))
        .count();
    println!("steps={}", outcome.state.global_step);
    println!("stage={}", outcome.state.stage);
    println!("wall_time_s={}", outcome.state.wall_time_s);
    println!("samples={}", outcome.state.samples_consumed);
    println!("final_eval_loss={}", outcome.final_eval);
    println!("delinks={delinks}");
    if let Some(e) = outcome.error {
        return Err(runtime_failure(e));
    }
    Ok(())
}

fn cmd_eval(
    ck_path: &Path,
    corpus: &Path,
    config: Option<&Path>,
    batch: usize,
    max_batches: usize,
    dump: Option<&Path>,
) -> Result<(), Failure> {
    let tok = match config {
        Some(p) => {
            let cfg = load_config(p)?;
            p2r::run::tokenizer(&cfg).map_err(config_failure)?
        }
        None => Tokenizer::Bytes,
    };
    let ck = checkpoint::load(ck_path).map_err(runtime_failure)?;
    if tok.vocab_size() != ck.model.config.vocab_size {
        return Err(runtime_failure(Error::Dimension(format!(
            "tokenizer has {} ids, checkpoint vocabulary {}",
            tok.vocab_size(),
            ck.model.config.vocab_size
        ))));
    }
    let corpus = Corpus::ingest(corpus, ck.model.config.seq_len, &tok).map_err(runtime_failure)?;
    let limit = if max_batches == 0 { usize::MAX } else { max_batches };
    let batches = eval_batches(&corpus, batch.max(1), limit);
    let loss = eval_loss(&ck.model, &batches).map_err(runtime_failure)?;
    if let Some(path) = dump {
        let mut w = csv::Writer::from_path(path)
            .with_context(|| format!("creating {}", path.display()))
            .map_err(runtime_failure)?;
        for b in &batches {
            let logits = ck.model.forward(&b.inputs).map_err(runtime_failure)?;
            let v = ck.model.config.vocab_size;
            for (i, row) in logits.data().chunks(v).enumerate() {
                let mut rec = vec![b.targets.ids[i].to_string(), (b.loss_mask[i] as u8).to_string()];
                rec.extend(row.iter().map(|x| x.to_string()));
                w.write_record(&rec).map_err(runtime_failure)?;
            }
        }
        w.flush().map_err(runtime_failure)?;
    }
    println!("eval_loss={loss}");
    println!("batches={}", batches.len());
    Ok(())
}

fn cmd_plan(config: &Path, budget: Option<u64>) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let profile = ByteProfile::from_config(&cfg.model_config(false));
    let budget = budget
        .or(cfg.offload_budget)
        .unwrap_or_else(|| profile.total_residency());
    match plan_offload(&profile, budget, &cfg.link, &cfg.coefficients) {
        Ok(plan) => {
            let report = format_plan_report(&plan, &profile, budget, &cfg.coefficients, None)
                .map_err(runtime_failure)?;
            print!("{report}");
            Ok(())
        }
        Err(e @ Error::Capacity(_)) => {
            eprint!("{}", layer_size_table(&profile));
            Err(runtime_failure(e))
        }
        Err(e) => Err(classify(e)),
    }
}

fn cmd_export(metrics: &[String], out: Option<&Path>) -> Result<(), Failure> {
    let mut runs = Vec::new();
    for m in metrics {
        let (label, path) = match m.split_once('=') {
            Some((l, p)) => (l.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(m);
                let label = p
                    .parent()
                    .and_then(|d| d.file_name())
                    .or_else(|| p.file_stem())
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| m.clone());
                (label, p)
            }
        };
        let records = read_metrics_file(&path)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(runtime_failure)?;
        runs.push((label, records));
    }
    match out {
        Some(p) => {
            let f = fs::File::create(p)
                .with_context(|| format!("creating {}", p.display()))
                .map_err(runtime_failure)?;
            export_curves(&runs, f).map_err(runtime_failure)
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            export_curves(&runs, &mut lock).map_err(runtime_failure)?;
            lock.flush().map_err(runtime_failure)
        }
    }
}

fn cmd_delink(input: &Path, out: &Path, zero_moments: bool) -> Result<(), Failure> {
    let mut ck = checkpoint::load(input).map_err(runtime_failure)?;
    let (model, optimizer) =
        delink(&ck.model, &ck.optimizer, !zero_moments).map_err(runtime_failure)?;
    ck.model = model;
    ck.optimizer = optimizer;
    ck.stage_step = 0;
    ck.state.stage = Stage::Real;
    ck.state.switch_step = Some(ck.state.global_step);
    checkpoint::save(out, &ck).map_err(runtime_failure)?;
    println!("layers={}", ck.model.layers.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Train {
            config,
            seed,
            budget,
            out,
            checkpoint,
        } => cmd_train(config, *seed, *budget, out, checkpoint.as_deref()),
        Command::Eval {
            checkpoint,
            corpus,
            config,
            batch,
            max_batches,
            dump_logits,
        } => cmd_eval(
            checkpoint,
            corpus,
            config.as_deref(),
            *batch,
            *max_batches,
            dump_logits.as_deref(),
        ),
        Command::Plan { config, budget } => cmd_plan(config, *budget),
        Command::ExportCurves { metrics, out } => cmd_export(metrics, out.as_deref()),
        Command::Delink {
            checkpoint,
            out,
            zero_moments,
        } => cmd_delink(checkpoint, out, *zero_moments),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
