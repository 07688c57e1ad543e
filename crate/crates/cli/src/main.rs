use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lfact::config::RunConfig;
use lfact::data::{gen_market_surrogate, gen_modsum, Dataset, Split, MARKET_CHANNELS};
use lfact::lfact::{CombinerKind, Strategy};
use lfact::model::{ModelKind, ModelSpec, TinyCheck};
use lfact::numeric::{max_relative_error, Rng};
use lfact::training::{evaluate, fit, Checkpoint};
use lfact::{Error, Result};

const CHECKPOINT_FILE: &str = "checkpoint.lfck";
const GRADCHECK_STEP: f64 = 1e-4;
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "lfact", version, about = "Dynamic-depth recurrent network lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalSplit {
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Emit {
    Nt,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dims {
    Small,
}

#[derive(Clone, Copy, ValueEnum)]
enum GenTask {
    Modsum,
    Market,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, metrics and halting statistics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a metric report for a checkpoint as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config file whose data keys select the dataset; defaults to the
        /// checkpoint's own config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: EvalSplit,
    },
    /// Per-step halting-depth distributions for every split.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        emit: Emit,
        /// Write nt_distribution_{split}.csv here instead of to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of a tiny model's gradients.
    Gradcheck {
        #[arg(long, value_parser = parse_kind)]
        model: ModelKind,
        #[arg(long, value_enum, default_value = "small")]
        dims: Dims,
        #[arg(long, value_parser = parse_strategy, default_value = "all")]
        strategy: Strategy,
        #[arg(long, value_parser = parse_combiner, default_value = "affine")]
        combiner: CombinerKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Write a synthetic dataset in the export format.
    Gendata {
        #[arg(long, value_enum)]
        task: GenTask,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long)]
        seq_len: Option<usize>,
    },
}

fn parse_kind(s: &str) -> std::result::Result<ModelKind, String> {
    ModelKind::parse(s).ok_or_else(|| format!("unknown model {s:?}; expected rnn, act or lfact"))
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    match s {
        "ltd" => Ok(Strategy::Ltd),
        "all" => Ok(Strategy::All),
        _ => Err(format!("unknown strategy {s:?}; expected ltd or all")),
    }
}

fn parse_combiner(s: &str) -> std::result::Result<CombinerKind, String> {
    match s {
        "affine" => Ok(CombinerKind::Affine),
        "mlp" => Ok(CombinerKind::Mlp),
        _ => Err(format!("unknown combiner {s:?}; expected affine or mlp")),
    }
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::parse(&text)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn spec_for(config: &RunConfig, data: &Dataset) -> ModelSpec {
    config.model_spec(data.input_dim, data.heads, data.classes)
}

fn split_names() -> [&'static str; 3] {
    [Split::Train.name(), Split::Val.name(), Split::Test.name()]
}

fn cmd_train(config: &Path, out: &Path) -> Result<()> {
    let config = read_config(config)?;
    let sets = config.datasets()?;
    let spec = spec_for(&config, &sets[0]);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join("metrics.jsonl");
    let mut log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let outcome = fit(&config, &spec, &sets[0], &sets[1], |report| {
        writeln!(log, "{}", report.to_json()).map_err(|e| Error::io(&log_path, e))
    })?;
    let best = &outcome.best;
    best.save(&out.join(CHECKPOINT_FILE))?;
    let loss = config.loss();
    for (name, data) in split_names().into_iter().zip(&sets) {
        if data.is_empty() {
            continue;
        }
        let eval = evaluate(&spec, &best.params, data, loss)?;
        if name == "test" {
            let report = eval.report(Some(best.epoch), name, spec.kind.name(), data.task);
            writeln!(log, "{}", report.to_json()).map_err(|e| Error::io(&log_path, e))?;
        }
        write_file(
            &out.join(format!("nt_distribution_{name}.csv")),
            &eval.nt.to_csv(),
        )?;
    }
    eprintln!(
        "trained {} epochs; best epoch {} with validation {} = {}",
        outcome.evaluations,
        best.epoch,
        lfact::training::score_name(config.task).0,
        best.best_metric.unwrap_or(f64::NAN)
    );
    Ok(())
}

/// Checkpoint, the config describing the data, the datasets and a spec
/// checked against the checkpoint's parameters.
fn load_for_eval(
    checkpoint: &Path,
    data: Option<&Path>,
) -> Result<(Checkpoint, RunConfig, [Dataset; 3], ModelSpec)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let config = match data {
        Some(p) => read_config(p)?,
        None => RunConfig::parse(&ckpt.config)?,
    };
    let sets = config.datasets()?;
    let spec = spec_for(&config, &sets[0]);
    spec.check_params(&ckpt.params)?;
    Ok((ckpt, config, sets, spec))
}

fn cmd_eval(checkpoint: &Path, data: Option<&Path>, split: EvalSplit) -> Result<()> {
    let (ckpt, config, sets, spec) = load_for_eval(checkpoint, data)?;
    let (name, set) = match split {
        EvalSplit::Val => ("val", &sets[1]),
        EvalSplit::Test => ("test", &sets[2]),
    };
    let eval = evaluate(&spec, &ckpt.params, set, config.loss())?;
    println!(
        "{}",
        eval.report(Some(ckpt.epoch), name, spec.kind.name(), set.task)
            .to_json()
    );
    Ok(())
}

fn cmd_inspect(checkpoint: &Path, data: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let (ckpt, config, sets, spec) = load_for_eval(checkpoint, data)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for (name, set) in split_names().into_iter().zip(&sets) {
        if set.is_empty() {
            continue;
        }
        let nt = evaluate(&spec, &ckpt.params, set, config.loss())?.nt;
        match out {
            Some(dir) => {
                write_file(
                    &dir.join(format!("nt_distribution_{name}.csv")),
                    &nt.to_csv(),
                )?;
                println!("{name} multi_round_fraction {}", nt.multi_round_fraction);
            }
            None => {
                println!(
                    "# split {name} multi_round_fraction {}",
                    nt.multi_round_fraction
                );
                print!("{}", nt.to_csv());
            }
        }
    }
    Ok(())
}

fn cmd_gradcheck(
    kind: ModelKind,
    strategy: Strategy,
    combiner: CombinerKind,
    seed: u64,
    corrupt: bool,
) -> Result<bool> {
    let report = TinyCheck::new(kind, strategy, combiner, seed).run(GRADCHECK_STEP)?;
    let mut error = report.max_rel_error;
    if corrupt {
        let mut analytic = report.analytic.clone();
        if let Some(a) = analytic.first_mut() {
            *a += 1.0;
        }
        error = max_relative_error(&analytic, &report.numeric).0;
    }
    println!(
        "{} max relative error {error:e} over {} coordinates",
        kind.name(),
        report.coordinates.len()
    );
    Ok(error <= GRADCHECK_TOLERANCE)
}

fn cmd_gendata(
    task: GenTask,
    seed: u64,
    out: &Path,
    n: usize,
    seq_len: Option<usize>,
) -> Result<()> {
    let mut rng = Rng::seeded(seed);
    let data = match task {
        GenTask::Modsum => gen_modsum(&mut rng, n, seq_len.unwrap_or(20), Split::Train)?,
        GenTask::Market => gen_market_surrogate(
            &mut rng,
            n,
            seq_len.unwrap_or(30),
            MARKET_CHANNELS,
            Split::Train,
        )?,
    };
    write_file(out, &data.export())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, out } => cmd_train(&config, &out).map(|_| true),
        Command::Eval {
            checkpoint,
            data,
            split,
        } => cmd_eval(&checkpoint, data.as_deref(), split).map(|_| true),
        Command::Inspect {
            checkpoint,
            data,
            emit: Emit::Nt,
            out,
        } => cmd_inspect(&checkpoint, data.as_deref(), out.as_deref()).map(|_| true),
        Command::Gradcheck {
            model,
            dims: Dims::Small,
            strategy,
            combiner,
            seed,
            corrupt,
        } => cmd_gradcheck(model, strategy, combiner, seed, corrupt),
        Command::Gendata {
            task,
            seed,
            out,
            n,
            seq_len,
        } => cmd_gendata(task, seed, &out, n, seq_len).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
