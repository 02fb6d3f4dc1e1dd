use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dhan::checkpoint::Checkpoint;
use dhan::config::RunConfig;
use dhan::data::synthetic::{generate, SyntheticConfig, INTERACTIONS_FILE, NEWS_FILE};
use dhan::data::Dataset;
use dhan::eval::{evaluate, export_attention, select_instance};
use dhan::model::{Model, ModelConfig};
use dhan::train::{ablation_table, cmd_ablate, cmd_train, eval_seed, load_dataset, parse_grid};
use dhan::Error;

#[derive(Parser)]
#[command(name = "dhan", version, about = "Time-aware hierarchical attention news recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus with controllable temporal signal.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        users: usize,
        #[arg(long, default_value_t = 200)]
        news: usize,
        #[arg(long, default_value_t = 20)]
        interactions: usize,
        #[arg(long, default_value_t = 1000)]
        vocab: usize,
        #[arg(long, default_value_t = 0.9)]
        alpha: f64,
        #[arg(long, default_value_t = 8)]
        topics: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train, evaluating every epoch, and write the best checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Metric that selects the saved checkpoint (hr@N or ndcg@N).
        #[arg(long)]
        best_by: Option<String>,
    },
    /// Evaluate a checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one model per variant and print a comparison table.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// `time`, `layers`, `dns`, or comma-separated `mode:layers:dns|uniform`.
        #[arg(long)]
        grid: String,
    },
    /// Write the attention matrices of one test instance as CSV.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test instance index, or `random:<seed>`.
        #[arg(long)]
        instance: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Exit status classes.
enum Failure {
    Config(String),
    Data(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Runtime(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Data(m) | Failure::Runtime(m) => m,
        }
    }
}

/// Errors while reading inputs: I/O counts as a data problem.
fn input(e: Error) -> Failure {
    match e {
        Error::Config(_) => Failure::Config(e.to_string()),
        Error::Parse { .. } | Error::Data(_) | Error::Io(_) | Error::Checkpoint(_) | Error::Infeasible(_) => Failure::Data(e.to_string()),
        other => Failure::Runtime(other.to_string()),
    }
}

/// Errors after inputs are loaded.
fn runtime(e: Error) -> Failure {
    match e {
        Error::Config(_) => Failure::Config(e.to_string()),
        Error::Data(_) | Error::Parse { .. } => Failure::Data(e.to_string()),
        other => Failure::Runtime(other.to_string()),
    }
}

fn io_failure(e: io::Error) -> Failure {
    Failure::Runtime(e.to_string())
}

/// File values, then `DHAN_SEED`, then `--set` overrides.
fn resolve(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut run = RunConfig::default();
    if let Some(p) = &args.config {
        run = RunConfig::from_file(p).map_err(input)?;
    }
    apply_overrides(&mut run, args)?;
    Ok(run)
}

fn apply_overrides(run: &mut RunConfig, args: &ConfigArgs) -> Result<(), Failure> {
    run.apply_env().map_err(input)?;
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::Config(format!("config error: `--set {o}` is not KEY=VALUE")))?;
        run.set(k.trim(), v.trim()).map_err(input)?;
    }
    run.validate().map_err(input)
}

/// Checkpoint, its config with overrides applied, and the dataset it names.
fn load_checkpoint(path: &Path, args: &ConfigArgs) -> Result<(Model, RunConfig, Dataset), Failure> {
    let ckpt = Checkpoint::load(path).map_err(input)?;
    let mut run = ckpt.config.clone();
    if let Some(p) = &args.config {
        let file = RunConfig::from_file(p).map_err(input)?;
        run.interactions = file.interactions;
        run.news = file.news;
        run.format = file.format;
    }
    apply_overrides(&mut run, args)?;
    let dataset = load_dataset(&run).map_err(input)?;
    let mcfg = ModelConfig::from_store(&run, &ckpt.store).map_err(input)?;
    if mcfg.num_news != dataset.corpus.num_news() || mcfg.num_users != dataset.corpus.num_users() {
        return Err(Failure::Data(format!(
            "data error: checkpoint was trained on {} users / {} articles, the dataset has {} / {}",
            mcfg.num_users,
            mcfg.num_news,
            dataset.corpus.num_users(),
            dataset.corpus.num_news()
        )));
    }
    let model = Model::from_store(mcfg, ckpt.store).map_err(input)?;
    Ok((model, run, dataset))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::GenSynthetic {
            out: dir,
            users,
            news,
            interactions,
            vocab,
            alpha,
            topics,
            seed,
        } => {
            let cfg = SyntheticConfig {
                users,
                news,
                interactions_per_user: interactions,
                vocab,
                alpha,
                topics,
                seed,
            };
            cfg.validate().map_err(input)?;
            let data = generate(&cfg).map_err(runtime)?;
            data.write(&dir).map_err(runtime)?;
            writeln!(
                out,
                "wrote {} interactions and {} articles to {}",
                data.interactions.len(),
                data.news.len(),
                dir.display()
            )
            .map_err(io_failure)?;
            writeln!(out, "interactions = {}", dir.join(INTERACTIONS_FILE).display()).map_err(io_failure)?;
            writeln!(out, "news = {}", dir.join(NEWS_FILE).display()).map_err(io_failure)?;
        }
        Command::Train { cfg, best_by } => {
            let mut run = resolve(&cfg)?;
            if let Some(b) = best_by {
                run.set("best_by", &b).map_err(input)?;
            }
            if run.output.is_none() {
                return Err(Failure::Config("config error: `output` checkpoint path is not set".into()));
            }
            let dataset = load_dataset(&run).map_err(input)?;
            let outcome = cmd_train(&run, &dataset, &mut out).map_err(runtime)?;
            writeln!(out, "{}", outcome.metrics).map_err(io_failure)?;
            writeln!(out, "{}", outcome.metrics.to_json()).map_err(io_failure)?;
        }
        Command::Evaluate { checkpoint, cfg } => {
            let (model, run, dataset) = load_checkpoint(&checkpoint, &cfg)?;
            let m = evaluate(&model, &dataset.split.test, &dataset, run.eval_negatives, eval_seed(run.seed)).map_err(runtime)?;
            writeln!(out, "{m}").map_err(io_failure)?;
            writeln!(out, "{}", m.to_json()).map_err(io_failure)?;
        }
        Command::Ablate { cfg, grid } => {
            let run = resolve(&cfg)?;
            let grid = parse_grid(&grid, &run).map_err(input)?;
            let dataset = load_dataset(&run).map_err(input)?;
            let rows = cmd_ablate(&run, &dataset, &grid, &mut out).map_err(runtime)?;
            write!(out, "{}", ablation_table(&rows)).map_err(io_failure)?;
            for (v, m) in &rows {
                let mut j = m.to_json();
                j["variant"] = v.to_string().into();
                writeln!(out, "{j}").map_err(io_failure)?;
            }
        }
        Command::ExportAttention {
            checkpoint,
            instance,
            out: dir,
            cfg,
        } => {
            let (model, _, dataset) = load_checkpoint(&checkpoint, &cfg)?;
            let idx = select_instance(&instance, dataset.split.test.len()).map_err(input)?;
            let paths = export_attention(&model, &dataset.corpus, &dataset.split.test[idx], &dir).map_err(runtime)?;
            writeln!(out, "test instance {idx}").map_err(io_failure)?;
            for p in paths {
                writeln!(out, "{}", p.display()).map_err(io_failure)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message().lines().next().unwrap_or(""));
            ExitCode::from(f.code())
        }
    }
}
