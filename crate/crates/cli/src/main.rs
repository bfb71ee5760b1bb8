use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use baldseg::acquisition::StrategyKind;
use baldseg::backbone::ToyBackbone;
use baldseg::bench::{run_bench, BenchConfig};
use baldseg::head::{fit_laplace, train_map, HeadConfig, LaplaceConfig};
use baldseg::io::{load_head, load_posterior, save_head, save_posterior, write_dataset, Dataset};
use baldseg::metrics::{read_report_csv, render_markdown, report_csv_string};
use baldseg::session::StopConfig;
use baldseg::synth::{Profile, SplitName};
use baldseg_service::AppState;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "baldseg", version, about = "Active point prompting for interactive segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset (PGM images, masks and a manifest).
    GenData(GenData),
    /// Train the segmentation head on a dataset's train split.
    TrainHead(TrainHead),
    /// Fit the diagonal Laplace posterior around a trained head.
    FitLaplace(FitLaplace),
    /// Benchmark strategies and write trajectories plus a report CSV.
    Bench(Bench),
    /// Serve the session API over HTTP.
    Serve(Serve),
    /// Render a report CSV.
    Report(Report),
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.trim().parse::<T>().map_err(|e| e.to_string())
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    /// Scenes per profile.
    #[arg(long)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// One profile or a comma-separated list.
    #[arg(long, default_value = "blobs,rings,thin", value_delimiter = ',', value_parser = parse::<Profile>)]
    profile: Vec<Profile>,
    /// Side length in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Args)]
struct TrainHead {
    #[arg(long)]
    data: PathBuf,
    /// Hidden channel counts, comma-separated.
    #[arg(long, default_value = "16,8", value_delimiter = ',', value_parser = parse::<usize>)]
    hidden: Vec<usize>,
    /// Seeds initialisation, batching, dropout and the training prompt sets.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    kernel_size: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout_rate: f64,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 15)]
    patience: usize,
    #[arg(long, default_value_t = 1e-4)]
    min_delta: f64,
    #[arg(long, default_value_t = 100)]
    max_epochs: usize,
    #[arg(long, default_value_t = 256)]
    pixels_per_example: usize,
    /// Also write the per-epoch training record as JSON.
    #[arg(long)]
    record: Option<PathBuf>,
}

#[derive(Args)]
struct FitLaplace {
    #[arg(long)]
    head: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Training examples (prompt sets) the precision is accumulated over.
    #[arg(long, default_value_t = 100)]
    subset: usize,
    #[arg(long, default_value_t = 1.0)]
    prior_precision: f64,
    /// Seeds the training prompt sets; use the value given to train-head.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Bench {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    posterior: PathBuf,
    #[arg(long, default_value = "bald,entropy,random,oracle", value_delimiter = ',', value_parser = parse::<StrategyKind>)]
    strategies: Vec<StrategyKind>,
    #[arg(long, default_value_t = 15)]
    budget: usize,
    #[arg(long, default_value_t = 0.01)]
    tau_mi: f64,
    /// Optional total-entropy stopping threshold.
    #[arg(long)]
    tau_ent: Option<f64>,
    #[arg(long, default_value_t = 30)]
    samples: usize,
    #[arg(long, default_value = "0,1,2", value_delimiter = ',', value_parser = parse::<u64>)]
    seeds: Vec<u64>,
    /// Report CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Trajectory directory; defaults to `<out stem>_trajectories` beside the CSV.
    #[arg(long)]
    trajectories: Option<PathBuf>,
    /// Restrict to one split of the dataset.
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    /// Directory of `{scene_id}.jsonl` logs for human_replay.
    #[arg(long)]
    replay_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for SplitName {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitName::Train,
            SplitArg::Val => SplitName::Val,
            SplitArg::Test => SplitName::Test,
        }
    }
}

#[derive(Args)]
struct Serve {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    posterior: PathBuf,
    #[arg(long, default_value_t = 30)]
    samples: usize,
    /// Write finished trajectories (and human replay logs) here.
    #[arg(long)]
    log_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Markdown,
    Csv,
}

#[derive(Args)]
struct Report {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Markdown)]
    format: Format,
}

type CliResult = Result<(), String>;

fn need(path: &Path) -> CliResult {
    if path.exists() {
        Ok(())
    } else {
        Err(format!("{}: no such file or directory", path.display()))
    }
}

fn err(e: baldseg::Error) -> String {
    e.to_string()
}

fn gen_data(a: GenData) -> CliResult {
    let manifest = write_dataset(&a.out, &a.profile, a.scenes, a.seed, a.size).map_err(err)?;
    println!("wrote {} scenes to {}", manifest.items.len(), a.out.display());
    Ok(())
}

fn train_head(a: TrainHead) -> CliResult {
    need(&a.data)?;
    let config = HeadConfig {
        hidden_channels: a.hidden,
        kernel_size: a.kernel_size,
        dropout_rate: a.dropout_rate,
        learning_rate: a.learning_rate,
        weight_decay: a.weight_decay,
        batch_size: a.batch_size,
        patience: a.patience,
        min_delta: a.min_delta,
        max_epochs: a.max_epochs,
        seed: a.seed,
        pixels_per_example: a.pixels_per_example,
    };
    let (train, val) = Dataset::open(&a.data).and_then(|d| d.training_sets(a.seed)).map_err(err)?;
    let (params, record) = train_map(&train, &val, &ToyBackbone::default(), &config).map_err(err)?;
    save_head(&params, &a.out).map_err(err)?;
    if let Some(path) = a.record {
        let json = serde_json::to_string_pretty(&record).map_err(|e| e.to_string())?;
        std::fs::write(&path, json + "\n").map_err(|e| format!("{}: {e}", path.display()))?;
    }
    let best = &record.epochs[record.best_epoch - 1];
    println!(
        "best epoch {} of {} ({}), val IoU {:.4}, wrote {}",
        record.best_epoch,
        record.stop_epoch,
        record.stop_reason.as_str(),
        best.val_iou,
        a.out.display()
    );
    Ok(())
}

fn fit(a: FitLaplace) -> CliResult {
    need(&a.head)?;
    need(&a.data)?;
    let head = load_head(&a.head).map_err(err)?;
    let (train, _) = Dataset::open(&a.data).and_then(|d| d.training_sets(a.seed)).map_err(err)?;
    let subset = &train[..a.subset.min(train.len())];
    let config = LaplaceConfig { prior_precision: a.prior_precision, ..LaplaceConfig::default() };
    let posterior = fit_laplace(&head, subset, &ToyBackbone::default(), &config).map_err(err)?;
    save_posterior(&posterior, &a.out).map_err(err)?;
    println!("fitted over {} examples, wrote {}", posterior.subset_size, a.out.display());
    Ok(())
}

fn default_trajectory_dir(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "report".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}_trajectories"))
}

fn bench(a: Bench) -> CliResult {
    need(&a.data)?;
    need(&a.posterior)?;
    if let Some(dir) = &a.replay_dir {
        need(dir)?;
    }
    let scenes = Dataset::open(&a.data).and_then(|d| d.scenes(a.split.map(Into::into))).map_err(err)?;
    let posterior = load_posterior(&a.posterior).map_err(err)?;
    let config = BenchConfig {
        strategies: a.strategies,
        stop: StopConfig { tau_mi: a.tau_mi, tau_ent: a.tau_ent, budget: a.budget },
        samples_k: a.samples,
        seeds: a.seeds,
        replay_dir: a.replay_dir,
    };
    let output = run_bench(&scenes, Arc::new(ToyBackbone::default()), Arc::new(posterior), &config).map_err(err)?;
    let dir = a.trajectories.unwrap_or_else(|| default_trajectory_dir(&a.out));
    output.write_trajectories(&dir).map_err(err)?;
    let csv = report_csv_string(&output.rows).map_err(err)?;
    std::fs::write(&a.out, csv).map_err(|e| format!("{}: {e}", a.out.display()))?;
    println!("{} runs, wrote {} and {}", output.runs.len(), a.out.display(), dir.display());
    Ok(())
}

fn serve(a: Serve) -> CliResult {
    need(&a.data)?;
    need(&a.posterior)?;
    let mut state = AppState::from_paths(&a.data, &a.posterior, a.samples).map_err(err)?;
    if let Some(dir) = a.log_dir {
        state = state.with_log_dir(dir);
    }
    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
            .await
            .map_err(|e| format!("bind {}:{}: {e}", a.host, a.port))?;
        eprintln!("listening on http://{}", listener.local_addr().map_err(|e| e.to_string())?);
        baldseg_service::serve(listener, Arc::new(state)).await.map_err(|e| e.to_string())
    })
}

fn report(a: Report) -> CliResult {
    let file = std::fs::File::open(&a.input).map_err(|e| format!("{}: {e}", a.input.display()))?;
    let rows = read_report_csv(file).map_err(err)?;
    match a.format {
        Format::Markdown => print!("{}", render_markdown(&rows)),
        Format::Csv => print!("{}", report_csv_string(&rows).map_err(err)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainHead(a) => train_head(a),
        Command::FitLaplace(a) => fit(a),
        Command::Bench(a) => bench(a),
        Command::Serve(a) => serve(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
