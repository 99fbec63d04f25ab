use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lifereid::encoder::Checkpoint;
use lifereid::evaluation::summarize;
use lifereid::gradcheck::{run_grad_check, GradCheckOptions};
use lifereid::pipeline::Ablation;
use lifereid::run::{evaluate_checkpoint, generate_data, train_to_dir, write_eval_csv, Datasets, RunConfig};
use lifereid::Error;

const EXIT_VERIFY: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "lifereid", version, about = "Unsupervised lifelong person re-identification on synthetic domains")]
struct Cli {
    /// Worker threads for parallel sections (defaults to all cores).
    #[arg(long, global = true, env = "LIFEREID_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write per-domain CSVs and a manifest.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train over the seen domains and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint against a dataset and stored gallery snapshots.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory holding `step_{s}_domain_{d}.bin` snapshots.
        #[arg(long)]
        snapshots: Option<PathBuf>,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic loss gradients with finite differences.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, hide = true, default_value_t = 0.0)]
        corrupt: f64,
    },
    /// Train every ablation row into `<out>/<ablation>/`.
    Ablate(TrainArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directory from `gen-data`; generated in memory when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Seen-domain training order, e.g. `2,0,1`.
    #[arg(long, value_delimiter = ',')]
    order: Option<Vec<usize>>,
    /// One of pa, pa_ia, pa_ia_ps, pa_ia_is, all.
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    lambda_cam: Option<f64>,
    #[arg(long)]
    n_mem: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Verify(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Error> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.set_seed(seed);
    }
    Ok(config)
}

fn train_config(args: &TrainArgs) -> Result<RunConfig, Error> {
    let mut config = load_config(&args.config)?;
    if let Some(order) = &args.order {
        config.order = order.clone();
    }
    if let Some(a) = &args.ablation {
        config.ablation = Ablation::parse(a)?;
    }
    if let Some(l) = args.lambda_cam {
        config.pipeline.weights.lambda_cam = l;
    }
    if let Some(n) = args.n_mem {
        config.pipeline.n_mem = n;
    }
    config.resolve()
}

fn load_datasets(config: &RunConfig, data: Option<&Path>) -> Result<Datasets, Error> {
    match data {
        Some(dir) => {
            let (manifest, sets) = Datasets::load(dir)?;
            if manifest.synth.d_in != config.synth.d_in {
                return Err(Error::InvalidConfig(format!(
                    "dataset d_in {} does not match config d_in {}",
                    manifest.synth.d_in, config.synth.d_in
                )));
            }
            Ok(sets)
        }
        None => Datasets::generate(&config.synth),
    }
}

fn print_summary(outcome: &lifereid::run::TrainOutcome) {
    for log in &outcome.steps {
        let s = summarize(&outcome.metrics, log.step);
        println!(
            "step {} (domain {}): seen mAP {:.2} R1 {:.2} | unseen mAP {:.2} R1 {:.2} | buffer {}",
            log.step, log.domain_id, s.seen_map, s.seen_rank1, s.unseen_map, s.unseen_rank1, log.buffer_len
        );
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidConfig("--threads must be at least 1".into()).into());
        }
        // Only fails if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::GenData { config, out } => {
            let config = load_config(&config)?.resolve()?;
            let manifest = generate_data(&config.synth, &out)?;
            println!("wrote {} domains to {}", manifest.domains.len(), out.display());
        }
        Command::Train(args) => {
            let config = train_config(&args)?;
            let data = load_datasets(&config, args.data.as_deref())?;
            let outcome = train_to_dir(config, &data, &args.out)?;
            print_summary(&outcome);
        }
        Command::Ablate(args) => {
            let config = train_config(&args)?;
            let data = load_datasets(&config, args.data.as_deref())?;
            let mut table = String::from("ablation,step,seen_mAP,seen_rank1,unseen_mAP,unseen_rank1\n");
            for ablation in Ablation::ALL {
                let row_config = RunConfig {
                    ablation,
                    ..config.clone()
                };
                let outcome = train_to_dir(row_config, &data, &args.out.join(ablation.as_str()))?;
                let last = outcome.steps.last().map_or(0, |s| s.step);
                let s = summarize(&outcome.metrics, last);
                println!(
                    "{:<9} seen mAP {:.2} R1 {:.2} | unseen mAP {:.2} R1 {:.2}",
                    ablation.as_str(),
                    s.seen_map,
                    s.seen_rank1,
                    s.unseen_map,
                    s.unseen_rank1
                );
                table.push_str(&format!(
                    "{},{},{:.10},{:.10},{:.10},{:.10}\n",
                    ablation.as_str(),
                    last,
                    s.seen_map,
                    s.seen_rank1,
                    s.unseen_map,
                    s.unseen_rank1
                ));
            }
            let path = args.out.join("ablation.csv");
            fs::write(&path, table).map_err(|e| Error::Io { path, source: e })?;
        }
        Command::Eval {
            checkpoint,
            data,
            snapshots,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let (_, sets) = Datasets::load(&data)?;
            let outcome = evaluate_checkpoint(&ckpt, &sets, snapshots.as_deref())?;
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            write_eval_csv(&outcome, &out)?;
            println!("wrote {} rows to {}", outcome.rows.len(), out.display());
        }
        Command::GradCheck { seed, trials, corrupt } => {
            let report = run_grad_check(&GradCheckOptions {
                trials,
                seed,
                corrupt,
                ..GradCheckOptions::default()
            })?;
            print!("{report}");
            if !report.passed() {
                return Err(Failure::Verify(format!("gradient check exceeded tolerance {:e}", report.tolerance)));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verify(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_VERIFY)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            let code = if e.is_config() {
                EXIT_CONFIG
            } else if e.is_io() {
                EXIT_IO
            } else {
                EXIT_VERIFY
            };
            ExitCode::from(code)
        }
    }
}
