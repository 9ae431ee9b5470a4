//! `laggre`: train, evaluate, and inspect local-aggregation embeddings.
//!
//! Exit codes: 0 on success (and for `--help`/`--version`), 1 for usage
//! errors, 2 for runtime failures such as missing files, malformed
//! artifacts, out-of-range settings, or a failed gradient check.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use laggre_core::dataset::{generate, GenConfig};
use laggre_core::encoder::{gradcheck_chain, EncoderParams};
use laggre_core::eval::{default_band, default_local_rank, density_profile, ProbeConfig};
use laggre_core::objective::{gradcheck_aggregation, gradcheck_instance, GradCheckReport};
use laggre_core::trainer::{
    ablation_to_csv, evaluate_knn, parse_background_mode, parse_close_mode, probe_split,
    run_ablation_grid, train, AblationGrid, TrainConfig,
};
use laggre_core::{Dataset, LaError, MemoryBank};

/// Loss-level gradient checks must agree with central differences to this
/// relative error.
const GRADCHECK_LOSS_TOL: f64 = 1e-4;
/// The full encoder chain accumulates more roundoff, so its bar is looser.
const GRADCHECK_CHAIN_TOL: f64 = 1e-3;
/// Central-difference step for the encoder-chain check.
const GRADCHECK_CHAIN_STEP: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "laggre",
    version,
    about = "Train and evaluate local-aggregation embeddings",
    arg_required_else_help = true
)]
struct Cli {
    /// Worker threads for parallel sections (env: LAGGRE_WORKERS;
    /// default: all cores).
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset and save it.
    GenData(GenDataArgs),
    /// Train an encoder and memory bank on a dataset.
    Train(TrainArgs),
    /// Score saved artifacts with the held-out kNN protocol.
    EvalKnn(EvalKnnArgs),
    /// Fit a linear probe on frozen embeddings and print its accuracy.
    Probe(ProbeArgs),
    /// Write the embedding-density profile of a saved bank.
    Density(DensityArgs),
    /// Sweep neighbor-definition settings and tabulate final accuracy.
    Ablate(AblateArgs),
    /// Compare analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of classes.
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Samples per class.
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    /// Dimension of the latent space the classes live in.
    #[arg(long, default_value_t = 2)]
    latent_dim: usize,
    /// Dimension of the observed inputs.
    #[arg(long, default_value_t = 64)]
    input_dim: usize,
    /// Latent Gaussian noise scale.
    #[arg(long, default_value_t = 0.05)]
    noise_sigma: f64,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset path.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Input dataset.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Training config (key = value lines); defaults apply if omitted.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write per-epoch telemetry CSV here.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Write the final memory bank here.
    #[arg(long, value_name = "FILE")]
    bank: Option<PathBuf>,
    /// Write the trained encoder here.
    #[arg(long, value_name = "FILE")]
    encoder: Option<PathBuf>,
}

#[derive(Args)]
struct EvalKnnArgs {
    /// Dataset the artifacts were trained on.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Saved memory bank.
    #[arg(long, value_name = "FILE")]
    bank: PathBuf,
    /// Saved encoder.
    #[arg(long, value_name = "FILE")]
    encoder: PathBuf,
    /// Config of the training run (seed, temperature, neighbor count).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override the config seed (controls the train/validation split).
    #[arg(long)]
    seed: Option<u64>,
    /// Override the kNN neighbor count.
    #[arg(long)]
    k: Option<usize>,
    /// Override the vote temperature.
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Args)]
struct ProbeArgs {
    /// Dataset to embed and classify.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Saved encoder.
    #[arg(long, value_name = "FILE")]
    encoder: PathBuf,
    /// Config of the training run (only the seed is used, for the split).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Probe training epochs.
    #[arg(long, default_value_t = 90)]
    epochs: usize,
    /// Probe learning rate.
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
}

#[derive(Args)]
struct DensityArgs {
    /// Saved memory bank.
    #[arg(long, value_name = "FILE")]
    bank: PathBuf,
    /// Per-point density CSV.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Optional histogram CSV.
    #[arg(long, value_name = "FILE")]
    hist: Option<PathBuf>,
    /// Neighbors averaged for local density (default scales with bank size).
    #[arg(long)]
    local_rank: Option<usize>,
    /// First rank of the background band.
    #[arg(long, requires = "band_high")]
    band_low: Option<usize>,
    /// Last rank of the background band.
    #[arg(long, requires = "band_low")]
    band_high: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    /// Input dataset.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Base training config; each cell overrides the swept fields.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma list of background definitions (all, knn, cluster).
    #[arg(long, value_name = "LIST")]
    backgrounds: String,
    /// Comma list of close-set definitions (self, knn_close, ensemble).
    #[arg(long, value_name = "LIST")]
    closes: String,
    /// Comma list of clustering shapes HxM, e.g. 3x20,1x20.
    #[arg(long, value_name = "LIST")]
    hm: String,
    /// Output CSV.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random cases per check.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Central-difference step for the loss-level checks.
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    /// Case generator seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}

fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match configure_workers(cli.workers).and_then(|()| execute(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Sizes the global worker pool from `--workers` or `LAGGRE_WORKERS`.
/// Leaves the default (all cores) when neither is given.
fn configure_workers(flag: Option<usize>) -> laggre_core::Result<()> {
    let requested = match flag {
        Some(n) => Some(n),
        None => match std::env::var("LAGGRE_WORKERS") {
            Ok(raw) => Some(raw.trim().parse::<usize>().map_err(|_| {
                LaError::Config(format!(
                    "LAGGRE_WORKERS must be a positive integer, got {raw:?}"
                ))
            })?),
            Err(std::env::VarError::NotPresent) => None,
            Err(std::env::VarError::NotUnicode(_)) => {
                return Err(LaError::Config(
                    "LAGGRE_WORKERS must be a positive integer".into(),
                ))
            }
        },
    };
    if let Some(n) = requested {
        if n == 0 {
            return Err(LaError::Config("worker count must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| LaError::Config(format!("failed to size the worker pool: {e}")))?;
    }
    Ok(())
}

fn execute(command: Command) -> laggre_core::Result<()> {
    match command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => train_cmd(args),
        Command::EvalKnn(args) => eval_knn_cmd(args),
        Command::Probe(args) => probe_cmd(args),
        Command::Density(args) => density_cmd(args),
        Command::Ablate(args) => ablate_cmd(args),
        Command::Gradcheck(args) => gradcheck_cmd(args),
    }
}

fn read_to_string(path: &Path) -> laggre_core::Result<String> {
    fs::read_to_string(path).map_err(|source| LaError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_file(path: &Path, contents: &str) -> laggre_core::Result<()> {
    fs::write(path, contents).map_err(|source| LaError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> laggre_core::Result<TrainConfig> {
    let mut config = match path {
        Some(p) => TrainConfig::parse(&read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

fn gen_data(args: GenDataArgs) -> laggre_core::Result<()> {
    let generated = generate(&GenConfig {
        classes: args.classes,
        per_class: args.per_class,
        latent_dim: args.latent_dim,
        input_dim: args.input_dim,
        noise_sigma: args.noise_sigma,
        seed: args.seed,
    })?;
    generated.dataset.save(&args.out)?;
    println!(
        "wrote {} samples ({} classes x {}) to {}",
        generated.dataset.len(),
        args.classes,
        args.per_class,
        args.out.display()
    );
    Ok(())
}

fn train_cmd(args: TrainArgs) -> laggre_core::Result<()> {
    let dataset = Dataset::load(&args.data)?;
    let config = load_config(args.config.as_deref(), args.seed)?;
    let output = train(&dataset, &config)?;
    if let Some(path) = &args.out {
        write_file(path, &output.telemetry.to_csv())?;
    }
    if let Some(path) = &args.bank {
        output.bank.save(path)?;
    }
    if let Some(path) = &args.encoder {
        output.params.save(path)?;
    }
    match output.telemetry.records.last() {
        Some(record) => println!(
            "trained {} epochs on {} train / {} val samples, final knn_acc {:.6}",
            config.epochs,
            output.telemetry.train_count,
            output.telemetry.val_count,
            record.knn_acc
        ),
        None => println!(
            "trained 0 epochs on {} train / {} val samples",
            output.telemetry.train_count, output.telemetry.val_count
        ),
    }
    Ok(())
}

fn eval_knn_cmd(args: EvalKnnArgs) -> laggre_core::Result<()> {
    let dataset = Dataset::load(&args.data)?;
    let bank = MemoryBank::load(&args.bank)?;
    let params = EncoderParams::load(&args.encoder)?;
    let mut config = load_config(args.config.as_deref(), args.seed)?;
    if let Some(k) = args.k {
        config.knn_k = Some(k);
    }
    if let Some(tau) = args.tau {
        config.tau = tau;
    }
    let acc = evaluate_knn(&dataset, &params, &bank, &config)?;
    println!("{acc:.6}");
    Ok(())
}

fn probe_cmd(args: ProbeArgs) -> laggre_core::Result<()> {
    let dataset = Dataset::load(&args.data)?;
    let params = EncoderParams::load(&args.encoder)?;
    let config = load_config(args.config.as_deref(), args.seed)?;
    let probe = ProbeConfig {
        epochs: args.epochs,
        lr: args.lr,
        ..ProbeConfig::default()
    };
    let acc = probe_split(&dataset, &params, &probe, config.seed)?;
    println!("{acc:.6}");
    Ok(())
}

fn density_cmd(args: DensityArgs) -> laggre_core::Result<()> {
    let bank = MemoryBank::load(&args.bank)?;
    let n = bank.len();
    let local_rank = args.local_rank.unwrap_or_else(|| default_local_rank(n));
    let band = match (args.band_low, args.band_high) {
        (Some(low), Some(high)) => (low, high),
        // clap's `requires` pairing leaves only the both-absent case here.
        _ => default_band(n),
    };
    let profile = density_profile(&bank, local_rank, band)?;
    write_file(&args.out, &profile.to_point_csv())?;
    if let Some(path) = &args.hist {
        write_file(path, &profile.to_histogram_csv())?;
    }
    println!(
        "mean_local {:.6} mean_background {:.6}",
        profile.mean_local(),
        profile.mean_background()
    );
    Ok(())
}

fn ablate_cmd(args: AblateArgs) -> laggre_core::Result<()> {
    let dataset = Dataset::load(&args.data)?;
    let base = load_config(args.config.as_deref(), args.seed)?;
    let grid = AblationGrid {
        background_modes: parse_list(&args.backgrounds, |s| parse_background_mode(s))?,
        close_modes: parse_list(&args.closes, |s| parse_close_mode(s))?,
        hm: parse_list(&args.hm, parse_hm_token)?,
    };
    let cells = run_ablation_grid(&dataset, &base, &grid);
    let failures = cells.iter().filter(|c| c.error.is_some()).count();
    write_file(&args.out, &ablation_to_csv(&cells))?;
    println!(
        "wrote {} cells to {} ({} failed)",
        cells.len(),
        args.out.display(),
        failures
    );
    Ok(())
}

fn parse_list<T>(
    raw: &str,
    parse: impl Fn(&str) -> laggre_core::Result<T>,
) -> laggre_core::Result<Vec<T>> {
    let mut out = Vec::new();
    for token in raw.split(',') {
        let token = token.trim();
        if token.is_empty() {
            return Err(LaError::Config(format!("empty entry in list {raw:?}")));
        }
        out.push(parse(token)?);
    }
    Ok(out)
}

fn parse_hm_token(token: &str) -> laggre_core::Result<(usize, usize)> {
    let (h, m) = token.split_once(['x', 'X']).ok_or_else(|| {
        LaError::Config(format!("clustering shape {token:?} is not of the form HxM"))
    })?;
    let parse_part = |part: &str, name: &str| {
        part.trim().parse::<usize>().map_err(|_| {
            LaError::Config(format!(
                "clustering shape {token:?}: {name} is not a positive integer"
            ))
        })
    };
    let h = parse_part(h, "H")?;
    let m = parse_part(m, "M")?;
    if h == 0 || m == 0 {
        return Err(LaError::Config(format!(
            "clustering shape {token:?} needs H >= 1 and M >= 1"
        )));
    }
    Ok((h, m))
}

fn gradcheck_cmd(args: GradcheckArgs) -> laggre_core::Result<()> {
    let instance = gradcheck_instance(args.trials, args.h, args.seed)?;
    let aggregation = gradcheck_aggregation(args.trials, args.h, args.seed)?;
    let chain = gradcheck_chain(args.trials, GRADCHECK_CHAIN_STEP, args.seed)?;
    print_report("instance loss", &instance);
    print_report("aggregation loss", &aggregation);
    print_report("encoder chain", &chain);
    let mut failed = Vec::new();
    for (name, report, tol) in [
        ("instance loss", &instance, GRADCHECK_LOSS_TOL),
        ("aggregation loss", &aggregation, GRADCHECK_LOSS_TOL),
        ("encoder chain", &chain, GRADCHECK_CHAIN_TOL),
    ] {
        if !(report.max_rel_err < tol) {
            failed.push(format!("{name} {:.3e} >= {tol:e}", report.max_rel_err));
        }
    }
    if failed.is_empty() {
        println!(
            "all gradients within tolerance (loss-level {GRADCHECK_LOSS_TOL:e}, \
             encoder chain {GRADCHECK_CHAIN_TOL:e})"
        );
        Ok(())
    } else {
        Err(LaError::Config(format!(
            "gradient check failed: {}",
            failed.join("; ")
        )))
    }
}

fn print_report(name: &str, report: &GradCheckReport) {
    println!(
        "{name}: trials {} step {:e} max_rel_err {:.3e} mean_rel_err {:.3e} max_abs_err {:.3e}",
        report.trials, report.step, report.max_rel_err, report.mean_rel_err, report.max_abs_err
    );
}
