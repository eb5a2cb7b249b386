use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use log::info;

use swapfuse::checkpoint::{load_checkpoint, save_checkpoint};
use swapfuse::config::{parse_pairs, render_map, TrainConfig};
use swapfuse::data::{generate, load_corpus, save_corpus, CorpusSpec};
use swapfuse::eval::{cluster_agreement, knn_probe, linear_probe, ProbeInput};
use swapfuse::model::Modality;
use swapfuse::sinkhorn::{compute_codes_detailed, SinkhornConfig};
use swapfuse::text::{parse_csv_matrix, render_csv_matrix};
use swapfuse::trainer::Trainer;
use swapfuse::{gradcheck, Error};

const EXIT_IO: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

/// Multi-modal swapped-prediction clustering: data generation, training,
/// probes and Sinkhorn codes.
#[derive(Parser, Debug)]
#[command(name = "swapfuse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired-modality corpus.
    GenData(GenData),
    /// Train the encoder and prototypes on a corpus.
    Pretrain(Pretrain),
    /// Evaluate a checkpoint with a labelled corpus.
    Probe(Probe),
    /// Print Sinkhorn codes for a score matrix.
    Codes(Codes),
    /// Check tape gradients against finite differences.
    Gradcheck(Gradcheck),
}

#[derive(Args, Debug)]
struct GenData {
    /// Number of samples.
    #[arg(long, default_value_t = CorpusSpec::default().n_samples)]
    n: usize,
    /// Number of latent clusters (at least 2).
    #[arg(long, default_value_t = CorpusSpec::default().n_latent_clusters)]
    clusters: usize,
    /// Latent dimension.
    #[arg(long, default_value_t = CorpusSpec::default().latent_dim)]
    latent_dim: usize,
    /// Modality-1 feature dimension.
    #[arg(long, default_value_t = CorpusSpec::default().d1)]
    d1: usize,
    /// Modality-2 feature dimension.
    #[arg(long, default_value_t = CorpusSpec::default().d2)]
    d2: usize,
    /// Gaussian noise standard deviation.
    #[arg(long, default_value_t = CorpusSpec::default().noise_sigma)]
    sigma: f64,
    /// Generator seed.
    #[arg(long, default_value_t = CorpusSpec::default().seed)]
    seed: u64,
    /// Omit labels from the written corpus.
    #[arg(long)]
    no_labels: bool,
    /// Output corpus file; the manifest goes to `<out>.manifest`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Pretrain {
    /// Corpus file.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint; the manifest goes to `<out>.manifest`.
    #[arg(long)]
    out: PathBuf,
    /// Canonical key=value config file. Inline flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint; its stored config is used unchanged.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Metrics file, one JSON line per step [default: <out>.metrics.jsonl].
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Stop before this iteration and save the checkpoint there.
    #[arg(long)]
    stop_at: Option<u64>,
    /// Training epochs.
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    /// Minibatch size.
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    /// Initial learning rate of the cosine schedule.
    #[arg(long, default_value_t = TrainConfig::default().base_lr)]
    base_lr: f64,
    /// Number of prototypes K.
    #[arg(long, default_value_t = TrainConfig::default().k_prototypes)]
    k_prototypes: usize,
    /// Training seed.
    #[arg(long, default_value_t = TrainConfig::default().seed)]
    seed: u64,
    /// Run Sinkhorn to convergence instead of a fixed sweep count.
    #[arg(long)]
    converged: bool,
    /// Any config key, as KEY=VALUE (repeatable). Keys: batch_size, base_lr,
    /// encoder.embed_dim, encoder.hidden_dims, encoder.input_dims, epochs,
    /// k_prototypes, loss.queue_length, loss.queue_start_iteration,
    /// loss.sinkhorn.epsilon, loss.sinkhorn.n_iterations,
    /// loss.sinkhorn.tolerance, loss.temperature, momentum,
    /// prototype_freeze_iterations, seed.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProbeKind {
    Linear,
    Knn,
    Cluster,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProbeModality {
    #[value(name = "1")]
    First,
    #[value(name = "2")]
    Second,
    Both,
}

#[derive(Args, Debug)]
struct Probe {
    /// Checkpoint file.
    #[arg(long)]
    ckpt: PathBuf,
    /// Labelled corpus file.
    #[arg(long)]
    data: PathBuf,
    /// Probe to run.
    #[arg(long, value_enum)]
    probe: ProbeKind,
    /// Train/test split seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Input features for linear and knn probes.
    #[arg(long, value_enum, default_value_t = ProbeModality::First)]
    modality: ProbeModality,
    /// Neighbors for the knn probe.
    #[arg(long, default_value_t = 5)]
    k: usize,
}

#[derive(Args, Debug)]
struct Codes {
    /// CSV score matrix, one prototype per row, one sample per column.
    #[arg(long)]
    scores: PathBuf,
    /// Entropy regularization ε (> 0).
    #[arg(long, default_value_t = SinkhornConfig::default().epsilon)]
    epsilon: f64,
    /// Normalization sweeps.
    #[arg(long, default_value_t = SinkhornConfig::default().n_iterations, conflicts_with = "converged")]
    iters: usize,
    /// Iterate to convergence (tolerance 1e-8) instead of a fixed count.
    #[arg(long)]
    converged: bool,
}

#[derive(Args, Debug)]
struct Gradcheck {
    /// Seed of the random test inputs.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Test hook: corrupt the analytic gradient of this op to show the
    /// check fails.
    #[arg(long, value_name = "OP", value_parser = clap::builder::PossibleValuesParser::new(gradcheck::OPS))]
    inject_fault: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let sub = matches
        .subcommand()
        .map(|(_, m)| m)
        .expect("subcommand required");
    let result = match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Pretrain(args) => pretrain(args, sub),
        Command::Probe(args) => probe(args),
        Command::Codes(args) => codes(args),
        Command::Gradcheck(args) => run_gradcheck(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::Parameter(_) => EXIT_USAGE,
        Error::NonFiniteLoss { .. } => EXIT_NUMERICAL,
        Error::Io(_)
        | Error::Format { .. }
        | Error::Truncated { .. }
        | Error::UnsupportedVersion { .. }
        | Error::Input(_)
        | Error::Dimension { .. } => EXIT_IO,
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_manifest(
    path: &Path,
    command: &str,
    mut entries: BTreeMap<String, String>,
) -> Result<(), Error> {
    entries.insert("command".into(), command.into());
    entries.insert("tool_version".into(), env!("CARGO_PKG_VERSION").into());
    fs::write(path, render_map(&entries))?;
    Ok(())
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

fn gen_data(args: GenData) -> Result<ExitCode, Error> {
    let spec = CorpusSpec {
        n_samples: args.n,
        n_latent_clusters: args.clusters,
        latent_dim: args.latent_dim,
        d1: args.d1,
        d2: args.d2,
        noise_sigma: args.sigma,
        seed: args.seed,
    };
    spec.validate().map_err(|e| Error::Usage(e.to_string()))?;
    let mut corpus = generate(&spec)?;
    if args.no_labels {
        corpus.labels = None;
    }
    save_corpus(&corpus, &args.out)?;
    let entries = BTreeMap::from([
        ("corpus.n".to_string(), spec.n_samples.to_string()),
        ("corpus.clusters".into(), spec.n_latent_clusters.to_string()),
        ("corpus.latent_dim".into(), spec.latent_dim.to_string()),
        ("corpus.d1".into(), spec.d1.to_string()),
        ("corpus.d2".into(), spec.d2.to_string()),
        ("corpus.sigma".into(), format!("{:?}", spec.noise_sigma)),
        ("corpus.labels".into(), (!args.no_labels).to_string()),
        ("seed".into(), spec.seed.to_string()),
        ("out".into(), display(&args.out)),
    ]);
    write_manifest(&with_suffix(&args.out, ".manifest"), "gen-data", entries)?;
    info!("wrote {} samples to {}", spec.n_samples, args.out.display());
    Ok(ExitCode::SUCCESS)
}

/// Inline config flags actually typed on the command line, as config keys.
fn inline_overrides(args: &Pretrain, m: &ArgMatches) -> Result<BTreeMap<String, String>, Error> {
    let given = |id: &str| m.value_source(id) == Some(ValueSource::CommandLine);
    let mut out = BTreeMap::new();
    if given("epochs") {
        out.insert("epochs".into(), args.epochs.to_string());
    }
    if given("batch_size") {
        out.insert("batch_size".into(), args.batch_size.to_string());
    }
    if given("base_lr") {
        out.insert("base_lr".into(), format!("{:?}", args.base_lr));
    }
    if given("k_prototypes") {
        out.insert("k_prototypes".into(), args.k_prototypes.to_string());
    }
    if given("seed") {
        out.insert("seed".into(), args.seed.to_string());
    }
    if args.converged {
        let sinkhorn = SinkhornConfig::converged(0.0);
        out.insert(
            "loss.sinkhorn.n_iterations".into(),
            sinkhorn.n_iterations.to_string(),
        );
        out.insert(
            "loss.sinkhorn.tolerance".into(),
            format!("{:?}", sinkhorn.convergence_tolerance),
        );
    }
    for pair in &args.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {pair:?}")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn pretrain(args: Pretrain, m: &ArgMatches) -> Result<ExitCode, Error> {
    let corpus = load_corpus(&args.data)?;
    let overrides = inline_overrides(&args, m)?;
    let metrics_path = args
        .metrics
        .clone()
        .unwrap_or_else(|| with_suffix(&args.out, ".metrics.jsonl"));

    let mut entries = BTreeMap::new();
    let (mut trainer, metrics_file) = match &args.resume {
        Some(resume) => {
            if args.config.is_some() || !overrides.is_empty() {
                return Err(Error::Usage(
                    "--resume takes its config from the checkpoint; drop --config and config flags"
                        .into(),
                ));
            }
            let ckpt = load_checkpoint(resume)?;
            entries.insert("resume".to_string(), display(resume));
            entries.insert("resume.iteration".to_string(), ckpt.iteration.to_string());
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&metrics_path)?;
            (Trainer::resume(&corpus, ckpt)?, file)
        }
        None => {
            let mut config = TrainConfig::default();
            let mut from_file = BTreeMap::new();
            if let Some(path) = &args.config {
                from_file = parse_pairs(&fs::read_to_string(path)?)?;
                config.apply(&from_file)?;
                entries.insert("config_file".into(), display(path));
            }
            if !from_file.contains_key("encoder.input_dims")
                && !overrides.contains_key("encoder.input_dims")
            {
                config.encoder.input_dims = corpus.dims();
            }
            config.apply(&overrides)?;
            let overridden: Vec<&str> = overrides.keys().map(String::as_str).collect();
            entries.insert("overrides".into(), overridden.join(","));
            (
                Trainer::new(&corpus, &config)?,
                File::create(&metrics_path)?,
            )
        }
    };

    let mut metrics = BufWriter::new(metrics_file);
    let stop_at = args.stop_at.unwrap_or(u64::MAX);
    let run = trainer.run_until(stop_at, |record| {
        writeln!(metrics, "{}", record.to_line())?;
        Ok(())
    });
    metrics.flush()?;
    if let Err(e @ Error::NonFiniteLoss { .. }) = run {
        eprintln!("training aborted: {e}");
        return Ok(ExitCode::from(EXIT_NUMERICAL));
    }
    run?;

    let ckpt = trainer.into_checkpoint();
    save_checkpoint(&ckpt, &args.out)?;
    for (k, v) in ckpt.config.to_map() {
        entries.insert(format!("config.{k}"), v);
    }
    entries.insert("seed".into(), ckpt.config.seed.to_string());
    entries.insert("data".into(), display(&args.data));
    entries.insert("out".into(), display(&args.out));
    entries.insert("metrics".into(), display(&metrics_path));
    entries.insert("iteration".into(), ckpt.iteration.to_string());
    write_manifest(&with_suffix(&args.out, ".manifest"), "pretrain", entries)?;
    info!(
        "saved checkpoint at iteration {} to {}",
        ckpt.iteration,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn probe(args: Probe) -> Result<ExitCode, Error> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let corpus = load_corpus(&args.data)?;
    let input = match args.modality {
        ProbeModality::First => ProbeInput::Modality(Modality::First),
        ProbeModality::Second => ProbeInput::Modality(Modality::Second),
        ProbeModality::Both => ProbeInput::Both,
    };
    let line = match args.probe {
        ProbeKind::Linear => to_json(&linear_probe(&ckpt, &corpus, args.seed, input)?),
        ProbeKind::Knn => to_json(&knn_probe(&ckpt, &corpus, args.k, args.seed, input)?),
        ProbeKind::Cluster => to_json(&cluster_agreement(&ckpt, &corpus)?),
    };
    println!("{line}");
    Ok(ExitCode::SUCCESS)
}

fn to_json(value: &impl serde::Serialize) -> String {
    serde_json::to_string(value).expect("reports serialize")
}

fn codes(args: Codes) -> Result<ExitCode, Error> {
    let config = if args.converged {
        SinkhornConfig::converged(args.epsilon)
    } else {
        SinkhornConfig {
            epsilon: args.epsilon,
            n_iterations: args.iters,
            convergence_tolerance: 0.0,
        }
    };
    config.validate().map_err(|e| Error::Usage(e.to_string()))?;
    let scores = parse_csv_matrix(&fs::read_to_string(&args.scores)?)?;
    let outcome = compute_codes_detailed(&scores, &config)?;
    info!(
        "{} sweeps, {} newton steps, converged={}",
        outcome.sweeps, outcome.newton_steps, outcome.converged
    );
    print!("{}", render_csv_matrix(outcome.codes.matrix()));
    Ok(ExitCode::SUCCESS)
}

fn run_gradcheck(args: Gradcheck) -> Result<ExitCode, Error> {
    let report = gradcheck::run(args.seed, args.inject_fault.as_deref())?;
    for c in &report.checks {
        println!(
            "{:<20} max_rel_error={:.3e} components={:<4} {}",
            c.op,
            c.max_relative_error,
            c.components,
            if c.passed { "PASS" } else { "FAIL" }
        );
    }
    if report.passed() {
        println!("gradcheck: PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("gradcheck: FAIL ({})", report.failures().join(", "));
        Ok(ExitCode::from(EXIT_NUMERICAL))
    }
}
