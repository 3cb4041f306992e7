//! `noisyfl`: run noisy federated-learning experiments and evaluate the
//! associated bounds.
//!
//! Exit codes: 0 success, 1 configuration or argument error, 2 data or format
//! error, 3 failed verification.

mod config;
mod output;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use noisyfl::codec::QuantSpec;
use noisyfl::data::{parse_idx_images, parse_idx_labels, IdxHeader, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
use noisyfl::sim::{run_experiment, BerSchedule, NoisyLinks, PayloadMode};
use noisyfl::theory::{self, BoundInputs};

use config::{ExperimentConfig, OutputFormat};
use output::{MetricsRow, SeedResult, Summary};

/// Marks an error as a configuration problem (exit code 1).
#[derive(Debug)]
pub struct ConfigFault;

impl fmt::Display for ConfigFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("configuration error")
    }
}

/// A verification ran but its result is outside tolerance (exit code 3).
#[derive(Debug)]
struct VerificationFailed;

impl fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("verification failed")
    }
}

impl std::error::Error for VerificationFailed {}

#[derive(Parser, Debug)]
#[command(name = "noisyfl", version, about = "Federated learning over noisy links")]
struct Cli {
    /// Worker threads (defaults to one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run an experiment config once per seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run a grid of (BER, client count) cells on one link.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        link: SweepLink,
        /// Comma-separated BER values, e.g. 1e-4,1e-3.
        #[arg(long, value_delimiter = ',', required = true)]
        ber: Vec<f64>,
        /// Comma-separated client counts; defaults to the config's value.
        #[arg(long, value_delimiter = ',')]
        clients: Vec<usize>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Monte Carlo check of the squared payload error under bit flips.
    VerifyLemma3 {
        #[arg(long, default_value_t = 1024)]
        d: usize,
        #[arg(long, default_value_t = 16)]
        bits: u8,
        #[arg(long, default_value_t = 1e-3)]
        ber: f64,
        #[arg(long, default_value_t = 2.0)]
        range: f64,
        #[arg(long, default_value_t = 500)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Allowed relative deviation from the exact expectation.
        #[arg(long, default_value_t = 0.03)]
        tolerance: f64,
    },
    /// Downlink BER matching a given uplink BER.
    Predict {
        #[arg(long)]
        ber_up: f64,
        #[arg(long)]
        clients: usize,
        /// Range of the uploaded payload.
        #[arg(long)]
        range_num: f64,
        /// Range of the global model.
        #[arg(long)]
        range_den: f64,
        #[arg(long, value_enum, default_value_t = ModeArg::Updates)]
        mode: ModeArg,
    },
    /// Evaluate both convergence bounds from an inputs file (TOML or JSON).
    Bound {
        #[arg(long)]
        inputs: PathBuf,
    },
    /// Print the header of an IDX file.
    InspectIdx { path: PathBuf },
}

#[derive(clap::Args, Debug)]
struct Overrides {
    /// Run this seed only.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<OutputFormat>,
    /// Also write accuracy.svg.
    #[arg(long)]
    svg: bool,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(seed) = self.seed {
            cfg.run.seeds = vec![seed];
        }
        if let Some(dir) = &self.out_dir {
            cfg.run.out_dir = Some(std::path::absolute(dir).unwrap_or_else(|_| dir.clone()));
        }
        if let Some(format) = self.format {
            cfg.run.format = format;
        }
        cfg.run.svg |= self.svg;
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SweepLink {
    Downlink,
    Uplink,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Updates,
    Weights,
}

impl From<ModeArg> for PayloadMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Updates => PayloadMode::Updates,
            ModeArg::Weights => PayloadMode::Weights,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<VerificationFailed>().is_some() {
        return 3;
    }
    if err.downcast_ref::<ConfigFault>().is_some() {
        return 1;
    }
    match err.downcast_ref::<noisyfl::Error>() {
        Some(noisyfl::Error::Data(_) | noisyfl::Error::Format(_)) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(anyhow::anyhow!("--threads must be at least 1").context(ConfigFault));
        }
        #[cfg(feature = "parallel")]
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("cannot configure the thread pool")?;
        #[cfg(not(feature = "parallel"))]
        log::warn!("built without the parallel feature; --threads {threads} has no effect");
    }
    match cli.command {
        Command::Train { config, overrides } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            overrides.apply(&mut cfg);
            let summary = train(&cfg)?;
            println!(
                "mean final accuracy {:.4} (std {:.4}) over {} seed(s); outputs in {}",
                summary.mean_accuracy,
                summary.std_accuracy,
                summary.runs.len(),
                cfg.out_dir().display()
            );
            Ok(())
        }
        Command::Sweep {
            config,
            link,
            ber,
            clients,
            overrides,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            overrides.apply(&mut cfg);
            sweep(&cfg, link, &ber, &clients)
        }
        Command::VerifyLemma3 {
            d,
            bits,
            ber,
            range,
            trials,
            seed,
            tolerance,
        } => verify_lemma3(d, bits, ber, range, trials, seed, tolerance),
        Command::Predict {
            ber_up,
            clients,
            range_num,
            range_den,
            mode,
        } => predict(ber_up, clients, range_num, range_den, mode.into()),
        Command::Bound { inputs } => bound(&inputs),
        Command::InspectIdx { path } => inspect_idx(&path),
    }
}

/// Runs every seed of `cfg` and writes metrics, summary and the echoed config.
fn train(cfg: &ExperimentConfig) -> Result<Summary> {
    let (train_set, test_set) = cfg.load_data()?;
    let spec = cfg.model(train_set.dim()).map_err(|e| e.context(ConfigFault))?;
    let out_dir = cfg.out_dir();
    std::fs::create_dir_all(&out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml()?)?;

    let mut rows = Vec::new();
    let mut results = Vec::new();
    let mut curves = Vec::new();
    for &seed in &cfg.run.seeds {
        let fl = cfg.fl_config(seed);
        let out = run_experiment(&fl, &spec, &train_set, &test_set)?;
        let last = out.records.last().expect("at least one round");
        info!("seed {seed}: final accuracy {:.4}", last.test_accuracy);
        results.push(SeedResult {
            seed,
            final_accuracy: last.test_accuracy,
            final_train_loss: last.train_loss,
        });
        rows.extend(out.records.iter().map(|r| MetricsRow::new(seed, r)));
        curves.push((seed, out.records.iter().map(|r| r.test_accuracy).collect()));
    }

    let format = cfg.run.format;
    output::write_metrics(&out_dir.join(output::metrics_file_name(format)), &rows, format)?;
    let summary = Summary::new(results);
    summary.write(&out_dir.join("summary.json"))?;
    if cfg.run.svg {
        std::fs::write(out_dir.join("accuracy.svg"), output::accuracy_svg(&curves))?;
    }
    Ok(summary)
}

fn cell_name(link: SweepLink, ber: f64, clients: usize) -> String {
    let link = match link {
        SweepLink::Downlink => "downlink",
        SweepLink::Uplink => "uplink",
    };
    format!("{link}_ber{ber:e}_n{clients}")
}

fn sweep(base: &ExperimentConfig, link: SweepLink, bers: &[f64], clients: &[usize]) -> Result<()> {
    let clients = if clients.is_empty() {
        vec![base.training.clients]
    } else {
        clients.to_vec()
    };
    let root = base.out_dir();
    std::fs::create_dir_all(&root).with_context(|| format!("cannot create {}", root.display()))?;
    let mut table = csv::Writer::from_path(root.join("summary.csv"))?;
    table.write_record(["link", "ber", "clients", "seed", "final_accuracy"])?;
    for &ber in bers {
        for &n in &clients {
            let mut cfg = base.clone();
            cfg.training.clients = n;
            match link {
                SweepLink::Downlink => {
                    cfg.channel.noisy_links = NoisyLinks::DownlinkOnly;
                    cfg.channel.downlink.ber = BerSchedule::Constant(ber);
                }
                SweepLink::Uplink => {
                    cfg.channel.noisy_links = NoisyLinks::UplinkOnly;
                    cfg.channel.uplink.ber = BerSchedule::Constant(ber);
                }
            }
            let name = cell_name(link, ber, n);
            cfg.run.out_dir = Some(root.join(&name));
            cfg.validate().map_err(|e| e.context(ConfigFault))?;
            let summary = train(&cfg)?;
            for r in &summary.runs {
                table.serialize((
                    name.split('_').next().unwrap_or_default(),
                    ber,
                    n,
                    r.seed,
                    r.final_accuracy,
                ))?;
            }
            table.flush()?;
            println!("{name}: mean final accuracy {:.4}", summary.mean_accuracy);
        }
    }
    Ok(())
}

fn verify_lemma3(d: usize, bits: u8, ber: f64, range: f64, trials: usize, seed: u64, tolerance: f64) -> Result<()> {
    let quant = QuantSpec::new(bits).map_err(|e| anyhow::Error::new(e).context(ConfigFault))?;
    if trials == 0 || d == 0 {
        return Err(anyhow::anyhow!("trials and d must be at least 1").context(ConfigFault));
    }
    if !(range.is_finite() && range >= 0.0) {
        return Err(anyhow::anyhow!("range must be finite and nonnegative").context(ConfigFault));
    }
    let est = theory::montecarlo_lemma3(d, quant, ber, range, trials, seed)
        .map_err(|e| anyhow::Error::new(e).context(ConfigFault))?;
    let ratio = est.oracle / est.bound;
    println!("mean_sq_err = {}", est.mean_sq_err);
    println!("std_err = {}", est.std_err);
    println!("oracle = {}", est.oracle);
    println!("lemma3_bound = {}", est.bound);
    println!("oracle/lemma3_bound = {ratio}");
    let pass = if est.oracle == 0.0 {
        println!("rel_dev_oracle = 0");
        est.mean_sq_err == 0.0
    } else {
        let rel = est.rel_dev();
        println!("rel_dev_oracle = {rel}");
        println!("rel_dev_bound = {}", (est.mean_sq_err - est.bound).abs() / est.bound);
        println!("z = {}", (est.mean_sq_err - est.oracle) / est.std_err);
        rel <= tolerance
    };
    if pass {
        println!("result = PASS (tolerance {tolerance})");
        Ok(())
    } else {
        println!("result = FAIL (tolerance {tolerance})");
        Err(anyhow::Error::new(VerificationFailed))
    }
}

/// Shortest decimal form after rounding to 12 significant digits.
fn sci(x: f64) -> String {
    let rounded: f64 = format!("{x:.11e}").parse().unwrap_or(x);
    format!("{rounded:e}")
}

fn predict(ber_up: f64, n: usize, range_num: f64, range_den: f64, mode: PayloadMode) -> Result<()> {
    let p = theory::predict_tolerance(ber_up, n, range_num, range_den, mode)
        .map_err(|e| anyhow::Error::new(e).context(ConfigFault))?;
    println!(
        "ber_down = ber_up / (2n) * (range_num / range_den)^2 = {ber_up:e} / {} * ({range_num} / {range_den})^2",
        2 * n
    );
    println!("ber_down = {}", sci(p.ber_down));
    println!("range_ratio = {}", p.range_ratio);
    Ok(())
}

fn bound(path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(|e| e.context(ConfigFault))?;
    let parsed: Result<BoundInputs> = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(anyhow::Error::from)
    } else {
        toml::from_str(&text).map_err(anyhow::Error::from)
    };
    let inputs = parsed
        .with_context(|| format!("invalid bound inputs {}", path.display()))
        .map_err(|e| e.context(ConfigFault))?;
    let down = theory::downlink_bound(&inputs).map_err(|e| anyhow::Error::new(e).context(ConfigFault))?;
    let up = theory::uplink_bound(&inputs).map_err(|e| anyhow::Error::new(e).context(ConfigFault))?;
    let slack = theory::eta_slack(inputs.l, inputs.eta, inputs.tau);
    println!("downlink_bound = {down:.4}");
    println!("uplink_bound = {up:.4}");
    println!(
        "eta_condition = {} (slack {slack})",
        theory::check_eta_condition(inputs.l, inputs.eta, inputs.tau)
    );
    Ok(())
}

fn inspect_idx(path: &Path) -> Result<()> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(|e| e.context(ConfigFault))?;
    let (header, offset) = IdxHeader::parse(&bytes)?;
    let dims: Vec<String> = header.dims.iter().map(u32::to_string).collect();
    match header.magic {
        IDX_IMAGES_MAGIC => {
            let images = parse_idx_images(&bytes)?;
            let size = images.rows * images.cols;
            let checksum: u64 = bytes[offset..offset + size.min(bytes.len() - offset)]
                .iter()
                .map(|&b| u64::from(b))
                .sum();
            println!(
                "magic=0x{:08x} dims={} count={} first_sample_checksum={checksum}",
                header.magic,
                dims.join("x"),
                images.count
            );
        }
        IDX_LABELS_MAGIC => {
            let labels = parse_idx_labels(&bytes)?;
            let first = labels.first().map_or("none".into(), |l| l.to_string());
            println!(
                "magic=0x{:08x} count={} dims={} first_sample_checksum={first}",
                header.magic,
                labels.len(),
                dims.join("x")
            );
        }
        other => bail!(noisyfl::Error::Format(format!("unsupported IDX magic 0x{other:08x}"))),
    }
    Ok(())
}
