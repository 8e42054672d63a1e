//! `fedhe`: key generation, operator benchmarks, synthetic data and
//! federated training runs. Machine-readable JSON goes to stdout,
//! diagnostics to stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use thiserror::Error;

use fedhe::batch::ExecutionBackend;
use fedhe::bench::{self, BenchConfig, BenchError, BenchOp};
use fedhe::flr::dataset::{
    horizontal_split, join_horizontal, join_vertical, read_csv, vertical_split, write_csv, CsvSpec, Dataset,
    DatasetError,
};
use fedhe::flr::oracle::{self, GradientKind};
use fedhe::flr::{hetero, homo, synth, EpochRecord, FlrError, TrainConfig};
use fedhe::paillier::{check_key_policy, keygen, secure_rng, seeded_rng, KeyFile, PaillierError};

/// Largest oracle deviation a training run may show and still pass.
const ORACLE_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "fedhe", version, about = "Batched Paillier operators and federated logistic regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Paillier key pair and write it as JSON.
    Keygen {
        #[arg(long, default_value_t = 1024)]
        bits: u32,
        #[arg(long)]
        out: PathBuf,
        /// Allow keys below 1024 bits.
        #[arg(long = "unsafe")]
        allow_unsafe: bool,
        /// Overwrite an existing file.
        #[arg(long)]
        force: bool,
        /// Derive the key from a seed instead of system entropy.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Time one operator on a seeded random batch.
    Bench {
        #[arg(long, value_parser = parse_op)]
        op: BenchOp,
        #[arg(long, default_value_t = 100_000)]
        count: usize,
        #[arg(long, default_value_t = 1024)]
        key_bits: u32,
        /// naive, parallel, or parallel:N
        #[arg(long, default_value = "naive", value_parser = parse_backend)]
        backend: ExecutionBackend,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Check bit-exact agreement with the naive backend.
        #[arg(long)]
        verify: bool,
        #[arg(long, default_value_t = 3)]
        warmups: usize,
        #[arg(long, default_value_t = 5)]
        runs: usize,
    },
    /// Train logistic regression across simulated parties.
    Train {
        #[arg(long, value_enum)]
        mode: Mode,
        /// A CSV to partition, or a directory of party files
        /// (`guest.csv` and `host.csv`, or `party*.csv`).
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.15)]
        lr: f64,
        #[arg(long, default_value_t = 1024)]
        key_bits: u32,
        #[arg(long = "unsafe")]
        allow_unsafe: bool,
        #[arg(long, value_enum, default_value_t = Switch::On)]
        cache: Switch,
        /// Also run the centralized plaintext trainer and compare.
        #[arg(long)]
        oracle: bool,
        /// Parties for a single-file horizontal dataset.
        #[arg(long, default_value_t = 2)]
        parties: usize,
        #[arg(long, default_value = "naive", value_parser = parse_backend)]
        backend: ExecutionBackend,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "id")]
        id_column: String,
        #[arg(long, default_value = "y")]
        label_column: String,
    },
    /// Write a synthetic dataset: `full.csv` plus one file per party.
    Synth {
        #[arg(long, default_value_t = 1000)]
        rows: usize,
        #[arg(long, default_value_t = 8)]
        features: usize,
        #[arg(long, default_value_t = 2)]
        parties: usize,
        #[arg(long, value_enum, default_value_t = Mode::Hetero)]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Hetero,
    Homo,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

fn parse_op(s: &str) -> Result<BenchOp, String> {
    s.parse().map_err(|e: BenchError| e.to_string())
}

fn parse_backend(s: &str) -> Result<ExecutionBackend, String> {
    bench::parse_backend(s).map_err(|e| e.to_string())
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {source}")]
    Input { path: PathBuf, source: DatasetError },
    #[error(transparent)]
    Paillier(#[from] PaillierError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Flr(#[from] FlrError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        let key_policy = |e: &PaillierError| {
            matches!(e, PaillierError::InsecureKeySize(_) | PaillierError::KeyTooSmall(_) | PaillierError::OddKeySize(_))
        };
        match self {
            CliError::Usage(_) | CliError::Flr(FlrError::Config(_)) => 2,
            CliError::Paillier(e) | CliError::Flr(FlrError::Paillier(e)) if key_policy(e) => 2,
            CliError::Verification(_) => 3,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Keygen {
            bits,
            out,
            allow_unsafe,
            force,
            seed,
        } => cmd_keygen(bits, &out, allow_unsafe, force, seed),
        Command::Bench {
            op,
            count,
            key_bits,
            backend,
            seed,
            verify,
            warmups,
            runs,
        } => {
            let cfg = BenchConfig {
                seed,
                verify,
                warmups,
                runs,
                ..BenchConfig::new(op, count, key_bits, backend)
            };
            cmd_bench(&cfg)
        }
        Command::Train {
            mode,
            dataset,
            epochs,
            batch_size,
            lr,
            key_bits,
            allow_unsafe,
            cache,
            oracle,
            parties,
            backend,
            seed,
            id_column,
            label_column,
        } => {
            let cfg = TrainConfig {
                epochs,
                batch_size,
                learning_rate: lr,
                key_bits,
                allow_unsafe_keys: allow_unsafe,
                cache: cache == Switch::On,
                seed,
                backend,
                ..TrainConfig::default()
            };
            let spec = CsvSpec {
                id_column,
                label_column: Some(label_column),
                feature_columns: None,
            };
            cmd_train(mode, &dataset, parties, &spec, &cfg, oracle)
        }
        Command::Synth {
            rows,
            features,
            parties,
            mode,
            seed,
            out,
        } => cmd_synth(rows, features, parties, mode, seed, &out),
    }
}

fn cmd_keygen(bits: u32, out: &Path, allow_unsafe: bool, force: bool, seed: Option<u64>) -> Result<(), CliError> {
    check_key_policy(bits, allow_unsafe)?;
    if out.exists() && !force {
        return Err(CliError::Usage(format!("{} exists; pass --force to overwrite", out.display())));
    }
    let keys = match seed {
        Some(s) => keygen(bits, &mut seeded_rng(s))?,
        None => keygen(bits, &mut secure_rng())?,
    };
    let text = KeyFile::from_pair(&keys).to_json()?;
    fs::write(out, text + "\n").map_err(io_err(out))?;
    let id = keys.public.id();
    println!("{}", json!({"path": out, "key_bits": id.key_bits, "fingerprint": format!("{:016x}", id.fingerprint)}));
    Ok(())
}

fn cmd_bench(cfg: &BenchConfig) -> Result<(), CliError> {
    if cfg.key_bits < 1024 {
        eprintln!("warning: {}-bit keys are for testing only", cfg.key_bits);
    }
    let report = bench::run(cfg)?;
    println!("{}", report.to_json());
    if report.verified == Some(false) {
        return Err(CliError::Verification(format!("{} disagrees with the naive backend", report.operator)));
    }
    Ok(())
}

fn read_party(path: &Path, spec: &CsvSpec, labelled: bool) -> Result<Dataset, CliError> {
    let spec = if labelled {
        spec.clone()
    } else {
        CsvSpec {
            label_column: None,
            ..spec.clone()
        }
    };
    read_csv(path, &spec).map_err(|source| CliError::Input {
        path: path.to_path_buf(),
        source,
    })
}

/// Guest and host tables, either from `guest.csv`/`host.csv` or by splitting
/// one file's columns in half.
fn load_vertical(path: &Path, spec: &CsvSpec) -> Result<(Dataset, Dataset), CliError> {
    if path.is_dir() {
        let guest = read_party(&path.join("guest.csv"), spec, true)?;
        let host = read_party(&path.join("host.csv"), spec, false)?;
        return Ok((guest, host));
    }
    let full = read_party(path, spec, true)?;
    if full.width() < 2 {
        return Err(CliError::Usage("a vertical split needs at least two feature columns".into()));
    }
    let guest_width = full.width().div_ceil(2);
    let mut parts = vertical_split(&full, &[guest_width, full.width() - guest_width])?;
    let host = parts.pop().expect("two parts");
    Ok((parts.pop().expect("two parts"), host))
}

/// Party tables, either every `party*.csv` in a directory (sorted by name)
/// or one file split into `parties` row blocks.
fn load_horizontal(path: &Path, parties: usize, spec: &CsvSpec) -> Result<Vec<Dataset>, CliError> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(io_err(path))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                name.starts_with("party") && name.ends_with(".csv")
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(CliError::Usage(format!("no party*.csv files in {}", path.display())));
        }
        return files.iter().map(|f| read_party(f, spec, true)).collect();
    }
    Ok(horizontal_split(&read_party(path, spec, true)?, parties)?)
}

fn max_deviation(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn cmd_train(
    mode: Mode,
    path: &Path,
    parties: usize,
    spec: &CsvSpec,
    cfg: &TrainConfig,
    with_oracle: bool,
) -> Result<(), CliError> {
    cfg.validate()?;
    let print = |r: &EpochRecord| println!("{}", r.to_json_line());
    let header = |instances: usize, feature_names: Vec<String>| {
        println!(
            "{}",
            json!({
                "mode": if mode == Mode::Hetero { "hetero" } else { "homo" },
                "instances": instances,
                "features": feature_names,
                "epochs": cfg.epochs,
                "batch_size": cfg.batch_size,
                "lr": cfg.learning_rate,
                "key_bits": cfg.key_bits,
                "cache": cfg.cache,
            })
        )
    };
    let (losses, theta, joined, steps) = match mode {
        Mode::Hetero => {
            let (guest, host) = load_vertical(path, spec)?;
            let joined = join_vertical(&[guest.clone().with_bias(), host.clone()])?;
            header(hetero::batch_plan(&guest, &host, cfg)?.instance_count(), joined.feature_names.clone());
            let report = hetero::train(&guest, &host, cfg, print)?;
            let losses: Vec<f64> = report.epochs.iter().map(|e| e.loss).collect();
            (losses, report.theta(), joined, report.plan.batches)
        }
        Mode::Homo => {
            let parts = load_horizontal(path, parties, spec)?;
            let biased: Vec<Dataset> = parts.iter().cloned().map(Dataset::with_bias).collect();
            let joined = join_horizontal(&biased)?;
            header(joined.len(), joined.feature_names.clone());
            let report = homo::train(&parts, cfg, print)?;
            let losses: Vec<f64> = report.epochs.iter().map(|e| e.loss).collect();
            (losses, report.theta, joined, homo::merged_steps(&report.plans))
        }
    };
    if cfg.epochs == 0 {
        return Ok(());
    }
    println!("{}", json!({"final": {"features": joined.feature_names, "theta": theta}}));
    if with_oracle {
        let run = oracle::train(&joined, &steps, cfg.epochs, cfg.learning_rate, GradientKind::Taylor);
        let loss_dev = max_deviation(&losses, &run.losses);
        let weight_dev = max_deviation(&theta, &run.theta);
        println!(
            "{}",
            json!({"oracle": {"max_loss_deviation": loss_dev, "max_weight_deviation": weight_dev, "losses": run.losses}})
        );
        if loss_dev > ORACLE_TOLERANCE || weight_dev > ORACLE_TOLERANCE {
            return Err(CliError::Verification(format!(
                "deviation from the centralized trainer exceeds {ORACLE_TOLERANCE}: loss {loss_dev:e}, weights {weight_dev:e}"
            )));
        }
    }
    Ok(())
}

fn cmd_synth(rows: usize, features: usize, parties: usize, mode: Mode, seed: u64, out: &Path) -> Result<(), CliError> {
    if rows == 0 || features == 0 {
        return Err(CliError::Usage("rows and features must be positive".into()));
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    let full = synth::generate(rows, features, seed);
    let mut written = vec![out.join("full.csv")];
    write_csv(&written[0], &full, "y")?;
    match mode {
        Mode::Hetero => {
            if parties != 2 {
                return Err(CliError::Usage("vertical data is split between exactly 2 parties".into()));
            }
            if features < 2 {
                return Err(CliError::Usage("a vertical split needs at least two features".into()));
            }
            let guest_width = features.div_ceil(2);
            let parts = vertical_split(&full, &[guest_width, features - guest_width])?;
            for (name, part) in ["guest.csv", "host.csv"].iter().zip(&parts) {
                let path = out.join(name);
                write_csv(&path, part, "y")?;
                written.push(path);
            }
        }
        Mode::Homo => {
            for (k, part) in horizontal_split(&full, parties)?.iter().enumerate() {
                let path = out.join(format!("party{k}.csv"));
                write_csv(&path, part, "y")?;
                written.push(path);
            }
        }
    }
    println!("{}", json!({"rows": rows, "features": features, "files": written}));
    Ok(())
}
