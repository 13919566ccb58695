//! `prosodet` command line: corpus generation, feature extraction, parameter
//! search, training, evaluation, adversarial cross-evaluation, attention
//! summaries and blind SNR.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

mod commands;

use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use prosodet::neural::Preset;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "prosodet", version, about = "Prosody-based audio deepfake detection")]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-file work.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize the labelled bonafide/deepfake corpus.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        /// Corpus spec JSON.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Extract per-window prosody features for every file in a protocol.
    Extract {
        #[arg(long)]
        protocol: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pitch parameter JSON.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        window_ms: u32,
    },
    /// Two-stage search over the pitch tracker's tunable parameters.
    SearchParams {
        #[arg(long)]
        train_protocol: PathBuf,
        #[arg(long)]
        val_protocol: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Search config JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Bounds JSON (`{"lo": [..4], "hi": [..4]}`).
        #[arg(long)]
        bounds: Option<PathBuf>,
        #[arg(long)]
        budget: Option<usize>,
        /// Base pitch parameter JSON.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Train an LSTM classifier on extracted features.
    Train {
        #[arg(long = "train-features")]
        train_features: PathBuf,
        #[arg(long = "val-features")]
        val_features: PathBuf,
        /// Architecture preset A-E.
        #[arg(long, default_value = "B", value_parser = parse_preset)]
        arch: Preset,
        #[arg(long)]
        attention: bool,
        /// Training config JSON.
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch history CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Score a protocol with a model bundle and report detection metrics.
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        protocol: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the raw-waveform surrogate detector used by `attack`.
    TrainSurrogate {
        #[arg(long)]
        train_protocol: PathBuf,
        #[arg(long)]
        val_protocol: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Surrogate architecture JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training config JSON.
        #[arg(long)]
        train_config: Option<PathBuf>,
    },
    /// Attack the surrogate and score the adversarial audio with the prosody model.
    Attack {
        #[arg(long)]
        surrogate: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        protocol: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated L-infinity radii.
        #[arg(long, default_value = "0.001,0.0015,0.002,0.0025,0.005", value_parser = parse_list)]
        epsilons: EpsilonList,
        #[arg(long, default_value_t = 0.001)]
        alpha: f64,
        #[arg(long, default_value_t = 100)]
        max_steps: usize,
        /// Use only the first N clips of each class.
        #[arg(long)]
        per_class: Option<usize>,
        /// Skip writing adversarial WAV files.
        #[arg(long)]
        no_audio: bool,
    },
    /// Attention argmax windows and their prosody, per clip and per class.
    Attention {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        protocol: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Blind WADA signal-to-noise estimate of a WAV file.
    Snr {
        #[arg(long)]
        wav: PathBuf,
    },
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: prosodet::neural::NeuralError| e.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonList(pub Vec<f64>);

fn parse_list(s: &str) -> Result<EpsilonList, String> {
    let v = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("'{x}': {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    if v.iter().any(|e| !(0.0..1.0).contains(e)) {
        return Err("every epsilon must lie in [0, 1)".into());
    }
    Ok(EpsilonList(v))
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "error: {m}"),
        }
    }
}

pub(crate) fn data(context: impl Display) -> impl FnOnce(&dyn Display) -> CliError {
    move |e| CliError::Data(format!("{context}: {e}"))
}

pub(crate) trait Ctx<T> {
    fn ctx(self, context: impl Display) -> Result<T, CliError>;
}

impl<T, E: Display> Ctx<T> for Result<T, E> {
    fn ctx(self, context: impl Display) -> Result<T, CliError> {
        self.map_err(|e| data(context)(&e))
    }
}

/// Reads a flat JSON config, or the default when no path is given.
pub(crate) fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    read_config_or(path, T::default())
}

pub(crate) fn read_config_or<T: serde::de::DeserializeOwned>(path: Option<&Path>, default: T) -> Result<T, CliError> {
    match path {
        None => Ok(default),
        Some(p) => read_json(p),
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).ctx(path.display())?;
    serde_json::from_str(&text).ctx(path.display())
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).ctx(dir.display())?;
    }
    std::fs::write(path, contents).ctx(path.display())
}

pub(crate) fn to_json(value: &impl Serialize) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes") + "\n"
}

/// Reproducibility header: versions, seed, jobs and a digest of the
/// effective configuration, which is also printed in full.
pub(crate) fn header(err: &mut dyn Write, command: &str, seed: u64, jobs: usize, config: &serde_json::Value) {
    let canonical = serde_json::to_string(config).expect("json value serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
    let _ = writeln!(
        err,
        "# prosodet {} (bundle format {}, surrogate format {})",
        env!("CARGO_PKG_VERSION"),
        prosodet::neural::BUNDLE_FORMAT_VERSION,
        prosodet::adversary::surrogate::SURROGATE_FORMAT_VERSION
    );
    let _ = writeln!(err, "# command {command} | seed {seed} | jobs {jobs} | config sha256:{hex}");
    let _ = writeln!(err, "# config {canonical}");
}

/// Maps `f` over `items` on up to `jobs` threads, keeping input order.
pub(crate) fn par_map<T: Sync, R: Send>(
    items: &[T],
    jobs: usize,
    f: impl Fn(&T) -> Result<R, CliError> + Sync,
) -> Result<Vec<R>, CliError> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let mut slots: Vec<Option<Result<R, CliError>>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let f = &f;
        let handles: Vec<_> = (0..jobs)
            .map(|w| {
                s.spawn(move || {
                    (w..items.len())
                        .step_by(jobs)
                        .map(|i| (i, f(&items[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker thread panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every item processed")).collect()
}

/// Runs the CLI on `argv` (including the program name), writing normal
/// output to `out` and diagnostics to `err`. Returns the exit code.
pub fn run_with<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    EXIT_USAGE
                }
            };
        }
    };
    if cli.jobs == 0 {
        let _ = writeln!(err, "usage error: --jobs must be at least 1");
        return EXIT_USAGE;
    }
    match commands::dispatch(&cli, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "{e}");
            e.code()
        }
    }
}

/// [`run_with`] on the process's stdout and stderr.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(argv, &mut stdout.lock(), &mut stderr.lock())
}
