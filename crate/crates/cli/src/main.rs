//! `rigsynth`: speech features and emotion labels in, facial rig curves out.
//!
//! Exit codes: 0 success, 2 usage, 3 data (missing or malformed inputs,
//! mismatched shapes or feature families), 4 numeric (non-finite values,
//! divergence, failed gradient check).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod error;

use error::{CliError, EXIT_USAGE};

/// Environment variable naming the default controller map file.
pub const MAP_ENV: &str = "RIGSYNTH_CONTROLLER_MAP";

#[derive(Parser)]
#[command(name = "rigsynth", version, about = "Speech-driven facial rig animation")]
struct Cli {
    /// Print errors to stderr as a JSON object.
    #[arg(long, global = true)]
    json_errors: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Features (or audio) plus emotion to a 60 fps rig CSV.
    Infer(InferArgs),
    /// Train a model from a manifest.
    Train(TrainArgs),
    /// MAE report and left/right correlation of rig CSVs.
    Analyze(AnalyzeArgs),
    /// Fit the log-normal blink-rate model from rates or EAR traces.
    BlinkFit(BlinkFitArgs),
    /// Detect blinks in an EAR trace.
    BlinkDetect(BlinkDetectArgs),
    /// Train a blink window classifier.
    BlinkTrain(BlinkTrainArgs),
    /// Compare analytic and numeric gradients of a small model.
    Gradcheck(GradcheckArgs),
    /// Write freshly initialised model weights.
    Init(InitArgs),
    /// Write the built-in controller map as JSON.
    ExportMap(ExportMapArgs),
    /// Write a synthetic training set and its manifest.
    GenSynthetic(GenSyntheticArgs),
}

#[derive(Args)]
pub struct MapArg {
    /// Controller map JSON; falls back to $RIGSYNTH_CONTROLLER_MAP, then the built-in map.
    #[arg(long, env = MAP_ENV)]
    pub map: Option<PathBuf>,
}

#[derive(Args)]
pub struct InferArgs {
    /// Feature file (EMOF binary, or headerless CSV with a .csv extension).
    #[arg(long, conflicts_with = "audio", required_unless_present = "audio")]
    pub features: Option<PathBuf>,
    /// WAV file; reference spectral features are extracted from it.
    #[arg(long)]
    pub audio: Option<PathBuf>,
    /// Frame rate of CSV feature files.
    #[arg(long, default_value_t = 50.0)]
    pub feature_rate: f64,
    /// Emotion for the whole clip (name or id 0-6).
    #[arg(long, conflicts_with = "timeline", required_unless_present = "timeline")]
    pub emotion: Option<String>,
    /// Per-frame emotion CSV (frame,label), each label held until the next.
    #[arg(long)]
    pub timeline: Option<PathBuf>,
    #[arg(long)]
    pub weights: PathBuf,
    #[command(flatten)]
    pub map: MapArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Inject procedural blinks.
    #[arg(long)]
    pub blink: bool,
    /// Blink-rate model JSON from `blink-fit`.
    #[arg(long)]
    pub blink_model: Option<PathBuf>,
    /// Override the log-mean of blinks per minute.
    #[arg(long)]
    pub blink_mu: Option<f64>,
    /// Override the log-std of blinks per minute.
    #[arg(long)]
    pub blink_sigma: Option<f64>,
    /// Inject procedural gaze.
    #[arg(long)]
    pub gaze: bool,
    /// Skip temporal smoothing (clamping still applies).
    #[arg(long)]
    pub no_smooth: bool,
    /// Output rig CSV; provenance goes to `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Preset {
    /// Full size: 10 layers, width 512, 8 heads.
    Reference,
    /// Small single-layer model for quick experiments.
    Desk,
}

#[derive(Args)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Name of the feature extractor the model expects.
    #[arg(long)]
    pub feature_family: Option<String>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON with optional `train` (optimiser) and `model` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from existing weights instead of a fresh model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss curve CSV (epoch, lr, loss).
    #[arg(long)]
    pub loss: Option<PathBuf>,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    /// Predicted rig CSV.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth rig CSV; enables the MAE report.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[command(flatten)]
    pub map: MapArg,
    /// MAE report JSON; printed to stdout when omitted.
    #[arg(long)]
    pub mae_out: Option<PathBuf>,
    /// Left/right correlation matrix CSV.
    #[arg(long)]
    pub corr_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct BlinkFitArgs {
    /// Blinks-per-minute values, one per line (a `rate` header is allowed).
    #[arg(long, conflicts_with = "traces", required_unless_present = "traces")]
    pub rates: Option<PathBuf>,
    /// 30 fps EAR trace CSVs (frame,ear); one rate is measured per trace.
    #[arg(long, num_args = 1..)]
    pub traces: Vec<PathBuf>,
    /// Classifier JSON; the built-in classifier when omitted.
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    /// Model JSON; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct BlinkDetectArgs {
    /// 30 fps EAR trace CSV (frame,ear).
    #[arg(long)]
    pub trace: PathBuf,
    /// Classifier JSON; the built-in classifier when omitted.
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    /// Use a plain EAR threshold instead of the classifier.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Events CSV (start_frame,end_frame); stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct BlinkTrainArgs {
    /// Labelled trace CSVs (frame,ear,blink with blink 0/1).
    #[arg(long, num_args = 1.., required_unless_present = "synthetic")]
    pub traces: Vec<PathBuf>,
    /// Train on this many generated traces instead.
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 16)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    #[arg(long, default_value_t = 32)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 4)]
    pub frames: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Largest acceptable relative error; exit code 4 above it.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Check at most this many entries per tensor.
    #[arg(long)]
    pub max_per_tensor: Option<usize>,
    /// Model and probe seed. Seed 0 places a ReLU input within 1e-5 of its
    /// kink, where central differences are not meaningful at the default eps.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Args)]
pub struct InitArgs {
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Zero the emotion pathway so every label yields the same output.
    #[arg(long)]
    pub ablate_emotion: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ExportMapArgs {
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct GenSyntheticArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub clips: usize,
    #[arg(long, default_value_t = 40)]
    pub min_frames: usize,
    #[arg(long, default_value_t = 80)]
    pub max_frames: usize,
    #[arg(long, default_value_t = 32)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn main() -> ExitCode {
    let json_errors = std::env::args().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if json_errors {
                eprintln!("{}", CliError::Usage(e.render().to_string().trim().to_string()).to_json());
            } else {
                let _ = e.print();
            }
            return ExitCode::from(EXIT_USAGE as u8);
        }
    };
    let result = match cli.command {
        Command::Infer(a) => commands::infer(a),
        Command::Train(a) => commands::train(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::BlinkFit(a) => commands::blink_fit(a),
        Command::BlinkDetect(a) => commands::blink_detect(a),
        Command::BlinkTrain(a) => commands::blink_train(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Init(a) => commands::init(a),
        Command::ExportMap(a) => commands::export_map(a),
        Command::GenSynthetic(a) => commands::gen_synthetic(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if cli.json_errors {
                eprintln!("{}", e.to_json());
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
