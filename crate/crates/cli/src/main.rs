mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use focalcodec::codec::Variant;

#[derive(Debug, Parser)]
#[command(name = "focalcodec", version, about = "Low-bitrate speech codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Feature files (FCF1) to token streams (FCT1).
    Encode(EncodeArgs),
    /// Token stream to 16 kHz WAV.
    Decode(DecodeArgs),
    /// Encode and decode in one go, reporting the real-time factor.
    Resynth(ResynthArgs),
    /// Codebook statistics of a token stream.
    Analyze(AnalyzeArgs),
    /// kNN voice conversion towards a reference speaker.
    Convert(ConvertArgs),
    /// Train the compressor/quantizer/decompressor.
    Train(TrainArgs),
    /// Run the built-in invariant checks.
    Selfcheck,
}

#[derive(Debug, Args)]
struct EncodeArgs {
    /// Input feature file; repeat for batch encoding.
    #[arg(long, required = true)]
    features: Vec<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    /// Expected model variant; checked against the checkpoint.
    #[arg(long)]
    variant: Option<Variant>,
    /// Output token stream; one per --features.
    #[arg(long, required = true)]
    out: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct StreamArgs {
    /// Decode chunk by chunk.
    #[arg(long)]
    stream: bool,
    /// New samples per chunk.
    #[arg(long, default_value_t = 8000)]
    chunk: usize,
    #[arg(long, default_value_t = 48_000)]
    left_context: usize,
    #[arg(long, default_value_t = 250)]
    overlap: usize,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[arg(long)]
    tokens: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    vocoder: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    stream: StreamArgs,
}

#[derive(Debug, Args)]
struct ResynthArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    vocoder: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long)]
    tokens: PathBuf,
    /// Also report log-mel statistics of a WAV file.
    #[arg(long)]
    audio: Option<PathBuf>,
    /// Aligned human-readable output instead of key=value lines.
    #[arg(long)]
    text: bool,
}

#[derive(Debug, Args)]
struct ConvertArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    vocoder: PathBuf,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Train on generated cluster-walk features.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    synthetic: bool,
    /// Directory of .fcf feature files.
    #[arg(long)]
    data: Option<PathBuf>,
    /// JSON file with optional "train", "codec" and "synthetic" sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Codec checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Also write a seeded, untrained vocoder matching the codec.
    #[arg(long)]
    vocoder_out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error kind=usage message={first}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Encode(a) => commands::encode(a),
        Command::Decode(a) => commands::decode(a),
        Command::Resynth(a) => commands::resynth(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Convert(a) => commands::convert(a),
        Command::Train(a) => commands::train(a),
        Command::Selfcheck => commands::selfcheck(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error kind={} message={message}", e.kind());
            ExitCode::FAILURE
        }
    }
}
