mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "pbd", version, about = "Train and run pseudo-bidirectional decoding models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config; writes checkpoints and a loss log.
    Train {
        config: PathBuf,
        /// Continue from the checkpoint at `checkpoint_path` if it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on a TSV file of source/target pairs.
    Eval {
        checkpoint: PathBuf,
        tsv: PathBuf,
        #[command(flatten)]
        search: Search,
        #[arg(long)]
        lowercase: bool,
    },
    /// Decode one input per line; writes one hypothesis per line.
    Decode {
        checkpoint: PathBuf,
        input: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        search: Search,
    },
    /// Write synthetic misspelling pairs (corrupted, clean) as TSV.
    Synth(SynthArgs),
    /// Finite-difference check of the full model's gradients (64-bit).
    Gradcheck(GradcheckArgs),
    /// Attention-mask diagnostics.
    Mask {
        #[command(subcommand)]
        action: MaskAction,
    },
}

#[derive(Args, Clone, Copy)]
struct Search {
    /// Beam width; greedy decoding when absent.
    #[arg(long, conflicts_with = "greedy")]
    beam: Option<usize>,
    #[arg(long)]
    greedy: bool,
    /// Length-normalisation exponent for beam search.
    #[arg(long, default_value_t = pbd::inference::DEFAULT_ALPHA)]
    alpha: f64,
}

#[derive(Args)]
struct SynthArgs {
    out: PathBuf,
    /// File with one clean word per line.
    #[arg(long, conflicts_with = "builtin", required_unless_present = "builtin")]
    words: Option<PathBuf>,
    /// Use the bundled English word list.
    #[arg(long)]
    builtin: bool,
    #[arg(long, default_value_t = 10_000)]
    count: usize,
    /// Total per-character corruption probability, split 4:2:2:1 over
    /// substitution, deletion, insertion and transposition. Ignored when
    /// any explicit probability is given.
    #[arg(long, default_value_t = 0.15)]
    noise: f64,
    #[arg(long)]
    p_sub: Option<f64>,
    #[arg(long)]
    p_del: Option<f64>,
    #[arg(long)]
    p_ins: Option<f64>,
    #[arg(long)]
    p_swap: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Run config whose model fields replace the tiny default model.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    vocab_size: usize,
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long, default_value_t = 3)]
    m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Scale the analytic gradients by this factor (negative control).
    #[arg(long, hide = true)]
    fault: Option<f64>,
}

#[derive(Subcommand)]
enum MaskAction {
    /// Print the decoder self-attention mask over [source | target] keys.
    Dump {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        m: usize,
        /// Print the plain causal mask over target keys instead.
        #[arg(long)]
        causal: bool,
    },
}

impl Search {
    fn strategy(self) -> pbd::inference::Strategy {
        match self.beam {
            Some(k) => pbd::inference::Strategy::Beam { k, alpha: self.alpha },
            None => pbd::inference::Strategy::Greedy,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, resume } => commands::train(&config, resume),
        Command::Eval {
            checkpoint,
            tsv,
            search,
            lowercase,
        } => commands::eval(&checkpoint, &tsv, search.strategy(), lowercase),
        Command::Decode {
            checkpoint,
            input,
            output,
            search,
        } => commands::decode(&checkpoint, &input, output.as_deref(), search.strategy()),
        Command::Synth(a) => commands::synth(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Mask {
            action: MaskAction::Dump { n, m, causal },
        } => commands::mask_dump(n, m, causal),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
