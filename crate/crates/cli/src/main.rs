mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use unitac::augment::AugmentStrategy;
use unitac::experiment::Init;

/// Accent conversion through discrete units: synthetic data, unit
/// extraction, pronunciation correction and evaluation.
#[derive(Parser, Debug)]
#[command(name = "unitac", version)]
pub struct Cli {
    /// Experiment config (TOML, or JSON with a .json extension).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// World seed: inventory, prototypes, accents and speakers.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample and split sentences.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Render manifest sentences to feature files.
    #[command(subcommand)]
    Synth(SynthCmd),
    /// Fit a codebook and quantize features to units.
    #[command(subcommand)]
    S2u(S2uCmd),
    /// Fit the unit decoder and synthesize features from units.
    #[command(subcommand)]
    U2s(U2sCmd),
    /// Build a parallel accented/native corpus.
    #[command(subcommand)]
    Augment(AugmentCmd),
    /// Pretrain, train and decode the pronunciation corrector.
    #[command(subcommand)]
    Pc(PcCmd),
    /// Evaluate a trained model on a corpus.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Run the strategy by initialization grid end to end.
    Experiment(ExperimentArgs),
    /// Convert one accented feature file.
    Convert(ConvertArgs),
}

#[derive(Subcommand, Debug)]
pub enum CorpusCmd {
    /// Sample sentences into a manifest (all marked train).
    Sample {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        len_min: Option<usize>,
        #[arg(long)]
        len_max: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reassign roles: the last `--test` sentences become test, the rest
    /// are split train:val.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        /// `train:val`, e.g. `1000:1`.
        #[arg(long)]
        ratio: Option<String>,
        #[arg(long, default_value_t = 0)]
        test: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct RenderSource {
    #[arg(long)]
    pub manifest: PathBuf,
    /// train, val or test; all sentences when omitted.
    #[arg(long)]
    pub role: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum SynthCmd {
    /// Render with an accent and speaker.
    Render {
        #[command(flatten)]
        source: RenderSource,
        /// Accent index.
        #[arg(long, default_value_t = 0)]
        accent: usize,
        /// Speaker index; test speakers follow train speakers.
        #[arg(long, default_value_t = 0)]
        speaker: usize,
        #[arg(long, default_value_t = 0.05)]
        inference_noise: f64,
        #[arg(long, default_value_t = 0.1)]
        duration_noise: f64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Canonical native rendering.
    Native {
        #[command(flatten)]
        source: RenderSource,
    },
}

#[derive(Subcommand, Debug)]
pub enum S2uCmd {
    /// Fit a k-means codebook on every frame of a feature directory.
    Fit {
        /// Directory of .uaft files.
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One line of units per feature file, in file name order.
    Quantize {
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Keep consecutive duplicates.
        #[arg(long)]
        raw: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
pub enum U2sCmd {
    /// Fit per-unit mean frames and durations on native features.
    Fit {
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthesize one feature file per line of a unit file.
    Synth {
        #[arg(long)]
        decoder: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        units: PathBuf,
        /// Feature file whose speaker embedding is used; zero embedding
        /// when omitted.
        #[arg(long)]
        speaker_from: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
pub enum AugmentCmd {
    /// Render accented inputs paired with native unit targets.
    Build {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        /// non-overlapped, overlapped or overlapped:N.
        #[arg(long)]
        strategy: Option<AugmentStrategy>,
        #[arg(long)]
        budget: Option<usize>,
        /// Number of accents in the world.
        #[arg(long)]
        accents: Option<usize>,
        /// Number of training speakers in the world.
        #[arg(long)]
        speakers: Option<usize>,
        #[arg(long, default_value = "train")]
        role: String,
        /// Render every sentence of the role under every accent with test
        /// speakers instead of sampling a budget.
        #[arg(long)]
        all_accents: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct TrainFlags {
    #[arg(long)]
    pub updates: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum PcCmd {
    /// Masked-frame encoder pretraining on a feature directory.
    PretrainEnc {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Unit language-model decoder pretraining on a unit file.
    PretrainDec {
        #[arg(long)]
        units: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Teacher-forced training on a corpus directory.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Checkpoint(s) to initialize from: `enc:PATH`, `dec:PATH`, or a
        /// bare PATH for every parameter.
        #[arg(long)]
        init_from: Vec<String>,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Beam-decode every feature file of a directory to units.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 8)]
        beam: usize,
        #[arg(long)]
        length_norm: bool,
        /// Decoding cap as a multiple of the median training target length.
        #[arg(long)]
        max_len_mult: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
pub enum EvalCmd {
    /// Perplexity, unit error rate, phoneme recovery, speaker similarity
    /// and fluency on test pairs.
    Run {
        #[arg(long)]
        model: PathBuf,
        /// Corpus directory of test pairs.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        decoder: PathBuf,
        /// Manifest holding the reference sentences.
        #[arg(long)]
        test_manifest: PathBuf,
        #[arg(long, default_value_t = 8)]
        beam: usize,
        /// Rank hypotheses by mean token log-probability.
        #[arg(long)]
        length_norm: bool,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub strategies: Option<Vec<AugmentStrategy>>,
    #[arg(long, value_delimiter = ',')]
    pub inits: Option<Vec<Init>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub updates: Option<usize>,
    /// Beam-search evaluation of every run on the test set.
    #[arg(long)]
    pub full_eval: bool,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub codebook: PathBuf,
    #[arg(long)]
    pub decoder: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub beam: usize,
    /// Rank hypotheses by mean token log-probability.
    #[arg(long)]
    pub length_norm: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn exit_code(e: &unitac::Error) -> u8 {
    match e {
        _ if e.is_numeric() => 3,
        unitac::Error::Config(_) => 1,
        _ => 2,
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
    match stages::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
