//! `curator`: curate concept labels for image-text pairs.
//!
//! Exit codes: 0 on success, 1 for bad input, 2 when an internal invariant
//! is violated.

use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use concept_curation::config::Paths;
use concept_curation::corpus::{load_pairs, ConceptLexicon};
use concept_curation::objective::{grad_check, loss_with_grads, ContrastiveBatch, DEFAULT_GRAD_EPS};
use concept_curation::pipeline::{self, gap_report, load_records, run_ablation, AblationMode, CurationInputs};
use concept_curation::synth::{load_truth, synth_corpus, SynthSpec, TRUTH_FILE};
use concept_curation::{Error, ExpansionMode, PipelineConfig, RankingMode, Result, SamplingMode};

#[derive(Debug, Parser)]
#[command(name = "curator", version, about = "Concept curation for image-text corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Expand, rank and sample concepts for every pair.
    Curate(PipelineArgs),
    /// Compare caption concept counts with archive and sampled sizes.
    GapReport(GapArgs),
    /// Run the five ablation modes on a synthetic corpus with ground truth.
    Ablate(AblateArgs),
    /// Evaluate the contrastive objectives and check their gradients.
    VerifyObjective(VerifyArgs),
    /// Generate a synthetic corpus with known concept sets.
    Synth(SynthArgs),
}

/// Flags mirroring the configuration file; flags win over the file.
#[derive(Debug, Args)]
struct PipelineArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory laid out by `curator synth`; fills in every input path.
    #[arg(long)]
    input_dir: Option<PathBuf>,
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    /// Concept-text embeddings (CEMB).
    #[arg(long)]
    concepts: Option<PathBuf>,
    /// Prompted concept strings, one per embedding row.
    #[arg(long)]
    concept_list: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Caption-text embeddings, needed for language-driven expansion.
    #[arg(long)]
    captions: Option<PathBuf>,
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long)]
    expansion: Option<ExpansionMode>,
    #[arg(long)]
    ranking: Option<RankingMode>,
    #[arg(long)]
    sampling: Option<SamplingMode>,
    #[arg(long)]
    n_retrieve: Option<usize>,
    /// Labels sampled per pair.
    #[arg(long)]
    labels: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Take the best concept instead of drawing proportionally.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    kmeans_max_iter: Option<usize>,
}

impl PipelineArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(dir) = &self.input_dir {
            let output = c.paths.output.take();
            c.paths = Paths::synth_layout(dir);
            c.paths.output = output;
        }
        let p = &mut c.paths;
        for (slot, flag) in [
            (&mut p.pairs, &self.pairs),
            (&mut p.images, &self.images),
            (&mut p.concepts, &self.concepts),
            (&mut p.concept_list, &self.concept_list),
            (&mut p.lexicon, &self.lexicon),
            (&mut p.captions, &self.captions),
            (&mut p.output, &self.output),
        ] {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        if let Some(v) = self.expansion {
            c.expansion.mode = v;
        }
        if let Some(v) = self.ranking {
            c.ranking.mode = v;
        }
        if let Some(v) = self.sampling {
            c.sampling.mode = v;
        }
        if let Some(v) = self.n_retrieve {
            c.expansion.n_retrieve = v;
        }
        if let Some(v) = self.labels {
            c.sampling.labels = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.threads {
            c.threads = v;
        }
        if self.deterministic {
            c.sampling.deterministic = true;
        }
        if let Some(v) = self.kmeans_max_iter {
            c.kmeans.max_iter = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
struct GapArgs {
    /// Output of `curator curate`.
    #[arg(long)]
    curated: PathBuf,
    #[arg(long)]
    input_dir: Option<PathBuf>,
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Print per-pair counts as well as the summary.
    #[arg(long)]
    per_pair: bool,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Ground-truth file; defaults to the one in --input-dir.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Comma-separated subset of baseline, language, vision, vision-ranked, full.
    #[arg(long, value_delimiter = ',')]
    modes: Vec<AblationMode>,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// JSON file with `img`, `txt`, `labels` and `tau`.
    batch: PathBuf,
    /// Finite-difference step.
    #[arg(long, default_value_t = DEFAULT_GRAD_EPS)]
    eps: f64,
    /// Reject rows that are not unit length instead of normalizing them.
    #[arg(long)]
    strict: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Directory to write into.
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    vocab_size: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 2000)]
    n_pairs: usize,
    #[arg(long, default_value_t = 2)]
    k_min: usize,
    #[arg(long, default_value_t = 5)]
    k_max: usize,
    #[arg(long, default_value_t = 0.5)]
    keep_prob: f64,
    #[arg(long, default_value_t = 0.05)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != ErrorKind::BrokenPipe => Err(Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Invariant(e.to_string()))?;
    emit(&format!("{text}\n"))
}

fn run_curate(args: &PipelineArgs) -> Result<()> {
    let config = args.resolve()?;
    let summary = pipeline::curate(&config)?;
    if summary.clamped > 0 {
        eprintln!(
            "warning: retrieval depth clamped to the corpus size for {} anchors",
            summary.clamped
        );
    }
    print_json(&summary)
}

fn run_gap_report(args: &GapArgs) -> Result<()> {
    let layout = args.input_dir.as_deref().map(Paths::synth_layout).unwrap_or_default();
    let paths = Paths {
        pairs: args.pairs.clone().or(layout.pairs),
        lexicon: args.lexicon.clone().or(layout.lexicon),
        ..Paths::default()
    };
    let lexicon = ConceptLexicon::load(paths.lexicon()?)?;
    let pairs = load_pairs(paths.pairs()?, &lexicon)?;
    let curated = load_records(&args.curated)?;
    let mut report = gap_report(&pairs, &curated)?;
    if !args.per_pair {
        report.per_pair.clear();
    }
    print_json(&report)
}

fn run_ablate(args: &AblateArgs) -> Result<()> {
    let base = args.pipeline.resolve()?;
    let truth_path = match (&args.truth, &args.pipeline.input_dir) {
        (Some(path), _) => path.clone(),
        (None, Some(dir)) => dir.join(TRUTH_FILE),
        (None, None) => {
            return Err(Error::InvalidArgument("ablation needs --truth or --input-dir".into()));
        }
    };
    let truth = load_truth(&truth_path)?;
    let modes = if args.modes.is_empty() {
        AblationMode::ALL.to_vec()
    } else {
        args.modes.clone()
    };
    let mut load_config = base.clone();
    if modes.contains(&AblationMode::Language) {
        load_config.expansion.mode = ExpansionMode::Language;
    }
    let inputs = CurationInputs::load(&load_config)?;
    let table = run_ablation(&inputs, &base, &modes, &truth)?;
    if args.json {
        print_json(&table)
    } else {
        emit(&table.to_string())
    }
}

fn read_batch(path: &Path, strict: bool) -> Result<ContrastiveBatch> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })?;
    let raw: ContrastiveBatch = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    if strict {
        ContrastiveBatch::new(raw.img, raw.txt, raw.labels, raw.tau)
    } else {
        ContrastiveBatch::normalized(raw.img, raw.txt, raw.labels, raw.tau)
    }
}

fn run_verify(args: &VerifyArgs) -> Result<()> {
    let batch = read_batch(&args.batch, args.strict)?;
    let report = loss_with_grads(&batch)?;
    let check = grad_check(&batch, args.eps)?;
    print_json(&serde_json::json!({ "loss": report, "grad_check": check }))
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        vocab_size: args.vocab_size,
        dim: args.dim,
        n_pairs: args.n_pairs,
        k_min: args.k_min,
        k_max: args.k_max,
        caption_keep_prob: args.keep_prob,
        noise_sigma: args.noise_sigma,
        seed: args.seed,
    };
    synth_corpus(&spec)?.write_dir(&args.out)?;
    print_json(&spec)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Curate(a) => run_curate(a),
        Command::GapReport(a) => run_gap_report(a),
        Command::Ablate(a) => run_ablate(a),
        Command::VerifyObjective(a) => run_verify(a),
        Command::Synth(a) => run_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
