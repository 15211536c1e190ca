//! The `gloss-wsd` command line.
//!
//! Results go to stdout as JSON (or Markdown for reports), logs to stderr.
//! Every subcommand writes its artifacts and a `manifest.json` (argv, config
//! hash, SHA-256 of every input file) under `--out-dir`. Exit status is 0 on
//! success, 1 for invalid arguments or inputs, 2 for internal failures.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use log::info;
use rand::Rng;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{compute_stats, load_framework_xml, load_gold_keys, CorpusError, WsdCorpus};
use crate::eval::{
    combine, emit_report, export_predictions, load_predictions, mfs_baseline, predict, predict_sequential, score,
    EvalError, ReportFormat, ScoreReport,
};
use crate::examples::{
    apply_masking, compile_corpus, export_groups, import_groups, length_stats, BuildError, BuilderConfig,
    CandidateGroup, GroupFileError,
};
use crate::fixtures::{generate, SyntheticSpec};
use crate::lexicon::{import_wordnet_dir, load_lexicon, LexiconError};
use crate::model::checkpoint::{load_checkpoint, CheckpointError, FORMAT_VERSION};
use crate::model::{EncoderParams, HeadSpec, LmgcModel, ModelConfig, ModelError, Parameters};
use crate::objectives::{gradcheck, lmgc_group_loss, GradcheckReport, ObjectiveError};
use crate::seed;
use crate::tokenizer::{build_vocab, TokenSequence, TokenizerError, Vocabulary};
use crate::train::{
    finetune_downstream, finetune_without_masks, pretrain_lmgc_m, train_lmgc, LabeledSequence, TrainConfig,
    TrainError, TrainMode, TrainReport,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}:{line}: {message}")]
    BadInput {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Groups(#[from] GroupFileError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

impl CliError {
    /// 1 for problems with the arguments or input files, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Write { .. } | CliError::Objective(_) => 2,
            CliError::Tokenizer(TokenizerError::Io { path, .. }) if !path.exists() => 1,
            CliError::Train(e) => match e {
                TrainError::InvalidConfig(_)
                | TrainError::EmptyDataset(_)
                | TrainError::CheckpointIncompatible(_)
                | TrainError::LabelOutOfRange { .. } => 1,
                _ => 2,
            },
            CliError::Eval(EvalError::Model(_)) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gloss-wsd", about = "Word sense disambiguation by gloss classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Seed for every random draw (initialization, shuffling, dropout, masks).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training configuration file (JSON with TrainConfig field names).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for all artifacts of this run.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Write artifacts only; print nothing on stdout.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert a WordNet 3.0 dict directory into a TSV lexicon.
    ImportLexicon(ImportLexiconArgs),
    /// Per-dataset instance and sentence-gloss pair statistics.
    CorpusStats(CorpusStatsArgs),
    /// Compile annotated instances into candidate groups (JSON lines).
    BuildExamples(BuildExamplesArgs),
    /// Train an LMGC model from scratch.
    Train(TrainArgs),
    /// Continue from a checkpoint: mask-free LMGC or a downstream task.
    Finetune(FinetuneArgs),
    /// Predict one sense per instance.
    Predict(PredictArgs),
    /// Score predictions against gold keys.
    Score(ScoreArgs),
    /// Most-frequent-sense baseline.
    Mfs(MfsArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Render a score report as a table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct ImportLexiconArgs {
    /// WordNet `dict` directory with index.sense and data.* files.
    #[arg(long)]
    wordnet: PathBuf,
}

#[derive(Debug, Args)]
struct CorpusStatsArgs {
    #[arg(long)]
    xml: PathBuf,
    #[arg(long)]
    keys: PathBuf,
    /// TSV lexicon or WordNet directory.
    #[arg(long)]
    lexicon: PathBuf,
    #[arg(long, default_value_t = 160)]
    max_len: usize,
}

#[derive(Debug, Args)]
struct BuildExamplesArgs {
    #[arg(long)]
    xml: PathBuf,
    #[arg(long)]
    keys: PathBuf,
    #[arg(long)]
    lexicon: PathBuf,
    /// Existing vocabulary; built from the corpora when absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Further corpora whose words join a newly built vocabulary.
    #[arg(long = "vocab-xml")]
    vocab_xml: Vec<PathBuf>,
    #[arg(long, default_value_t = 1)]
    min_freq: usize,
    #[arg(long)]
    max_vocab: Option<usize>,
    #[arg(long, default_value_t = 160)]
    max_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum CliMode {
    LmgcBinary,
    LmgcMultichoice,
    LmgcM,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    ffn: usize,
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
    #[arg(long, default_value_t = 160)]
    max_positions: usize,
}

#[derive(Debug, Args)]
struct OptimArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    mode: CliMode,
    #[arg(long)]
    groups: PathBuf,
    #[arg(long)]
    val_groups: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Candidate groups for mask-free LMGC fine-tuning.
    #[arg(long, requires = "val_groups", conflicts_with = "labeled")]
    groups: Option<PathBuf>,
    #[arg(long)]
    val_groups: Option<PathBuf>,
    /// Labelled sequences (JSON lines) for a downstream task.
    #[arg(long, requires = "val_labeled")]
    labeled: Option<PathBuf>,
    #[arg(long)]
    val_labeled: Option<PathBuf>,
    /// Number of classes of a downstream classification head.
    #[arg(long, conflicts_with = "regression")]
    classes: Option<usize>,
    /// Use a one-output regression head.
    #[arg(long)]
    regression: bool,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    xml: PathBuf,
    #[arg(long)]
    lexicon: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Score candidates one by one instead of as a stacked group.
    #[arg(long)]
    sequential: bool,
    #[arg(long, default_value_t = 160)]
    max_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum CliFormat {
    Json,
    Markdown,
}

impl From<CliFormat> for ReportFormat {
    fn from(f: CliFormat) -> Self {
        match f {
            CliFormat::Json => ReportFormat::Json,
            CliFormat::Markdown => ReportFormat::Markdown,
        }
    }
}

#[derive(Debug, Args)]
struct ScoreArgs {
    /// Prediction files, one per dataset.
    #[arg(long, required = true)]
    predictions: Vec<PathBuf>,
    /// Gold key files, in the same order.
    #[arg(long, required = true)]
    keys: Vec<PathBuf>,
    /// Corpus files, in the same order.
    #[arg(long, required = true)]
    xml: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: CliFormat,
    #[arg(long, default_value = "system")]
    system: String,
}

#[derive(Debug, Args)]
struct MfsArgs {
    #[arg(long, required = true)]
    xml: Vec<PathBuf>,
    #[arg(long)]
    lexicon: PathBuf,
    /// Gold keys in corpus order; when given the baseline is scored.
    #[arg(long)]
    keys: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: CliFormat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum GradMode {
    Lmgc,
    LmgcM,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "lmgc")]
    mode: GradMode,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 16)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 32)]
    ffn: usize,
    #[arg(long, default_value_t = 500)]
    samples: usize,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Score report JSON written by `score` or `mfs`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "markdown")]
    format: CliFormat,
    #[arg(long, default_value = "system")]
    system: String,
}

fn version() -> String {
    format!("{} (checkpoint format {FORMAT_VERSION})", env!("CARGO_PKG_VERSION"))
}

/// Parses `argv` (program name first), runs the command and returns the exit
/// status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let matches = match Cli::command().version(version()).try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let outcome = match rayon::ThreadPoolBuilder::new().num_threads(cli.jobs.max(1)).build() {
        Ok(pool) => pool.install(|| execute(&cli, &argv)),
        Err(e) => Err(CliError::Usage(format!("--jobs: {e}"))),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// What a run records about itself.
#[derive(Serialize)]
struct Manifest {
    argv: Vec<String>,
    version: String,
    config: Value,
    config_sha256: String,
    inputs: Vec<InputDigest>,
}

#[derive(Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let read_err = |e| CliError::Read {
        path: path.to_path_buf(),
        source: e,
    };
    let mut file = File::open(path).map_err(read_err)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(read_err)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn digest_inputs(paths: &[&Path]) -> Result<Vec<InputDigest>, CliError> {
    let mut out = Vec::new();
    for path in paths {
        let mut files = Vec::new();
        if path.is_dir() {
            let entries = fs::read_dir(path).map_err(|e| CliError::Read {
                path: path.to_path_buf(),
                source: e,
            })?;
            for entry in entries.flatten() {
                if entry.path().is_file() {
                    files.push(entry.path());
                }
            }
            files.sort();
        } else {
            files.push(path.to_path_buf());
        }
        for f in files {
            out.push(InputDigest {
                sha256: sha256_file(&f)?,
                path: f.display().to_string(),
            });
        }
    }
    Ok(out)
}

struct Run<'a> {
    cli: &'a Cli,
    argv: &'a [String],
}

impl Run<'_> {
    fn out(&self, name: &str) -> PathBuf {
        self.cli.out_dir.join(name)
    }

    fn prepare(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.cli.out_dir).map_err(|e| CliError::Write {
            path: self.cli.out_dir.clone(),
            source: e,
        })
    }

    fn seed(&self) -> u64 {
        self.cli.seed.unwrap_or(0)
    }

    fn manifest(&self, config: Value, inputs: &[&Path]) -> Result<(), CliError> {
        let canonical = serde_json::to_string(&config).expect("config serializes");
        let manifest = Manifest {
            argv: self.argv.to_vec(),
            version: version(),
            config_sha256: hex::encode(Sha256::digest(canonical.as_bytes())),
            config,
            inputs: digest_inputs(inputs)?,
        };
        write_text(&self.out("manifest.json"), &pretty(&manifest))
    }

    fn train_config(&self, mode: TrainMode, optim: &OptimArgs) -> Result<TrainConfig, CliError> {
        let mut config = match &self.cli.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::Read {
                    path: path.clone(),
                    source: e,
                })?;
                serde_json::from_str::<TrainConfig>(&text).map_err(|e| CliError::BadInput {
                    path: path.clone(),
                    line: e.line(),
                    message: e.to_string(),
                })?
            }
            None => TrainConfig::default(),
        };
        config.mode = mode;
        config.jobs = self.cli.jobs;
        if let Some(seed) = self.cli.seed {
            config.seed = seed;
        }
        if let Some(e) = optim.epochs {
            config.epochs = e;
        }
        if let Some(b) = optim.batch_size {
            config.batch_size = b;
        }
        if let Some(lr) = optim.lr {
            config.lr = lr;
        }
        config.validate()?;
        Ok(config)
    }
}

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serializes") + "\n"
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Write {
        path: path.to_path_buf(),
        source: e,
    })
}

fn emit(run: &Run<'_>, text: &str) -> Result<(), CliError> {
    if run.cli.quiet {
        return Ok(());
    }
    let mut stdout = io::stdout().lock();
    stdout
        .write_all(text.as_bytes())
        .and_then(|_| stdout.flush())
        .map_err(|e| CliError::Write {
            path: PathBuf::from("<stdout>"),
            source: e,
        })
}

fn execute(cli: &Cli, argv: &[String]) -> Result<(), CliError> {
    let run = Run { cli, argv };
    run.prepare()?;
    match &cli.command {
        Command::ImportLexicon(a) => import_lexicon(&run, a),
        Command::CorpusStats(a) => corpus_stats(&run, a),
        Command::BuildExamples(a) => build_examples(&run, a),
        Command::Train(a) => train(&run, a),
        Command::Finetune(a) => finetune(&run, a),
        Command::Predict(a) => predict_cmd(&run, a),
        Command::Score(a) => score_cmd(&run, a),
        Command::Mfs(a) => mfs(&run, a),
        Command::Gradcheck(a) => gradcheck_cmd(&run, a),
        Command::Report(a) => report(&run, a),
    }
}

fn import_lexicon(run: &Run<'_>, a: &ImportLexiconArgs) -> Result<(), CliError> {
    run.manifest(json!({}), &[&a.wordnet])?;
    let lexicon = import_wordnet_dir(&a.wordnet)?;
    let path = run.out("lexicon.tsv");
    lexicon.export_tsv(&path)?;
    info!("{} senses of {} lemmas written to {}", lexicon.len(), lexicon.lemma_count(), path.display());
    emit(run, &pretty(&json!({
        "senses": lexicon.len(),
        "lemmas": lexicon.lemma_count(),
        "output": path.display().to_string(),
    })))
}

fn corpus_stats(run: &Run<'_>, a: &CorpusStatsArgs) -> Result<(), CliError> {
    run.manifest(json!({ "max_len": a.max_len }), &[&a.xml, &a.keys, &a.lexicon])?;
    let lexicon = load_lexicon(&a.lexicon)?;
    let corpus = load_framework_xml(&a.xml)?;
    let gold = load_gold_keys(&a.keys)?;
    let stats = compute_stats(&corpus, &gold, &lexicon)?;
    // Lengths only depend on token counts, so an empty vocabulary suffices.
    let lengths = length_stats(&corpus, &lexicon, &gold, &Vocabulary::from_tokens(Vec::<String>::new()), a.max_len);
    let result = json!({
        "dataset": corpus.name,
        "stats": stats,
        "lengths": lengths,
        "fraction_fitting": lengths.fraction_fitting(),
    });
    let text = pretty(&result);
    write_text(&run.out("stats.json"), &text)?;
    emit(run, &text)
}

fn build_examples(run: &Run<'_>, a: &BuildExamplesArgs) -> Result<(), CliError> {
    let config = BuilderConfig {
        max_len: a.max_len,
        seed: run.seed(),
        ..Default::default()
    };
    config.validate()?;
    let mut inputs: Vec<&Path> = vec![&a.xml, &a.keys, &a.lexicon];
    inputs.extend(a.vocab.as_deref());
    inputs.extend(a.vocab_xml.iter().map(PathBuf::as_path));
    run.manifest(
        json!({ "max_len": a.max_len, "min_freq": a.min_freq, "max_vocab": a.max_vocab }),
        &inputs,
    )?;
    let lexicon = load_lexicon(&a.lexicon)?;
    let corpus = load_framework_xml(&a.xml)?;
    let gold = load_gold_keys(&a.keys)?;
    let vocab = match &a.vocab {
        Some(path) => Vocabulary::load(path)?,
        None => {
            let extra = a
                .vocab_xml
                .iter()
                .map(|p| load_framework_xml(p))
                .collect::<Result<Vec<WsdCorpus>, _>>()?;
            let mut corpora = vec![&corpus];
            corpora.extend(extra.iter());
            let vocab = build_vocab(&corpora, &lexicon, a.min_freq, a.max_vocab);
            vocab.save(&run.out("vocab.json"))?;
            vocab
        }
    };
    let compiled = compile_corpus(&corpus, &lexicon, &gold, &vocab, &config)?;
    let path = run.out("groups.jsonl");
    export_groups(&compiled.groups, &path)?;
    let pairs: usize = compiled.groups.iter().map(|g| g.pairs.len()).sum();
    let lengths = length_stats(&corpus, &lexicon, &gold, &vocab, a.max_len);
    info!("{} groups ({} pairs), {} skipped", compiled.groups.len(), pairs, compiled.skipped.len());
    emit(run, &pretty(&json!({
        "dataset": corpus.name,
        "groups": compiled.groups.len(),
        "pairs": pairs,
        "skipped": compiled.skipped,
        "vocab_size": vocab.len(),
        "lengths": lengths,
        "fraction_fitting": lengths.fraction_fitting(),
        "output": path.display().to_string(),
    })))
}

/// Rejects sequences the model cannot embed, naming the offending line.
fn check_sequences<'a, I>(path: &Path, items: I, config: &ModelConfig) -> Result<(), CliError>
where
    I: IntoIterator<Item = (usize, &'a TokenSequence)>,
{
    for (line, seq) in items {
        let bad = |message: String| CliError::BadInput {
            path: path.to_path_buf(),
            line,
            message,
        };
        if seq.len() > config.max_positions {
            return Err(bad(format!("sequence of {} tokens exceeds {}", seq.len(), config.max_positions)));
        }
        if let Some(id) = seq.ids.iter().find(|&&id| id as usize >= config.vocab_size) {
            return Err(bad(format!("token id {id} outside a vocabulary of {}", config.vocab_size)));
        }
    }
    Ok(())
}

fn load_groups(path: &Path, config: &ModelConfig) -> Result<Vec<CandidateGroup>, CliError> {
    let groups = import_groups(path)?;
    check_sequences(
        path,
        groups
            .iter()
            .enumerate()
            .flat_map(|(i, g)| g.pairs.iter().map(move |p| (i + 1, &p.sequence))),
        config,
    )?;
    Ok(groups)
}

fn load_labeled(path: &Path, config: &ModelConfig) -> Result<Vec<LabeledSequence>, CliError> {
    let file = File::open(path).map_err(|e| CliError::Read {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut items = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::Read {
            path: path.to_path_buf(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let item: LabeledSequence = serde_json::from_str(&line).map_err(|e| CliError::BadInput {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if item.sequence.ids.len() != item.sequence.segment_ids.len() || item.sequence.is_empty() {
            return Err(CliError::BadInput {
                path: path.to_path_buf(),
                line: i + 1,
                message: "ids and segment_ids must be non-empty and of equal length".into(),
            });
        }
        items.push((i + 1, item));
    }
    check_sequences(path, items.iter().map(|(l, it)| (*l, &it.sequence)), config)?;
    Ok(items.into_iter().map(|(_, it)| it).collect())
}

fn log_report(report: &TrainReport) {
    for e in &report.epochs {
        match e.train {
            Some(t) => info!(
                "epoch {}: train {:.6} (gloss {:.6}, mlm {:.6}), validation {:.6}",
                e.epoch, t.total, t.gloss, t.mlm, e.validation.total
            ),
            None => info!("epoch 0: validation {:.6}", e.validation.total),
        }
    }
    info!("selected epoch {}", report.selected_epoch);
}

fn train(run: &Run<'_>, a: &TrainArgs) -> Result<(), CliError> {
    let mode = match a.mode {
        CliMode::LmgcBinary => TrainMode::LmgcBinary,
        CliMode::LmgcMultichoice => TrainMode::LmgcMultichoice,
        CliMode::LmgcM => TrainMode::LmgcM,
    };
    let config = run.train_config(mode, &a.optim)?;
    let vocab = Vocabulary::load(&a.vocab)?;
    let model_config = ModelConfig {
        layers: a.model.layers,
        hidden: a.model.hidden,
        heads: a.model.heads,
        ffn: a.model.ffn,
        vocab_size: vocab.len(),
        max_positions: a.model.max_positions,
        segments: 2,
        dropout: a.model.dropout,
        seed: config.seed,
    };
    model_config.validate()?;
    let mut inputs: Vec<&Path> = vec![&a.groups, &a.val_groups, &a.vocab];
    inputs.extend(run.cli.config.as_deref());
    run.manifest(json!({ "train": config, "model": model_config }), &inputs)?;
    let train_groups = load_groups(&a.groups, &model_config)?;
    let val_groups = load_groups(&a.val_groups, &model_config)?;
    let model = LmgcModel::init(&model_config)?;
    info!(
        "{:?}: {} parameters, {} training / {} validation groups",
        mode,
        model.param_count(),
        train_groups.len(),
        val_groups.len()
    );
    let out_dir = run.cli.out_dir.as_path();
    let outcome = match mode {
        TrainMode::LmgcM => pretrain_lmgc_m(model, &train_groups, &val_groups, &config, Some(out_dir))?,
        _ => train_lmgc(model, &train_groups, &val_groups, &config, Some(out_dir))?,
    };
    log_report(&outcome.report);
    emit(run, &pretty(&outcome.report))
}

fn finetune(run: &Run<'_>, a: &FinetuneArgs) -> Result<(), CliError> {
    let checkpoint = load_checkpoint(&a.checkpoint)?;
    let model_config = checkpoint.encoder.config.clone();
    let out_dir = run.cli.out_dir.as_path();
    let outcome_report = if let (Some(groups), Some(val)) = (&a.groups, &a.val_groups) {
        let config = run.train_config(TrainMode::LmgcMultichoice, &a.optim)?;
        run.manifest(json!({ "train": config }), &[&a.checkpoint, groups, val])?;
        let train_groups = load_groups(groups, &model_config)?;
        let val_groups = load_groups(val, &model_config)?;
        finetune_without_masks(checkpoint, &model_config, &train_groups, &val_groups, &config, Some(out_dir))?.report
    } else if let (Some(labeled), Some(val)) = (&a.labeled, &a.val_labeled) {
        let spec = match (a.classes, a.regression) {
            (Some(classes), false) => HeadSpec::Classification { classes },
            (None, true) => HeadSpec::Regression,
            _ => return Err(CliError::Usage("downstream fine-tuning needs --classes K or --regression".into())),
        };
        let config = run.train_config(TrainMode::Downstream, &a.optim)?;
        run.manifest(json!({ "train": config, "head": spec }), &[&a.checkpoint, labeled, val])?;
        let train_items = load_labeled(labeled, &model_config)?;
        let val_items = load_labeled(val, &model_config)?;
        let encoder: EncoderParams = checkpoint.encoder;
        finetune_downstream(encoder, spec, &train_items, &val_items, &config, Some(out_dir))?.report
    } else {
        return Err(CliError::Usage(
            "finetune needs --groups/--val-groups or --labeled/--val-labeled".into(),
        ));
    };
    log_report(&outcome_report);
    emit(run, &pretty(&outcome_report))
}

fn predict_cmd(run: &Run<'_>, a: &PredictArgs) -> Result<(), CliError> {
    let config = BuilderConfig {
        max_len: a.max_len,
        ..Default::default()
    };
    config.validate()?;
    run.manifest(
        json!({ "max_len": a.max_len, "sequential": a.sequential }),
        &[&a.checkpoint, &a.xml, &a.lexicon, &a.vocab],
    )?;
    let model = load_checkpoint(&a.checkpoint)?
        .into_lmgc()
        .ok_or_else(|| CliError::Usage(format!("{} holds no gloss-classification head", a.checkpoint.display())))?;
    let lexicon = load_lexicon(&a.lexicon)?;
    let corpus = load_framework_xml(&a.xml)?;
    let vocab = Vocabulary::load(&a.vocab)?;
    let preds = if a.sequential {
        predict_sequential(&model, &corpus, &lexicon, &vocab, &config)?
    } else {
        predict(&model, &corpus, &lexicon, &vocab, &config)?
    };
    let path = run.out("predictions.key");
    export_predictions(&preds.predictions, &path)?;
    info!("{} predictions, {} skipped", preds.predictions.len(), preds.skipped.len());
    emit(run, &pretty(&json!({
        "dataset": corpus.name,
        "predictions": preds.predictions.len(),
        "skipped": preds.skipped,
        "output": path.display().to_string(),
    })))
}

fn same_length(what: &str, a: usize, b: usize) -> Result<(), CliError> {
    if a != b {
        return Err(CliError::Usage(format!("{what}: got {b} files for {a} corpora")));
    }
    Ok(())
}

fn score_cmd(run: &Run<'_>, a: &ScoreArgs) -> Result<(), CliError> {
    same_length("--predictions", a.xml.len(), a.predictions.len())?;
    same_length("--keys", a.xml.len(), a.keys.len())?;
    let mut inputs: Vec<&Path> = Vec::new();
    for ((p, k), x) in a.predictions.iter().zip(&a.keys).zip(&a.xml) {
        inputs.extend([p.as_path(), k.as_path(), x.as_path()]);
    }
    run.manifest(json!({ "system": a.system }), &inputs)?;
    let mut datasets = Vec::new();
    for ((p, k), x) in a.predictions.iter().zip(&a.keys).zip(&a.xml) {
        let corpus = load_framework_xml(x)?;
        let gold = load_gold_keys(k)?;
        let preds = load_predictions(p)?;
        datasets.push(score(&preds, &gold, &corpus)?);
    }
    finish_report(run, combine(datasets), a.format, &a.system)
}

fn finish_report(run: &Run<'_>, report: ScoreReport, format: CliFormat, system: &str) -> Result<(), CliError> {
    write_text(&run.out("report.json"), &emit_report(&report, ReportFormat::Json, system))?;
    write_text(&run.out("report.md"), &emit_report(&report, ReportFormat::Markdown, system))?;
    info!("All F1 {:.1}", 100.0 * report.overall.f1);
    emit(run, &emit_report(&report, format.into(), system))
}

fn mfs(run: &Run<'_>, a: &MfsArgs) -> Result<(), CliError> {
    if !a.keys.is_empty() {
        same_length("--keys", a.xml.len(), a.keys.len())?;
    }
    let mut inputs: Vec<&Path> = vec![&a.lexicon];
    inputs.extend(a.xml.iter().map(PathBuf::as_path));
    inputs.extend(a.keys.iter().map(PathBuf::as_path));
    run.manifest(json!({}), &inputs)?;
    let lexicon = load_lexicon(&a.lexicon)?;
    let mut datasets = Vec::new();
    let mut outputs = Vec::new();
    for (i, x) in a.xml.iter().enumerate() {
        let corpus = load_framework_xml(x)?;
        let preds = mfs_baseline(&corpus, &lexicon);
        let path = run.out(&format!("{}.mfs.key", corpus.name));
        export_predictions(&preds.predictions, &path)?;
        outputs.push(json!({
            "dataset": corpus.name,
            "predictions": preds.predictions.len(),
            "skipped": preds.skipped.len(),
            "output": path.display().to_string(),
        }));
        if let Some(k) = a.keys.get(i) {
            let gold = load_gold_keys(k)?;
            datasets.push(score(&preds.predictions, &gold, &corpus)?);
        }
    }
    if a.keys.is_empty() {
        emit(run, &pretty(&outputs))
    } else {
        finish_report(run, combine(datasets), a.format, "MFS")
    }
}

/// Shape of the model and data used by [`synthetic_gradcheck`].
#[derive(Clone, Debug, Serialize)]
pub struct GradcheckSpec {
    pub masked: bool,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub samples: usize,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        GradcheckSpec {
            masked: false,
            layers: 2,
            hidden: 16,
            heads: 2,
            ffn: 32,
            samples: 500,
            epsilon: 1e-5,
            seed: 0,
        }
    }
}

/// Gradient check of the LMGC (or LMGC-M) loss of one synthetic candidate
/// group. Parameters are moved off their initialization by seeded uniform
/// noise so that layer-norm and attention gradients are far from zero.
pub fn synthetic_gradcheck(spec: &GradcheckSpec) -> Result<GradcheckReport, CliError> {
    let data = generate(&SyntheticSpec {
        n_sentences: 4,
        n_lemmas: 4,
        vocab_size: 12,
        seed: spec.seed,
        name: "grad".into(),
        ..Default::default()
    })
    .expect("fixed synthetic spec is valid");
    let vocab = build_vocab(&[&data.corpus], &data.lexicon, 1, None);
    let builder = BuilderConfig {
        mask_prob: 0.3,
        seed: spec.seed,
        ..Default::default()
    };
    let group = compile_corpus(&data.corpus, &data.lexicon, &data.gold, &vocab, &builder)?
        .groups
        .swap_remove(0);
    let (sequences, masked) = if spec.masked {
        let m = apply_masking(&group, vocab.len(), &builder);
        (m.masked_sequences, m.masked_positions)
    } else {
        (group.pairs.iter().map(|p| p.sequence.clone()).collect(), Vec::new())
    };
    let seqs: Vec<&TokenSequence> = sequences.iter().collect();

    let config = ModelConfig {
        layers: spec.layers,
        hidden: spec.hidden,
        heads: spec.heads,
        ffn: spec.ffn,
        vocab_size: vocab.len(),
        max_positions: 160,
        segments: 2,
        dropout: 0.0,
        seed: spec.seed,
    };
    let mut model = LmgcModel::init(&config)?;
    let mut rng = seed::stream(spec.seed, &["gradcheck".into(), "perturb".into()]);
    for t in model.tensors_mut() {
        for x in t.data.iter_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    let mut failure = None;
    let report = gradcheck(
        &mut model,
        |m: &LmgcModel, g: Option<&mut LmgcModel>| {
            match lmgc_group_loss(m, &seqs, group.primary_gold, &masked, &mut crate::model::Mode::Eval, g) {
                Ok(l) => l.total,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        spec.epsilon,
        spec.samples,
        spec.seed,
    )?;
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(report),
    }
}

fn gradcheck_cmd(run: &Run<'_>, a: &GradcheckArgs) -> Result<(), CliError> {
    let spec = GradcheckSpec {
        masked: a.mode == GradMode::LmgcM,
        layers: a.layers,
        hidden: a.hidden,
        heads: a.heads,
        ffn: a.ffn,
        samples: a.samples,
        epsilon: a.epsilon,
        seed: run.seed(),
    };
    run.manifest(json!(spec), &[])?;
    let report = synthetic_gradcheck(&spec)?;
    info!(
        "max relative error {:.3e} over {} coordinates ({} non-zero)",
        report.max_rel_error, report.checked, report.nonzero
    );
    let text = pretty(&report);
    write_text(&run.out("gradcheck.json"), &text)?;
    emit(run, &text)
}

fn report(run: &Run<'_>, a: &ReportArgs) -> Result<(), CliError> {
    run.manifest(json!({ "system": a.system }), &[&a.input])?;
    let text = fs::read_to_string(&a.input).map_err(|e| CliError::Read {
        path: a.input.clone(),
        source: e,
    })?;
    let report: ScoreReport = serde_json::from_str(&text).map_err(|e| CliError::BadInput {
        path: a.input.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let rendered = emit_report(&report, a.format.into(), &a.system);
    let name = match a.format {
        CliFormat::Json => "report.json",
        CliFormat::Markdown => "report.md",
    };
    if run.out(name) != a.input {
        write_text(&run.out(name), &rendered)?;
    }
    emit(run, &rendered)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_names_checkpoint_format() {
        assert!(version().starts_with(env!("CARGO_PKG_VERSION")));
        assert!(version().ends_with(&format!("(checkpoint format {FORMAT_VERSION})")));
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run(["gloss-wsd", "--no-such-flag"]), 1);
        assert_eq!(run(["gloss-wsd", "train"]), 1);
        assert_eq!(run(["gloss-wsd", "--help"]), 0);
    }

    #[test]
    fn exit_codes_by_error_kind() {
        let missing = CliError::Read {
            path: "x".into(),
            source: io::Error::other("gone"),
        };
        assert_eq!(missing.exit_code(), 1);
        let write = CliError::Write {
            path: "x".into(),
            source: io::Error::other("full"),
        };
        assert_eq!(write.exit_code(), 2);
        assert_eq!(CliError::Train(TrainError::EmptyDataset("training")).exit_code(), 1);
        assert_eq!(
            CliError::Train(TrainError::NonFiniteGradient { tensor: "w".into() }).exit_code(),
            2
        );
    }

    #[test]
    fn gradcheck_small_model() {
        for masked in [false, true] {
            let spec = GradcheckSpec {
                masked,
                layers: 1,
                hidden: 8,
                ffn: 16,
                samples: 120,
                ..Default::default()
            };
            let report = synthetic_gradcheck(&spec).unwrap();
            assert_eq!(report.checked, 120);
            assert!(report.max_rel_error < 1e-4, "{report:?}");
            assert!(report.nonzero > 60);
        }
    }
}
