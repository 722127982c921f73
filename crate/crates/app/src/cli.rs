//! Subcommand parsing and dispatch.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.
//! Results go to stdout as JSON; errors and warnings go to stderr as one
//! JSON object per line.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use parley_core::corpus::{
    load_pretrained_embeddings, parse_cornell, parse_tsv, write_tsv, CorpusError, ParsedCorpus, TermLexicon,
    Vocabulary,
};
use parley_core::gradcheck::{run_suite, GradCheckConfig, DEFAULT_TOLERANCE};
use parley_core::inference::{evaluate, repl, Engine, DEFAULT_MAX_LEN};
use parley_core::seq2seq::{load_checkpoint, Checkpoint, Hyper, ModelParams};
use parley_core::trainer::{prepare_examples, train, CheckpointSink, OptimizerKind, StopReason, TrainConfig, TrainError};
use parley_core::Execution;
use serde_json::{json, Value};

use crate::server;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "parley", version, about = "Sequence-to-sequence question answering")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse a raw corpus into question/answer pairs.
    Preprocess(PreprocessArgs),
    /// Build a vocabulary from a pairs file.
    BuildVocab(BuildVocabArgs),
    /// Train a model and write per-epoch checkpoints.
    Train(TrainArgs),
    /// Report loss, perplexity and greedy exact-match on a pairs file.
    Eval(EvalArgs),
    /// Interactive question answering on stdin/stdout.
    Chat(ChatArgs),
    /// Serve /ask and /health over HTTP.
    Serve(ServeArgs),
    /// Check every backward rule against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CorpusFormat {
    Cornell,
    Tsv,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    #[arg(long, value_enum)]
    format: CorpusFormat,
    /// Movie lines file (cornell).
    #[arg(long)]
    lines: Option<PathBuf>,
    /// Conversations file (cornell).
    #[arg(long)]
    convs: Option<PathBuf>,
    /// Tab-separated question/answer file (tsv).
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Multi-word terms to merge, one phrase per line.
    #[arg(long)]
    merge_lexicon: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BuildVocabArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, default_value_t = 1)]
    min_count: usize,
    #[arg(long, default_value_t = 20000)]
    max_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    #[arg(long, default_value_t = 256)]
    embed: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 10)]
    max_len: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value = "adam", value_parser = parse_optimizer)]
    optimizer: OptimizerKind,
    #[arg(long, default_value_t = 5.0)]
    clip_norm: f64,
    #[arg(long, default_value_t = 0.1)]
    eval_fraction: f64,
    #[arg(long, default_value_t = 3)]
    patience: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stop after this many optimizer steps, even mid-epoch.
    #[arg(long)]
    max_iterations: Option<u64>,
    /// Word vectors (`token v1 .. vD`, D = --embed) to initialize embeddings.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Run every batch on the calling thread.
    #[arg(long)]
    sequential: bool,
    #[arg(long)]
    checkpoint_dir: PathBuf,
    #[arg(long)]
    loss_log: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, default_value_t = 10)]
    max_len: usize,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
}

#[derive(Debug, Args)]
struct EngineArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    merge_lexicon: Option<PathBuf>,
    /// Questions are truncated to this many tokens.
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    max_len: usize,
    /// Longest answer generated; defaults to --max-len.
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Debug, Args)]
struct ChatArgs {
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long)]
    addr: SocketAddr,
    /// Value for Access-Control-Allow-Origin; `*` allows any origin.
    #[arg(long)]
    allow_origin: Option<String>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    s.parse()
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime { kind: &'static str, message: String, detail: Value },
}

impl Failure {
    fn runtime(kind: &'static str, message: impl ToString) -> Self {
        Failure::Runtime {
            kind,
            message: message.to_string(),
            detail: Value::Null,
        }
    }
}

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        Failure::runtime("corpus", e)
    }
}

type Outcome = Result<(), Failure>;

struct Io<'a> {
    stdin: &'a mut dyn BufRead,
    stdout: &'a mut dyn Write,
    stderr: &'a mut dyn Write,
}

impl Io<'_> {
    fn emit(&mut self, value: Value) -> Outcome {
        writeln!(self.stdout, "{value}").map_err(|e| Failure::runtime("io", e))
    }

    fn warn(&mut self, message: impl AsRef<str>) {
        let _ = writeln!(self.stderr, "{}", json!({ "warning": message.as_ref() }));
    }
}

/// Parses `args` (program name first) and runs the subcommand. Returns the
/// process exit code.
pub fn run<I, T>(args: I, mut stdin: impl BufRead, mut stdout: impl Write, mut stderr: impl Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = write!(stdout, "{e}");
            return EXIT_OK;
        }
        Err(e) => {
            let _ = writeln!(stderr, "{}", json!({ "error": { "kind": "usage", "message": e.to_string() } }));
            return EXIT_USAGE;
        }
    };
    let mut io = Io {
        stdin: &mut stdin,
        stdout: &mut stdout,
        stderr: &mut stderr,
    };
    let outcome = dispatch(cli.command, &mut io);
    let _ = io.stdout.flush();
    match outcome {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(message)) => {
            let _ = writeln!(io.stderr, "{}", json!({ "error": { "kind": "usage", "message": message } }));
            EXIT_USAGE
        }
        Err(Failure::Runtime { kind, message, detail }) => {
            let mut error = json!({ "kind": kind, "message": message });
            if let (Value::Object(map), Value::Object(extra)) = (&mut error, detail) {
                map.extend(extra);
            }
            let _ = writeln!(io.stderr, "{}", json!({ "error": error }));
            EXIT_RUNTIME
        }
    }
}

fn dispatch(command: Command, io: &mut Io<'_>) -> Outcome {
    match command {
        Command::Preprocess(a) => preprocess(a, io),
        Command::BuildVocab(a) => build_vocab(a, io),
        Command::Train(a) => train_cmd(a, io),
        Command::Eval(a) => eval_cmd(a, io),
        Command::Chat(a) => chat(a, io),
        Command::Serve(a) => serve(a),
        Command::Gradcheck(a) => gradcheck(a, io),
    }
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::runtime("io", format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::runtime("io", format!("{}: {e}", path.display())))
}

fn flush(mut w: BufWriter<File>, path: &Path) -> Outcome {
    w.flush().map_err(|e| Failure::runtime("io", format!("{}: {e}", path.display())))
}

fn read_pairs(path: &Path) -> Result<ParsedCorpus, Failure> {
    Ok(parse_tsv(open(path)?)?)
}

fn read_lexicon(path: &Path) -> Result<TermLexicon, Failure> {
    Ok(TermLexicon::from_reader(open(path)?)?)
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    load_checkpoint(path).map_err(|e| Failure::runtime("checkpoint", format!("{}: {e}", path.display())))
}

fn preprocess(a: PreprocessArgs, io: &mut Io<'_>) -> Outcome {
    let parsed = match a.format {
        CorpusFormat::Cornell => {
            let (Some(lines), Some(convs)) = (&a.lines, &a.convs) else {
                return Err(Failure::Usage("--format cornell requires --lines and --convs".into()));
            };
            parse_cornell(open(lines)?, open(convs)?)?
        }
        CorpusFormat::Tsv => {
            let Some(pairs) = &a.pairs else {
                return Err(Failure::Usage("--format tsv requires --pairs".into()));
            };
            read_pairs(pairs)?
        }
    };
    let mut pairs = parsed.pairs;
    if let Some(path) = &a.merge_lexicon {
        let lexicon = read_lexicon(path)?;
        pairs = pairs.iter().map(|p| p.merge_terms(&lexicon)).collect();
    }
    for w in &parsed.warnings {
        io.warn(w);
    }
    let mut out = create(&a.out)?;
    write_tsv(&pairs, &mut out)?;
    flush(out, &a.out)?;
    io.emit(json!({
        "pairs": pairs.len(),
        "warnings": parsed.warnings.len(),
        "out": a.out.display().to_string(),
    }))
}

fn build_vocab(a: BuildVocabArgs, io: &mut Io<'_>) -> Outcome {
    let parsed = read_pairs(&a.pairs)?;
    for w in &parsed.warnings {
        io.warn(w);
    }
    let vocab = Vocabulary::build(&parsed.pairs, a.min_count, a.max_size).map_err(|e| match e {
        CorpusError::InvalidArgument(m) => Failure::Usage(m),
        other => other.into(),
    })?;
    let mut out = create(&a.out)?;
    vocab.write_to(&mut out)?;
    flush(out, &a.out)?;
    io.emit(json!({ "vocab_size": vocab.len(), "out": a.out.display().to_string() }))
}

fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::Config(m) => Failure::Usage(m),
        TrainError::Diverged {
            epoch,
            batch,
            cause,
            ref last_good,
        } => Failure::Runtime {
            kind: "divergence",
            message: e.to_string(),
            detail: json!({
                "epoch": epoch,
                "batch": batch,
                "cause": cause.to_string(),
                "last_good_checkpoint": last_good.as_ref().map(|p| p.display().to_string()),
            }),
        },
        other => Failure::runtime("train", other),
    }
}

fn train_cmd(a: TrainArgs, io: &mut Io<'_>) -> Outcome {
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        optimizer: a.optimizer,
        clip_norm: a.clip_norm,
        max_len: a.max_len,
        eval_fraction: a.eval_fraction,
        patience: a.patience,
        seed: a.seed,
        max_iterations: a.max_iterations,
        execution: if a.sequential {
            Execution::Sequential
        } else {
            Execution::default()
        },
    };
    config.validate().map_err(train_failure)?;
    let vocab = Vocabulary::read_from(open(&a.vocab)?)?;
    let hyper = Hyper::new(vocab.len(), a.embed, a.hidden, a.layers);
    hyper.validate().map_err(|e| Failure::Usage(e.to_string()))?;

    let parsed = read_pairs(&a.pairs)?;
    for w in &parsed.warnings {
        io.warn(w);
    }
    let (examples, rejected) = prepare_examples(&parsed.pairs, &vocab, a.max_len);
    if !rejected.is_empty() {
        io.warn(format!("skipped {} pairs longer than max_len {}", rejected.len(), a.max_len));
    }
    if examples.is_empty() {
        return Err(Failure::runtime("corpus", "no pairs fit within max_len"));
    }

    let pretrained = match &a.pretrained {
        Some(path) => {
            let p = load_pretrained_embeddings(open(path)?, &vocab, a.embed)?;
            io.warn(format!("pretrained vectors cover {} of {} tokens", p.coverage(), vocab.len()));
            Some(p)
        }
        None => None,
    };
    let params = ModelParams::<f32>::init(hyper, a.seed, pretrained.as_ref()).map_err(|e| Failure::runtime("model", e))?;
    let sink = CheckpointSink {
        dir: &a.checkpoint_dir,
        vocab: &vocab,
    };
    let outcome = train(&config, &examples, params, Some(sink)).map_err(train_failure)?;

    let mut log_out = create(&a.loss_log)?;
    outcome
        .log
        .write_csv(&mut log_out)
        .map_err(|e| Failure::runtime("io", e))?;
    flush(log_out, &a.loss_log)?;

    let stop = match outcome.stop {
        StopReason::Completed => json!("completed"),
        StopReason::IterationCap => json!("max_iterations"),
        StopReason::Overfit(r) => json!({ "overfit": { "flagged_epoch": r.flagged_epoch, "best_epoch": r.best_epoch } }),
    };
    let last = outcome.log.rows().last().copied();
    io.emit(json!({
        "epochs_run": outcome.log.len(),
        "iterations": outcome.iterations,
        "train_examples": outcome.train_size,
        "eval_examples": outcome.eval_size,
        "skipped_examples": rejected.len(),
        "final_train_loss": last.map(|r| r.train_loss),
        "final_eval_loss": last.and_then(|r| r.eval_loss),
        "best_epoch": outcome.best_epoch,
        "best_checkpoint": outcome.best_checkpoint.map(|p| p.display().to_string()),
        "loss_log": a.loss_log.display().to_string(),
        "stop": stop,
    }))
}

fn eval_cmd(a: EvalArgs, io: &mut Io<'_>) -> Outcome {
    if a.max_len == 0 || a.batch_size == 0 {
        return Err(Failure::Usage("--max-len and --batch-size must be at least 1".into()));
    }
    let ck = read_checkpoint(&a.checkpoint)?;
    let parsed = read_pairs(&a.pairs)?;
    for w in &parsed.warnings {
        io.warn(w);
    }
    let (examples, rejected) = prepare_examples(&parsed.pairs, &ck.vocab, a.max_len);
    if examples.is_empty() {
        return Err(Failure::runtime("corpus", "no pairs fit within max_len"));
    }
    let report = evaluate(&ck.params, &examples, a.batch_size, Execution::default())
        .map_err(|e| Failure::runtime("model", e))?;
    io.emit(json!({
        "examples": report.examples,
        "skipped_examples": rejected.len(),
        "tokens": report.tokens,
        "mean_loss": report.mean_loss,
        "perplexity": report.perplexity,
        "exact_match": report.exact_match,
    }))
}

fn build_engine(a: &EngineArgs) -> Result<Engine, Failure> {
    let ck = read_checkpoint(&a.checkpoint)?;
    let mut engine = Engine::from_checkpoint(ck)
        .and_then(|e| e.with_limits(a.max_len, a.max_steps.unwrap_or(a.max_len)))
        .map_err(|e| Failure::runtime("model", e))?;
    if let Some(path) = &a.merge_lexicon {
        engine = engine.with_lexicon(read_lexicon(path)?);
    }
    Ok(engine)
}

fn chat(a: ChatArgs, io: &mut Io<'_>) -> Outcome {
    let engine = build_engine(&a.engine)?;
    repl(&engine, &mut *io.stdin, &mut *io.stdout)
        .map(|_| ())
        .map_err(|e| Failure::runtime("io", e))
}

fn serve(a: ServeArgs) -> Outcome {
    let engine = build_engine(&a.engine)?;
    if let Some(origin) = &a.allow_origin {
        if origin != "*" && axum::http::HeaderValue::from_str(origin).is_err() {
            return Err(Failure::Usage(format!("invalid --allow-origin {origin:?}")));
        }
    }
    server::run(engine, a.addr, a.allow_origin.as_deref()).map_err(|e| Failure::runtime("server", e))
}

fn gradcheck(a: GradcheckArgs, io: &mut Io<'_>) -> Outcome {
    if !(a.tolerance.is_finite() && a.tolerance > 0.0) {
        return Err(Failure::Usage("--tolerance must be positive".into()));
    }
    let config = GradCheckConfig {
        seed: a.seed,
        tolerance: a.tolerance,
        ..Default::default()
    };
    let reports = run_suite(&config).map_err(|e| Failure::runtime("gradcheck", e))?;
    let mut worst: f64 = 0.0;
    for r in &reports {
        worst = worst.max(r.max_rel_error());
        io.emit(json!({
            "rule": r.rule,
            "max_rel_error": r.max_rel_error(),
            "checked": r.tensors.iter().map(|t| t.checked).sum::<usize>(),
            "passed": r.passed(),
            "elapsed_ms": r.elapsed_ms,
        }))?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.rule.as_str()).collect();
    if failed.is_empty() {
        io.emit(json!({ "passed": true, "max_rel_error": worst, "tolerance": a.tolerance }))
    } else {
        Err(Failure::Runtime {
            kind: "gradcheck",
            message: format!("gradient check failed for {}", failed.join(", ")),
            detail: json!({ "max_rel_error": worst, "tolerance": a.tolerance }),
        })
    }
}
