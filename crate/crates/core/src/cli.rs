//! Command-line front end: `gen-data`, `train`, `eval` and `score`.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 on data
//! errors (unreadable or malformed inputs, unwritable outputs).

use crate::curriculum::{run_curriculum, CurriculumConfig, CurriculumError, LogRecord, RunObserver};
use crate::eval::{evaluate, read_predictions, render_report, EvalConfig};
use crate::policy::PolicyParams;
use crate::rewards::score_outcome;
use crate::synthcxr::{balance_labels, generate_corpus, partition, QuestionKind, SynthCase};
use crate::trace::parse_trace;
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Parser)]
#[command(name = "interleave", version, about = "Interleaved-reasoning rewards and curriculum GRPO on synthetic chest findings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus as JSONL.
    GenData(GenDataArgs),
    /// Run the two-phase curriculum on a corpus.
    Train(TrainArgs),
    /// Evaluate a predictions JSONL file.
    Eval(EvalArgs),
    /// Print the reward breakdown of one trace against one gold record.
    Score(ScoreArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Comma-separated question kinds, cycled in order.
    #[arg(long, value_delimiter = ',', default_value = "binary,single,multiple,open")]
    pub kinds: Vec<QuestionKind>,
    /// Downsample to equal (kind, primary label) stratum counts.
    #[arg(long)]
    pub balance: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Raw model output to score.
    #[arg(long)]
    pub trace: PathBuf,
    /// A corpus record (first non-empty line is used).
    #[arg(long)]
    pub gold: PathBuf,
    /// Training config supplying reward weights and mode; defaults otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub batch_metric: f64,
    /// Gate threshold the batch metric must strictly exceed.
    #[arg(long, default_value_t = 0.0)]
    pub ema: f64,
}

impl clap::ValueEnum for QuestionKind {
    fn value_variants<'a>() -> &'a [Self] {
        &QuestionKind::ALL
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.as_str()))
    }
}

/// A failed command with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 1, message: message.into() }
}

fn data(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| data(format!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| data(format!("cannot write {}: {e}", path.display())))
}

fn load_config(path: &Path) -> Result<CurriculumConfig, Failure> {
    let text = read(path)?;
    let cfg: CurriculumConfig =
        serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    cfg.validate().map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    Ok(cfg)
}

fn load_corpus(path: &Path) -> Result<Vec<SynthCase>, Failure> {
    let text = read(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| data(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn gen_data(args: &GenDataArgs, out: &mut dyn Write) -> Result<(), Failure> {
    if !(0.0..0.5).contains(&args.noise) {
        return Err(usage(format!("--noise {} outside [0, 0.5)", args.noise)));
    }
    let mut cases = generate_corpus(args.n, args.seed, &args.kinds, args.noise).map_err(|e| usage(e.to_string()))?;
    if args.balance {
        cases = balance_labels(&cases, args.seed);
    }
    let mut text = String::new();
    let mut by_kind: BTreeMap<&str, usize> = BTreeMap::new();
    for c in &cases {
        text.push_str(&serde_json::to_string(c).expect("case serialises"));
        text.push('\n');
        *by_kind.entry(c.kind.as_str()).or_default() += 1;
    }
    write_file(&args.out, &text)?;
    let summary = json!({
        "generated": args.n,
        "written": cases.len(),
        "balanced": args.balance,
        "by_kind": by_kind,
        "out": args.out.display().to_string(),
    });
    let _ = writeln!(out, "{summary}");
    Ok(())
}

/// Streams log records to `train_log.jsonl` and checkpoints next to it.
struct FileObserver {
    dir: PathBuf,
    log: BufWriter<File>,
}

impl FileObserver {
    fn sink_err(e: impl std::fmt::Display) -> CurriculumError {
        CurriculumError::Sink(e.to_string())
    }
}

impl RunObserver for FileObserver {
    fn record(&mut self, record: &LogRecord) -> Result<(), CurriculumError> {
        let line = serde_json::to_string(record).map_err(Self::sink_err)?;
        writeln!(self.log, "{line}").map_err(Self::sink_err)?;
        if !matches!(record, LogRecord::Trajectory(_)) {
            // keep partial runs analysable
            self.log.flush().map_err(Self::sink_err)?;
        }
        Ok(())
    }

    fn checkpoint(&mut self, label: &str, params: &PolicyParams) -> Result<(), CurriculumError> {
        let path = self.dir.join(format!("checkpoint_{label}.jsonl"));
        let file = File::create(&path).map_err(Self::sink_err)?;
        let mut w = BufWriter::new(file);
        params.write_checkpoint(&mut w).map_err(Self::sink_err)?;
        w.flush().map_err(Self::sink_err)
    }
}

fn train(args: &TrainArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let cfg = load_config(&args.config)?;
    let cases = load_corpus(&args.corpus)?;
    let part = partition(&cases, cfg.reasoning_fraction, cfg.partition_seed).map_err(|e| usage(e.to_string()))?;
    fs::create_dir_all(&args.out_dir)
        .map_err(|e| data(format!("cannot create {}: {e}", args.out_dir.display())))?;
    let log_path = args.out_dir.join(LOG_FILE);
    let file = File::create(&log_path).map_err(|e| data(format!("cannot write {}: {e}", log_path.display())))?;
    let mut obs = FileObserver { dir: args.out_dir.clone(), log: BufWriter::new(file) };
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    obs.record(&LogRecord::Header { timestamp: ts.to_string() }).map_err(|e| data(e.to_string()))?;

    let outcome = run_curriculum(&part, &cfg, &mut obs).map_err(|e| match e {
        CurriculumError::Config { .. } => usage(e.to_string()),
        other => data(other.to_string()),
    })?;
    obs.log.flush().map_err(|e| data(e.to_string()))?;

    let summary = json!({
        "steps": outcome.closed.steps.len() + outcome.open.steps.len(),
        "closed_steps": outcome.closed.steps.len(),
        "open_steps": outcome.open.steps.len(),
        "answer_only_cases": part.d_a.len(),
        "reasoning_closed_cases": part.d_r_closed.len(),
        "reasoning_open_cases": part.d_r_open.len(),
        "initial_heldout": outcome.initial_heldout,
        "closed_heldout": outcome.closed.heldout,
        "final_heldout": outcome.open.heldout,
        "closed_final_ema": outcome.closed.final_ema,
        "open_final_ema": outcome.open.final_ema,
    });
    write_file(&args.out_dir.join(SUMMARY_FILE), &format!("{summary:#}\n"))?;
    let _ = writeln!(out, "{summary}");
    Ok(())
}

fn eval_cmd(args: &EvalArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let text = read(&args.pred)?;
    let records = read_predictions(&text).map_err(|e| data(e.to_string()))?;
    let report = evaluate(&records, &EvalConfig::default()).map_err(|e| data(e.to_string()))?;
    let (table, json) = render_report(&report);
    write_file(&args.out, &format!("{json}\n"))?;
    let _ = write!(out, "{table}");
    Ok(())
}

fn score(args: &ScoreArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let cfg = match &args.config {
        Some(p) => load_config(p)?,
        None => CurriculumConfig::default(),
    };
    let raw = read(&args.trace)?;
    let gold_text = read(&args.gold)?;
    let line = gold_text
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| data(format!("{} is empty", args.gold.display())))?;
    let case: SynthCase =
        serde_json::from_str(line).map_err(|e| data(format!("{}: {e}", args.gold.display())))?;
    let outcome = parse_trace(&raw);
    let fs = case.final_target().score_outcome(&outcome);
    let bd = score_outcome(
        &outcome,
        &case.gold_intermediate(),
        &fs,
        args.batch_metric,
        args.ema,
        cfg.mode,
        &cfg.rewards(),
    );
    let _ = writeln!(out, "{}", serde_json::to_string(&bd).expect("breakdown serialises"));
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a, out),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval_cmd(a, out),
        Command::Score(a) => score(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}
