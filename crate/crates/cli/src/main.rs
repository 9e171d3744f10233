use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cool_core::checkpoint::Checkpoint;
use cool_core::data::{build_vocab, collect_labels, load_dataset, DataFormat, Example, LabelSet, Vocab};
use cool_core::metrics::Answer;
use cool_core::optim::AdamW;
use cool_core::oracle::{format_json_lines, format_table, DiffReport};
use cool_core::train::{evaluate, loss_curve_csv, predict, train, Control, TrainSetup};
use cool_core::verify::{gradcheck_suite, oracle_diff_suite};
use cool_core::{Config, Model, TaskKind};

const CHECKPOINT_FILE: &str = "model.ckpt";
const VOCAB_FILE: &str = "vocab.txt";
const LABELS_FILE: &str = "labels.txt";

#[derive(Parser)]
#[command(name = "cool", version, about = "Train, evaluate and verify context outlook models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, vocabulary, loss curve and report.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write one JSON prediction per example.
    Predict(PredictArgs),
    /// Finite-difference gradient checks over every layer and mode.
    Gradcheck(CheckArgs),
    /// Compare the outlook layer against its loop reference.
    OracleDiff(OracleArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key (repeatable, applied in order after the file).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Override the seed after all other settings.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset file.
    #[arg(long)]
    data: PathBuf,
    /// span_jsonl, conll or tsv; inferred from the extension when omitted.
    #[arg(long)]
    format: Option<DataFormat>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Training set.
    #[arg(long)]
    train: PathBuf,
    /// Optional held-out set for the final report.
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    format: Option<DataFormat>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train`; vocabulary files are read from its directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Override a stored config key (decoding settings such as null_threshold).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Write predictions here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Emit JSON lines instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Random configurations per softmax scope.
    #[arg(long, default_value_t = 200)]
    cases: usize,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long)]
    json: bool,
}

/// Failure with its exit code: 1 for bad input, 2 for numeric failures.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn input(msg: impl Into<String>) -> Self {
        Failure { code: 1, msg: msg.into() }
    }

    fn numeric(msg: impl Into<String>) -> Self {
        Failure { code: 2, msg: msg.into() }
    }
}

impl From<cool_core::Error> for Failure {
    fn from(e: cool_core::Error) -> Self {
        Failure {
            code: if e.is_numeric() { 2 } else { 1 },
            msg: e.to_string(),
        }
    }
}

macro_rules! input_err {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::input(e.to_string())
            }
        }
    )*};
}

input_err!(
    cool_core::config::ConfigError,
    cool_core::data::DataError,
    cool_core::checkpoint::CheckpointError
);

type Result<T> = std::result::Result<T, Failure>;

fn load_config(args: &ConfigArgs) -> Result<Config> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
            Config::parse(&text)?
        }
        None => Config::default(),
    };
    for kv in &args.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(seed) = args.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_format(path: &Path, format: Option<DataFormat>) -> Result<DataFormat> {
    format.or_else(|| DataFormat::infer(path)).ok_or_else(|| {
        Failure::input(format!(
            "cannot infer the format of {}; pass --format",
            path.display()
        ))
    })
}

fn expected_format(task: TaskKind) -> Option<DataFormat> {
    match task {
        TaskKind::Span => Some(DataFormat::SpanJsonl),
        TaskKind::TokenTag => Some(DataFormat::Conll),
        TaskKind::SeqClass => Some(DataFormat::Tsv),
        TaskKind::MultiChoice => None,
    }
}

fn load_examples(path: &Path, format: Option<DataFormat>, task: TaskKind) -> Result<Vec<Example>> {
    if !path.exists() {
        return Err(Failure::input(format!("dataset not found: {}", path.display())));
    }
    let format = resolve_format(path, format)?;
    match expected_format(task) {
        Some(f) if f == format => {}
        Some(f) => {
            return Err(Failure::input(format!(
                "task {task} reads {f} data, got {format} for {}",
                path.display()
            )))
        }
        None => return Err(Failure::input(format!("no file format is defined for task {task}"))),
    }
    let examples = load_dataset(path, format)?;
    if examples.is_empty() {
        return Err(Failure::input(format!("{} contains no examples", path.display())));
    }
    Ok(examples)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    let task = cfg.model.task;
    let examples = load_examples(&args.train, args.format, task)?;
    let labels = collect_labels(&examples);
    if matches!(task, TaskKind::SeqClass | TaskKind::TokenTag) && labels.len() != cfg.model.num_labels {
        eprintln!("num_labels set to {} from the training labels", labels.len());
        cfg.set("num_labels", &labels.len().to_string())?;
    }
    let vocab = build_vocab(&examples, cfg.model.vocab_size);
    fs::create_dir_all(&args.out).map_err(|e| Failure::input(format!("{}: {e}", args.out.display())))?;
    write(&args.out.join(VOCAB_FILE), &vocab.to_text())?;
    write(&args.out.join(LABELS_FILE), &labels.to_text())?;

    let (model, mut store) = Model::assemble(&cfg.model)?;
    let mut optim = AdamW::from_config(&cfg.train);
    let setup = TrainSetup {
        config: &cfg,
        model: &model,
        vocab: &vocab,
        labels: &labels,
        examples: &examples,
    };
    let every = cfg.train.checkpoint_every;
    let curve = train(&setup, &mut store, &mut optim, |p| {
        let done = p.row.step + 1;
        if every > 0 && done % every == 0 {
            Checkpoint::capture(&cfg, p.store, Some(p.optim))
                .save(args.out.join(format!("model-step{done}.ckpt")))
                .map_err(cool_core::Error::from)?;
        }
        Ok(Control::Continue)
    })?;
    Checkpoint::capture(&cfg, &store, Some(&optim)).save(args.out.join(CHECKPOINT_FILE))?;
    write(&args.out.join("loss.csv"), &loss_curve_csv(&curve))?;

    let (eval_set, name) = match &args.dev {
        Some(dev) => (load_examples(dev, args.format, task)?, dev.display().to_string()),
        None => (examples.clone(), args.train.display().to_string()),
    };
    let report = evaluate(&cfg, &model, &store, &vocab, &labels, &eval_set, &name)?;
    let line = report.to_json_line();
    write(&args.out.join("report.jsonl"), &format!("{line}\n"))?;
    println!("{line}");
    Ok(())
}

struct Loaded {
    cfg: Config,
    model: Model,
    store: cool_core::ParameterStore,
    vocab: Vocab,
    labels: LabelSet,
}

fn load_checkpoint(path: &Path, overrides: &[String]) -> Result<Loaded> {
    if !path.exists() {
        return Err(Failure::input(format!("checkpoint not found: {}", path.display())));
    }
    let ck = Checkpoint::load(path)?;
    let mut cfg = ck.config()?;
    for kv in overrides {
        cfg.apply_override(kv)?;
    }
    cfg.validate()?;
    let (model, mut store) = Model::assemble(&cfg.model)?;
    ck.restore_params(&mut store)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let vocab = Vocab::from_text(&read(&dir.join(VOCAB_FILE))?)?;
    let labels = LabelSet::from_text(&read(&dir.join(LABELS_FILE))?);
    Ok(Loaded {
        cfg,
        model,
        store,
        vocab,
        labels,
    })
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let l = load_checkpoint(&args.checkpoint, &args.overrides)?;
    let examples = load_examples(&args.data.data, args.data.format, l.cfg.model.task)?;
    let name = args.data.data.display().to_string();
    let report = evaluate(&l.cfg, &l.model, &l.store, &l.vocab, &l.labels, &examples, &name)?;
    println!("{}", report.to_json_line());
    Ok(())
}

fn run_predict(args: PredictArgs) -> Result<()> {
    let e = &args.eval;
    let l = load_checkpoint(&e.checkpoint, &e.overrides)?;
    let examples = load_examples(&e.data.data, e.data.format, l.cfg.model.task)?;
    let preds = predict(&l.model, &l.store, &l.vocab, &l.labels, &examples, l.cfg.train.batch_size)?;
    let mut out = String::new();
    for (id, p) in preds.ids.iter().zip(&preds.predicted) {
        let value = match p {
            Answer::Span(text) => json!({ "id": id, "answer": text }),
            Answer::Class(c) => json!({ "id": id, "label": l.labels.name(*c) }),
            Answer::Choice(c) => json!({ "id": id, "choice": c }),
            Answer::Tags(tags) => json!({ "id": id, "tags": tags }),
        };
        out.push_str(&value.to_string());
        out.push('\n');
    }
    match &args.out {
        Some(path) => write(path, &out)?,
        None => print!("{out}"),
    }
    Ok(())
}

fn report(reports: &[DiffReport], json: bool) -> Result<()> {
    if json {
        print!("{}", format_json_lines(reports));
    } else {
        print!("{}", format_table(reports));
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.op.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::numeric(format!("failed: {}", failed.join(", "))))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Predict(a) => run_predict(a),
        Command::Gradcheck(a) => report(&gradcheck_suite(a.seed)?, a.json),
        Command::OracleDiff(a) => report(&oracle_diff_suite(a.seed, a.cases, a.tol)?, a.json),
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
