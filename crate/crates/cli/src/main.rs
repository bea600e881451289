use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use volta::checkpoint::Checkpoint;
use volta::data::{make_synthetic_corpus, Dataset, SyntheticSpec, Task};
use volta::eval::{self, CodeIndex, EvalOptions, Evaluator, Generation};
use volta::gradcheck;
use volta::model::Mode;
use volta::tokenizer::Vocab;
use volta::train::{self, CodePolicy, CorpusSource, LatentPolicy, RunConfig, Trainer};
use volta::{Result, VoltaError};

#[derive(Parser)]
#[command(
    name = "volta",
    version,
    about = "Train and probe a small variational transformer with latent codes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints and a loss log.
    Train(TrainArgs),
    /// Sample several outputs per context from the prior.
    Generate(GenerateArgs),
    /// Decode along the line between two encoded examples.
    Interpolate(InterpolateArgs),
    /// Hold the latents fixed and scan one code.
    SweepCode(SweepArgs),
    /// Compute the metrics report on a split.
    Eval(EvalArgs),
    /// Finite-difference checks of every op and of the full loss.
    GradCheck(GradCheckArgs),
    /// Write posterior means as CSV.
    ExportLatents(ExportArgs),
    /// Write a synthetic corpus.
    MakeData(MakeDataArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Lm,
    Dialog,
    Qag,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Lm => Task::Lm,
            TaskArg::Dialog => Task::Dialog,
            TaskArg::Qag => Task::Qag,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    DecoderOnly,
    EncoderDecoder,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::DecoderOnly => Mode::DecoderOnly,
            ModeArg::EncoderDecoder => Mode::EncoderDecoder,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum Split {
    Train,
    Test,
    All,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run config; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    /// Checkpoint file written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Decode the best span with start <= end instead of independent argmaxes.
    #[arg(long)]
    constrained_span: bool,
    /// Use the prior mean and fixed codes instead of sampling.
    #[arg(long)]
    deterministic: bool,
    /// Longest generated text, in tokens.
    #[arg(long, default_value_t = 20)]
    max_len: usize,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 5)]
    samples: usize,
    /// Only the first N contexts.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InterpolateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Comma-separated interpolation weights in [0, 1].
    #[arg(long, default_value = "0,0.25,0.5,0.75,1")]
    grid: String,
    /// Index of the first example in the split.
    #[arg(long, default_value_t = 0)]
    from: usize,
    /// Index of the second example in the split.
    #[arg(long, default_value_t = 1)]
    to: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Code to scan: continuous codes are numbered first, then discrete ones.
    #[arg(long)]
    code_index: usize,
    /// Values for a continuous code.
    #[arg(long, default_value = "-1,-0.5,0,0.5,1")]
    grid: String,
    /// Index of the context in the split.
    #[arg(long, default_value_t = 0)]
    context: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 5)]
    samples: usize,
    /// Write the report as JSON here as well.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Only check this architecture; both by default.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    /// Random op-suite draws.
    #[arg(long, default_value_t = 5)]
    trials: usize,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    split: Split,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MakeDataArgs {
    /// JSON synthetic spec; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> VoltaError {
    VoltaError::Io(format!("{}: {e}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| VoltaError::Config(format!("{}: {e}", path.display())))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| io_err(p, e))?)),
        None => Box::new(BufWriter::new(std::io::stdout())),
    })
}

fn emit(out: &mut dyn Write, value: serde_json::Value) -> Result<()> {
    writeln!(out, "{value}").map_err(|e| VoltaError::Io(e.to_string()))
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| VoltaError::Config(format!("bad grid value `{x}`")))
        })
        .collect()
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg: RunConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
        cfg.epochs = None;
    }
    if let Some(t) = a.task {
        cfg.task = t.into();
        if let CorpusSource::Synthetic(spec) = &mut cfg.corpus {
            spec.task = cfg.task;
        }
    }
    if let Some(m) = a.mode {
        cfg.model.mode = m.into();
    }
    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let mut trainer = Trainer::new(cfg)?;
    std::fs::write(a.out.join("run.json"), trainer.config.to_json()).map_err(|e| io_err(&a.out, e))?;
    let log_path = a.out.join("losses.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| io_err(&log_path, e))?);
    let every = trainer.config.checkpoint_every;
    let out = a.out.clone();
    let result = trainer.run(|t, report| {
        let line = json!({"step": t.step, "report": report});
        writeln!(log, "{line}").map_err(|e| VoltaError::Io(e.to_string()))?;
        if every > 0 && t.step % every == 0 && t.step < t.total_steps {
            Checkpoint::from_trainer(t).save(&out.join(format!("checkpoint-{:06}.bin", t.step)))?;
        }
        Ok(())
    });
    log.flush().map_err(|e| io_err(&log_path, e))?;
    // on divergence the weights are those of the last good step
    Checkpoint::from_trainer(&trainer).save(&a.out.join("checkpoint.bin"))?;
    result?;
    println!(
        "{}",
        json!({"steps": trainer.step, "checkpoint": a.out.join("checkpoint.bin")})
    );
    Ok(())
}

struct Loaded {
    ck: Checkpoint,
    vocab: Vocab,
    data: Dataset,
}

fn load(m: &ModelArgs) -> Result<Loaded> {
    let ck = Checkpoint::load(&m.checkpoint)?;
    let corpus = ck.config.load_corpus()?;
    let (train_c, test_c) = corpus.split(ck.config.holdout);
    let chosen = match m.split {
        Split::Train => train_c,
        Split::Test => test_c,
        Split::All => corpus,
    };
    let data = Dataset::from_corpus(&chosen, &ck.vocab)?;
    if data.is_empty() {
        return Err(VoltaError::DegenerateInput("the selected split is empty".into()));
    }
    Ok(Loaded {
        vocab: ck.vocab.clone(),
        ck,
        data,
    })
}

fn options(m: &ModelArgs, cfg: &RunConfig) -> EvalOptions {
    let deterministic = m.deterministic || cfg.latent_policy == LatentPolicy::Deterministic;
    EvalOptions {
        task: cfg.task,
        policy: if deterministic {
            LatentPolicy::Deterministic
        } else {
            LatentPolicy::Variational
        },
        codes: if deterministic || cfg.code_policy == CodePolicy::Fixed {
            CodePolicy::Fixed
        } else {
            CodePolicy::Sampled
        },
        pipeline: cfg.pipeline,
        constrained_span: m.constrained_span,
        tau: cfg.tau,
        max_len: m.max_len,
    }
}

fn generation_json(vocab: &Vocab, g: &Generation) -> serde_json::Value {
    match g.span {
        Some((s, e, valid)) => json!({
            "span": [s, e],
            "valid": valid,
            "answer": vocab.decode(&g.answer),
            "text": vocab.decode(&g.text),
        }),
        None => json!({"text": vocab.decode(&g.text)}),
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let l = load(&a.model)?;
    let model = l.ck.model();
    let ev = Evaluator::new(&model, options(&a.model, &l.ck.config));
    let mut rng = ChaCha8Rng::seed_from_u64(a.model.seed);
    let mut out = output(a.out.as_deref())?;
    let ctxs = eval::contexts(&l.data);
    for ex in ctxs.into_iter().take(a.limit.unwrap_or(usize::MAX)) {
        let gens = ev.sample_outputs(&ex.context, a.samples, &mut rng)?;
        let outputs: Vec<_> = gens.iter().map(|g| generation_json(&l.vocab, g)).collect();
        emit(
            &mut *out,
            json!({"group": ex.group, "context": l.vocab.decode(&ex.context), "outputs": outputs}),
        )?;
    }
    out.flush().map_err(|e| VoltaError::Io(e.to_string()))
}

fn pick(data: &Dataset, i: usize) -> Result<&volta::data::Example> {
    data.examples.get(i).ok_or(VoltaError::Index {
        what: "example",
        index: i,
        size: data.len(),
    })
}

fn interpolate(a: InterpolateArgs) -> Result<()> {
    let l = load(&a.model)?;
    let model = l.ck.model();
    let ev = Evaluator::new(&model, options(&a.model, &l.ck.config));
    let grid = parse_grid(&a.grid)?;
    let (x, y) = (pick(&l.data, a.from)?, pick(&l.data, a.to)?);
    let za = ev.posterior_mean(x)?;
    let zb = ev.posterior_mean(y)?;
    let codes = ev.draw_codes(&mut ChaCha8Rng::seed_from_u64(a.model.seed))?;
    let mut out = output(a.out.as_deref())?;
    for (alpha, g) in ev.interpolate(&x.context, &za, &zb, &codes, &grid)? {
        let mut v = generation_json(&l.vocab, &g);
        v["alpha"] = json!(alpha);
        emit(&mut *out, v)?;
    }
    out.flush().map_err(|e| VoltaError::Io(e.to_string()))
}

fn sweep(a: SweepArgs) -> Result<()> {
    let l = load(&a.model)?;
    let model = l.ck.model();
    let ev = Evaluator::new(&model, options(&a.model, &l.ck.config));
    let c = &model.config;
    let index = CodeIndex::from_combined(a.code_index, c.n_cg, c.n_ca)?;
    let grid = parse_grid(&a.grid)?;
    let ctxs = eval::contexts(&l.data);
    let ex = ctxs.get(a.context).ok_or(VoltaError::Index {
        what: "context",
        index: a.context,
        size: ctxs.len(),
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.model.seed);
    let z = ev.prior_point(&ex.context)?;
    let codes = ev.draw_codes(&mut rng)?;
    let mut out = output(a.out.as_deref())?;
    for (value, g) in ev.sweep_code(&ex.context, &z, &codes, index, &grid)? {
        let mut v = generation_json(&l.vocab, &g);
        v["code_index"] = json!(a.code_index);
        v["value"] = json!(value);
        emit(&mut *out, v)?;
    }
    out.flush().map_err(|e| VoltaError::Io(e.to_string()))
}

fn evaluate(a: EvalArgs) -> Result<()> {
    let l = load(&a.model)?;
    let model = l.ck.model();
    let ev = Evaluator::new(&model, options(&a.model, &l.ck.config));
    let mut rng = ChaCha8Rng::seed_from_u64(a.model.seed);
    let report = eval::evaluate(&ev, &l.data, a.samples, &mut rng)?;
    if let Some(p) = &a.out {
        std::fs::write(p, report.to_json() + "\n").map_err(|e| io_err(p, e))?;
    }
    print!("{}", report.to_table());
    Ok(())
}

const OP_TOLERANCE: f64 = 1e-4;
const MODEL_TOLERANCE: f64 = 1e-3;

fn grad_check(a: GradCheckArgs) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut worst: std::collections::BTreeMap<&str, f64> = Default::default();
    for _ in 0..a.trials.max(1) {
        for (name, err) in gradcheck::check_ops(&mut rng, 8, a.eps)? {
            let w = worst.entry(name).or_insert(0.0);
            *w = w.max(err);
        }
    }
    let mut failed = Vec::new();
    for (name, err) in &worst {
        let pass = *err < OP_TOLERANCE;
        println!(
            "{}",
            json!({"check": name, "max_rel_error": err, "tolerance": OP_TOLERANCE, "pass": pass})
        );
        if !pass {
            failed.push(name.to_string());
        }
    }
    let modes = match a.mode {
        Some(m) => vec![Mode::from(m)],
        None => vec![Mode::DecoderOnly, Mode::EncoderDecoder],
    };
    for mode in modes {
        let err = train::end_to_end_grad_check(mode, a.seed, a.eps)?;
        let pass = err < MODEL_TOLERANCE;
        let name = format!("full-loss/{mode}");
        println!(
            "{}",
            json!({"check": name, "max_rel_error": err, "tolerance": MODEL_TOLERANCE, "pass": pass})
        );
        if !pass {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(VoltaError::Verification(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

fn export_latents(a: ExportArgs) -> Result<()> {
    let l = load(&ModelArgs {
        checkpoint: a.checkpoint.clone(),
        seed: 0,
        split: a.split,
        constrained_span: false,
        deterministic: true,
        max_len: 1,
    })?;
    let model = l.ck.model();
    let n = model.config.n_zg;
    let mut w = csv::Writer::from_path(&a.out).map_err(|e| io_err(&a.out, e))?;
    let mut header = vec!["index".to_string(), "group".to_string()];
    header.extend((0..n).map(|i| format!("mu_{i}")));
    w.write_record(&header).map_err(|e| io_err(&a.out, e))?;
    for (i, ex) in l.data.examples.iter().enumerate() {
        let post = model.posterior(&ex.context, &train::posterior_target(l.ck.config.task, ex))?;
        let mut row = vec![i.to_string(), ex.group.to_string()];
        row.extend(post.gaussian.mu.iter().map(|m| format!("{m:e}")));
        w.write_record(&row).map_err(|e| io_err(&a.out, e))?;
    }
    w.flush().map_err(|e| io_err(&a.out, e))
}

fn make_data(a: MakeDataArgs) -> Result<()> {
    let mut spec: SyntheticSpec = match &a.config {
        Some(p) => read_json(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(t) = a.task {
        spec.task = t.into();
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let corpus = make_synthetic_corpus(&spec)?;
    std::fs::write(&a.out, corpus.render()?).map_err(|e| io_err(&a.out, e))?;
    println!("{}", json!({"records": corpus.records.len(), "out": a.out}));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Generate(a) => generate(a),
        Command::Interpolate(a) => interpolate(a),
        Command::SweepCode(a) => sweep(a),
        Command::Eval(a) => evaluate(a),
        Command::GradCheck(a) => grad_check(a),
        Command::ExportLatents(a) => export_latents(a),
        Command::MakeData(a) => make_data(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", json!({"error": "usage", "message": first}));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}
