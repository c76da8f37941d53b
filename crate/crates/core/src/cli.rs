//! Command-line entry point. Every invocation writes its effective config, a
//! log and its outputs into a fresh timestamped run directory.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use toml::{Table, Value};

use crate::config::{override_at, RunConfig};
use crate::datasets::{generate, Dataset, SplitDataset};
use crate::error::{KvecError, Result};
use crate::evalkit::{
    attention_csv, attention_split, curve_csv, evaluate, halting_baseline, halting_histogram, histogram_csv, metrics,
    metrics_csv, sweep, EvalResult, HaltMode,
};
use crate::experiment::run_trial;
use crate::gradsuite::gradient_suite;
use crate::model::KvecModel;
use crate::sequence::FieldValue;
use crate::streaming::StreamEngine;
use crate::training::{history_csv, TrainConfig};

/// Environment variable naming the directory that holds run directories.
pub const RUN_ROOT_VAR: &str = "KVEC_RUN_DIR";

#[derive(Parser, Debug)]
#[command(name = "kvec", version, about = "Early co-classification of tangled key-value sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Parent of the timestamped run directory (default: $KVEC_RUN_DIR or ./runs).
    #[arg(long)]
    run_root: Option<PathBuf>,
    /// Encoder size preset: desk, small or traffic.
    #[arg(long)]
    profile: Option<String>,
    /// Seeds both data generation and training.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with train/validation/test splits.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Number of classes.
        #[arg(long)]
        classes: Option<usize>,
        /// Number of flows (keys).
        #[arg(long)]
        flows: Option<usize>,
        /// Items per flow.
        #[arg(long)]
        len: Option<usize>,
        /// Items in the signal segment.
        #[arg(long)]
        signal_length: Option<usize>,
        /// Signal position: early or late.
        #[arg(long)]
        signal: Option<String>,
        /// Concurrent flows per tangled sequence.
        #[arg(long)]
        k: Option<usize>,
        /// Output directory (default: <run dir>/data).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model; keeps the epoch with the best validation score.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset root holding train/validation/test.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Adam step size of the main network.
        #[arg(long)]
        lr: Option<f64>,
        /// Weight of the policy loss.
        #[arg(long)]
        alpha: Option<f64>,
        /// Weight of the earliness loss.
        #[arg(long)]
        beta: Option<f64>,
        /// Initial halting-policy bias.
        #[arg(long)]
        policy_bias: Option<f64>,
        /// Leading epochs that train the classifier alone.
        #[arg(long)]
        warmup: Option<usize>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Halting rule: policy, fixed or confidence (the last two use the
        /// same-key-only mask).
        #[arg(long)]
        mode: Option<String>,
        /// Step of the fixed rule.
        #[arg(long)]
        tau: Option<usize>,
        /// Threshold of the confidence rule.
        #[arg(long)]
        mu: Option<f64>,
        /// train, validation or test.
        #[arg(long)]
        split: Option<String>,
    },
    /// Train or evaluate once per grid value and seed; writes curve.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint used by tau and mu sweeps.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// beta, alpha, tau, mu or concurrency.
        #[arg(long)]
        param: Option<String>,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Attention split and halting-position histogram of a checkpoint.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long)]
        split: Option<String>,
    },
    /// Streaming inference over item records (one JSON object per line with
    /// `key` and `v`); prints one JSON line per decision.
    Stream {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Record file, or `-` for standard input.
        #[arg(long, default_value = "-")]
        input: PathBuf,
        /// Cache projected keys and values (true or false).
        #[arg(long)]
        cache_kv: Option<bool>,
    },
    /// Finite-difference check of every gradient path.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

/// Run directory with its log.
struct Run {
    dir: PathBuf,
    log: fs::File,
}

impl Run {
    fn create(root: &Path, command: &str) -> Result<Self> {
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        let mut dir = root.join(format!("{stamp}-{command}"));
        let mut n = 1;
        while dir.exists() {
            n += 1;
            dir = root.join(format!("{stamp}-{command}-{n}"));
        }
        fs::create_dir_all(&dir)?;
        let log = fs::File::create(dir.join("log.txt"))?;
        Ok(Run { dir, log })
    }

    fn log(&mut self, message: &str) {
        let line = format!("[{}] {message}", chrono::Local::now().format("%H:%M:%S"));
        eprintln!("{line}");
        let _ = writeln!(self.log, "{line}");
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        fs::write(self.dir.join(name), contents)?;
        Ok(())
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        self.write(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }
}

fn set(overrides: &mut Vec<Table>, path: &str, value: Option<impl Into<Value>>) {
    if let Some(v) = value {
        overrides.push(override_at(path, v.into()));
    }
}

fn common_overrides(common: &Common) -> Vec<Table> {
    let mut o = Vec::new();
    set(&mut o, "profile", common.profile.clone());
    set(&mut o, "seed", common.seed.map(|s| s as i64));
    o
}

fn path_value(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn required<'a>(value: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
    value
        .as_ref()
        .ok_or_else(|| KvecError::Config(format!("{what} is required (flag or [paths] entry)")))
}

fn split_of<'a>(data: &'a SplitDataset, name: &str) -> Result<&'a Dataset> {
    match name {
        "train" => Ok(&data.train),
        "validation" => Ok(&data.validation),
        "test" => Ok(&data.test),
        other => Err(KvecError::Config(format!("unknown split `{other}`"))),
    }
}

fn check_compatible(model: &KvecModel, data: &Dataset) -> Result<()> {
    if model.schema != data.manifest.schema || model.classes != data.classes() {
        return Err(KvecError::Dataset("checkpoint schema or class count differs from the dataset".into()));
    }
    Ok(())
}

/// Parses `argv` and runs the command. Returns the process exit status.
pub fn run(argv: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            let kind = e.kind();
            eprintln!("{}", serde_json::json!({ "error": kind, "message": e.to_string() }));
            match kind {
                "usage" => 1,
                "numerical" => 3,
                _ => 2,
            }
        }
    }
}

fn execute(command: Command) -> Result<i32> {
    let (name, common, mut overrides) = match &command {
        Command::Generate {
            common,
            classes,
            flows,
            len,
            signal_length,
            signal,
            k,
            ..
        } => {
            let mut o = common_overrides(common);
            set(&mut o, "generate.classes", classes.map(|v| v as i64));
            set(&mut o, "generate.flows", flows.map(|v| v as i64));
            set(&mut o, "generate.flow_length", len.map(|v| v as i64));
            set(&mut o, "generate.signal_length", signal_length.map(|v| v as i64));
            set(&mut o, "generate.signal", signal.clone());
            set(&mut o, "generate.concurrency", k.map(|v| v as i64));
            ("generate", common, o)
        }
        Command::Train {
            common,
            data,
            epochs,
            lr,
            alpha,
            beta,
            policy_bias,
            warmup,
        } => {
            let mut o = common_overrides(common);
            set(&mut o, "paths.data", path_value(data));
            set(&mut o, "train.epochs", epochs.map(|v| v as i64));
            set(&mut o, "train.learning_rate", *lr);
            set(&mut o, "train.alpha", *alpha);
            set(&mut o, "train.beta", *beta);
            set(&mut o, "model.policy_bias_init", *policy_bias);
            set(&mut o, "train.warmup_epochs", warmup.map(|v| v as i64));
            ("train", common, o)
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            mode,
            tau,
            mu,
            split,
        } => {
            let mut o = common_overrides(common);
            set(&mut o, "paths.data", path_value(data));
            set(&mut o, "paths.checkpoint", path_value(checkpoint));
            set(&mut o, "eval.mode", mode.clone());
            set(&mut o, "eval.tau", tau.map(|v| v as i64));
            set(&mut o, "eval.mu", *mu);
            set(&mut o, "eval.split", split.clone());
            ("eval", common, o)
        }
        Command::Sweep {
            common,
            data,
            checkpoint,
            param,
            grid,
            seeds,
        } => {
            let mut o = common_overrides(common);
            set(&mut o, "paths.data", path_value(data));
            set(&mut o, "paths.checkpoint", path_value(checkpoint));
            set(&mut o, "sweep.parameter", param.clone());
            set(&mut o, "sweep.grid", grid.clone());
            set(
                &mut o,
                "sweep.seeds",
                seeds.as_ref().map(|s| s.iter().map(|&x| x as i64).collect::<Vec<_>>()),
            );
            ("sweep", common, o)
        }
        Command::Analyze {
            common,
            data,
            checkpoint,
            bins,
            split,
        } => {
            let mut o = common_overrides(common);
            set(&mut o, "paths.data", path_value(data));
            set(&mut o, "paths.checkpoint", path_value(checkpoint));
            set(&mut o, "eval.bins", bins.map(|v| v as i64));
            set(&mut o, "eval.split", split.clone());
            ("analyze", common, o)
        }
        Command::Stream {
            common,
            checkpoint,
            cache_kv,
            ..
        } => {
            let mut o = common_overrides(common);
            set(&mut o, "paths.checkpoint", path_value(checkpoint));
            set(&mut o, "stream.cache_kv", *cache_kv);
            ("stream", common, o)
        }
        Command::Gradcheck { common } => ("gradcheck", common, common_overrides(common)),
    };
    let cfg = RunConfig::resolve(common.config.as_deref(), std::mem::take(&mut overrides))?;
    let root = common
        .run_root
        .clone()
        .or_else(|| std::env::var_os(RUN_ROOT_VAR).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let mut run = Run::create(&root, name)?;
    run.write("config.toml", &cfg.to_toml()?)?;
    run.log(&format!("run directory {}", run.dir.display()));
    match command {
        Command::Generate { out, .. } => cmd_generate(&mut run, &cfg, out),
        Command::Train { .. } => cmd_train(&mut run, &cfg),
        Command::Eval { .. } => cmd_eval(&mut run, &cfg),
        Command::Sweep { .. } => cmd_sweep(&mut run, &cfg),
        Command::Analyze { .. } => cmd_analyze(&mut run, &cfg),
        Command::Stream { input, .. } => cmd_stream(&mut run, &cfg, &input),
        Command::Gradcheck { .. } => cmd_gradcheck(&mut run, &cfg),
    }
}

fn cmd_generate(run: &mut Run, cfg: &RunConfig, out: Option<PathBuf>) -> Result<i32> {
    let data = generate(&cfg.generate)?;
    let dir = out.unwrap_or_else(|| run.dir.join("data"));
    data.save(&dir)?;
    for d in data.splits() {
        let c = d.manifest.counts;
        run.log(&format!(
            "{}: {} sequences, {} keys, {} items, mean session length {:.3}",
            d.manifest.split, c.sequences, c.keys, c.items, d.manifest.avg_session_length
        ));
    }
    run.log(&format!("dataset written to {}", dir.display()));
    println!("{}", dir.display());
    Ok(0)
}

fn load_data(cfg: &RunConfig) -> Result<SplitDataset> {
    SplitDataset::load(required(&cfg.paths.data, "--data")?)
}

fn load_model(cfg: &RunConfig) -> Result<KvecModel> {
    KvecModel::load(required(&cfg.paths.checkpoint, "--checkpoint")?)
}

fn cmd_train(run: &mut Run, cfg: &RunConfig) -> Result<i32> {
    let data = load_data(cfg)?;
    run.log(&format!(
        "training on {} sequences for {} epochs (alpha {}, beta {})",
        data.train.sequences.len(),
        cfg.train.epochs,
        cfg.train.alpha,
        cfg.train.beta
    ));
    let trial = run_trial(&data, &cfg.model, &cfg.train)?;
    for r in &trial.history {
        run.log(&format!(
            "epoch {} loss {:.4} (l1 {:.4} l2 {:.4} l3 {:.4}) accuracy {:.4} earliness {:.4}",
            r.epoch, r.total, r.l1, r.l2, r.l3, r.accuracy, r.earliness
        ));
    }
    trial.model.save(&run.dir.join("model.ckpt"))?;
    run.write("history.csv", &history_csv(&trial.history))?;
    run.write(
        "metrics.csv",
        &metrics_csv(&[
            ("validation".to_string(), trial.validation),
            ("test".to_string(), trial.test),
        ]),
    )?;
    run.write_json("summary.json", &trial.summary(&cfg.model, &cfg.train))?;
    run.log(&format!(
        "kept epoch {}: test accuracy {:.4} earliness {:.4} hm {:.4}",
        trial.best_epoch, trial.test.accuracy, trial.test.earliness, trial.test.hm
    ));
    Ok(0)
}

fn score(model: &KvecModel, data: &Dataset, mode: HaltMode) -> Result<(EvalResult, Vec<crate::evalkit::KeyOutcome>)> {
    let outcomes = match mode {
        HaltMode::Policy => evaluate(model, &data.sequences, mode)?,
        _ => halting_baseline(mode, model, &data.sequences)?,
    };
    Ok((metrics(&outcomes, model.classes)?, outcomes))
}

fn outcomes_jsonl(outcomes: &[crate::evalkit::KeyOutcome]) -> Result<String> {
    let mut out = String::new();
    for o in outcomes {
        out.push_str(&serde_json::to_string(o)?);
        out.push('\n');
    }
    Ok(out)
}

fn cmd_eval(run: &mut Run, cfg: &RunConfig) -> Result<i32> {
    let data = load_data(cfg)?;
    let model = load_model(cfg)?;
    let split = split_of(&data, &cfg.eval.split)?;
    check_compatible(&model, split)?;
    let mode = cfg.eval.halt_mode();
    let (result, outcomes) = score(&model, split, mode)?;
    run.write("metrics.csv", &metrics_csv(&[(format!("{mode:?}"), result)]))?;
    run.write("outcomes.jsonl", &outcomes_jsonl(&outcomes)?)?;
    run.log(&format!(
        "{} keys: accuracy {:.4} earliness {:.4} f1 {:.4} hm {:.4}",
        result.count, result.accuracy, result.earliness, result.f1, result.hm
    ));
    Ok(0)
}

fn cmd_sweep(run: &mut Run, cfg: &RunConfig) -> Result<i32> {
    let s = &cfg.sweep;
    let report = match s.parameter.as_str() {
        "beta" | "alpha" => {
            let data = load_data(cfg)?;
            sweep(&s.parameter, &s.grid, &s.seeds, |value, seed| {
                let mut train = TrainConfig {
                    seed,
                    ..cfg.train.clone()
                };
                if s.parameter == "beta" {
                    train.beta = value;
                } else {
                    train.alpha = value;
                }
                let trial = run_trial(&data, &cfg.model, &train)?;
                Ok(trial.test)
            })?
        }
        "concurrency" => sweep(&s.parameter, &s.grid, &s.seeds, |value, seed| {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(KvecError::Config(format!("concurrency {value} is not a positive integer")));
            }
            let gen = crate::datasets::GeneratorConfig {
                concurrency: value as usize,
                ..cfg.generate.clone()
            };
            let data = generate(&gen)?;
            let train = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            Ok(run_trial(&data, &cfg.model, &train)?.test)
        })?,
        "tau" | "mu" => {
            let data = load_data(cfg)?;
            let model = load_model(cfg)?;
            let split = split_of(&data, &cfg.eval.split)?;
            check_compatible(&model, split)?;
            sweep(&s.parameter, &s.grid, &s.seeds, |value, _| {
                let mode = if s.parameter == "tau" {
                    if value < 1.0 || value.fract() != 0.0 {
                        return Err(KvecError::Config(format!("tau {value} is not a positive integer")));
                    }
                    HaltMode::Fixed(value as usize)
                } else {
                    HaltMode::Confidence(value)
                };
                Ok(score(&model, split, mode)?.0)
            })?
        }
        other => {
            return Err(KvecError::Config(format!(
                "cannot sweep `{other}` (expected beta, alpha, tau, mu or concurrency)"
            )))
        }
    };
    run.write("curve.csv", &curve_csv(&report.points))?;
    if !report.failures.is_empty() {
        run.write_json("failures.json", &report.failures)?;
        for f in &report.failures {
            run.log(&format!("point {}={} seed {} failed: {}", s.parameter, f.value, f.seed, f.error));
        }
    }
    for p in &report.points {
        run.log(&format!(
            "{}={} seed {}: accuracy {:.4} earliness {:.4} hm {:.4}",
            p.parameter, p.value, p.seed, p.accuracy, p.earliness, p.hm
        ));
    }
    Ok(0)
}

fn cmd_analyze(run: &mut Run, cfg: &RunConfig) -> Result<i32> {
    let data = load_data(cfg)?;
    let model = load_model(cfg)?;
    let split = split_of(&data, &cfg.eval.split)?;
    check_compatible(&model, split)?;
    let att = attention_split(&model, &split.sequences, cfg.eval.bins)?;
    run.write("attention_split.csv", &attention_csv(&att))?;
    let (result, outcomes) = score(&model, split, cfg.eval.halt_mode())?;
    let hist = halting_histogram(&outcomes, cfg.eval.bins)?;
    run.write("halting_hist.csv", &histogram_csv(&hist))?;
    run.write("metrics.csv", &metrics_csv(&[("analyzed".to_string(), result)]))?;
    run.log(&format!(
        "max row error {:.2e}, median halting fraction {:.4}",
        att.max_row_error, hist.median
    ));
    Ok(0)
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct StreamRecord {
    #[serde(default)]
    t: Option<usize>,
    key: String,
    v: Vec<FieldValue>,
}

#[derive(Serialize)]
struct DecisionLine<'a> {
    key: &'a str,
    step: usize,
    action: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    p_halt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    confidence: Option<f64>,
}

fn cmd_stream(run: &mut Run, cfg: &RunConfig, input: &Path) -> Result<i32> {
    let model = load_model(cfg)?;
    let reader: Box<dyn BufRead> = if input == Path::new("-") {
        Box::new(BufReader::new(std::io::stdin()))
    } else {
        Box::new(BufReader::new(fs::File::open(input)?))
    };
    let name = input.display().to_string();
    let mut engine = StreamEngine::new(&model, cfg.stream.cache_kv);
    let mut stdout = std::io::stdout().lock();
    let mut copy = String::new();
    let mut emit = |line: DecisionLine| -> Result<()> {
        let text = serde_json::to_string(&line)?;
        writeln!(stdout, "{text}")?;
        copy.push_str(&text);
        copy.push('\n');
        Ok(())
    };
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = |message: String| KvecError::Record {
            path: name.clone(),
            line: n + 1,
            message,
        };
        let rec: StreamRecord = serde_json::from_str(&line).map_err(|e| record(e.to_string()))?;
        let expected = engine.context().len() + 1;
        if let Some(t) = rec.t {
            if t != expected {
                return Err(record(KvecError::ArrivalOrder { expected, got: t }.to_string()));
            }
        }
        let out = engine.stream_step(&rec.key, rec.v).map_err(|e| record(e.to_string()))?;
        if let Some(action) = out.action {
            emit(DecisionLine {
                key: &out.key,
                step: out.step,
                action: if action == crate::ectl::Action::Halt { "halt" } else { "wait" },
                p_halt: out.p_halt,
                label: out.label,
                confidence: out.confidence(),
            })?;
        }
    }
    let (decisions, stats) = engine.finish();
    for d in decisions.iter().filter(|d| d.forced) {
        emit(DecisionLine {
            key: &d.key,
            step: d.step,
            action: "halt",
            p_halt: None,
            label: Some(d.label),
            confidence: Some(d.distribution[d.label]),
        })?;
    }
    run.write("decisions.jsonl", &copy)?;
    run.write_json("stats.json", &stats)?;
    run.log(&format!(
        "{} items, {} skipped after halting, {} keys decided, {} multiply-accumulates",
        stats.items, stats.skipped, stats.halted, stats.macs
    ));
    Ok(0)
}

fn cmd_gradcheck(run: &mut Run, cfg: &RunConfig) -> Result<i32> {
    let seed = cfg.seed.unwrap_or(crate::gradsuite::DEFAULT_SEED);
    let sections = gradient_suite(seed)?;
    let mut csv = String::from("section,parameter,max_relative_error,max_absolute_error,passed\n");
    let mut all = true;
    println!("{:<28} {:<22} {:>12} {:>12}", "section", "parameter", "max rel", "max abs");
    for s in &sections {
        for p in &s.report.params {
            let ok = p.max_relative_error <= crate::gradsuite::TOLERANCE;
            all &= ok;
            println!(
                "{:<28} {:<22} {:>12.3e} {:>12.3e}{}",
                s.name,
                p.name,
                p.max_relative_error,
                p.max_absolute_error,
                if ok { "" } else { "  FAIL" }
            );
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                s.name, p.name, p.max_relative_error, p.max_absolute_error, ok
            ));
        }
    }
    run.write("gradcheck.csv", &csv)?;
    if all {
        run.log("every gradient matches its finite difference");
        Ok(0)
    } else {
        Err(KvecError::GradientMismatch(
            "analytic and finite-difference gradients disagree".into(),
        ))
    }
}
