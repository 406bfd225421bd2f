use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dygkt::checkpoint::Checkpoint;
use dygkt::config::RunConfig;
use dygkt::graph::{
    ingest_csv, interval_stats, plan_split, read_snapshot, repeat_stats, write_snapshot, ColumnNames, DynamicGraph,
    GraphCounts, IntervalHistogram, RepeatStats, DEFAULT_BUCKET_EDGES,
};
use dygkt::model::ModelSignature;
use dygkt::synth::{generate, write_csv, Pattern, SynthConfig};
use dygkt::towers::QuestionMode;
use dygkt::train::{evaluate, mastery_trace, train, EvalMode, EvalReport, StopReason, LOG_HEADER};
use dygkt::Model;

pub const OUT_DIR_ENV: &str = "DYGKT_OUT_DIR";

/// A mistake in how the tool was invoked.
#[derive(Debug)]
pub struct UserError(pub String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

fn user(msg: impl Into<String>) -> anyhow::Error {
    UserError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "dygkt", version, about = "Knowledge tracing on continuous-time dynamic graphs", args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Filter a CSV answer log and write a graph snapshot.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 5)]
        min_count: usize,
        /// Header names: student,question,timestamp,correct,concept.
        #[arg(long)]
        columns: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Interval histogram and repeat statistics of a snapshot (JSON).
    Stats {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Distinct (student, question) pairs sampled for repeat statistics.
        #[arg(long, default_value_t = 10_000)]
        sample: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a snapshot, then evaluate on the test range.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// trans | ind
        #[arg(long, default_value = "trans")]
        mode: String,
        /// Run config whose model section the checkpoint must match.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Split ratios as train,val,test.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per value of a parameter.
    Sweep {
        /// neighbor_len | time_threshold | dim
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Generate a synthetic answer log with a planted pattern.
    Synth {
        #[arg(long, default_value_t = 20)]
        students: usize,
        #[arg(long, default_value_t = 30)]
        questions: usize,
        #[arg(long, default_value_t = 5)]
        concepts: usize,
        #[arg(long, default_value_t = 2000)]
        events: usize,
        /// concept-skill | forgetting | repeat-guess
        #[arg(long)]
        pattern: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predicted mastery of one question after each of a student's steps.
    Trace {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Student label as it appeared in the ingested CSV.
        #[arg(long)]
        student: String,
        #[arg(long)]
        question: String,
        #[arg(long, default_value_t = 15)]
        steps: usize,
        /// Only steps strictly before this timestamp; default: end of log.
        #[arg(long)]
        upto: Option<i64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (default: $DYGKT_OUT_DIR, else `runs`).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub micro_batch: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub neighbor_len: Option<usize>,
    #[arg(long)]
    pub time_threshold: Option<i64>,
    /// Sets dim_edge, dim_node and dim_time together.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub split: Option<String>,
    /// no-multiset | no-dual-time | no-time | no-concept-output |
    /// question-id-embed | concept-id-embed | share-output (repeatable).
    #[arg(long)]
    pub ablate: Vec<String>,
}

fn parse_split(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| user(format!("split `{s}` is not three numbers")))?;
    parts
        .try_into()
        .map_err(|_| user(format!("split `{s}` must have exactly three parts")))
}

fn apply_ablation(cfg: &mut RunConfig, name: &str) -> Result<()> {
    let t = &mut cfg.model.tower;
    match name {
        "no-multiset" => t.use_multiset = false,
        "no-dual-time" => t.use_dual_time = false,
        "no-time" => t.use_time = false,
        "no-concept-output" => t.use_concept_in_question_output = false,
        "question-id-embed" => t.question_mode = QuestionMode::QuestionIdEmbed,
        "concept-id-embed" => t.question_mode = QuestionMode::ConceptIdEmbed,
        "share-output" => t.share_output_projection = true,
        other => return Err(user(format!("unknown ablation `{other}`"))),
    }
    Ok(())
}

/// Defaults, then the config file, then flags.
pub fn effective_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))?,
        None => RunConfig::default(),
    };
    if cfg.output_dir == RunConfig::default().output_dir {
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
            cfg.output_dir = dir.into();
        }
    }
    if let Some(v) = &args.out_dir {
        cfg.output_dir = v.clone();
    }
    if let Some(v) = &args.graph {
        cfg.data.graph = Some(v.clone());
    }
    let tr = &mut cfg.train;
    if let Some(v) = args.lr {
        tr.lr = v;
    }
    if let Some(v) = args.epochs {
        tr.epochs = v;
    }
    if let Some(v) = args.batch_size {
        tr.batch_size = v;
    }
    if let Some(v) = args.micro_batch {
        tr.micro_batch = v;
    }
    if let Some(v) = args.patience {
        tr.patience = v;
    }
    if let Some(v) = args.seed {
        tr.seed = v;
    }
    if let Some(v) = args.weight_decay {
        tr.weight_decay = v;
    }
    let m = &mut cfg.model;
    if let Some(v) = args.dropout {
        m.dropout = v;
    }
    if let Some(v) = args.neighbor_len {
        m.neighbor_len = v;
    }
    if let Some(v) = args.time_threshold {
        m.time_threshold = v;
    }
    if let Some(d) = args.dim {
        m.tower.dim_edge = d;
        m.tower.dim_node = d;
        m.tower.dim_time = d;
    }
    if let Some(s) = &args.split {
        cfg.data.split = parse_split(s)?;
    }
    for a in &args.ablate {
        apply_ablation(&mut cfg, a)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_graph(path: &Path) -> Result<DynamicGraph> {
    let f = File::open(path).with_context(|| format!("opening graph {}", path.display()))?;
    read_snapshot(BufReader::new(f)).with_context(|| format!("reading graph {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = File::open(path).with_context(|| format!("opening checkpoint {}", path.display()))?;
    Checkpoint::read(BufReader::new(f)).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("document serializes") + "\n"
}

fn print_counts(c: &GraphCounts) {
    println!("{:<14}{:>10}", "students", c.students);
    println!("{:<14}{:>10}", "questions", c.questions);
    println!("{:<14}{:>10}", "concepts", c.concepts);
    println!("{:<14}{:>10}", "interactions", c.interactions);
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest {
            input,
            min_count,
            columns,
            out,
        } => cmd_ingest(&input, min_count, columns.as_deref(), &out),
        Command::Stats { graph, out, sample, seed } => cmd_stats(&graph, out.as_deref(), sample, seed),
        Command::Train(args) => cmd_train(&args).map(|_| ()),
        Command::Eval {
            graph,
            checkpoint,
            mode,
            config,
            split,
            out,
        } => cmd_eval(&graph, &checkpoint, &mode, config.as_deref(), split.as_deref(), out.as_deref()),
        Command::Sweep { param, values, train } => cmd_sweep(&param, &values, &train),
        Command::Synth {
            students,
            questions,
            concepts,
            events,
            pattern,
            seed,
            out,
        } => {
            let cfg = SynthConfig {
                students,
                questions,
                concepts,
                events,
                pattern: pattern.parse::<Pattern>()?,
                seed,
            };
            cmd_synth(&cfg, &out)
        }
        Command::Trace {
            graph,
            checkpoint,
            student,
            question,
            steps,
            upto,
            out,
        } => cmd_trace(&graph, &checkpoint, &student, &question, steps, upto, out.as_deref()),
    }
}

fn cmd_ingest(input: &Path, min_count: usize, columns: Option<&str>, out: &Path) -> Result<()> {
    let cols = match columns {
        Some(c) => ColumnNames::parse(c)?,
        None => ColumnNames::default(),
    };
    let f = File::open(input).with_context(|| format!("opening {}", input.display()))?;
    let g = ingest_csv(BufReader::new(f), &cols, min_count).with_context(|| format!("ingesting {}", input.display()))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?);
    write_snapshot(&g, &mut w)?;
    w.flush()?;
    print_counts(&g.counts());
    Ok(())
}

#[derive(Serialize)]
struct StatsDoc {
    counts: GraphCounts,
    interval_buckets: Vec<&'static str>,
    intervals: IntervalHistogram,
    repeats: RepeatStats,
}

fn cmd_stats(graph: &Path, out: Option<&Path>, sample: usize, seed: u64) -> Result<()> {
    let g = load_graph(graph)?;
    let doc = StatsDoc {
        counts: g.counts(),
        interval_buckets: vec!["<1min", "<1h", "<1day", "<1week", ">=1week"],
        intervals: interval_stats(&g, &DEFAULT_BUCKET_EDGES),
        repeats: repeat_stats(&g, sample, seed),
    };
    let text = json(&doc);
    match out {
        Some(p) => write_text(p, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    parameters: usize,
    parameter_tensors: usize,
    epochs_run: usize,
    best_epoch: Option<usize>,
    best_val_auc: Option<f64>,
    stop: StopReason,
    train_seconds: f64,
    transductive: EvalReport,
    inductive: EvalReport,
}

struct TrainResult {
    transductive: EvalReport,
    inductive: EvalReport,
}

const CONFIG_BEGIN: &str = "--- effective config ---";
const CONFIG_END: &str = "--- end config ---";

fn train_with(cfg: &RunConfig, out_dir: &Path) -> Result<TrainResult> {
    let graph_path = cfg
        .data
        .graph
        .as_ref()
        .ok_or_else(|| user("no graph given (--graph or data.graph)"))?;
    let g = load_graph(graph_path)?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let echo = cfg.to_toml();
    write_text(&out_dir.join("config.toml"), &echo)?;
    println!("{CONFIG_BEGIN}\n{}{CONFIG_END}", echo);

    let split = plan_split(&g, cfg.data.split)?;
    let mut model = Model::new(cfg.model.clone(), g.num_questions(), g.num_concepts(), cfg.train.seed)?;
    let mut log = BufWriter::new(File::create(out_dir.join("train_log.csv"))?);
    writeln!(log, "{LOG_HEADER}")?;
    let started = Instant::now();
    let mut log_err = None;
    let outcome = train(&mut model, &g, &split, &cfg.train, |r| {
        let line = r.to_line();
        println!("{line}");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    let mut ck = BufWriter::new(File::create(out_dir.join("checkpoint.bin"))?);
    Checkpoint::from_model(&model).write(&mut ck)?;
    ck.flush()?;

    let transductive = evaluate(&model, &g, &split, EvalMode::Transductive)?;
    let inductive = evaluate(&model, &g, &split, EvalMode::Inductive)?;
    write_text(&out_dir.join("eval_transductive.txt"), &transductive.to_kv())?;
    write_text(&out_dir.join("eval_inductive.txt"), &inductive.to_kv())?;
    let summary = TrainSummary {
        parameters: model.store.num_scalars(),
        parameter_tensors: model.store.len(),
        epochs_run: outcome.log.len(),
        best_epoch: outcome.best_epoch,
        best_val_auc: outcome.best_val_auc,
        stop: outcome.stop,
        train_seconds: started.elapsed().as_secs_f64(),
        transductive: transductive.clone(),
        inductive: inductive.clone(),
    };
    write_text(&out_dir.join("summary.json"), &json(&summary))?;
    print!("{}", transductive.to_kv());
    print!("{}", inductive.to_kv());
    println!(
        "parameters={} epochs={} train_seconds={:.1}",
        summary.parameters, summary.epochs_run, summary.train_seconds
    );
    if outcome.stop == StopReason::Diverged {
        bail!(dygkt::Error::NonFinite(format!(
            "training diverged after {} epoch(s); best weights so far saved to {}",
            outcome.log.len(),
            out_dir.join("checkpoint.bin").display()
        )));
    }
    Ok(TrainResult { transductive, inductive })
}

fn cmd_train(args: &TrainArgs) -> Result<TrainResult> {
    let cfg = effective_config(args)?;
    let out = cfg.output_dir.clone();
    train_with(&cfg, &out)
}

fn cmd_eval(
    graph: &Path,
    checkpoint: &Path,
    mode: &str,
    config: Option<&Path>,
    split: Option<&str>,
    out: Option<&Path>,
) -> Result<()> {
    let mode: EvalMode = mode.parse()?;
    let g = load_graph(graph)?;
    let ck = load_checkpoint(checkpoint)?;
    let (model_cfg, ratios) = match config {
        Some(p) => {
            let c = RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?;
            (c.model, c.data.split)
        }
        None => (ck.signature.config.clone(), RunConfig::default().data.split),
    };
    let ratios = match split {
        Some(s) => parse_split(s)?,
        None => ratios,
    };
    let expected = ModelSignature {
        scalar: ck.signature.scalar.clone(),
        num_questions: g.num_questions(),
        num_concepts: g.num_concepts(),
        config: model_cfg,
    };
    let model: Model = ck.into_model(Some(&expected))?;
    let split = plan_split(&g, ratios)?;
    let report = evaluate(&model, &g, &split, mode)?;
    let text = report.to_kv();
    print!("{text}");
    if let Some(p) = out {
        write_text(p, &text)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepCell {
    value: String,
    ap: Option<f64>,
    auc: Option<f64>,
    inductive_ap: Option<f64>,
    inductive_auc: Option<f64>,
    error: Option<String>,
}

#[derive(Serialize)]
struct SweepDoc {
    param: String,
    values: Vec<String>,
    cells: Vec<SweepCell>,
}

fn cmd_sweep(param: &str, values: &[String], args: &TrainArgs) -> Result<()> {
    let base = effective_config(args)?;
    if !["neighbor_len", "time_threshold", "dim"].contains(&param) {
        return Err(user(format!("`{param}` is not sweepable (neighbor_len, time_threshold, dim)")));
    }
    let mut cells = Vec::new();
    for v in values {
        let cell = (|| -> Result<TrainResult> {
            let mut cfg = base.clone();
            match param {
                "neighbor_len" => cfg.model.neighbor_len = v.parse().map_err(|_| user(format!("bad value `{v}`")))?,
                "time_threshold" => cfg.model.time_threshold = v.parse().map_err(|_| user(format!("bad value `{v}`")))?,
                _ => {
                    let d: usize = v.parse().map_err(|_| user(format!("bad value `{v}`")))?;
                    cfg.model.tower.dim_edge = d;
                    cfg.model.tower.dim_node = d;
                    cfg.model.tower.dim_time = d;
                }
            }
            cfg.validate()?;
            let dir = base.output_dir.join(format!("{param}={v}"));
            cfg.output_dir = dir.clone();
            train_with(&cfg, &dir)
        })();
        cells.push(match cell {
            Ok(r) => SweepCell {
                value: v.clone(),
                ap: r.transductive.ap,
                auc: r.transductive.auc,
                inductive_ap: r.inductive.ap,
                inductive_auc: r.inductive.auc,
                error: None,
            },
            Err(e) => {
                eprintln!("sweep cell {param}={v} failed: {e:#}");
                SweepCell {
                    value: v.clone(),
                    ap: None,
                    auc: None,
                    inductive_ap: None,
                    inductive_auc: None,
                    error: Some(format!("{e:#}")),
                }
            }
        });
    }
    let doc = SweepDoc {
        param: param.to_string(),
        values: values.to_vec(),
        cells,
    };
    write_text(&base.output_dir.join("sweep.json"), &json(&doc))?;
    let opt = |x: Option<f64>| x.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    println!("{param},ap,auc,inductive_ap,inductive_auc");
    for c in &doc.cells {
        println!("{},{},{},{},{}", c.value, opt(c.ap), opt(c.auc), opt(c.inductive_ap), opt(c.inductive_auc));
    }
    Ok(())
}

fn cmd_synth(cfg: &SynthConfig, out: &Path) -> Result<()> {
    let data = generate(cfg)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?);
    write_csv(&data.rows, &mut w)?;
    w.flush()?;
    let sidecar = out.with_extension("json");
    write_text(&sidecar, &json(&data.sidecar))?;
    println!("wrote {} events to {} (parameters in {})", data.rows.len(), out.display(), sidecar.display());
    Ok(())
}

fn cmd_trace(
    graph: &Path,
    checkpoint: &Path,
    student: &str,
    question: &str,
    steps: usize,
    upto: Option<i64>,
    out: Option<&Path>,
) -> Result<()> {
    let g = load_graph(graph)?;
    let ck = load_checkpoint(checkpoint)?;
    let expected = ModelSignature {
        num_questions: g.num_questions(),
        num_concepts: g.num_concepts(),
        ..ck.signature.clone()
    };
    let model: Model = ck.into_model(Some(&expected))?;
    let s = g
        .student_by_label(student)
        .ok_or_else(|| user(format!("unknown student `{student}`")))?;
    let q = g
        .question_by_label(question)
        .ok_or_else(|| user(format!("unknown question `{question}`")))?;
    let upto = upto.unwrap_or_else(|| g.events().last().map_or(0, |e| e.timestamp + 1));
    let trace = mastery_trace(&model, &g, s, q, upto, steps)?;
    if trace.truncated {
        eprintln!(
            "note: only {} step(s) available before {upto}, fewer than the {steps} requested",
            trace.steps.len()
        );
    }
    let labels = g.labels();
    let mut doc = serde_json::to_value(&trace)?;
    doc["student_label"] = student.into();
    doc["question_label"] = question.into();
    if let Some(steps) = doc["steps"].as_array_mut() {
        for (step, t) in steps.iter_mut().zip(&trace.steps) {
            step["attempted_question_label"] = labels.questions[t.attempted_question].as_str().into();
        }
    }
    let text = json(&doc);
    match out {
        Some(p) => write_text(p, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}
