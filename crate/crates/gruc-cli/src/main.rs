//! `gruc`: command-line surface for the cross-modal reasoning pipeline.
//!
//! Every subcommand is a pure function of its flags, its input files, and one
//! seed: rerunning with the same arguments reproduces byte-identical data
//! outputs. Results go to stdout as JSON; `--out DIR` additionally persists
//! artifacts plus a run manifest describing how to replay the run.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or domain error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use gruc::checkpoint::Checkpoint;
use gruc::config::Config;
use gruc::embeddings::EmbeddingTable;
use gruc::error::{Error, Result};
use gruc::graphs::{load_dataset, load_instance, save_dataset, InstanceBundle};
use gruc::harness::eval::{evaluate, rank_instance};
use gruc::harness::sweep::{sweep, SweepAxis};
use gruc::harness::synthetic::{build_table, generate_corpus, Difficulty, SyntheticSpec};
use gruc::harness::train::{train, TrainOptions};
use gruc::manifest::RunManifest;
use gruc::model::{ForwardOptions, Pipeline, RelationFilter};
use gruc::numerics::{grad_check, GradCheckConfig, Tape};
use gruc::retrieval::{context_words, retain_top, score_facts};
use gruc::rng::substream;

#[derive(Parser)]
#[command(
    name = "gruc",
    version,
    about = "Cross-modal graph reasoning for knowledge-based VQA"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a JSONL dataset and write checkpoints.
    Train(TrainArgs),
    /// Score a checkpoint on one or more test splits.
    Eval(EvalArgs),
    /// Answer a single instance with a trained checkpoint.
    Infer(InferArgs),
    /// Score and rank an instance's candidate facts without a model.
    Retrieve(RetrieveArgs),
    /// Generate a synthetic corpus with planted ground truth.
    SynthGen(SynthGenArgs),
    /// Train/evaluate across reasoning steps or caption counts.
    Sweep(SweepArgs),
    /// Dump attention weights and gate ratios for one instance.
    Inspect(InspectArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

/// Flags shared by every subcommand.
#[derive(Args)]
struct Common {
    /// JSON configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed for all randomness; overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for per-instance work.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Directory for artifacts and the run manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training instances, one JSON object per line.
    #[arg(long)]
    data: PathBuf,
    /// Word-embedding table (token followed by values, one row per line).
    #[arg(long)]
    embeddings: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Test split JSONL; repeat for several splits (named by file stem).
    #[arg(long = "split", required = true)]
    splits: Vec<PathBuf>,
    /// Word-embedding table.
    #[arg(long)]
    embeddings: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct InferArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Single instance JSON file.
    #[arg(long)]
    instance: PathBuf,
    /// Word-embedding table.
    #[arg(long)]
    embeddings: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct RetrieveArgs {
    /// Single instance JSON file.
    #[arg(long)]
    instance: PathBuf,
    /// Word-embedding table.
    #[arg(long)]
    embeddings: PathBuf,
    /// Keep this many best-scoring facts (default: config's retrieval_top_n).
    #[arg(long)]
    top: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SynthGenArgs {
    /// Corpus difficulty: visual, semantic, both, or fact-only.
    #[arg(long, default_value = "both")]
    difficulty: String,
    /// Number of instances.
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SweepArgs {
    /// Axis to vary: `steps` (reasoning steps 1..=5) or `captions` (5/10/20).
    #[arg(long)]
    axis: String,
    /// Training instances.
    #[arg(long)]
    data: PathBuf,
    /// Test split JSONL; repeatable.
    #[arg(long = "split", required = true)]
    splits: Vec<PathBuf>,
    /// Word-embedding table.
    #[arg(long)]
    embeddings: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct InspectArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Single instance JSON file.
    #[arg(long)]
    instance: PathBuf,
    /// Word-embedding table.
    #[arg(long)]
    embeddings: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Instance to differentiate through; a tiny synthetic one when omitted.
    #[arg(long)]
    instance: Option<PathBuf>,
    /// Word-embedding table; required with --instance.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Maximum accepted relative error per coordinate.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Coordinates sampled per parameter tensor.
    #[arg(long, default_value_t = 8)]
    coords: usize,
    #[command(flatten)]
    common: Common,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; everything else is a
            // usage error.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(report) => {
            println!("{}", pretty(&report));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!(
                "{}",
                pretty(&json!({ "error": error_code(&e), "detail": e.to_string() }))
            );
            ExitCode::from(2)
        }
    }
}

fn pretty(value: &Value) -> String {
    serde_json::to_string_pretty(value).unwrap_or_else(|_| value.to_string())
}

/// Stable machine-readable code per error family.
fn error_code(e: &Error) -> &'static str {
    match e {
        Error::Dimension { .. } => "dimension",
        Error::Domain { .. } => "domain",
        Error::NonFinite(_) => "non-finite",
        Error::NoCandidates { .. } => "no-candidates",
        Error::Parse { .. } => "parse",
        Error::Schema { .. } => "schema",
        Error::Data(_) => "data",
        Error::Checkpoint(_) => "checkpoint",
        Error::Io { .. } => "io",
        Error::Json { .. } => "json",
    }
}

/// Resolves an input path against `GRUC_DATA_DIR` when it does not exist as
/// given. Absolute paths and existing relative paths win.
fn resolve(path: &Path) -> PathBuf {
    if path.is_absolute() || path.exists() {
        return path.to_path_buf();
    }
    if let Ok(root) = std::env::var("GRUC_DATA_DIR") {
        let joined = Path::new(&root).join(path);
        if joined.exists() {
            return joined;
        }
    }
    path.to_path_buf()
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Loads the config file (or defaults) and applies the seed override.
fn load_config(common: &Common) -> Result<Config> {
    let mut config = match &common.config {
        Some(path) => Config::from_json(&read_to_string(&resolve(path))?)?,
        None => Config::default(),
    };
    if let Some(seed) = common.seed {
        config.train.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn load_table(path: &Path, dim: usize) -> Result<EmbeddingTable> {
    EmbeddingTable::load(&resolve(path), Some(dim))
}

fn load_splits(paths: &[PathBuf]) -> Result<Vec<(String, Vec<InstanceBundle>)>> {
    paths
        .iter()
        .map(|path| {
            let resolved = resolve(path);
            let name = resolved
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| resolved.display().to_string());
            Ok((name, load_dataset(&resolved)?))
        })
        .collect()
}

fn ensure_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

/// Writes `manifest.json` describing the finished run.
fn write_manifest(
    dir: &Path,
    command: &str,
    config: Config,
    seed: u64,
    jobs: usize,
    inputs: &[&Path],
    outputs: &[&Path],
    started: Instant,
) -> Result<PathBuf> {
    let mut manifest = RunManifest::new(command, config, seed, jobs);
    for input in inputs {
        manifest.input(input);
    }
    for output in outputs {
        manifest.output(output);
    }
    manifest.wall_seconds = started.elapsed().as_secs_f64();
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

fn run(command: Command) -> Result<Value> {
    match command {
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Infer(args) => run_infer(args),
        Command::Retrieve(args) => run_retrieve(args),
        Command::SynthGen(args) => run_synth_gen(args),
        Command::Sweep(args) => run_sweep(args),
        Command::Inspect(args) => run_inspect(args),
        Command::Gradcheck(args) => run_gradcheck(args),
    }
}

fn run_train(args: TrainArgs) -> Result<Value> {
    let started = Instant::now();
    let config = load_config(&args.common)?;
    let data_path = resolve(&args.data);
    let emb_path = resolve(&args.embeddings);
    let dataset = load_dataset(&data_path)?;
    let table = load_table(&args.embeddings, config.dims.embed_dim)?;

    let options = TrainOptions {
        jobs: args.common.jobs,
        out_dir: args.common.out.clone(),
        resume: None,
    };
    if let Some(dir) = &args.common.out {
        ensure_out_dir(dir)?;
    }
    let outcome = train(&config, &dataset, &table, &options)?;

    let mut checkpoint_path = None;
    if let Some(dir) = &args.common.out {
        let model = dir.join("model.ckpt");
        outcome.checkpoint.save(&model)?;
        let curve = dir.join("loss_curve.json");
        let curve_json = json!({
            "loss_curve": outcome.loss_curve,
            "skipped": outcome.skipped,
            "steps": outcome.steps,
        });
        std::fs::write(&curve, pretty(&curve_json))
            .map_err(|e| Error::io(curve.display().to_string(), e))?;
        write_manifest(
            dir,
            "train",
            config.clone(),
            config.train.seed,
            args.common.jobs,
            &[&data_path, &emb_path],
            &[&model, &curve],
            started,
        )?;
        checkpoint_path = Some(model.display().to_string());
    }

    Ok(json!({
        "command": "train",
        "epochs": outcome.checkpoint.completed_epochs,
        "steps": outcome.steps,
        "skipped": outcome.skipped,
        "loss_curve": outcome.loss_curve,
        "final_loss": outcome.loss_curve.last(),
        "checkpoint": checkpoint_path,
    }))
}

fn run_eval(args: EvalArgs) -> Result<Value> {
    let started = Instant::now();
    let ckpt_path = resolve(&args.checkpoint);
    let checkpoint = Checkpoint::load(&ckpt_path)?;
    let table = load_table(&args.embeddings, checkpoint.config.dims.embed_dim)?;
    let splits = load_splits(&args.splits)?;

    let report = evaluate(&checkpoint, &splits, &table, args.common.jobs)?;
    let result = json!({
        "command": "eval",
        "top1": report.top1,
        "top3": report.top3,
        "splits": report.splits.iter().map(|s| json!({
            "name": s.name,
            "total": s.total,
            "skipped": s.skipped,
            "top1": s.top1,
            "top3": s.top3,
        })).collect::<Vec<_>>(),
    });

    if let Some(dir) = &args.common.out {
        ensure_out_dir(dir)?;
        let path = dir.join("eval_report.json");
        std::fs::write(&path, pretty(&result))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let inputs: Vec<&Path> = std::iter::once(ckpt_path.as_path())
            .chain(args.splits.iter().map(|p| p.as_path()))
            .collect();
        write_manifest(
            dir,
            "eval",
            checkpoint.config.clone(),
            checkpoint.train_seed,
            args.common.jobs,
            &inputs,
            &[&path],
            started,
        )?;
    }
    Ok(result)
}

fn run_infer(args: InferArgs) -> Result<Value> {
    let checkpoint = Checkpoint::load(&resolve(&args.checkpoint))?;
    let table = load_table(&args.embeddings, checkpoint.config.dims.embed_dim)?;
    let instance = load_instance(&resolve(&args.instance))?;
    let pipeline = Pipeline::new(checkpoint.config.clone(), checkpoint.vocab.clone())?;

    let ranked = rank_instance(&pipeline, &checkpoint, &table, &instance)?;
    Ok(json!({
        "command": "infer",
        "instance": instance.id,
        "answer": ranked.first().map(|(entity, _)| entity.clone()),
        "ranked": ranked,
    }))
}

fn run_retrieve(args: RetrieveArgs) -> Result<Value> {
    let config = load_config(&args.common)?;
    let instance = load_instance(&resolve(&args.instance))?;
    let table = load_table(&args.embeddings, config.dims.embed_dim)?;

    let context = context_words(&instance.question, &instance.detections);
    let scored = score_facts(
        &instance.facts,
        &context,
        &table,
        config.options.fact_score_mode,
    );
    let kept = retain_top(scored, args.top.unwrap_or(config.options.retrieval_top_n))?;
    Ok(json!({
        "command": "retrieve",
        "instance": instance.id,
        "context": context,
        "facts": kept.iter().map(|sf| json!({
            "subject": sf.fact.subject,
            "relation": sf.fact.relation,
            "object": sf.fact.object,
            "score": sf.score,
            "index": sf.index,
        })).collect::<Vec<_>>(),
    }))
}

fn run_synth_gen(args: SynthGenArgs) -> Result<Value> {
    let started = Instant::now();
    let difficulty = Difficulty::parse(&args.difficulty)?;
    let seed = args.common.seed.unwrap_or(0);
    let spec = SyntheticSpec {
        difficulty,
        ..SyntheticSpec::default()
    };

    let out = args
        .common
        .out
        .clone()
        .or_else(|| std::env::var("GRUC_DATA_DIR").ok().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    ensure_out_dir(&out)?;

    let corpus = generate_corpus(&spec, seed, args.n)?;
    let instances: Vec<InstanceBundle> = corpus.into_iter().map(|inst| inst.bundle).collect();
    let data_path = out.join("instances.jsonl");
    save_dataset(&data_path, &instances)?;

    let table = build_table(&spec, seed)?;
    let emb_path = out.join("embeddings.txt");
    EmbeddingTable::save(&emb_path, table.dim(), &table.sorted_entries())?;

    write_manifest(
        &out,
        "synth-gen",
        spec.config(),
        seed,
        args.common.jobs,
        &[],
        &[&data_path, &emb_path],
        started,
    )?;

    Ok(json!({
        "command": "synth-gen",
        "difficulty": args.difficulty,
        "n": args.n,
        "seed": seed,
        "instances": data_path.display().to_string(),
        "embeddings": emb_path.display().to_string(),
    }))
}

fn run_sweep(args: SweepArgs) -> Result<Value> {
    let started = Instant::now();
    let axis = SweepAxis::parse(&args.axis)?;
    let config = load_config(&args.common)?;
    let data_path = resolve(&args.data);
    let dataset = load_dataset(&data_path)?;
    let table = load_table(&args.embeddings, config.dims.embed_dim)?;
    let splits = load_splits(&args.splits)?;

    let rows = sweep(&config, axis, &dataset, &splits, &table, args.common.jobs)?;
    let result = json!({
        "command": "sweep",
        "axis": args.axis,
        "rows": rows.iter().map(|r| json!({
            "setting": r.setting,
            "top1": r.top1,
            "top3": r.top3,
            "wall_seconds": r.wall_seconds,
        })).collect::<Vec<_>>(),
    });

    if let Some(dir) = &args.common.out {
        ensure_out_dir(dir)?;
        let path = dir.join("sweep.json");
        std::fs::write(&path, pretty(&result))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        write_manifest(
            dir,
            "sweep",
            config.clone(),
            config.train.seed,
            args.common.jobs,
            &[&data_path],
            &[&path],
            started,
        )?;
    }
    Ok(result)
}

fn run_inspect(args: InspectArgs) -> Result<Value> {
    let checkpoint = Checkpoint::load(&resolve(&args.checkpoint))?;
    let table = load_table(&args.embeddings, checkpoint.config.dims.embed_dim)?;
    let instance = load_instance(&resolve(&args.instance))?;
    let pipeline = Pipeline::new(checkpoint.config.clone(), checkpoint.vocab.clone())?;

    // Same candidate filtering as inference, but with the attention dump on.
    let prepared = pipeline.prepare(&instance, &table, RelationFilter::None)?;
    let mut tape = Tape::new();
    let opts = ForwardOptions {
        training: false,
        inspect: true,
    };
    let mut rng = substream(checkpoint.train_seed, "inspect");
    let pass = pipeline.forward(&mut tape, &checkpoint.params, &prepared, &table, &opts, &mut rng)?;

    let dump = pass
        .inspect
        .ok_or_else(|| Error::Data("forward pass produced no inspection dump".into()))?;
    let gamma = |traces: &[gruc::reasoning::GammaTrace]| {
        traces
            .iter()
            .map(|t| json!({ "step": t.step, "weights": t.weights }))
            .collect::<Vec<_>>()
    };
    Ok(json!({
        "command": "inspect",
        "instance": instance.id,
        "alpha": dump.alpha,
        "stream_labels": dump.stream_labels,
        "concepts": dump.concepts.iter().map(|c| json!({
            "entity": c.entity,
            "visual": gamma(&c.visual),
            "semantic": gamma(&c.semantic),
        })).collect::<Vec<_>>(),
        "gate_ratios": pass.gate_ratios.map(|g| json!({
            "visual": g.visual,
            "semantic": g.semantic,
            "fact": g.fact,
        })),
        "ranked": pass.ranked,
    }))
}

fn run_gradcheck(args: GradcheckArgs) -> Result<Value> {
    let seed = args.common.seed.unwrap_or(0);
    let (config, instance, table) = match &args.instance {
        Some(path) => {
            let config = load_config(&args.common)?;
            let emb = args.embeddings.as_ref().ok_or_else(|| {
                Error::Data("--embeddings is required with --instance".into())
            })?;
            let table = load_table(emb, config.dims.embed_dim)?;
            (config, load_instance(&resolve(path))?, table)
        }
        None => {
            let spec = SyntheticSpec::default();
            let config = match &args.common.config {
                Some(path) => Config::from_json(&read_to_string(&resolve(path))?)?,
                None => spec.config(),
            };
            let instance = gruc::harness::synthetic::generate_instance(&spec, seed, 0)?.bundle;
            (config, instance, build_table(&spec, seed)?)
        }
    };

    let pipeline = Pipeline::new(config, None)?;
    let params = pipeline.build_params(seed)?;
    let prepared = pipeline.prepare(&instance, &table, RelationFilter::None)?;
    let loss_fn = |tape: &mut Tape, params: &gruc::numerics::ParameterSet| {
        let mut rng = substream(seed, "gradcheck");
        let pass = pipeline.forward(
            tape,
            params,
            &prepared,
            &table,
            &ForwardOptions {
                training: false,
                inspect: false,
            },
            &mut rng,
        )?;
        pass.loss
            .ok_or_else(|| Error::Data("instance has no answer to train against".into()))
    };

    let check = GradCheckConfig {
        tolerance: args.tolerance,
        max_coords: args.coords,
        seed,
        ..GradCheckConfig::default()
    };
    let report = grad_check(loss_fn, &params, &check)?;
    let result = json!({
        "command": "gradcheck",
        "passed": report.passed,
        "max_rel_err": report.max_rel_err,
        "tolerance": args.tolerance,
        "coords_checked": report.coords_checked,
        "worst": report.worst.as_ref().map(|w| json!({
            "param": w.param,
            "index": w.index,
            "analytic": w.analytic,
            "numeric": w.numeric,
            "rel_err": w.rel_err,
        })),
    });
    if report.passed {
        Ok(result)
    } else {
        // The report still lands on stdout so the failure is diagnosable;
        // the error drives the exit code.
        println!("{}", pretty(&result));
        Err(Error::Data(format!(
            "gradient check failed: max relative error {} exceeds {}",
            report.max_rel_err, args.tolerance
        )))
    }
}
