//! `mucil`: generate synthetic concept-class streams, train incremental
//! models over them, and evaluate forgetting/concept metrics.
//!
//! Exit codes: 0 success, 2 usage errors (clap), 3 invalid configuration,
//! 1 anything else. All randomness flows from `--seed`; `MUCIL_THREADS`
//! caps evaluation parallelism.

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mucil_core::analysis;
use mucil_core::cbm::CbmConfig;
use mucil_core::ckpt::load_checkpoint;
use mucil_core::continual::{run_stream, ClAlgo, RunConfig, TrainConfig};
use mucil_core::encoder::AttentionKind;
use mucil_core::error::Error as CoreError;
use mucil_core::metrics::{evaluate_run, write_eval_outputs, MetricSelection, ProbeParams};
use mucil_core::model::{ModelKind, StreamModel};
use mucil_core::syndata::{generate_schema, read_dataset, split_experiences, write_dataset, WebSchema};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "mucil", version, about = "Concept-based class-incremental learning at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic glyph dataset.
    Gen(GenArgs),
    /// Train a model over the experience stream.
    Train(TrainArgs),
    /// Compute metrics over a finished run.
    Eval(EvalArgs),
    /// Render a concept attention heatmap as PGM.
    Heatmap(HeatmapArgs),
    /// Apply concept corrections from a file and report prediction flips.
    Intervene(InterveneArgs),
    /// Pretty-print a run's report.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Schema JSON; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the schema seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    Mucil,
    Cbm,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum AlgoArg {
    Er,
    Agem,
    Derpp,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum AttentionArg {
    Full,
    Linear,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "mucil")]
    model: ModelArg,
    #[arg(long, value_enum, default_value = "er")]
    algo: AlgoArg,
    #[arg(long, default_value_t = 500)]
    buffer: usize,
    #[arg(long, default_value_t = 4)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, value_enum, default_value = "full")]
    attention: AttentionArg,
    #[arg(long, default_value_t = 5.0)]
    lambda1: f32,
    #[arg(long, default_value_t = 10.0)]
    lambda2: f32,
    /// Disable concept-augmented replay (stored masks).
    #[arg(long)]
    no_concept_replay: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    /// Comma list: faa,af,la,ccrf,acr,alignment or `all`.
    #[arg(long, default_value = "all")]
    metrics: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    run: PathBuf,
    /// Experience whose validation pool provides the sample.
    #[arg(long, default_value_t = 1)]
    experience: usize,
    /// Index into that validation pool.
    #[arg(long, default_value_t = 0)]
    sample: usize,
    #[arg(long)]
    concept: usize,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    #[arg(long, default_value_t = 0)]
    head: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InterveneArgs {
    #[arg(long)]
    run: PathBuf,
    /// JSON file with correction requests.
    #[arg(long)]
    corrections: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run: PathBuf,
    /// Report path; defaults to `<run>/report.json`.
    #[arg(long)]
    json: Option<PathBuf>,
}

/// One correction request: overwrite listed concept activations of one
/// validation sample and re-read the probe prediction.
#[derive(Debug, Serialize, Deserialize)]
struct CorrectionRequest {
    experience: usize,
    sample: usize,
    corrections: Vec<(usize, bool)>,
}

#[derive(Debug, Serialize)]
struct CorrectionOutcome {
    experience: usize,
    sample: usize,
    pre: usize,
    post: usize,
    corrections: Vec<(usize, bool)>,
}

fn eval_threads() -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("MUCIL_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n >= 1 => n.min(available.max(1)),
        _ => available,
    }
}

/// Config problems exit with code 3 and name the offending field.
struct ConfigError(String);

fn config_err(field: &str, msg: impl std::fmt::Display) -> anyhow::Error {
    anyhow::Error::new(CoreError::Config(format!("{field}: {msg}"))).context(ConfigError(format!(
        "invalid config at {field}"
    )))
}

impl std::fmt::Debug for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}
impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

fn cmd_gen(args: GenArgs) -> anyhow::Result<()> {
    let mut schema_cfg: WebSchema = match &args.config {
        Some(path) => serde_json::from_reader(
            std::fs::File::open(path).with_context(|| format!("open {}", path.display()))?,
        )
        .map_err(|e| config_err("schema", e))?,
        None => WebSchema::default(),
    };
    if let Some(seed) = args.seed {
        schema_cfg.seed = seed;
    }
    let schema = generate_schema(&schema_cfg)?;
    let experiences = split_experiences(&schema, schema_cfg.seed)?;
    write_dataset(&args.out, &schema, &experiences)?;
    println!(
        "wrote {} experiences ({} classes, {} concepts) to {}",
        experiences.len(),
        schema.classes.len(),
        schema.concepts.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let (schema, experiences) = read_dataset(&args.data)?;
    let mut cfg = RunConfig {
        data_dir: args.data.to_string_lossy().into_owned(),
        model_kind: match args.model {
            ModelArg::Mucil => ModelKind::Mucil,
            ModelArg::Cbm => ModelKind::Cbm,
        },
        mucil: mucil_core::model::ModelConfig {
            encoder: mucil_core::encoder::EncoderConfig {
                dim: args.dim,
                attention_kind: match args.attention {
                    AttentionArg::Full => AttentionKind::Full,
                    AttentionArg::Linear => AttentionKind::Linear,
                },
                ..Default::default()
            },
            loss: mucil_core::heads::LossConfig {
                lambda1: args.lambda1,
                lambda2: args.lambda2,
            },
            image_size: schema.cfg.image_size,
            channels: schema.cfg.channels,
            ..Default::default()
        },
        cbm: CbmConfig {
            feature_dim: args.dim,
            image_size: schema.cfg.image_size,
            channels: schema.cfg.channels,
            lambda1: args.lambda1,
            ..Default::default()
        },
        train: TrainConfig {
            algo: match args.algo {
                AlgoArg::Er => ClAlgo::Er,
                AlgoArg::Agem => ClAlgo::Agem,
                AlgoArg::Derpp => ClAlgo::Derpp,
            },
            buffer_capacity: args.buffer,
            batch_size: args.batch,
            epochs_per_experience: args.epochs,
            base_lr: args.lr,
            concept_replay: !args.no_concept_replay,
            ..Default::default()
        },
        seed: args.seed,
    };
    cfg.apply_seed(args.seed);

    if args.dim == 0 || args.dim % cfg.mucil.encoder.num_heads != 0 {
        return Err(config_err(
            "train.dim",
            format!("{} must be a positive multiple of {} heads", args.dim, cfg.mucil.encoder.num_heads),
        ));
    }
    if cfg.mucil.image_size % cfg.mucil.patch_size != 0 {
        return Err(config_err(
            "model.patch_size",
            format!(
                "image size {} not divisible by patch size {}",
                cfg.mucil.image_size, cfg.mucil.patch_size
            ),
        ));
    }
    if args.batch == 0 {
        return Err(config_err("train.batch", "must be positive"));
    }
    if args.epochs == 0 {
        return Err(config_err("train.epochs", "must be positive"));
    }

    std::fs::create_dir_all(&args.out)?;
    cfg.save(&args.out.join("config.json"))?;
    let mut model = cfg.build_model()?;
    let summary = run_stream(&experiences, &mut model, &cfg.train, &args.out)?;
    let t = summary.accuracy_rows.len();
    println!(
        "trained {} experiences; final-row accuracies: {}",
        t,
        summary.accuracy_rows[t - 1]
            .iter()
            .map(|a| format!("{a:.3}"))
            .collect::<Vec<_>>()
            .join(" ")
    );
    Ok(())
}

fn load_run(run: &Path) -> anyhow::Result<(RunConfig, mucil_core::syndata::Schema, Vec<mucil_core::syndata::Experience>)> {
    let cfg = RunConfig::load(&run.join("config.json"))
        .with_context(|| format!("read {}/config.json", run.display()))?;
    let (schema, experiences) = read_dataset(Path::new(&cfg.data_dir))
        .with_context(|| format!("read dataset {}", cfg.data_dir))?;
    Ok((cfg, schema, experiences))
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let (_, _, experiences) = load_run(&args.run)?;
    let selection = MetricSelection::parse(&args.metrics).map_err(|e| config_err("eval.metrics", e))?;
    let (report, accuracy) = evaluate_run(&args.run, &experiences, selection, eval_threads())?;
    write_eval_outputs(&report, &accuracy, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_heatmap(args: HeatmapArgs) -> anyhow::Result<()> {
    let (_, _, experiences) = load_run(&args.run)?;
    let mut t = 0;
    while args.run.join(format!("ckpt_e{}", t + 1)).exists() {
        t += 1;
    }
    if t == 0 {
        return Err(anyhow!("no checkpoints under {}", args.run.display()));
    }
    let (loaded, _) = load_checkpoint(&args.run.join(format!("ckpt_e{t}")))?;
    let model = loaded.as_mucil().ok_or_else(|| {
        anyhow::Error::new(CoreError::Unsupported(
            "attention heatmaps need the multimodal model".into(),
        ))
    })?;
    let exp = experiences
        .get(args.experience.wrapping_sub(1))
        .ok_or_else(|| anyhow!("experience {} not in dataset", args.experience))?;
    let sample = exp
        .val
        .get(args.sample)
        .ok_or_else(|| anyhow!("sample {} outside validation pool", args.sample))?;
    let map = analysis::attention_heatmap(&model, &sample.image, args.concept, args.layer, args.head)?;
    map.write_pgm(&args.out)?;
    println!(
        "wrote {} (argmax cell {})",
        args.out.display(),
        map.argmax_cell()
    );
    Ok(())
}

fn cmd_intervene(args: InterveneArgs) -> anyhow::Result<()> {
    let (_, _, experiences) = load_run(&args.run)?;
    let requests: Vec<CorrectionRequest> =
        serde_json::from_reader(std::fs::File::open(&args.corrections)?)
            .map_err(|e| config_err("corrections", e))?;
    let mut t = 0;
    while args.run.join(format!("ckpt_e{}", t + 1)).exists() {
        t += 1;
    }
    let (model, _) = load_checkpoint(&args.run.join(format!("ckpt_e{t}")))?;

    // Probe over sigmoid activations of the full validation pool.
    let mut rows = Vec::new();
    for exp in &experiences[..t] {
        for s in &exp.val {
            let acts: Vec<f32> = model
                .concept_logit_values(&s.image)?
                .iter()
                .map(|&z| 1.0 / (1.0 + (-z).exp()))
                .collect();
            rows.push((acts, s.class_id));
        }
    }
    let probe = analysis::train_probe(&rows, &ProbeParams::default())?;

    let mut outcomes = Vec::new();
    for req in requests {
        let exp = experiences
            .get(req.experience.wrapping_sub(1))
            .ok_or_else(|| anyhow!("experience {} not in dataset", req.experience))?;
        let sample = exp
            .val
            .get(req.sample)
            .ok_or_else(|| anyhow!("sample {} outside validation pool", req.sample))?;
        let acts: Vec<f32> = model
            .concept_logit_values(&sample.image)?
            .iter()
            .map(|&z| 1.0 / (1.0 + (-z).exp()))
            .collect();
        let outcome = analysis::intervene(&probe, &acts, &req.corrections)?;
        outcomes.push(CorrectionOutcome {
            experience: req.experience,
            sample: req.sample,
            pre: outcome.pre,
            post: outcome.post,
            corrections: req.corrections,
        });
    }
    serde_json::to_writer_pretty(std::fs::File::create(&args.out)?, &outcomes)?;
    println!("wrote {} ({} interventions)", args.out.display(), outcomes.len());
    Ok(())
}

fn cmd_report(args: ReportArgs) -> anyhow::Result<()> {
    let path = args.json.unwrap_or_else(|| args.run.join("report.json"));
    let report: mucil_core::metrics::MetricsReport = serde_json::from_reader(
        std::fs::File::open(&path)
            .with_context(|| format!("open {} (run `mucil eval` first)", path.display()))?,
    )?;
    if let Some(faa) = report.faa {
        println!("FAA  {faa:.4}");
    }
    if let Some(af) = report.af {
        println!("AF   {af:.4}");
    }
    if let Some(ccrf) = report.ccrf {
        println!("CCRF {ccrf:.4}");
        let series = report
            .ccrf_series
            .iter()
            .enumerate()
            .map(|(i, v)| format!("t={}: {v:+.4}", i + 2))
            .collect::<Vec<_>>()
            .join("  ");
        println!("     per-experience: {series}");
    }
    if let Some(g) = report.alignment.grounding_similarity {
        println!("grounding similarity {g:.4}");
    }
    if let Some(a) = report.alignment.alignment_error {
        println!("inter-concept alignment error {a:.6}");
    }
    if !report.la_table.is_empty() {
        println!("linear accuracy probes:");
        for e in &report.la_table {
            println!(
                "  snapshot {} | {} classes | {} concepts -> {:.4}",
                e.snapshot,
                e.class_ids.len(),
                e.concept_prefix,
                e.accuracy
            );
        }
    }
    if !report.acr_matrix.is_empty() {
        println!("ACR matrix (rows: concept sets, cols: image experiences):");
        for (i, row) in report.acr_matrix.iter().enumerate() {
            let cells = row
                .iter()
                .map(|c| c.map_or("  -  ".to_string(), |v| format!("{v:.3}")))
                .collect::<Vec<_>>()
                .join(" ");
            println!("  e{} | {cells}", i + 1);
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Heatmap(args) => cmd_heatmap(args),
        Command::Intervene(args) => cmd_intervene(args),
        Command::Report(args) => cmd_report(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        let code = if err.downcast_ref::<ConfigError>().is_some() {
            3
        } else {
            1
        };
        std::process::exit(code);
    }
}
