//! Command-line entry point: dataset generation, training, evaluation,
//! gradient checking, ablations, and debug dumps.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::model::{load_model, Model, ModelConfig};
use crate::scenegen::{generate_dataset, write_dataset, GenSettings};
use crate::trainer::ablation::{run_ablation, AblationSettings, AblationVariant};
use crate::trainer::{
    ground_truth_of, load_train_state, predict_dataset, save_checkpoint, train_stage, AdamW,
    Progress, TrainConfig,
};
use crate::{Error, Result};

/// Instruction-conditioned multi-instance segmentation on a synthetic grid
/// benchmark.
#[derive(Parser, Debug)]
#[command(name = "setseg", version, disable_help_subcommand = true)]
pub struct App {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset splits.
    Gen(GenArgs),
    /// Run the two-stage training loop.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or a prediction file) on a dataset split.
    Eval(EvalArgs),
    /// Verify recorded gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Train one ablation variant plus the full baseline and emit paired
    /// reports.
    Ablate(AblateArgs),
    /// Print an attention mask as a 0/1 grid.
    DumpMask(DumpMaskArgs),
    /// Print a matching cost matrix and its optimal assignment as JSON.
    DumpMatching(DumpMatchingArgs),
}

/// Top-level JSON configuration; every section is optional and defaulted.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AppConfig {
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub gen: Option<GenSettings>,
}

impl AppConfig {
    pub fn load(path: Option<&Path>) -> Result<AppConfig> {
        match path {
            None => Ok(AppConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                let parsed: AppConfig = serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("bad config {}: {e}", p.display())))?;
                Ok(parsed)
            }
        }
    }

    pub fn model(&self) -> ModelConfig {
        self.model.unwrap_or_default()
    }

    pub fn train(&self) -> TrainConfig {
        self.train.unwrap_or_default()
    }

    pub fn gen(&self) -> GenSettings {
        self.gen.clone().unwrap_or_default()
    }
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory produced by `gen`.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Resume from a checkpoint directory written by a previous run.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Dataset split (JSON Lines).
    #[arg(long)]
    dataset: PathBuf,
    /// Checkpoint directory (model.bin + config.json).
    #[arg(long, required_unless_present = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Evaluate a prediction file instead of running a model.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Presence threshold override.
    #[arg(long)]
    tau: Option<f64>,
    /// Optional output directory for the report and predictions.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Pass/fail tolerance on the max relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// One of: full, no_query_bank, causal_only, dummy_phrase, skip_stage1,
    /// k<N>.
    #[arg(long)]
    variant: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DumpMaskArgs {
    #[arg(long, default_value_t = 4)]
    vision: usize,
    #[arg(long, default_value_t = 3)]
    text: usize,
    #[arg(long, default_value_t = 0)]
    phrase: usize,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = false)]
    mask_end: bool,
    /// Dump the plain causal baseline instead of the hybrid mask.
    #[arg(long, default_value_t = false)]
    causal: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DumpMatchingArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    slots: usize,
    #[arg(long, default_value_t = 3)]
    targets: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Reproduction record written next to every artifact-producing run.
#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    config: Option<String>,
    seed: Option<u64>,
    git_describe: String,
    out_dir: String,
    argv: Vec<String>,
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

fn write_manifest(
    out: &Path,
    command: &str,
    config: Option<&Path>,
    seed: Option<u64>,
    argv: &[String],
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let manifest = RunManifest {
        command: command.to_string(),
        config: config.map(|p| p.display().to_string()),
        seed,
        git_describe: git_describe(),
        out_dir: out.display().to_string(),
        argv: argv.to_vec(),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(out.join("manifest.json"), text + "\n")?;
    Ok(())
}

/// Parse and run; returns the process exit code.
pub fn run<I: IntoIterator<Item = String>>(argv: I) -> i32 {
    let argv: Vec<String> = argv.into_iter().collect();
    let app = match App::try_parse_from(&argv) {
        Ok(app) => app,
        Err(e) => {
            // Help and version requests are successes; anything else is a
            // usage error on the diagnostic stream.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{e}");
            return 1;
        }
    };
    crate::init_thread_pool();
    match dispatch(app.command, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::GenConfig(_) => 1,
        _ => 2,
    }
}

fn dispatch(command: Command, argv: &[String]) -> Result<()> {
    match command {
        Command::Gen(args) => cmd_gen(args, argv),
        Command::Train(args) => cmd_train(args, argv),
        Command::Eval(args) => cmd_eval(args, argv),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Ablate(args) => cmd_ablate(args, argv),
        Command::DumpMask(args) => cmd_dump_mask(args),
        Command::DumpMatching(args) => cmd_dump_matching(args),
    }
}

fn cmd_gen(args: GenArgs, argv: &[String]) -> Result<()> {
    let config = AppConfig::load(args.config.as_deref())?;
    let settings = config.gen();
    let dataset = generate_dataset(args.seed, &settings)?;
    write_dataset(&args.out, &dataset)?;
    write_manifest(&args.out, "gen", args.config.as_deref(), Some(args.seed), argv)?;
    eprintln!(
        "wrote {} + {} train, {} val, {} test samples to {} ({} filter rejections)",
        dataset.stage1.len(),
        dataset.stage2.len(),
        dataset.val.len(),
        dataset.test.len(),
        args.out.display(),
        dataset.stats.filter_rejections
    );
    Ok(())
}

fn cmd_train(args: TrainArgs, argv: &[String]) -> Result<()> {
    let config = AppConfig::load(args.config.as_deref())?;
    let train_cfg = config.train();
    train_cfg.stage1.validate()?;
    train_cfg.stage2.validate()?;
    let model_cfg = config.model();
    model_cfg.validate()?;

    let stage1_data = crate::scenegen::read_jsonl(&args.dataset.join("train_stage1.jsonl"))?;
    let stage2_data = crate::scenegen::read_jsonl(&args.dataset.join("train_stage2.jsonl"))?;
    std::fs::create_dir_all(&args.out)?;
    write_manifest(&args.out, "train", args.config.as_deref(), Some(args.seed), argv)?;

    let mut log = std::io::BufWriter::new(std::fs::File::create(args.out.join("train_log.jsonl"))?);

    // Fresh start or checkpoint resume.
    let (mut model, mut opt, mut stage, mut progress) = match &args.checkpoint {
        None => {
            let model = Model::new(model_cfg, args.seed)?;
            let opt = AdamW::new(&model, &train_cfg.stage1);
            (model, opt, 1u8, Progress::default())
        }
        Some(dir) => {
            let model = load_model(dir)?;
            let probe_cfg = train_cfg.stage1;
            let (opt, stage, progress) = load_train_state(dir, &model, &probe_cfg)?;
            (model, opt, stage, progress)
        }
    };

    if stage == 1 {
        let outcome = train_stage(
            &mut model,
            &stage1_data,
            &train_cfg.stage1,
            1,
            args.seed,
            &mut opt,
            progress,
            None,
            &mut log,
        )?;
        save_checkpoint(&args.out.join("stage1"), &model, &opt, 1, outcome.progress)?;
        stage = 2;
        progress = Progress::default();
        opt = AdamW::new(&model, &train_cfg.stage2);
    }
    debug_assert_eq!(stage, 2);
    let outcome = train_stage(
        &mut model,
        &stage2_data,
        &train_cfg.stage2,
        2,
        args.seed,
        &mut opt,
        progress,
        None,
        &mut log,
    )?;
    save_checkpoint(&args.out.join("stage2"), &model, &opt, 2, outcome.progress)?;
    use std::io::Write as _;
    log.flush()?;
    eprintln!("checkpoints written under {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs, argv: &[String]) -> Result<()> {
    let samples = crate::scenegen::read_jsonl(&args.dataset)?;
    if samples.is_empty() {
        return Err(Error::Dataset("evaluation split is empty".into()));
    }
    let side = samples[0].grid_side;
    let ground_truth = ground_truth_of(&samples);

    let (predictions, latency_note) = match (&args.checkpoint, &args.predictions) {
        (_, Some(pred_path)) => {
            let text = std::fs::read_to_string(pred_path)?;
            let mut preds = Vec::new();
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let record: crate::metrics::PredictionRecord = serde_json::from_str(line)?;
                preds.push(crate::metrics::SamplePredictions::from_record(&record, side)?);
            }
            (preds, None)
        }
        (Some(ckpt), None) => {
            let model = load_model(ckpt)?;
            let tau = args.tau.unwrap_or(model.config.tau);
            let (preds, latency) = predict_dataset(&model, &samples, tau, false)?;
            (preds, Some(latency))
        }
        (None, None) => {
            return Err(Error::Config("eval needs --checkpoint or --predictions".into()));
        }
    };

    let report = crate::metrics::evaluate(&predictions, &ground_truth)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    eprint!("{}", report.render_table());
    if let Some(latency) = latency_note {
        eprintln!("mean per-sample inference latency: {latency:.2} ms");
    }
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
        let mut lines = String::new();
        for p in &predictions {
            lines.push_str(&serde_json::to_string(&p.to_record())?);
            lines.push('\n');
        }
        std::fs::write(out.join("predictions.jsonl"), lines)?;
        write_manifest(out, "eval", None, None, argv)?;
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let report = crate::trainer::gradcheck_battery(args.seed, args.step)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if report.max_rel_err <= args.tolerance {
        Ok(())
    } else {
        Err(Error::GradCheck(format!(
            "max relative error {} exceeds tolerance {}",
            report.max_rel_err, args.tolerance
        )))
    }
}

fn cmd_ablate(args: AblateArgs, argv: &[String]) -> Result<()> {
    let variant: AblationVariant = args.variant.parse()?;
    let config = AppConfig::load(args.config.as_deref())?;
    let mut settings = AblationSettings::default();
    if let Some(m) = config.model {
        settings.model = m;
    }
    if let Some(t) = config.train {
        settings.train = t;
    }
    if let Some(g) = config.gen.clone() {
        settings.gen = g;
    }
    let pair = run_ablation(variant, args.seed, &settings)?;
    println!("{}", serde_json::to_string_pretty(&pair)?);
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(
            out.join(format!("ablation_{}_{}.json", pair.variant.variant, args.seed)),
            serde_json::to_string_pretty(&pair)? + "\n",
        )?;
        write_manifest(out, "ablate", args.config.as_deref(), Some(args.seed), argv)?;
    }
    Ok(())
}

fn cmd_dump_mask(args: DumpMaskArgs) -> Result<()> {
    let text = vec![0u32; args.text];
    let phrase = vec![0u32; args.phrase];
    let layout = crate::seq_layout::assemble(args.vision, &text, &phrase, args.k, args.mask_end)?;
    let mask = if args.causal {
        crate::seq_layout::build_causal_mask(&layout)
    } else {
        crate::seq_layout::build_hybrid_mask(&layout)
    };
    let grid = mask.render_grid();
    match &args.out {
        Some(path) => std::fs::write(path, grid)?,
        None => print!("{grid}"),
    }
    Ok(())
}

fn cmd_dump_matching(args: DumpMatchingArgs) -> Result<()> {
    if args.targets > args.slots {
        return Err(Error::Config("targets cannot exceed slots".into()));
    }
    let mut rng = crate::rng::Rng::new(args.seed);
    let rows: Vec<Vec<f64>> = (0..args.slots)
        .map(|_| (0..args.targets).map(|_| rng.next_gaussian()).collect())
        .collect();
    let costs = crate::matching::CostMatrix::from_rows(&rows);
    let assignment = crate::matching::hungarian(&costs)?;
    let dump = crate::matching::MatchingDump { costs, assignment };
    let text = serde_json::to_string_pretty(&dump)?;
    match &args.out {
        Some(path) => std::fs::write(path, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}
