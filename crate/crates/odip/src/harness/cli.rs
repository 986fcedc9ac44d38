//! Command-line frontend.
//!
//! Exit codes: `0` success, `2` configuration or usage problems, `3`
//! runtime failures (infeasible scenes, corrupted artifacts, I/O).

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use super::annotations::{AnnotationFile, AnnotationRecord, LabelSource};
use super::checkpoint::RunDir;
use super::config::{ConfigError, ExperimentConfig};
use super::{report, HarnessError};
use crate::detector::bootstrap::bootstrap_pretrain;
use crate::looprunner::{
    initialize_state, run_stage, AblationMode, LoopError, MetricsReport, RunContext,
};
use crate::registry::builtin_registry;
use crate::scenegen::{make_eval_dataset, SceneGenConfig, TableKind};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "odip",
    about = "Deterministic simulation of a robot that learns object detection by grasping",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a held-out evaluation dataset to PNG images plus annotation files.
    GenDataset(GenDatasetArgs),
    /// Execute a full staged run from a config file.
    Run(RunArgs),
    /// Run all three data-source arms of one config and compare them.
    Ablate(AblateArgs),
    /// Summarize a finished (or in-progress) run directory.
    Report(ReportArgs),
    /// Pretrain the detector on base categories and save its parameters.
    BootstrapPretrain(BootstrapArgs),
}

#[derive(Debug, Args)]
struct GenDatasetArgs {
    /// Scene density: `sparse` or `dense`.
    #[arg(long)]
    kind: String,
    /// Number of images to render (must be positive).
    #[arg(long)]
    images: u32,
    /// Dataset seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue an interrupted run from its last completed stage.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Experiment configuration file (its `ablation` line is ignored).
    #[arg(long)]
    config: PathBuf,
    /// Parent directory for the three arm subdirectories.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Run directory to summarize.
    #[arg(long)]
    run: PathBuf,
    /// Additional run directories to compare against (same config hash).
    #[arg(long)]
    compare: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct BootstrapArgs {
    /// Experiment configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Where to write the pretrained parameter JSON.
    #[arg(long)]
    out: PathBuf,
}

/// A dispatch failure carrying its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub exit_code: i32,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> CliError {
        CliError { exit_code: EXIT_CONFIG, message: message.into() }
    }

    fn runtime(message: impl Into<String>) -> CliError {
        CliError { exit_code: EXIT_RUNTIME, message: message.into() }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> CliError {
        match e {
            ConfigError::Io(_) => CliError::runtime(e.to_string()),
            _ => CliError::config(e.to_string()),
        }
    }
}

impl From<LoopError> for CliError {
    fn from(e: LoopError) -> CliError {
        match e {
            LoopError::Config(_) => CliError::config(e.to_string()),
            _ => CliError::runtime(e.to_string()),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> CliError {
        match e {
            HarnessError::Config(c) => c.into(),
            HarnessError::Run(l) => l.into(),
            other => CliError::runtime(other.to_string()),
        }
    }
}

/// Parses `argv` and executes; returns the process exit code.
pub fn main_from_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own message; --help/--version exit 0, usage
            // problems map to the configuration-error code.
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.exit_code
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenDataset(args) => gen_dataset(&args),
        Command::Run(args) => {
            let mut cfg = load_config(&args.config)?;
            if let Some(out) = args.out {
                cfg.output_dir = out;
            }
            execute_run(&cfg, args.resume).map(|_| ())
        }
        Command::Ablate(args) => ablate(&args),
        Command::Report(args) => print_report(&args),
        Command::BootstrapPretrain(args) => bootstrap_to_file(&args),
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    ExperimentConfig::from_file(path).map_err(|e| match e {
        ConfigError::Io(io) => {
            CliError::runtime(format!("cannot read config {}: {io}", path.display()))
        }
        other => CliError::config(format!("{}: {other}", path.display())),
    })
}

fn gen_dataset(args: &GenDatasetArgs) -> Result<(), CliError> {
    let kind = match args.kind.as_str() {
        "sparse" => TableKind::EvalSparse,
        "dense" => TableKind::EvalDense,
        other => {
            return Err(CliError::config(format!(
                "unknown dataset kind {other:?} (expected sparse or dense)"
            )))
        }
    };
    if args.images == 0 {
        return Err(CliError::config("--images must be positive"));
    }
    let scene_cfg = SceneGenConfig::default();
    let novel: Vec<String> = ["bottle", "box", "can", "cube"].map(String::from).to_vec();
    let registry = builtin_registry(&novel).map_err(|e| CliError::config(e.to_string()))?;
    let dataset = make_eval_dataset(kind, args.images, args.seed, &scene_cfg, &registry)
        .map_err(|e| CliError::runtime(e.to_string()))?;

    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::runtime(format!("{}: {e}", args.out.display())))?;
    for (index, (_, rendered)) in dataset.iter().enumerate() {
        let image_path = args.out.join(format!("img_{index:05}.png"));
        rendered
            .raster
            .save_with_format(&image_path, image::ImageFormat::Png)
            .map_err(|e| CliError::runtime(format!("{}: {e}", image_path.display())))?;
        let records: Vec<AnnotationRecord> = rendered
            .truth
            .iter()
            .map(|ann| AnnotationRecord::from_annotation(ann, LabelSource::GroundTruth, &registry))
            .collect();
        let file = AnnotationFile::new(
            index as u64,
            rendered.raster.width(),
            rendered.raster.height(),
            records,
        )
        .map_err(|e| CliError::runtime(format!("image {index}: {e}")))?;
        let ann_path = args.out.join(format!("img_{index:05}.json"));
        std::fs::write(&ann_path, file.to_json().map_err(|e| CliError::runtime(e.to_string()))?)
            .map_err(|e| CliError::runtime(format!("{}: {e}", ann_path.display())))?;
    }

    let manifest = format!(
        "{{\n  \"schema_version\": 1,\n  \"kind\": \"{}\",\n  \"images\": {},\n  \"seed\": {}\n}}\n",
        args.kind, args.images, args.seed
    );
    let manifest_path = args.out.join("dataset_manifest.json");
    std::fs::write(&manifest_path, manifest)
        .map_err(|e| CliError::runtime(format!("{}: {e}", manifest_path.display())))?;
    println!("wrote {} {} images to {}", dataset.len(), args.kind, args.out.display());
    Ok(())
}

/// Runs (or resumes) one configured arm to completion, printing one line
/// per stage. Returns the run directory for follow-up reporting.
fn execute_run(cfg: &ExperimentConfig, resume: bool) -> Result<RunDir, CliError> {
    let ctx = cfg.build_context()?;
    let root = cfg.output_dir.clone();
    let manifest_exists = root.join("manifest.json").exists();
    if manifest_exists && !resume {
        return Err(CliError::config(format!(
            "{} already holds a run; pass --resume to continue it",
            root.display()
        )));
    }
    let dir = RunDir::create(&root, cfg)?;
    let start_stage = if resume { dir.latest_complete_stage() } else { 0 };

    let mut state = if start_stage == 0 {
        let state = initialize_state(&ctx)?;
        dir.save_pretrain(&state.params_init)?;
        state
    } else {
        println!("resuming {} from stage {start_stage}", root.display());
        dir.load_state(&ctx, start_stage)?
    };

    while state.stage < ctx.run.max_stage {
        let started = Instant::now();
        let metrics = run_stage(&mut state, &ctx)?;
        print_stage_line(&ctx, metrics);
        dir.save_stage(&state)?;
        report::write_reports(&dir, &state.metrics, &ctx.registry)?;
        dir.record_timing(state.stage, started.elapsed().as_millis())?;
    }
    Ok(dir)
}

fn print_stage_line(ctx: &RunContext, m: &MetricsReport) {
    let ap = |r: &crate::evalkit::EvalResult| {
        r.overall.as_ref().map(|s| format!("{:.3}", s.ap)).unwrap_or_else(|| "-".into())
    };
    let iou = m.pseudo.mean_iou.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
    println!(
        "stage {:>2}/{}  sparse AP {}  dense AP {}  pseudo IoU {}  udo {}  moa {}",
        m.stage,
        ctx.run.max_stage,
        ap(&m.sparse),
        ap(&m.dense),
        iou,
        m.udo_images,
        m.moa_images,
    );
}

fn ablate(args: &AblateArgs) -> Result<(), CliError> {
    let base = load_config(&args.config)?;
    let parent = args.out.clone().unwrap_or_else(|| base.output_dir.clone());
    let modes = [AblationMode::Joint, AblationMode::UdoOnly, AblationMode::MoaOnly];
    let mut arms: Vec<(String, Vec<MetricsReport>)> = Vec::new();
    for mode in modes {
        let mut cfg = base.clone();
        cfg.run.ablation = mode;
        cfg.output_dir = parent.join(mode.to_string());
        println!("== arm {mode} -> {}", cfg.output_dir.display());
        // Arms resume automatically: collection is seed-determined, so a
        // finished arm is simply loaded back instead of recomputed.
        let dir = execute_run(&cfg, true)?;
        let ctx = cfg.build_context()?;
        let state = dir.load_state(&ctx, dir.latest_complete_stage())?;
        arms.push((mode.to_string(), state.metrics));
    }
    let borrowed: Vec<(String, &[MetricsReport])> =
        arms.iter().map(|(name, history)| (name.clone(), history.as_slice())).collect();
    println!();
    print!("{}", report::ablation_table(&borrowed)?);
    Ok(())
}

fn print_report(args: &ReportArgs) -> Result<(), CliError> {
    let (manifest, history) = load_history(&args.run)?;
    println!(
        "run {}  config {}  arm {}",
        args.run.display(),
        manifest.config_hash,
        manifest.ablation
    );
    print!("{}", report::summary_table(&history));
    println!("{}", report::pseudo_trend_line(&history));

    if !args.compare.is_empty() {
        let mut arms: Vec<(String, Vec<MetricsReport>)> =
            vec![(manifest.ablation.clone(), history)];
        for path in &args.compare {
            let (m, h) = load_history(path)?;
            arms.push((format!("{} ({})", m.ablation, path.display()), h));
        }
        let borrowed: Vec<(String, &[MetricsReport])> =
            arms.iter().map(|(name, h)| (name.clone(), h.as_slice())).collect();
        println!();
        print!("{}", report::ablation_table(&borrowed)?);
    }
    Ok(())
}

fn load_history(root: &Path) -> Result<(super::RunManifest, Vec<MetricsReport>), CliError> {
    let dir = RunDir::open(root)?;
    let latest = dir.latest_complete_stage();
    if latest == 0 {
        return Err(CliError::runtime(format!(
            "{} has no completed stages to report",
            root.display()
        )));
    }
    let path = root.join("stages").join(format!("stage_{latest:04}")).join("metrics.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    let history: Vec<MetricsReport> = serde_json::from_str(&text)
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    Ok((dir.manifest().clone(), history))
}

fn bootstrap_to_file(args: &BootstrapArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    let novel: Vec<String> = cfg.run.schedule.keys().cloned().collect();
    let registry = builtin_registry(&novel).map_err(|e| CliError::config(e.to_string()))?;
    let (params, report) = bootstrap_pretrain(&cfg.scene, &cfg.detector, &cfg.bootstrap, &registry)
        .map_err(|e| CliError::runtime(e.to_string()))?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::runtime(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(&args.out, params.to_json_string())
        .map_err(|e| CliError::runtime(format!("{}: {e}", args.out.display())))?;
    let loss = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
    println!(
        "pretrained on {} tasks over {} epochs (loss {} -> {}); wrote {}",
        report.prepared,
        report.epochs,
        loss(report.initial_loss),
        loss(report.final_loss),
        args.out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn temp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("odip-cli-{tag}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn usage_problems_exit_with_the_config_code() {
        assert_eq!(main_from_args(["odip", "no-such-command"]), EXIT_CONFIG);
        assert_eq!(
            main_from_args(["odip", "gen-dataset", "--kind", "sparse", "--out", "/tmp/x"]),
            EXIT_CONFIG,
            "missing --images is a usage error"
        );
        assert_eq!(main_from_args(["odip", "--help"]), 0, "--help is not an error");
    }

    #[test]
    fn zero_images_is_rejected_before_any_work() {
        let out = temp_dir("zero");
        let code = main_from_args([
            "odip",
            "gen-dataset",
            "--kind",
            "sparse",
            "--images",
            "0",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_CONFIG);
        assert!(!out.exists(), "nothing may be written for a rejected request");
    }

    #[test]
    fn gen_dataset_writes_images_annotations_and_manifest() {
        let out = temp_dir("gen");
        let code = main_from_args([
            "odip",
            "gen-dataset",
            "--kind",
            "sparse",
            "--images",
            "3",
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        for index in 0..3 {
            let png = out.join(format!("img_{index:05}.png"));
            let json = out.join(format!("img_{index:05}.json"));
            assert!(png.exists(), "missing {}", png.display());
            let file =
                AnnotationFile::from_json(&std::fs::read_to_string(&json).unwrap()).unwrap();
            assert!(!file.records.is_empty(), "evaluation scenes always hold objects");
            assert!(file
                .records
                .iter()
                .all(|r| matches!(r.source, LabelSource::GroundTruth)));
        }
        // A rerun with identical parameters reproduces every byte.
        let before = std::fs::read(out.join("img_00001.png")).unwrap();
        let manifest_before = std::fs::read(out.join("dataset_manifest.json")).unwrap();
        let code = main_from_args([
            "odip",
            "gen-dataset",
            "--kind",
            "sparse",
            "--images",
            "3",
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        assert_eq!(
            std::fs::read(out.join("img_00001.png")).unwrap(),
            before,
            "regeneration must be byte-identical"
        );
        assert_eq!(std::fs::read(out.join("dataset_manifest.json")).unwrap(), manifest_before);
        let _ = std::fs::remove_dir_all(&out);
    }
}
