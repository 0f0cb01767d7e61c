//! `graphite`: multiscale graph-attention saliency over patch embeddings.
//!
//! Exit codes: 0 on success, 1 when the input or configuration is invalid,
//! 2 when a stage fails at runtime.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use graphite_core::datacli::{
    import_reports, load_dataset, run_pipeline, stage_build_graphs, stage_eval, stage_saliency, stage_train_mil,
    stage_train_ssl, synth_generate, DataError, FeatureDataset, LevelScore, RunConfig, SynthConfig,
};
use graphite_core::saliency::Variant;
use graphite_core::xmetrics::{compare_methods, write_report_csv, Averaging, MetricReport, ThresholdGrid, REPORT_HEADER};

#[derive(Parser, Debug)]
#[command(name = "graphite", version, about = "Multiscale graph-attention saliency for tissue cores")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic dataset with ground-truth masks.
    Synth(SynthArgs),
    /// Build and write the hierarchical graph of every core.
    BuildGraph(StageArgs),
    /// Train the Stage-1 MIL classifier.
    TrainMil(StageArgs),
    /// Train the Stage-2 graph encoder on top of a Stage-1 checkpoint.
    TrainSsl(StageArgs),
    /// Compute and export saliency maps from saved checkpoints.
    Saliency(StageArgs),
    /// Score exported maps against the masks.
    Eval(StageArgs),
    /// Rank the reports of one or more runs.
    Compare(CompareArgs),
    /// Full pipeline: train, map, score, report.
    Run(StageArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Directory to write the dataset into.
    #[arg(long)]
    out: PathBuf,
    /// JSON file with synthetic-data settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    grid_rows: Option<usize>,
    #[arg(long)]
    grid_cols: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    num_levels: Option<usize>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    raster_downsample: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct StageArgs {
    /// Dataset directory (holds manifest.json).
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    run: RunFlags,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GridArg {
    /// 0.01 to 0.99 in steps of 0.01.
    Default,
    /// 0.1 to 0.9 in steps of 0.1.
    Coarse,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AveragingArg {
    Pooled,
    Macro,
}

#[derive(Args, Debug, Default)]
struct RunFlags {
    /// JSON run configuration; absent fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root (default: $GRAPHITE_OUTPUT_ROOT, else ./graphite-out).
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Headline variant: base, v1 or v2.
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    spatial_threshold: Option<f64>,
    #[arg(long)]
    scale_threshold: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Node scores painted into level maps: san or san_relevance.
    #[arg(long)]
    level_scores: Option<LevelScore>,
    #[arg(long, value_enum)]
    averaging: Option<AveragingArg>,
    #[arg(long, value_enum)]
    grid: Option<GridArg>,
    #[arg(long)]
    raster_downsample: Option<usize>,
    #[arg(long)]
    stage1_max_epochs: Option<usize>,
    #[arg(long)]
    stage2_max_epochs: Option<usize>,
    /// Load checkpoints from the output directory instead of training.
    #[arg(long)]
    skip_train: bool,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Run output directories.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Also write the ranked table as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunFlags {
    fn resolve(&self) -> Result<RunConfig, DataError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_json_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.output_dir {
            cfg.output_dir = Some(v.clone());
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(v) = self.spatial_threshold {
            cfg.spatial_threshold = v;
        }
        if let Some(v) = self.scale_threshold {
            cfg.scale_threshold = v;
        }
        if let Some(v) = self.tau {
            cfg.stage2.tau = v;
        }
        if let Some(v) = self.val_fraction {
            cfg.val_fraction = v;
        }
        if let Some(v) = self.level_scores {
            cfg.level_scores = v;
        }
        if let Some(v) = self.averaging {
            cfg.averaging = match v {
                AveragingArg::Pooled => Averaging::Pooled,
                AveragingArg::Macro => Averaging::Macro,
            };
        }
        if let Some(v) = self.grid {
            cfg.grid = match v {
                GridArg::Default => ThresholdGrid::default(),
                GridArg::Coarse => ThresholdGrid::coarse(),
            };
        }
        if let Some(v) = self.raster_downsample {
            cfg.fusion.raster_downsample = v;
        }
        if let Some(v) = self.stage1_max_epochs {
            cfg.stage1.max_epochs = v;
        }
        if let Some(v) = self.stage2_max_epochs {
            cfg.stage2.train.max_epochs = v;
        }
        cfg.skip_train |= self.skip_train;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl SynthArgs {
    fn resolve(&self) -> Result<SynthConfig, DataError> {
        let mut cfg: SynthConfig = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| DataError::Io {
                    path: p.display().to_string(),
                    source,
                })?;
                serde_json::from_str(&text).map_err(|e| DataError::Config(format!("{}: {e}", p.display())))?
            }
            None => SynthConfig::default(),
        };
        let set = |dst: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut cfg.n_train, self.n_train);
        set(&mut cfg.n_test, self.n_test);
        set(&mut cfg.grid_rows, self.grid_rows);
        set(&mut cfg.grid_cols, self.grid_cols);
        set(&mut cfg.feature_dim, self.feature_dim);
        set(&mut cfg.num_levels, self.num_levels);
        set(&mut cfg.raster_downsample, self.raster_downsample);
        if let Some(v) = self.mu {
            cfg.mu = v;
        }
        if let Some(v) = self.sigma {
            cfg.sigma = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        Ok(cfg)
    }
}

/// `println!` that ignores a closed stdout, so piping into `head` is quiet.
macro_rules! out {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

fn print_table(reports: &[MetricReport]) {
    out!("{REPORT_HEADER}");
    for r in reports {
        out!("{}", r.csv_row());
    }
}

fn with_dataset(args: &StageArgs) -> Result<(FeatureDataset, RunConfig), DataError> {
    let cfg = args.run.resolve()?;
    let ds = load_dataset(&args.data)?;
    Ok((ds, cfg))
}

fn out_dir(cfg: &RunConfig) -> String {
    cfg.resolved_output_dir().display().to_string()
}

fn compare(args: &CompareArgs) -> Result<(), DataError> {
    let mut all = Vec::new();
    for root in &args.runs {
        let mut reports = import_reports(std::slice::from_ref(root))?;
        if args.runs.len() > 1 {
            let tag = run_tag(root);
            for r in &mut reports {
                r.method = format!("{tag}/{}", r.method);
            }
        }
        all.extend(reports);
    }
    if all.is_empty() {
        return Err(DataError::Config("no metric reports found".into()));
    }
    let ranked = compare_methods(all);
    print_table(&ranked);
    if let Some(out) = &args.out {
        write_report_csv(&ranked, out).map_err(|e| DataError::Stage {
            stage: "compare",
            msg: e.to_string(),
        })?;
    }
    Ok(())
}

fn run_tag(root: &Path) -> String {
    root.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| root.display().to_string())
}

fn execute(cli: &Cli) -> Result<(), DataError> {
    match &cli.command {
        Command::Synth(args) => {
            let ds = synth_generate(&args.resolve()?)?;
            ds.save(&args.out)?;
            out!("wrote {} cores to {}", ds.cores.len(), args.out.display());
        }
        Command::BuildGraph(args) => {
            let (ds, cfg) = with_dataset(args)?;
            let graphs = stage_build_graphs(&ds, &cfg)?;
            for g in &graphs {
                out!(
                    "{}: {} nodes, {} spatial edges, {} cross-scale edges",
                    g.core_id,
                    g.nodes.len(),
                    g.spatial_edges.len(),
                    g.cross_edges.len()
                );
            }
        }
        Command::TrainMil(args) => {
            let (ds, cfg) = with_dataset(args)?;
            let h = stage_train_mil(&ds, &cfg)?;
            out!("stage 1: {} epochs, best validation loss {:.6} ({})", h.epochs.len(), h.best_val_loss, out_dir(&cfg));
        }
        Command::TrainSsl(args) => {
            let (ds, cfg) = with_dataset(args)?;
            let h = stage_train_ssl(&ds, &cfg)?;
            out!("stage 2: {} epochs, best validation loss {:.6} ({})", h.epochs.len(), h.best_val_loss, out_dir(&cfg));
        }
        Command::Saliency(args) => {
            let (ds, cfg) = with_dataset(args)?;
            let maps = stage_saliency(&ds, &cfg)?;
            out!("wrote maps for {} cores under {}", maps.len(), out_dir(&cfg));
        }
        Command::Eval(args) => {
            let (ds, cfg) = with_dataset(args)?;
            print_table(&stage_eval(&ds, &cfg)?);
        }
        Command::Compare(args) => compare(args)?,
        Command::Run(args) => {
            let (ds, cfg) = with_dataset(args)?;
            let summary = run_pipeline(&ds, &cfg)?;
            if let Some(a) = summary.stage1_auroc {
                log::info!("stage 1 bag AUROC {a:.4}");
            }
            print_table(&summary.reports);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
