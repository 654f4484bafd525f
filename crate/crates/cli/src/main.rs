use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use hvcm::attributes::{ProjectionHead, StatsMode};
use hvcm::density::{load_model, save_model, Embedding, HvcmModel, ModelConfig, RidgePolicy};
use hvcm::eval::{self, ScoreSet};
use hvcm::features::{load_features, save_features, validate, FeatureDataset, FeatureFormat};
use hvcm::io_util::write_atomic;
use hvcm::synthetic::{block_covariance_task, separable_blobs, BlobConfig, BlockConfig};
use hvcm::trainer::{train, StepRecord, TrainConfig};
use hvcm::HvcmError;

/// Out-of-distribution detection with grouped per-class Gaussian densities.
#[derive(Debug, Parser)]
#[command(name = "hvcm", version)]
struct Cli {
    /// Use fixed-order reductions so repeated runs are bit-identical.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Seed for every random choice a subcommand makes.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Raw,
    Softmax,
}

impl From<Mode> for StatsMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Raw => StatsMode::Raw,
            Mode::Softmax => StatsMode::Softmax,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Task {
    /// 2-D separable blobs plus a distant OOD blob.
    Blobs,
    /// Block-diagonal covariance classes with shifted OOD rows.
    Blocks,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit per-class group densities from labeled features.
    Fit {
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 32)]
        groups: usize,
        /// Fixed ridge added to every covariance (default: scaled to the trace).
        #[arg(long)]
        ridge: Option<f64>,
        #[arg(long, value_enum, default_value_t = Mode::Raw)]
        stats_mode: Mode,
        /// `uniform`, or a JSON file holding one weight row per class.
        #[arg(long, default_value = "uniform")]
        weights: String,
        /// Project features to this many dimensions with a seeded Gaussian head.
        #[arg(long)]
        attr_dim: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score features against a model.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Append one column per class.
        #[arg(long)]
        per_class: bool,
    },
    /// AUROC, FPR at a TPR target, and a threshold sweep from two score files.
    Eval {
        #[arg(long)]
        ind: PathBuf,
        #[arg(long)]
        ood: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        tpr: f64,
        #[arg(long, default_value_t = 101)]
        sweep: usize,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the pooled `score,is_ind` dump here.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Train the toy encoder and export a model.
    TrainToy {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank candidate classes near to far from the in-distribution centers.
    RankOod {
        #[arg(long)]
        ind_model: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long, default_value_t = 9)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Nearest-center cosine classification.
    Classify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Store a threshold accepting `tpr` of held-out in-distribution rows.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        tpr: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a feature file for non-finite values and bad labels.
    Validate {
        #[arg(long)]
        features: PathBuf,
    },
    /// Write a synthetic task as `train`, `test_ind`, and `test_ood` files.
    Synth {
        #[arg(long, value_enum, default_value_t = Task::Blobs)]
        task: Task,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    Core(HvcmError),
    Usage(String),
}

impl From<HvcmError> for CliError {
    fn from(e: HvcmError) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(HvcmError::DegenerateFit { .. }) => 3,
            CliError::Core(HvcmError::Diverged { .. }) => 4,
            _ => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => e.fmt(f),
            CliError::Usage(m) => f.write_str(m),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn configure_threads() -> CliResult {
    let Ok(raw) = std::env::var("HVCM_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("HVCM_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn run(cli: Cli) -> CliResult {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Fit {
            features,
            groups,
            ridge,
            stats_mode,
            weights,
            attr_dim,
            out,
        } => cmd_fit(&features, groups, ridge, stats_mode.into(), &weights, attr_dim, seed, &out),
        Command::Score {
            model,
            features,
            out,
            per_class,
        } => cmd_score(&model, &features, &out, per_class),
        Command::Eval {
            ind,
            ood,
            tpr,
            sweep,
            out,
            dump,
        } => cmd_eval(&ind, &ood, tpr, sweep, out.as_deref(), dump.as_deref()),
        Command::TrainToy {
            features,
            config,
            log,
            out,
        } => cmd_train_toy(&features, config.as_deref(), cli.seed, cli.deterministic, &log, &out),
        Command::RankOod {
            ind_model,
            candidates,
            bins,
            out,
        } => cmd_rank_ood(&ind_model, &candidates, bins, &out),
        Command::Classify { model, features, out } => cmd_classify(&model, &features, &out),
        Command::Calibrate {
            model,
            features,
            tpr,
            out,
        } => cmd_calibrate(&model, &features, tpr, &out),
        Command::Validate { features } => cmd_validate(&features),
        Command::Synth { task, out_dir } => cmd_synth(task, seed, &out_dir),
    }
}

fn read_features(path: &Path) -> CliResult<FeatureDataset> {
    Ok(load_features(path, FeatureFormat::from_path(path))?)
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report types serialize") + "\n"
}

#[allow(clippy::too_many_arguments)]
fn cmd_fit(
    features: &Path,
    groups: usize,
    ridge: Option<f64>,
    stats_mode: StatsMode,
    weights: &str,
    attr_dim: Option<usize>,
    seed: u64,
    out: &Path,
) -> CliResult {
    let ds = read_features(features)?;
    if ds.labels.is_none() {
        return Err(CliError::Usage(format!("{}: fit needs labeled features", features.display())));
    }
    let head = match attr_dim {
        Some(q) => {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            ProjectionHead::random(ds.dim, q, &mut rng)
        }
        None => ProjectionHead::identity(ds.dim),
    };
    let config = ModelConfig {
        groups,
        ridge_policy: ridge.map_or_else(RidgePolicy::default, |value| RidgePolicy::Fixed { value }),
        stats_mode,
    };
    let rows: Option<Vec<Vec<f64>>> = match weights {
        "uniform" => None,
        path => Some(
            serde_json::from_str(&read_text(Path::new(path))?)
                .map_err(|e| CliError::Usage(format!("{path}: expected a JSON array of weight rows: {e}")))?,
        ),
    };
    let model = HvcmModel::fit_dataset(&ds, rows.as_deref(), config, Embedding::from_head(head))?;
    save_model(&model, out)?;
    for class in &model.classes {
        let ridges: Vec<String> = class.components.iter().map(|c| format!("{:.3e}", c.ridge())).collect();
        println!("class {}: n = {}, ridge = [{}]", class.class_id, class.count, ridges.join(", "));
    }
    Ok(())
}

fn score_rows(model: &HvcmModel, ds: &FeatureDataset) -> CliResult<Vec<hvcm::density::SampleScore>> {
    use rayon::prelude::*;
    if model.input_dim() != ds.dim {
        return Err(HvcmError::DimensionMismatch {
            expected: model.input_dim(),
            got: ds.dim,
        }
        .into());
    }
    Ok((0..ds.len())
        .into_par_iter()
        .map(|i| model.score_feature(&ds.row_f64(i)))
        .collect::<Result<Vec<_>, _>>()?)
}

fn cmd_score(model_path: &Path, features: &Path, out: &Path, per_class: bool) -> CliResult {
    let model = load_model(model_path)?;
    let ds = read_features(features)?;
    let scores = score_rows(&model, &ds)?;
    let mut text = String::from("index,score,argmax_class");
    if per_class {
        for c in 0..model.class_count() {
            write!(text, ",class_{c}").unwrap();
        }
    }
    text.push('\n');
    for (i, s) in scores.iter().enumerate() {
        write!(text, "{i},{},{}", s.score, s.class).unwrap();
        if per_class {
            for v in &s.per_class {
                write!(text, ",{v}").unwrap();
            }
        }
        text.push('\n');
    }
    write_atomic(out, text.as_bytes())?;
    Ok(())
}

fn cmd_eval(ind: &Path, ood: &Path, tpr: f64, steps: usize, out: Option<&Path>, dump: Option<&Path>) -> CliResult {
    let set = ScoreSet::new(eval::read_score_column(ind)?, eval::read_score_column(ood)?)?;
    let report = eval::evaluate(&set, tpr, steps)?;
    let json = to_json(&report);
    if let Some(path) = out {
        write_atomic(path, json.as_bytes())?;
    }
    if let Some(path) = dump {
        eval::write_score_dump(&set, path)?;
    }
    print!("{json}");
    Ok(())
}

fn cmd_train_toy(
    features: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    deterministic: bool,
    log: &Path,
    out: &Path,
) -> CliResult {
    let mut cfg = match config {
        Some(path) => TrainConfig::from_json(&read_text(path)?)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let ds = read_features(features)?;
    let mut lines = String::new();
    let mut first_last: Option<(f64, f64)> = None;
    let result = train(&ds, &cfg, deterministic, |r: &StepRecord| {
        lines.push_str(&serde_json::to_string(r).expect("step records serialize"));
        lines.push('\n');
        let first = first_last.map_or(r.loss_total, |fl| fl.0);
        first_last = Some((first, r.loss_total));
        Ok(())
    });
    // the log is kept even when training diverges
    write_atomic(log, lines.as_bytes())?;
    let state = result?;
    let model = state.export_to_density(&ds)?;
    save_model(&model, out)?;
    if let Some((first, last)) = first_last {
        println!("steps = {}, loss {first:.6} -> {last:.6}", state.step);
    }
    Ok(())
}

/// Mean prepared attribute of every candidate class present in `ds`.
fn class_means(model: &HvcmModel, ds: &FeatureDataset) -> CliResult<BTreeMap<i64, Vec<f64>>> {
    let labels = ds
        .labels
        .as_ref()
        .ok_or_else(|| CliError::Usage("candidate features must be labeled by class".into()))?;
    let mut sums: BTreeMap<i64, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, &label) in labels.iter().enumerate() {
        if label < 0 {
            continue;
        }
        let a = model.prepare(&ds.row_f64(i))?.concat();
        let entry = sums.entry(i64::from(label)).or_insert_with(|| (vec![0.0; a.len()], 0));
        entry.0.iter_mut().zip(&a).for_each(|(s, v)| *s += v);
        entry.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(k, (s, n))| (k, s.into_iter().map(|v| v / n as f64).collect()))
        .collect())
}

fn cmd_rank_ood(ind_model: &Path, candidates: &Path, bins: usize, out: &Path) -> CliResult {
    let model = load_model(ind_model)?;
    let ds = read_features(candidates)?;
    let means = class_means(&model, &ds)?;
    let ranking = eval::rank_ood_classes(&model.class_centers(), &means, bins)?;
    write_atomic(out, to_json(&ranking).as_bytes())?;
    for (b, members) in ranking.bins.iter().enumerate() {
        println!("bin {}: {} classes", b + 1, members.len());
    }
    Ok(())
}

fn cmd_classify(model_path: &Path, features: &Path, out: &Path) -> CliResult {
    use rayon::prelude::*;
    let model = load_model(model_path)?;
    let ds = read_features(features)?;
    if model.input_dim() != ds.dim {
        return Err(HvcmError::DimensionMismatch {
            expected: model.input_dim(),
            got: ds.dim,
        }
        .into());
    }
    let preds = (0..ds.len())
        .into_par_iter()
        .map(|i| model.classify_feature(&ds.row_f64(i)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut text = String::from("index,predicted_class\n");
    for (i, p) in preds.iter().enumerate() {
        writeln!(text, "{i},{p}").unwrap();
    }
    write_atomic(out, text.as_bytes())?;
    if let Some(labels) = &ds.labels {
        let scored: Vec<(usize, i32)> = preds.iter().copied().zip(labels.iter().copied()).filter(|(_, l)| *l >= 0).collect();
        if !scored.is_empty() {
            let correct = scored.iter().filter(|(p, l)| *p as i32 == *l).count();
            println!("accuracy = {:.6} ({correct}/{})", correct as f64 / scored.len() as f64, scored.len());
        }
    }
    Ok(())
}

fn cmd_calibrate(model_path: &Path, features: &Path, tpr: f64, out: &Path) -> CliResult {
    let mut model = load_model(model_path)?;
    let ds = read_features(features)?;
    let scores: Vec<f64> = score_rows(&model, &ds)?.iter().map(|s| s.score).collect();
    let gamma = eval::calibrate_threshold(&scores, tpr)?;
    model.threshold = Some(gamma);
    save_model(&model, out)?;
    println!("threshold = {gamma}");
    Ok(())
}

fn cmd_validate(features: &Path) -> CliResult {
    let ds = read_features(features)?;
    let report = validate(&ds);
    print!("{}", to_json(&report));
    if report.is_clean() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{} defective rows", report.defect_count())))
    }
}

fn cmd_synth(task: Task, seed: u64, out_dir: &Path) -> CliResult {
    let split = match task {
        Task::Blobs => separable_blobs(&BlobConfig::default(), seed)?,
        Task::Blocks => block_covariance_task(&BlockConfig::default(), seed)?,
    };
    std::fs::create_dir_all(out_dir).map_err(HvcmError::from)?;
    for (name, ds) in [("train", &split.train), ("test_ind", &split.test_ind), ("test_ood", &split.test_ood)] {
        save_features(ds, out_dir.join(format!("{name}.hvcf")))?;
    }
    println!("wrote {} train, {} held-out, {} ood rows", split.train.len(), split.test_ind.len(), split.test_ood.len());
    Ok(())
}
