//! `graspdet`: dataset statistics, splits, augmentation previews, training,
//! evaluation, prediction, overlays, gradient checks and synthetic data.
//!
//! Exit codes: 0 success, 1 check failure, 2 data error, 3 training
//! divergence, 64 usage error.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use grasp_core::config::ExperimentConfig;
use grasp_core::dataset::{load_dataset, make_split, GraspExample, LoadedDataset, SplitMode, SplitPlan};
use grasp_core::geometry::GraspRect;
use grasp_core::heads::{
    evaluate_predictor, gradcheck_suite, history_lines, run_cross_validation, train, GraspPredictor, HeadSpec,
    NetworkPredictor, OraclePredictor, OracleTrainer, Prediction, TrainJob, TrainedModel, GRADCHECK_TOLERANCE,
};
use grasp_core::metrics::{markdown_table, point_metric, EvalReport, FoldResult, MetricConfig, TableRow};
use grasp_core::nn::{load_checkpoint, save_checkpoint, Mutation};
use grasp_core::preprocess::{augment_one, source_image, AugmentConfig};
use grasp_core::render::{draw_grasp, render_overlay, rgd_preview, GT_EDGE, GT_PLATE};
use grasp_core::synth::{generate_dataset, parse_mix, write_cornell_format, ShapeKind};

const EXIT_CHECK: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_USAGE: u8 = 64;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Check(String),
    Data(String),
    Diverged(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Check(_) => EXIT_CHECK,
            CliError::Data(_) => EXIT_DATA,
            CliError::Diverged(_) => EXIT_DIVERGED,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Check(m) | CliError::Data(m) | CliError::Diverged(m) => m,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "graspdet", version, about = "Grasp rectangle detection toolkit")]
struct Cli {
    /// Seed for splits, augmentation, initialization and synthetic data.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Dataset root in the Cornell layout.
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Experiment file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Object category CSV; defaults to `labels.csv` in the data root when present.
    #[arg(long, global = true)]
    labels: Option<PathBuf>,
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print dataset counts.
    Stats,
    /// Write a k-fold split plan.
    Split(SplitArgs),
    /// Write augmented sample previews with their grasps.
    Augment(AugmentArgs),
    /// Train a network on one fold (or on every example).
    Train(TrainArgs),
    /// Score a checkpoint or the oracle on held-out examples.
    Eval(EvalArgs),
    /// Write source-frame predictions for examples.
    Predict(PredictArgs),
    /// Draw ground-truth and predicted grasps over the RGB images.
    Render(RenderArgs),
    /// Compare backprop gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    mode: Option<SplitMode>,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    /// Comma-separated example ids.
    #[arg(long, value_delimiter = ',')]
    ids: Vec<String>,
    /// Samples per example.
    #[arg(long, default_value_t = 4)]
    count: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// direct | regression-classification[:C] | multigrasp[:N]
    #[arg(long)]
    head: HeadSpec,
    #[arg(long)]
    split_file: Option<PathBuf>,
    #[arg(long, requires = "split_file")]
    fold: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricKind {
    Rectangle,
    Point,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Predict a seeded ground-truth grasp instead of running a network.
    #[arg(long)]
    oracle: bool,
    /// Expected head; the checkpoint must match the network it implies.
    #[arg(long)]
    head: Option<HeadSpec>,
    #[arg(long)]
    split_file: PathBuf,
    /// Held-out fold; every fold when omitted.
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long, value_enum, default_value = "rectangle")]
    metric: MetricKind,
    /// Center-distance threshold in pixels for the point metric.
    #[arg(long)]
    point_threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated example ids; every example when omitted.
    #[arg(long, value_delimiter = ',')]
    ids: Vec<String>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// Comma-separated example ids.
    #[arg(long, value_delimiter = ',')]
    ids: Vec<String>,
    /// Predictions written by `predict`.
    #[arg(long)]
    pred_file: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value = "tiny")]
    preset: String,
    /// Test hook: ReLU backward passes gradients through unmasked.
    #[arg(long)]
    mutate: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    count: usize,
    /// Relative weights bar:disc:ell.
    #[arg(long, default_value = "1:1:1")]
    mix: String,
    /// Bars are graspable only near their ends.
    #[arg(long)]
    two_cluster: bool,
    /// Square image size in pixels.
    #[arg(long, default_value_t = 128)]
    size: usize,
}

/// One example's predictions in its source image frame.
#[derive(Debug, Serialize, Deserialize)]
struct PredictionRecord {
    grasp: GraspRect,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    category: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    ranked: Vec<(GraspRect, f64)>,
}

struct Ctx {
    seed: u64,
    data_root: Option<PathBuf>,
    out: Option<PathBuf>,
    labels: Option<PathBuf>,
    config: ExperimentConfig,
    config_source: Option<String>,
}

impl Ctx {
    fn out_dir(&self) -> CliResult<&Path> {
        let p = self.out.as_deref().ok_or_else(|| CliError::Usage("--out is required for this command".into()))?;
        fs::create_dir_all(p).map_err(data_err)?;
        Ok(p)
    }

    fn root(&self) -> CliResult<&Path> {
        self.data_root.as_deref().ok_or_else(|| CliError::Usage("--data-root is required for this command".into()))
    }

    fn load(&self) -> CliResult<LoadedDataset> {
        let root = self.root()?;
        let default_labels = root.join("labels.csv");
        let labels = self.labels.clone().or_else(|| default_labels.is_file().then_some(default_labels));
        load_dataset(root, labels.as_deref()).map_err(|e| CliError::Data(format!("cannot load {}: {e}", root.display())))
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let p = self.out_dir()?.join(name);
        fs::write(&p, contents).map_err(data_err)?;
        Ok(p)
    }

    /// Echoes the effective settings next to the command's outputs.
    fn echo_config(&self, command: &str) -> CliResult<()> {
        let mut text = format!("# graspdet {command}\n# seed = {}\n", self.seed);
        if let Some(src) = &self.config_source {
            text.push_str("# --- config file ---\n");
            for line in src.lines() {
                text.push_str(&format!("# {line}\n"));
            }
            text.push_str("# --- effective ---\n");
        }
        text.push_str(&self.config.to_text());
        self.write("effective.conf", text)?;
        Ok(())
    }

    fn vocabulary(&self, ds: &LoadedDataset) -> Vec<String> {
        ds.labels.as_ref().map(|l| l.vocabulary.clone()).unwrap_or_default()
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let (config, config_source) = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?;
            let c = ExperimentConfig::from_text(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            (c, Some(text))
        }
        None => (ExperimentConfig::default(), None),
    };
    let mut ctx = Ctx { seed: cli.seed, data_root: cli.data_root, out: cli.out, labels: cli.labels, config, config_source };
    ctx.config.train.seed = cli.seed;
    match cli.command {
        Command::Stats => cmd_stats(&ctx),
        Command::Split(a) => cmd_split(&ctx, a),
        Command::Augment(a) => cmd_augment(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Predict(a) => cmd_predict(&ctx, a),
        Command::Render(a) => cmd_render(&ctx, a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(&ctx, a),
    }
}

fn cmd_stats(ctx: &Ctx) -> CliResult<()> {
    let ds = ctx.load()?;
    let s = &ds.summary;
    println!("images: {}, objects: {}", s.images, s.objects);
    println!("grasps: {}", s.grasps);
    println!("skipped rectangles: {}", s.skipped_rectangles);
    println!("rejected examples: {}", s.rejected_examples);
    if let Some(h) = &s.category_histogram {
        for (c, n) in h {
            println!("category {c}: {n}");
        }
    }
    if ctx.out.is_some() {
        ctx.write("stats.json", serde_json::to_string_pretty(s).expect("summary serializes") + "\n")?;
    }
    Ok(())
}

fn cmd_split(ctx: &Ctx, a: SplitArgs) -> CliResult<()> {
    let ds = ctx.load()?;
    let mode = a.mode.unwrap_or(ctx.config.split_mode);
    let k = a.k.unwrap_or(ctx.config.k);
    let plan = make_split(&ds.examples, mode, k, ctx.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    check_split(&ds, &plan)?;
    let p = ctx.write("split.json", plan.to_json() + "\n")?;
    info!("{} folds written to {}", plan.k, p.display());
    Ok(())
}

/// Folds partition the examples, and object-wise folds share no object.
fn check_split(ds: &LoadedDataset, plan: &SplitPlan) -> CliResult<()> {
    let all: BTreeSet<&str> = plan.folds.iter().flatten().map(|s| s.as_str()).collect();
    let total: usize = plan.folds.iter().map(|f| f.len()).sum();
    if total != all.len() || all.len() != ds.examples.len() {
        return Err(CliError::Check("split is not a partition of the examples".into()));
    }
    if plan.mode == SplitMode::ObjectWise {
        let mut owner: BTreeMap<u32, usize> = BTreeMap::new();
        for (f, ids) in plan.folds.iter().enumerate() {
            for id in ids {
                let obj = ds.get(id).map(|e| e.object_id).ok_or_else(|| CliError::Check(format!("unknown id {id}")))?;
                if *owner.entry(obj).or_insert(f) != f {
                    return Err(CliError::Check(format!("object {obj} appears in more than one fold")));
                }
            }
        }
    }
    Ok(())
}

fn cmd_augment(ctx: &Ctx, a: AugmentArgs) -> CliResult<()> {
    let ds = ctx.load()?;
    let out = ctx.out_dir()?.to_path_buf();
    let aug = AugmentConfig { count_per_image: a.count.max(1) as usize, ..ctx.config.augment };
    for id in &a.ids {
        let Some(ex) = ds.get(id) else {
            warn!("unknown example {id}; skipped");
            continue;
        };
        let src = source_image(ex).map_err(data_err)?;
        for i in 0..a.count {
            match augment_one(ex, &src, &aug, ctx.seed, i) {
                Ok(s) => {
                    let mut img = rgd_preview(&s.image, aug.mean_offset);
                    for g in &s.grasps {
                        draw_grasp(&mut img, g, GT_PLATE, GT_EDGE);
                    }
                    img.save(out.join(format!("{id}_{i}.png"))).map_err(data_err)?;
                }
                Err(e) => warn!("{e}"),
            }
        }
    }
    ctx.echo_config("augment")?;
    Ok(())
}

fn read_split(path: &Path) -> CliResult<SplitPlan> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    SplitPlan::from_json(&text).map_err(data_err)
}

fn lookup<'a>(ds: &'a LoadedDataset, ids: &[String]) -> CliResult<Vec<&'a GraspExample>> {
    ids.iter().map(|id| ds.get(id).ok_or_else(|| CliError::Data(format!("split references unknown example {id}")))).collect()
}

fn fold_index(plan: &SplitPlan, fold: usize) -> CliResult<usize> {
    if fold >= plan.k {
        return Err(CliError::Usage(format!("fold {fold} out of range for k = {}", plan.k)));
    }
    Ok(fold)
}

fn cmd_train(ctx: &Ctx, a: TrainArgs) -> CliResult<()> {
    let ds = ctx.load()?;
    let (train_set, held_out, fold) = match &a.split_file {
        Some(p) => {
            let plan = read_split(p)?;
            let f = fold_index(&plan, a.fold.unwrap_or(0))?;
            (lookup(&ds, &plan.train_ids(f))?, lookup(&ds, plan.test_ids(f))?, Some(f))
        }
        None => (ds.examples.iter().collect(), Vec::new(), None),
    };
    let vocabulary = ctx.vocabulary(&ds);
    if let HeadSpec::RegressionClassification { classes } = a.head {
        if !vocabulary.is_empty() && classes != vocabulary.len() {
            return Err(CliError::Usage(format!("head has {classes} classes but the labels define {}", vocabulary.len())));
        }
    }
    let job = TrainJob {
        network: ctx.config.network(a.head),
        train: &train_set,
        held_out: &held_out,
        vocabulary: &vocabulary,
        train_config: ctx.config.train,
        augment: ctx.config.augment,
        metric: ctx.config.metric,
        fold,
    };
    let out = ctx.out_dir()?.to_path_buf();
    ctx.echo_config("train")?;
    let (model, history) = match train(&job) {
        Ok(r) => r,
        Err(e) if e.is_divergence() => return Err(CliError::Diverged(e.to_string())),
        Err(e) => return Err(CliError::Data(e.to_string())),
    };
    ctx.write("history.jsonl", history_lines(&history))?;
    save_checkpoint(&model.network, &model.meta, &out.join("model.ckpt")).map_err(data_err)?;
    let losses: Vec<f64> = history.iter().filter(|h| h.split == "train").filter_map(|h| h.loss).collect();
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        info!("train loss {first:.6} -> {last:.6}");
    }
    Ok(())
}

fn load_model(ctx: &Ctx, path: &Path, head: Option<HeadSpec>) -> CliResult<TrainedModel> {
    let expected = head.map(|h| ctx.config.network(h));
    let (network, meta) = load_checkpoint(path, expected.as_ref()).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let model = TrainedModel { network, meta };
    if model.input_size() != ctx.config.augment.output_size {
        return Err(CliError::Data(format!(
            "checkpoint expects {} px inputs but augment.output_size is {}",
            model.input_size(),
            ctx.config.augment.output_size
        )));
    }
    Ok(model)
}

fn cmd_eval(ctx: &Ctx, a: EvalArgs) -> CliResult<()> {
    let mut metric: MetricConfig = ctx.config.metric;
    if let MetricKind::Point = a.metric {
        let t = a.point_threshold.or(metric.point_distance_threshold).ok_or_else(|| {
            CliError::Usage(
                "the point metric needs --point-threshold: earlier work that used it does not disclose its distance thresholds"
                    .into(),
            )
        })?;
        metric.point_distance_threshold = Some(t);
    }
    metric.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let ds = ctx.load()?;
    let plan = read_split(&a.split_file)?;
    let vocabulary = ctx.vocabulary(&ds);
    let folds: Vec<usize> = match a.fold {
        Some(f) => vec![fold_index(&plan, f)?],
        None => (0..plan.k).collect(),
    };

    let model = match &a.checkpoint {
        Some(p) => Some(load_model(ctx, p, a.head)?),
        None => None,
    };
    let oracle = OraclePredictor { seed: ctx.seed, vocabulary: vocabulary.clone() };
    let net_pred = model.as_ref().map(|m| NetworkPredictor { model: m, augment: ctx.config.augment });
    let predictor: &dyn GraspPredictor = match &net_pred {
        Some(p) => p,
        None => &oracle,
    };

    let report = if a.oracle && a.fold.is_none() && matches!(a.metric, MetricKind::Rectangle) {
        let trainer = OracleTrainer { seed: ctx.seed, vocabulary: vocabulary.clone() };
        run_cross_validation(&ds, &plan, &trainer, &vocabulary, &metric).map_err(data_err)?
    } else {
        let mut results = Vec::new();
        let mut cls = Vec::new();
        for &f in &folds {
            let test = lookup(&ds, plan.test_ids(f))?;
            let (mut fold, c) = evaluate_predictor(predictor, &test, &vocabulary, &metric).map_err(data_err)?;
            if let MetricKind::Point = a.metric {
                rescore_point(&mut fold, &test, &metric)?;
            }
            results.push(fold);
            cls.extend(c);
        }
        let categories = ds.labels.as_ref().map(|_| ds.category_map());
        let mut r = EvalReport::from_folds(plan.mode, results, categories.as_ref());
        if cls.len() == folds.len() && !cls.is_empty() {
            r.classification_fold_accuracies = Some(cls);
        }
        r
    };

    let name = model.as_ref().map_or_else(|| "oracle".to_string(), |m| m.head().to_string());
    let r = Some(&report);
    let row = match plan.mode {
        SplitMode::ImageWise => TableRow { algorithm: name, image_wise: r, object_wise: None, time_per_image: None },
        SplitMode::ObjectWise => TableRow { algorithm: name, image_wise: None, object_wise: r, time_per_image: None },
    };
    ctx.write("report.json", report.to_json() + "\n")?;
    ctx.write("report.md", markdown_table(&[row]))?;
    ctx.echo_config("eval")?;
    println!("mean accuracy: {:.4} over {} fold(s)", report.mean_accuracy, report.fold_accuracies.len());
    Ok(())
}

/// Replaces rectangle successes with point-metric outcomes.
fn rescore_point(fold: &mut FoldResult, examples: &[&GraspExample], metric: &MetricConfig) -> CliResult<()> {
    let mut hits = 0;
    for (rec, ex) in fold.records.iter_mut().zip(examples) {
        rec.success = match &rec.predicted {
            Some(p) => point_metric(p, &ex.positive_grasps, metric).map_err(|e| CliError::Usage(e.to_string()))?,
            None => false,
        };
        hits += rec.success as usize;
    }
    fold.accuracy = if fold.records.is_empty() { 0.0 } else { hits as f64 / fold.records.len() as f64 };
    Ok(())
}

fn cmd_predict(ctx: &Ctx, a: PredictArgs) -> CliResult<()> {
    let ds = ctx.load()?;
    let model = load_model(ctx, &a.checkpoint, None)?;
    let predictor = NetworkPredictor { model: &model, augment: ctx.config.augment };
    let vocabulary = ctx.vocabulary(&ds);
    let ids: Vec<String> = if a.ids.is_empty() { ds.examples.iter().map(|e| e.example_id.clone()).collect() } else { a.ids };
    let mut out = BTreeMap::new();
    for id in ids {
        let Some(ex) = ds.get(&id) else {
            warn!("unknown example {id}; skipped");
            continue;
        };
        let p = predictor.predict_source(ex).map_err(data_err)?;
        let category = p.category().map(|c| vocabulary.get(c).cloned().unwrap_or_else(|| c.to_string()));
        let ranked = match &p {
            Prediction::MultiGrasp(r) => r.iter().map(|g| (g.grasp, g.confidence)).collect(),
            _ => Vec::new(),
        };
        out.insert(id, PredictionRecord { grasp: p.top(), category, ranked });
    }
    ctx.write("predictions.json", serde_json::to_string_pretty(&out).expect("predictions serialize") + "\n")?;
    Ok(())
}

fn cmd_render(ctx: &Ctx, a: RenderArgs) -> CliResult<()> {
    if a.ids.is_empty() {
        info!("no ids given; nothing to render");
        return Ok(());
    }
    let ds = ctx.load()?;
    let preds: BTreeMap<String, PredictionRecord> = match &a.pred_file {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Data(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?
        }
        None => BTreeMap::new(),
    };
    let out = ctx.out_dir()?.to_path_buf();
    let mut unknown = Vec::new();
    for id in &a.ids {
        let Some(ex) = ds.get(id) else {
            unknown.push(id.clone());
            continue;
        };
        let predicted: Vec<GraspRect> = preds.get(id).map(|r| vec![r.grasp]).unwrap_or_default();
        let img = render_overlay(&ex.rgb, &ex.positive_grasps, &predicted);
        img.save(out.join(format!("{id}_overlay.png"))).map_err(data_err)?;
    }
    if !unknown.is_empty() {
        warn!("unknown ids skipped: {}", unknown.join(", "));
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult<()> {
    let mutation = a.mutate.then_some(Mutation::ReluPassThrough);
    let results = gradcheck_suite(&a.preset, mutation, 0).map_err(|e| CliError::Usage(e.to_string()))?;
    println!("{:<40} {:>5} {:<8} {:>12}", "network", "layer", "type", "max rel err");
    let mut failures = Vec::new();
    for (name, r) in &results {
        for (layer, kind, err) in &r.per_layer {
            println!("{name:<40} {layer:>5} {kind:<8} {err:>12.3e}");
            if !(*err < GRADCHECK_TOLERANCE) {
                failures.push(format!("{name} layer {layer} ({kind}): {err:.3e}"));
            }
        }
    }
    if failures.is_empty() {
        println!("all gradients within {GRADCHECK_TOLERANCE:e}");
        Ok(())
    } else {
        Err(CliError::Check(format!("gradient check failed: {}", failures.join("; "))))
    }
}

fn cmd_synth(ctx: &Ctx, a: SynthArgs) -> CliResult<()> {
    let w = parse_mix(&a.mix).map_err(CliError::Usage)?;
    if a.count == 0 {
        return Err(CliError::Usage("--count must be positive".into()));
    }
    let bar = if a.two_cluster { ShapeKind::BarEnds } else { ShapeKind::Bar };
    let kinds = [(bar, w[0]), (ShapeKind::Disc, w[1]), (ShapeKind::Ell, w[2])];
    let examples = generate_dataset(a.count, &kinds, a.size, a.size, ctx.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let out = ctx.out_dir()?;
    write_cornell_format(&examples, out).map_err(data_err)?;
    println!("images: {}", examples.len());
    Ok(())
}
