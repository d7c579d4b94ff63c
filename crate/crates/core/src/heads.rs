//! Output heads, their targets and decoders, the training loop, and k-fold
//! cross-validation.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{GraspExample, LoadedDataset, SplitPlan};
use crate::geometry::{decode_angle, encode_angle, AngleCode, GraspRect, Similarity};
use crate::grid::{decode_predictions, encode_targets, multigrasp_loss, GridError, RankedGrasp, CHANNELS, MIN_DECODED_EXTENT};
use crate::metrics::{classification_accuracy, evaluate_fold, EvalReport, FoldResult, MetricConfig, MetricError};
use crate::nn::{
    grad_check, mse, softmax, softmax_cross_entropy, CheckpointMeta, GradCheckReport, LayerSpec, Mode, Mutation, Network,
    NetworkConfig, NnError, Tensor, TrainConfig,
};
use crate::preprocess::{augment_one, preprocess_test, source_image, AugmentConfig, PreprocessError, RgdImage};

pub const DIRECT_OUTPUTS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadSpec {
    /// `(x, y, h, w, sin 2θ, cos 2θ)`
    Direct,
    /// The direct outputs followed by one logit per class.
    RegressionClassification { classes: usize },
    /// `grid x grid x 7` cell predictions.
    MultiGrasp { grid: usize },
}

impl HeadSpec {
    pub fn output_dim(&self) -> usize {
        match *self {
            HeadSpec::Direct => DIRECT_OUTPUTS,
            HeadSpec::RegressionClassification { classes } => DIRECT_OUTPUTS + classes,
            HeadSpec::MultiGrasp { grid } => grid * grid * CHANNELS,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            HeadSpec::Direct => "direct",
            HeadSpec::RegressionClassification { .. } => "regression-classification",
            HeadSpec::MultiGrasp { .. } => "multigrasp",
        }
    }
}

impl fmt::Display for HeadSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadSpec::Direct => write!(f, "direct"),
            HeadSpec::RegressionClassification { classes } => write!(f, "regression-classification:{classes}"),
            HeadSpec::MultiGrasp { grid } => write!(f, "multigrasp:{grid}"),
        }
    }
}

/// `direct`, `regression-classification[:C]` (default 16 classes) or
/// `multigrasp[:N]` (default 7).
impl FromStr for HeadSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = |default: usize| -> Result<usize, String> {
            match arg {
                None => Ok(default),
                Some(a) => a.parse::<usize>().ok().filter(|v| *v > 0).ok_or_else(|| format!("bad head parameter {a:?}")),
            }
        };
        match name {
            "direct" if arg.is_none() => Ok(HeadSpec::Direct),
            "regression-classification" | "regression_classification" | "regcls" => {
                Ok(HeadSpec::RegressionClassification { classes: num(16)? })
            }
            "multigrasp" => Ok(HeadSpec::MultiGrasp { grid: num(7)? }),
            _ => Err(format!("unknown head {s:?} (expected direct, regression-classification[:C] or multigrasp[:N])")),
        }
    }
}

#[derive(Debug, Error)]
pub enum HeadError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("{0}")]
    Invalid(String),
}

impl HeadError {
    pub fn is_divergence(&self) -> bool {
        matches!(self, HeadError::Divergence(_) | HeadError::Nn(NnError::Divergence(_)))
    }
}

/// Network-frame 6-vector of a grasp: positions and extents divided by the
/// input size, angle as `(sin 2θ, cos 2θ)`.
pub fn direct_vector(g: &GraspRect, input_size: f64) -> [f64; 6] {
    let a = encode_angle(g.theta);
    [g.x / input_size, g.y / input_size, g.h / input_size, g.w / input_size, a.s, a.c]
}

/// Inverse of [`direct_vector`]; extents are floored at one pixel.
pub fn decode_direct(v: &[f64], input_size: f64) -> GraspRect {
    GraspRect {
        x: v[0] * input_size,
        y: v[1] * input_size,
        theta: decode_angle(AngleCode { s: v[4], c: v[5] }),
        h: (v[2] * input_size).max(MIN_DECODED_EXTENT),
        w: (v[3] * input_size).max(MIN_DECODED_EXTENT),
    }
}

/// A uniformly chosen grasp, encoded for the direct head.
pub fn direct_target<R: Rng + ?Sized>(grasps: &[GraspRect], input_size: f64, rng: &mut R) -> Result<[f64; 6], HeadError> {
    let g = grasps.choose(rng).ok_or_else(|| HeadError::Invalid("no grasps to sample a target from".into()))?;
    Ok(direct_vector(g, input_size))
}

/// `mse(out[..6], target) + weight * cross_entropy(out[6..], class)`; the class
/// term is skipped when the class is unknown.
pub fn combined_loss(output: &[f64], target: &[f64; 6], class: Option<usize>, weight: f64) -> Result<(f64, Vec<f64>), HeadError> {
    let (l, g) = mse(&output[..DIRECT_OUTPUTS], target)?;
    let mut grad = g;
    grad.resize(output.len(), 0.0);
    let mut loss = l;
    if let Some(c) = class {
        let (lc, gc) = softmax_cross_entropy(&output[DIRECT_OUTPUTS..], c)?;
        loss += weight * lc;
        for (d, v) in grad[DIRECT_OUTPUTS..].iter_mut().zip(gc) {
            *d = weight * v;
        }
    }
    Ok((loss, grad))
}

/// Per-presentation loss: ground truths are re-sampled from `grasps` on every call.
pub fn sample_loss<R: Rng + ?Sized>(
    head: HeadSpec,
    output: &[f64],
    grasps: &[GraspRect],
    class: Option<usize>,
    input_size: f64,
    class_weight: f64,
    rng: &mut R,
) -> Result<(f64, Vec<f64>), HeadError> {
    match head {
        HeadSpec::Direct => Ok(mse(output, &direct_target(grasps, input_size, rng)?)?),
        HeadSpec::RegressionClassification { .. } => {
            combined_loss(output, &direct_target(grasps, input_size, rng)?, class, class_weight)
        }
        HeadSpec::MultiGrasp { grid } => {
            let t = encode_targets(grasps, grid, input_size, rng)?;
            Ok(multigrasp_loss(output, &t)?)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Prediction {
    Direct(GraspRect),
    RegressionClassification { grasp: GraspRect, category: usize, distribution: Vec<f64> },
    /// Ranked by confidence; the first entry is the designated grasp.
    MultiGrasp(Vec<RankedGrasp>),
}

impl Prediction {
    pub fn top(&self) -> GraspRect {
        match self {
            Prediction::Direct(g) => *g,
            Prediction::RegressionClassification { grasp, .. } => *grasp,
            Prediction::MultiGrasp(r) => r[0].grasp,
        }
    }

    pub fn category(&self) -> Option<usize> {
        match self {
            Prediction::RegressionClassification { category, .. } => Some(*category),
            _ => None,
        }
    }

    /// The same prediction with every grasp passed through `t`.
    pub fn map(&self, t: &Similarity) -> Prediction {
        match self {
            Prediction::Direct(g) => Prediction::Direct(t.apply_rect(g)),
            Prediction::RegressionClassification { grasp, category, distribution } => Prediction::RegressionClassification {
                grasp: t.apply_rect(grasp),
                category: *category,
                distribution: distribution.clone(),
            },
            Prediction::MultiGrasp(r) => {
                Prediction::MultiGrasp(r.iter().map(|g| RankedGrasp { grasp: t.apply_rect(&g.grasp), ..*g }).collect())
            }
        }
    }
}

/// Interprets raw network outputs for `head` on an `input_size` square input.
pub fn decode_output(head: HeadSpec, output: &[f64], input_size: f64) -> Result<Prediction, HeadError> {
    if output.len() != head.output_dim() {
        return Err(HeadError::Invalid(format!("{} outputs for a head expecting {}", output.len(), head.output_dim())));
    }
    Ok(match head {
        HeadSpec::Direct => Prediction::Direct(decode_direct(output, input_size)),
        HeadSpec::RegressionClassification { .. } => {
            let distribution = softmax(&output[DIRECT_OUTPUTS..]);
            let category = argmax(&distribution);
            Prediction::RegressionClassification { grasp: decode_direct(output, input_size), category, distribution }
        }
        HeadSpec::MultiGrasp { grid } => Prediction::MultiGrasp(decode_predictions(output, grid, input_size)?),
    })
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, x)| if *x > v[best] { i } else { best })
}

/// A network together with its training metadata.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub network: Network,
    pub meta: CheckpointMeta,
}

impl TrainedModel {
    pub fn head(&self) -> HeadSpec {
        self.network.config().head
    }

    pub fn input_size(&self) -> usize {
        self.network.config().input[1]
    }

    /// Eval-mode prediction on a mean-centered image of the network's input size.
    pub fn predict(&self, image: &RgdImage) -> Result<Prediction, HeadError> {
        let [_, h, w] = self.network.config().input;
        if image.width != w || image.height != h {
            return Err(HeadError::Invalid(format!(
                "image is {}x{}, network expects {w}x{h}",
                image.width, image.height
            )));
        }
        let out = self.network.forward_eval(&image.to_chw())?.output;
        decode_output(self.head(), &out, w as f64)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub epoch: usize,
    pub split: String,
    pub loss: Option<f64>,
    pub accuracy: Option<f64>,
}

pub fn history_lines(history: &[HistoryEntry]) -> String {
    history.iter().map(|h| serde_json::to_string(h).expect("history serializes") + "\n").collect()
}

/// Everything a predictor must provide for evaluation: a best grasp in the
/// example's own image frame and, for the combined head, a class index.
pub trait GraspPredictor: Sync {
    fn predict_example(&self, example: &GraspExample) -> Result<(GraspRect, Option<usize>), HeadError>;
}

/// Runs a trained network on the test view of an example and maps the top
/// grasp back into the source frame.
pub struct NetworkPredictor<'a> {
    pub model: &'a TrainedModel,
    pub augment: AugmentConfig,
}

impl NetworkPredictor<'_> {
    /// Full prediction in the example's source frame.
    pub fn predict_source(&self, example: &GraspExample) -> Result<Prediction, HeadError> {
        let source = source_image(example)?;
        let sample = preprocess_test(example, &source, &self.augment);
        Ok(self.model.predict(&sample.image)?.map(&sample.transform.inverse()))
    }
}

impl GraspPredictor for NetworkPredictor<'_> {
    fn predict_example(&self, example: &GraspExample) -> Result<(GraspRect, Option<usize>), HeadError> {
        let pred = self.predict_source(example)?;
        Ok((pred.top(), pred.category()))
    }
}

/// Returns a ground-truth grasp chosen by a per-example seed, and the true class.
pub struct OraclePredictor {
    pub seed: u64,
    pub vocabulary: Vec<String>,
}

impl GraspPredictor for OraclePredictor {
    fn predict_example(&self, example: &GraspExample) -> Result<(GraspRect, Option<usize>), HeadError> {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::preprocess::sample_seed(self.seed, &example.example_id, 0));
        let g = example
            .positive_grasps
            .choose(&mut rng)
            .ok_or_else(|| HeadError::Invalid(format!("example {} has no grasps", example.example_id)))?;
        let class = example.category.as_ref().and_then(|c| self.vocabulary.iter().position(|v| v == c));
        Ok((*g, class))
    }
}

/// Class index of an example under `vocabulary`, if labeled.
pub fn class_index(example: &GraspExample, vocabulary: &[String]) -> Option<usize> {
    example.category.as_ref().and_then(|c| vocabulary.iter().position(|v| v == c))
}

/// Detection records and, when any example is labeled, classification accuracy.
pub fn evaluate_predictor(
    predictor: &dyn GraspPredictor,
    examples: &[&GraspExample],
    vocabulary: &[String],
    metric: &MetricConfig,
) -> Result<(FoldResult, Option<f64>), HeadError> {
    let preds: Vec<(GraspRect, Option<usize>)> =
        examples.par_iter().map(|ex| predictor.predict_example(ex)).collect::<Result<_, _>>()?;
    let map: HashMap<String, GraspRect> =
        examples.iter().zip(&preds).map(|(ex, (g, _))| (ex.example_id.clone(), *g)).collect();
    let fold = evaluate_fold(&map, examples, metric)?;
    let (mut predicted, mut actual) = (Vec::new(), Vec::new());
    for (ex, (_, pc)) in examples.iter().zip(&preds) {
        if let (Some(truth), Some(p)) = (class_index(ex, vocabulary), pc) {
            predicted.push(*p);
            actual.push(truth);
        }
    }
    let cls = if actual.is_empty() { None } else { Some(classification_accuracy(&predicted, &actual)?) };
    Ok((fold, cls))
}

/// Accuracy of always answering the most common class.
pub fn majority_class_accuracy(categories: &[String]) -> Option<f64> {
    if categories.is_empty() {
        return None;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for c in categories {
        *counts.entry(c.as_str()).or_default() += 1;
    }
    let top = counts.values().copied().max().unwrap_or(0);
    Some(top as f64 / categories.len() as f64)
}

/// Source images are cached up to this many bytes; beyond that they are
/// rebuilt per sample.
const SOURCE_CACHE_BYTES: usize = 1 << 29;

struct Sources<'a> {
    examples: &'a [&'a GraspExample],
    cached: Option<Vec<RgdImage>>,
}

impl<'a> Sources<'a> {
    fn new(examples: &'a [&'a GraspExample]) -> Result<Self, HeadError> {
        let bytes: usize = examples.iter().map(|e| e.width() * e.height() * 3 * 4).sum();
        let cached = if bytes <= SOURCE_CACHE_BYTES {
            Some(examples.par_iter().map(|e| source_image(e)).collect::<Result<Vec<_>, _>>()?)
        } else {
            None
        };
        Ok(Sources { examples, cached })
    }

    fn get(&self, i: usize) -> Result<std::borrow::Cow<'_, RgdImage>, HeadError> {
        Ok(match &self.cached {
            Some(c) => std::borrow::Cow::Borrowed(&c[i]),
            None => std::borrow::Cow::Owned(source_image(self.examples[i])?),
        })
    }
}

/// Inputs for one training run.
pub struct TrainJob<'a> {
    pub network: NetworkConfig,
    pub train: &'a [&'a GraspExample],
    /// Scored with the rectangle metric after every epoch; may be empty.
    pub held_out: &'a [&'a GraspExample],
    /// Class names for the combined head, in logit order.
    pub vocabulary: &'a [String],
    pub train_config: TrainConfig,
    pub augment: AugmentConfig,
    pub metric: MetricConfig,
    pub fold: Option<usize>,
}

/// Minibatch SGD over `count_per_image` augmented samples of every training
/// example per epoch, in a freshly shuffled order each epoch. Batch gradients
/// are per-sample gradients summed in presentation order, then averaged.
pub fn train(job: &TrainJob<'_>) -> Result<(TrainedModel, Vec<HistoryEntry>), HeadError> {
    let cfg = job.train_config;
    cfg.validate()?;
    if job.train.is_empty() {
        return Err(HeadError::Invalid("no training examples".into()));
    }
    let [_, h, w] = job.network.input;
    if h != w || w != job.augment.output_size {
        return Err(HeadError::Invalid(format!(
            "network input {w}x{h} does not match augmentation output {}",
            job.augment.output_size
        )));
    }
    for ex in job.train {
        job.augment.validate(ex.width(), ex.height())?;
    }
    let head = job.network.head;
    let size = w as f64;
    let mut net = Network::new(job.network.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_7A1A_0000_0001);
    let sources = Sources::new(job.train)?;
    let classes: Vec<Option<usize>> = job.train.iter().map(|e| class_index(e, job.vocabulary)).collect();
    let mut history = Vec::new();
    let mut skipped = 0usize;

    let per_image = job.augment.count_per_image as u64;
    let mut order: Vec<(usize, u64)> =
        (0..job.train.len()).flat_map(|e| (0..per_image).map(move |k| (e, k))).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        let mut grads: Vec<Tensor> = zero_like(&net);
        let mut in_batch = 0usize;
        for (pos, &(ei, k)) in order.iter().enumerate() {
            let ex = job.train[ei];
            let src = sources.get(ei)?;
            let sample = match augment_one(ex, &src, &job.augment, cfg.seed, k) {
                Ok(s) => s,
                Err(PreprocessError::SampleSkipped { .. }) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            let pass = net.forward(&sample.image.to_chw(), Mode::Train, &mut rng)?;
            let (loss, gout) =
                sample_loss(head, &pass.output, &sample.grasps, classes[ei], size, cfg.class_loss_weight, &mut rng)?;
            if !loss.is_finite() {
                return Err(HeadError::Divergence(format!(
                    "epoch {epoch}: loss {loss} on example {} sample {k}",
                    ex.example_id
                )));
            }
            let g = net.backward(&pass, &gout)?;
            for (acc, gi) in grads.iter_mut().zip(&g.params) {
                acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, b)| *a += b);
            }
            epoch_loss += loss;
            seen += 1;
            in_batch += 1;
            if in_batch == cfg.batch_size || pos + 1 == order.len() {
                let inv = 1.0 / in_batch as f64;
                grads.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= inv));
                net.sgd_step(&grads, cfg.learning_rate, cfg.weight_decay)
                    .map_err(|e| HeadError::Divergence(format!("epoch {epoch}: {e}")))?;
                grads = zero_like(&net);
                in_batch = 0;
            }
        }
        if in_batch > 0 {
            let inv = 1.0 / in_batch as f64;
            grads.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= inv));
            net.sgd_step(&grads, cfg.learning_rate, cfg.weight_decay)
                .map_err(|e| HeadError::Divergence(format!("epoch {epoch}: {e}")))?;
        }
        let train_loss = if seen > 0 { Some(epoch_loss / seen as f64) } else { None };
        history.push(HistoryEntry { epoch, split: "train".into(), loss: train_loss, accuracy: None });
        if !job.held_out.is_empty() {
            let model = TrainedModel { network: net.clone(), meta: CheckpointMeta::default() };
            let predictor = NetworkPredictor { model: &model, augment: job.augment };
            let (fold, _) = evaluate_predictor(&predictor, job.held_out, job.vocabulary, &job.metric)?;
            history.push(HistoryEntry { epoch, split: "held_out".into(), loss: None, accuracy: Some(fold.accuracy) });
            info!("epoch {epoch}: train loss {:.6}, held-out accuracy {:.4}", train_loss.unwrap_or(f64::NAN), fold.accuracy);
        } else {
            info!("epoch {epoch}: train loss {:.6}", train_loss.unwrap_or(f64::NAN));
        }
    }
    if skipped > 0 {
        warn!("{skipped} augmented samples skipped (no grasp center inside the crop)");
    }
    let meta = CheckpointMeta { seed: cfg.seed, epochs_run: cfg.epochs, fold: job.fold, extra: Default::default() };
    Ok((TrainedModel { network: net, meta }, history))
}

fn zero_like(net: &Network) -> Vec<Tensor> {
    net.params().iter().map(|p| Tensor::zeros(p.shape())).collect()
}

/// Trains (or otherwise builds) a predictor for one fold.
pub trait FoldTrainer: Sync {
    fn fit(&self, fold: usize, train: &[&GraspExample], held_out: &[&GraspExample]) -> Result<Box<dyn GraspPredictor + '_>, HeadError>;
}

/// Trains a network per fold with shared settings.
pub struct NetworkTrainer {
    pub network: NetworkConfig,
    pub vocabulary: Vec<String>,
    pub train_config: TrainConfig,
    pub augment: AugmentConfig,
    pub metric: MetricConfig,
}

struct OwnedNetworkPredictor {
    model: TrainedModel,
    augment: AugmentConfig,
}

impl GraspPredictor for OwnedNetworkPredictor {
    fn predict_example(&self, example: &GraspExample) -> Result<(GraspRect, Option<usize>), HeadError> {
        NetworkPredictor { model: &self.model, augment: self.augment }.predict_example(example)
    }
}

impl FoldTrainer for NetworkTrainer {
    fn fit(&self, fold: usize, train_set: &[&GraspExample], _held_out: &[&GraspExample]) -> Result<Box<dyn GraspPredictor + '_>, HeadError> {
        let job = TrainJob {
            network: self.network.clone(),
            train: train_set,
            held_out: &[],
            vocabulary: &self.vocabulary,
            train_config: self.train_config,
            augment: self.augment,
            metric: self.metric,
            fold: Some(fold),
        };
        let (model, _) = train(&job)?;
        Ok(Box::new(OwnedNetworkPredictor { model, augment: self.augment }))
    }
}

/// Uses [`OraclePredictor`] for every fold.
pub struct OracleTrainer {
    pub seed: u64,
    pub vocabulary: Vec<String>,
}

impl FoldTrainer for OracleTrainer {
    fn fit(&self, _fold: usize, _train: &[&GraspExample], _held_out: &[&GraspExample]) -> Result<Box<dyn GraspPredictor + '_>, HeadError> {
        Ok(Box::new(OraclePredictor { seed: self.seed, vocabulary: self.vocabulary.clone() }))
    }
}

/// Fits one predictor per fold and scores it on the held-out examples. A fold
/// whose training fails is recorded in `failed_folds` with accuracy 0.
pub fn run_cross_validation(
    dataset: &LoadedDataset,
    plan: &SplitPlan,
    trainer: &dyn FoldTrainer,
    vocabulary: &[String],
    metric: &MetricConfig,
) -> Result<EvalReport, HeadError> {
    metric.validate()?;
    let lookup = |ids: &[String]| -> Result<Vec<&GraspExample>, HeadError> {
        ids.iter()
            .map(|id| dataset.get(id).ok_or_else(|| HeadError::Invalid(format!("split references unknown example {id}"))))
            .collect()
    };
    let outcomes: Vec<Result<(FoldResult, Option<f64>), HeadError>> = (0..plan.k)
        .into_par_iter()
        .map(|fold| {
            let test = lookup(plan.test_ids(fold))?;
            let train_set = lookup(&plan.train_ids(fold))?;
            let predictor = trainer.fit(fold, &train_set, &test)?;
            evaluate_predictor(predictor.as_ref(), &test, vocabulary, metric)
        })
        .collect();

    let mut folds = Vec::with_capacity(plan.k);
    let mut failed = Vec::new();
    let mut cls = Vec::new();
    for (fold, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok((f, c)) => {
                folds.push(f);
                cls.extend(c);
            }
            Err(e @ HeadError::Invalid(_)) => return Err(e),
            Err(e) => {
                warn!("fold {fold} failed: {e}");
                failed.push(fold);
                folds.push(FoldResult { accuracy: 0.0, records: Vec::new() });
            }
        }
    }
    let categories = dataset.labels.as_ref().map(|_| dataset.category_map());
    let mut report = EvalReport::from_folds(plan.mode, folds, categories.as_ref());
    if cls.len() == plan.k {
        report.classification_fold_accuracies = Some(cls);
    }
    report.failed_folds = failed;
    debug!("cross-validation done: mean accuracy {}", report.mean_accuracy);
    Ok(report)
}

/// Relative-error bound for [`gradcheck_suite`].
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_EPSILON: f64 = 1e-4;

/// Small networks that together exercise every layer type and all three
/// losses (mean squared error, combined with cross-entropy, masked grid loss).
pub fn gradcheck_presets(preset: &str) -> Option<Vec<(&'static str, NetworkConfig)>> {
    if preset != "tiny" {
        return None;
    }
    let lrn = LayerSpec::Lrn { size: 3, alpha: 0.5, beta: 0.75, k: 1.0 };
    Some(vec![
        (
            "conv-pool-fc/mse",
            NetworkConfig {
                input: [2, 6, 6],
                layers: vec![
                    LayerSpec::Conv { out_channels: 3, kernel: 3, stride: 1, pad: 1 },
                    LayerSpec::Relu,
                    LayerSpec::MaxPool { kernel: 2, stride: 2 },
                    LayerSpec::Linear { out_features: 6 },
                ],
                head: HeadSpec::Direct,
                input_scale: 1.0,
            },
        ),
        (
            "conv-lrn-fc-dropout/mse+cross-entropy",
            NetworkConfig {
                input: [3, 7, 7],
                layers: vec![
                    LayerSpec::Conv { out_channels: 4, kernel: 3, stride: 2, pad: 1 },
                    lrn,
                    LayerSpec::Relu,
                    LayerSpec::Linear { out_features: 10 },
                    LayerSpec::Relu,
                    LayerSpec::Dropout { keep_prob: 0.5 },
                    LayerSpec::Linear { out_features: 9 },
                ],
                head: HeadSpec::RegressionClassification { classes: 3 },
                input_scale: 0.5,
            },
        ),
        (
            "conv-pool-fc/masked-grid",
            NetworkConfig {
                input: [3, 8, 8],
                layers: vec![
                    LayerSpec::Conv { out_channels: 3, kernel: 3, stride: 1, pad: 0 },
                    LayerSpec::Relu,
                    LayerSpec::MaxPool { kernel: 3, stride: 1 },
                    LayerSpec::Linear { out_features: 28 },
                ],
                head: HeadSpec::MultiGrasp { grid: 2 },
                input_scale: 1.0,
            },
        ),
    ])
}

/// Runs [`grad_check`] on every network of `preset` with seeded inputs and
/// targets. `mutation` injects a backward fault.
pub fn gradcheck_suite(preset: &str, mutation: Option<Mutation>, seed: u64) -> Result<Vec<(String, GradCheckReport)>, HeadError> {
    let presets = gradcheck_presets(preset).ok_or_else(|| HeadError::Invalid(format!("unknown gradcheck preset {preset:?}")))?;
    let mut out = Vec::new();
    for (i, (name, cfg)) in presets.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let mut net = Network::new(cfg.clone(), rng.gen())?;
        // nonzero biases keep activations off the ReLU kink
        for p in net.params_mut().iter_mut().filter(|p| p.shape().len() == 1) {
            p.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
        net.set_mutation(mutation);
        let input: Vec<f64> = (0..net.input_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let size = cfg.input[1] as f64;
        let report = match cfg.head {
            HeadSpec::Direct => {
                let target: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
                grad_check(&net, &input, |o| mse(o, &target), GRADCHECK_EPSILON)?
            }
            HeadSpec::RegressionClassification { classes } => {
                let target: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
                let class = rng.gen_range(0..classes);
                grad_check(
                    &net,
                    &input,
                    |o| combined_loss(o, &target, Some(class), 1.0).map_err(|e| NnError::Shape(e.to_string())),
                    GRADCHECK_EPSILON,
                )?
            }
            HeadSpec::MultiGrasp { grid } => {
                let g = GraspRect::new(0.3 * size, 0.6 * size, 30.0, 0.2 * size, 0.4 * size).expect("valid grasp");
                let t = encode_targets(&[g], grid, size, &mut rng)?;
                grad_check(&net, &input, |o| multigrasp_loss(o, &t).map_err(|e| NnError::Shape(e.to_string())), GRADCHECK_EPSILON)?
            }
        };
        out.push((name.to_string(), report));
    }
    Ok(out)
}
