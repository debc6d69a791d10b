//! Weighted cross-entropy, per-class IoU, and a toy end-to-end optimizer.
//!
//! The loss operates on raster-shaped logit fields (row-major,
//! channel-last, like [`BevRaster`] features): per-cell softmax with
//! class-weighted cross-entropy against one-hot labels, reduced as the
//! mean over non-ignored cells so the learning rate is grid-size
//! independent.
//!
//! [`toy_train`] demonstrates usable gradients through the whole chain:
//! per-pixel depth and feature logits are free parameters, lifted to 3D
//! Gaussians, splatted, mass-normalized, and scored against BEV labels;
//! plain gradient descent runs on each scene bundle independently in
//! lock-step. The first `train_count` bundles feed the reported loss, the
//! remaining bundles are held out of that statistic and report IoU.

use rayon::prelude::*;
use thiserror::Error;

use crate::camera::CameraExtrinsics;
use crate::field::PixelField;
use crate::lift::{
    lift_camera_traced, DepthBinSpec, DepthDistribution, LiftConfig, LiftError, DEFAULT_SIGMA,
};
use crate::lut::RayLut;
use crate::splat::{
    marginalize_to_ground, normalize_backward, splat_backward, splat_forward, BevGridSpec,
    BevRaster, Gaussian2, SplatError, DEFAULT_TRUNC_SIGMA,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid class weights: {0}")]
    InvalidWeights(String),
    #[error("invalid labels: {0}")]
    InvalidLabels(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("degenerate input: every cell is ignored")]
    AllIgnored,
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error(transparent)]
    Lift(#[from] LiftError),
    #[error(transparent)]
    Splat(#[from] SplatError),
}

/// Per-class loss weights, all positive and finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    weights: Vec<f64>,
}

impl ClassWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self, TrainError> {
        if weights.is_empty() {
            return Err(TrainError::InvalidWeights("need at least one class".to_string()));
        }
        if !weights.iter().all(|w| w.is_finite() && *w > 0.0) {
            return Err(TrainError::InvalidWeights(format!(
                "weights must be positive and finite, got {weights:?}"
            )));
        }
        Ok(Self { weights })
    }

    pub fn uniform(classes: usize) -> Self {
        Self {
            weights: vec![1.0; classes],
        }
    }

    /// Inverse class frequency over the given label maps, normalized so
    /// equal frequencies give weight 1, clipped to `[0.1, 10]`.
    pub fn inverse_frequency<'a>(labels: impl IntoIterator<Item = &'a BevLabels>) -> Self {
        let mut counts: Vec<u64> = Vec::new();
        let mut total = 0u64;
        for l in labels {
            counts.resize(counts.len().max(l.classes()), 0);
            for cell in 0..l.cell_count() {
                if l.is_ignored_cell(cell) {
                    continue;
                }
                counts[l.class_id_at(cell) as usize] += 1;
                total += 1;
            }
        }
        let c = counts.len().max(1) as f64;
        let weights = counts
            .iter()
            .map(|&n| {
                if n == 0 {
                    10.0
                } else {
                    (total as f64 / (c * n as f64)).clamp(0.1, 10.0)
                }
            })
            .collect();
        Self { weights }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn get(&self, class: usize) -> f64 {
        self.weights[class]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }
}

/// One-hot BEV ground truth with an ignore bitmap.
///
/// Stored as one class id per cell; the one-hot view `y(cell, c)` is
/// implied. Ignored cells contribute nothing to loss or metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct BevLabels {
    rows: usize,
    cols: usize,
    classes: usize,
    class_ids: Vec<u8>,
    ignored: Vec<bool>,
}

impl BevLabels {
    pub fn from_class_ids(
        rows: usize,
        cols: usize,
        classes: usize,
        class_ids: Vec<u8>,
        ignored: Option<Vec<bool>>,
    ) -> Result<Self, TrainError> {
        if class_ids.len() != rows * cols {
            return Err(TrainError::InvalidLabels(format!(
                "{} ids for a {rows}x{cols} grid",
                class_ids.len()
            )));
        }
        let ignored = ignored.unwrap_or_else(|| vec![false; rows * cols]);
        if ignored.len() != class_ids.len() {
            return Err(TrainError::InvalidLabels("ignore bitmap size mismatch".to_string()));
        }
        for (cell, &id) in class_ids.iter().enumerate() {
            if !ignored[cell] && id as usize >= classes {
                return Err(TrainError::InvalidLabels(format!(
                    "class id {id} at cell {cell} exceeds class count {classes}"
                )));
            }
        }
        Ok(Self {
            rows,
            cols,
            classes,
            class_ids,
            ignored,
        })
    }

    /// From a one-hot binary field (rows * cols * classes, channel-last).
    /// Every non-ignored cell must have exactly one channel set.
    pub fn from_one_hot(
        rows: usize,
        cols: usize,
        classes: usize,
        one_hot: &[u8],
        ignored: Option<Vec<bool>>,
    ) -> Result<Self, TrainError> {
        if one_hot.len() != rows * cols * classes {
            return Err(TrainError::InvalidLabels("one-hot field size mismatch".to_string()));
        }
        let ignore = ignored.clone().unwrap_or_else(|| vec![false; rows * cols]);
        let mut ids = vec![0u8; rows * cols];
        for cell in 0..rows * cols {
            let slice = &one_hot[cell * classes..(cell + 1) * classes];
            if slice.iter().any(|&b| b > 1) {
                return Err(TrainError::InvalidLabels(format!(
                    "non-binary entry at cell {cell}"
                )));
            }
            let ones = slice.iter().filter(|&&b| b == 1).count();
            if ignore.get(cell).copied().unwrap_or(false) {
                continue;
            }
            if ones != 1 {
                return Err(TrainError::InvalidLabels(format!(
                    "cell {cell} has {ones} positive classes, expected exactly 1"
                )));
            }
            ids[cell] = slice.iter().position(|&b| b == 1).unwrap() as u8;
        }
        Self::from_class_ids(rows, cols, classes, ids, ignored)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn cell_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn class_id_at(&self, cell: usize) -> u8 {
        self.class_ids[cell]
    }

    pub fn class_ids(&self) -> &[u8] {
        &self.class_ids
    }

    pub fn is_ignored_cell(&self, cell: usize) -> bool {
        self.ignored[cell]
    }

    pub fn valid_count(&self) -> usize {
        self.ignored.iter().filter(|&&b| !b).count()
    }

    /// One-hot indicator `y(cell, class)`.
    pub fn one_hot(&self, cell: usize, class: usize) -> f64 {
        if !self.ignored[cell] && self.class_ids[cell] as usize == class {
            1.0
        } else {
            0.0
        }
    }
}

/// Per-class true/false positive/negative counts.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub true_positives: Vec<u64>,
    pub false_positives: Vec<u64>,
    pub false_negatives: Vec<u64>,
}

impl ConfusionCounts {
    fn zeros(classes: usize) -> Self {
        Self {
            true_positives: vec![0; classes],
            false_positives: vec![0; classes],
            false_negatives: vec![0; classes],
        }
    }
}

/// Per-cell softmax over channel-last logits, with max shift.
pub fn softmax_probs(logits: &[f64], channels: usize) -> Vec<f64> {
    assert_eq!(logits.len() % channels, 0);
    let mut probs = logits.to_vec();
    for cell in probs.chunks_exact_mut(channels) {
        crate::lift::softmax_in_place(cell);
    }
    probs
}

/// Class-weighted cross-entropy between per-cell probabilities and one-hot
/// labels, with the analytic gradient with respect to the logits.
///
/// Reduction is the mean over non-ignored cells:
/// `loss = mean(-w_true * ln p_true)`, and for one-hot labels the softmax
/// chain rule gives `grad_logits = w_true * (p - onehot) / n_valid`.
/// Ignored cells contribute zero to both.
pub fn weighted_ce(
    probs: &[f64],
    labels: &BevLabels,
    weights: &ClassWeights,
) -> Result<(f64, Vec<f64>), TrainError> {
    let channels = labels.classes();
    if weights.len() != channels {
        return Err(TrainError::DimensionMismatch(format!(
            "{} weights for {channels} classes",
            weights.len()
        )));
    }
    if probs.len() != labels.cell_count() * channels {
        return Err(TrainError::DimensionMismatch(format!(
            "probability field has {} values, labels need {}",
            probs.len(),
            labels.cell_count() * channels
        )));
    }
    let n_valid = labels.valid_count();
    if n_valid == 0 {
        return Err(TrainError::AllIgnored);
    }
    let scale = 1.0 / n_valid as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; probs.len()];
    for cell in 0..labels.cell_count() {
        if labels.is_ignored_cell(cell) {
            continue;
        }
        let true_class = labels.class_id_at(cell) as usize;
        let w = weights.get(true_class);
        let p = &probs[cell * channels..(cell + 1) * channels];
        loss -= w * p[true_class].ln();
        let g = &mut grad[cell * channels..(cell + 1) * channels];
        for (c, gc) in g.iter_mut().enumerate() {
            let y = if c == true_class { 1.0 } else { 0.0 };
            *gc = w * (p[c] - y) * scale;
        }
    }
    Ok((loss * scale, grad))
}

/// Per-class IoU and confusion counts of a class-id prediction map.
///
/// Classes with an empty union (no ground truth and no prediction) are
/// reported as `None`: an undefined ratio, excluded from averages rather
/// than counted as zero.
pub fn iou(
    pred_classes: &[u8],
    labels: &BevLabels,
) -> Result<(Vec<Option<f64>>, ConfusionCounts), TrainError> {
    if pred_classes.len() != labels.cell_count() {
        return Err(TrainError::DimensionMismatch(format!(
            "{} predictions for {} cells",
            pred_classes.len(),
            labels.cell_count()
        )));
    }
    let classes = labels.classes();
    let mut counts = ConfusionCounts::zeros(classes);
    for (cell, &pred) in pred_classes.iter().enumerate() {
        if labels.is_ignored_cell(cell) {
            continue;
        }
        let truth = labels.class_id_at(cell) as usize;
        let pred = pred as usize;
        if pred >= classes {
            return Err(TrainError::InvalidLabels(format!(
                "prediction {pred} at cell {cell} exceeds class count {classes}"
            )));
        }
        if pred == truth {
            counts.true_positives[truth] += 1;
        } else {
            counts.false_positives[pred] += 1;
            counts.false_negatives[truth] += 1;
        }
    }
    let ious = (0..classes)
        .map(|c| {
            let union = counts.true_positives[c] + counts.false_positives[c] + counts.false_negatives[c];
            if union == 0 {
                None
            } else {
                Some(counts.true_positives[c] as f64 / union as f64)
            }
        })
        .collect();
    Ok((ious, counts))
}

// ---------------------------------------------------------------------------
// Toy end-to-end optimization
// ---------------------------------------------------------------------------

/// Everything needed to fit and score one synthetic scene.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub name: String,
    pub extrinsics: Vec<CameraExtrinsics>,
    pub luts: Vec<RayLut>,
    pub labels: BevLabels,
}

/// Free per-pixel parameters of one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraParams {
    /// Depth-bin logits, `bins` channels; softmaxed inside the chain.
    pub depth_logits: PixelField,
    /// Class-logit payload, `classes` channels, splatted directly.
    pub feature_logits: PixelField,
    /// Depth uncertainty in meters, 1 channel. Held fixed by the loop.
    pub sigma: PixelField,
}

impl CameraParams {
    /// Uniform depth (all-zero logits), zero feature logits, constant sigma.
    pub fn cold_start(lut: &RayLut, bins: usize, classes: usize, sigma: f64) -> Self {
        Self {
            depth_logits: PixelField::zeros(lut.width(), lut.height(), bins),
            feature_logits: PixelField::zeros(lut.width(), lut.height(), classes),
            sigma: PixelField::constant(lut.width(), lut.height(), sigma),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyTrainConfig {
    pub grid: BevGridSpec,
    pub bins: DepthBinSpec,
    pub learn_rate: f64,
    pub iterations: usize,
    /// None derives inverse-frequency weights from the training labels.
    pub class_weights: Option<ClassWeights>,
    pub trunc_sigma: f64,
    pub prune_below: f64,
    pub sigma: f64,
    /// Bundles `0..train_count` feed the reported loss; the rest are the
    /// held-out evaluation set for the IoU columns.
    pub train_count: usize,
}

impl ToyTrainConfig {
    pub fn with_defaults(grid: BevGridSpec, train_count: usize) -> Self {
        Self {
            grid,
            bins: DepthBinSpec::default_64(),
            learn_rate: DEFAULT_LEARN_RATE,
            iterations: 500,
            class_weights: None,
            trunc_sigma: DEFAULT_TRUNC_SIGMA,
            prune_below: crate::lift::DEFAULT_PRUNE_BELOW,
            sigma: DEFAULT_SIGMA,
            train_count,
        }
    }
}

/// Default gradient-descent step size for the toy loop, calibrated for
/// LUTs built at [`DEFAULT_TRAIN_STRIDE`].
pub const DEFAULT_LEARN_RATE: f64 = 2000.0;

/// Default LUT subsampling for training: per-pixel parameters at full
/// resolution would be needlessly slow for a toy loop.
pub const DEFAULT_TRAIN_STRIDE: u32 = 8;

/// A full differentiable pass over one scene.
#[derive(Debug, Clone)]
pub struct SceneEvaluation {
    pub loss: f64,
    /// Mass-normalized raster (the loss input).
    pub raster: BevRaster,
    pub pred_classes: Vec<u8>,
    /// Per-camera gradients, present when requested.
    pub depth_grads: Option<Vec<PixelField>>,
    pub feature_grads: Option<Vec<PixelField>>,
}

/// Runs the forward chain (softmax depth -> lift -> splat -> normalize ->
/// softmax CE) for one scene and optionally the full backward chain down
/// to the per-pixel logits.
pub fn evaluate_scene(
    params: &[CameraParams],
    bundle: &SceneBundle,
    cfg: &ToyTrainConfig,
    weights: &ClassWeights,
    with_grads: bool,
) -> Result<SceneEvaluation, TrainError> {
    let classes = bundle.labels.classes();
    if params.len() != bundle.luts.len() || params.len() != bundle.extrinsics.len() {
        return Err(TrainError::DimensionMismatch(format!(
            "scene '{}' has {} cameras, {} LUTs, {} parameter sets",
            bundle.name,
            bundle.extrinsics.len(),
            bundle.luts.len(),
            params.len()
        )));
    }
    let lift_cfg = LiftConfig {
        prune_below: cfg.prune_below,
        ..LiftConfig::default()
    };

    // Lift all cameras; remember per-camera depth probabilities and the
    // gaussian provenance for the backward pass.
    let mut gaussians: Vec<Gaussian2> = Vec::new();
    let mut camera_ranges = Vec::with_capacity(params.len());
    let mut traces = Vec::with_capacity(params.len());
    let mut depth_probs = Vec::with_capacity(params.len());
    for (cam, p) in params.iter().enumerate() {
        let depth = DepthDistribution::from_logits(&p.depth_logits);
        let (lifted, trace) = lift_camera_traced(
            &bundle.luts[cam],
            &bundle.extrinsics[cam],
            &cfg.bins,
            &depth,
            &p.sigma,
            &p.feature_logits,
            &lift_cfg,
        )?;
        let start = gaussians.len();
        gaussians.extend(lifted.iter().map(marginalize_to_ground));
        camera_ranges.push(start..gaussians.len());
        traces.push(trace);
        depth_probs.push(depth);
    }

    // Splat un-normalized, then normalize a copy so the raw features and
    // mass stay available for the normalization backward.
    let raw = splat_forward(&gaussians, &cfg.grid, cfg.trunc_sigma, false)?;
    let mut raster = raw.clone();
    raster.normalize_features();

    let probs = softmax_probs(raster.features(), classes);
    let (loss, grad_logits) = weighted_ce(&probs, &bundle.labels, weights)?;
    let pred_classes = raster.argmax_classes();

    if !with_grads {
        return Ok(SceneEvaluation {
            loss,
            raster,
            pred_classes,
            depth_grads: None,
            feature_grads: None,
        });
    }

    let (grad_features, grad_mass) =
        normalize_backward(&grad_logits, raw.features(), raw.mass(), classes);
    let gaussian_grads =
        splat_backward(&grad_features, &grad_mass, &gaussians, &cfg.grid, cfg.trunc_sigma)?;

    let mut depth_grads = Vec::with_capacity(params.len());
    let mut feature_grads = Vec::with_capacity(params.len());
    for (cam, p) in params.iter().enumerate() {
        let bins = cfg.bins.count();
        let mut grad_p = PixelField::zeros(p.depth_logits.width(), p.depth_logits.height(), bins);
        let mut grad_f =
            PixelField::zeros(p.feature_logits.width(), p.feature_logits.height(), classes);
        for (trace, grad) in traces[cam]
            .iter()
            .zip(&gaussian_grads[camera_ranges[cam].clone()])
        {
            let (row, col, bin) = (trace.row as usize, trace.col as usize, trace.bin as usize);
            grad_p.pixel_mut(row, col)[bin] += grad.weight;
            let gf = grad_f.pixel_mut(row, col);
            for (k, &g) in grad.feature.iter().enumerate() {
                gf[k] += g;
            }
        }
        // Chain through the per-pixel depth softmax:
        // d loss / d logit_d = p_d * (g_d - sum_e p_e g_e).
        for row in 0..grad_p.height() {
            for col in 0..grad_p.width() {
                let probs = depth_probs[cam].field().pixel(row, col);
                let g = grad_p.pixel_mut(row, col);
                let inner: f64 = probs.iter().zip(g.iter()).map(|(p, g)| p * g).sum();
                for (gd, pd) in g.iter_mut().zip(probs) {
                    *gd = pd * (*gd - inner);
                }
            }
        }
        depth_grads.push(grad_p);
        feature_grads.push(grad_f);
    }

    Ok(SceneEvaluation {
        loss,
        raster,
        pred_classes,
        depth_grads: Some(depth_grads),
        feature_grads: Some(feature_grads),
    })
}

/// One history row: training loss plus per-class IoU on the eval scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub train_loss: f64,
    /// Per-class IoU averaged over eval scenes where defined; `None` when
    /// the class has an empty union on every eval scene.
    pub eval_iou: Vec<Option<f64>>,
}

#[derive(Debug)]
pub struct ToyTrainResult {
    /// Optimized parameters, one set per scene per camera.
    pub params: Vec<Vec<CameraParams>>,
    pub history: Vec<IterationRecord>,
    pub class_weights: ClassWeights,
}

/// Plain gradient descent on per-scene, per-camera depth and feature
/// logits through the full differentiable chain.
///
/// Every bundle is optimized against its own labels; scenes couple only
/// through the shared config and class weights. The history has
/// `iterations + 1` rows: the cold-start state and one row after each
/// step. Deterministic for a fixed config and input set.
pub fn toy_train(scenes: &[SceneBundle], cfg: &ToyTrainConfig) -> Result<ToyTrainResult, TrainError> {
    if scenes.is_empty() || cfg.train_count == 0 || cfg.train_count > scenes.len() {
        return Err(TrainError::DimensionMismatch(format!(
            "need 1 <= train_count <= scene count, got {} of {}",
            cfg.train_count,
            scenes.len()
        )));
    }
    let classes = scenes[0].labels.classes();
    for s in scenes {
        if s.labels.classes() != classes {
            return Err(TrainError::DimensionMismatch(
                "scenes disagree on class count".to_string(),
            ));
        }
    }
    let class_weights = match &cfg.class_weights {
        Some(w) => {
            if w.len() != classes {
                return Err(TrainError::DimensionMismatch(format!(
                    "{} class weights for {classes} classes",
                    w.len()
                )));
            }
            w.clone()
        }
        None => ClassWeights::inverse_frequency(scenes[..cfg.train_count].iter().map(|s| &s.labels)),
    };

    let mut params: Vec<Vec<CameraParams>> = scenes
        .iter()
        .map(|s| {
            s.luts
                .iter()
                .map(|lut| CameraParams::cold_start(lut, cfg.bins.count(), classes, cfg.sigma))
                .collect()
        })
        .collect();

    let mut history = Vec::with_capacity(cfg.iterations + 1);
    for iteration in 0..=cfg.iterations {
        let stepping = iteration < cfg.iterations;
        // Per-scene passes are independent; parallel evaluation with an
        // ordered collect keeps the reduction deterministic.
        let evals: Vec<SceneEvaluation> = scenes
            .par_iter()
            .zip(params.par_iter())
            .map(|(bundle, p)| evaluate_scene(p, bundle, cfg, &class_weights, stepping))
            .collect::<Result<_, _>>()?;

        let mut train_loss = 0.0;
        let mut iou_sums = vec![0.0_f64; classes];
        let mut iou_counts = vec![0_u64; classes];
        for (scene_idx, eval) in evals.iter().enumerate() {
            if !eval.loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { iteration });
            }
            if scene_idx < cfg.train_count {
                train_loss += eval.loss;
            } else {
                let (per_class, _) = iou(&eval.pred_classes, &scenes[scene_idx].labels)?;
                for (c, v) in per_class.iter().enumerate() {
                    if let Some(v) = v {
                        iou_sums[c] += v;
                        iou_counts[c] += 1;
                    }
                }
            }
        }
        train_loss /= cfg.train_count as f64;
        let eval_iou = (0..classes)
            .map(|c| (iou_counts[c] > 0).then(|| iou_sums[c] / iou_counts[c] as f64))
            .collect();
        history.push(IterationRecord {
            iteration,
            train_loss,
            eval_iou,
        });

        if stepping {
            for (scene_params, eval) in params.iter_mut().zip(&evals) {
                let depth_grads = eval.depth_grads.as_ref().expect("grads requested");
                let feature_grads = eval.feature_grads.as_ref().expect("grads requested");
                for (cam, cp) in scene_params.iter_mut().enumerate() {
                    for (v, g) in cp
                        .depth_logits
                        .data_mut()
                        .iter_mut()
                        .zip(depth_grads[cam].data())
                    {
                        *v -= cfg.learn_rate * g;
                    }
                    for (v, g) in cp
                        .feature_logits
                        .data_mut()
                        .iter_mut()
                        .zip(feature_grads[cam].data())
                    {
                        *v -= cfg.learn_rate * g;
                    }
                }
            }
        }
    }

    Ok(ToyTrainResult {
        params,
        history,
        class_weights,
    })
}

/// Comma-separated history: `iteration,loss,iou_class0,...`, one row per
/// record, no header. Undefined IoU prints as `nan`.
pub fn format_history(history: &[IterationRecord]) -> String {
    let mut out = String::new();
    for rec in history {
        out.push_str(&format!("{},{:.9e}", rec.iteration, rec.train_loss));
        for v in &rec.eval_iou {
            match v {
                Some(v) => out.push_str(&format!(",{v:.6}")),
                None => out.push_str(",nan"),
            }
        }
        out.push('\n');
    }
    out
}
