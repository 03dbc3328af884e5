//! Per-pixel linear softmax segmentation over local RGB patches, with a
//! prompt-derived bias, and the training loop for the combined objective.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapt_loss::{adaptation_terms, AdaptConfig, CrossViewBatch};
use crate::error::{Error, Result};
use crate::eval::{miou, ConfusionMatrix, MiouResult};
use crate::gfk::{CrossViewMetric, EuclideanMetric, GeodesicFlowKernel};
use crate::par;
use crate::prompt::{build_prompt, embed_prompt, enumerate_prompts, Domain, PromptSpec};
use crate::sampling;
use crate::scene::{area_downsample, area_downsample_adjoint, featurize_view, Split, View};
use crate::subspace::Subspace;

/// Parameters are stored flat as `[W (C×F, row-major) | B (C×K) | b (C)]`,
/// where F is the patch length and K the prompt feature length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegModel {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    pub patch_radius: usize,
    pub prompt_features: usize,
    pub theta: Vec<f64>,
}

impl SegModel {
    pub fn zeros(width: usize, height: usize, classes: usize, patch_radius: usize, prompt_features: usize) -> Self {
        let mut m = Self {
            width,
            height,
            classes,
            patch_radius,
            prompt_features,
            theta: Vec::new(),
        };
        m.theta = vec![0.0; m.param_len()];
        m
    }

    pub fn patch_len(&self) -> usize {
        let side = 2 * self.patch_radius + 1;
        side * side * 3
    }

    pub fn param_len(&self) -> usize {
        self.classes * (self.patch_len() + self.prompt_features + 1)
    }

    fn weights(&self) -> DMatrix<f64> {
        let f = self.patch_len();
        DMatrix::from_row_slice(self.classes, f, &self.theta[..self.classes * f])
    }

    fn bias(&self, cond: &[f64]) -> DVector<f64> {
        let (c, f, k) = (self.classes, self.patch_len(), self.prompt_features);
        let b_off = c * f;
        let c_off = b_off + c * k;
        DVector::from_fn(c, |i, _| {
            let row = &self.theta[b_off + i * k..b_off + (i + 1) * k];
            self.theta[c_off + i] + row.iter().zip(cond).map(|(w, h)| w * h).sum::<f64>()
        })
    }

    fn check(&self, image: &[u8], cond: &[f64]) -> Result<()> {
        if image.len() != self.width * self.height * 3 {
            return Err(Error::ShapeMismatch(format!(
                "image has {} bytes, model expects {}x{}x3",
                image.len(),
                self.width,
                self.height
            )));
        }
        if cond.len() != self.prompt_features {
            return Err(Error::ShapeMismatch(format!(
                "prompt features have length {}, model expects {}",
                cond.len(),
                self.prompt_features
            )));
        }
        Ok(())
    }

    /// One row per pixel: the clamped-border patch around it, scaled to [−0.5, 0.5].
    pub fn patches(&self, image: &[u8]) -> DMatrix<f64> {
        let (w, h, r) = (self.width as isize, self.height as isize, self.patch_radius as isize);
        let f = self.patch_len();
        let mut out = DMatrix::zeros(self.width * self.height, f);
        for y in 0..h {
            for x in 0..w {
                let row = (y * w + x) as usize;
                let mut k = 0;
                for dy in -r..=r {
                    let yy = (y + dy).clamp(0, h - 1);
                    for dx in -r..=r {
                        let xx = (x + dx).clamp(0, w - 1);
                        let p = ((yy * w + xx) * 3) as usize;
                        for ch in 0..3 {
                            out[(row, k)] = image[p + ch] as f64 / 255.0 - 0.5;
                            k += 1;
                        }
                    }
                }
                debug_assert_eq!(k, f);
            }
        }
        out
    }

    fn probs_from_patches(&self, patches: &DMatrix<f64>, cond: &[f64]) -> DMatrix<f64> {
        let mut logits = patches * self.weights().transpose();
        let bias = self.bias(cond);
        for mut row in logits.row_iter_mut() {
            row += bias.transpose();
        }
        softmax_rows(&mut logits);
        logits
    }

    /// Class probabilities, one row of length C per pixel in row-major pixel order.
    pub fn predict(&self, image: &[u8], cond: &[f64]) -> Result<DMatrix<f64>> {
        self.check(image, cond)?;
        Ok(self.probs_from_patches(&self.patches(image), cond))
    }

    pub fn predict_labels(&self, image: &[u8], cond: &[f64]) -> Result<Vec<u8>> {
        Ok(argmax_rows(&self.predict(image, cond)?))
    }

    /// Accumulates `∂L/∂θ` given `∂L/∂logits` (pixels × C).
    fn accumulate_grad(&self, patches: &DMatrix<f64>, cond: &[f64], dlogits: &DMatrix<f64>, grad: &mut [f64]) {
        let (c, f, k) = (self.classes, self.patch_len(), self.prompt_features);
        let gw = dlogits.transpose() * patches;
        for i in 0..c {
            for j in 0..f {
                grad[i * f + j] += gw[(i, j)];
            }
        }
        let col_sums = dlogits.row_sum();
        for i in 0..c {
            for (j, h) in cond.iter().enumerate() {
                grad[c * f + i * k + j] += col_sums[i] * h;
            }
            grad[c * f + c * k + i] += col_sums[i];
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &mut DMatrix<f64>) {
    for mut row in m.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let s = row.sum();
        row /= s;
    }
}

pub fn argmax_rows(p: &DMatrix<f64>) -> Vec<u8> {
    p.row_iter().map(|row| row.transpose().argmax().0 as u8).collect()
}

/// Mean over pixels of `−ln p(true class)`.
pub fn supervised_loss(probs: &DMatrix<f64>, mask: &[u8]) -> Result<f64> {
    if probs.nrows() != mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} pixels, mask {}",
            probs.nrows(),
            mask.len()
        )));
    }
    let mut total = 0.0;
    for (i, &c) in mask.iter().enumerate() {
        let c = c as usize;
        if c >= probs.ncols() {
            return Err(Error::DomainError(format!("mask class {c} out of range")));
        }
        total -= probs[(i, c)].max(f64::MIN_POSITIVE).ln();
    }
    Ok(total / mask.len() as f64)
}

/// `∂/∂logits` of [`supervised_loss`]: `(p − onehot)/n`.
pub fn supervised_loss_grad_logits(probs: &DMatrix<f64>, mask: &[u8]) -> DMatrix<f64> {
    let n = mask.len() as f64;
    let mut g = probs.clone();
    for (i, &c) in mask.iter().enumerate() {
        g[(i, c as usize)] -= 1.0;
    }
    g / n
}

/// Pulls a gradient with respect to probabilities back through the softmax.
pub fn softmax_backward(probs: &DMatrix<f64>, dprobs: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = dprobs.clone();
    for i in 0..probs.nrows() {
        let dot: f64 = (0..probs.ncols()).map(|c| probs[(i, c)] * dprobs[(i, c)]).sum();
        for c in 0..probs.ncols() {
            out[(i, c)] = probs[(i, c)] * (dprobs[(i, c)] - dot);
        }
    }
    out
}

/// Segmentation vector: the probability map averaged onto a `side × side`
/// grid, one class distribution per cell.
pub fn seg_vector(probs: &DMatrix<f64>, width: usize, height: usize, side: usize) -> Result<DVector<f64>> {
    let flat: Vec<f64> = probs.transpose().iter().copied().collect();
    Ok(DVector::from_vec(area_downsample(
        &flat,
        width,
        height,
        probs.ncols(),
        side,
    )?))
}

pub fn mask_vector(mask: &[u8], classes: usize, width: usize, height: usize, side: usize) -> Result<DVector<f64>> {
    let mut onehot = vec![0.0; mask.len() * classes];
    for (i, &c) in mask.iter().enumerate() {
        onehot[i * classes + c as usize] = 1.0;
    }
    Ok(DVector::from_vec(area_downsample(
        &onehot, width, height, classes, side,
    )?))
}

/// Transpose of [`seg_vector`]: spreads a cell gradient back onto pixels.
fn seg_vector_adjoint(
    g: &DVector<f64>,
    width: usize,
    height: usize,
    classes: usize,
    side: usize,
) -> Result<DMatrix<f64>> {
    let flat = area_downsample_adjoint(g.as_slice(), width, height, classes, side)?;
    Ok(DMatrix::from_row_slice(width * height, classes, &flat))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    #[default]
    Geodesic,
    /// Q = I in the ambient space, with the same centering.
    Euclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub adapt: AdaptConfig,
    pub epochs: usize,
    /// Supervised-only epochs before the adaptation terms switch on, so that
    /// batch predictions have enough rank for a per-batch subspace.
    pub warmup_epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub patch_radius: usize,
    pub prompt_features: usize,
    pub prompt_dim: usize,
    /// Downsample side for image vectors.
    pub image_side: usize,
    /// Downsample side for segmentation vectors.
    pub seg_side: usize,
    pub metric: MetricKind,
    /// Append "captured from the [domain] view" to the prompts.
    pub view_prompts: bool,
    /// Subtract domain means from image vectors before fitting and measuring.
    pub center_images: bool,
    /// Same for segmentation vectors. Batch-mean centering of a handful of
    /// predictions pins their mean cosine to zero, so this is off by default.
    pub center_segmentation: bool,
    pub center_prompts: bool,
    /// Prompt each sample with only the classes it shows (labels for source,
    /// current predictions for target) instead of one fixed prompt pair.
    pub per_sample_prompts: bool,
    /// Pixel share a class needs before it is named in a per-sample prompt.
    pub prompt_min_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adapt: AdaptConfig::default(),
            epochs: 12,
            warmup_epochs: 2,
            learning_rate: 0.5,
            momentum: 0.9,
            patch_radius: 2,
            prompt_features: 8,
            prompt_dim: 64,
            image_side: 16,
            seg_side: 8,
            metric: MetricKind::Geodesic,
            view_prompts: true,
            center_images: true,
            center_segmentation: false,
            center_prompts: false,
            per_sample_prompts: true,
            prompt_min_fraction: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adapt.validate()?;
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.image_side == 0 || self.seg_side == 0 {
            return bad("featurizer sides must be positive");
        }
        if !(0.0..=1.0).contains(&self.prompt_min_fraction) {
            return bad("prompt_min_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn adapts(&self) -> bool {
        self.adapt.lambda_i > 0.0 || self.adapt.lambda_p > 0.0
    }
}

/// Prompt embeddings for both domains plus the prompt sets their subspaces are fit on.
#[derive(Debug, Clone)]
pub struct Prompts {
    pub source_text: String,
    pub target_text: String,
    pub source: DVector<f64>,
    pub target: DVector<f64>,
    pub source_set: Vec<DVector<f64>>,
    pub target_set: Vec<DVector<f64>>,
}

impl Prompts {
    pub fn build(classes: &[impl AsRef<str>], view: bool, dim: usize) -> Result<Self> {
        let spec = |d| {
            if view {
                PromptSpec::view(classes, d)
            } else {
                PromptSpec::plain(classes, d)
            }
        };
        let source_text = build_prompt(&spec(Domain::Car))?;
        let target_text = build_prompt(&spec(Domain::Drone))?;
        let set = |d| -> Result<Vec<DVector<f64>>> {
            enumerate_prompts(classes, d, view)?
                .iter()
                .map(|t| embed_prompt(t, dim))
                .collect()
        };
        Ok(Self {
            source: embed_prompt(&source_text, dim)?,
            target: embed_prompt(&target_text, dim)?,
            source_text,
            target_text,
            source_set: set(Domain::Car)?,
            target_set: set(Domain::Drone)?,
        })
    }
}

/// Classes covering at least `min_fraction` of the labels, in class order.
/// Falls back to the most frequent class so the list is never empty.
pub fn present_classes(labels: &[u8], classes: usize, min_fraction: f64) -> Vec<usize> {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        if (l as usize) < classes {
            counts[l as usize] += 1;
        }
    }
    let need = min_fraction * labels.len() as f64;
    let present: Vec<usize> = (0..classes)
        .filter(|&c| counts[c] > 0 && counts[c] as f64 >= need)
        .collect();
    if present.is_empty() {
        let top = (0..classes)
            .max_by_key(|&c| (counts[c], std::cmp::Reverse(c)))
            .unwrap_or(0);
        return vec![top];
    }
    present
}

fn subset_embedding(
    names: &[String],
    present: &[usize],
    domain: Domain,
    view: bool,
    dim: usize,
) -> Result<DVector<f64>> {
    let chosen: Vec<&str> = present.iter().map(|&c| names[c].as_str()).collect();
    let spec = if view {
        PromptSpec::view(&chosen, domain)
    } else {
        PromptSpec::plain(&chosen, domain)
    };
    embed_prompt(&build_prompt(&spec)?, dim)
}

/// Fixed random projection `h = tanh(G·f)` from a prompt embedding to the
/// model's bias features.
pub fn prompt_condition(embedding: &DVector<f64>, features: usize, seed: u64) -> Vec<f64> {
    let g = sampling::gaussian_matrix(&mut sampling::rng(seed ^ 0x0BAD_5EED), features, embedding.len());
    (g * embedding).iter().map(|v| v.tanh()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub supervised: f64,
    pub geo: f64,
    pub prompt: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub config: TrainConfig,
    pub epochs: Vec<EpochStats>,
    pub image_subspace_dim: usize,
    pub prompt_subspace_dim: usize,
    pub seg_subspace_dim: usize,
    /// Cross-view distance between the car and drone prompt embeddings.
    pub prompt_distance: f64,
    pub source_prompt: String,
    pub target_prompt: String,
    pub source_condition: Vec<f64>,
    pub target_condition: Vec<f64>,
    pub target_test: Option<MiouResult>,
    pub warnings: Vec<String>,
}

/// Subspace dimension that a centered fit on `count` samples of length `len` can support.
pub fn feasible_dim(requested: usize, count: usize, len: usize, center: bool) -> usize {
    let rank_cap = if center { count.saturating_sub(1) } else { count };
    requested.min(rank_cap).min(len / 2).max(1)
}

fn fit(vectors: &[DVector<f64>], dim: usize, center: bool) -> Result<Subspace> {
    let d = vectors[0].len();
    let m = DMatrix::from_fn(vectors.len(), d, |i, j| vectors[i][j]);
    Subspace::fit(&m, dim, center)
}

/// Fits both sets at `dim`, lowering the dimension to the smaller numerical
/// rank when either set cannot support it.
pub fn fit_pair_clipped(
    a: &[DVector<f64>],
    b: &[DVector<f64>],
    dim: usize,
    center: bool,
) -> Result<(Subspace, Subspace)> {
    let rank_of = |v: &[DVector<f64>]| match fit(v, dim, center) {
        Ok(_) => Ok(dim),
        Err(Error::RankDeficient { rank, .. }) if rank > 0 => Ok(rank),
        Err(e) => Err(e),
    };
    let d = rank_of(a)?.min(rank_of(b)?);
    Ok((fit(a, d, center)?, fit(b, d, center)?))
}

fn metric_for(kind: MetricKind, k: GeodesicFlowKernel) -> Box<dyn CrossViewMetric> {
    match kind {
        MetricKind::Geodesic => Box::new(k),
        MetricKind::Euclidean => Box::new(EuclideanMetric::matching(&k)),
    }
}

/// Everything the trainer needs about one labeled or unlabeled split.
struct Prepared<'a> {
    views: &'a [View],
    images: Vec<DVector<f64>>,
}

fn prepare<'a>(split: &'a Split, image_side: usize) -> Result<Prepared<'a>> {
    let images = par::try_map_range(split.views.len(), |i| {
        featurize_view(&split.views[i], image_side).map(DVector::from_vec)
    })?;
    Ok(Prepared {
        views: &split.views,
        images,
    })
}

pub fn evaluate(model: &SegModel, views: &[View], cond: &[f64]) -> Result<ConfusionMatrix> {
    let parts = par::try_map_range(views.len(), |i| -> Result<ConfusionMatrix> {
        let mut c = ConfusionMatrix::new(model.classes);
        c.add(&views[i].mask, &model.predict_labels(&views[i].image, cond)?)?;
        Ok(c)
    })?;
    let mut total = ConfusionMatrix::new(model.classes);
    for p in &parts {
        total.merge(p)?;
    }
    Ok(total)
}

/// Trains on labeled `source` and unlabeled `target` views. Image and prompt
/// kernels are fit once on the full data; the target segmentation subspace is
/// refit from every batch of predictions. With `test`, the report carries the
/// final target-test mIoU.
pub fn train(
    cfg: &TrainConfig,
    classes: usize,
    source: &Split,
    target: &Split,
    test: Option<&Split>,
) -> Result<(SegModel, TrainReport)> {
    cfg.validate()?;
    if !source.meta.labeled {
        return Err(Error::InvalidConfig("source split must be labeled".into()));
    }
    let (ns, nt) = (source.views.len(), target.views.len());
    let b = cfg.adapt.batch_size;
    if ns < b || nt < b {
        return Err(Error::InvalidConfig(format!(
            "need at least one batch of {b} in each domain, have {ns} source and {nt} target views"
        )));
    }
    let (width, height) = (source.views[0].width, source.views[0].height);
    let seed = cfg.adapt.seed;
    let mut warnings = Vec::new();

    let names: Vec<String> = crate::scene::CLASS_NAMES[..classes]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let prompts = Prompts::build(&names, cfg.view_prompts, cfg.prompt_dim)?;
    let cond_s = prompt_condition(&prompts.source, cfg.prompt_features, seed);
    let cond_t = prompt_condition(&prompts.target, cfg.prompt_features, seed);

    let src = prepare(source, cfg.image_side)?;
    let tgt = prepare(target, cfg.image_side)?;
    let img_dim = feasible_dim(
        cfg.adapt.subspace_dim,
        ns.min(nt),
        src.images[0].len(),
        cfg.center_images,
    );
    let kx = metric_for(
        cfg.metric,
        GeodesicFlowKernel::build_with(
            &fit(&src.images, img_dim, cfg.center_images)?,
            &fit(&tgt.images, img_dim, cfg.center_images)?,
            cfg.adapt.small_angle_eps,
        )?,
    );
    let requested = feasible_dim(
        cfg.adapt.subspace_dim,
        prompts.source_set.len().min(prompts.target_set.len()),
        cfg.prompt_dim,
        cfg.center_prompts,
    );
    let (ps, pt) = fit_pair_clipped(&prompts.source_set, &prompts.target_set, requested, cfg.center_prompts)?;
    let p_dim = ps.dim();
    if p_dim < requested {
        let msg = format!("prompt subspace clipped from {requested} to the embedding rank {p_dim}");
        warn!("{msg}");
        warnings.push(msg);
    }
    let kp = metric_for(
        cfg.metric,
        GeodesicFlowKernel::build_with(&ps, &pt, cfg.adapt.small_angle_eps)?,
    );
    let prompt_distance = kp.cross_distance(&prompts.source, &prompts.target)?;

    let ys_all = par::try_map_range(ns, |i| {
        mask_vector(&source.views[i].mask, classes, width, height, cfg.seg_side)
    })?;
    let seg_len = ys_all[0].len();
    let seg_dim = feasible_dim(cfg.adapt.subspace_dim, b, seg_len, cfg.center_segmentation);
    if seg_dim < cfg.adapt.subspace_dim {
        let msg = format!(
            "per-batch segmentation subspace clipped from {} to {seg_dim} (batch {b}, length {seg_len})",
            cfg.adapt.subspace_dim
        );
        warn!("{msg}");
        warnings.push(msg);
    }
    let seg_source = fit(&ys_all, seg_dim, cfg.center_segmentation)?;

    let mut model = SegModel::zeros(width, height, classes, cfg.patch_radius, cfg.prompt_features);
    let mut velocity = vec![0.0; model.param_len()];
    let mut rng = sampling::rng(seed);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let use_prompt = cfg.adapt.lambda_p > 0.0;

    for epoch in 0..cfg.epochs {
        let mut s_order: Vec<usize> = (0..ns).collect();
        let mut t_order: Vec<usize> = (0..nt).collect();
        s_order.shuffle(&mut rng);
        t_order.shuffle(&mut rng);
        let adapting = cfg.adapts() && epoch >= cfg.warmup_epochs;
        let n_batches = ns / b;
        let (mut sup_sum, mut geo_sum, mut prompt_sum) = (0.0, 0.0, 0.0);

        for bi in 0..n_batches {
            let s_idx = &s_order[bi * b..(bi + 1) * b];
            let t_idx: Vec<usize> = (0..b).map(|k| t_order[(bi * b + k) % nt]).collect();

            // Source forward and supervised gradient, one image per task.
            let model_ref = &model;
            let src_parts = par::try_map_range(b, |k| -> Result<(f64, Vec<f64>)> {
                let view = &src.views[s_idx[k]];
                let patches = model_ref.patches(&view.image);
                let probs = model_ref.probs_from_patches(&patches, &cond_s);
                let loss = supervised_loss(&probs, &view.mask)?;
                let mut g = vec![0.0; model_ref.param_len()];
                model_ref.accumulate_grad(
                    &patches,
                    &cond_s,
                    &supervised_loss_grad_logits(&probs, &view.mask),
                    &mut g,
                );
                Ok((loss, g))
            })?;
            let mut grad = vec![0.0; model.param_len()];
            let mut sup = 0.0;
            for (loss, g) in &src_parts {
                sup += loss / b as f64;
                for (a, v) in grad.iter_mut().zip(g) {
                    *a += v / b as f64;
                }
            }
            sup_sum += sup;

            if adapting {
                let tgt_fwd = par::map_range(b, |k| {
                    let view = &tgt.views[t_idx[k]];
                    let patches = model_ref.patches(&view.image);
                    let probs = model_ref.probs_from_patches(&patches, &cond_t);
                    (patches, probs)
                });
                let yt: Vec<DVector<f64>> = tgt_fwd
                    .iter()
                    .map(|(_, p)| seg_vector(p, width, height, cfg.seg_side))
                    .collect::<Result<_>>()?;
                let seg_target = fit(&yt, seg_dim, cfg.center_segmentation).map_err(|e| match e {
                    Error::RankDeficient { rank, required } => Error::CollapsedPredictions { epoch, rank, required },
                    other => other,
                })?;
                let ky = metric_for(
                    cfg.metric,
                    GeodesicFlowKernel::build_with(&seg_source, &seg_target, cfg.adapt.small_angle_eps)?,
                );
                let (fps, fpt) = if !use_prompt {
                    (Vec::new(), Vec::new())
                } else if cfg.per_sample_prompts {
                    let embed = |labels: &[u8], domain| {
                        let present = present_classes(labels, classes, cfg.prompt_min_fraction);
                        subset_embedding(&names, &present, domain, cfg.view_prompts, cfg.prompt_dim)
                    };
                    let fps = s_idx
                        .iter()
                        .map(|&i| embed(&src.views[i].mask, Domain::Car))
                        .collect::<Result<Vec<_>>>()?;
                    let fpt = tgt_fwd
                        .iter()
                        .map(|(_, p)| embed(&argmax_rows(p), Domain::Drone))
                        .collect::<Result<Vec<_>>>()?;
                    (fps, fpt)
                } else {
                    (vec![prompts.source.clone(); b], vec![prompts.target.clone(); b])
                };
                let batch = CrossViewBatch::new(
                    s_idx.iter().map(|&i| src.images[i].clone()).collect(),
                    t_idx.iter().map(|&j| tgt.images[j].clone()).collect(),
                    s_idx.iter().map(|&i| ys_all[i].clone()).collect(),
                    yt,
                    fps,
                    fpt,
                    classes,
                )?;
                let kp_ref: Option<&dyn CrossViewMetric> = if use_prompt { Some(kp.as_ref()) } else { None };
                let terms = adaptation_terms(kx.as_ref(), ky.as_ref(), kp_ref, &batch, &cfg.adapt)?;
                geo_sum += terms.geo_loss;
                prompt_sum += terms.prompt_loss;

                let tgt_grads = par::try_map_range(b, |k| -> Result<Vec<f64>> {
                    let (patches, probs) = &tgt_fwd[k];
                    let dprobs = seg_vector_adjoint(&terms.grad_yt[k], width, height, classes, cfg.seg_side)?;
                    let mut g = vec![0.0; model_ref.param_len()];
                    model_ref.accumulate_grad(patches, &cond_t, &softmax_backward(probs, &dprobs), &mut g);
                    Ok(g)
                })?;
                for g in &tgt_grads {
                    for (a, v) in grad.iter_mut().zip(g) {
                        *a += v;
                    }
                }
            }

            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite("parameter gradient"));
            }
            for ((t, v), g) in model.theta.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = cfg.momentum * *v + g;
                *t -= cfg.learning_rate * *v;
            }
        }

        let nb = n_batches as f64;
        let (sup, geo, prompt) = (sup_sum / nb, geo_sum / nb, prompt_sum / nb);
        epochs.push(EpochStats {
            epoch,
            supervised: sup,
            geo,
            prompt,
            total: crate::adapt_loss::total_objective(sup, geo, prompt, &cfg.adapt),
        });
    }

    let target_test = match test {
        Some(t) if t.meta.labeled => Some(miou(&evaluate(&model, &t.views, &cond_t)?)?),
        Some(_) => return Err(Error::InvalidConfig("test split must be labeled".into())),
        None => None,
    };
    let report = TrainReport {
        seed,
        config: cfg.clone(),
        epochs,
        image_subspace_dim: img_dim,
        prompt_subspace_dim: p_dim,
        seg_subspace_dim: seg_dim,
        prompt_distance,
        source_prompt: prompts.source_text,
        target_prompt: prompts.target_text,
        source_condition: cond_s,
        target_condition: cond_t,
        target_test,
        warnings,
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt_loss::{relative_error, Pairing};
    use crate::gfk::DenseMetric;
    use crate::sampling::{gaussian_vector, rng};

    fn random_image(seed: u64, w: usize, h: usize) -> Vec<u8> {
        let mut g = rng(seed);
        gaussian_vector(&mut g, w * h * 3)
            .iter()
            .map(|v| (128.0 + 60.0 * v).clamp(0.0, 255.0) as u8)
            .collect()
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = SegModel::zeros(6, 5, 4, 1, 3);
        let p = m.predict(&random_image(1, 6, 5), &[0.1, 0.2, 0.3]).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(m.predict(&[0u8; 10], &[0.0; 3]).is_err());
        assert!(m.predict(&random_image(1, 6, 5), &[0.0; 2]).is_err());
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut m = SegModel::zeros(7, 4, 5, 2, 2);
        let mut g = rng(2);
        m.theta = gaussian_vector(&mut g, m.param_len()).iter().map(|v| 3.0 * v).collect();
        let p = m.predict(&random_image(3, 7, 4), &[0.5, -0.5]).unwrap();
        for row in p.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut onehot = DMatrix::zeros(3, 5);
        let mask = [0u8, 3, 4];
        for (i, &c) in mask.iter().enumerate() {
            onehot[(i, c as usize)] = 1.0;
        }
        assert_eq!(supervised_loss(&onehot, &mask).unwrap(), 0.0);
        let uniform = DMatrix::from_element(3, 5, 0.2);
        assert!((supervised_loss(&uniform, &mask).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert!(supervised_loss(&uniform, &mask[..2]).is_err());
    }

    fn loss_at(m: &SegModel, image: &[u8], mask: &[u8], cond: &[f64]) -> f64 {
        supervised_loss(&m.predict(image, cond).unwrap(), mask).unwrap()
    }

    #[test]
    fn supervised_gradient_matches_finite_differences() {
        let (w, h) = (5, 4);
        let mut m = SegModel::zeros(w, h, 3, 1, 2);
        let mut g = rng(7);
        m.theta = gaussian_vector(&mut g, m.param_len()).iter().map(|v| 0.3 * v).collect();
        let image = random_image(8, w, h);
        let mask: Vec<u8> = (0..w * h).map(|i| (i % 3) as u8).collect();
        let cond = [0.4, -0.7];
        let patches = m.patches(&image);
        let probs = m.probs_from_patches(&patches, &cond);
        let mut analytic = vec![0.0; m.param_len()];
        m.accumulate_grad(
            &patches,
            &cond,
            &supervised_loss_grad_logits(&probs, &mask),
            &mut analytic,
        );
        let step = 1e-5;
        let numeric: Vec<f64> = (0..m.param_len())
            .map(|k| {
                let mut up = m.clone();
                up.theta[k] += step;
                let mut down = m.clone();
                down.theta[k] -= step;
                (loss_at(&up, &image, &mask, &cond) - loss_at(&down, &image, &mask, &cond)) / (2.0 * step)
            })
            .collect();
        let err = relative_error(&DVector::from_vec(analytic), &DVector::from_vec(numeric));
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn adaptation_gradient_through_model_matches_finite_differences() {
        // 4x4 images, 2x2 cells of 3 classes: segmentation vectors of length 12.
        let (w, h, classes, side) = (4, 4, 3, 2);
        let mut m = SegModel::zeros(w, h, classes, 0, 2);
        let mut g = rng(11);
        m.theta = gaussian_vector(&mut g, m.param_len()).iter().map(|v| 0.8 * v).collect();
        let cond = [0.3, -0.2];
        let images: Vec<Vec<u8>> = (0..4).map(|i| random_image(20 + i, w, h)).collect();
        let d = 16;
        let kx = DenseMetric::new(DMatrix::identity(d, d), DVector::zeros(d), DVector::zeros(d)).unwrap();
        let mut q = gaussian_vector(&mut g, 12 * 12);
        q.iter_mut().for_each(|v| *v *= 0.2);
        let a = DMatrix::from_column_slice(12, 12, q.as_slice());
        let ky = DenseMetric::new(
            &a * a.transpose() + DMatrix::identity(12, 12),
            DVector::zeros(12),
            DVector::zeros(12),
        )
        .unwrap();
        let xs: Vec<DVector<f64>> = (0..3).map(|_| gaussian_vector(&mut g, d)).collect();
        let xt: Vec<DVector<f64>> = (0..4).map(|_| gaussian_vector(&mut g, d)).collect();
        let ys: Vec<DVector<f64>> = (0..3)
            .map(|i| {
                let mask: Vec<u8> = (0..w * h).map(|p| ((p + i) % classes) as u8).collect();
                mask_vector(&mask, classes, w, h, side).unwrap()
            })
            .collect();
        let cfg = AdaptConfig {
            pairing: Pairing::AllPairs,
            ..AdaptConfig::default()
        };

        let objective = |model: &SegModel| -> f64 {
            let yt: Vec<DVector<f64>> = images
                .iter()
                .map(|img| seg_vector(&model.predict(img, &cond).unwrap(), w, h, side).unwrap())
                .collect();
            let batch = CrossViewBatch::new(xs.clone(), xt.clone(), ys.clone(), yt, vec![], vec![], classes).unwrap();
            cfg.lambda_i * crate::adapt_loss::cross_view_geo_loss(&kx, &ky, &batch, cfg.alpha, cfg.pairing).unwrap()
        };

        let fwd: Vec<_> = images
            .iter()
            .map(|img| {
                let p = m.patches(img);
                let probs = m.probs_from_patches(&p, &cond);
                (p, probs)
            })
            .collect();
        let yt: Vec<DVector<f64>> = fwd.iter().map(|(_, p)| seg_vector(p, w, h, side).unwrap()).collect();
        let batch = CrossViewBatch::new(xs.clone(), xt.clone(), ys.clone(), yt, vec![], vec![], classes).unwrap();
        let terms = adaptation_terms(&kx, &ky, None, &batch, &cfg).unwrap();
        let mut analytic = vec![0.0; m.param_len()];
        for (k, (p, probs)) in fwd.iter().enumerate() {
            let dprobs = seg_vector_adjoint(&terms.grad_yt[k], w, h, classes, side).unwrap();
            m.accumulate_grad(p, &cond, &softmax_backward(probs, &dprobs), &mut analytic);
        }
        let step = 1e-5;
        let numeric: Vec<f64> = (0..m.param_len())
            .map(|k| {
                let mut up = m.clone();
                up.theta[k] += step;
                let mut down = m.clone();
                down.theta[k] -= step;
                (objective(&up) - objective(&down)) / (2.0 * step)
            })
            .collect();
        let err = relative_error(&DVector::from_vec(analytic), &DVector::from_vec(numeric));
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn overfits_a_single_class_image() {
        let (w, h) = (6, 6);
        let mut m = SegModel::zeros(w, h, 4, 1, 1);
        let image = random_image(5, w, h);
        let mask = vec![2u8; w * h];
        let cond = [1.0];
        for _ in 0..50 {
            let p = m.patches(&image);
            let probs = m.probs_from_patches(&p, &cond);
            let mut g = vec![0.0; m.param_len()];
            m.accumulate_grad(&p, &cond, &supervised_loss_grad_logits(&probs, &mask), &mut g);
            for (t, g) in m.theta.iter_mut().zip(&g) {
                *t -= 0.5 * g;
            }
        }
        assert!(m.predict_labels(&image, &cond).unwrap().iter().all(|&c| c == 2));
    }

    #[test]
    fn seg_vectors_are_cellwise_distributions() {
        let mask: Vec<u8> = (0..64).map(|i| (i % 6) as u8).collect();
        let v = mask_vector(&mask, 6, 8, 8, 4).unwrap();
        assert_eq!(v.len(), 96);
        for cell in v.as_slice().chunks(6) {
            assert!((cell.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn feasible_dim_clips() {
        assert_eq!(feasible_dim(256, 16, 384, true), 15);
        assert_eq!(feasible_dim(256, 200, 768, true), 199);
        assert_eq!(feasible_dim(256, 63, 64, true), 32);
        assert_eq!(feasible_dim(4, 16, 384, false), 4);
    }

    #[test]
    fn present_classes_threshold_and_fallback() {
        let mut labels = vec![0u8; 95];
        labels.extend([2, 2, 2, 4, 4]);
        assert_eq!(present_classes(&labels, 5, 0.0), vec![0, 2, 4]);
        assert_eq!(present_classes(&labels, 5, 0.03), vec![0, 2]);
        // Nothing reaches the bar, so the largest class stands in.
        assert_eq!(present_classes(&labels, 5, 0.99), vec![0]);
        assert_eq!(present_classes(&[3, 3], 4, 1.0), vec![3]);
    }
}
