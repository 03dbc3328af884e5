//! Cross-view geometric adaptation loss on unpaired batches, the prompt
//! correlation loss, the combined objective, and gradients with respect to the
//! target predictions.
//!
//! All kernels are frozen for the step: gradients treat Q and the centering
//! means as constants.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gfk::{CrossViewMetric, QVector, SMALL_ANGLE_EPS};
use crate::par;

/// How unpaired source and target samples are matched inside a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Every (source, target) combination: B_s·B_t terms.
    #[default]
    AllPairs,
    /// Index-matched: min(B_s, B_t) terms.
    Diagonal,
}

impl Pairing {
    pub fn pairs(self, n_source: usize, n_target: usize) -> Vec<(usize, usize)> {
        match self {
            Pairing::AllPairs => (0..n_source).flat_map(|i| (0..n_target).map(move |j| (i, j))).collect(),
            Pairing::Diagonal => (0..n_source.min(n_target)).map(|i| (i, i)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    /// Image-to-segmentation distance scale.
    pub alpha: f64,
    /// Prompt-to-segmentation distance scale.
    pub gamma: f64,
    pub lambda_i: f64,
    pub lambda_p: f64,
    pub subspace_dim: usize,
    pub batch_size: usize,
    pub pairing: Pairing,
    pub small_angle_eps: f64,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            alpha: 1.5,
            gamma: 1.0,
            lambda_i: 1.0,
            lambda_p: 0.5,
            subspace_dim: 256,
            batch_size: 16,
            pairing: Pairing::AllPairs,
            small_angle_eps: SMALL_ANGLE_EPS,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(self.lambda_i >= 0.0 && self.lambda_i.is_finite()) {
            return bad(format!("lambda_i must be non-negative, got {}", self.lambda_i));
        }
        if !(self.lambda_p >= 0.0 && self.lambda_p.is_finite()) {
            return bad(format!("lambda_p must be non-negative, got {}", self.lambda_p));
        }
        if self.subspace_dim < 1 {
            return bad("subspace_dim must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.small_angle_eps.is_nan() || self.small_angle_eps <= 0.0 {
            return bad("small_angle_eps must be positive".into());
        }
        Ok(())
    }
}

/// One optimization step's worth of unpaired data.
///
/// Segmentation vectors are concatenations of per-cell class distributions,
/// `classes` entries per cell.
#[derive(Debug, Clone)]
pub struct CrossViewBatch {
    pub xs: Vec<DVector<f64>>,
    pub xt: Vec<DVector<f64>>,
    pub ys: Vec<DVector<f64>>,
    pub yt: Vec<DVector<f64>>,
    /// Source prompt embeddings, one per source sample (may be empty).
    pub fps: Vec<DVector<f64>>,
    /// Target prompt embeddings, one per target sample (may be empty).
    pub fpt: Vec<DVector<f64>>,
    pub classes: usize,
}

const SIMPLEX_TOL: f64 = 1e-6;

impl CrossViewBatch {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        xs: Vec<DVector<f64>>,
        xt: Vec<DVector<f64>>,
        ys: Vec<DVector<f64>>,
        yt: Vec<DVector<f64>>,
        fps: Vec<DVector<f64>>,
        fpt: Vec<DVector<f64>>,
        classes: usize,
    ) -> Result<Self> {
        let batch = Self {
            xs,
            xt,
            ys,
            yt,
            fps,
            fpt,
            classes,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn source_len(&self) -> usize {
        self.xs.len()
    }

    pub fn target_len(&self) -> usize {
        self.xt.len()
    }

    pub fn has_prompts(&self) -> bool {
        !self.fps.is_empty() || !self.fpt.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let (bs, bt) = (self.xs.len(), self.xt.len());
        if bs < 2 || bt < 2 {
            return Err(Error::InvalidConfig(format!(
                "batches need at least 2 source and 2 target samples, got {bs} and {bt}"
            )));
        }
        if self.ys.len() != bs {
            return Err(Error::DimensionMismatch {
                expected: bs,
                found: self.ys.len(),
            });
        }
        if self.yt.len() != bt {
            return Err(Error::DimensionMismatch {
                expected: bt,
                found: self.yt.len(),
            });
        }
        if self.has_prompts() && (self.fps.len() != bs || self.fpt.len() != bt) {
            return Err(Error::InvalidConfig(format!(
                "prompt embeddings must match the batch: {}/{} for {bs}/{bt} samples",
                self.fps.len(),
                self.fpt.len()
            )));
        }
        same_len(&self.xs, &self.xt)?;
        same_len(&self.ys, &self.yt)?;
        same_len(&self.fps, &self.fpt)?;
        if self.classes == 0 {
            return Err(Error::InvalidConfig("segmentation class count is zero".into()));
        }
        for y in self.ys.iter().chain(&self.yt) {
            check_simplex_blocks(y, self.classes)?;
        }
        for v in self.xs.iter().chain(&self.xt).chain(&self.fps).chain(&self.fpt) {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("batch vector"));
            }
        }
        Ok(())
    }
}

fn same_len(a: &[DVector<f64>], b: &[DVector<f64>]) -> Result<()> {
    let d = a.first().or(b.first()).map_or(0, |v| v.len());
    for v in a.iter().chain(b) {
        if v.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: v.len(),
            });
        }
    }
    Ok(())
}

fn check_simplex_blocks(y: &DVector<f64>, classes: usize) -> Result<()> {
    if !y.len().is_multiple_of(classes) {
        return Err(Error::ShapeMismatch(format!(
            "segmentation vector of length {} is not a multiple of {classes} classes",
            y.len()
        )));
    }
    for block in y.as_slice().chunks(classes) {
        if block.iter().any(|&p| p.is_nan() || p < -1e-12) {
            return Err(Error::ShapeMismatch("negative class probability".into()));
        }
        let sum: f64 = block.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::ShapeMismatch(format!(
                "class distribution sums to {sum}, expected 1"
            )));
        }
    }
    Ok(())
}

fn prepare_source<M: CrossViewMetric + ?Sized>(m: &M, vs: &[DVector<f64>]) -> Result<Vec<QVector>> {
    par::try_map_range(vs.len(), |i| QVector::new(m, m.center_source(&vs[i])))
}

fn prepare_target<M: CrossViewMetric + ?Sized>(m: &M, vs: &[DVector<f64>]) -> Result<Vec<QVector>> {
    par::try_map_range(vs.len(), |i| QVector::new(m, m.center_target(&vs[i])))
}

fn check_dim<M: CrossViewMetric + ?Sized>(m: &M, vs: &[DVector<f64>]) -> Result<()> {
    match vs.first() {
        Some(v) if v.len() != m.ambient_dim() => Err(Error::DimensionMismatch {
            expected: m.ambient_dim(),
            found: v.len(),
        }),
        _ => Ok(()),
    }
}

/// Pairwise distances D(source_i, target_j) over `pairs`, in pair order.
fn pair_distances(source: &[QVector], target: &[QVector], pairs: &[(usize, usize)]) -> Vec<f64> {
    par::map_slice(pairs, |&(i, j)| source[i].distance(&target[j]))
}

fn mean_squared(residuals: impl Iterator<Item = f64>, count: usize) -> f64 {
    // Sequential sum in pair order keeps the result independent of threading.
    residuals.map(|r| r * r).sum::<f64>() / count as f64
}

/// `mean over pairs of (D_x(x_s, x_t) − α·D_y(y_s, y_t))²`.
pub fn cross_view_geo_loss<X, Y>(
    kernel_x: &X,
    kernel_y: &Y,
    batch: &CrossViewBatch,
    alpha: f64,
    pairing: Pairing,
) -> Result<f64>
where
    X: CrossViewMetric + ?Sized,
    Y: CrossViewMetric + ?Sized,
{
    let d = Distances::compute(kernel_x, kernel_y, None, batch, pairing)?;
    Ok(mean_squared(
        d.dx.iter().zip(&d.dy).map(|(&dx, &dy)| dx - alpha * dy),
        d.pairs.len(),
    ))
}

/// `mean over pairs of (D_p(f_s, f_t) − γ·D_y(y_s, y_t))²`.
pub fn prompt_corr_loss<P, Y>(
    kernel_p: &P,
    kernel_y: &Y,
    batch: &CrossViewBatch,
    gamma: f64,
    pairing: Pairing,
) -> Result<f64>
where
    P: CrossViewMetric + ?Sized,
    Y: CrossViewMetric + ?Sized,
{
    if !batch.has_prompts() {
        return Err(Error::InvalidConfig("prompt loss needs prompt embeddings".into()));
    }
    let dy = segmentation_distances(kernel_y, batch, pairing)?;
    let fs = prepare_source(kernel_p, &batch.fps)?;
    let ft = prepare_target(kernel_p, &batch.fpt)?;
    let pairs = pairing.pairs(batch.source_len(), batch.target_len());
    let dp = pair_distances(&fs, &ft, &pairs);
    Ok(mean_squared(
        dp.iter().zip(&dy).map(|(&p, &y)| p - gamma * y),
        pairs.len(),
    ))
}

fn segmentation_distances<Y: CrossViewMetric + ?Sized>(
    kernel_y: &Y,
    batch: &CrossViewBatch,
    pairing: Pairing,
) -> Result<Vec<f64>> {
    check_dim(kernel_y, &batch.ys)?;
    let ys = prepare_source(kernel_y, &batch.ys)?;
    let yt = prepare_target(kernel_y, &batch.yt)?;
    let pairs = pairing.pairs(batch.source_len(), batch.target_len());
    Ok(pair_distances(&ys, &yt, &pairs))
}

/// `sup + λ_I·geo + λ_P·prompt`.
pub fn total_objective(sup_loss: f64, geo_loss: f64, prompt_loss: f64, cfg: &AdaptConfig) -> f64 {
    sup_loss + cfg.lambda_i * geo_loss + cfg.lambda_p * prompt_loss
}

/// Distances and prepared vectors shared by the losses and the gradient.
struct Distances {
    pairs: Vec<(usize, usize)>,
    dx: Vec<f64>,
    dy: Vec<f64>,
    dp: Option<Vec<f64>>,
    ys: Vec<QVector>,
    yt: Vec<QVector>,
}

impl Distances {
    fn compute<X, Y>(
        kernel_x: &X,
        kernel_y: &Y,
        kernel_p: Option<&dyn CrossViewMetric>,
        batch: &CrossViewBatch,
        pairing: Pairing,
    ) -> Result<Self>
    where
        X: CrossViewMetric + ?Sized,
        Y: CrossViewMetric + ?Sized,
    {
        check_dim(kernel_x, &batch.xs)?;
        check_dim(kernel_y, &batch.ys)?;
        let pairs = pairing.pairs(batch.source_len(), batch.target_len());
        let xs = prepare_source(kernel_x, &batch.xs)?;
        let xt = prepare_target(kernel_x, &batch.xt)?;
        let ys = prepare_source(kernel_y, &batch.ys)?;
        let yt = prepare_target(kernel_y, &batch.yt)?;
        let dx = pair_distances(&xs, &xt, &pairs);
        let dy = pair_distances(&ys, &yt, &pairs);
        let dp = match kernel_p {
            Some(kp) => {
                if !batch.has_prompts() {
                    return Err(Error::InvalidConfig("prompt loss needs prompt embeddings".into()));
                }
                check_dim(kp, &batch.fps)?;
                let fs = prepare_source(kp, &batch.fps)?;
                let ft = prepare_target(kp, &batch.fpt)?;
                Some(pair_distances(&fs, &ft, &pairs))
            }
            None => None,
        };
        Ok(Self {
            pairs,
            dx,
            dy,
            dp,
            ys,
            yt,
        })
    }
}

/// Loss values and target-prediction gradients from one pass over the batch.
#[derive(Debug, Clone)]
pub struct AdaptTerms {
    pub geo_loss: f64,
    /// Zero when no prompt kernel is given.
    pub prompt_loss: f64,
    /// Gradient of `λ_I·geo + λ_P·prompt` with respect to each `yt` vector.
    pub grad_yt: Vec<DVector<f64>>,
    pub pair_dx: Vec<f64>,
    pub pair_dy: Vec<f64>,
}

/// Evaluates the adaptation losses and their gradient with respect to the
/// target predictions under the frozen-kernel contract. `kernel_p = None`
/// drops the prompt term.
pub fn adaptation_terms<X, Y>(
    kernel_x: &X,
    kernel_y: &Y,
    kernel_p: Option<&dyn CrossViewMetric>,
    batch: &CrossViewBatch,
    cfg: &AdaptConfig,
) -> Result<AdaptTerms>
where
    X: CrossViewMetric + ?Sized,
    Y: CrossViewMetric + ?Sized,
{
    let d = Distances::compute(kernel_x, kernel_y, kernel_p, batch, cfg.pairing)?;
    let count = d.pairs.len() as f64;
    let geo_res: Vec<f64> = d.dx.iter().zip(&d.dy).map(|(&x, &y)| x - cfg.alpha * y).collect();
    let prompt_res: Option<Vec<f64>> =
        d.dp.as_ref()
            .map(|dp| dp.iter().zip(&d.dy).map(|(&p, &y)| p - cfg.gamma * y).collect());

    let geo_loss = geo_res.iter().map(|r| r * r).sum::<f64>() / count;
    let prompt_loss = prompt_res
        .as_ref()
        .map_or(0.0, |r| r.iter().map(|r| r * r).sum::<f64>() / count);

    // d/dD_y of λ_I(·)² + λ_P(·)², averaged over pairs.
    let coeff: Vec<f64> = (0..d.pairs.len())
        .map(|k| {
            let mut c = cfg.lambda_i * geo_res[k] * (-cfg.alpha);
            if let Some(p) = &prompt_res {
                c += cfg.lambda_p * p[k] * (-cfg.gamma);
            }
            2.0 * c / count
        })
        .collect();

    // Group pair indices by target so each gradient is reduced in pair order.
    let mut by_target: Vec<Vec<usize>> = vec![Vec::new(); batch.target_len()];
    for (k, &(_, j)) in d.pairs.iter().enumerate() {
        by_target[j].push(k);
    }
    let dim = d.yt.first().map_or(0, |q| q.v.len());
    let grad_yt = par::map_range(batch.target_len(), |j| {
        let mut g = DVector::zeros(dim);
        for &k in &by_target[j] {
            if coeff[k] == 0.0 {
                continue;
            }
            let (i, _) = d.pairs[k];
            g.axpy(coeff[k], &d.ys[i].distance_grad_wrt_other(&d.yt[j]), 1.0);
        }
        g
    });

    Ok(AdaptTerms {
        geo_loss,
        prompt_loss,
        grad_yt,
        pair_dx: d.dx,
        pair_dy: d.dy,
    })
}

/// Gradient of `λ_I·geo + λ_P·prompt` with respect to each target prediction.
pub fn grad_wrt_target_preds<X, Y, P>(
    kernel_x: &X,
    kernel_y: &Y,
    kernel_p: &P,
    batch: &CrossViewBatch,
    cfg: &AdaptConfig,
) -> Result<Vec<DVector<f64>>>
where
    X: CrossViewMetric + ?Sized,
    Y: CrossViewMetric + ?Sized,
    P: CrossViewMetric,
{
    let kp: Option<&dyn CrossViewMetric> = if batch.has_prompts() { Some(kernel_p) } else { None };
    Ok(adaptation_terms(kernel_x, kernel_y, kp, batch, cfg)?.grad_yt)
}

/// Relative error ‖a − b‖₂ / max(‖a‖₂, ‖b‖₂), zero when both vanish.
pub fn relative_error(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).norm() / scale
    }
}

/// Central finite-difference gradient of `λ_I·geo + λ_P·prompt` with respect
/// to every target prediction entry.
pub fn finite_difference_grad<X, Y>(
    kernel_x: &X,
    kernel_y: &Y,
    kernel_p: Option<&dyn CrossViewMetric>,
    batch: &CrossViewBatch,
    cfg: &AdaptConfig,
    step: f64,
) -> Result<Vec<DVector<f64>>>
where
    X: CrossViewMetric + ?Sized,
    Y: CrossViewMetric + ?Sized,
{
    let objective = |b: &CrossViewBatch| -> Result<f64> {
        let geo = cross_view_geo_loss(kernel_x, kernel_y, b, cfg.alpha, cfg.pairing)?;
        let prompt = match kernel_p {
            Some(kp) => prompt_corr_loss(kp, kernel_y, b, cfg.gamma, cfg.pairing)?,
            None => 0.0,
        };
        Ok(total_objective(0.0, geo, prompt, cfg))
    };
    let mut out = Vec::with_capacity(batch.target_len());
    let mut work = batch.clone();
    for j in 0..batch.target_len() {
        let mut g = DVector::zeros(batch.yt[j].len());
        for e in 0..g.len() {
            let orig = work.yt[j][e];
            work.yt[j][e] = orig + step;
            let up = objective(&work)?;
            work.yt[j][e] = orig - step;
            let down = objective(&work)?;
            work.yt[j][e] = orig;
            g[e] = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}
