//! Segmentation metrics and the empirical checks on the cross-view metric:
//! mIoU, the linear-relation study, the upper-bound check and the triangle probe.

use nalgebra::DVector;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gfk::{CrossViewMetric, QVector};
use crate::par;
use crate::sampling;

/// Global pixel counts; rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouResult {
    /// `None` for classes absent from both truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::DimensionMismatch {
                expected: classes * classes,
                found: counts.len(),
            });
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, truth: &[u8], pred: &[u8]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::ShapeMismatch(format!(
                "truth has {} pixels, prediction {}",
                truth.len(),
                pred.len()
            )));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            let (t, p) = (t as usize, p as usize);
            if t >= self.classes || p >= self.classes {
                return Err(Error::DomainError(format!("class index out of range: {t} / {p}")));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::DimensionMismatch {
                expected: self.classes,
                found: other.classes,
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// IoU per class from the global confusion matrix; zero-union classes are
/// left out of the mean.
pub fn miou(conf: &ConfusionMatrix) -> Result<MiouResult> {
    let c = conf.classes;
    let stats: Vec<(u64, u64)> = (0..c)
        .map(|k| {
            let tp = conf.get(k, k);
            let fn_: u64 = (0..c).map(|p| conf.get(k, p)).sum::<u64>() - tp;
            let fp: u64 = (0..c).map(|t| conf.get(t, k)).sum::<u64>() - tp;
            (tp, tp + fp + fn_)
        })
        .collect();
    miou_from_stats(&stats)
}

/// mIoU from per-class `(intersection, union)` counts.
pub fn miou_from_stats(stats: &[(u64, u64)]) -> Result<MiouResult> {
    let per_class_iou: Vec<Option<f64>> = stats
        .iter()
        .map(|&(inter, union)| (union > 0).then(|| inter as f64 / union as f64))
        .collect();
    let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    Ok(MiouResult {
        miou: present.iter().sum::<f64>() / present.len() as f64,
        per_class_iou,
    })
}

pub const MIN_HYPOTHESIS_PAIRS: usize = 30;

/// One sampled (source i, target j) pair of the linear-relation study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRow {
    pub source: usize,
    pub target: usize,
    pub dx: f64,
    pub dy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    /// `None` when either distance has zero variance.
    pub pearson_r: Option<f64>,
    /// Least-squares slope of `D_x ≈ α̂·D_y` through the origin.
    pub alpha_hat: Option<f64>,
    /// Ordinary least-squares fit `D_x ≈ slope·D_y + intercept`.
    pub ols_slope: Option<f64>,
    pub ols_intercept: Option<f64>,
    pub samples: usize,
    pub degenerate: bool,
    pub rows: Vec<HypothesisRow>,
}

fn prepared<M: CrossViewMetric + ?Sized>(metric: &M, vs: &[DVector<f64>], source: bool) -> Result<Vec<QVector>> {
    par::try_map_range(vs.len(), |i| {
        let c = if source {
            metric.center_source(&vs[i])
        } else {
            metric.center_target(&vs[i])
        };
        QVector::new(metric, c)
    })
}

/// Measures `D_x(x_s⁽ⁱ⁾, x_t⁽ʲ⁾)` against `D_y(y_s⁽ⁱ⁾, y_t⁽ʲ⁾)` over sampled index
/// pairs and summarizes their linear relation. With `max_pairs` at least
/// `n_s·n_t` every pair is used; otherwise pairs are drawn without replacement.
#[allow(clippy::too_many_arguments)]
pub fn validate_linear_hypothesis<X, Y>(
    kernel_x: &X,
    kernel_y: &Y,
    xs: &[DVector<f64>],
    xt: &[DVector<f64>],
    ys: &[DVector<f64>],
    yt: &[DVector<f64>],
    max_pairs: usize,
    seed: u64,
) -> Result<HypothesisReport>
where
    X: CrossViewMetric + ?Sized,
    Y: CrossViewMetric + ?Sized,
{
    if xs.len() != ys.len() || xt.len() != yt.len() {
        return Err(Error::ShapeMismatch("image and segmentation counts differ".into()));
    }
    let total = xs.len() * xt.len();
    let n = total.min(max_pairs);
    if n < MIN_HYPOTHESIS_PAIRS {
        return Err(Error::InsufficientPairs {
            found: n,
            required: MIN_HYPOTHESIS_PAIRS,
        });
    }
    let mut idx: Vec<usize> = if n == total {
        (0..total).collect()
    } else {
        sample(&mut sampling::rng(seed), total, n).into_vec()
    };
    idx.sort_unstable();

    let (qxs, qxt) = (prepared(kernel_x, xs, true)?, prepared(kernel_x, xt, false)?);
    let (qys, qyt) = (prepared(kernel_y, ys, true)?, prepared(kernel_y, yt, false)?);
    let rows: Vec<HypothesisRow> = idx
        .iter()
        .map(|&k| {
            let (i, j) = (k / xt.len(), k % xt.len());
            HypothesisRow {
                source: i,
                target: j,
                dx: qxs[i].distance(&qxt[j]),
                dy: qys[i].distance(&qyt[j]),
            }
        })
        .collect();

    let m = rows.len() as f64;
    let mean_x = rows.iter().map(|r| r.dy).sum::<f64>() / m;
    let mean_y = rows.iter().map(|r| r.dx).sum::<f64>() / m;
    let (mut sxx, mut syy, mut sxy, mut s00, mut s0y) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for r in &rows {
        let (u, v) = (r.dy - mean_x, r.dx - mean_y);
        sxx += u * u;
        syy += v * v;
        sxy += u * v;
        s00 += r.dy * r.dy;
        s0y += r.dy * r.dx;
    }
    const VAR_EPS: f64 = 1e-24;
    let degenerate = sxx <= VAR_EPS * m || syy <= VAR_EPS * m;
    let pearson_r = (!degenerate).then(|| sxy / (sxx * syy).sqrt());
    let ols_slope = (sxx > VAR_EPS * m).then(|| sxy / sxx);
    Ok(HypothesisReport {
        pearson_r,
        alpha_hat: (s00 > VAR_EPS * m).then(|| s0y / s00),
        ols_intercept: ols_slope.map(|s| mean_y - s * mean_x),
        ols_slope,
        samples: rows.len(),
        degenerate,
        rows,
    })
}

/// `(x_s, x̄_t, x_t, y_s, ȳ_t, y_t)`: a source sample, an unmatched target
/// sample and the matched target sample, in image and segmentation space.
#[derive(Debug, Clone)]
pub struct BoundTuple {
    pub xs: DVector<f64>,
    pub xt_bar: DVector<f64>,
    pub xt: DVector<f64>,
    pub ys: DVector<f64>,
    pub yt_bar: DVector<f64>,
    pub yt: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    /// Largest `lhs − rhs`; never positive beyond rounding.
    pub max_violation: f64,
    pub n_checked: usize,
    pub constant: f64,
}

pub fn upper_bound_constant(alpha: f64) -> f64 {
    2.0 * (1.0 + alpha)
}

/// Checks `D_x(x_s,x̄_t) − αD_y(y_s,ȳ_t) ≤ D_x(x_s,x_t) − αD_y(y_s,y_t) + 2(1+α)`.
pub fn check_upper_bound<X, Y>(kernel_x: &X, kernel_y: &Y, tuples: &[BoundTuple], alpha: f64) -> Result<BoundCheck>
where
    X: CrossViewMetric + ?Sized,
    Y: CrossViewMetric + ?Sized,
{
    let constant = upper_bound_constant(alpha);
    let margins = par::try_map_range(tuples.len(), |k| -> Result<f64> {
        let t = &tuples[k];
        let lhs = kernel_x.cross_distance(&t.xs, &t.xt_bar)? - alpha * kernel_y.cross_distance(&t.ys, &t.yt_bar)?;
        let rhs = kernel_x.cross_distance(&t.xs, &t.xt)? - alpha * kernel_y.cross_distance(&t.ys, &t.yt)? + constant;
        Ok(lhs - rhs)
    })?;
    Ok(BoundCheck {
        max_violation: margins.into_iter().fold(f64::NEG_INFINITY, f64::max),
        n_checked: tuples.len(),
        constant,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriangleReport {
    pub violation_rate: f64,
    /// Largest `D(a,c) − D(a,b) − D(b,c)`; positive values are violations.
    pub worst_margin: f64,
    pub n_triples: usize,
}

/// Samples Gaussian triples in the ambient space and counts triangle
/// inequality failures of the (uncentered) kernel distance.
pub fn triangle_probe<M: CrossViewMetric + ?Sized>(kernel: &M, n_triples: usize, seed: u64) -> Result<TriangleReport> {
    if n_triples == 0 {
        return Err(Error::DomainError("triangle probe needs at least one triple".into()));
    }
    let d = kernel.ambient_dim();
    let mut rng = sampling::rng(seed);
    let triples: Vec<[DVector<f64>; 3]> = (0..n_triples)
        .map(|_| std::array::from_fn(|_| sampling::gaussian_vector(&mut rng, d)))
        .collect();
    probe_triples(kernel, &triples)
}

/// Triangle probe over caller-supplied triples `(a, b, c)`.
pub fn probe_triples<M: CrossViewMetric + ?Sized>(kernel: &M, triples: &[[DVector<f64>; 3]]) -> Result<TriangleReport> {
    if triples.is_empty() {
        return Err(Error::DomainError("triangle probe needs at least one triple".into()));
    }
    let margins = par::try_map_range(triples.len(), |k| -> Result<f64> {
        let [a, b, c] = &triples[k];
        let (a, b, c) = (
            QVector::new(kernel, a.clone())?,
            QVector::new(kernel, b.clone())?,
            QVector::new(kernel, c.clone())?,
        );
        Ok(a.distance(&c) - a.distance(&b) - b.distance(&c))
    })?;
    let violations = margins.iter().filter(|&&m| m > 1e-12).count();
    Ok(TriangleReport {
        violation_rate: violations as f64 / triples.len() as f64,
        worst_margin: margins.into_iter().fold(f64::NEG_INFINITY, f64::max),
        n_triples: triples.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gfk::{EuclideanMetric, GeodesicFlowKernel};
    use crate::sampling::{gaussian_vector, random_subspace, rng};
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction() {
        let mut c = ConfusionMatrix::new(3);
        c.add(&[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
        let r = miou(&c).unwrap();
        assert_eq!(r.miou, 1.0);
        assert!(r.per_class_iou.iter().all(|v| *v == Some(1.0)));
    }

    #[test]
    fn hand_example_gives_three_eighths() {
        let r = miou_from_stats(&[(50, 100), (25, 100)]).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(0.5), Some(0.25)]);
        assert_eq!(r.miou, 0.375);
    }

    #[test]
    fn zero_union_class_is_excluded() {
        // Class 0: 50 / (50 + 50). Class 2: 25 / (25 + 50). Class 1 never occurs.
        let c = ConfusionMatrix::from_counts(3, vec![50, 0, 50, 0, 0, 0, 0, 0, 25]).unwrap();
        let r = miou(&c).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(0.5), None, Some(1.0 / 3.0)]);
        assert!((r.miou - (0.5 + 1.0 / 3.0) / 2.0).abs() < 1e-15);
        let with_empty = miou_from_stats(&[(50, 100), (0, 0), (25, 100)]).unwrap();
        assert_eq!(with_empty.miou, 0.375);
        assert!(matches!(miou(&ConfusionMatrix::new(4)), Err(Error::EmptyEvaluation)));
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let mut c = ConfusionMatrix::new(2);
        assert!(c.add(&[0, 1], &[0]).is_err());
        assert!(c.add(&[0, 2], &[0, 1]).is_err());
    }

    proptest! {
        #[test]
        fn miou_is_relabeling_invariant(counts in proptest::collection::vec(0u64..50, 16), perm_seed in 0u64..24) {
            let c = ConfusionMatrix::from_counts(4, counts.clone()).unwrap();
            let mut perm: Vec<usize> = (0..4).collect();
            let mut s = perm_seed as usize;
            for i in (1..4).rev() {
                perm.swap(i, s % (i + 1));
                s /= i + 1;
            }
            let mut permuted = vec![0u64; 16];
            for t in 0..4 {
                for p in 0..4 {
                    permuted[perm[t] * 4 + perm[p]] = counts[t * 4 + p];
                }
            }
            let d = ConfusionMatrix::from_counts(4, permuted).unwrap();
            match (miou(&c), miou(&d)) {
                (Ok(a), Ok(b)) => prop_assert!((a.miou - b.miou).abs() < 1e-12),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false),
            }
        }
    }

    #[test]
    fn identical_spaces_give_unit_slope() {
        let mut g = rng(3);
        let xs: Vec<_> = (0..8).map(|_| gaussian_vector(&mut g, 12)).collect();
        let xt: Vec<_> = (0..8).map(|_| gaussian_vector(&mut g, 12)).collect();
        let m = EuclideanMetric::new(DVector::zeros(12), DVector::zeros(12)).unwrap();
        let r = validate_linear_hypothesis(&m, &m, &xs, &xt, &xs, &xt, 1000, 0).unwrap();
        assert_eq!(r.samples, 64);
        assert!((r.alpha_hat.unwrap() - 1.0).abs() < 1e-6);
        assert!((r.pearson_r.unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn identical_views_are_flagged_degenerate() {
        let mut g = rng(4);
        let v: Vec<_> = (0..6).map(|_| gaussian_vector(&mut g, 5)).collect();
        let m = EuclideanMetric::new(DVector::zeros(5), DVector::zeros(5)).unwrap();
        // Every source equals every target, so all distances vanish.
        let same: Vec<_> = vec![v[0].clone(); 6];
        let r = validate_linear_hypothesis(&m, &m, &same, &same, &same, &same, 100, 0).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.pearson_r, None);
        assert!(r.rows.iter().all(|row| row.dx.abs() < 1e-12 && row.dy.abs() < 1e-12));
        let few = &v[..5];
        assert!(matches!(
            validate_linear_hypothesis(&m, &m, few, &few[..5], few, &few[..5], 100, 0),
            Err(Error::InsufficientPairs { found: 25, .. })
        ));
    }

    #[test]
    fn bound_holds_with_exact_margin_on_matched_tuple() {
        let mut g = rng(5);
        let k = GeodesicFlowKernel::build(&random_subspace(&mut g, 10, 3), &random_subspace(&mut g, 10, 3)).unwrap();
        let (x, y) = (gaussian_vector(&mut g, 10), gaussian_vector(&mut g, 10));
        let (xt, yt) = (gaussian_vector(&mut g, 10), gaussian_vector(&mut g, 10));
        let t = BoundTuple {
            xs: x,
            xt_bar: xt.clone(),
            xt,
            ys: y,
            yt_bar: yt.clone(),
            yt,
        };
        let r = check_upper_bound(&k, &k, &[t], 1.5).unwrap();
        assert_eq!(r.constant, 5.0);
        assert!((r.max_violation + 5.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_vectors_never_violate() {
        let mut g = rng(6);
        let s = random_subspace(&mut g, 8, 2);
        let k = GeodesicFlowKernel::build(&s, &s).unwrap();
        let dir = s.basis().column(0).into_owned();
        let triples: Vec<[DVector<f64>; 3]> = (1..50)
            .map(|i| {
                let f = |c: f64| &dir * c;
                [f(i as f64), f(-(i as f64) * 0.5), f(2.0)]
            })
            .collect();
        let r = probe_triples(&k, &triples).unwrap();
        assert_eq!(r.violation_rate, 0.0);
        assert!(triangle_probe(&k, 0, 1).is_err());
    }
}
