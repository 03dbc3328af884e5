//! Self-contained numerical checks shared by the `check` subcommands and the
//! acceptance suite. Each returns a small serializable report; deciding
//! pass or fail against a tolerance is left to the caller.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::DVector;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::adapt_loss::{adaptation_terms, finite_difference_grad, relative_error, AdaptConfig, CrossViewBatch};
use crate::error::{Error, Result};
use crate::eval::{check_upper_bound, triangle_probe, BoundCheck, BoundTuple, TriangleReport};
use crate::gfk::{
    lambdas, quadrature_q, CrossViewMetric, EuclideanMetric, GeodesicFlowKernel, QuadratureRule, SMALL_ANGLE_EPS,
};
use crate::par;
use crate::sampling::{gaussian_vector, random_subspace, rng, rotated_pair, Rng};
use crate::subspace::{principal_angles, Subspace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelOracleReport {
    pub trials: usize,
    pub quadrature_points: usize,
    pub max_abs_diff: f64,
}

/// Compares the closed-form kernel with Simpson quadrature of the flow on
/// random pairs with `2 ≤ 2N ≤ D ≤ d_max` and `N ≤ n_max`.
pub fn kernel_oracle(
    trials: usize,
    d_max: usize,
    n_max: usize,
    points: usize,
    seed: u64,
) -> Result<KernelOracleReport> {
    let mut r = rng(seed);
    let shapes: Vec<(usize, usize, u64)> = (0..trials)
        .map(|_| {
            let n = r.random_range(1..=n_max.min(d_max / 2).max(1));
            let d = r.random_range(2 * n..=d_max.max(2 * n));
            (d, n, r.random())
        })
        .collect();
    let diffs = par::try_map_range(trials, |t| -> Result<f64> {
        let (d, n, s) = shapes[t];
        let mut r = rng(s);
        let (ps, pt) = (random_subspace(&mut r, d, n), random_subspace(&mut r, d, n));
        let closed = GeodesicFlowKernel::build(&ps, &pt)?;
        let numeric = quadrature_q(&ps, &pt, points, QuadratureRule::Simpson)?;
        Ok((closed.q() - numeric).amax())
    })?;
    Ok(KernelOracleReport {
        trials,
        quadrature_points: points,
        max_abs_diff: diffs.into_iter().fold(0.0, f64::max),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleReport {
    /// Worst error recovering planted angles of 10°, 30° and 60°.
    pub planted_error: f64,
    /// Largest angle between a subspace and itself.
    pub identical_max: f64,
    /// Worst deviation of λ₁..λ₃ from their values at ω = 0 and ω = π/2.
    pub lambda_error: f64,
}

pub fn angle_check() -> Result<AngleReport> {
    let mut planted_error: f64 = 0.0;
    for deg in [10.0f64, 30.0, 60.0] {
        let theta = deg.to_radians();
        let (ps, pt) = rotated_pair(8, &[theta]);
        let got = principal_angles(&ps, &pt)?.omegas;
        planted_error = planted_error.max((got[0] - theta).abs());
    }
    let (ps, pt) = rotated_pair(12, &[10f64.to_radians(), 30f64.to_radians(), 60f64.to_radians()]);
    let got = principal_angles(&ps, &pt)?.omegas;
    for (g, want) in got.iter().zip([10.0f64, 30.0, 60.0]) {
        planted_error = planted_error.max((g - want.to_radians()).abs());
    }

    let s = random_subspace(&mut rng(7), 20, 5);
    let identical_max = principal_angles(&s, &s)?.omegas.amax();

    let expect = [(0.0, (2.0, 0.0, 0.0)), (FRAC_PI_2, (1.0, -2.0 / PI, 1.0))];
    let lambda_error = expect
        .iter()
        .map(|&(w, (a, b, c))| {
            let (l1, l2, l3) = lambdas(w, SMALL_ANGLE_EPS);
            (l1 - a).abs().max((l2 - b).abs()).max((l3 - c).abs())
        })
        .fold(0.0, f64::max);
    Ok(AngleReport {
        planted_error,
        identical_max,
        lambda_error,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub kernels: usize,
    pub pairs_per_kernel: usize,
    pub min_distance: f64,
    pub max_distance: f64,
    pub max_self_distance: f64,
}

/// Random kernels of increasing source/target separation, including the
/// identity metric, each probed on Gaussian pairs drawn in the full space.
fn probe_kernels(seed: u64) -> Result<Vec<Box<dyn CrossViewMetric>>> {
    let mut r = rng(seed);
    let mut out: Vec<Box<dyn CrossViewMetric>> = Vec::new();
    let s = random_subspace(&mut r, 24, 6);
    out.push(Box::new(GeodesicFlowKernel::build(&s, &s)?));
    out.push(Box::new(GeodesicFlowKernel::build(
        &s,
        &random_subspace(&mut r, 24, 6),
    )?));
    let (ps, pt) = rotated_pair(16, &[0.0, 1e-6, 0.7, FRAC_PI_2]);
    out.push(Box::new(GeodesicFlowKernel::build(&ps, &pt)?));
    out.push(Box::new(EuclideanMetric::new(DVector::zeros(32), DVector::zeros(32))?));
    Ok(out)
}

pub fn metric_bounds(pairs: usize, seed: u64) -> Result<BoundsReport> {
    let kernels = probe_kernels(seed)?;
    let (mut lo, mut hi, mut selfd) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for (k, m) in kernels.iter().enumerate() {
        let d = m.ambient_dim();
        let mut r = rng(seed ^ (k as u64 + 1));
        let samples: Vec<(DVector<f64>, DVector<f64>)> = (0..pairs)
            .map(|_| (gaussian_vector(&mut r, d), gaussian_vector(&mut r, d)))
            .collect();
        // Pairs that land in the kernel's null space carry no distance.
        let dist = |a: &DVector<f64>, b: &DVector<f64>| match m.distance(a, b) {
            Err(Error::DegenerateVector { .. }) => Ok(None),
            other => other.map(Some),
        };
        let got = par::try_map_range(pairs, |i| -> Result<Option<(f64, f64)>> {
            let (a, b) = &samples[i];
            Ok(dist(a, b)?.zip(dist(a, a)?))
        })?;
        for (dab, daa) in got.into_iter().flatten() {
            lo = lo.min(dab);
            hi = hi.max(dab);
            selfd = selfd.max(daa.abs());
        }
    }
    Ok(BoundsReport {
        kernels: kernels.len(),
        pairs_per_kernel: pairs,
        min_distance: lo,
        max_distance: hi,
        max_self_distance: selfd,
    })
}

pub fn upper_bound(tuples: usize, alpha: f64, seed: u64) -> Result<BoundCheck> {
    let mut r = rng(seed);
    let kx = GeodesicFlowKernel::build(&random_subspace(&mut r, 20, 5), &random_subspace(&mut r, 20, 5))?;
    let ky = GeodesicFlowKernel::build(&random_subspace(&mut r, 16, 4), &random_subspace(&mut r, 16, 4))?;
    let list: Vec<BoundTuple> = (0..tuples)
        .map(|_| BoundTuple {
            xs: gaussian_vector(&mut r, 20),
            xt_bar: gaussian_vector(&mut r, 20),
            xt: gaussian_vector(&mut r, 20),
            ys: gaussian_vector(&mut r, 16),
            yt_bar: gaussian_vector(&mut r, 16),
            yt: gaussian_vector(&mut r, 16),
        })
        .collect();
    check_upper_bound(&kx, &ky, &list, alpha)
}

pub fn triangle(triples: usize, seed: u64) -> Result<TriangleReport> {
    let mut r = rng(seed);
    let k = GeodesicFlowKernel::build(&random_subspace(&mut r, 24, 6), &random_subspace(&mut r, 24, 6))?;
    triangle_probe(&k, triples, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub batches: usize,
    pub step: f64,
    pub max_relative_error: f64,
}

/// Per-cell class distributions: `cells` groups of `classes` entries summing to one.
fn simplex_vector(r: &mut Rng, cells: usize, classes: usize) -> DVector<f64> {
    let mut v = DVector::zeros(cells * classes);
    for c in 0..cells {
        let w: Vec<f64> = (0..classes).map(|_| r.random_range(0.05..1.0)).collect();
        let s: f64 = w.iter().sum();
        for (k, x) in w.iter().enumerate() {
            v[c * classes + k] = x / s;
        }
    }
    v
}

fn centered_subspace(r: &mut Rng, d: usize, n: usize) -> Result<Subspace> {
    let s = random_subspace(r, d, n);
    Subspace::from_basis(s.basis().clone(), gaussian_vector(r, d) * 0.1)
}

/// Analytic target-prediction gradients against central differences on
/// random batches with prompts, centered kernels and frozen bases.
pub fn gradcheck(batches: usize, step: f64, seed: u64) -> Result<GradCheckReport> {
    let cfg = AdaptConfig::default();
    let (cells, classes) = (6, 3);
    let (dx, dy, dp) = (14, cells * classes, 10);
    let mut worst: f64 = 0.0;
    for b in 0..batches {
        let mut r = rng(seed.wrapping_add(b as u64));
        let kx = GeodesicFlowKernel::build(&centered_subspace(&mut r, dx, 4)?, &centered_subspace(&mut r, dx, 4)?)?;
        let ky = GeodesicFlowKernel::build(&centered_subspace(&mut r, dy, 4)?, &centered_subspace(&mut r, dy, 4)?)?;
        let kp = GeodesicFlowKernel::build(&centered_subspace(&mut r, dp, 3)?, &centered_subspace(&mut r, dp, 3)?)?;
        let (bs, bt) = (r.random_range(2..=4), r.random_range(2..=4));
        let batch = CrossViewBatch::new(
            (0..bs).map(|_| gaussian_vector(&mut r, dx)).collect(),
            (0..bt).map(|_| gaussian_vector(&mut r, dx)).collect(),
            (0..bs).map(|_| simplex_vector(&mut r, cells, classes)).collect(),
            (0..bt).map(|_| simplex_vector(&mut r, cells, classes)).collect(),
            (0..bs).map(|_| gaussian_vector(&mut r, dp)).collect(),
            (0..bt).map(|_| gaussian_vector(&mut r, dp)).collect(),
            classes,
        )?;
        let analytic = adaptation_terms(&kx, &ky, Some(&kp), &batch, &cfg)?.grad_yt;
        let numeric = finite_difference_grad(&kx, &ky, Some(&kp), &batch, &cfg, step)?;
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(relative_error(a, n));
        }
    }
    Ok(GradCheckReport {
        batches,
        step,
        max_relative_error: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass_their_tolerances() {
        assert!(kernel_oracle(4, 16, 4, 2001, 1).unwrap().max_abs_diff < 1e-8);
        let a = angle_check().unwrap();
        assert!(a.planted_error < 1e-9 && a.identical_max < 1e-9 && a.lambda_error < 1e-12);
        let b = metric_bounds(200, 3).unwrap();
        assert!(b.min_distance >= -1e-12 && b.max_distance <= 2.0 + 1e-12 && b.max_self_distance <= 1e-9);
        assert!(upper_bound(200, 1.5, 4).unwrap().max_violation <= 1e-9);
        assert!(gradcheck(2, 1e-5, 5).unwrap().max_relative_error < 1e-4);
    }

    #[test]
    fn oracle_shapes_respect_limits() {
        // d_max below 2 forces the smallest admissible shape rather than panicking.
        assert!(kernel_oracle(2, 2, 8, 11, 0).is_ok());
    }
}
