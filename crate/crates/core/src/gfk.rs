//! The geodesic flow kernel between two subspaces and the cosine distance it
//! induces.
//!
//! Along the geodesic Π(ν) = PₛU₁Γ(ν) − RU₂Σ(ν), ν ∈ [0, 1], the kernel
//! integrates the projections Π(ν)Π(ν)ᵀ. In the rotated basis
//! `[PₛU₁  RU₂]` the integral is block-diagonal per principal angle ω:
//!
//! ```text
//! λ₁ = 1 + sin 2ω / 2ω,   λ₂ = (cos 2ω − 1) / 2ω,   λ₃ = 1 − sin 2ω / 2ω
//! Q  = [PₛU₁  RU₂] [Λ₁ Λ₂; Λ₂ Λ₃] [PₛU₁  RU₂]ᵀ
//! ```
//!
//! These λ carry a factor of two relative to the raw ν-average, so identical
//! subspaces give Q = 2PₛPₛᵀ. The quadrature oracle uses the same scaling.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::subspace::{principal_angles, PrincipalAngles, Subspace};

/// Default threshold on 2ω below which the λ series expansions are used.
pub const SMALL_ANGLE_EPS: f64 = 1e-4;

/// Q-norms at or below this are rejected by the cosine distance.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Diagonal entries (λ₁, λ₂, λ₃) for one principal angle.
pub fn lambdas(omega: f64, small_angle_eps: f64) -> (f64, f64, f64) {
    let x = 2.0 * omega;
    if x < small_angle_eps {
        let x2 = x * x;
        (2.0 - x2 / 6.0, -x / 2.0 + x * x2 / 24.0, x2 / 6.0)
    } else {
        let sinc = x.sin() / x;
        (1.0 + sinc, (x.cos() - 1.0) / x, 1.0 - sinc)
    }
}

/// Lower end of λ₂ = −sin²ω/ω over ω ∈ [0, π/2] (attained near ω ≈ 1.1656).
pub const LAMBDA2_MIN: f64 = -0.724_611_353_775_61;

/// Anything that defines a cross-view inner product `aᵀQb` between centered
/// source and target vectors.
pub trait CrossViewMetric: Sync {
    fn ambient_dim(&self) -> usize;
    /// Computes `Q·v`.
    fn apply(&self, v: &DVector<f64>) -> DVector<f64>;
    fn source_mean(&self) -> &DVector<f64>;
    fn target_mean(&self) -> &DVector<f64>;

    fn center_source(&self, v: &DVector<f64>) -> DVector<f64> {
        v - self.source_mean()
    }

    fn center_target(&self, v: &DVector<f64>) -> DVector<f64> {
        v - self.target_mean()
    }

    /// `1 − aᵀQb / (‖a‖_Q‖b‖_Q)` on already-centered vectors.
    fn distance(&self, a: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
        let a = QVector::new(self, a.clone())?;
        let b = QVector::new(self, b.clone())?;
        Ok(a.distance(&b))
    }

    /// Centers `source` and `target` by their domain means, then measures.
    fn cross_distance(&self, source: &DVector<f64>, target: &DVector<f64>) -> Result<f64> {
        self.distance(&self.center_source(source), &self.center_target(target))
    }
}

/// A vector together with `Q·v` and its Q-norm, so pairwise evaluation costs
/// one dot product per pair.
#[derive(Debug, Clone)]
pub struct QVector {
    pub v: DVector<f64>,
    pub qv: DVector<f64>,
    pub norm: f64,
}

impl QVector {
    pub fn new<M: CrossViewMetric + ?Sized>(metric: &M, v: DVector<f64>) -> Result<Self> {
        if v.len() != metric.ambient_dim() {
            return Err(Error::DimensionMismatch {
                expected: metric.ambient_dim(),
                found: v.len(),
            });
        }
        let qv = metric.apply(&v);
        let norm = v.dot(&qv).max(0.0).sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("Q-norm"));
        }
        if norm <= DEGENERATE_NORM {
            return Err(Error::DegenerateVector { norm });
        }
        Ok(Self { v, qv, norm })
    }

    pub fn cosine(&self, other: &QVector) -> f64 {
        (self.v.dot(&other.qv) / (self.norm * other.norm)).clamp(-1.0, 1.0)
    }

    pub fn distance(&self, other: &QVector) -> f64 {
        1.0 - self.cosine(other)
    }

    /// ∂D(a, b)/∂b with a = `self`, b = `other`.
    pub fn distance_grad_wrt_other(&self, other: &QVector) -> DVector<f64> {
        let denom = self.norm * other.norm;
        let inner = self.v.dot(&other.qv);
        let mut g = &self.qv * (-1.0 / denom);
        g.axpy(inner / (denom * other.norm * other.norm), &other.qv, 1.0);
        g
    }
}

/// Per-angle diagnostics written next to a kernel on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelDiagnostics {
    pub ambient_dim: usize,
    pub subspace_dim: usize,
    pub omegas: Vec<f64>,
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub lambda3: Vec<f64>,
    pub source_mean: Vec<f64>,
    pub target_mean: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GeodesicFlowKernel {
    source: Subspace,
    target_mean: DVector<f64>,
    angles: PrincipalAngles,
    /// PₛU₁, D×N.
    source_rot: DMatrix<f64>,
    /// RU₂, D×N.
    complement_rot: DMatrix<f64>,
    lambda1: DVector<f64>,
    lambda2: DVector<f64>,
    lambda3: DVector<f64>,
    q: DMatrix<f64>,
}

impl GeodesicFlowKernel {
    pub fn build(source: &Subspace, target: &Subspace) -> Result<Self> {
        Self::build_with(source, target, SMALL_ANGLE_EPS)
    }

    pub fn build_with(source: &Subspace, target: &Subspace, small_angle_eps: f64) -> Result<Self> {
        let angles = principal_angles(source, target)?;
        let n = source.dim();
        let source_rot = source.basis() * &angles.u1;
        let complement_rot = &angles.complement * &angles.u2;

        let mut lambda1 = DVector::zeros(n);
        let mut lambda2 = DVector::zeros(n);
        let mut lambda3 = DVector::zeros(n);
        for i in 0..n {
            let (l1, l2, l3) = lambdas(angles.omegas[i], small_angle_eps);
            lambda1[i] = l1;
            lambda2[i] = l2;
            lambda3[i] = l3;
        }

        // Q = A Λ₁ Aᵀ + A Λ₂ Bᵀ + B Λ₂ Aᵀ + B Λ₃ Bᵀ with A = PₛU₁, B = RU₂.
        let scale_cols = |m: &DMatrix<f64>, d: &DVector<f64>| {
            let mut out = m.clone();
            for (c, &s) in d.iter().enumerate() {
                out.column_mut(c).scale_mut(s);
            }
            out
        };
        let left = scale_cols(&source_rot, &lambda1) + scale_cols(&complement_rot, &lambda2);
        let right = scale_cols(&source_rot, &lambda2) + scale_cols(&complement_rot, &lambda3);
        let mut q = &left * source_rot.transpose() + &right * complement_rot.transpose();
        q = (&q + q.transpose()) * 0.5;
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel matrix"));
        }

        Ok(Self {
            source: source.clone(),
            target_mean: target.mean().clone(),
            angles,
            source_rot,
            complement_rot,
            lambda1,
            lambda2,
            lambda3,
            q,
        })
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn source(&self) -> &Subspace {
        &self.source
    }

    pub fn complement(&self) -> &DMatrix<f64> {
        &self.angles.complement
    }

    pub fn omegas(&self) -> &DVector<f64> {
        &self.angles.omegas
    }

    pub fn u1(&self) -> &DMatrix<f64> {
        &self.angles.u1
    }

    pub fn u2(&self) -> &DMatrix<f64> {
        &self.angles.u2
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.angles.v
    }

    pub fn lambda1(&self) -> &DVector<f64> {
        &self.lambda1
    }

    pub fn lambda2(&self) -> &DVector<f64> {
        &self.lambda2
    }

    pub fn lambda3(&self) -> &DVector<f64> {
        &self.lambda3
    }

    /// The subspace Π(ν) on the geodesic, as a D×N orthonormal matrix.
    pub fn flow_subspace(&self, nu: f64) -> Result<DMatrix<f64>> {
        if !(0.0..=1.0).contains(&nu) {
            return Err(Error::DomainError(format!("flow parameter {nu} outside [0, 1]")));
        }
        Ok(flow_at(&self.source_rot, &self.complement_rot, &self.angles.omegas, nu))
    }

    /// `aᵀQb` for centered vectors.
    pub fn inner(&self, a: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
        let d = self.ambient_dim();
        for v in [a, b] {
            if v.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: v.len(),
                });
            }
        }
        Ok(a.dot(&(&self.q * b)))
    }

    pub fn diagnostics(&self) -> KernelDiagnostics {
        KernelDiagnostics {
            ambient_dim: self.ambient_dim(),
            subspace_dim: self.source.dim(),
            omegas: self.angles.omegas.iter().copied().collect(),
            lambda1: self.lambda1.iter().copied().collect(),
            lambda2: self.lambda2.iter().copied().collect(),
            lambda3: self.lambda3.iter().copied().collect(),
            source_mean: self.source.mean().iter().copied().collect(),
            target_mean: self.target_mean.iter().copied().collect(),
        }
    }
}

impl CrossViewMetric for GeodesicFlowKernel {
    fn ambient_dim(&self) -> usize {
        self.q.nrows()
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.q * v
    }

    fn source_mean(&self) -> &DVector<f64> {
        self.source.mean()
    }

    fn target_mean(&self) -> &DVector<f64> {
        &self.target_mean
    }
}

/// A fixed D×D kernel loaded from disk, with optional centering means.
#[derive(Debug, Clone)]
pub struct DenseMetric {
    q: DMatrix<f64>,
    source_mean: DVector<f64>,
    target_mean: DVector<f64>,
}

impl DenseMetric {
    pub fn new(q: DMatrix<f64>, source_mean: DVector<f64>, target_mean: DVector<f64>) -> Result<Self> {
        let d = q.nrows();
        if q.ncols() != d {
            return Err(Error::ShapeMismatch(format!(
                "kernel must be square, got {}x{}",
                d,
                q.ncols()
            )));
        }
        for m in [&source_mean, &target_mean] {
            if m.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: m.len(),
                });
            }
        }
        Ok(Self {
            q,
            source_mean,
            target_mean,
        })
    }
}

impl CrossViewMetric for DenseMetric {
    fn ambient_dim(&self) -> usize {
        self.q.nrows()
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.q * v
    }

    fn source_mean(&self) -> &DVector<f64> {
        &self.source_mean
    }

    fn target_mean(&self) -> &DVector<f64> {
        &self.target_mean
    }
}

/// Q = I: plain cosine distance in the ambient space, keeping the domain means.
#[derive(Debug, Clone)]
pub struct EuclideanMetric {
    source_mean: DVector<f64>,
    target_mean: DVector<f64>,
}

impl EuclideanMetric {
    pub fn new(source_mean: DVector<f64>, target_mean: DVector<f64>) -> Result<Self> {
        if source_mean.len() != target_mean.len() {
            return Err(Error::DimensionMismatch {
                expected: source_mean.len(),
                found: target_mean.len(),
            });
        }
        Ok(Self {
            source_mean,
            target_mean,
        })
    }

    /// Same centering as an existing kernel.
    pub fn matching<M: CrossViewMetric + ?Sized>(metric: &M) -> Self {
        Self {
            source_mean: metric.source_mean().clone(),
            target_mean: metric.target_mean().clone(),
        }
    }
}

impl CrossViewMetric for EuclideanMetric {
    fn ambient_dim(&self) -> usize {
        self.source_mean.len()
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        v.clone()
    }

    fn source_mean(&self) -> &DVector<f64> {
        &self.source_mean
    }

    fn target_mean(&self) -> &DVector<f64> {
        &self.target_mean
    }
}

fn flow_at(source_rot: &DMatrix<f64>, complement_rot: &DMatrix<f64>, omegas: &DVector<f64>, nu: f64) -> DMatrix<f64> {
    let mut pi = source_rot.clone();
    for (i, &w) in omegas.iter().enumerate() {
        let (s, c) = (nu * w).sin_cos();
        let mut col = pi.column_mut(i);
        col.scale_mut(c);
        col.axpy(-s, &complement_rot.column(i), 1.0);
    }
    pi
}

/// Quadrature rule for [`quadrature_q`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadratureRule {
    Trapezoid,
    /// Composite Simpson on the same grid; needs an odd number of points.
    Simpson,
}

/// Numerical `2·∫₀¹ Π(ν)Π(ν)ᵀ dν` on `n_points` equally spaced nodes. This
/// integrates the flow directly and never touches the λ formulas, so it
/// serves as an oracle for [`GeodesicFlowKernel::q`].
pub fn quadrature_q(
    source: &Subspace,
    target: &Subspace,
    n_points: usize,
    rule: QuadratureRule,
) -> Result<DMatrix<f64>> {
    if n_points < 3 || n_points.is_multiple_of(2) {
        return Err(Error::DomainError(format!(
            "quadrature needs an odd number of points >= 3, got {n_points}"
        )));
    }
    let angles = principal_angles(source, target)?;
    let source_rot = source.basis() * &angles.u1;
    let complement_rot = &angles.complement * &angles.u2;
    let (d, n) = source_rot.shape();
    let h = 1.0 / (n_points - 1) as f64;

    let weight = |k: usize| -> f64 {
        let end = k == 0 || k == n_points - 1;
        match rule {
            QuadratureRule::Trapezoid => {
                if end {
                    h / 2.0
                } else {
                    h
                }
            }
            QuadratureRule::Simpson => {
                if end {
                    h / 3.0
                } else if k % 2 == 1 {
                    4.0 * h / 3.0
                } else {
                    2.0 * h / 3.0
                }
            }
        }
    };

    // Σₖ wₖ ΠₖΠₖᵀ = S Sᵀ with S = [√w₀ Π₀, √w₁ Π₁, …].
    let mut stacked = DMatrix::zeros(d, n * n_points);
    for k in 0..n_points {
        let pi = flow_at(&source_rot, &complement_rot, &angles.omegas, k as f64 * h);
        stacked.columns_mut(k * n, n).copy_from(&(pi * weight(k).sqrt()));
    }
    let q = &stacked * stacked.transpose() * 2.0;
    Ok((&q + q.transpose()) * 0.5)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}
