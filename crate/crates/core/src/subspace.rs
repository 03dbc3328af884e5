//! Points on the Grassmann manifold G(N, D): orthonormal D×N bases fitted by
//! PCA, their orthogonal complements, and principal angles between pairs.
//!
//! Every orthonormal factor produced here follows one sign convention: in each
//! column the entry of largest magnitude is non-negative (first such entry on
//! ties). This makes fitting and decomposition deterministic.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Tolerance on `max|PᵀP − I|` accepted for a basis.
pub const ORTHONORMAL_TOL: f64 = 1e-10;

/// Below this, `sin ω` is treated as zero and the matching `U₂` column is
/// completed by Gram–Schmidt instead of normalization.
const SIN_ZERO: f64 = 1e-12;

/// Flips `column` so its largest-magnitude entry is non-negative. Returns
/// whether it was flipped.
fn canonical_sign(column: &[f64]) -> bool {
    let mut best = 0.0_f64;
    let mut value = 0.0_f64;
    for &x in column {
        if x.abs() > best {
            best = x.abs();
            value = x;
        }
    }
    value < 0.0
}

/// Applies the sign convention to every column of `m`.
pub fn canonicalize_columns(m: &mut DMatrix<f64>) {
    for c in 0..m.ncols() {
        if canonical_sign(m.column(c).as_slice()) {
            m.column_mut(c).neg_mut();
        }
    }
}

/// Max-norm of `MᵀM − I`.
pub fn orthonormality_error(m: &DMatrix<f64>) -> f64 {
    let g = m.transpose() * m;
    let mut worst = 0.0_f64;
    for r in 0..g.nrows() {
        for c in 0..g.ncols() {
            let target = if r == c { 1.0 } else { 0.0 };
            worst = worst.max((g[(r, c)] - target).abs());
        }
    }
    worst
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Max-norm of `AAᵀ − BBᵀ`: zero iff the orthonormal bases span the same space.
pub fn projection_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    max_abs(&(a * a.transpose() - b * b.transpose()))
}

/// Thin SVD with singular values sorted in descending order and each
/// `(uᵢ, vᵢ)` pair signed so that `uᵢ` follows the column convention.
pub(crate) fn sorted_svd(a: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested Vᵀ");
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));
    let k = order.len();
    let mut u_sorted = DMatrix::zeros(u.nrows(), k);
    let mut v_sorted = DMatrix::zeros(vt.ncols(), k);
    let mut s_sorted = DVector::zeros(k);
    for (dst, &src) in order.iter().enumerate() {
        let flip = canonical_sign(u.column(src).as_slice());
        let sign = if flip { -1.0 } else { 1.0 };
        u_sorted.set_column(dst, &(u.column(src) * sign));
        v_sorted.set_column(dst, &(vt.row(src).transpose() * sign));
        s_sorted[dst] = s[src];
    }
    (u_sorted, s_sorted, v_sorted)
}

/// An N-dimensional linear subspace of R^D with the mean used to fit it.
#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    basis: DMatrix<f64>,
    mean: DVector<f64>,
}

impl Subspace {
    /// Wraps an existing basis after checking `0 < N < D`, orthonormality and
    /// finiteness. The sign convention is applied to the stored copy.
    pub fn from_basis(mut basis: DMatrix<f64>, mean: DVector<f64>) -> Result<Self> {
        let (d, n) = basis.shape();
        if n == 0 || n >= d {
            return Err(Error::DimensionError(format!(
                "subspace dimension {n} must satisfy 0 < N < D = {d}"
            )));
        }
        if mean.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: mean.len(),
            });
        }
        if basis.iter().chain(mean.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("subspace basis"));
        }
        let err = orthonormality_error(&basis);
        if err > ORTHONORMAL_TOL {
            return Err(Error::DimensionError(format!(
                "basis columns are not orthonormal (max deviation {err:e})"
            )));
        }
        canonicalize_columns(&mut basis);
        Ok(Self { basis, mean })
    }

    /// Fits the top-`target_dim` principal directions of `samples`, one sample
    /// per row. With `center` set the column mean is removed first and kept.
    pub fn fit(samples: &DMatrix<f64>, target_dim: usize, center: bool) -> Result<Self> {
        let (count, d) = samples.shape();
        if target_dim == 0 {
            return Err(Error::DimensionError("target dimension must be positive".into()));
        }
        if center && count < 2 {
            return Err(Error::DimensionError(format!(
                "centered fitting needs at least 2 samples, got {count}"
            )));
        }
        if count == 0 {
            return Err(Error::RankDeficient {
                rank: 0,
                required: target_dim,
            });
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("samples"));
        }

        let mean = if center {
            samples.row_mean().transpose()
        } else {
            DVector::zeros(d)
        };
        let mut centered = samples.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }

        // Right singular vectors of the n×D data matrix are the principal axes.
        let (_, s, v) = sorted_svd(&centered);
        let rank = numerical_rank(&s, count.max(d));
        if rank < target_dim {
            return Err(Error::RankDeficient {
                rank,
                required: target_dim,
            });
        }
        if target_dim >= d {
            return Err(Error::DimensionError(format!(
                "subspace dimension {target_dim} must be below the ambient dimension {d}"
            )));
        }
        let mut basis = v.columns(0, target_dim).into_owned();
        canonicalize_columns(&mut basis);
        Ok(Self { basis, mean })
    }

    /// Fits from a list of equally long vectors.
    pub fn fit_vectors(samples: &[Vec<f64>], target_dim: usize, center: bool) -> Result<Self> {
        Self::fit(&rows_to_matrix(samples)?, target_dim, center)
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    /// Keeps the leading `n` basis columns.
    pub fn truncate(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.dim() {
            return Err(Error::DimensionError(format!(
                "cannot truncate a {}-dimensional subspace to {n}",
                self.dim()
            )));
        }
        Ok(Self {
            basis: self.basis.columns(0, n).into_owned(),
            mean: self.mean.clone(),
        })
    }

    /// A D×(D−N) matrix R with RᵀP = 0 and RᵀR = I, taken from the trailing
    /// columns of the full Householder QR of P.
    pub fn orthogonal_complement(&self) -> DMatrix<f64> {
        let (d, n) = self.basis.shape();
        let qr = self.basis.clone().qr();
        let mut qt = DMatrix::<f64>::identity(d, d);
        qr.q_tr_mul(&mut qt);
        let mut r = qt.transpose().columns(n, d - n).into_owned();
        canonicalize_columns(&mut r);
        r
    }
}

/// Stacks rows into an n×D matrix.
pub fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().find(|r| r.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: bad.len(),
        });
    }
    Ok(DMatrix::from_fn(rows.len(), d, |r, c| rows[r][c]))
}

fn numerical_rank(s: &DVector<f64>, scale: usize) -> usize {
    let top = s.iter().copied().fold(0.0_f64, f64::max);
    if top == 0.0 {
        return 0;
    }
    let tol = top * scale as f64 * f64::EPSILON * 8.0;
    s.iter().filter(|&&x| x > tol).count()
}

/// Output of the paired SVD `PₛᵀPₜ = U₁Γ(1)Vᵀ`, `RᵀPₜ = −U₂Σ(1)Vᵀ`.
#[derive(Debug, Clone)]
pub struct PrincipalAngles {
    /// Ascending angles in [0, π/2].
    pub omegas: DVector<f64>,
    /// N×N.
    pub u1: DMatrix<f64>,
    /// (D−N)×N with orthonormal columns.
    pub u2: DMatrix<f64>,
    /// N×N.
    pub v: DMatrix<f64>,
    /// The orthogonal complement R of the source basis used for `u2`.
    pub complement: DMatrix<f64>,
}

/// Principal angles between two subspaces of equal dimension plus the
/// rotation factors of the geodesic between them. Requires D ≥ 2N.
pub fn principal_angles(source: &Subspace, target: &Subspace) -> Result<PrincipalAngles> {
    let (d, n) = (source.ambient_dim(), source.dim());
    if target.ambient_dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: target.ambient_dim(),
        });
    }
    if target.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: target.dim(),
        });
    }
    if d < 2 * n {
        return Err(Error::AmbientTooSmall { ambient: d, dim: n });
    }

    let ps = source.basis();
    let pt = target.basis();
    let complement = source.orthogonal_complement();

    let (u1, cosines, v) = sorted_svd(&(ps.transpose() * pt));
    // Columns of RᵀPₜV have norms sin ωᵢ and are mutually orthogonal.
    let w = complement.transpose() * pt * &v;
    let sines: Vec<f64> = w.column_iter().map(|c| c.norm()).collect();

    let mut omegas = DVector::zeros(n);
    for i in 0..n {
        let c = cosines[i].clamp(0.0, 1.0);
        omegas[i] = sines[i].atan2(c).clamp(0.0, std::f64::consts::FRAC_PI_2);
    }

    // Stable ascending order; ties keep SVD order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| omegas[i].total_cmp(&omegas[j]).then(i.cmp(&j)));
    let permute = |m: &DMatrix<f64>| {
        let mut out = DMatrix::zeros(m.nrows(), n);
        for (dst, &src) in order.iter().enumerate() {
            out.set_column(dst, &m.column(src));
        }
        out
    };
    let u1 = permute(&u1);
    let v = permute(&v);
    let w = permute(&w);
    let sines: Vec<f64> = order.iter().map(|&i| sines[i]).collect();
    let omegas = DVector::from_iterator(n, order.iter().map(|&i| omegas[i]));

    let u2 = complete_u2(&w, &sines, d - n);
    Ok(PrincipalAngles {
        omegas,
        u1,
        u2,
        v,
        complement,
    })
}

/// Builds U₂ from `W = RᵀPₜV = −U₂Σ`: columns with a usable sine are
/// normalized (largest sine first, re-orthogonalized); the rest are completed
/// by Gram–Schmidt from the standard basis.
fn complete_u2(w: &DMatrix<f64>, sines: &[f64], rows: usize) -> DMatrix<f64> {
    let n = w.ncols();
    let mut u2 = DMatrix::zeros(rows, n);
    let mut filled: Vec<usize> = Vec::with_capacity(n);

    let mut by_sine: Vec<usize> = (0..n).collect();
    by_sine.sort_by(|&i, &j| sines[j].total_cmp(&sines[i]).then(i.cmp(&j)));

    let orthogonalize = |u2: &DMatrix<f64>, filled: &[usize], mut x: DVector<f64>| {
        for _ in 0..2 {
            for &k in filled {
                let proj = u2.column(k).dot(&x);
                x.axpy(-proj, &u2.column(k), 1.0);
            }
        }
        x
    };

    let mut pending = Vec::new();
    for &i in &by_sine {
        if sines[i] <= SIN_ZERO {
            pending.push(i);
            continue;
        }
        let x = orthogonalize(&u2, &filled, -w.column(i).into_owned());
        let norm = x.norm();
        if norm <= SIN_ZERO {
            pending.push(i);
            continue;
        }
        u2.set_column(i, &(x / norm));
        filled.push(i);
    }

    let mut next_axis = 0;
    for i in pending {
        while next_axis < rows {
            let mut e = DVector::zeros(rows);
            e[next_axis] = 1.0;
            next_axis += 1;
            let x = orthogonalize(&u2, &filled, e);
            let norm = x.norm();
            if norm > 0.5 {
                let mut col = x / norm;
                if canonical_sign(col.as_slice()) {
                    col.neg_mut();
                }
                u2.set_column(i, &col);
                filled.push(i);
                break;
            }
        }
    }
    u2
}
