//! Seeded random inputs for the property checks: Gaussian vectors, random
//! subspaces and analytically rotated subspace pairs.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::subspace::Subspace;

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vector(rng: &mut Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| StandardNormal.sample(rng))
}

pub fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    // Filled row by row so the stream order does not depend on storage order.
    let mut m = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m[(r, c)] = StandardNormal.sample(rng);
        }
    }
    m
}

/// A uniformly distributed point of G(n, d) with zero mean.
pub fn random_subspace(rng: &mut Rng, d: usize, n: usize) -> Subspace {
    let g = gaussian_matrix(rng, d, n);
    let q = g.qr().q();
    Subspace::from_basis(q, DVector::zeros(d)).expect("QR of a Gaussian matrix is orthonormal")
}

/// Source spans `e₀..e_{k−1}`; target column i is `cos θᵢ·eᵢ + sin θᵢ·e_{k+i}`,
/// so the principal angles are exactly `angles`.
pub fn rotated_pair(d: usize, angles: &[f64]) -> (Subspace, Subspace) {
    let k = angles.len();
    assert!(d >= 2 * k, "need d >= 2k");
    let mut ps = DMatrix::zeros(d, k);
    let mut pt = DMatrix::zeros(d, k);
    for (i, &theta) in angles.iter().enumerate() {
        ps[(i, i)] = 1.0;
        pt[(i, i)] = theta.cos();
        pt[(k + i, i)] = theta.sin();
    }
    (
        Subspace::from_basis(ps, DVector::zeros(d)).unwrap(),
        Subspace::from_basis(pt, DVector::zeros(d)).unwrap(),
    )
}
