//! Seeded sampling helpers. Every random draw in the crate goes through a
//! `ChaCha8Rng` built here so runs are reproducible across platforms.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type SeededRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream for a sub-task (layer index, map index, ...).
pub fn child_rng(seed: u64, stream: u64) -> SeededRng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream.wrapping_add(1));
    r
}

pub fn gaussian_vector<R: Rng + ?Sized>(rng: &mut R, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Uniform draw from the closed Euclidean ball of the given radius.
pub fn uniform_in_ball<R: Rng + ?Sized>(rng: &mut R, d: usize, radius: f64) -> DVector<f64> {
    let mut v = gaussian_vector(rng, d);
    let n = v.norm();
    if n == 0.0 {
        return v;
    }
    let u: f64 = rng.random();
    let r = radius * u.powf(1.0 / d as f64);
    v *= r / n;
    v
}

pub fn unit_vector<R: Rng + ?Sized>(rng: &mut R, d: usize) -> DVector<f64> {
    loop {
        let v = gaussian_vector(rng, d);
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Haar-distributed rotation (det = +1) via QR of a Gaussian matrix.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R, d: usize) -> DMatrix<f64> {
    let g = gaussian_matrix(rng, d, d);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            let mut col = q.column_mut(j);
            col.neg_mut();
        }
    }
    if q.determinant() < 0.0 {
        let mut col = q.column_mut(0);
        col.neg_mut();
    }
    q
}

/// `U diag(s) V^T` with Haar rotations and log-uniform singular values in
/// `[cond_max^{-1/2}, cond_max^{1/2}]`, so the condition number is at most
/// `cond_max` and the determinant is positive.
pub fn well_conditioned_matrix<R: Rng + ?Sized>(rng: &mut R, d: usize, cond_max: f64) -> DMatrix<f64> {
    let half = 0.5 * cond_max.ln();
    let u = random_rotation(rng, d);
    let v = random_rotation(rng, d);
    let s = DVector::from_fn(d, |_, _| (rng.random::<f64>() * 2.0 * half - half).exp());
    u * DMatrix::from_diagonal(&s) * v.transpose()
}

pub fn sample_ball(seed: u64, n: usize, d: usize, radius: f64) -> Vec<DVector<f64>> {
    let mut r = rng(seed);
    (0..n).map(|_| uniform_in_ball(&mut r, d, radius)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ball_samples_stay_inside() {
        for p in sample_ball(3, 500, 4, 2.5) {
            assert!(p.norm() <= 2.5 + 1e-12);
        }
    }

    #[test]
    fn rotations_are_special_orthogonal() {
        let mut r = rng(11);
        for d in 1..7 {
            let q = random_rotation(&mut r, d);
            let err = (q.transpose() * &q - DMatrix::identity(d, d)).norm();
            assert!(err < 1e-12);
            assert!((q.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn seeded_streams_repeat() {
        let a = sample_ball(42, 10, 3, 1.0);
        let b = sample_ball(42, 10, 3, 1.0);
        assert_eq!(a, b);
    }
}
