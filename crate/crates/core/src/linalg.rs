use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Largest singular value.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    a.singular_values().max()
}

/// Solves `a x = b` by partial-pivot LU. Fails on an exactly singular pivot.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or(Error::Conditioning { sigma_min: 0.0 })
}

pub fn invert(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    a.clone()
        .try_inverse()
        .ok_or(Error::Conditioning { sigma_min: 0.0 })
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::InvalidParameter("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

pub fn to_rows(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| a[(i, j)]).collect())
        .collect()
}

pub fn sech2(z: f64) -> f64 {
    let t = z.tanh();
    1.0 - t * t
}

/// Lipschitz constant of sech^2 on the real line, 4 / (3 sqrt 3).
pub const SECH2_LIPSCHITZ: f64 = 0.769_800_358_919_501;

/// Serde adapter for a list of matrices as nested row-major arrays.
pub(crate) mod matrix_list {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super as linalg;

    pub fn serialize<S: Serializer>(v: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<Vec<f64>>> = v.iter().map(linalg::to_rows).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
        let rows: Vec<Vec<Vec<f64>>> = Vec::deserialize(d)?;
        rows.iter()
            .map(|r| linalg::from_rows(r).map_err(serde::de::Error::custom))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sech2_lipschitz_constant() {
        // sup |2 sech^2 tanh| is attained at tanh = 1/sqrt(3)
        let t = 1.0 / 3f64.sqrt();
        let peak = 2.0 * (1.0 - t * t) * t;
        assert!((peak - SECH2_LIPSCHITZ).abs() < 1e-15);
        let mut best: f64 = 0.0;
        for k in 0..200_000 {
            let z = -5.0 + 10.0 * k as f64 / 200_000.0;
            let th = z.tanh();
            best = best.max((2.0 * (1.0 - th * th) * th).abs());
        }
        assert!(best <= SECH2_LIPSCHITZ + 1e-12);
        assert!(best > SECH2_LIPSCHITZ - 1e-6);
    }

    #[test]
    fn spectral_norm_of_diag() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, -3.0, 0.5]));
        assert!((spectral_norm(&a) - 3.0).abs() < 1e-14);
    }
}
