//! Smooth invertible maps on a Euclidean ball.
//!
//! A [`SmoothMap`] couples a built-in map family with the constants that the
//! decomposition relies on: the smoothness constant `alpha` (Jacobian
//! variation, `||(Dh(y) - Dh(x)) u|| <= alpha ||y - x|| ||u||`), the inverse
//! Lipschitz constant `M`, the domain radius `R` and an orientation anchor
//! `x0` with `det Dh(x0) > 0`. All norms are Euclidean.
//!
//! Every family has an exact or fast inverse; a damped Newton polish is run
//! afterwards so `invert` always meets the requested residual tolerance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, sech2, spectral_norm, SECH2_LIPSCHITZ};
use crate::sampling;

pub type Point = DVector<f64>;

pub const DEFAULT_INVERSE_TOL: f64 = 1e-10;
pub const NEWTON_MAX_ITER: usize = 100;

/// Smallest admissible smoothness constant. Affine maps have no curvature, but
/// the decomposition constants require `alpha > 0`.
pub const ALPHA_FLOOR: f64 = 1e-12;

/// Anything that maps `R^d` to `R^d` and can be differentiated.
///
/// The default Jacobian is a central finite difference; implementors with an
/// analytic Jacobian override both methods.
pub trait VectorMap: Send + Sync {
    fn dim(&self) -> usize;

    fn eval(&self, x: &Point) -> Result<Point>;

    fn jacobian(&self, x: &Point) -> Result<DMatrix<f64>> {
        fd_jacobian(self, x)
    }

    fn has_analytic_jacobian(&self) -> bool {
        false
    }
}

/// Wraps a closure as a [`VectorMap`] (finite-difference Jacobian).
pub struct FnMap<F> {
    dim: usize,
    f: F,
}

impl<F> FnMap<F>
where
    F: Fn(&Point) -> Point + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> VectorMap for FnMap<F>
where
    F: Fn(&Point) -> Point + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &Point) -> Result<Point> {
        check_dim(self.dim, x.len())?;
        Ok((self.f)(x))
    }
}

/// Central differences with step `1e-6 * max(1, ||x||)`.
pub fn fd_jacobian<M: VectorMap + ?Sized>(map: &M, x: &Point) -> Result<DMatrix<f64>> {
    let d = map.dim();
    check_dim(d, x.len())?;
    let h = 1e-6 * x.norm().max(1.0);
    let mut jac = DMatrix::zeros(d, d);
    let mut xp = x.clone();
    for j in 0..d {
        xp[j] = x[j] + h;
        let fp = map.eval(&xp)?;
        xp[j] = x[j] - h;
        let fm = map.eval(&xp)?;
        xp[j] = x[j];
        jac.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    Ok(jac)
}

/// Damped Newton solve of `f(x) = y` starting from `start`.
///
/// The step is halved while the residual fails to decrease. Once the residual
/// is within `tol`, up to two more iterations polish the root while they
/// still reduce the residual.
pub fn newton_solve<M: VectorMap + ?Sized>(
    map: &M,
    y: &Point,
    start: Point,
    tol: f64,
) -> Result<Point> {
    let mut x = start;
    let mut r = map.eval(&x)? - y;
    let mut res = r.norm();
    let mut polish = 0;
    for _ in 0..NEWTON_MAX_ITER {
        if res <= tol {
            polish += 1;
            if polish > 2 || res == 0.0 {
                return Ok(x);
            }
        }
        let jac = map.jacobian(&x)?;
        let dx = match linalg::solve(&jac, &r) {
            Ok(dx) => dx,
            Err(_) => break,
        };
        let mut step = 1.0;
        let mut accepted = false;
        while step > 1e-12 {
            let cand = &x - &dx * step;
            let rc = map.eval(&cand)? - y;
            let rn = rc.norm();
            if rn < res {
                x = cand;
                r = rc;
                res = rn;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if res <= tol {
        Ok(x)
    } else {
        Err(Error::InversionFailure { residual: res, iterations: NEWTON_MAX_ITER })
    }
}

/// Solves `t + beta * tanh(t) = y` for scalar `t`; the left side is strictly
/// increasing for `beta > -1`.
fn scalar_tanh_inverse(beta: f64, y: f64) -> Result<f64> {
    let mut t = y - beta * y.tanh();
    let mut res = (t + beta * t.tanh() - y).abs();
    for _ in 0..NEWTON_MAX_ITER {
        if res <= 4.0 * f64::EPSILON * y.abs().max(1.0) {
            return Ok(t);
        }
        let slope = 1.0 + beta * sech2(t);
        let dt = (t + beta * t.tanh() - y) / slope;
        let mut step = 1.0;
        loop {
            let cand = t - step * dt;
            let rc = (cand + beta * cand.tanh() - y).abs();
            if rc < res {
                t = cand;
                res = rc;
                break;
            }
            step *= 0.5;
            if step < 1e-12 {
                return Ok(t);
            }
        }
    }
    Ok(t)
}

/// Built-in map families.
#[derive(Debug, Clone, PartialEq)]
pub enum MapFamily {
    Identity,
    /// `x -> matrix x + offset`.
    Affine { matrix: DMatrix<f64>, offset: DVector<f64> },
    /// `x -> x + beta * tanh(weights x + bias)` with strictly lower-triangular
    /// `weights`, so coordinate `j` only shifts by a function of `x_1..x_{j-1}`.
    Triangular { beta: f64, weights: DMatrix<f64>, bias: DVector<f64> },
    /// `x -> x + beta * tanh(x)` componentwise.
    ComponentwiseTanh { beta: f64 },
    /// Scalar `x -> x + coef * x^2`, invertible on `x > -1 / (2 coef)`.
    Quadratic { coef: f64 },
    /// Applied first to last.
    Composition(Vec<MapFamily>),
    /// `x -> jac_inv (base(x + anchor) - offset)`, the output of [`SmoothMap::normalize`].
    Conjugated {
        base: Box<MapFamily>,
        anchor: DVector<f64>,
        offset: DVector<f64>,
        jac: DMatrix<f64>,
        jac_inv: DMatrix<f64>,
    },
}

/// Analytic bounds of one family on a ball: smoothness, inverse Lipschitz
/// constant, a bound on `sup ||Dh||`, and the radius of the image ball.
#[derive(Debug, Clone, Copy)]
struct FamilyBounds {
    alpha: f64,
    inv_lip: f64,
    lip: f64,
    image_radius: f64,
}

impl MapFamily {
    fn eval(&self, x: &Point) -> Point {
        match self {
            MapFamily::Identity => x.clone(),
            MapFamily::Affine { matrix, offset } => matrix * x + offset,
            MapFamily::Triangular { beta, weights, bias } => {
                let z = weights * x + bias;
                x + z.map(f64::tanh) * *beta
            }
            MapFamily::ComponentwiseTanh { beta } => x + x.map(f64::tanh) * *beta,
            MapFamily::Quadratic { coef } => x.map(|t| t + coef * t * t),
            MapFamily::Composition(maps) => {
                maps.iter().fold(x.clone(), |acc, f| f.eval(&acc))
            }
            MapFamily::Conjugated { base, anchor, offset, jac_inv, .. } => {
                jac_inv * (base.eval(&(x + anchor)) - offset)
            }
        }
    }

    fn jacobian(&self, x: &Point) -> DMatrix<f64> {
        let d = x.len();
        match self {
            MapFamily::Identity => DMatrix::identity(d, d),
            MapFamily::Affine { matrix, .. } => matrix.clone(),
            MapFamily::Triangular { beta, weights, bias } => {
                let z = weights * x + bias;
                let mut j = weights.clone();
                for (i, zi) in z.iter().enumerate() {
                    let s = *beta * sech2(*zi);
                    j.row_mut(i).scale_mut(s);
                }
                j + DMatrix::identity(d, d)
            }
            MapFamily::ComponentwiseTanh { beta } => {
                DMatrix::from_diagonal(&x.map(|t| 1.0 + beta * sech2(t)))
            }
            MapFamily::Quadratic { coef } => {
                DMatrix::from_diagonal(&x.map(|t| 1.0 + 2.0 * coef * t))
            }
            MapFamily::Composition(maps) => {
                let mut j = DMatrix::identity(d, d);
                let mut z = x.clone();
                for f in maps {
                    j = f.jacobian(&z) * j;
                    z = f.eval(&z);
                }
                j
            }
            MapFamily::Conjugated { base, anchor, jac_inv, .. } => {
                jac_inv * base.jacobian(&(x + anchor))
            }
        }
    }

    /// Family-specific inverse. Exact up to rounding for every family except
    /// `ComponentwiseTanh`, which uses scalar Newton per coordinate.
    fn inverse(&self, y: &Point) -> Result<Point> {
        match self {
            MapFamily::Identity => Ok(y.clone()),
            MapFamily::Affine { matrix, offset } => linalg::solve(matrix, &(y - offset)),
            MapFamily::Triangular { beta, weights, bias } => {
                // forward substitution: row j of `weights` only touches x_1..x_{j-1}
                let d = y.len();
                let mut x = DVector::zeros(d);
                for j in 0..d {
                    let mut z = bias[j];
                    for k in 0..j {
                        z += weights[(j, k)] * x[k];
                    }
                    x[j] = y[j] - beta * z.tanh();
                }
                Ok(x)
            }
            MapFamily::ComponentwiseTanh { beta } => {
                let mut x = y.clone();
                for t in x.iter_mut() {
                    *t = scalar_tanh_inverse(*beta, *t)?;
                }
                Ok(x)
            }
            MapFamily::Quadratic { coef } => {
                let mut x = y.clone();
                for t in x.iter_mut() {
                    let disc = 1.0 + 4.0 * coef * *t;
                    if disc < 0.0 {
                        return Err(Error::InversionFailure { residual: -disc, iterations: 0 });
                    }
                    *t = 2.0 * *t / (1.0 + disc.sqrt());
                }
                Ok(x)
            }
            MapFamily::Composition(maps) => {
                maps.iter().rev().try_fold(y.clone(), |acc, f| f.inverse(&acc))
            }
            MapFamily::Conjugated { base, anchor, offset, jac, .. } => {
                Ok(base.inverse(&(jac * y + offset))? - anchor)
            }
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        match self {
            MapFamily::Identity => Ok(()),
            MapFamily::Affine { matrix, offset } => {
                check_dim(d, matrix.nrows())?;
                check_dim(d, matrix.ncols())?;
                check_dim(d, offset.len())
            }
            MapFamily::Triangular { beta, weights, bias } => {
                check_dim(d, weights.nrows())?;
                check_dim(d, weights.ncols())?;
                check_dim(d, bias.len())?;
                if !beta.is_finite() {
                    return Err(Error::InvalidParameter("triangular beta must be finite".into()));
                }
                for i in 0..d {
                    for j in i..d {
                        if weights[(i, j)] != 0.0 {
                            return Err(Error::InvalidParameter(format!(
                                "triangular weights must be strictly lower triangular, entry ({i},{j}) is nonzero"
                            )));
                        }
                    }
                }
                Ok(())
            }
            MapFamily::ComponentwiseTanh { beta } => {
                if *beta > 0.0 && *beta < 1.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter(format!("componentwise beta {beta} not in (0, 1)")))
                }
            }
            MapFamily::Quadratic { coef } => {
                check_dim(1, d)?;
                if coef.is_finite() {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter("quadratic coefficient must be finite".into()))
                }
            }
            MapFamily::Composition(maps) => {
                if maps.is_empty() {
                    return Err(Error::InvalidParameter("empty composition".into()));
                }
                maps.iter().try_for_each(|f| f.validate(d))
            }
            MapFamily::Conjugated { base, anchor, offset, jac, jac_inv } => {
                check_dim(d, anchor.len())?;
                check_dim(d, offset.len())?;
                check_dim(d, jac.nrows())?;
                check_dim(d, jac_inv.nrows())?;
                base.validate(d)
            }
        }
    }

    fn bounds(&self, radius: f64) -> Result<FamilyBounds> {
        let b = match self {
            MapFamily::Identity => FamilyBounds {
                alpha: 0.0,
                inv_lip: 1.0,
                lip: 1.0,
                image_radius: radius,
            },
            MapFamily::Affine { matrix, offset } => {
                let sv = matrix.singular_values();
                let smin = sv.min();
                if smin <= 0.0 {
                    return Err(Error::Conditioning { sigma_min: smin });
                }
                FamilyBounds {
                    alpha: 0.0,
                    inv_lip: 1.0 / smin,
                    lip: sv.max(),
                    image_radius: sv.max() * radius + offset.norm(),
                }
            }
            MapFamily::Triangular { beta, weights, bias } => {
                let w = spectral_norm(weights);
                let bw = beta.abs() * w;
                // (I + beta S W)^{-1} is a finite Neumann series: S W is nilpotent.
                let d = weights.nrows();
                let inv_lip: f64 = (0..d).map(|k| bw.powi(k as i32)).sum();
                let _ = bias;
                FamilyBounds {
                    alpha: beta.abs() * SECH2_LIPSCHITZ * w * w,
                    inv_lip,
                    lip: 1.0 + bw,
                    image_radius: radius + beta.abs() * (d as f64).sqrt(),
                }
            }
            MapFamily::ComponentwiseTanh { beta } => FamilyBounds {
                alpha: beta * SECH2_LIPSCHITZ,
                inv_lip: 1.0,
                lip: 1.0 + beta,
                image_radius: radius * (1.0 + beta),
            },
            MapFamily::Quadratic { coef } => {
                let q = coef.abs();
                if 2.0 * q * radius >= 1.0 {
                    return Err(Error::InvalidParameter(format!(
                        "quadratic map is not invertible on the ball: 2|coef| R = {} >= 1",
                        2.0 * q * radius
                    )));
                }
                FamilyBounds {
                    alpha: 2.0 * q,
                    inv_lip: 1.0 / (1.0 - 2.0 * q * radius),
                    lip: 1.0 + 2.0 * q * radius,
                    image_radius: radius + q * radius * radius,
                }
            }
            MapFamily::Composition(maps) => {
                // D(g o f) varies by alpha_g lip_f^2 + lip_g alpha_f.
                let mut acc = FamilyBounds { alpha: 0.0, inv_lip: 1.0, lip: 1.0, image_radius: radius };
                for f in maps {
                    let b = f.bounds(acc.image_radius)?;
                    acc = FamilyBounds {
                        alpha: b.alpha * acc.lip * acc.lip + b.lip * acc.alpha,
                        inv_lip: acc.inv_lip * b.inv_lip,
                        lip: acc.lip * b.lip,
                        image_radius: b.image_radius,
                    };
                }
                acc
            }
            MapFamily::Conjugated { base, anchor, jac, jac_inv, .. } => {
                let b = base.bounds(radius + anchor.norm())?;
                let ji = spectral_norm(jac_inv);
                FamilyBounds {
                    alpha: ji * b.alpha,
                    inv_lip: b.inv_lip * spectral_norm(jac),
                    lip: ji * b.lip,
                    image_radius: ji * b.lip * radius,
                }
            }
        };
        Ok(b)
    }
}

/// Where the constants of a map came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstantsSource {
    /// Derived from closed-form bounds of the family.
    Analytic,
    /// Given by the user and trusted.
    Supplied,
    /// Sampled lower estimates; not a certificate.
    Estimated,
}

/// How to obtain `alpha` and `M` at construction.
#[derive(Debug, Clone, Copy)]
pub enum Constants {
    Analytic,
    Supplied { alpha: f64, inv_lip: f64 },
    Estimated { n_samples: usize, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct SmoothMap {
    dim: usize,
    family: MapFamily,
    alpha: f64,
    inv_lip: f64,
    radius: f64,
    anchor: Point,
    source: ConstantsSource,
}

impl SmoothMap {
    pub fn new(
        family: MapFamily,
        dim: usize,
        radius: f64,
        anchor: Option<Point>,
        constants: Constants,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("dimension must be positive".into()));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidParameter(format!("radius {radius} must be positive")));
        }
        family.validate(dim)?;
        let anchor = anchor.unwrap_or_else(|| DVector::zeros(dim));
        check_dim(dim, anchor.len())?;

        let mut map = SmoothMap {
            dim,
            family,
            alpha: 1.0,
            inv_lip: 1.0,
            radius,
            anchor,
            source: ConstantsSource::Analytic,
        };
        match constants {
            Constants::Analytic => {
                let b = map.family.bounds(radius)?;
                map.alpha = b.alpha.max(ALPHA_FLOOR);
                map.inv_lip = b.inv_lip;
            }
            Constants::Supplied { alpha, inv_lip } => {
                map.alpha = alpha;
                map.inv_lip = inv_lip;
                map.source = ConstantsSource::Supplied;
            }
            Constants::Estimated { n_samples, seed } => {
                let est = estimate_constants(&map, n_samples, seed)?;
                map.alpha = est.alpha_hat.max(ALPHA_FLOOR);
                map.inv_lip = est.m_hat;
                map.source = ConstantsSource::Estimated;
            }
        }
        if !(map.alpha > 0.0 && map.alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!("alpha {} must be positive", map.alpha)));
        }
        if !(map.inv_lip > 0.0 && map.inv_lip.is_finite()) {
            return Err(Error::InvalidParameter(format!("M {} must be positive", map.inv_lip)));
        }
        let det = map.jacobian(&map.anchor)?.determinant();
        if !(det > 0.0) {
            return Err(Error::Orientation { det });
        }
        Ok(map)
    }

    /// Built-in family with analytic constants, anchored at the origin.
    pub fn analytic(family: MapFamily, dim: usize, radius: f64) -> Result<Self> {
        Self::new(family, dim, radius, None, Constants::Analytic)
    }

    pub fn identity(dim: usize, radius: f64) -> Result<Self> {
        Self::analytic(MapFamily::Identity, dim, radius)
    }

    pub fn family(&self) -> &MapFamily {
        &self.family
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Inverse Lipschitz constant `M`.
    pub fn inv_lip(&self) -> f64 {
        self.inv_lip
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn anchor(&self) -> &Point {
        &self.anchor
    }

    pub fn constants_source(&self) -> ConstantsSource {
        self.source
    }

    /// `x` with `||h(x) - y|| <= tol`.
    pub fn invert(&self, y: &Point, tol: f64) -> Result<Point> {
        check_dim(self.dim, y.len())?;
        if !(tol > 0.0) {
            return Err(Error::InvalidParameter(format!("tolerance {tol} must be positive")));
        }
        let start = match self.family.inverse(y) {
            Ok(x) if x.iter().all(|v| v.is_finite()) => x,
            _ => y.clone(),
        };
        let res = (self.family.eval(&start) - y).norm();
        if res <= tol {
            return Ok(start);
        }
        newton_solve(self, y, start, tol)
    }

    /// Affine conjugation to a map with `h(0) = 0` and `Dh(0) = I`:
    /// `x -> Dh(x0)^{-1} (h(x + x0) - h(x0))`.
    ///
    /// The result lives on the ball of radius `R + ||x0||`, which contains
    /// the translated domain. Its constants are `||Dh(x0)^{-1}|| alpha` and
    /// `M ||Dh(x0)||`.
    pub fn normalize(&self) -> Result<SmoothMap> {
        let jac = self.jacobian(&self.anchor)?;
        let sv = jac.singular_values();
        if sv.min() < 1e-12 * sv.max().max(1.0) {
            return Err(Error::Conditioning { sigma_min: sv.min() });
        }
        let det = jac.determinant();
        if !(det > 0.0) {
            return Err(Error::Orientation { det });
        }
        let jac_inv = linalg::invert(&jac)?;
        let offset = self.eval(&self.anchor)?;
        let family = MapFamily::Conjugated {
            base: Box::new(self.family.clone()),
            anchor: self.anchor.clone(),
            offset,
            jac: jac.clone(),
            jac_inv: jac_inv.clone(),
        };
        Ok(SmoothMap {
            dim: self.dim,
            family,
            alpha: (spectral_norm(&jac_inv) * self.alpha).max(ALPHA_FLOOR),
            inv_lip: self.inv_lip * spectral_norm(&jac),
            radius: self.radius + self.anchor.norm(),
            anchor: DVector::zeros(self.dim),
            source: self.source,
        })
    }
}

impl VectorMap for SmoothMap {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &Point) -> Result<Point> {
        check_dim(self.dim, x.len())?;
        Ok(self.family.eval(x))
    }

    fn jacobian(&self, x: &Point) -> Result<DMatrix<f64>> {
        check_dim(self.dim, x.len())?;
        Ok(self.family.jacobian(x))
    }

    fn has_analytic_jacobian(&self) -> bool {
        true
    }
}

/// Sampled lower estimates of the map constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstantEstimates {
    pub alpha_hat: f64,
    pub m_hat: f64,
    pub l_hat: f64,
    pub n_samples: usize,
    pub n_skipped: usize,
}

/// Maximal difference quotients over seeded samples of the ball. Coincident
/// points are skipped.
pub fn estimate_constants<M>(
    map: &M,
    n_samples: usize,
    seed: u64,
) -> Result<ConstantEstimates>
where
    M: VectorMap + HasRadius + ?Sized,
{
    if n_samples < 2 {
        return Err(Error::InvalidParameter("estimate_constants needs at least 2 samples".into()));
    }
    let d = map.dim();
    let radius = map.domain_radius();
    let mut rng = sampling::rng(seed);
    let mut est = ConstantEstimates { alpha_hat: 0.0, m_hat: 0.0, l_hat: 0.0, n_samples, n_skipped: 0 };
    for _ in 0..n_samples {
        let x = sampling::uniform_in_ball(&mut rng, d, radius);
        let y = sampling::uniform_in_ball(&mut rng, d, radius);
        let u = sampling::unit_vector(&mut rng, d);
        let dx = (&y - &x).norm();
        if dx < 1e-14 * radius {
            est.n_skipped += 1;
            continue;
        }
        let jdiff = (map.jacobian(&y)? - map.jacobian(&x)?) * &u;
        est.alpha_hat = est.alpha_hat.max(jdiff.norm() / dx);
        let df = (map.eval(&y)? - map.eval(&x)?).norm();
        if df == 0.0 {
            est.n_skipped += 1;
            continue;
        }
        est.m_hat = est.m_hat.max(dx / df);
        est.l_hat = est.l_hat.max(df / dx);
    }
    Ok(est)
}

/// Maps that know the radius of their certified domain.
pub trait HasRadius {
    fn domain_radius(&self) -> f64;
}

impl HasRadius for SmoothMap {
    fn domain_radius(&self) -> f64 {
        self.radius
    }
}

/// Family name and parameters, the serializable half of a [`MapSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "snake_case")]
pub enum FamilySpec {
    Identity {},
    Affine {
        matrix: Vec<Vec<f64>>,
        #[serde(default)]
        offset: Option<Vec<f64>>,
    },
    Triangular {
        beta: f64,
        weights: Vec<Vec<f64>>,
        #[serde(default)]
        bias: Option<Vec<f64>>,
    },
    ComponentwiseTanh { beta: f64 },
    Quadratic { coef: f64 },
    Composition { maps: Vec<FamilySpec> },
}

impl FamilySpec {
    pub fn to_family(&self, d: usize) -> Result<MapFamily> {
        Ok(match self {
            FamilySpec::Identity {} => MapFamily::Identity,
            FamilySpec::Affine { matrix, offset } => MapFamily::Affine {
                matrix: linalg::from_rows(matrix)?,
                offset: offset
                    .as_ref()
                    .map(|o| DVector::from_vec(o.clone()))
                    .unwrap_or_else(|| DVector::zeros(d)),
            },
            FamilySpec::Triangular { beta, weights, bias } => MapFamily::Triangular {
                beta: *beta,
                weights: linalg::from_rows(weights)?,
                bias: bias
                    .as_ref()
                    .map(|b| DVector::from_vec(b.clone()))
                    .unwrap_or_else(|| DVector::zeros(d)),
            },
            FamilySpec::ComponentwiseTanh { beta } => MapFamily::ComponentwiseTanh { beta: *beta },
            FamilySpec::Quadratic { coef } => MapFamily::Quadratic { coef: *coef },
            FamilySpec::Composition { maps } => MapFamily::Composition(
                maps.iter().map(|m| m.to_family(d)).collect::<Result<_>>()?,
            ),
        })
    }
}

/// Serializable map configuration:
/// `{family, params, alpha, M, R, x0, d}`. Missing `alpha`/`M` fall back to
/// the family's analytic bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSpec {
    #[serde(flatten)]
    pub family: FamilySpec,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(rename = "M", default)]
    pub inv_lip: Option<f64>,
    #[serde(rename = "R")]
    pub radius: f64,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    pub d: usize,
}

impl MapSpec {
    pub fn build(&self) -> Result<SmoothMap> {
        let family = self.family.to_family(self.d)?;
        let constants = match (self.alpha, self.inv_lip) {
            (None, None) => Constants::Analytic,
            (Some(alpha), Some(inv_lip)) => Constants::Supplied { alpha, inv_lip },
            (a, m) => {
                let b = family.bounds(self.radius)?;
                Constants::Supplied {
                    alpha: a.unwrap_or(b.alpha.max(ALPHA_FLOOR)),
                    inv_lip: m.unwrap_or(b.inv_lip),
                }
            }
        };
        let anchor = self.x0.as_ref().map(|v| DVector::from_vec(v.clone()));
        SmoothMap::new(family, self.d, self.radius, anchor, constants)
    }
}
