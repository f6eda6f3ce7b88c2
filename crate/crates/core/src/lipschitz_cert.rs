//! Sampled certificates for the Lipschitz seminorm of `f - Id`.
//!
//! Two one-sided estimates are reported: the largest sampled difference
//! quotient (a true lower bound) and the largest `||Df(x) - I||` over a grid
//! (a heuristic upper estimate on convex domains, together with the Jacobian
//! variation between neighbouring grid points as the grid-gap slack).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::spectral_norm;
use crate::map_core::{newton_solve, Point, VectorMap};
use crate::sampling;

/// Relative scale of the perturbation pairs `y = x + delta`.
pub const PERTURBATION_SCALE: f64 = 1e-4;

/// Float slack when testing sampled ratios against analytic bounds.
pub const RATIO_SLACK: f64 = 1e-9;

#[derive(Debug, Clone)]
pub enum Domain {
    Ball { radius: f64, dim: usize },
    Cloud(Vec<Point>),
}

impl Domain {
    pub fn dim(&self) -> usize {
        match self {
            Domain::Ball { dim, .. } => *dim,
            Domain::Cloud(pts) => pts.first().map_or(0, DVector::len),
        }
    }

    /// Radius of the smallest origin-centred ball holding the domain.
    pub fn scale(&self) -> f64 {
        match self {
            Domain::Ball { radius, .. } => *radius,
            Domain::Cloud(pts) => pts.iter().map(|p| p.norm()).fold(0.0, f64::max),
        }
    }

    pub fn descriptor(&self) -> DomainDescriptor {
        match self {
            Domain::Ball { radius, dim } => DomainDescriptor::Ball { radius: *radius, dim: *dim },
            Domain::Cloud(pts) => DomainDescriptor::Cloud {
                n_points: pts.len(),
                dim: self.dim(),
                max_norm: self.scale(),
            },
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Domain::Ball { radius, dim } => {
                if *radius > 0.0 && *dim > 0 {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter("ball domain needs positive radius and dimension".into()))
                }
            }
            Domain::Cloud(pts) => {
                if pts.is_empty() {
                    return Err(Error::EmptyDomain);
                }
                let d = pts[0].len();
                pts.iter().try_for_each(|p| check_dim(d, p.len()))
            }
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        match self {
            Domain::Ball { radius, dim } => sampling::uniform_in_ball(rng, *dim, *radius),
            Domain::Cloud(pts) => pts[rng.random_range(0..pts.len())].clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainDescriptor {
    Ball { radius: f64, dim: usize },
    Cloud { n_points: usize, dim: usize, max_norm: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LipschitzCertificate {
    /// Largest sampled `||(f(x) - x) - (f(y) - y)|| / ||x - y||`.
    pub pair_lower_bound: f64,
    /// Largest `||Df(x) - I||_2` over the grid.
    pub jac_grid_estimate: f64,
    /// Largest `||Df(x) - Df(x')||_2` between grid nearest neighbours.
    pub grid_gap_slack: f64,
    pub n_pairs: usize,
    pub n_grid: usize,
    pub domain: DomainDescriptor,
    pub seed: u64,
}

impl LipschitzCertificate {
    /// The larger of the two estimates.
    pub fn estimate(&self) -> f64 {
        self.pair_lower_bound.max(self.jac_grid_estimate)
    }
}

fn nearest_neighbours(pts: &[Point]) -> Vec<usize> {
    pts.par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut best = (f64::INFINITY, i);
            for (j, q) in pts.iter().enumerate() {
                if j != i {
                    let dist = (p - q).norm_squared();
                    if dist > 0.0 && dist < best.0 {
                        best = (dist, j);
                    }
                }
            }
            best.1
        })
        .collect()
}

/// Deterministic pair sequence: pair `k` does not depend on the total count,
/// so a longer run extends a shorter one.
fn draw_pairs(domain: &Domain, n_pairs: usize, seed: u64) -> Vec<(Point, Point)> {
    let mut rng = sampling::rng(seed);
    let scale = domain.scale().max(1e-12);
    let d = domain.dim();
    let nn = match domain {
        Domain::Cloud(pts) if pts.len() > 1 => Some(nearest_neighbours(pts)),
        _ => None,
    };
    let mut pairs = Vec::with_capacity(n_pairs);
    for k in 0..n_pairs {
        let pair = match (k % 3, domain, &nn) {
            (1, _, _) => {
                let x = domain.draw(&mut rng);
                let delta = sampling::unit_vector(&mut rng, d) * (PERTURBATION_SCALE * scale);
                let y = &x + delta;
                (x, y)
            }
            (2, Domain::Cloud(pts), Some(nn)) => {
                let i = (k / 3) % pts.len();
                (pts[i].clone(), pts[nn[i]].clone())
            }
            _ => (domain.draw(&mut rng), domain.draw(&mut rng)),
        };
        pairs.push(pair);
    }
    pairs
}

fn deviation_quotient<F: VectorMap + ?Sized>(f: &F, x: &Point, y: &Point) -> Result<Option<f64>> {
    let dx = (x - y).norm();
    if dx == 0.0 {
        return Ok(None);
    }
    let dev = (f.eval(x)? - x) - (f.eval(y)? - y);
    Ok(Some(dev.norm() / dx))
}

fn grid_points(domain: &Domain, n: usize, seed: u64) -> Vec<Point> {
    match domain {
        Domain::Cloud(pts) => pts.clone(),
        Domain::Ball { radius, dim } => {
            let mut pts = vec![DVector::zeros(*dim)];
            pts.extend(sampling::sample_ball(seed ^ 0x9e37_79b9_7f4a_7c15, n, *dim, *radius));
            pts
        }
    }
}

/// Certifies `||f - Id||_L` on a ball or a sample cloud.
pub fn certify_deviation<F: VectorMap + ?Sized>(
    f: &F,
    domain: &Domain,
    n_pairs: usize,
    seed: u64,
) -> Result<LipschitzCertificate> {
    if n_pairs == 0 {
        return Err(Error::InvalidParameter("n_pairs must be at least 1".into()));
    }
    domain.validate()?;
    check_dim(f.dim(), domain.dim())?;

    let pairs = draw_pairs(domain, n_pairs, seed);
    let quotients: Vec<Option<f64>> = pairs
        .par_iter()
        .map(|(x, y)| deviation_quotient(f, x, y))
        .collect::<Result<_>>()?;
    let pair_lower_bound = quotients.into_iter().flatten().fold(0.0, f64::max);

    let grid = grid_points(domain, n_pairs.clamp(64, 2000), seed);
    let d = f.dim();
    let eye = DMatrix::<f64>::identity(d, d);
    let jacobians: Vec<DMatrix<f64>> = grid.par_iter().map(|p| f.jacobian(p)).collect::<Result<_>>()?;
    let jac_grid_estimate = jacobians
        .iter()
        .map(|j| spectral_norm(&(j - &eye)))
        .fold(0.0, f64::max);
    let grid_gap_slack = if grid.len() > 1 {
        nearest_neighbours(&grid)
            .iter()
            .enumerate()
            .map(|(i, &j)| spectral_norm(&(&jacobians[i] - &jacobians[j])))
            .fold(0.0, f64::max)
    } else {
        0.0
    };

    Ok(LipschitzCertificate {
        pair_lower_bound,
        jac_grid_estimate,
        grid_gap_slack,
        n_pairs,
        n_grid: grid.len(),
        domain: domain.descriptor(),
        seed,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartResult {
    pub pass: bool,
    pub violations: usize,
    pub n_checked: usize,
    /// Smallest distance of a sampled ratio to its bound (negative on violation).
    pub worst_margin: f64,
    /// Largest sampled ratio compared against the part's upper bound.
    pub max_ratio: f64,
    pub bound: f64,
}

impl PartResult {
    fn new(bound: f64) -> Self {
        Self {
            pass: true,
            violations: 0,
            n_checked: 0,
            worst_margin: f64::INFINITY,
            max_ratio: 0.0,
            bound,
        }
    }

    fn record(&mut self, ratio: f64, margin: f64) {
        self.n_checked += 1;
        self.max_ratio = self.max_ratio.max(ratio);
        self.worst_margin = self.worst_margin.min(margin);
        if margin < -RATIO_SLACK {
            self.violations += 1;
            self.pass = false;
        }
    }
}

/// Checks of the three near-identity properties for `||f - Id||_L <= alpha < 1`.
///
/// Part 3 concerns the operator `F(g) = f o g` on a function space; it is
/// checked pointwise on sampled perturbation fields, which is the strongest
/// checkable surrogate of the operator inequality.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NearIdentityReport {
    pub alpha: f64,
    /// `(1 - alpha)||x - y|| <= ||f(x) - f(y)|| <= (1 + alpha)||x - y||`.
    pub isometry: PartResult,
    /// `||f^{-1} - Id||_L <= alpha / (1 - alpha)` on the image.
    pub inverse: PartResult,
    /// `||(f o (g + D) - (g + D)) - (f o g - g)|| <= alpha ||D||` pointwise.
    pub composition: PartResult,
    pub inverse_failures: usize,
    pub seed: u64,
}

impl NearIdentityReport {
    pub fn pass(&self) -> bool {
        self.isometry.pass && self.inverse.pass && self.composition.pass && self.inverse_failures == 0
    }
}

pub fn near_identity_suite<F: VectorMap + ?Sized>(
    f: &F,
    alpha: f64,
    domain: &Domain,
    n: usize,
    seed: u64,
) -> Result<NearIdentityReport> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Regime(format!("alpha = {alpha} must lie in [0, 1)")));
    }
    domain.validate()?;
    check_dim(f.dim(), domain.dim())?;

    let mut rng = sampling::rng(seed);
    let mut isometry = PartResult::new(1.0 + alpha);
    let mut inverse = PartResult::new(alpha / (1.0 - alpha));
    let mut composition = PartResult::new(alpha);
    let mut inverse_failures = 0;

    for _ in 0..n {
        let x = domain.draw(&mut rng);
        let y = domain.draw(&mut rng);
        let dxy = (&x - &y).norm();
        if dxy == 0.0 {
            continue;
        }
        let fx = f.eval(&x)?;
        let fy = f.eval(&y)?;
        let ratio = (&fx - &fy).norm() / dxy;
        isometry.record(ratio, (ratio - (1.0 - alpha)).min((1.0 + alpha) - ratio));

        // inverse on the image, from the generic Newton start u
        let tol = 1e-12 * fx.norm().max(fy.norm()).max(1.0);
        let inv = newton_solve(f, &fx, fx.clone(), tol)
            .and_then(|xu| newton_solve(f, &fy, fy.clone(), tol).map(|xv| (xu, xv)));
        match inv {
            Ok((xu, xv)) => {
                let duv = (&fx - &fy).norm();
                if duv > 0.0 {
                    let r = ((&xu - &fx) - (&xv - &fy)).norm() / duv;
                    inverse.record(r, inverse.bound - r);
                }
            }
            Err(_) => inverse_failures += 1,
        }

        // g(x_j) = p, perturbed along the segment to q so g + D stays in the domain
        let t: f64 = match domain {
            Domain::Ball { .. } => rng.random_range(0.05..=1.0),
            Domain::Cloud(_) => 1.0,
        };
        let delta = (&y - &x) * t;
        let moved = &x + &delta;
        let lhs = ((f.eval(&moved)? - &moved) - (&fx - &x)).norm();
        let dn = delta.norm();
        if dn > 0.0 {
            let r = lhs / dn;
            composition.record(r, alpha - r);
        }
    }

    Ok(NearIdentityReport { alpha, isometry, inverse, composition, inverse_failures, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map_core::{FnMap, MapFamily, SmoothMap};

    fn linear(a: f64) -> FnMap<impl Fn(&Point) -> Point + Send + Sync> {
        FnMap::new(1, move |x: &Point| x * a)
    }

    #[test]
    fn identity_certifies_zero() {
        let id = SmoothMap::identity(3, 1.0).unwrap();
        let c = certify_deviation(&id, &Domain::Ball { radius: 1.0, dim: 3 }, 300, 1).unwrap();
        assert_eq!(c.pair_lower_bound, 0.0);
        assert_eq!(c.jac_grid_estimate, 0.0);
    }

    #[test]
    fn scaled_identity_certifies_exactly() {
        let c = certify_deviation(&linear(1.1), &Domain::Ball { radius: 2.0, dim: 1 }, 300, 2).unwrap();
        assert!((c.pair_lower_bound - 0.1).abs() < 1e-9);
        assert!((c.jac_grid_estimate - 0.1).abs() < 1e-8);
    }

    #[test]
    fn tanh_deviation_approaches_peak() {
        // sup of 0.05 sech^2 is 0.05, attained at 0
        let f = SmoothMap::analytic(MapFamily::ComponentwiseTanh { beta: 0.05 }, 1, 2.0).unwrap();
        let c = certify_deviation(&f, &Domain::Ball { radius: 2.0, dim: 1 }, 3000, 3).unwrap();
        assert!(c.pair_lower_bound <= 0.05 + 1e-12);
        assert!(c.pair_lower_bound > 0.0499);
        assert!((c.jac_grid_estimate - 0.05).abs() < 1e-12);
    }

    #[test]
    fn empty_cloud_is_rejected() {
        let id = SmoothMap::identity(2, 1.0).unwrap();
        assert!(matches!(certify_deviation(&id, &Domain::Cloud(vec![]), 10, 0), Err(Error::EmptyDomain)));
        assert!(certify_deviation(&id, &Domain::Ball { radius: 1.0, dim: 2 }, 0, 0).is_err());
    }

    #[test]
    fn cloud_certificate_uses_neighbour_pairs() {
        let f = SmoothMap::analytic(MapFamily::ComponentwiseTanh { beta: 0.3 }, 2, 1.0).unwrap();
        let cloud = sampling::sample_ball(9, 400, 2, 1.0);
        let c = certify_deviation(&f, &Domain::Cloud(cloud), 900, 4).unwrap();
        assert!(c.pair_lower_bound <= c.jac_grid_estimate + c.grid_gap_slack);
        assert!(c.pair_lower_bound > 0.25);
        assert!(matches!(c.domain, DomainDescriptor::Cloud { n_points: 400, .. }));
    }

    #[test]
    fn pair_bound_is_monotone_in_pairs() {
        let f = SmoothMap::analytic(MapFamily::ComponentwiseTanh { beta: 0.4 }, 2, 1.5).unwrap();
        let dom = Domain::Ball { radius: 1.5, dim: 2 };
        let mut last = 0.0;
        for n in [1, 5, 20, 80, 320, 1280] {
            let c = certify_deviation(&f, &dom, n, 77).unwrap();
            assert!(c.pair_lower_bound >= last);
            last = c.pair_lower_bound;
        }
    }

    #[test]
    fn near_identity_identity_has_zero_margins() {
        let id = SmoothMap::identity(2, 1.0).unwrap();
        let r = near_identity_suite(&id, 0.0, &Domain::Ball { radius: 1.0, dim: 2 }, 200, 5).unwrap();
        assert!(r.pass());
        assert!(r.isometry.worst_margin.abs() < 1e-12);
        assert!(r.inverse.worst_margin.abs() < 1e-12);
        assert!(r.composition.worst_margin.abs() < 1e-12);
    }

    #[test]
    fn near_identity_linear_inverse_deviation() {
        // f = 1.2 x: f^{-1} - Id = -x/6, so the inverse seminorm is 0.2/1.2
        let r = near_identity_suite(&linear(1.2), 0.2, &Domain::Ball { radius: 1.0, dim: 1 }, 300, 6).unwrap();
        assert!(r.pass());
        assert!((r.inverse.max_ratio - 0.2 / 1.2).abs() < 1e-9);
        assert!((r.inverse.bound - 0.25).abs() < 1e-15);
        assert!((r.isometry.max_ratio - 1.2).abs() < 1e-12);
    }

    #[test]
    fn near_identity_tanh_passes() {
        let f = SmoothMap::analytic(MapFamily::ComponentwiseTanh { beta: 0.1 }, 1, 1.0).unwrap();
        let r = near_identity_suite(&f, 0.1, &Domain::Ball { radius: 1.0, dim: 1 }, 1000, 7).unwrap();
        assert!(r.pass(), "{r:?}");
        assert_eq!(r.isometry.n_checked, 1000);
    }

    #[test]
    fn near_identity_detects_understated_alpha() {
        let f = SmoothMap::analytic(MapFamily::ComponentwiseTanh { beta: 0.5 }, 2, 1.0).unwrap();
        let r = near_identity_suite(&f, 0.2, &Domain::Ball { radius: 1.0, dim: 2 }, 500, 8).unwrap();
        assert!(!r.pass());
        assert!(r.composition.violations > 0);
    }

    #[test]
    fn near_identity_rejects_alpha_at_least_one() {
        let id = SmoothMap::identity(1, 1.0).unwrap();
        assert!(matches!(
            near_identity_suite(&id, 1.0, &Domain::Ball { radius: 1.0, dim: 1 }, 10, 0),
            Err(Error::Regime(_))
        ));
    }
}
