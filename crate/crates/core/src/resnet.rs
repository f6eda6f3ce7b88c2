//! `(m, d, k)` tanh residual networks `h_i(x) = A_i tanh(B_i x) + x` with
//! hand-written backpropagation, the empirical quadratic loss and the
//! zero-parameter saddle construction.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, spectral_norm};
use crate::map_core::{Point, VectorMap};
use crate::sampling;

/// Loss level that halts gradient descent as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e12;

/// Probe points used to decide whether a generator is the identity.
pub const IDENTITY_PROBES: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResNetParams {
    pub m: usize,
    pub d: usize,
    pub k: usize,
    /// `A_1..A_m`, each `d x k`.
    #[serde(rename = "A", with = "crate::linalg::matrix_list")]
    pub a: Vec<DMatrix<f64>>,
    /// `B_1..B_m`, each `k x d`.
    #[serde(rename = "B", with = "crate::linalg::matrix_list")]
    pub b: Vec<DMatrix<f64>>,
}

impl ResNetParams {
    pub fn zeros(m: usize, d: usize, k: usize) -> Self {
        Self {
            m,
            d,
            k,
            a: vec![DMatrix::zeros(d, k); m],
            b: vec![DMatrix::zeros(k, d); m],
        }
    }

    /// Gaussian entries with standard deviation `scale`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, m: usize, d: usize, k: usize, scale: f64) -> Self {
        let mut p = Self::zeros(m, d, k);
        for i in 0..m {
            p.a[i] = sampling::gaussian_matrix(rng, d, k) * scale;
            p.b[i] = sampling::gaussian_matrix(rng, k, d) * scale;
        }
        p
    }

    /// Random parameters rescaled so every layer has `||A_i|| ||B_i|| = max_dev`.
    pub fn random_near_identity<R: Rng + ?Sized>(rng: &mut R, m: usize, d: usize, k: usize, max_dev: f64) -> Self {
        let mut p = Self::random(rng, m, d, k, 1.0);
        for i in 0..m {
            let na = spectral_norm(&p.a[i]);
            let nb = spectral_norm(&p.b[i]);
            if na > 0.0 && nb > 0.0 {
                let s = (max_dev / (na * nb)).sqrt();
                p.a[i] *= s;
                p.b[i] *= s;
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.a.len() != self.m || self.b.len() != self.m {
            return Err(Error::InvalidParameter(format!(
                "expected {} layers, got {} A and {} B matrices",
                self.m,
                self.a.len(),
                self.b.len()
            )));
        }
        for (a, b) in self.a.iter().zip(&self.b) {
            if a.shape() != (self.d, self.k) || b.shape() != (self.k, self.d) {
                return Err(Error::InvalidParameter(format!(
                    "layer shapes {:?} and {:?} do not match (d, k) = ({}, {})",
                    a.shape(),
                    b.shape(),
                    self.d,
                    self.k
                )));
            }
            if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter("non-finite parameter".into()));
            }
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        2 * self.m * self.d * self.k
    }

    /// All entries, `A_1, B_1, A_2, ...`, each column-major.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (a, b) in self.a.iter().zip(&self.b) {
            out.extend(a.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn from_flat(m: usize, d: usize, k: usize, v: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(m, d, k);
        if v.len() != p.n_params() {
            return Err(Error::DimensionMismatch { expected: p.n_params(), got: v.len() });
        }
        let dk = d * k;
        for i in 0..m {
            p.a[i].copy_from_slice(&v[2 * i * dk..(2 * i + 1) * dk]);
            p.b[i].copy_from_slice(&v[(2 * i + 1) * dk..(2 * i + 2) * dk]);
        }
        Ok(p)
    }

    /// `self + s * other`.
    pub fn axpy(&self, s: f64, other: &ResNetParams) -> ResNetParams {
        let mut p = self.clone();
        for i in 0..self.m {
            p.a[i] += &other.a[i] * s;
            p.b[i] += &other.b[i] * s;
        }
        p
    }

    /// Euclidean norm of all entries.
    pub fn norm(&self) -> f64 {
        self.a.iter().chain(&self.b).map(|x| x.norm_squared()).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.a.iter().chain(&self.b).all(|x| x.iter().all(|&v| v == 0.0))
    }

    pub fn layer(&self, i: usize) -> ResidualLayer {
        ResidualLayer { a: self.a[i].clone(), b: self.b[i].clone() }
    }

    pub fn layers(&self) -> Vec<ResidualLayer> {
        (0..self.m).map(|i| self.layer(i)).collect()
    }

    /// `||A_i|| ||B_i||` per layer.
    pub fn deviation_bounds(&self) -> Vec<f64> {
        self.a.iter().zip(&self.b).map(|(a, b)| layer_deviation_bound(a, b)).collect()
    }

    fn add_assign(&mut self, other: &ResNetParams) {
        for i in 0..self.m {
            self.a[i] += &other.a[i];
            self.b[i] += &other.b[i];
        }
    }
}

/// One residual block `x + A tanh(B x)`.
#[derive(Debug, Clone)]
pub struct ResidualLayer {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl VectorMap for ResidualLayer {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn eval(&self, x: &Point) -> Result<Point> {
        check_dim(self.dim(), x.len())?;
        Ok(x + &self.a * (&self.b * x).map(f64::tanh))
    }

    /// `I + A diag(sech^2(B x)) B`.
    fn jacobian(&self, x: &Point) -> Result<DMatrix<f64>> {
        check_dim(self.dim(), x.len())?;
        let s = (&self.b * x).map(linalg::sech2);
        let d = self.dim();
        Ok(DMatrix::identity(d, d) + &self.a * DMatrix::from_diagonal(&s) * &self.b)
    }

    fn has_analytic_jacobian(&self) -> bool {
        true
    }
}

/// `||A||_2 ||B||_2`, an upper bound on `||h_i - Id||_L` since tanh is 1-Lipschitz.
pub fn layer_deviation_bound(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    spectral_norm(a) * spectral_norm(b)
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub d: usize,
    pub x: Vec<Point>,
    pub y: Vec<Point>,
    /// Every `x_j` and `y_j` lies in the ball of this radius.
    pub radius: f64,
}

impl Dataset {
    pub fn new(x: Vec<Point>, y: Vec<Point>, radius: f64) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch { expected: x.len(), got: y.len() });
        }
        let d = x.first().map_or(0, DVector::len);
        for p in x.iter().chain(&y) {
            check_dim(d, p.len())?;
            if p.norm() > radius * (1.0 + 1e-12) {
                return Err(Error::InvalidParameter(format!(
                    "point of norm {} lies outside the radius {radius}",
                    p.norm()
                )));
            }
        }
        Ok(Self { d, x, y, radius })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Empirical mean of the inputs.
    pub fn input_mean(&self) -> Point {
        let mut s = DVector::zeros(self.d);
        for x in &self.x {
            s += x;
        }
        s / self.len().max(1) as f64
    }

    /// `(1/n) sum ||y_j - x_j||^2`.
    pub fn mean_sq_displacement(&self) -> f64 {
        self.x.iter().zip(&self.y).map(|(x, y)| (y - x).norm_squared()).sum::<f64>() / self.len().max(1) as f64
    }

    /// CSV with columns `x1..xd, y1..yd`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (1..=self.d)
            .map(|i| format!("x{i}"))
            .chain((1..=self.d).map(|i| format!("y{i}")))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for (x, y) in self.x.iter().zip(&self.y) {
            let row: Vec<String> = x.iter().chain(y.iter()).map(|v| v.to_string()).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// JSON sidecar describing a generated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub d: usize,
    pub n: usize,
    #[serde(rename = "R")]
    pub radius: f64,
    pub seed: u64,
    pub generator: ResNetParams,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    /// `B_i z_{i-1}`.
    pub pre: Vec<DVector<f64>>,
    /// `tanh(B_i z_{i-1})`.
    pub act: Vec<DVector<f64>>,
    /// `z_0 = x, ..., z_m`.
    pub z: Vec<DVector<f64>>,
}

pub fn forward(theta: &ResNetParams, x: &Point) -> Result<(Point, ForwardTrace)> {
    check_dim(theta.d, x.len())?;
    let mut trace = ForwardTrace {
        pre: Vec::with_capacity(theta.m),
        act: Vec::with_capacity(theta.m),
        z: Vec::with_capacity(theta.m + 1),
    };
    let mut z = x.clone();
    trace.z.push(z.clone());
    for (a, b) in theta.a.iter().zip(&theta.b) {
        let u = b * &z;
        let t = u.map(f64::tanh);
        z += a * &t;
        trace.pre.push(u);
        trace.act.push(t);
        trace.z.push(z.clone());
    }
    Ok((z, trace))
}

pub fn eval(theta: &ResNetParams, x: &Point) -> Result<Point> {
    forward(theta, x).map(|(y, _)| y)
}

/// `(1/n) sum 1/2 ||h(x_j) - y_j||^2`.
pub fn loss(theta: &ResNetParams, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let terms: Vec<f64> = data
        .x
        .par_iter()
        .zip(&data.y)
        .map(|(x, y)| Ok(0.5 * (eval(theta, x)? - y).norm_squared()))
        .collect::<Result<_>>()?;
    Ok(terms.iter().sum::<f64>() / data.len() as f64)
}

fn sample_grad(theta: &ResNetParams, x: &Point, y: &Point, weight: f64) -> Result<(f64, ResNetParams)> {
    let (out, trace) = forward(theta, x)?;
    let r = out - y;
    let l = 0.5 * r.norm_squared();
    let mut g = r * weight;
    let mut grad = ResNetParams::zeros(theta.m, theta.d, theta.k);
    for i in (0..theta.m).rev() {
        let t = &trace.act[i];
        grad.a[i] = &g * t.transpose();
        let s = (theta.a[i].transpose() * &g).component_mul(&t.map(|v| 1.0 - v * v));
        grad.b[i] = &s * trace.z[i].transpose();
        g += theta.b[i].transpose() * s;
    }
    Ok((l, grad))
}

/// Loss and its exact gradient by reverse accumulation. Per-sample terms
/// are computed in parallel and summed in sample order.
pub fn loss_and_grad(theta: &ResNetParams, data: &Dataset) -> Result<(f64, ResNetParams)> {
    theta.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let w = 1.0 / data.len() as f64;
    let parts: Vec<(f64, ResNetParams)> = data
        .x
        .par_iter()
        .zip(&data.y)
        .map(|(x, y)| sample_grad(theta, x, y, w))
        .collect::<Result<_>>()?;
    let mut total = ResNetParams::zeros(theta.m, theta.d, theta.k);
    let mut l = 0.0;
    for (li, gi) in &parts {
        l += li;
        total.add_assign(gi);
    }
    Ok((l * w, total))
}

pub fn grad(theta: &ResNetParams, data: &Dataset) -> Result<ResNetParams> {
    loss_and_grad(theta, data).map(|(_, g)| g)
}

/// Central finite-difference gradient, one coordinate at a time.
pub fn fd_grad(theta: &ResNetParams, data: &Dataset, step: f64) -> Result<Vec<f64>> {
    let flat = theta.flatten();
    let mut out = Vec::with_capacity(flat.len());
    let mut p = flat.clone();
    for j in 0..flat.len() {
        p[j] = flat[j] + step;
        let lp = loss(&ResNetParams::from_flat(theta.m, theta.d, theta.k, &p)?, data)?;
        p[j] = flat[j] - step;
        let lm = loss(&ResNetParams::from_flat(theta.m, theta.d, theta.k, &p)?, data)?;
        p[j] = flat[j];
        out.push((lp - lm) / (2.0 * step));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    /// Loss before each step, then the final loss.
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub final_theta: ResNetParams,
    pub steps_taken: usize,
    pub diverged: bool,
}

/// Full-batch gradient descent with a fixed learning rate.
pub fn train_gd(theta0: &ResNetParams, data: &Dataset, lr: f64, steps: usize) -> Result<Trajectory> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::InvalidParameter(format!("learning rate {lr} must be positive")));
    }
    let mut theta = theta0.clone();
    let mut losses = Vec::with_capacity(steps + 1);
    let mut grad_norms = Vec::with_capacity(steps + 1);
    let mut diverged = false;
    let mut steps_taken = 0;
    for _ in 0..steps {
        let (l, g) = loss_and_grad(&theta, data)?;
        losses.push(l);
        grad_norms.push(g.norm());
        if !(l <= DIVERGENCE_LOSS) {
            diverged = true;
            break;
        }
        theta = theta.axpy(-lr, &g);
        steps_taken += 1;
    }
    if !diverged {
        let (l, g) = loss_and_grad(&theta, data)?;
        losses.push(l);
        grad_norms.push(g.norm());
        diverged = !(l <= DIVERGENCE_LOSS);
    }
    Ok(Trajectory { losses, grad_norms, final_theta: theta, steps_taken, diverged })
}

/// Antithetic dataset generated by `theta_star`: `n/2` uniform points of
/// `B_R`, each followed by its negation, with `y_j = h*(x_j)`.
///
/// The stored radius is the larger of `R` and the largest `||y_j||`.
pub fn make_saddle_instance(theta_star: &ResNetParams, n: usize, radius: f64, seed: u64) -> Result<Dataset> {
    theta_star.validate()?;
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!("n = {n} must be even and at least 2")));
    }
    if !(radius > 0.0) {
        return Err(Error::InvalidParameter(format!("radius {radius} must be positive")));
    }
    let d = theta_star.d;
    let probe_tol = 1e-12 * radius.max(1.0);
    let probes = sampling::sample_ball(seed ^ 0x5bd1_e995, IDENTITY_PROBES, d, radius);
    let mut moves = false;
    for p in &probes {
        if (eval(theta_star, p)? - p).norm() > probe_tol {
            moves = true;
            break;
        }
    }
    if !moves {
        return Err(Error::IdentityGenerator);
    }

    let mut rng = sampling::rng(seed);
    let mut x = Vec::with_capacity(n);
    for _ in 0..n / 2 {
        let p = sampling::uniform_in_ball(&mut rng, d, radius);
        x.push(-&p);
        x.push(p);
    }
    // keep the pair order (x, -x)
    for pair in x.chunks_mut(2) {
        pair.swap(0, 1);
    }
    let y = x.iter().map(|p| eval(theta_star, p)).collect::<Result<Vec<_>>>()?;
    let r = y.iter().map(|v| v.norm()).fold(radius, f64::max);
    let data = Dataset::new(x, y, r)?;
    if !(data.mean_sq_displacement() > 0.0) {
        return Err(Error::IdentityGenerator);
    }
    Ok(data)
}
