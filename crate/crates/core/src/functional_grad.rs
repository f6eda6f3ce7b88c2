//! Functional gradients of the quadratic criterion with respect to one layer
//! of a composition, evaluated on a finite sample.
//!
//! For layer `i`, the direction
//! `D(z_{i-1,j}) = c [Dh_m(z_{m-1,j}) ... Dh_{i+1}(z_{i,j})]^{-1} (y_j - h(x_j))`
//! is pushed by the downstream Jacobians onto `c (y_j - h(x_j))`, so the
//! directional derivative of `Q` along it is `-c mean ||h(x_j) - y_j||^2`.

use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::lipschitz_cert::{certify_deviation, Domain};
use crate::map_core::{Point, VectorMap};

/// Relative slack of the bound check.
pub const BOUND_SLACK: f64 = 1e-6;

/// Step of the finite-difference value reported next to the closed form.
pub const FD_STEP: f64 = 1e-5;

/// Default norm floor as a fraction of the sample radius.
pub const FLOOR_FRACTION: f64 = 1e-3;

/// Step halvings allowed per descent iteration.
pub const MAX_HALVINGS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    NearestNeighbor,
}

/// Values `v_j` at base points `p_j`.
#[derive(Debug, Clone)]
pub struct SampledFunction {
    pub points: Vec<Point>,
    pub values: Vec<Point>,
    pub interpolation: Interpolation,
}

impl SampledFunction {
    pub fn new(points: Vec<Point>, values: Vec<Point>) -> Result<Self> {
        if points.len() != values.len() {
            return Err(Error::DimensionMismatch { expected: points.len(), got: values.len() });
        }
        Ok(Self { points, values, interpolation: Interpolation::NearestNeighbor })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|&c| c == 0.0))
    }

    /// `max ||v_j|| / ||p_j||` over base points with `||p_j|| >= floor`.
    pub fn induced_norm(&self, floor: f64) -> f64 {
        induced_norm(&self.points, &self.values, floor)
    }

    /// Value at the nearest base point.
    pub fn eval(&self, x: &Point) -> Result<Point> {
        let (_, j) = self
            .points
            .iter()
            .enumerate()
            .map(|(j, p)| ((p - x).norm_squared(), j))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .ok_or(Error::EmptyDomain)?;
        Ok(self.values[j].clone())
    }
}

fn induced_norm(points: &[Point], values: &[Point], floor: f64) -> f64 {
    points
        .iter()
        .zip(values)
        .filter(|(p, _)| p.norm() >= floor)
        .map(|(p, v)| v.norm() / p.norm())
        .fold(0.0, f64::max)
}

/// A composition `h = h_m o ... o h_1` traced on sample inputs.
#[derive(Clone)]
pub struct CompositionState {
    pub layers: Vec<Arc<dyn VectorMap>>,
    pub x: Vec<Point>,
    /// `z[i][j] = h_i o ... o h_1 (x_j)`, `z[0] = x`.
    pub z: Vec<Vec<Point>>,
    /// Certified `||h_i - Id||_L` per layer, when known.
    pub epsilons: Option<Vec<f64>>,
}

impl std::fmt::Debug for CompositionState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CompositionState")
            .field("m", &self.m())
            .field("n", &self.x.len())
            .field("epsilons", &self.epsilons)
            .finish()
    }
}

fn propagate(layers: &[Arc<dyn VectorMap>], start: &[Point]) -> Result<Vec<Vec<Point>>> {
    let mut z = vec![start.to_vec()];
    for (k, layer) in layers.iter().enumerate() {
        let next = z[k]
            .par_iter()
            .map(|p| layer.eval(p))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_layer(k + 1))?;
        z.push(next);
    }
    Ok(z)
}

impl CompositionState {
    pub fn new(layers: Vec<Arc<dyn VectorMap>>, x: Vec<Point>) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let d = x[0].len();
        for l in &layers {
            check_dim(d, l.dim())?;
        }
        for p in &x {
            check_dim(d, p.len())?;
        }
        let z = propagate(&layers, &x)?;
        Ok(Self { layers, x, z, epsilons: None })
    }

    pub fn m(&self) -> usize {
        self.layers.len()
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn outputs(&self) -> &[Point] {
        &self.z[self.m()]
    }

    pub fn with_epsilons(mut self, eps: Vec<f64>) -> Result<Self> {
        if eps.len() != self.m() {
            return Err(Error::DimensionMismatch { expected: self.m(), got: eps.len() });
        }
        self.epsilons = Some(eps);
        Ok(self)
    }

    /// Certifies each layer on its traced input cloud, keeping the larger of
    /// the pair and grid estimates.
    pub fn certify(self, n_pairs: usize, seed: u64) -> Result<Self> {
        let eps = self
            .layers
            .iter()
            .enumerate()
            .map(|(k, l)| {
                certify_deviation(l.as_ref(), &Domain::Cloud(self.z[k].clone()), n_pairs, seed)
                    .map(|c| c.estimate())
                    .map_err(|e| e.in_layer(k + 1))
            })
            .collect::<Result<Vec<_>>>()?;
        self.with_epsilons(eps)
    }

    /// Largest per-layer certified deviation.
    pub fn epsilon(&self) -> Option<f64> {
        self.epsilons.as_ref().map(|e| e.iter().copied().fold(0.0, f64::max))
    }

    /// `Q(h) = mean 1/2 ||h(x_j) - y_j||^2`.
    pub fn loss(&self, targets: &[Point]) -> Result<f64> {
        check_dim(self.n(), targets.len())?;
        Ok(mean_half_sq(self.outputs(), targets))
    }

    fn check_layer(&self, i: usize) -> Result<()> {
        if i == 0 || i > self.m() {
            return Err(Error::InvalidParameter(format!("layer index {i} outside 1..={}", self.m())));
        }
        Ok(())
    }
}

fn mean_half_sq(out: &[Point], targets: &[Point]) -> f64 {
    let s: f64 = out.iter().zip(targets).map(|(a, b)| 0.5 * (a - b).norm_squared()).sum();
    s / out.len() as f64
}

/// `h(x_j) - h*(x_j)` at the sample inputs.
pub fn residual(state: &CompositionState, targets: &[Point]) -> Result<SampledFunction> {
    check_dim(state.n(), targets.len())?;
    let values = state.outputs().iter().zip(targets).map(|(a, b)| a - b).collect();
    SampledFunction::new(state.x.clone(), values)
}

/// Targets of a realizable sample, `y_j = h*(x_j)`.
pub fn targets_from<F: VectorMap + ?Sized>(target: &F, x: &[Point]) -> Result<Vec<Point>> {
    x.par_iter().map(|p| target.eval(p)).collect()
}

/// The descent direction for one layer and its normalizer.
#[derive(Debug, Clone)]
pub struct DeltaDirection {
    pub layer: usize,
    /// Values at `z_{i-1,j}`.
    pub delta: SampledFunction,
    /// `None` when the residual vanishes on the normed sample.
    pub c: Option<f64>,
    pub floor: f64,
}

/// `[Dh_m(z_{m-1}) ... Dh_{i+1}(z_i)]^{-1} v` by one solve per downstream
/// layer, starting from the last.
fn pull_back(state: &CompositionState, z: &[Vec<Point>], i: usize, j: usize, v: &Point) -> Result<Point> {
    let mut w = v.clone();
    for l in (i + 1..=state.m()).rev() {
        let jac = state.layers[l - 1].jacobian(&z[l - 1][j])?;
        w = linalg::solve(&jac, &w).map_err(|_| {
            Error::Regime(format!("layer {l} Jacobian is singular at sample {j}"))
        })?;
    }
    Ok(w)
}

/// Downstream Jacobians applied to `v` at sample `j`.
fn push_forward_one(state: &CompositionState, z: &[Vec<Point>], i: usize, j: usize, v: &Point) -> Result<Point> {
    let mut w = v.clone();
    for l in i + 1..=state.m() {
        w = state.layers[l - 1].jacobian(&z[l - 1][j])? * w;
    }
    Ok(w)
}

fn build_delta_on(
    state: &CompositionState,
    z: &[Vec<Point>],
    i: usize,
    targets: &[Point],
    floor: f64,
) -> Result<DeltaDirection> {
    let m = state.m();
    let raw: Vec<Point> = (0..state.n())
        .into_par_iter()
        .map(|j| pull_back(state, z, i, j, &(&targets[j] - &z[m][j])))
        .collect::<Result<_>>()?;
    // the normalizing sup runs over the inputs kept by the floor
    let scale = raw
        .iter()
        .zip(&z[i - 1])
        .zip(&state.x)
        .filter(|(_, x)| x.norm() >= floor)
        .map(|((r, p), _)| if p.norm() > 0.0 { r.norm() / p.norm() } else { 0.0 })
        .fold(0.0, f64::max);
    let (c, values) = if scale > 0.0 && scale.is_finite() {
        let c = 1.0 / scale;
        (Some(c), raw.into_iter().map(|r| r * c).collect())
    } else {
        (None, vec![DVector::zeros(raw.first().map_or(0, DVector::len)); raw.len()])
    };
    Ok(DeltaDirection { layer: i, delta: SampledFunction::new(z[i - 1].clone(), values)?, c, floor })
}

/// Direction for layer `i` (1-based), normalized to unit sample-induced norm
/// over inputs with `||x_j|| >= floor`.
pub fn build_delta(state: &CompositionState, i: usize, targets: &[Point], floor: f64) -> Result<DeltaDirection> {
    state.check_layer(i)?;
    check_dim(state.n(), targets.len())?;
    build_delta_on(state, &state.z, i, targets, floor)
}

/// Downstream image of the direction, `c (y_j - h(x_j))` for the proof's choice.
pub fn push_forward(state: &CompositionState, dir: &DeltaDirection) -> Result<Vec<Point>> {
    state.check_layer(dir.layer)?;
    (0..state.n())
        .into_par_iter()
        .map(|j| push_forward_one(state, &state.z, dir.layer, j, &dir.delta.values[j]))
        .collect()
}

/// Loss after replacing layer `i` outputs by `z_i + t D` and propagating.
fn perturbed_loss(state: &CompositionState, dir: &DeltaDirection, targets: &[Point], t: f64) -> Result<f64> {
    let i = dir.layer;
    let start: Vec<Point> = state.z[i].iter().zip(&dir.delta.values).map(|(z, d)| z + d * t).collect();
    let out = propagate(&state.layers[i..], &start)?;
    Ok(mean_half_sq(out.last().unwrap_or(&start), targets))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DirectionalDerivative {
    pub t: f64,
    /// `(Q(h_t) - Q(h)) / t`.
    pub fd_value: f64,
    /// `-c mean ||h(x_j) - y_j||^2`.
    pub exact_value: f64,
    /// `mean <h(x_j) - y_j, J_j D_j>` from the downstream Jacobians.
    pub jvp_value: f64,
}

pub fn directional_derivative(
    state: &CompositionState,
    dir: &DeltaDirection,
    targets: &[Point],
    t: f64,
) -> Result<DirectionalDerivative> {
    state.check_layer(dir.layer)?;
    check_dim(state.n(), targets.len())?;
    if !(t > 0.0) {
        return Err(Error::InvalidParameter(format!("step t = {t} must be positive")));
    }
    let n = state.n() as f64;
    let q = state.loss(targets)?;
    let fd_value = (perturbed_loss(state, dir, targets, t)? - q) / t;
    let res: Vec<Point> = state.outputs().iter().zip(targets).map(|(a, b)| a - b).collect();
    let exact_value = match dir.c {
        Some(c) => -c * res.iter().map(|r| r.norm_squared()).sum::<f64>() / n,
        None => 0.0,
    };
    let pushed = push_forward(state, dir)?;
    let jvp_value = res.iter().zip(&pushed).map(|(r, p)| r.dot(p)).sum::<f64>() / n;
    Ok(DirectionalDerivative { t, fd_value, exact_value, jvp_value })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerBound {
    pub i: usize,
    pub c: Option<f64>,
    pub exact_value: f64,
    pub fd_value: f64,
    pub bound_rhs: f64,
    /// `bound_rhs (1 - slack) - exact_value`; nonnegative when the bound holds.
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DescentBoundReport {
    pub m: usize,
    pub n: usize,
    pub epsilon: f64,
    /// `(1 - epsilon)^(m-1)`.
    pub prefactor: f64,
    pub norm_floor: f64,
    pub loss: f64,
    pub loss_star: f64,
    /// Sample-induced `||h - h*||`.
    pub residual_norm: f64,
    pub slack: f64,
    pub per_layer: Vec<LayerBound>,
    pub all_pass: bool,
}

/// Checks `D_i Q(h)(D) <= -(1 - eps)^(m-1) (Q(h) - Q(h*)) / ||h - h*||` for
/// every layer on a realizable sample (`Q(h*) = 0`).
pub fn verify_descent_bound(
    state: &CompositionState,
    targets: &[Point],
    epsilon: f64,
    floor: f64,
) -> Result<DescentBoundReport> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Regime(format!("epsilon = {epsilon} must lie in [0, 1)")));
    }
    check_dim(state.n(), targets.len())?;
    let m = state.m();
    let prefactor = (1.0 - epsilon).powi(m as i32 - 1);
    let loss = state.loss(targets)?;
    let loss_star = 0.0;
    let residual_norm = residual(state, targets)?.induced_norm(floor);
    let gap = loss - loss_star;
    let bound_rhs = if residual_norm > 0.0 { -prefactor * gap / residual_norm } else { 0.0 };

    let per_layer = (1..=m)
        .map(|i| {
            let dir = build_delta(state, i, targets, floor)?;
            let dd = directional_derivative(state, &dir, targets, FD_STEP)?;
            let margin = bound_rhs * (1.0 - BOUND_SLACK) - dd.exact_value;
            Ok(LayerBound {
                i,
                c: dir.c,
                exact_value: dd.exact_value,
                fd_value: dd.fd_value,
                bound_rhs,
                margin,
                pass: margin >= 0.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let all_pass = per_layer.iter().all(|l| l.pass);
    Ok(DescentBoundReport {
        m,
        n: state.n(),
        epsilon,
        prefactor,
        norm_floor: floor,
        loss,
        loss_star,
        residual_norm,
        slack: BOUND_SLACK,
        per_layer,
        all_pass,
    })
}

/// Default floor `1e-3 R` for a sample of radius `R`.
pub fn default_floor(x: &[Point]) -> f64 {
    FLOOR_FRACTION * x.iter().map(|p| p.norm()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DescentCurve {
    pub layer: usize,
    /// On-sample loss before the first step and after each step.
    pub losses: Vec<f64>,
    /// Step used at each iteration after backtracking.
    pub steps: Vec<f64>,
    pub halvings: usize,
    /// Set when backtracking could not find a decrease.
    pub stalled: bool,
}

/// Functional descent on layer `i` with every other layer frozen. The layer
/// is replaced by its values at the fixed inputs `z_{i-1,j}`, updated by
/// `step * D` with backtracking whenever the loss would increase.
pub fn functional_descent_demo(
    state: &CompositionState,
    i: usize,
    targets: &[Point],
    step: f64,
    n_steps: usize,
) -> Result<(DescentCurve, SampledFunction)> {
    state.check_layer(i)?;
    check_dim(state.n(), targets.len())?;
    if !(step > 0.0) {
        return Err(Error::InvalidParameter(format!("step {step} must be positive")));
    }
    let floor = default_floor(&state.x);
    let downstream = &state.layers[i..];
    let mut z = state.z.clone();
    let mut loss = mean_half_sq(&z[state.m()], targets);
    let mut curve = DescentCurve { layer: i, losses: vec![loss], steps: Vec::new(), halvings: 0, stalled: false };
    let mut s = step;
    for _ in 0..n_steps {
        let dir = build_delta_on(state, &z, i, targets, floor)?;
        if dir.c.is_none() {
            curve.losses.push(loss);
            curve.steps.push(0.0);
            continue;
        }
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let vals: Vec<Point> = z[i].iter().zip(&dir.delta.values).map(|(v, d)| v + d * s).collect();
            let tail = propagate(downstream, &vals)?;
            let cand = mean_half_sq(tail.last().unwrap_or(&vals), targets);
            if cand <= loss {
                accepted = Some((tail, cand));
                break;
            }
            s *= 0.5;
            curve.halvings += 1;
        }
        match accepted {
            Some((tail, cand)) => {
                for (k, level) in tail.into_iter().enumerate() {
                    z[i + k] = level;
                }
                loss = cand;
                curve.losses.push(loss);
                curve.steps.push(s);
            }
            None => {
                curve.stalled = true;
                curve.losses.push(loss);
                curve.steps.push(0.0);
            }
        }
    }
    let layer = SampledFunction::new(z[i - 1].clone(), z[i].clone())?;
    Ok((curve, layer))
}

/// Least-squares slope of `log |fd - exact|` against `log t`.
pub fn convergence_order(points: &[DirectionalDerivative]) -> Option<f64> {
    let xy: Vec<(f64, f64)> = points
        .iter()
        .map(|p| (p.t.ln(), (p.fd_value - p.exact_value).abs()))
        .filter(|(_, e)| *e > 0.0)
        .map(|(t, e)| (t, e.ln()))
        .collect();
    if xy.len() < 2 {
        return None;
    }
    let n = xy.len() as f64;
    let mx = xy.iter().map(|p| p.0).sum::<f64>() / n;
    let my = xy.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = xy.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = xy.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}
