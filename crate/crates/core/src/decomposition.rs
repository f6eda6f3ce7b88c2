//! Exact splitting of a smooth invertible map into near-identity layers.
//!
//! For a normalized map `h` (`h(0) = 0`, `Dh(0) = I`) and a geometric
//! schedule `a_i = (1 - c)^(m - i)`, the maps `g_i(x) = h(a_i x) / a_i` run
//! from nearly the identity (`g_1`) to `h` itself (`g_m`), and the layers
//! `h_1 = g_1`, `h_i = g_i o g_{i-1}^{-1}` telescope to `h`. A general map is
//! first conjugated by translations and its anchor Jacobian, which is split
//! with [`crate::linear_factor`].

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::linear_factor::{factor_near_identity, LinearFactorization};
use crate::lipschitz_cert::{certify_deviation, Domain, LipschitzCertificate, RATIO_SLACK};
use crate::map_core::{Point, SmoothMap, VectorMap, DEFAULT_INVERSE_TOL};
use crate::sampling;

/// Ratio used when `epsilon >= B` leaves `c` unconstrained from above.
pub const RATIO_CAP: f64 = 0.9;

/// Largest layer count tried by the minimal-`m` scan.
pub const MAX_SCAN_M: usize = 1 << 40;

/// Tolerance on `h(0) = 0` and `Dh(0) = I` when checking normalization.
const NORMALIZED_TOL: f64 = 1e-8;

/// `max{alpha M (R + M), M (L + 1 + 2 R alpha) + alpha R^2}` with `L = 1 + alpha R`.
pub fn compute_b(alpha: f64, radius: f64, inv_lip: f64) -> Result<f64> {
    for (name, v) in [("alpha", alpha), ("R", radius), ("M", inv_lip)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::InvalidParameter(format!("{name} = {v} must be positive")));
        }
    }
    let lip = 1.0 + alpha * radius;
    let first = alpha * inv_lip * (radius + inv_lip);
    let second = inv_lip * (lip + 1.0 + 2.0 * radius * alpha) + alpha * radius * radius;
    Ok(first.max(second))
}

/// `B ln(2m) / (m - 1)`, the smallest deviation the construction guarantees
/// with `m` layers.
pub fn epsilon_threshold(b: f64, m: usize) -> f64 {
    let m = m as f64;
    b * (2.0 * m).ln() / (m - 1.0)
}

/// Smallest `m >= 2` with `epsilon >= B ln(2m) / (m - 1)`.
pub fn min_layers(b: f64, epsilon: f64) -> Option<usize> {
    if epsilon_threshold(b, 2) <= epsilon {
        return Some(2);
    }
    let mut hi = 4;
    while epsilon_threshold(b, hi) > epsilon {
        if hi >= MAX_SCAN_M {
            return None;
        }
        hi *= 2;
    }
    let mut lo = hi / 2;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if epsilon_threshold(b, mid) <= epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

/// How `c` is picked inside the feasible interval
/// `1 - (epsilon / (2 alpha R))^(1/(m-1)) <= c <= epsilon / B`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioRule {
    /// `c = epsilon / B`, capped at [`RATIO_CAP`] unless the lower end is larger.
    #[default]
    Largest,
    /// `c = min{epsilon / B, lower end}`, with `1/m` standing in for a
    /// vacuous lower end.
    Smallest,
    /// Fixed ratio, feasibility still evaluated.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub m: usize,
    pub epsilon: f64,
    pub c: f64,
    /// `a_1..a_m`, increasing, `a_m = 1`.
    pub a: Vec<f64>,
    pub feasible: bool,
    #[serde(rename = "B")]
    pub b: f64,
    pub alpha: f64,
    #[serde(rename = "R")]
    pub radius: f64,
    #[serde(rename = "M")]
    pub inv_lip: f64,
    pub rule: RatioRule,
    /// Smallest `m` meeting `epsilon >= B ln(2m)/(m-1)`; set when infeasible.
    pub min_m: Option<usize>,
    /// False when `epsilon >= 1`, where the functional-gradient bound no
    /// longer applies.
    pub near_identity_regime: bool,
}

impl Schedule {
    /// Upper end of the feasible ratio interval.
    pub fn ratio_upper(&self) -> f64 {
        self.epsilon / self.b
    }

    /// Lower end of the feasible ratio interval (0 when vacuous).
    pub fn ratio_lower(&self) -> f64 {
        ratio_lower(self.m, self.epsilon, self.alpha, self.radius)
    }

    /// `epsilon / (2 alpha R)`, the bound on `a_1`.
    pub fn a1_bound(&self) -> f64 {
        self.epsilon / (2.0 * self.alpha * self.radius)
    }

    pub fn check_feasible(&self) -> Result<()> {
        if self.feasible {
            Ok(())
        } else {
            Err(Error::Infeasible {
                m: self.m,
                epsilon: self.epsilon,
                min_m: self.min_m.unwrap_or(MAX_SCAN_M),
            })
        }
    }
}

fn ratio_lower(m: usize, epsilon: f64, alpha: f64, radius: f64) -> f64 {
    let q = epsilon / (2.0 * alpha * radius);
    if q >= 1.0 {
        0.0
    } else {
        1.0 - q.powf(1.0 / (m - 1) as f64)
    }
}

pub fn build_schedule(m: usize, epsilon: f64, alpha: f64, radius: f64, inv_lip: f64) -> Result<Schedule> {
    build_schedule_with(m, epsilon, alpha, radius, inv_lip, RatioRule::Largest)
}

pub fn build_schedule_with(
    m: usize,
    epsilon: f64,
    alpha: f64,
    radius: f64,
    inv_lip: f64,
    rule: RatioRule,
) -> Result<Schedule> {
    if m < 2 {
        return Err(Error::InvalidParameter(format!("schedule needs m >= 2, got {m}")));
    }
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidParameter(format!("epsilon = {epsilon} must be positive")));
    }
    let b = compute_b(alpha, radius, inv_lip)?;
    let upper = epsilon / b;
    let lower = ratio_lower(m, epsilon, alpha, radius);
    let c = match rule {
        // past the cap a_1 = (1 - c)^(m-1) underflows for large m
        RatioRule::Largest => upper.min(lower.max(RATIO_CAP)),
        RatioRule::Smallest => {
            let c = if lower > 0.0 { lower.min(upper) } else { upper.min(1.0 / m as f64) };
            c.min(RATIO_CAP.max(lower))
        }
        RatioRule::Fixed(c) => {
            if !(c > 0.0 && c < 1.0) {
                return Err(Error::InvalidParameter(format!("ratio c = {c} must lie in (0, 1)")));
            }
            c
        }
    };
    let a = (1..=m).map(|i| (1.0 - c).powi((m - i) as i32)).collect::<Vec<_>>();
    if !(a[0] > 0.0) {
        return Err(Error::InvalidParameter(format!("ratio c = {c} underflows a_1 at m = {m}")));
    }
    let slack = 1.0 + 1e-12;
    let feasible = c <= upper * slack && a[0] <= epsilon / (2.0 * alpha * radius) * slack;
    let min_m = if feasible { None } else { Some(min_layers(b, epsilon).unwrap_or(MAX_SCAN_M)) };
    Ok(Schedule {
        m,
        epsilon,
        c,
        a,
        feasible,
        b,
        alpha,
        radius,
        inv_lip,
        rule,
        min_m,
        near_identity_regime: epsilon < 1.0,
    })
}

/// Schedule of a normalized map with its own constants.
pub fn schedule_for(map: &SmoothMap, m: usize, epsilon: f64, rule: RatioRule) -> Result<Schedule> {
    build_schedule_with(m, epsilon, map.alpha(), map.radius(), map.inv_lip(), rule)
}

/// `h_i = g_i o g_{i-1}^{-1}`, or `g_1` for the first layer.
#[derive(Debug, Clone)]
pub struct NonlinearLayer {
    /// 1-based position within the nonlinear block.
    pub index: usize,
    map: Arc<SmoothMap>,
    a_prev: Option<f64>,
    a: f64,
    tol: f64,
}

impl NonlinearLayer {
    pub fn map(&self) -> &SmoothMap {
        &self.map
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn a_prev(&self) -> Option<f64> {
        self.a_prev
    }

    /// Residual tolerance on `h` inside `g_{i-1}^{-1}`; scaled by `a_{i-1}`
    /// so the error in the preimage stays near `tol`.
    pub fn inversion_tolerance(&self) -> f64 {
        self.tol * self.a_prev.unwrap_or(1.0)
    }

    /// `g_{i-1}^{-1}(x) = h^{-1}(a_{i-1} x) / a_{i-1}`.
    fn preimage(&self, x: &Point) -> Result<Point> {
        match self.a_prev {
            None => Ok(x.clone()),
            Some(ap) => {
                let u = self.map.invert(&(x * ap), self.inversion_tolerance())?;
                Ok(u / ap)
            }
        }
    }

    fn layer_error(&self, e: Error) -> Error {
        e.in_layer(self.index)
    }

    /// `g_{i-1}(g_i^{-1}(y))`, exact up to one inversion of `h`.
    pub fn invert(&self, y: &Point) -> Result<Point> {
        check_dim(self.map.dim(), y.len())?;
        let u = self
            .map
            .invert(&(y * self.a), self.tol * self.a)
            .map_err(|e| self.layer_error(e))?
            / self.a;
        match self.a_prev {
            None => Ok(u),
            Some(ap) => Ok(self.map.eval(&(u * ap))? / ap),
        }
    }
}

impl VectorMap for NonlinearLayer {
    fn dim(&self) -> usize {
        self.map.dim()
    }

    fn eval(&self, x: &Point) -> Result<Point> {
        check_dim(self.map.dim(), x.len())?;
        let u = self.preimage(x).map_err(|e| self.layer_error(e))?;
        Ok(self.map.eval(&(u * self.a))? / self.a)
    }

    /// `Dh(a_i u) Dh(a_{i-1} u)^{-1}` at `u = g_{i-1}^{-1}(x)`.
    fn jacobian(&self, x: &Point) -> Result<DMatrix<f64>> {
        check_dim(self.map.dim(), x.len())?;
        let u = self.preimage(x).map_err(|e| self.layer_error(e))?;
        let outer = self.map.jacobian(&(&u * self.a))?;
        match self.a_prev {
            None => Ok(outer),
            Some(ap) => {
                let inner = self.map.jacobian(&(&u * ap))?;
                let inner_inv = linalg::invert(&inner).map_err(|e| self.layer_error(e))?;
                Ok(outer * inner_inv)
            }
        }
    }

    fn has_analytic_jacobian(&self) -> bool {
        true
    }
}

fn check_normalized(map: &SmoothMap) -> Result<()> {
    let d = map.dim();
    let zero = DVector::zeros(d);
    let h0 = map.eval(&zero)?.norm();
    let j0 = (map.jacobian(&zero)? - DMatrix::identity(d, d)).norm();
    if h0 > NORMALIZED_TOL || j0 > NORMALIZED_TOL {
        return Err(Error::InvalidParameter(format!(
            "split needs a normalized map (|h(0)| = {h0:e}, |Dh(0) - I| = {j0:e})"
        )));
    }
    Ok(())
}

/// The `m` nonlinear layers of a normalized map.
pub fn split(map: &SmoothMap, schedule: &Schedule) -> Result<Vec<NonlinearLayer>> {
    split_with_tol(map, schedule, DEFAULT_INVERSE_TOL)
}

pub fn split_with_tol(map: &SmoothMap, schedule: &Schedule, tol: f64) -> Result<Vec<NonlinearLayer>> {
    check_normalized(map)?;
    schedule.check_feasible()?;
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance {tol} must be positive")));
    }
    let map = Arc::new(map.clone());
    Ok(schedule
        .a
        .iter()
        .enumerate()
        .map(|(k, &a)| NonlinearLayer {
            index: k + 1,
            map: Arc::clone(&map),
            a_prev: (k > 0).then(|| schedule.a[k - 1]),
            a,
            tol,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Translation,
    Linear,
    Nonlinear,
}

#[derive(Debug, Clone)]
pub enum Layer {
    /// `x + shift`.
    Translation(DVector<f64>),
    /// `(I + A) x`.
    Linear(DMatrix<f64>),
    Nonlinear(NonlinearLayer),
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Translation(_) => LayerKind::Translation,
            Layer::Linear(_) => LayerKind::Linear,
            Layer::Nonlinear(_) => LayerKind::Nonlinear,
        }
    }

    pub fn invert(&self, y: &Point) -> Result<Point> {
        match self {
            Layer::Translation(s) => Ok(y - s),
            Layer::Linear(a) => linalg::solve(&(a + DMatrix::identity(a.nrows(), a.ncols())), y),
            Layer::Nonlinear(l) => l.invert(y),
        }
    }
}

impl VectorMap for Layer {
    fn dim(&self) -> usize {
        match self {
            Layer::Translation(s) => s.len(),
            Layer::Linear(a) => a.nrows(),
            Layer::Nonlinear(l) => l.dim(),
        }
    }

    fn eval(&self, x: &Point) -> Result<Point> {
        check_dim(self.dim(), x.len())?;
        match self {
            Layer::Translation(s) => Ok(x + s),
            Layer::Linear(a) => Ok(x + a * x),
            Layer::Nonlinear(l) => l.eval(x),
        }
    }

    fn jacobian(&self, x: &Point) -> Result<DMatrix<f64>> {
        check_dim(self.dim(), x.len())?;
        let d = self.dim();
        match self {
            Layer::Translation(_) => Ok(DMatrix::identity(d, d)),
            Layer::Linear(a) => Ok(a + DMatrix::identity(d, d)),
            Layer::Nonlinear(l) => l.jacobian(x),
        }
    }

    fn has_analytic_jacobian(&self) -> bool {
        true
    }
}

/// Deviation certificate of one stack layer on its pushforward cloud.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerCertificate {
    /// 1-based position in the stack.
    pub layer: usize,
    pub kind: LayerKind,
    pub epsilon_target: f64,
    pub pass: bool,
    #[serde(flatten)]
    pub certificate: LipschitzCertificate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecomposeOptions {
    pub m_linear: usize,
    pub m_nonlinear: usize,
    /// Defaults to the threshold `B ln(2m) / (m - 1)` of the normalized map.
    pub epsilon: Option<f64>,
    pub rule: RatioRule,
    pub tol: f64,
    /// Size of the domain sample pushed through the stack.
    pub n_cloud: usize,
    pub n_pairs: usize,
    /// Sample size of the composition check.
    pub n_check: usize,
    pub seed: u64,
}

impl Default for DecomposeOptions {
    fn default() -> Self {
        Self {
            m_linear: 4,
            m_nonlinear: 16,
            epsilon: None,
            rule: RatioRule::Largest,
            tol: DEFAULT_INVERSE_TOL,
            n_cloud: 1000,
            n_pairs: 3000,
            n_check: 1000,
            seed: 0,
        }
    }
}

/// `h = t_+ o (I + A_1) o ... o (I + A_m) o h_m o ... o h_1 o t_-`, stored in
/// application order.
#[derive(Debug, Clone)]
pub struct LayerStack {
    pub dim: usize,
    pub radius: f64,
    pub layers: Vec<Layer>,
    pub schedule: Schedule,
    pub factorization: LinearFactorization,
    pub certificates: Vec<LayerCertificate>,
    /// Max `||stack(x) - h(x)||` over the check sample.
    pub composition_error: f64,
    pub n_check: usize,
    pub tol: f64,
}

impl LayerStack {
    /// Applies layers `1..=upto` (all by default).
    pub fn eval_upto(&self, x: &Point, upto: Option<usize>) -> Result<Point> {
        check_dim(self.dim, x.len())?;
        let n = upto.unwrap_or(self.layers.len());
        if n > self.layers.len() {
            return Err(Error::InvalidParameter(format!(
                "upto = {n} exceeds the {} layers of the stack",
                self.layers.len()
            )));
        }
        let mut y = x.clone();
        for (k, layer) in self.layers[..n].iter().enumerate() {
            y = layer.eval(&y).map_err(|e| match e {
                e @ Error::Layer { .. } => e,
                e => e.in_layer(k + 1),
            })?;
        }
        Ok(y)
    }

    /// Index range of the nonlinear layers in the stack (0-based).
    pub fn nonlinear_range(&self) -> std::ops::Range<usize> {
        let start = self.layers.iter().position(|l| l.kind() == LayerKind::Nonlinear).unwrap_or(0);
        start..start + self.schedule.m
    }

    /// Largest certified deviation among the nonlinear layers, taking the
    /// larger of the pair and grid estimates.
    pub fn max_nonlinear_deviation(&self) -> f64 {
        self.certificates
            .iter()
            .filter(|c| c.kind == LayerKind::Nonlinear)
            .map(|c| c.certificate.estimate())
            .fold(0.0, f64::max)
    }

    pub fn manifest(&self) -> StackManifest {
        StackManifest {
            dim: self.dim,
            radius: self.radius,
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(k, l)| LayerEntry { layer: k + 1, kind: l.kind() })
                .collect(),
            schedule: self.schedule.clone(),
            factorization: self.factorization.clone(),
            certificates: self.certificates.clone(),
            composition_error: self.composition_error,
            n_check: self.n_check,
            tol: self.tol,
        }
    }
}

impl VectorMap for LayerStack {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &Point) -> Result<Point> {
        self.eval_upto(x, None)
    }

    fn jacobian(&self, x: &Point) -> Result<DMatrix<f64>> {
        check_dim(self.dim, x.len())?;
        let mut y = x.clone();
        let mut jac = DMatrix::identity(self.dim, self.dim);
        for layer in &self.layers {
            jac = layer.jacobian(&y)? * jac;
            y = layer.eval(&y)?;
        }
        Ok(jac)
    }

    fn has_analytic_jacobian(&self) -> bool {
        true
    }
}

/// Prefix evaluation `h_upto o ... o h_1 (x)`.
pub fn eval_stack(stack: &LayerStack, x: &Point, upto: Option<usize>) -> Result<Point> {
    stack.eval_upto(x, upto)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerEntry {
    pub layer: usize,
    pub kind: LayerKind,
}

/// Serializable summary of a [`LayerStack`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StackManifest {
    pub dim: usize,
    pub radius: f64,
    pub layers: Vec<LayerEntry>,
    pub schedule: Schedule,
    pub factorization: LinearFactorization,
    pub certificates: Vec<LayerCertificate>,
    pub composition_error: f64,
    pub n_check: usize,
    pub tol: f64,
}

pub fn full_decompose(
    map: &SmoothMap,
    m_linear: usize,
    m_nonlinear: usize,
    epsilon: Option<f64>,
) -> Result<LayerStack> {
    let opts = DecomposeOptions { m_linear, m_nonlinear, epsilon, ..DecomposeOptions::default() };
    full_decompose_with(map, &opts)
}

/// Normalized-map schedule of a full decomposition, without building layers.
pub fn plan_schedule(map: &SmoothMap, opts: &DecomposeOptions) -> Result<Schedule> {
    let normalized = map.normalize()?;
    let b = compute_b(normalized.alpha(), normalized.radius(), normalized.inv_lip())?;
    let epsilon = match opts.epsilon {
        Some(e) => e,
        None if opts.m_nonlinear >= 2 => epsilon_threshold(b, opts.m_nonlinear),
        None => return Err(Error::InvalidParameter("m_nonlinear must be at least 2".into())),
    };
    schedule_for(&normalized, opts.m_nonlinear, epsilon, opts.rule)
}

pub fn full_decompose_with(map: &SmoothMap, opts: &DecomposeOptions) -> Result<LayerStack> {
    let d = map.dim();
    let normalized = map.normalize()?;
    let schedule = plan_schedule(map, opts)?;
    let nonlinear = split_with_tol(&normalized, &schedule, opts.tol)?;

    let anchor = map.anchor().clone();
    let jac = map.jacobian(&anchor)?;
    let factorization = factor_near_identity(&jac, opts.m_linear)?;
    let offset = map.eval(&anchor)?;

    let mut layers = vec![Layer::Translation(-&anchor)];
    layers.extend(nonlinear.into_iter().map(Layer::Nonlinear));
    // D = (I + A_1)...(I + A_m) acts on a vector starting from A_m
    layers.extend(factorization.factors.iter().rev().cloned().map(Layer::Linear));
    layers.push(Layer::Translation(offset));

    let mut stack = LayerStack {
        dim: d,
        radius: map.radius(),
        layers,
        schedule,
        factorization,
        certificates: Vec::new(),
        composition_error: 0.0,
        n_check: opts.n_check,
        tol: opts.tol,
    };
    stack.composition_error = composition_error(&stack, map, opts.n_check, opts.seed)?;
    stack.certificates = certify_stack(&stack, opts.n_cloud, opts.n_pairs, opts.seed)?;
    Ok(stack)
}

/// Max `||stack(x) - h(x)||` over `n` seeded samples of `B_R`.
pub fn composition_error<F: VectorMap + ?Sized>(stack: &LayerStack, map: &F, n: usize, seed: u64) -> Result<f64> {
    let pts = sampling::sample_ball(seed, n, stack.dim, stack.radius);
    let errs: Vec<f64> = pts
        .par_iter()
        .map(|x| Ok((stack.eval(x)? - map.eval(x)?).norm()))
        .collect::<Result<_>>()?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

/// Certifies every layer on the image of a seeded `B_R` sample under the
/// preceding layers.
pub fn certify_stack(stack: &LayerStack, n_cloud: usize, n_pairs: usize, seed: u64) -> Result<Vec<LayerCertificate>> {
    let mut cloud = sampling::sample_ball(seed.wrapping_add(1), n_cloud, stack.dim, stack.radius);
    let linear_target = stack.factorization.target_bound();
    let mut certs = Vec::with_capacity(stack.layers.len());
    for (k, layer) in stack.layers.iter().enumerate() {
        let target = match layer.kind() {
            LayerKind::Translation => 0.0,
            LayerKind::Linear => linear_target,
            LayerKind::Nonlinear => stack.schedule.epsilon,
        };
        let certificate = certify_deviation(layer, &Domain::Cloud(cloud.clone()), n_pairs, seed)
            .map_err(|e| e.in_layer(k + 1))?;
        let pass = certificate.pair_lower_bound <= target + RATIO_SLACK
            && certificate.jac_grid_estimate <= target + RATIO_SLACK;
        certs.push(LayerCertificate { layer: k + 1, kind: layer.kind(), epsilon_target: target, pass, certificate });
        if k + 1 < stack.layers.len() {
            cloud = cloud.par_iter().map(|x| layer.eval(x)).collect::<Result<_>>()?;
        }
    }
    Ok(certs)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecayRow {
    pub m: usize,
    pub epsilon: f64,
    /// `ln(2m) / (m - 1)`.
    pub rate: f64,
    pub c: f64,
    pub max_pair: f64,
    pub max_jac: f64,
    pub composition_error: f64,
    pub pass: bool,
}

/// Decomposes `map` at `epsilon = B ln(2m)/(m-1)` for each `m` and records the
/// largest certified nonlinear-layer deviation.
pub fn decay_sweep(map: &SmoothMap, ms: &[usize], base: &DecomposeOptions) -> Result<Vec<DecayRow>> {
    ms.iter()
        .map(|&m| {
            let opts = DecomposeOptions { m_nonlinear: m, epsilon: None, ..base.clone() };
            let stack = full_decompose_with(map, &opts)?;
            let nonlinear = stack.certificates.iter().filter(|c| c.kind == LayerKind::Nonlinear);
            let (max_pair, max_jac, pass) = nonlinear.fold((0.0f64, 0.0f64, true), |(p, j, ok), c| {
                (p.max(c.certificate.pair_lower_bound), j.max(c.certificate.jac_grid_estimate), ok && c.pass)
            });
            Ok(DecayRow {
                m,
                epsilon: stack.schedule.epsilon,
                rate: (2.0 * m as f64).ln() / (m as f64 - 1.0),
                c: stack.schedule.c,
                max_pair,
                max_jac,
                composition_error: stack.composition_error,
                pass,
            })
        })
        .collect()
}

/// Least-squares line `y = slope x + intercept`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecayFit {
    pub slope: f64,
    pub intercept: f64,
    /// Largest `|y - fit| / y`.
    pub max_rel_residual: f64,
}

pub fn fit_decay(x: &[f64], y: &[f64]) -> Result<DecayFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidParameter("fit needs at least two paired values".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidParameter("fit needs distinct abscissae".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let max_rel_residual = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - (slope * a + intercept)).abs() / b.abs())
        .fold(0.0, f64::max);
    Ok(DecayFit { slope, intercept, max_rel_residual })
}
