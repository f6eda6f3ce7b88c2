//! JSON experiment configs, one per subcommand.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::decomposition::RatioRule;
use crate::error::{Error, Result};
use crate::map_core::{MapSpec, DEFAULT_INVERSE_TOL};
use crate::resnet::ResNetParams;

fn d_m_linear() -> usize {
    4
}
fn d_m_values() -> Vec<usize> {
    vec![16]
}
fn d_m_nonlinear() -> usize {
    16
}
fn d_n_cloud() -> usize {
    1000
}
fn d_n_pairs() -> usize {
    3000
}
fn d_n_check() -> usize {
    1000
}
fn d_tol() -> f64 {
    DEFAULT_INVERSE_TOL
}
fn d_n() -> usize {
    200
}
fn d_radius() -> f64 {
    1.0
}
fn d_lr() -> f64 {
    0.1
}
fn d_steps() -> usize {
    1000
}
fn d_fd_step() -> f64 {
    1e-5
}
fn d_descent_steps() -> usize {
    50
}
fn d_cert_pairs() -> usize {
    2000
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {v} must be positive")))
    }
}

fn at_least(name: &str, v: usize, min: usize) -> Result<()> {
    if v >= min {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {v} must be at least {min}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecomposeConfig {
    pub map: MapSpec,
    #[serde(default = "d_m_linear")]
    pub m_linear: usize,
    /// Nonlinear layer counts to sweep.
    #[serde(default = "d_m_values")]
    pub m_values: Vec<usize>,
    /// Fixed target; defaults to `B ln(2m)/(m-1)` per `m`.
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub rule: RatioRule,
    #[serde(default = "d_n_cloud")]
    pub n_cloud: usize,
    #[serde(default = "d_n_pairs")]
    pub n_pairs: usize,
    #[serde(default = "d_n_check")]
    pub n_check: usize,
    #[serde(default = "d_tol")]
    pub tol: f64,
    #[serde(default)]
    pub seed: u64,
}

impl DecomposeConfig {
    pub fn validate(&self) -> Result<()> {
        at_least("m_linear", self.m_linear, 1)?;
        if self.m_values.is_empty() {
            return Err(Error::Config("m_values must not be empty".into()));
        }
        for &m in &self.m_values {
            at_least("m_values entry", m, 2)?;
        }
        if let Some(e) = self.epsilon {
            positive("epsilon", e)?;
        }
        at_least("n_cloud", self.n_cloud, 2)?;
        at_least("n_pairs", self.n_pairs, 1)?;
        at_least("n_check", self.n_check, 1)?;
        positive("tol", self.tol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertifyMode {
    /// Certify the map itself on its ball.
    #[default]
    Map,
    /// Decompose the map and certify every layer.
    Stack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifyConfig {
    pub map: MapSpec,
    #[serde(default)]
    pub mode: CertifyMode,
    /// Target used for the pass column in map mode.
    #[serde(default)]
    pub epsilon_target: Option<f64>,
    #[serde(default = "d_m_linear")]
    pub m_linear: usize,
    #[serde(default = "d_m_nonlinear")]
    pub m_nonlinear: usize,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default = "d_n_cloud")]
    pub n_cloud: usize,
    #[serde(default = "d_n_pairs")]
    pub n_pairs: usize,
    #[serde(default)]
    pub seed: u64,
}

impl CertifyConfig {
    pub fn validate(&self) -> Result<()> {
        at_least("n_pairs", self.n_pairs, 1)?;
        if self.mode == CertifyMode::Stack {
            at_least("m_linear", self.m_linear, 1)?;
            at_least("m_nonlinear", self.m_nonlinear, 2)?;
            at_least("n_cloud", self.n_cloud, 2)?;
        }
        if let Some(e) = self.epsilon_target {
            if !(e >= 0.0) {
                return Err(Error::Config(format!("epsilon_target = {e} must be nonnegative")));
            }
        }
        if let Some(e) = self.epsilon {
            positive("epsilon", e)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorConfig {
    /// Row-major square matrix.
    pub matrix: Vec<Vec<f64>>,
    pub m: usize,
}

impl FactorConfig {
    pub fn validate(&self) -> Result<()> {
        at_least("m", self.m, 1)?;
        let d = self.matrix.len();
        if d == 0 || self.matrix.iter().any(|r| r.len() != d) {
            return Err(Error::Config("matrix must be square and nonempty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSpec {
    /// Random layers with `||A_i|| ||B_i|| = max_dev`.
    Random { m: usize, d: usize, k: usize, max_dev: f64 },
    Params { theta: ResNetParams },
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            GeneratorSpec::Random { m, d, k, max_dev } => {
                at_least("m", *m, 1)?;
                at_least("d", *d, 1)?;
                at_least("k", *k, 1)?;
                if !(*max_dev >= 0.0) {
                    return Err(Error::Config(format!("max_dev = {max_dev} must be nonnegative")));
                }
                Ok(())
            }
            GeneratorSpec::Params { theta } => theta.validate().map_err(|e| Error::Config(e.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaddleInit {
    #[default]
    Zero,
    Star,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaddleConfig {
    pub generator: GeneratorSpec,
    #[serde(default = "d_n")]
    pub n: usize,
    #[serde(default = "d_radius", rename = "R")]
    pub radius: f64,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default)]
    pub init: SaddleInit,
    #[serde(default = "d_fd_step")]
    pub fd_step: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SaddleConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        if self.n < 2 || !self.n.is_multiple_of(2) {
            return Err(Error::Config(format!("n = {} must be even and at least 2", self.n)));
        }
        positive("R", self.radius)?;
        positive("lr", self.lr)?;
        positive("fd_step", self.fd_step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StateSpec {
    /// Random residual layers with `||A_i|| ||B_i|| = max_dev`.
    Resnet { m: usize, d: usize, k: usize, max_dev: f64 },
    ResnetParams { theta: ResNetParams },
    /// Nonlinear layers of a normalized map split into `m` layers.
    Decomposition { map: MapSpec, m: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    /// `h* = h`.
    Same,
    /// Random residual network shaped like the state.
    Resnet { k: usize, max_dev: f64 },
    ResnetParams { theta: ResNetParams },
    Map { map: MapSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescentSpec {
    pub layer: usize,
    #[serde(default = "d_descent_steps")]
    pub steps: usize,
    /// Initial step; defaults to `1/c` of the first direction.
    #[serde(default)]
    pub step: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrechetConfig {
    pub state: StateSpec,
    pub target: TargetSpec,
    #[serde(default = "d_n")]
    pub n: usize,
    #[serde(default = "d_radius", rename = "R")]
    pub radius: f64,
    /// Overrides the certified per-layer maximum.
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default = "d_cert_pairs")]
    pub n_pairs: usize,
    /// Norm floor; defaults to `1e-3` times the sample radius.
    #[serde(default)]
    pub floor: Option<f64>,
    #[serde(default)]
    pub descent: Option<DescentSpec>,
    #[serde(default)]
    pub seed: u64,
}

impl FrechetConfig {
    pub fn validate(&self) -> Result<()> {
        at_least("n", self.n, 1)?;
        positive("R", self.radius)?;
        at_least("n_pairs", self.n_pairs, 1)?;
        match &self.state {
            StateSpec::Resnet { m, d, k, .. } => {
                at_least("m", *m, 1)?;
                at_least("d", *d, 1)?;
                at_least("k", *k, 1)?;
            }
            StateSpec::ResnetParams { theta } => theta.validate().map_err(|e| Error::Config(e.to_string()))?,
            StateSpec::Decomposition { m, .. } => at_least("m", *m, 2)?,
        }
        if let Some(e) = self.epsilon {
            if !(e >= 0.0) {
                return Err(Error::Config(format!("epsilon = {e} must be nonnegative")));
            }
        }
        if let Some(f) = self.floor {
            if !(f >= 0.0) {
                return Err(Error::Config(format!("floor = {f} must be nonnegative")));
            }
        }
        if let Some(d) = &self.descent {
            at_least("descent.layer", d.layer, 1)?;
            if let Some(s) = d.step {
                positive("descent.step", s)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotConfig {
    pub inputs: Vec<PathBuf>,
}
