//! Command-line experiments. Each run reads a JSON config, writes the
//! resolved config and its SHA-256 next to its outputs, and stamps that hash
//! into every output file.

pub mod config;
pub mod plot;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::decomposition::{
    compute_b, epsilon_threshold, fit_decay, full_decompose_with, plan_schedule, schedule_for, split, DecayFit,
    DecomposeOptions, LayerKind, RatioRule,
};
use crate::error::{Error, Result};
use crate::functional_grad::{
    build_delta, default_floor, functional_descent_demo, verify_descent_bound, CompositionState, DescentCurve,
    DescentBoundReport,
};
use crate::linalg;
use crate::linear_factor::factor_near_identity;
use crate::lipschitz_cert::{certify_deviation, Domain, RATIO_SLACK};
use crate::map_core::{Point, SmoothMap, VectorMap};
use crate::resnet::{self, DatasetHeader, ResNetParams};
use crate::sampling;
use config::*;

#[derive(Debug, Parser)]
#[command(name = "nearid", version, about = "Near-identity decompositions and residual-network landscape experiments")]
pub struct Cli {
    /// Worker threads (defaults to all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split a map into near-identity layers and certify them over an m sweep.
    Decompose(RunArgs),
    /// Certify the Lipschitz deviation from the identity of a map or its layers.
    Certify(RunArgs),
    /// Factor a positive-determinant matrix into near-identity factors.
    Factor(RunArgs),
    /// Zero-parameter critical point of a tanh residual network.
    Saddle(RunArgs),
    /// Functional-gradient bound for every layer of a composition.
    Frechet(RunArgs),
    /// SVG plots of decay or loss CSVs.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// JSON file with an `inputs` list; combined with any `--input`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "input")]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Accepted for uniformity; plots are not random.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Exit status of a finished run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// Ran to completion but a check failed.
    Failed,
    /// Input rejected on mathematical grounds.
    Rejected,
}

impl Status {
    pub fn code(self) -> i32 {
        match self {
            Status::Ok => 0,
            Status::Failed => 1,
            Status::Rejected => 2,
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if let Some(n) = cli.threads {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match execute(&cli.command) {
        Ok(status) => status.code(),
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_expected_rejection() {
                2
            } else {
                1
            }
        }
    }
}

pub fn execute(cmd: &Command) -> Result<Status> {
    match cmd {
        Command::Decompose(a) => {
            let mut cfg: DecomposeConfig = load(&a.config)?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            cmd_decompose(&cfg, &a.out)
        }
        Command::Certify(a) => {
            let mut cfg: CertifyConfig = load(&a.config)?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            cmd_certify(&cfg, &a.out)
        }
        Command::Factor(a) => {
            let cfg: FactorConfig = load(&a.config)?;
            cfg.validate()?;
            cmd_factor(&cfg, &a.out)
        }
        Command::Saddle(a) => {
            let mut cfg: SaddleConfig = load(&a.config)?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            cmd_saddle(&cfg, &a.out)
        }
        Command::Frechet(a) => {
            let mut cfg: FrechetConfig = load(&a.config)?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            cmd_frechet(&cfg, &a.out)
        }
        Command::Plot(a) => {
            let mut inputs = match &a.config {
                Some(p) => load::<PlotConfig>(p)?.inputs,
                None => Vec::new(),
            };
            inputs.extend(a.inputs.iter().cloned());
            if inputs.is_empty() {
                return Err(Error::Config("plot needs at least one input CSV".into()));
            }
            cmd_plot(&PlotConfig { inputs }, &a.out)
        }
    }
}

fn load<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Output directory bound to one resolved config.
pub struct Output {
    dir: PathBuf,
    hash: String,
}

impl Output {
    pub fn new<C: Serialize>(dir: &Path, command: &str, resolved: &C) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let body = serde_json::json!({ "command": command, "config": resolved });
        let canonical = serde_json::to_string(&body)?;
        let hash = hex::encode(Sha256::digest(canonical.as_bytes()));
        let out = Self { dir: dir.to_path_buf(), hash };
        out.json("config.resolved.json", &body)?;
        Ok(out)
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Writes `value` with a top-level `config_hash` field.
    pub fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut v = serde_json::to_value(value)?;
        match &mut v {
            Value::Object(map) => {
                map.insert("config_hash".into(), Value::String(self.hash.clone()));
            }
            other => {
                let inner = other.take();
                v = serde_json::json!({ "config_hash": self.hash, "value": inner });
            }
        }
        let mut text = serde_json::to_string_pretty(&v)?;
        text.push('\n');
        fs::write(self.dir.join(name), text)?;
        Ok(())
    }

    /// CSV with a leading `# config_hash: ...` line.
    pub fn csv(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut text = format!("# config_hash: {}\n{}\n", self.hash, header.join(","));
        for r in rows {
            text.push_str(&r.join(","));
            text.push('\n');
        }
        fs::write(self.dir.join(name), text)?;
        Ok(())
    }

    pub fn svg(&self, name: &str, svg: &str) -> Result<()> {
        let stamp = format!("<!-- config_hash: {} -->\n", self.hash);
        let text = match svg.find('\n') {
            Some(k) => format!("{}{}{}", &svg[..=k], stamp, &svg[k + 1..]),
            None => format!("{svg}\n{stamp}"),
        };
        fs::write(self.dir.join(name), text)?;
        Ok(())
    }

    pub fn raw(&self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        Ok(())
    }
}

fn f(v: f64) -> String {
    if v.is_finite() {
        serde_json::to_string(&v).unwrap_or_else(|_| v.to_string())
    } else {
        v.to_string()
    }
}

#[derive(Debug, Serialize)]
struct DecomposeSummary {
    rows: Vec<DecayRowOut>,
    fit: Option<DecayFit>,
    infeasible_m: Vec<usize>,
    all_certified: bool,
}

#[derive(Debug, Clone, Serialize)]
struct DecayRowOut {
    m: usize,
    epsilon_target: f64,
    c: f64,
    max_pair: f64,
    max_jac: f64,
    max_cert: f64,
    composition_error: f64,
    pass: bool,
}

pub fn cmd_decompose(cfg: &DecomposeConfig, out: &Path) -> Result<Status> {
    let out = Output::new(out, "decompose", cfg)?;
    let map = cfg.map.build()?;
    let mut rows = Vec::new();
    let mut infeasible = Vec::new();
    for &m in &cfg.m_values {
        let opts = DecomposeOptions {
            m_linear: cfg.m_linear,
            m_nonlinear: m,
            epsilon: cfg.epsilon,
            rule: cfg.rule,
            tol: cfg.tol,
            n_cloud: cfg.n_cloud,
            n_pairs: cfg.n_pairs,
            n_check: cfg.n_check,
            seed: cfg.seed,
        };
        let schedule = plan_schedule(&map, &opts)?;
        if !schedule.feasible {
            out.json(&format!("infeasible_m{m}.json"), &serde_json::json!({ "schedule": schedule }))?;
            infeasible.push(m);
            continue;
        }
        let stack = full_decompose_with(&map, &opts)?;
        out.json(&format!("stack_m{m}.json"), &stack.manifest())?;
        let nl = stack.certificates.iter().filter(|c| c.kind == LayerKind::Nonlinear);
        let (max_pair, max_jac, pass) = nl.fold((0.0f64, 0.0f64, true), |(p, j, ok), c| {
            (p.max(c.certificate.pair_lower_bound), j.max(c.certificate.jac_grid_estimate), ok && c.pass)
        });
        rows.push(DecayRowOut {
            m,
            epsilon_target: stack.schedule.epsilon,
            c: stack.schedule.c,
            max_pair,
            max_jac,
            max_cert: max_pair.max(max_jac),
            composition_error: stack.composition_error,
            pass,
        });
    }
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.m.to_string(),
                f(r.epsilon_target),
                f(r.max_pair),
                f(r.max_jac),
                f(r.max_cert),
                f(r.composition_error),
                r.pass.to_string(),
            ]
        })
        .collect();
    out.csv(
        "decay.csv",
        &["m", "epsilon_target", "max_pair", "max_jac", "max_cert", "composition_error", "pass"],
        &csv_rows,
    )?;
    let fit = if rows.len() >= 2 {
        let x: Vec<f64> = rows.iter().map(|r| (2.0 * r.m as f64).ln() / (r.m as f64 - 1.0)).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.max_cert).collect();
        if y.iter().all(|v| *v > 0.0) {
            fit_decay(&x, &y).ok()
        } else {
            None
        }
    } else {
        None
    };
    let all_certified = rows.iter().all(|r| r.pass);
    out.json("summary.json", &DecomposeSummary { rows, fit, infeasible_m: infeasible.clone(), all_certified })?;
    if !infeasible.is_empty() {
        eprintln!("infeasible schedule for m in {infeasible:?}");
        return Ok(Status::Rejected);
    }
    Ok(if all_certified { Status::Ok } else { Status::Failed })
}

#[derive(Debug, Serialize)]
struct CertifyRow {
    layer: usize,
    kind: Option<LayerKind>,
    pair_lower_bound: f64,
    jac_grid_estimate: f64,
    grid_gap_slack: f64,
    epsilon_target: Option<f64>,
    pass: bool,
}

pub fn cmd_certify(cfg: &CertifyConfig, out: &Path) -> Result<Status> {
    let out = Output::new(out, "certify", cfg)?;
    let map = cfg.map.build()?;
    let rows = match cfg.mode {
        CertifyMode::Map => {
            let dom = Domain::Ball { radius: map.radius(), dim: map.dim() };
            let c = certify_deviation(&map, &dom, cfg.n_pairs, cfg.seed)?;
            let pass = cfg.epsilon_target.is_none_or(|t| {
                c.pair_lower_bound <= t + RATIO_SLACK && c.jac_grid_estimate <= t + RATIO_SLACK
            });
            vec![CertifyRow {
                layer: 1,
                kind: None,
                pair_lower_bound: c.pair_lower_bound,
                jac_grid_estimate: c.jac_grid_estimate,
                grid_gap_slack: c.grid_gap_slack,
                epsilon_target: cfg.epsilon_target,
                pass,
            }]
        }
        CertifyMode::Stack => {
            let opts = DecomposeOptions {
                m_linear: cfg.m_linear,
                m_nonlinear: cfg.m_nonlinear,
                epsilon: cfg.epsilon,
                n_cloud: cfg.n_cloud,
                n_pairs: cfg.n_pairs,
                seed: cfg.seed,
                ..DecomposeOptions::default()
            };
            let schedule = plan_schedule(&map, &opts)?;
            schedule.check_feasible()?;
            let stack = full_decompose_with(&map, &opts)?;
            stack
                .certificates
                .iter()
                .map(|c| CertifyRow {
                    layer: c.layer,
                    kind: Some(c.kind),
                    pair_lower_bound: c.certificate.pair_lower_bound,
                    jac_grid_estimate: c.certificate.jac_grid_estimate,
                    grid_gap_slack: c.certificate.grid_gap_slack,
                    epsilon_target: Some(c.epsilon_target),
                    pass: c.pass,
                })
                .collect()
        }
    };
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.layer.to_string(),
                f(r.pair_lower_bound),
                f(r.jac_grid_estimate),
                r.epsilon_target.map(f).unwrap_or_default(),
                r.pass.to_string(),
            ]
        })
        .collect();
    out.csv(
        "certificates.csv",
        &["layer", "pair_lower_bound", "jac_grid_estimate", "epsilon_target", "pass"],
        &csv_rows,
    )?;
    let all_pass = rows.iter().all(|r| r.pass);
    out.json("certificates.json", &serde_json::json!({ "rows": rows, "n_pairs": cfg.n_pairs, "all_pass": all_pass }))?;
    Ok(if all_pass { Status::Ok } else { Status::Failed })
}

pub fn cmd_factor(cfg: &FactorConfig, out: &Path) -> Result<Status> {
    let out = Output::new(out, "factor", cfg)?;
    let d = linalg::from_rows(&cfg.matrix)?;
    let fz = factor_near_identity(&d, cfg.m)?;
    let mut v = serde_json::to_value(&fz)?;
    if let Value::Object(map) = &mut v {
        map.insert("target_bound".into(), serde_json::json!(fz.target_bound()));
        map.insert("m".into(), serde_json::json!(fz.m()));
    }
    out.json("factorization.json", &v)?;
    Ok(Status::Ok)
}

#[derive(Debug, Serialize)]
struct SaddleReport {
    init: SaddleInit,
    m: usize,
    d: usize,
    k: usize,
    n: usize,
    #[serde(rename = "R")]
    radius: f64,
    generator_deviation_bounds: Vec<f64>,
    input_mean_norm: f64,
    mean_sq_displacement: f64,
    loss_init: f64,
    loss_star: f64,
    gradient_norm: f64,
    gradient_max_abs: f64,
    fd_gradient_max_abs: f64,
    final_loss: f64,
    max_param_change: f64,
    steps_taken: usize,
    diverged: bool,
    verdict: String,
}

fn saddle_generator(cfg: &SaddleConfig) -> ResNetParams {
    match &cfg.generator {
        GeneratorSpec::Random { m, d, k, max_dev } => {
            let mut rng = sampling::child_rng(cfg.seed, 1);
            ResNetParams::random_near_identity(&mut rng, *m, *d, *k, *max_dev)
        }
        GeneratorSpec::Params { theta } => theta.clone(),
    }
}

pub fn cmd_saddle(cfg: &SaddleConfig, out_dir: &Path) -> Result<Status> {
    let out = Output::new(out_dir, "saddle", cfg)?;
    let star = saddle_generator(cfg);
    let data = resnet::make_saddle_instance(&star, cfg.n, cfg.radius, cfg.seed)?;
    let theta0 = match cfg.init {
        SaddleInit::Zero => ResNetParams::zeros(star.m, star.d, star.k),
        SaddleInit::Star => star.clone(),
    };
    let (loss_init, g) = resnet::loss_and_grad(&theta0, &data)?;
    let fd = resnet::fd_grad(&theta0, &data, cfg.fd_step)?;
    let traj = resnet::train_gd(&theta0, &data, cfg.lr, cfg.steps)?;
    let max_param_change = traj.final_theta.axpy(-1.0, &theta0).flatten().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let final_loss = *traj.losses.last().unwrap_or(&loss_init);
    let gradient_max_abs = g.flatten().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let verdict = if loss_init == 0.0 && final_loss == 0.0 {
        "optimal"
    } else if gradient_max_abs == 0.0 && max_param_change == 0.0 {
        "stuck"
    } else {
        "moved"
    };
    let report = SaddleReport {
        init: cfg.init,
        m: star.m,
        d: star.d,
        k: star.k,
        n: data.len(),
        radius: data.radius,
        generator_deviation_bounds: star.deviation_bounds(),
        input_mean_norm: data.input_mean().norm(),
        mean_sq_displacement: data.mean_sq_displacement(),
        loss_init,
        loss_star: resnet::loss(&star, &data)?,
        gradient_norm: g.norm(),
        gradient_max_abs,
        fd_gradient_max_abs: fd.iter().fold(0.0f64, |a, v| a.max(v.abs())),
        final_loss,
        max_param_change,
        steps_taken: traj.steps_taken,
        diverged: traj.diverged,
        verdict: verdict.into(),
    };
    out.json("saddle_report.json", &report)?;
    let rows: Vec<Vec<String>> = traj
        .losses
        .iter()
        .zip(&traj.grad_norms)
        .enumerate()
        .map(|(s, (l, gn))| vec![s.to_string(), f(*l), f(*gn)])
        .collect();
    out.csv("trajectory.csv", &["step", "loss", "grad_norm"], &rows)?;
    let mut buf = format!("# config_hash: {}\n", out.hash()).into_bytes();
    data.write_csv(&mut buf)?;
    out.raw("dataset.csv", &buf)?;
    out.json(
        "dataset.json",
        &DatasetHeader { d: data.d, n: data.len(), radius: data.radius, seed: cfg.seed, generator: star },
    )?;
    Ok(Status::Ok)
}

#[derive(Debug, Serialize)]
struct FrechetReport {
    #[serde(flatten)]
    report: DescentBoundReport,
    state: &'static str,
    layer_epsilons: Vec<f64>,
    epsilon_source: &'static str,
    descent: Option<DescentCurve>,
}

/// Layers, depth, dimension and a label for the report.
type BuiltState = (Vec<Arc<dyn VectorMap>>, usize, usize, &'static str);

fn frechet_state(cfg: &FrechetConfig) -> Result<BuiltState> {
    let mut rng = sampling::child_rng(cfg.seed, 2);
    match &cfg.state {
        StateSpec::Resnet { m, d, k, max_dev } => {
            let theta = ResNetParams::random_near_identity(&mut rng, *m, *d, *k, *max_dev);
            Ok((boxed_layers(&theta), *m, *d, "resnet"))
        }
        StateSpec::ResnetParams { theta } => Ok((boxed_layers(theta), theta.m, theta.d, "resnet")),
        StateSpec::Decomposition { map, m } => {
            let h = map.build()?.normalize()?;
            let b = compute_b(h.alpha(), h.radius(), h.inv_lip())?;
            let schedule = schedule_for(&h, *m, epsilon_threshold(b, *m), RatioRule::Largest)?;
            let layers = split(&h, &schedule)?;
            Ok((
                layers.into_iter().map(|l| Arc::new(l) as Arc<dyn VectorMap>).collect(),
                *m,
                h.dim(),
                "decomposition",
            ))
        }
    }
}

fn boxed_layers(theta: &ResNetParams) -> Vec<Arc<dyn VectorMap>> {
    theta.layers().into_iter().map(|l| Arc::new(l) as Arc<dyn VectorMap>).collect()
}

fn frechet_targets(cfg: &FrechetConfig, state: &CompositionState, m: usize, d: usize) -> Result<Vec<Point>> {
    let mut rng = sampling::child_rng(cfg.seed, 3);
    match &cfg.target {
        TargetSpec::Same => Ok(state.outputs().to_vec()),
        TargetSpec::Resnet { k, max_dev } => {
            let star = ResNetParams::random_near_identity(&mut rng, m, d, *k, *max_dev);
            state.x.iter().map(|x| resnet::eval(&star, x)).collect()
        }
        TargetSpec::ResnetParams { theta } => state.x.iter().map(|x| resnet::eval(theta, x)).collect(),
        TargetSpec::Map { map } => {
            let h: SmoothMap = map.build()?;
            state.x.iter().map(|x| h.eval(x)).collect()
        }
    }
}

pub fn cmd_frechet(cfg: &FrechetConfig, out_dir: &Path) -> Result<Status> {
    let out = Output::new(out_dir, "frechet", cfg)?;
    let (layers, m, d, kind) = frechet_state(cfg)?;
    let x = sampling::sample_ball(cfg.seed, cfg.n, d, cfg.radius);
    let state = CompositionState::new(layers, x)?.certify(cfg.n_pairs, cfg.seed)?;
    let targets = frechet_targets(cfg, &state, m, d)?;
    let layer_epsilons = state.epsilons.clone().unwrap_or_default();
    let (epsilon, epsilon_source) = match cfg.epsilon {
        Some(e) => (e, "config"),
        None => (state.epsilon().unwrap_or(0.0), "certified"),
    };
    let floor = cfg.floor.unwrap_or_else(|| default_floor(&state.x));
    let report = verify_descent_bound(&state, &targets, epsilon, floor)?;
    let descent = match &cfg.descent {
        Some(spec) => {
            let step = match spec.step {
                Some(s) => s,
                None => build_delta(&state, spec.layer, &targets, floor)?.c.map_or(1.0, |c| 1.0 / c),
            };
            let (curve, _) = functional_descent_demo(&state, spec.layer, &targets, step, spec.steps)?;
            let rows: Vec<Vec<String>> =
                curve.losses.iter().enumerate().map(|(s, l)| vec![s.to_string(), f(*l)]).collect();
            out.csv("descent.csv", &["step", "loss"], &rows)?;
            Some(curve)
        }
        None => None,
    };
    let all_pass = report.all_pass;
    out.json(
        "frechet_report.json",
        &FrechetReport { report, state: kind, layer_epsilons, epsilon_source, descent },
    )?;
    Ok(if all_pass { Status::Ok } else { Status::Failed })
}

pub fn cmd_plot(cfg: &PlotConfig, out_dir: &Path) -> Result<Status> {
    let tables = cfg
        .inputs
        .iter()
        .map(|p| plot::read_table(p).and_then(|t| plot::plot_kind(&t).map(|k| (p, t, k))))
        .collect::<Result<Vec<_>>>()?;
    let out = Output::new(out_dir, "plot", cfg)?;
    for (path, table, kind) in tables {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
        let title = match kind {
            plot::PlotKind::Decay => "max layer deviation vs m",
            plot::PlotKind::Loss => "loss",
        };
        let svg = plot::render(&table, kind, title)?;
        out.svg(&format!("{stem}.svg"), &svg)?;
    }
    Ok(Status::Ok)
}
