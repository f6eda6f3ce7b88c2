//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use nearid::decomposition::{fit_decay, full_decompose_with, DecomposeOptions, LayerKind};
use nearid::functional_grad::{
    build_delta, convergence_order, default_floor, directional_derivative, verify_descent_bound, CompositionState,
};
use nearid::linear_factor::{factor_near_identity, FACTOR_NORM_CONSTANT};
use nearid::lipschitz_cert::{near_identity_suite, Domain};
use nearid::map_core::{MapFamily, Point, SmoothMap, VectorMap};
use nearid::resnet::{self, Dataset, ResNetParams};
use nearid::sampling;

// Tolerances.
const EXACTNESS_TOL: f64 = 1e-8;
const MAX_SECONDS_PER_DECOMPOSITION: f64 = 60.0;
const DECAY_FIT_RESIDUAL: f64 = 0.25;
const RECONSTRUCTION_TOL: f64 = 1e-9;
const CONDITION_MAX: f64 = 100.0;
const SADDLE_FD_TOL: f64 = 1e-6;
const MAX_SECONDS_PER_SADDLE: f64 = 10.0;
const STATE_EPSILON_MAX: f64 = 0.3;
const FD_ORDER_RANGE: (f64, f64) = (0.9, 1.1);
const GRAD_ABS_TOL: f64 = 1e-6;
const GRAD_REL_TOL: f64 = 1e-4;
/// Rounding allowance for comparing sampled ratios against analytic bounds.
const FLOAT_SLACK: f64 = 1e-12;

const SWEEP_M: [usize; 5] = [4, 8, 16, 32, 64];
const N_SAMPLES: usize = 1000;
const N_PAIRS: usize = 1000;
const NEAR_IDENTITY_PAIRS: usize = 300;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn triangular(d: usize, beta: f64, seed: u64) -> MapFamily {
    let mut rng = sampling::rng(seed);
    let mut w = sampling::gaussian_matrix(&mut rng, d, d);
    for i in 0..d {
        for j in i..d {
            w[(i, j)] = 0.0;
        }
    }
    let bias = sampling::gaussian_vector(&mut rng, d) * 0.3;
    MapFamily::Triangular { beta, weights: w, bias }
}

/// Built-in nonlinear maps on the unit ball. Triangular maps need d >= 2 to be
/// nonlinear and the quadratic family is scalar.
fn nonlinear_maps() -> Vec<(String, SmoothMap)> {
    let mut maps = Vec::new();
    for d in [1, 2, 4] {
        maps.push((format!("tanh d={d}"), MapFamily::ComponentwiseTanh { beta: 0.3 }, d));
    }
    for d in [2, 4] {
        maps.push((format!("triangular d={d}"), triangular(d, 0.4, 10 + d as u64), d));
    }
    maps.push(("quadratic d=1".into(), MapFamily::Quadratic { coef: 0.2 }, 1));
    for d in [2, 4] {
        let fam = MapFamily::Composition(vec![MapFamily::ComponentwiseTanh { beta: 0.2 }, triangular(d, 0.3, 20 + d as u64)]);
        maps.push((format!("composition d={d}"), fam, d));
    }
    maps.into_iter()
        .map(|(name, fam, d)| (name, SmoothMap::analytic(fam, d, 1.0).expect("valid built-in map")))
        .collect()
}

fn all_builtin_maps() -> Vec<(String, SmoothMap)> {
    let mut maps = nonlinear_maps();
    maps.push(("identity d=3".into(), SmoothMap::identity(3, 1.0).unwrap()));
    let affine = MapFamily::Affine {
        matrix: DMatrix::from_row_slice(2, 2, &[1.5, 0.3, -0.2, 0.8]),
        offset: DVector::from_vec(vec![0.4, -0.1]),
    };
    maps.push(("affine d=2".into(), SmoothMap::analytic(affine, 2, 1.0).unwrap()));
    maps
}

struct SweepRow {
    map: String,
    m: usize,
    epsilon: f64,
    max_pair: f64,
    max_jac: f64,
    linear_ok: bool,
    composition_error: f64,
    seconds: f64,
}

fn run_sweep() -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for (name, map) in nonlinear_maps() {
        for m in SWEEP_M {
            let opts = DecomposeOptions { m_nonlinear: m, n_check: N_SAMPLES, seed: 7, ..DecomposeOptions::default() };
            let start = Instant::now();
            let stack = full_decompose_with(&map, &opts).expect("decomposition at the threshold epsilon");
            let seconds = start.elapsed().as_secs_f64();
            let mut max_pair = 0.0f64;
            let mut max_jac = 0.0f64;
            let mut linear_ok = true;
            for c in &stack.certificates {
                match c.kind {
                    LayerKind::Nonlinear => {
                        max_pair = max_pair.max(c.certificate.pair_lower_bound);
                        max_jac = max_jac.max(c.certificate.jac_grid_estimate);
                    }
                    _ => linear_ok &= c.pass,
                }
            }
            rows.push(SweepRow {
                map: name.clone(),
                m,
                epsilon: stack.schedule.epsilon,
                max_pair,
                max_jac,
                linear_ok,
                composition_error: stack.composition_error,
                seconds,
            });
        }
    }
    rows
}

fn criterion_exactness(rows: &[SweepRow]) -> Outcome {
    let worst_err = rows.iter().map(|r| r.composition_error).fold(0.0, f64::max);
    let worst_time = rows.iter().map(|r| r.seconds).fold(0.0, f64::max);
    let bad: Vec<String> = rows
        .iter()
        .filter(|r| !(r.composition_error <= EXACTNESS_TOL) || r.seconds > MAX_SECONDS_PER_DECOMPOSITION)
        .map(|r| format!("{} m={}", r.map, r.m))
        .collect();
    outcome(
        bad.is_empty(),
        format!("{} runs, max error {worst_err:.2e}, slowest {worst_time:.2}s, failing {bad:?}", rows.len()),
    )
}

fn criterion_decay(rows: &[SweepRow]) -> Outcome {
    let mut by_map: BTreeMap<&str, Vec<&SweepRow>> = BTreeMap::new();
    for r in rows {
        by_map.entry(&r.map).or_default().push(r);
    }
    let mut problems = Vec::new();
    let mut worst_fit = 0.0f64;
    for (name, rs) in &by_map {
        for r in rs {
            if r.max_pair > r.epsilon || r.max_jac > r.epsilon {
                problems.push(format!("{name} m={} exceeds epsilon {}", r.m, r.epsilon));
            }
            if !r.linear_ok {
                problems.push(format!("{name} m={} linear factor above its bound", r.m));
            }
        }
        let dev: Vec<f64> = rs.iter().map(|r| r.max_pair.max(r.max_jac)).collect();
        if dev.windows(2).any(|w| !(w[1] < w[0])) {
            problems.push(format!("{name} not decreasing: {dev:?}"));
        }
        let rate: Vec<f64> = rs.iter().map(|r| (2.0 * r.m as f64).ln() / (r.m as f64 - 1.0)).collect();
        match fit_decay(&rate, &dev) {
            Ok(fit) => {
                worst_fit = worst_fit.max(fit.max_rel_residual);
                if !(fit.max_rel_residual <= DECAY_FIT_RESIDUAL) {
                    problems.push(format!("{name} fit residual {:.3}", fit.max_rel_residual));
                }
            }
            Err(e) => problems.push(format!("{name} fit failed: {e}")),
        }
    }
    outcome(
        problems.is_empty(),
        format!("{} maps, worst relative fit residual {worst_fit:.3}; {problems:?}", by_map.len()),
    )
}

fn criterion_linear_factor() -> Outcome {
    let mut rng = sampling::rng(2024);
    let mut worst_err = 0.0f64;
    let mut worst_ratio = 0.0f64;
    let mut problems = Vec::new();
    for k in 0..100 {
        let d = 1 + k % 8;
        let a = sampling::well_conditioned_matrix(&mut rng, d, CONDITION_MAX);
        let sv = a.singular_values();
        let cond = sv.max() / sv.min();
        if !(a.determinant() > 0.0) || cond > CONDITION_MAX * (1.0 + 1e-9) {
            problems.push(format!("matrix {k} outside the sampling contract"));
            continue;
        }
        let mut prev = f64::INFINITY;
        for m in [4, 16, 64] {
            let f = match factor_near_identity(&a, m) {
                Ok(f) => f,
                Err(e) => {
                    problems.push(format!("matrix {k} m={m}: {e}"));
                    continue;
                }
            };
            worst_err = worst_err.max(f.reconstruction_error);
            if !(f.reconstruction_error <= RECONSTRUCTION_TOL) {
                problems.push(format!("matrix {k} m={m} error {:.2e}", f.reconstruction_error));
            }
            let bound = FACTOR_NORM_CONSTANT * f.gamma / m as f64;
            if f.gamma > 0.0 {
                worst_ratio = worst_ratio.max(f.max_factor_norm / (f.gamma / m as f64));
            }
            if f.max_factor_norm > bound + FLOAT_SLACK {
                problems.push(format!("matrix {k} m={m} factor norm {} > {bound}", f.max_factor_norm));
            }
            if f.max_factor_norm > prev + FLOAT_SLACK {
                problems.push(format!("matrix {k} factor norm grew at m={m}"));
            }
            prev = f.max_factor_norm;
        }
    }
    outcome(
        problems.is_empty(),
        format!(
            "max error {worst_err:.2e}, max ||A_i|| m/gamma {worst_ratio:.3} vs c_f {FACTOR_NORM_CONSTANT}; {problems:?}"
        ),
    )
}

fn criterion_smoothness() -> Outcome {
    let mut violations = Vec::new();
    let mut n_maps = 0usize;
    for (k, (name, map)) in all_builtin_maps().into_iter().enumerate() {
        let normalized = map.normalize().expect("normalizable");
        let lip = 1.0 + normalized.alpha() * normalized.radius();
        let mut rng = sampling::rng(300 + k as u64);
        let mut quad_bad = 0usize;
        let mut lip_bad = 0usize;
        for _ in 0..N_PAIRS {
            let x = sampling::uniform_in_ball(&mut rng, map.dim(), map.radius());
            let y = sampling::uniform_in_ball(&mut rng, map.dim(), map.radius());
            let hx = map.eval(&x).unwrap();
            let lin = &hx + map.jacobian(&x).unwrap() * (&y - &x);
            let lhs = (map.eval(&y).unwrap() - lin).norm();
            let rhs = 0.5 * map.alpha() * (&y - &x).norm_squared();
            if lhs > rhs + FLOAT_SLACK * hx.norm().max(1.0) {
                quad_bad += 1;
            }

            let u = sampling::uniform_in_ball(&mut rng, normalized.dim(), normalized.radius());
            let v = sampling::uniform_in_ball(&mut rng, normalized.dim(), normalized.radius());
            let num = (normalized.eval(&u).unwrap() - normalized.eval(&v).unwrap()).norm();
            if num > lip * (&u - &v).norm() + FLOAT_SLACK * num.max(1.0) {
                lip_bad += 1;
            }
        }
        n_maps += 1;
        if quad_bad + lip_bad > 0 {
            violations.push(format!("{name}: quadratic {quad_bad}, lipschitz {lip_bad}"));
        }
    }
    outcome(violations.is_empty(), format!("{n_maps} maps, {N_PAIRS} pairs per map and bound; violations {violations:?}"))
}

/// Random map with a certified deviation bound at most 0.5.
fn random_near_identity_map(rng: &mut impl Rng, k: usize) -> (Arc<dyn VectorMap>, f64) {
    let d = rng.random_range(1..=4);
    let alpha: f64 = rng.random_range(0.01..0.5);
    match k % 3 {
        0 => {
            let width = rng.random_range(1..=6);
            let theta = ResNetParams::random_near_identity(rng, 1, d, width, alpha);
            let bound = theta.deviation_bounds()[0];
            (Arc::new(theta.layer(0)), bound)
        }
        1 => {
            let f = SmoothMap::analytic(MapFamily::ComponentwiseTanh { beta: alpha }, d, 1.0).unwrap();
            (Arc::new(f), alpha)
        }
        _ => {
            let mut w = sampling::gaussian_matrix(rng, d, d);
            w.fill_upper_triangle(0.0, 0);
            let bias = sampling::gaussian_vector(rng, d);
            let wn = nearid::linalg::spectral_norm(&w).max(1e-12);
            w /= wn;
            let f = SmoothMap::analytic(MapFamily::Triangular { beta: alpha, weights: w, bias }, d, 1.0).unwrap();
            (Arc::new(f), alpha)
        }
    }
}

fn criterion_near_identity() -> Outcome {
    let mut rng = sampling::rng(404);
    let mut failures = Vec::new();
    let mut worst_alpha = 0.0f64;
    for k in 0..1000 {
        let (f, alpha) = random_near_identity_map(&mut rng, k);
        worst_alpha = worst_alpha.max(alpha);
        if alpha > 0.5 {
            failures.push(format!("map {k} alpha {alpha}"));
            continue;
        }
        let dom = Domain::Ball { radius: 1.0, dim: f.dim() };
        match near_identity_suite(f.as_ref(), alpha, &dom, NEAR_IDENTITY_PAIRS, k as u64) {
            Ok(rep) if rep.pass() => {}
            Ok(rep) => failures.push(format!(
                "map {k}: isometry {}, inverse {}, composition {}, inverse failures {}",
                rep.isometry.violations, rep.inverse.violations, rep.composition.violations, rep.inverse_failures
            )),
            Err(e) => failures.push(format!("map {k}: {e}")),
        }
    }
    outcome(
        failures.is_empty(),
        format!("1000 maps, {NEAR_IDENTITY_PAIRS} pairs each, max alpha {worst_alpha:.3}; failures {failures:?}"),
    )
}

fn criterion_saddle() -> Outcome {
    let mut rng = sampling::rng(606);
    let mut problems = Vec::new();
    let mut worst_fd = 0.0f64;
    let mut worst_time = 0.0f64;
    let instances = 12;
    for s in 0..instances {
        let m = 1 + s % 4;
        let d = 1 + (s / 2) % 4;
        let k = 1 + (3 * s) % 8;
        let dev = rng.random_range(0.05..=0.2);
        let star = ResNetParams::random_near_identity(&mut rng, m, d, k, dev);
        let start = Instant::now();
        let data = match resnet::make_saddle_instance(&star, 200, 1.0, 1000 + s as u64) {
            Ok(d) => d,
            Err(e) => {
                problems.push(format!("instance {s}: {e}"));
                continue;
            }
        };
        let zero = ResNetParams::zeros(m, d, k);
        let g = resnet::grad(&zero, &data).unwrap();
        if !g.is_zero() {
            problems.push(format!("instance {s}: analytic gradient nonzero"));
        }
        let fd = resnet::fd_grad(&zero, &data, 1e-5).unwrap();
        let fd_max = fd.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        worst_fd = worst_fd.max(fd_max);
        if fd_max > SADDLE_FD_TOL {
            problems.push(format!("instance {s}: fd gradient {fd_max:.2e}"));
        }
        let l0 = resnet::loss(&zero, &data).unwrap();
        let lstar = resnet::loss(&star, &data).unwrap();
        if !(l0 > 0.0 && lstar == 0.0) {
            problems.push(format!("instance {s}: loss(0) = {l0}, loss(star) = {lstar}"));
        }
        let traj = resnet::train_gd(&zero, &data, 0.1, 1000).unwrap();
        if !traj.final_theta.is_zero() || traj.steps_taken != 1000 {
            problems.push(format!("instance {s}: gradient descent moved"));
        }
        let secs = start.elapsed().as_secs_f64();
        worst_time = worst_time.max(secs);
        if secs > MAX_SECONDS_PER_SADDLE {
            problems.push(format!("instance {s}: {secs:.1}s"));
        }
    }
    outcome(
        problems.is_empty(),
        format!("{instances} instances, max fd gradient {worst_fd:.2e}, slowest {worst_time:.2}s; {problems:?}"),
    )
}

fn criterion_descent_bound() -> Outcome {
    let mut rng = sampling::rng(707);
    let mut problems = Vec::new();
    let mut orders = Vec::new();
    let mut min_margin = f64::INFINITY;
    let mut max_eps = 0.0f64;
    let states = 10;
    for s in 0..states {
        let m = 2 + s % 5;
        let d = 1 + s % 4;
        let k = 2 + s % 5;
        let dev = rng.random_range(0.05..0.28);
        let theta = ResNetParams::random_near_identity(&mut rng, m, d, k, dev);
        let star = ResNetParams::random_near_identity(&mut rng, m, d, k, dev);
        let layers: Vec<Arc<dyn VectorMap>> =
            theta.layers().into_iter().map(|l| Arc::new(l) as Arc<dyn VectorMap>).collect();
        let x = sampling::sample_ball(900 + s as u64, 200, d, 1.0);
        let targets: Vec<Point> = x.iter().map(|p| resnet::eval(&star, p).unwrap()).collect();
        let state = CompositionState::new(layers, x).unwrap().certify(2000, s as u64).unwrap();
        let eps = state.epsilon().unwrap();
        max_eps = max_eps.max(eps);
        if eps > STATE_EPSILON_MAX {
            problems.push(format!("state {s}: epsilon {eps}"));
            continue;
        }
        let floor = default_floor(&state.x);
        let rep = verify_descent_bound(&state, &targets, eps, floor).unwrap();
        for l in &rep.per_layer {
            min_margin = min_margin.min(l.margin);
        }
        if !rep.all_pass {
            problems.push(format!("state {s}: bound violated"));
        }
        for i in 1..=m {
            let dir = build_delta(&state, i, &targets, floor).unwrap();
            let pts: Vec<_> = [1e-3, 1e-4, 1e-5]
                .iter()
                .map(|&t| directional_derivative(&state, &dir, &targets, t).unwrap())
                .collect();
            let errs: Vec<f64> = pts.iter().map(|p| (p.fd_value - p.exact_value).abs()).collect();
            let order = convergence_order(&pts);
            match order {
                Some(o) if (FD_ORDER_RANGE.0..=FD_ORDER_RANGE.1).contains(&o) && errs.windows(2).all(|w| w[1] < w[0]) => {
                    orders.push(o)
                }
                _ => problems.push(format!("state {s} layer {i}: order {order:?}, errors {errs:?}")),
            }
        }
    }
    let (lo, hi) = orders.iter().fold((f64::INFINITY, 0.0f64), |(a, b), o| (a.min(*o), b.max(*o)));
    outcome(
        problems.is_empty(),
        format!(
            "{states} states, max epsilon {max_eps:.3}, min margin {min_margin:.3e}, fd order in [{lo:.3}, {hi:.3}]; {problems:?}"
        ),
    )
}

fn criterion_gradient() -> Outcome {
    let mut rng = sampling::rng(808);
    let mut problems = Vec::new();
    let mut worst = 0.0f64;
    for s in 0..20 {
        let m = rng.random_range(1..=4);
        let d = rng.random_range(1..=4);
        let k = rng.random_range(1..=6);
        let theta = ResNetParams::random(&mut rng, m, d, k, 0.7);
        let n = rng.random_range(5..=40);
        let x: Vec<Point> = (0..n).map(|_| sampling::uniform_in_ball(&mut rng, d, 1.5)).collect();
        let y: Vec<Point> = (0..n).map(|_| sampling::uniform_in_ball(&mut rng, d, 1.5)).collect();
        let data = Dataset::new(x, y, 1.5).unwrap();
        let g = resnet::grad(&theta, &data).unwrap().flatten();
        let fd = resnet::fd_grad(&theta, &data, 1e-5).unwrap();
        for (j, (a, b)) in g.iter().zip(&fd).enumerate() {
            let abs = (a - b).abs();
            let rel = abs / a.abs().max(b.abs());
            worst = worst.max(abs);
            if !(abs <= GRAD_ABS_TOL || rel <= GRAD_REL_TOL) {
                problems.push(format!("instance {s} coord {j}: {a} vs {b}"));
            }
        }
    }
    outcome(problems.is_empty(), format!("20 instances, max abs difference {worst:.2e}; {problems:?}"))
}

fn read_dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn criterion_determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_nearid");
    let work = tempfile::tempdir().unwrap();
    let configs = [
        (
            "decompose",
            r#"{"map":{"family":"componentwise_tanh","params":{"beta":0.3},"R":1.0,"d":2},"m_values":[4,8,16],"seed":3}"#,
        ),
        (
            "certify",
            r#"{"map":{"family":"quadratic","params":{"coef":0.2},"R":1.0,"d":1},"mode":"stack","m_nonlinear":8,"seed":4}"#,
        ),
        ("factor", r#"{"matrix":[[2.0,0.5,0.0],[0.1,1.5,0.2],[0.0,-0.3,0.8]],"m":16}"#),
        ("saddle", r#"{"generator":{"kind":"random","m":3,"d":3,"k":4,"max_dev":0.2},"steps":200,"seed":5}"#),
        (
            "frechet",
            r#"{"state":{"kind":"resnet","m":4,"d":2,"k":3,"max_dev":0.15},"target":{"kind":"resnet","k":3,"max_dev":0.15},"descent":{"layer":2,"steps":10},"seed":6}"#,
        ),
    ];
    let mut problems = Vec::new();
    let mut files = 0usize;
    let run = |args: &[&str]| -> bool {
        Command::new(bin).args(args).output().map(|o| o.status.success()).unwrap_or(false)
    };
    for (cmd, cfg) in configs {
        let cfg_path = work.path().join(format!("{cmd}.json"));
        std::fs::write(&cfg_path, cfg).unwrap();
        let mut outs = Vec::new();
        for (rep, threads) in [(1, "1"), (2, "4")] {
            let out = work.path().join(format!("{cmd}_{rep}"));
            let ok = run(&[cmd, "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap(), "--threads", threads]);
            if !ok {
                problems.push(format!("{cmd} run {rep} failed"));
            }
            outs.push(out);
        }
        let (a, b) = (read_dir_bytes(&outs[0]), read_dir_bytes(&outs[1]));
        files += a.len();
        if a.is_empty() || a != b {
            problems.push(format!("{cmd} outputs differ"));
        }
    }
    let mut plot_outs = Vec::new();
    for rep in 1..=2 {
        let out = work.path().join(format!("plot_{rep}"));
        let decay = work.path().join("decompose_1/decay.csv");
        let traj = work.path().join("saddle_1/trajectory.csv");
        if !run(&[
            "plot",
            "--input",
            decay.to_str().unwrap(),
            "--input",
            traj.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]) {
            problems.push(format!("plot run {rep} failed"));
        }
        plot_outs.push(read_dir_bytes(&out));
    }
    files += plot_outs[0].len();
    if plot_outs[0].is_empty() || plot_outs[0] != plot_outs[1] {
        problems.push("plot outputs differ".into());
    }
    outcome(problems.is_empty(), format!("6 commands, {files} files compared byte for byte; {problems:?}"))
}

fn main() {
    let start = Instant::now();
    let t = Instant::now();
    let rows = run_sweep();
    let sweep_time = t.elapsed();
    let mut results: Vec<(&str, Outcome, Duration)> = vec![
        ("1 decomposition exactness", criterion_exactness(&rows), sweep_time),
        ("2 lipschitz decay", criterion_decay(&rows), Duration::ZERO),
    ];
    let mut timed = |name: &'static str, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let o = f();
        results.push((name, o, t.elapsed()));
    };
    timed("3 linear factorization", &criterion_linear_factor);
    timed("4 smoothness bounds", &criterion_smoothness);
    timed("5 near-identity properties", &criterion_near_identity);
    timed("6 zero-parameter saddle", &criterion_saddle);
    timed("7 functional gradient bound", &criterion_descent_bound);
    timed("8 gradient correctness", &criterion_gradient);
    timed("9 cli determinism", &criterion_determinism);

    let mut failed = 0;
    for (name, o, dt) in &results {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] criterion {name} ({:.1}s): {}", dt.as_secs_f64(), o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} of {} criteria passed in {:.1}s", results.len() - failed, results.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
