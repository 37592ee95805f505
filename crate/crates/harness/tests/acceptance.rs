//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria whose reference value is known to be wrong are listed in
//! `EXPECTED_FAILURES`; they still run and still print FAIL, but do not fail
//! the process. Any other failure exits with status 1.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use lookbehind_core::data::{gen_gaussian_blobs, Batch, Dataset};
use lookbehind_core::diffcore::{finite_difference_check, LossGraph};
use lookbehind_core::lifelong::{
    average_accuracy, c_maml_lookahead_step, c_maml_lookbehind_step, forgetting, AccuracyMatrix, MetaConfig,
    ReplayBuffer,
};
use lookbehind_core::models::{
    build_model, Activation, AnalyticInit, AnalyticLandscape, ConvSpec, MlpSpec, ModelSpec, Normalization,
};
use lookbehind_core::optimizers::{
    asam_perturbation, base_step, lookahead_outer_step, lookbehind_outer_step, multistep_step, outer_step,
    sam_perturbation, AscentSchedule, Geometry, OptimizerConfig, OptimizerState, Variant,
};
use lookbehind_core::rng::seeded;
use lookbehind_core::robustness::{clean_accuracy, inject_weight_noise, robustness_curve, NoiseSpec};
use lookbehind_core::sharpness::{m_sharpness, SharpnessSpec};
use lookbehind_core::tensor::{ParameterVector, Tensor};
use lookbehind_harness::config::{DataConfig, ExperimentConfig};
use lookbehind_harness::io::load_splits;
use lookbehind_harness::training::{model_spec, run_lifelong_config, run_training};
use rand::Rng;
use rand_distr::StandardNormal;

/// Criterion 3 asserts the published Lookahead value (2.68815, 3.58420);
/// the rule it is derived from gives (2.6865, 3.582).
const EXPECTED_FAILURES: &[u32] = &[3];

type Check = fn() -> Result<String, String>;

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- fixtures

fn mlp(widths: Vec<usize>, activation: Activation, normalization: Normalization, heads: usize) -> ModelSpec {
    ModelSpec::Mlp(MlpSpec {
        widths,
        activation,
        normalization,
        heads,
    })
}

fn blobs(classes: usize, per_class: usize, dim: usize, sep: f64, seed: u64) -> Dataset {
    gen_gaussian_blobs(classes, per_class, dim, sep, seed).unwrap()
}

fn image_batch(n: usize, shape: [usize; 3], classes: usize, seed: u64) -> Batch {
    let f: usize = shape.iter().product();
    let mut rng = seeded(seed, 7);
    let data: Vec<f64> = (0..n * f).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|i| i % classes).collect();
    Batch::new(Tensor::new(vec![n, f], data).unwrap(), labels, vec![0; n]).unwrap()
}

fn quadratic(point: &[f64]) -> (LossGraph, ParameterVector) {
    build_model(
        &ModelSpec::Analytic {
            landscape: AnalyticLandscape::identity_quadratic(point.len()),
            init: AnalyticInit::Point(point.to_vec()),
        },
        0,
    )
    .unwrap()
}

fn opt(variant: Variant, geometry: Geometry, lr: f64, rho: f64, k: usize, alpha: f64) -> OptimizerConfig {
    OptimizerConfig {
        lr,
        rho,
        k,
        alpha,
        momentum: 0.0,
        geometry,
        variant,
        multistep_ascent: AscentSchedule::Renorm,
    }
}

fn unit_dataset() -> Dataset {
    Dataset::new(vec![], vec![0], vec![0], 1, "unit").unwrap()
}

// ---------------------------------------------------------------- 1

fn run_steps(graph: &LossGraph, params: &ParameterVector, batches: &[Batch], c: &OptimizerConfig) -> ParameterVector {
    let mut state = OptimizerState::new(params.clone());
    let per = c.batches_per_step();
    for chunk in batches.chunks(per) {
        outer_step(&mut state, graph, &mut chunk.iter(), c).unwrap();
    }
    state.slow
}

fn reductions() -> Result<String, String> {
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for seed in 0..5u64 {
        let spec = mlp(vec![4, 6, 3], Activation::Tanh, Normalization::None, 1);
        let (graph, params) = build_model(&spec, seed).map_err(err)?;
        let data = blobs(3, 8, 4, 2.0, seed);
        let batches: Vec<Batch> = (0..4).map(|i| data.batch(&[i, i + 8, i + 16, i + 4])).collect();
        let sam = |g| opt(Variant::Base, g, 0.1, 0.05, 1, 1.0);
        let base = run_steps(&graph, &params, &batches, &sam(Geometry::Sam));
        let pairs = [
            (
                "lookbehind(k=1,a=1)=SAM",
                opt(Variant::Lookbehind, Geometry::Sam, 0.1, 0.05, 1, 1.0),
                &base,
            ),
            (
                "lookahead(k=1,a=1)=SAM",
                opt(Variant::Lookahead, Geometry::Sam, 0.1, 0.05, 1, 1.0),
                &base,
            ),
            (
                "multistep(k=1)=SAM",
                opt(Variant::Multistep, Geometry::Sam, 0.1, 0.05, 1, 1.0),
                &base,
            ),
        ];
        for (name, c, reference) in pairs {
            let got = run_steps(&graph, &params, &batches, &c);
            let d = got.max_abs_diff(reference);
            let w = worst.entry(name).or_insert(0.0);
            *w = w.max(d);
        }
        let sgd = run_steps(
            &graph,
            &params,
            &batches,
            &opt(Variant::Sgd, Geometry::Sam, 0.1, 0.0, 1, 1.0),
        );
        for (name, g) in [("SAM(rho=0)=SGD", Geometry::Sam), ("ASAM(rho=0)=SGD", Geometry::Asam)] {
            let got = run_steps(&graph, &params, &batches, &opt(Variant::Base, g, 0.1, 0.0, 1, 1.0));
            let w = worst.entry(name).or_insert(0.0);
            *w = w.max(got.max_abs_diff(&sgd));
        }

        // Lookbehind-C-MAML with rho = 0, alpha = 1 against Lookahead-C-MAML,
        // one example per inner loop, identical buffers and samplers.
        let meta = MetaConfig {
            lr: 0.1,
            rho: 0.0,
            alpha: 1.0,
            geometry: Geometry::Sam,
        };
        let (mut a, mut b) = (params.clone(), params.clone());
        let (mut ra, mut rb) = (ReplayBuffer::new(5), ReplayBuffer::new(5));
        let (mut ga, mut gb) = (seeded(seed, 3), seeded(seed, 3));
        for i in 0..data.len() {
            let one = data.batch(&[i]);
            c_maml_lookahead_step(&mut a, &graph, &one, &mut ra, &meta, &mut ga).map_err(err)?;
            c_maml_lookbehind_step(&mut b, &graph, &one, &mut rb, &meta, &mut gb).map_err(err)?;
        }
        let w = worst.entry("C-MAML lookbehind(rho=0,a=1)=lookahead").or_insert(0.0);
        *w = w.max(a.max_abs_diff(&b));
        ensure(a != params, || "C-MAML runs did not move".into())?;
    }
    let bad: Vec<String> = worst
        .iter()
        .filter(|(_, d)| **d > 1e-12)
        .map(|(n, d)| format!("{n}: {d:e}"))
        .collect();
    ensure(bad.is_empty(), || bad.join("; "))?;
    let max = worst.values().cloned().fold(0.0, f64::max);
    Ok(format!(
        "{} identities on 5 seeded MLPs, max |diff| = {max:e}",
        worst.len()
    ))
}

// ---------------------------------------------------------------- 2

fn gradient_check() -> Result<String, String> {
    let blob = |f: usize, classes: usize, tasks: usize| {
        let d = blobs(classes, 4, f, 2.0, 11).full_batch();
        let t = (0..d.len()).map(|i| i % tasks).collect();
        Batch::new(d.inputs().clone(), d.labels().to_vec(), t).unwrap()
    };
    let conv = |input: [usize; 3], filters, kernel, activation, normalization, classes| {
        ModelSpec::SmallConv(ConvSpec {
            input,
            filters,
            kernel,
            activation,
            normalization,
            classes,
        })
    };
    let mut cases: Vec<(String, ModelSpec, Batch)> = vec![
        (
            "mlp-tanh".into(),
            mlp(vec![4, 6, 3], Activation::Tanh, Normalization::None, 1),
            blob(4, 3, 1),
        ),
        (
            "mlp-relu".into(),
            mlp(vec![4, 8, 5, 3], Activation::Relu, Normalization::None, 1),
            blob(4, 3, 1),
        ),
        (
            "mlp-tanh-bn".into(),
            mlp(vec![4, 6, 3], Activation::Tanh, Normalization::Batch, 1),
            blob(4, 3, 1),
        ),
        (
            "mlp-relu-bn".into(),
            mlp(vec![4, 7, 3], Activation::Relu, Normalization::Batch, 1),
            blob(4, 3, 1),
        ),
        (
            "mlp-heads".into(),
            mlp(vec![4, 6, 2], Activation::Tanh, Normalization::None, 3),
            blob(4, 2, 3),
        ),
        (
            "conv".into(),
            conv([1, 6, 6], 3, 3, Activation::Tanh, Normalization::None, 4),
            image_batch(6, [1, 6, 6], 4, 1),
        ),
        (
            "conv-bn".into(),
            conv([2, 5, 5], 2, 2, Activation::Relu, Normalization::Batch, 3),
            image_batch(5, [2, 5, 5], 3, 2),
        ),
        (
            "quadratic".into(),
            ModelSpec::Analytic {
                landscape: AnalyticLandscape::Quadratic {
                    dim: 3,
                    matrix: vec![2.0, 0.5, 0.0, 0.1, 1.0, 0.3, 0.0, -0.2, 4.0],
                },
                init: AnalyticInit::Uniform { low: -2.0, high: 2.0 },
            },
            Batch::unit(),
        ),
        (
            "sharp-flat".into(),
            ModelSpec::Analytic {
                landscape: AnalyticLandscape::SharpFlat,
                init: AnalyticInit::Uniform { low: -2.0, high: 2.0 },
            },
            Batch::unit(),
        ),
    ];
    // Every model a shipped config builds.
    for path in config_files()? {
        let config = ExperimentConfig::load(&path, &[]).map_err(err)?;
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        match &config.data {
            DataConfig::Idx { .. } => {
                let classes = if name.contains("cifar100") {
                    100
                } else if name.contains("imagenet") {
                    1000
                } else {
                    10
                };
                let images = image_batch(2, [3, 32, 32], classes, 5);
                let stand_in = Dataset::new(
                    images.inputs().data().to_vec(),
                    vec![3, 32, 32],
                    (0..2).map(|i| i * (classes - 1)).collect(),
                    classes,
                    "stand-in",
                )
                .map_err(err)?;
                let spec = model_spec(&config.model, &stand_in).map_err(err)?;
                cases.push((name, spec, stand_in.full_batch()));
            }
            _ => {
                let splits = load_splits(&config.data).map_err(err)?;
                let spec = model_spec(&config.model, &splits.train).map_err(err)?;
                let n = splits.train.len().min(16);
                let batch = splits.train.batch(&(0..n).collect::<Vec<_>>());
                cases.push((name, spec, batch));
            }
        }
    }
    let mut worst = (0.0f64, String::new());
    for (name, spec, batch) in &cases {
        for seed in 0..3 {
            let (graph, params) = build_model(spec, seed).map_err(err)?;
            let e = finite_difference_check(&graph, &params, batch, 1e-6, 50).map_err(err)?;
            ensure(e < 1e-4, || format!("{name} seed {seed}: relative error {e:e}"))?;
            if e > worst.0 {
                worst = (e, name.clone());
            }
        }
    }
    Ok(format!(
        "{} model specs x 3 seeds, worst {:.2e} ({})",
        cases.len(),
        worst.0,
        worst.1
    ))
}

fn config_files() -> Result<Vec<PathBuf>, String> {
    let mut out = Vec::new();
    for dir in ["configs/benchmarks", "configs/desk"] {
        let mut files: Vec<PathBuf> = std::fs::read_dir(repo_root().join(dir))
            .map_err(err)?
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect();
        files.sort();
        out.extend(files);
    }
    Ok(out)
}

// ---------------------------------------------------------------- 3

fn closed_forms() -> Result<String, String> {
    let tol = 1e-9;
    let (graph, p) = quadratic(&[3.0, 4.0]);
    let unit = Batch::unit();
    let mut lines = Vec::new();
    let mut failed = Vec::new();
    let mut check = |name: &str, got: &[f64], want: [f64; 2]| {
        let d = got.iter().zip(want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
        let line = format!(
            "{name} ({:.6}, {:.6}) vs ({}, {}) |d|={d:.1e}",
            got[0], got[1], want[0], want[1]
        );
        if d > tol {
            failed.push(line.clone());
        }
        lines.push(line);
    };

    let mut s = OptimizerState::new(p.clone());
    base_step(
        &mut s,
        &graph,
        &unit,
        &opt(Variant::Base, Geometry::Sam, 0.1, 0.5, 1, 1.0),
    )
    .map_err(err)?;
    check("SAM", s.slow.as_slice(), [2.67, 3.56]);

    let mut s = OptimizerState::new(p.clone());
    lookbehind_outer_step(
        &mut s,
        &graph,
        &unit,
        &opt(Variant::Lookbehind, Geometry::Sam, 0.1, 0.5, 2, 0.5),
    )
    .map_err(err)?;
    check("Lookbehind", s.slow.as_slice(), [2.655, 3.54]);

    let mut s = OptimizerState::new(p.clone());
    multistep_step(
        &mut s,
        &graph,
        &unit,
        &opt(Variant::Multistep, Geometry::Sam, 0.1, 0.5, 2, 1.0),
    )
    .map_err(err)?;
    check("Multistep", s.slow.as_slice(), [2.64, 3.52]);

    let eps = asam_perturbation(&p, &p, 0.5).epsilon;
    let n = 337f64.sqrt();
    check(
        "ASAM eps (exact 0.5*(27,64)/sqrt(337))",
        eps.as_slice(),
        [13.5 / n, 32.0 / n],
    );
    let printed = [0.73535, 1.74305];
    let off = eps
        .as_slice()
        .iter()
        .zip(printed)
        .map(|(g, w)| (g - w).abs())
        .fold(0.0, f64::max);
    let printed_note = format!("ASAM eps vs printed (0.73535, 1.74305): |d|={off:.1e}");

    let mut s = OptimizerState::new(p);
    let two = [Batch::unit(), Batch::unit()];
    lookahead_outer_step(
        &mut s,
        &graph,
        &mut two.iter(),
        &opt(Variant::Lookahead, Geometry::Sam, 0.1, 0.5, 2, 0.5),
    )
    .map_err(err)?;
    check("Lookahead", s.slow.as_slice(), [2.68815, 3.58420]);
    lines.push(printed_note);

    if failed.is_empty() {
        Ok(lines.join("; "))
    } else {
        Err(format!(
            "{}; derived Lookahead value from the same rule is (2.6865, 3.582)",
            failed.join("; ")
        ))
    }
}

// ---------------------------------------------------------------- 4

fn perturbation_norms() -> Result<String, String> {
    let mut rng = seeded(2024, 4);
    let mut worst: f64 = 0.0;
    for draw in 0..1000 {
        let dim = rng.random_range(1..=24);
        let (_, mut phi) = quadratic(&vec![0.0; dim]);
        let mut g = phi.clone();
        for (p, q) in phi.as_mut_slice().iter_mut().zip(g.as_mut_slice()) {
            *p = rng.sample::<f64, _>(StandardNormal) * 3.0;
            *q = rng.sample::<f64, _>(StandardNormal);
        }
        let rho = rng.random_range(0.001..5.0);
        let e = sam_perturbation(&g, rho).epsilon;
        let d = (e.norm() - rho).abs();
        ensure(d <= 1e-9, || format!("draw {draw}: SAM norm off by {d:e}"))?;
        worst = worst.max(d);
        let e = asam_perturbation(&phi, &g, rho).epsilon;
        let scaled: f64 = e
            .as_slice()
            .iter()
            .zip(phi.as_slice())
            .filter(|(_, p)| **p != 0.0)
            .map(|(e, p)| (e / p.abs()).powi(2))
            .sum::<f64>()
            .sqrt();
        let d = (scaled - rho).abs();
        ensure(d <= 1e-9, || format!("draw {draw}: ASAM scaled norm off by {d:e}"))?;
        worst = worst.max(d);
    }
    Ok(format!("1000 draws, worst |norm - rho| = {worst:.1e}"))
}

// ---------------------------------------------------------------- 5

fn random_psd(dim: usize, seed: u64) -> AnalyticLandscape {
    let mut rng = seeded(seed, 1);
    let b: Vec<f64> = (0..dim * dim).map(|_| rng.sample(StandardNormal)).collect();
    let mut m = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            m[i * dim + j] = (0..dim).map(|k| b[i * dim + k] * b[j * dim + k]).sum::<f64>();
        }
        m[i * dim + i] += 0.1;
    }
    AnalyticLandscape::Quadratic { dim, matrix: m }
}

fn analytic(landscape: AnalyticLandscape, point: Vec<f64>) -> (LossGraph, ParameterVector) {
    build_model(
        &ModelSpec::Analytic {
            landscape,
            init: AnalyticInit::Point(point),
        },
        0,
    )
    .unwrap()
}

fn sharp_spec(radii: Vec<f64>, geometry: Geometry) -> SharpnessSpec {
    SharpnessSpec {
        radii,
        batch_size: 1,
        geometry,
        ascent_steps: 1,
    }
}

/// Largest loss increase over `samples` points drawn uniformly from the ball.
fn dense_oracle(graph: &LossGraph, params: &ParameterVector, geometry: Geometry, r: f64, samples: usize) -> f64 {
    let batch = Batch::unit();
    let base = graph.evaluate(params, &batch).unwrap();
    let d = params.len();
    let mut rng = seeded(99, d as u64);
    let mut best: f64 = 0.0;
    for _ in 0..samples {
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let radius = r * rng.random::<f64>().powf(1.0 / d as f64);
        let mut point = params.clone();
        for ((p, z), anchor) in point.as_mut_slice().iter_mut().zip(&z).zip(params.as_slice()) {
            let step = radius * z / n;
            *p += match geometry {
                Geometry::Sam => step,
                Geometry::Asam => anchor.abs() * step,
            };
        }
        best = best.max(graph.evaluate(&point, &batch).unwrap() - base);
    }
    best
}

fn m_sharpness_checks() -> Result<String, String> {
    let geometries = [Geometry::Sam, Geometry::Asam];
    // (a) r = 0 on an analytic model and on a trained-from-init MLP.
    let data = blobs(3, 10, 4, 2.0, 1);
    let (mg, mp) = build_model(&mlp(vec![4, 6, 3], Activation::Relu, Normalization::Batch, 1), 0).map_err(err)?;
    for g in geometries {
        let (qg, qp) = analytic(random_psd(3, 4), vec![0.4, -1.0, 2.0]);
        let a = m_sharpness(&qg, &qp, &unit_dataset(), &sharp_spec(vec![0.0], g)).map_err(err)?;
        let b = m_sharpness(
            &mg,
            &mp,
            &data,
            &SharpnessSpec {
                batch_size: 8,
                ..sharp_spec(vec![0.0], g)
            },
        )
        .map_err(err)?;
        ensure(a.values == vec![(0.0, 0.0)] && b.values == vec![(0.0, 0.0)], || {
            format!("(a) r=0 gave {:?} / {:?}", a.values, b.values)
        })?;
    }
    // (b) monotone in r on random convex quadratics.
    let radii = vec![0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0];
    let mut monotone_cases = 0;
    for seed in 0..20u64 {
        let dim = 1 + (seed as usize % 6);
        let mut rng = seeded(seed, 2);
        let point: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        for g in geometries {
            let (qg, qp) = analytic(random_psd(dim, seed + 100), point.clone());
            let s = m_sharpness(&qg, &qp, &unit_dataset(), &sharp_spec(radii.clone(), g)).map_err(err)?;
            let ok = s.values.windows(2).all(|w| w[1].1 >= w[0].1);
            ensure(ok, || format!("(b) not monotone, seed {seed} {g}: {:?}", s.values))?;
            monotone_cases += 1;
        }
    }
    // (c) agreement with dense sampling on models with at most 3 parameters.
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for dim in 1..=3usize {
        for seed in 0..3u64 {
            let mut rng = seeded(seed, 3 + dim as u64);
            let point: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let models = [
                analytic(random_psd(dim, seed + 10 * dim as u64), point.clone()),
                analytic(AnalyticLandscape::SharpFlat, vec![point[0]]),
            ];
            for (qg, qp) in models.iter().take(if dim == 1 { 2 } else { 1 }) {
                for g in geometries {
                    for r in [0.02, 0.05, 0.1] {
                        let s = m_sharpness(qg, qp, &unit_dataset(), &sharp_spec(vec![r], g)).map_err(err)?;
                        let got = s.values[0].1;
                        let want = dense_oracle(qg, qp, g, r, 10_000);
                        let rel = (got - want).abs() / want.max(1e-12);
                        ensure(rel <= 0.05, || {
                            format!("(c) dim {dim} seed {seed} {g} r={r}: {got} vs oracle {want}")
                        })?;
                        worst = worst.max(rel);
                        cases += 1;
                    }
                }
            }
        }
    }
    Ok(format!(
        "(a) exact zeros; (b) {monotone_cases} monotone sweeps; (c) {cases} cases within {:.2}% of dense sampling",
        100.0 * worst
    ))
}

// ---------------------------------------------------------------- 6

const LANDSCAPE: &str = r#"
name = "landscape"
epochs = 1
batch_size = 1
[model]
kind = "sharp-flat"
init_low = -1.5
init_high = 1.5
[data]
kind = "unit"
steps = 300
[optimizer]
variant = "lookbehind"
geometry = "sam"
lr = 0.001
momentum = 0.0
rho = 0.3
k = 5
alpha = 0.5
"#;

fn flat_count(overrides: &[&str]) -> Result<(usize, usize, u64), String> {
    let mut o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    o.push(format!(
        "seeds=[{}]",
        (0..50).map(|s: u32| s.to_string()).collect::<Vec<_>>().join(",")
    ));
    let config = ExperimentConfig::from_toml(LANDSCAPE, &o).map_err(err)?;
    let (mut flat, mut failed, mut evals) = (0, 0, 0);
    for &seed in &config.seeds {
        let r = run_training(&config, seed).map_err(err)?;
        if !r.is_ok() {
            failed += 1;
        } else if r.basin.as_deref() == Some("flat") {
            flat += 1;
        }
        evals = r.last().map_or(0, |m| m.gradient_evals);
    }
    Ok((flat, failed, evals))
}

fn flat_minima() -> Result<String, String> {
    // Lookbehind: 300 outer steps x 2k = 3000 gradients.
    let (lb, lb_fail, lb_evals) = flat_count(&[])?;
    // Multistep k=5: k+1 = 6 gradients per step, 500 steps.
    let (ms, ms_fail, ms_evals) = flat_count(&["optimizer.variant=multistep", "data.steps=500"])?;
    // Multistep k=9: 10 gradients per step, same step count as Lookbehind.
    let (ms9, ms9_fail, ms9_evals) = flat_count(&["optimizer.variant=multistep", "optimizer.k=9"])?;
    ensure(lb_evals == ms_evals && lb_evals == ms9_evals, || {
        format!("budgets differ: {lb_evals} / {ms_evals} / {ms9_evals}")
    })?;
    let summary = format!(
        "flat basin out of 50: Lookbehind {lb} (failed {lb_fail}), Multistep k=5 {ms} (failed {ms_fail}), \
         Multistep k=9 {ms9} (failed {ms9_fail}); {lb_evals} gradients each"
    );
    ensure(lb >= ms && lb >= ms9, || summary.clone())?;
    Ok(summary)
}

// ---------------------------------------------------------------- 7

const NOISY_BLOBS: &str = r#"
name = "noisy-blobs"
seeds = [0, 1, 2]
epochs = 10
batch_size = 32
[model]
kind = "mlp"
hidden = [64]
[data]
kind = "blobs"
classes = 5
per_class = 1000
dim = 10
separation = 3.0
label_noise = 0.2
[optimizer]
geometry = "sam"
lr = 0.05
momentum = 0.9
rho = 0.05
k = 5
alpha = 0.5
[schedule]
factor = 10
period = 5
"#;

fn mean_test_accuracy(variant: &str) -> Result<(f64, Vec<f64>), String> {
    let config =
        ExperimentConfig::from_toml(NOISY_BLOBS, &[format!("optimizer.variant=\"{variant}\"")]).map_err(err)?;
    let mut accs = Vec::new();
    for &seed in &config.seeds {
        let r = run_training(&config, seed).map_err(err)?;
        ensure(r.is_ok(), || format!("{variant} seed {seed}: {}", r.status))?;
        accs.push(r.last().and_then(|m| m.test_accuracy).ok_or("no test accuracy")?);
    }
    Ok((accs.iter().sum::<f64>() / accs.len() as f64, accs))
}

fn generalization() -> Result<String, String> {
    let (lb, lb_all) = mean_test_accuracy("lookbehind")?;
    let (sam, sam_all) = mean_test_accuracy("base")?;
    let summary = format!(
        "test accuracy Lookbehind+SAM {:.2}% {:?} vs SAM {:.2}% {:?} (margin {:+.2} points)",
        100.0 * lb,
        lb_all,
        100.0 * sam,
        sam_all,
        100.0 * (lb - sam)
    );
    ensure(lb >= sam - 0.005, || summary.clone())?;
    Ok(summary)
}

// ---------------------------------------------------------------- 8

fn robustness() -> Result<String, String> {
    // Noise statistics: δ = noisy / clean on a vector of ones.
    let ones = ParameterVector::flatten(vec![(
        "w".into(),
        Tensor::new(vec![100_000], vec![1.0; 100_000]).unwrap(),
    )]);
    let mut rng = seeded(8, 8);
    let noisy = inject_weight_noise(&ones, 0.1, &mut rng);
    let n = noisy.len() as f64;
    let mean = noisy.as_slice().iter().sum::<f64>() / n;
    let std = (noisy.as_slice().iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
    ensure((mean - 1.0).abs() <= 0.002 && (std - 0.1).abs() <= 0.002, || {
        format!("delta mean {mean}, std {std}")
    })?;

    // A small trained batch-norm MLP on balanced 10-class data.
    let data = blobs(10, 100, 10, 3.0, 8);
    let (mut graph, params) =
        build_model(&mlp(vec![10, 32, 10], Activation::Relu, Normalization::Batch, 1), 8).map_err(err)?;
    let c = OptimizerConfig {
        momentum: 0.9,
        ..opt(Variant::Base, Geometry::Sam, 0.05, 0.05, 1, 1.0)
    };
    let mut state = OptimizerState::new(params);
    for epoch in 0..5 {
        let batches: Vec<Batch> = lookbehind_core::data::batch_iterator(&data, 32, Some(8), epoch, false)
            .map_err(err)?
            .collect();
        for b in &batches {
            outer_step(&mut state, &graph, &mut std::iter::once(b), &c).map_err(err)?;
        }
    }
    lookbehind_core::models::recompute_norm_statistics(&mut graph, &state.slow, &data).map_err(err)?;
    let clean = clean_accuracy(&graph, &state.slow, &data, &data).map_err(err)?;
    let spec = NoiseSpec {
        sigmas: vec![0.0, 100.0],
        trials: 10,
        seed: 8,
    };
    let rows = robustness_curve(&graph, &state.slow, &data, &data, &spec).map_err(err)?;
    ensure(rows[0].acc_mean == clean && rows[0].acc_std == 0.0, || {
        format!("sigma=0 row {:?} vs clean {clean}", rows[0])
    })?;
    let se = (0.1f64 * 0.9 / data.len() as f64).sqrt();
    let chance = rows[1].acc_mean;
    ensure((chance - 0.1).abs() <= 3.0 * se, || {
        format!("sigma=100 accuracy {chance} not within 3 SE ({se:.4}) of 0.1")
    })?;
    Ok(format!(
        "delta mean {mean:.5} std {std:.5}; sigma=0 row = clean {clean}; sigma=100 accuracy {chance:.4} \
         (chance 0.1, 3 SE = {:.4})",
        3.0 * se
    ))
}

// ---------------------------------------------------------------- 9

const TWO_TASKS: &str = r#"
name = "two-tasks"
seeds = [0, 1, 2, 3, 4]
epochs = 1
batch_size = 10
[model]
kind = "mlp"
[data]
kind = "blobs"
classes = 4
per_class = 200
separation = 3.0
[optimizer]
variant = "base"
lr = 0.1
momentum = 0.0
[lifelong]
ways = 2
epochs = 20
batch_size = 10
hidden = [2]
methods = ["sgd", "er-sgd"]
"#;

fn lifelong() -> Result<String, String> {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let mut m = AccuracyMatrix::new(3);
    for (t, row) in [vec![0.9], vec![0.8, 0.7], vec![0.6, 0.9, 0.8]].iter().enumerate() {
        for (tau, v) in row.iter().enumerate() {
            m.set(t, tau, *v).map_err(err)?;
        }
    }
    // avg = (0.6 + 0.9 + 0.8) / 3; forgetting = ((0.9 - 0.6) + (0.7 - 0.9)) / 2.
    let avg = average_accuracy(&m, 3).map_err(err)?;
    let fgt = forgetting(&m, 3).map_err(err)?;
    ensure(close(avg, 2.3 / 3.0) && close(fgt, 0.05), || {
        format!("3-task matrix: avg {avg}, forgetting {fgt}")
    })?;
    let mut b = AccuracyMatrix::new(2);
    b.set(0, 0, 0.5).map_err(err)?;
    b.set(1, 0, 0.7).map_err(err)?;
    b.set(1, 1, 0.9).map_err(err)?;
    let (avg2, fgt2) = (average_accuracy(&b, 2).map_err(err)?, forgetting(&b, 2).map_err(err)?);
    ensure(close(avg2, 0.8) && close(fgt2, -0.2), || {
        format!("backward transfer: avg {avg2}, forgetting {fgt2}")
    })?;
    ensure(forgetting(&b, 1).is_err(), || "forgetting at t=1 did not error".into())?;
    ensure(close(average_accuracy(&b, 1).map_err(err)?, 0.5), || {
        "avg at t=1".into()
    })?;

    let config = ExperimentConfig::from_toml(TWO_TASKS, &[]).map_err(err)?;
    let mut wins = 0;
    let mut detail = Vec::new();
    for &seed in &config.seeds {
        let records = run_lifelong_config(&config, seed).map_err(err)?;
        let f = |name: &str| {
            records
                .iter()
                .find_map(|r| r.lifelong.as_ref().filter(|l| l.method == name))
                .and_then(|l| l.forgetting)
                .ok_or_else(|| format!("seed {seed}: no {name} result"))
        };
        let (plain, er) = (f("sgd")?, f("er-sgd")?);
        if er < plain {
            wins += 1;
        }
        detail.push(format!("{er:.4}<{plain:.4}"));
    }
    let summary = format!(
        "metric oracles exact; ER forgets less than plain SGD on {wins}/5 seeds ({})",
        detail.join(", ")
    );
    ensure(wins >= 4, || summary.clone())?;
    Ok(summary)
}

// ---------------------------------------------------------------- 10

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_lookbehind"))
        .args(args)
        .output()
        .map_err(err)?;
    ensure(out.status.success(), || {
        format!(
            "{args:?} exited {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn outputs(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    for e in std::fs::read_dir(dir).map_err(err)? {
        let p = e.map_err(err)?.path();
        if p.extension().is_some_and(|x| x == "csv" || x == "dat") {
            files.insert(
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).map_err(err)?,
            );
        }
    }
    Ok(files)
}

fn determinism() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(err)?;
    let desk = repo_root().join("configs/desk");
    let runs: [(&str, &str, &[&str]); 4] = [
        ("train", "blobs-train.toml", &["--override", "epochs=4"]),
        ("grid", "blobs-grid.toml", &["--override", "epochs=2"]),
        ("lifelong", "lifelong.toml", &[]),
        ("switch", "landscape-switch.toml", &[]),
    ];
    let mut compared = 0;
    for (cmd, file, extra) in runs {
        let config = desk.join(file);
        let mut results = Vec::new();
        for rep in 0..2 {
            let out = tmp.path().join(format!("{cmd}-{rep}"));
            let mut args = vec![
                cmd,
                "--config",
                config.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ];
            args.extend_from_slice(extra);
            run_cli(&args)?;
            results.push(outputs(&out)?);
        }
        ensure(!results[0].is_empty(), || format!("{cmd} wrote no CSV"))?;
        ensure(results[0] == results[1], || {
            let differing: Vec<&String> = results[0]
                .iter()
                .filter(|(k, v)| results[1].get(*k) != Some(v))
                .map(|(k, _)| k)
                .collect();
            format!("{cmd}: files differ between runs: {differing:?}")
        })?;
        compared += results[0].len();
    }
    Ok(format!(
        "train/grid/lifelong/switch run twice: {compared} CSV and plot files byte-identical"
    ))
}

// ---------------------------------------------------------------- 11

fn preset_configs() -> Result<String, String> {
    let dir = repo_root().join("configs/benchmarks");
    let expected = [
        ("cifar10", "sam", 0.05, 200, 128, 50, vec![2, 5, 10]),
        ("cifar10", "asam", 0.5, 200, 128, 50, vec![2, 5, 10]),
        ("cifar100", "sam", 0.1, 200, 128, 50, vec![2, 5, 10]),
        ("cifar100", "asam", 1.0, 200, 128, 50, vec![2, 5, 10]),
        ("imagenet", "sam", 0.05, 90, 400, 30, vec![2]),
        ("imagenet", "asam", 1.0, 90, 400, 30, vec![2]),
    ];
    for (data, geometry, rho, epochs, batch, period, ks) in &expected {
        let path = dir.join(format!("{data}-lookbehind-{geometry}.toml"));
        let c = ExperimentConfig::load(&path, &[]).map_err(err)?;
        let name = path.display().to_string();
        let o = &c.optimizer;
        ensure(c.epochs == *epochs && c.batch_size == *batch, || {
            format!("{name}: epochs/batch")
        })?;
        ensure(o.lr == 0.1 && o.momentum == 0.9, || format!("{name}: lr/momentum"))?;
        ensure(c.schedule.factor == 10.0 && c.schedule.period == *period, || {
            format!("{name}: schedule")
        })?;
        ensure(
            c.schedule.lr_at(o.lr, *period - 1) == 0.1 && (c.schedule.lr_at(o.lr, *period) - 0.01).abs() < 1e-15,
            || format!("{name}: schedule does not divide by 10 at epoch {period}"),
        )?;
        ensure(o.geometry.as_str() == *geometry && o.rho == *rho, || {
            format!("{name}: rho {}", o.rho)
        })?;
        ensure(o.variant == Variant::Lookbehind, || format!("{name}: variant"))?;
        let axes = &c.grid.as_ref().ok_or(format!("{name}: no grid"))?.axis;
        let values = |key: &str| -> Vec<f64> {
            axes.iter()
                .find(|a| a.key == key)
                .map(|a| {
                    a.values
                        .iter()
                        .map(|v| v.as_float().or(v.as_integer().map(|i| i as f64)).unwrap_or(f64::NAN))
                        .collect()
                })
                .unwrap_or_default()
        };
        let want_k: Vec<f64> = ks.iter().map(|&k| k as f64).collect();
        ensure(values("optimizer.k") == want_k, || format!("{name}: k axis"))?;
        ensure(values("optimizer.alpha") == vec![0.2, 0.5, 0.8], || {
            format!("{name}: alpha axis")
        })?;
    }
    Ok(format!("{} preset files encode the published recipes", expected.len()))
}

// ----------------------------------------------------------------

fn main() {
    let checks: [(u32, &str, Check); 11] = [
        (1, "reduction identities", reductions),
        (2, "gradient correctness", gradient_check),
        (3, "closed-form oracles", closed_forms),
        (4, "perturbation norms", perturbation_norms),
        (5, "m-sharpness", m_sharpness_checks),
        (6, "flat-minima trend", flat_minima),
        (7, "generalization trend", generalization),
        (8, "robustness protocol", robustness),
        (9, "lifelong metrics and replay trend", lifelong),
        (10, "CLI determinism", determinism),
        (11, "preset configuration fidelity", preset_configs),
    ];
    let mut unexpected = 0;
    let mut passed = 0;
    for (id, name, check) in checks {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => {
                passed += 1;
                println!("PASS {id:>2} {name} [{secs:.1}s]: {detail}");
            }
            Err(detail) => {
                let known = EXPECTED_FAILURES.contains(&id);
                if !known {
                    unexpected += 1;
                }
                let tag = if known {
                    " (expected: reference value is wrong)"
                } else {
                    ""
                };
                println!("FAIL {id:>2} {name}{tag} [{secs:.1}s]: {detail}");
            }
        }
    }
    println!("acceptance: {passed}/11 passed, {unexpected} unexpected failures");
    if unexpected > 0 {
        std::process::exit(1);
    }
}
