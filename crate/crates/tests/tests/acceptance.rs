//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use mtgp::data::{band_keep_mask, split_trial, HyperCube, DEFAULT_WATER_BANDS};
use mtgp::kernels::KernelSpec;
use mtgp::linalg::min_eigenvalue;
use mtgp::model::{
    negative_log_marginal_likelihood, nlml_gradient, FittedModel, ModelConfig, ObservationSet, Term,
};
use mtgp::optimizer::{minimize, multi_restart_minimize};
use mtgp::{
    r_squared, KernelKind, Method, OptimizerSettings, SavedModel, SyntheticSpec, TaskCorrMatrix,
};
use mtgp_cli::{cmd_fit, RunConfig};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_secs: u64) -> Result<(), String> {
    check(
        elapsed.as_secs_f64() <= limit_secs as f64,
        format!(
            "runtime {:.1}s exceeds {limit_secs}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn posterior(
    config: &ModelConfig,
    data: &ObservationSet,
    xs: &DMatrix<f64>,
    task: usize,
) -> (f64, Vec<f64>, Vec<f64>) {
    let m = FittedModel::condition(config.clone(), data.clone(), 0).unwrap();
    let (mean, var) = m.predict(xs, task).unwrap();
    (
        m.nlml(),
        mean.iter().cloned().collect(),
        var.iter().cloned().collect(),
    )
}

fn max_posterior_diff(a: &(f64, Vec<f64>, Vec<f64>), b: &(f64, Vec<f64>, Vec<f64>)) -> f64 {
    (a.0 - b.0)
        .abs()
        .max(abs_diff(&a.1, &b.1))
        .max(abs_diff(&a.2, &b.2))
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut params = 0;
    for i in 0..20 {
        let m = rng.random_range(1..=3);
        let n = rng.random_range(2..=10);
        let kind = KINDS[i % 3];
        let method = match i % 4 {
            0 => Method::Gp(kind),
            1 => Method::SharedCovariance(kind),
            2 => Method::StructuredNoise(kind),
            _ => Method::Composite(kind, KINDS[(i + 1) % 3]),
        };
        let m = if method.is_single_task() { 1 } else { m.max(2) };
        let data = full_grid(n, m, 2, &mut rng).filter(|o| o.input != 0 || o.task == 0);
        let cfg = random_config(method, m, &mut rng);
        let p0 = cfg.params();
        let f = |p: &[f64]| {
            let mut c = cfg.clone();
            c.set_params(p).unwrap();
            negative_log_marginal_likelihood(&c, &data).unwrap()
        };
        let fd = finite_difference(&f, &p0, 1e-3);
        let g = nlml_gradient(&cfg, &data).unwrap();
        for (a, b) in g.iter().zip(&fd) {
            worst = worst.max((a - b).abs() / b.abs().max(1e-2));
            params += 1;
        }
    }
    check(worst <= 1e-5, format!("max relative error {worst:.2e}"))?;
    within(start.elapsed(), 60)?;
    Ok(format!(
        "{params} parameters over 20 instances, max relative error {worst:.2e}, {:.1}s",
        start.elapsed().as_secs_f64()
    ))
}

fn c2_dense_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let m = rng.random_range(1..=3);
        let n = rng.random_range(2..=(30 / m).min(10));
        let data = full_grid(n, m, 3, &mut rng);
        let method = random_method(m, &mut rng);
        let cfg = random_config(method, m, &mut rng);
        let xs = random_inputs(4, 3, &mut rng);
        for task in 0..m {
            let o = dense_oracle(&cfg, &data, &xs, task);
            let got = posterior(&cfg, &data, &xs, task);
            let d = max_posterior_diff(
                &got,
                &(
                    o.nlml,
                    o.mean.as_slice().to_vec(),
                    o.var.as_slice().to_vec(),
                ),
            );
            worst = worst.max(d);
        }
    }
    check(worst <= 1e-8, format!("max abs difference {worst:.2e}"))?;
    Ok(format!("10 instances, max abs difference {worst:.2e}"))
}

fn c3_reductions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let xs = random_inputs(4, 2, &mut rng);

    // (a) composite with the second term zeroed vs shared covariance
    let data = full_grid(6, 3, 2, &mut rng).filter(|o| o.input % 2 == 0 || o.task != 0);
    let sc = random_config(Method::SharedCovariance(KernelKind::Se), 3, &mut rng);
    let mut comp = sc.clone();
    comp.terms.push(Term {
        task_corr: TaskCorrMatrix::zeros(3, 2),
        kernel: KernelSpec::nn(0.8, 1.7),
    });
    let da = (0..3)
        .map(|t| {
            max_posterior_diff(
                &posterior(&sc, &data, &xs, t),
                &posterior(&comp, &data, &xs, t),
            )
        })
        .fold(0.0, f64::max);

    // (b) one task, two terms vs single-task GP with the summed kernel
    let x = random_inputs(8, 2, &mut rng);
    let y = DMatrix::from_fn(8, 1, |_, _| rng.random_range(-1.0..1.0));
    let d1 = ObservationSet::full_grid(x, &y).unwrap();
    let comp1 = random_config(
        Method::Composite(KernelKind::Se, KernelKind::Nn),
        1,
        &mut rng,
    );
    let a1 = comp1.terms[0].task_corr.materialize().unwrap()[(0, 0)];
    let a2 = comp1.terms[1].task_corr.materialize().unwrap()[(0, 0)];
    let (se, nn) = (
        &comp1.terms[0].kernel.log_hypers,
        &comp1.terms[1].kernel.log_hypers,
    );
    let sum = KernelSpec::new(
        KernelKind::Sum,
        vec![se[0] + 0.5 * a1.ln(), se[1], nn[0] + 0.5 * a2.ln(), nn[1]],
    )
    .unwrap();
    let gp = one_term(
        TaskCorrMatrix::scaled_identity(1, 1.0),
        sum,
        &[comp1.task_noise_log[0].exp()],
    );
    let db = max_posterior_diff(
        &posterior(&comp1, &d1, &xs, 0),
        &posterior(&gp, &d1, &xs, 0),
    );

    // (c) structured noise with a rank-0 noise matrix vs shared covariance
    let mut sn = sc.clone();
    sn.noise_corr = Some(TaskCorrMatrix::zeros(3, 0));
    let dc0 = (0..3)
        .map(|t| {
            max_posterior_diff(
                &posterior(&sc, &data, &xs, t),
                &posterior(&sn, &data, &xs, t),
            )
        })
        .fold(0.0, f64::max);
    let mut sn2 = sc.clone();
    sn2.noise_corr = Some(TaskCorrMatrix::scaled_identity(3, 0.3));
    let mut sc2 = sc.clone();
    sc2.task_noise_log = sc
        .task_noise_log
        .iter()
        .map(|v| (v.exp() + 0.09).ln())
        .collect();
    let dc1 = (0..3)
        .map(|t| {
            max_posterior_diff(
                &posterior(&sc2, &data, &xs, t),
                &posterior(&sn2, &data, &xs, t),
            )
        })
        .fold(0.0, f64::max);
    let dc = dc0.max(dc1);

    check(
        da <= 1e-10 && db <= 1e-10 && dc <= 1e-10,
        format!("(a) {da:.1e} (b) {db:.1e} (c) {dc:.1e}"),
    )?;
    Ok(format!(
        "max abs differences (a) {da:.1e}, (b) {db:.1e}, (c) {dc:.1e}"
    ))
}

fn c4_interpolation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst: f64 = 0.0;
    let mut rejected = 0;
    let mut accepted = 0;
    while accepted < 10 {
        let m = rng.random_range(1..=3);
        let n = rng.random_range(3..=8);
        let data = full_grid(n, m, 3, &mut rng).filter(|o| o.input != 0 || o.task == 0);
        let kind = random_kind(&mut rng);
        let method = if m == 1 {
            Method::Gp(kind)
        } else if accepted % 2 == 0 {
            Method::SharedCovariance(kind)
        } else {
            Method::Composite(kind, random_kind(&mut rng))
        };
        let ranks = vec![if m == 1 { 0 } else { m }; method.num_task_matrices()];
        let mut cfg = method.config(m, &ranks).unwrap().randomized(&mut rng);
        cfg.task_noise_log = vec![1e-12f64.ln(); m];
        // the exact residual is noise * Σ⁻¹y, so a near-singular prior cannot interpolate
        if min_eigenvalue(&dense_sigma(&cfg, data.inputs())) < 1e-4 {
            rejected += 1;
            continue;
        }
        accepted += 1;
        let model = FittedModel::condition(cfg, data.clone(), 0).unwrap();
        for o in data.observations() {
            let x = data.inputs().rows(o.input, 1).into_owned();
            worst = worst.max((model.predict_mean(&x, o.task).unwrap()[0] - o.target).abs());
        }
    }
    check(worst <= 1e-6, format!("max abs residual {worst:.2e}"))?;
    Ok(format!(
        "10 instances ({rejected} near-singular draws skipped), max abs residual {worst:.2e}"
    ))
}

fn c5_transfer() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig {
        synthetic: Some(Default::default()),
        methods: Some(vec![
            "gp-se".into(),
            "mtgp-sc-se".into(),
            "mtgp-comp-se-nn".into(),
        ]),
        trials: Some(20),
        quiet: Some(true),
        ..RunConfig::default()
    };
    let spec = SyntheticSpec::default();
    check(
        spec.p[0][1] / (spec.p[0][0] * spec.p[1][1]).sqrt() >= 0.8,
        "P coupling below 0.8",
    )?;
    let mut out = Vec::new();
    let result = mtgp_cli::cmd_benchmark(&cfg, &mut out, &mut std::io::sink())
        .map_err(|e| e.to_string())?
        .expect("not a dry run");
    let elapsed = start.elapsed();
    let row = |id: &str| result.summary.rows.iter().find(|r| r.method == id).unwrap();
    let (gp, sc, comp) = (row("gp-se"), row("mtgp-sc-se"), row("mtgp-comp-se-nn"));
    let scores = |id: &str| -> Vec<f64> {
        let mut v: Vec<f64> = result
            .reports
            .iter()
            .filter(|r| r.method == id)
            .map(|r| r.test_r2)
            .collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let median = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            0.5 * (v[(v.len() - 1) / 2] + v[v.len() / 2])
        }
    };
    let wins = result
        .reports
        .iter()
        .filter(|r| r.method == "mtgp-comp-se-nn")
        .filter(|c| {
            result.reports.iter().any(|g| {
                g.method == "gp-se" && g.trial_index == c.trial_index && c.test_r2 > g.test_r2
            })
        })
        .count();
    let detail = format!(
        "mean r2 GP(SE) {:.4}, MTGP-SC(SE) {:.4}, MTGP-COMP {:.4}; gap vs GP {:+.4} (need >= 0.05), vs SC {:+.4} (need >= 0); \
         medians {:.3}/{:.3}/{:.3}; COMP beats GP in {wins}/20 trials; {:.0}s",
        gp.mean_r2,
        sc.mean_r2,
        comp.mean_r2,
        comp.mean_r2 - gp.mean_r2,
        comp.mean_r2 - sc.mean_r2,
        median(&scores("gp-se")),
        median(&scores("mtgp-sc-se")),
        median(&scores("mtgp-comp-se-nn")),
        elapsed.as_secs_f64()
    );
    check(
        gp.trials == 20 && sc.trials == 20 && comp.trials == 20,
        format!("failed trials; {detail}"),
    )?;
    check(
        comp.mean_r2 - gp.mean_r2 >= 0.05 && comp.mean_r2 >= sc.mean_r2,
        detail.clone(),
    )?;
    within(elapsed, 15 * 60)?;
    Ok(detail)
}

fn c6_psd() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut worst_tc = f64::INFINITY;
    for i in 0..1000 {
        let m = rng.random_range(1..=6);
        let k = rng.random_range(0..=m);
        let mut tc = TaskCorrMatrix::random(m, k, rng.random_range(0.1..3.0), &mut rng);
        if i % 2 == 1 {
            let p: Vec<f64> = (0..tc.num_params())
                .map(|_| rng.random_range(-3.0..3.0))
                .collect();
            tc.set_params(&p).unwrap();
        }
        worst_tc = worst_tc.min(min_eigenvalue(&tc.materialize().unwrap()));
    }
    let mut worst_k = f64::INFINITY;
    for _ in 0..200 {
        let kind = random_kind(&mut rng);
        let hypers = (0..kind.num_hypers())
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let kernel = KernelSpec::new(kind, hypers).unwrap();
        let n = rng.random_range(2..=12);
        let x = random_inputs(n, rng.random_range(1..=4), &mut rng);
        worst_k = worst_k.min(min_eigenvalue(&kernel.gram(&x).unwrap()));
    }
    check(
        worst_tc >= -1e-10 && worst_k >= -1e-10,
        format!("min eigenvalues {worst_tc:.2e} / {worst_k:.2e}"),
    )?;
    Ok(format!(
        "min eigenvalue: task matrices {worst_tc:.2e}, kernel matrices {worst_k:.2e}"
    ))
}

fn c7_optimizer() -> Outcome {
    let rosen = |x: &[f64]| {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![
            -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
            200.0 * (b - a * a),
        ];
        (f, g)
    };
    let settings = OptimizerSettings {
        max_iterations: 1000,
        gradient_tolerance: 1e-10,
        step_tolerance: 1e-14,
        ..OptimizerSettings::default()
    };
    let r1 = minimize(rosen, &[-1.2, 1.0], &settings).map_err(|e| e.to_string())?;
    let r2 = minimize(rosen, &[-1.2, 1.0], &settings).map_err(|e| e.to_string())?;
    let dist = ((r1.x[0] - 1.0).powi(2) + (r1.x[1] - 1.0).powi(2)).sqrt();
    check(
        dist <= 1e-4,
        format!("Rosenbrock ended {dist:.2e} from (1, 1)"),
    )?;
    check(
        r1.x == r2.x && r1.f.to_bits() == r2.f.to_bits(),
        "Rosenbrock runs differ",
    )?;

    let two_basin = |x: &[f64]| {
        let t = (x[0] + 1.0) / 2.0;
        let f = (x[0] * x[0] - 1.0).powi(2) + 3.0 * t * t - 2.0 * t * t * t;
        let g = 4.0 * x[0] * (x[0] * x[0] - 1.0) + (6.0 * t - 6.0 * t * t) * 0.5;
        (f, vec![g])
    };
    let ms = OptimizerSettings {
        num_restarts: 5,
        seed: 3,
        ..OptimizerSettings::default()
    };
    let sampler = |rng: &mut ChaCha8Rng| vec![rng.random_range(-2.0..2.0)];
    let a = multi_restart_minimize(two_basin, sampler, &ms).map_err(|e| e.to_string())?;
    let b = multi_restart_minimize(two_basin, sampler, &ms).map_err(|e| e.to_string())?;
    let starts: Vec<f64> = a.restarts.iter().filter_map(|r| r.final_f).collect();
    check(
        starts.iter().any(|f| *f > 0.5),
        "restarts did not visit the +1 basin",
    )?;
    check(
        (a.best.x[0] + 1.0).abs() < 1e-4 && a.best.f < 1e-8,
        format!("best x {}", a.best.x[0]),
    )?;
    check(
        a.best.x == b.best.x && a.best_restart == b.best_restart,
        "multi-restart runs differ",
    )?;
    Ok(format!(
        "Rosenbrock |x - (1,1)| = {dist:.1e} in {} iterations; two-basin best x = {:.6} (restart {} of 5); repeat runs identical",
        r1.diagnostics.iterations, a.best.x[0], a.best_restart
    ))
}

fn c8_protocol() -> Outcome {
    let t = SyntheticSpec {
        num_samples: 54,
        num_primary: 9,
        ..SyntheticSpec::default()
    }
    .generate()
    .map_err(|e| e.to_string())?;
    let s = split_trial(&t, 0, 0).map_err(|e| e.to_string())?;
    check(
        s.test.len() == 3 && s.test.count_for_task(1) == 0,
        format!("test size {}", s.test.len()),
    )?;
    check(
        s.train.count_for_task(0) == 6,
        format!("primary train {}", s.train.count_for_task(0)),
    )?;
    check(
        s.train.count_for_task(1) == 54,
        format!("secondary train {}", s.train.count_for_task(1)),
    )?;
    check(
        s.inner_val.count_for_task(0) >= 1,
        "no primary observation in the inner 20%",
    )?;
    let r = [
        r_squared(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]),
        r_squared(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]),
        r_squared(&[0.0, 1.0, 2.0], &[0.0, 0.0, 0.0]),
    ]
    .map(|v| v.unwrap());
    check(r == [1.0, 0.0, -1.5], format!("r2 examples {r:?}"))?;
    Ok(format!(
        "3 test / 6 primary train / 54 secondary train; inner 20% holds {} primary; r2 examples {:?}",
        s.inner_val.count_for_task(0),
        r
    ))
}

fn run_cli(args: &[&str]) -> (i32, Vec<u8>, Vec<u8>) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = mtgp_cli::run(
        std::iter::once("mtgp").chain(args.iter().copied()),
        &mut out,
        &mut err,
    );
    (code, out, err)
}

fn c9_determinism() -> Outcome {
    let bench = |jobs: &str| {
        run_cli(&[
            "benchmark",
            "--synthetic",
            "--synth-samples",
            "40",
            "--synth-primary-labels",
            "12",
            "--trials",
            "4",
            "--methods",
            "gp-se,mtgp-sc-se,mtgp-sn-se,mtgp-comp-se-nn",
            "--ranks",
            "0,1",
            "--restarts",
            "2",
            "--jobs",
            jobs,
            "--quiet",
        ])
    };
    let (c1, o1, e1) = bench("1");
    let (c4, o4, _) = bench("4");
    check(
        c1 == 0 && c4 == 0,
        format!("exit codes {c1}/{c4}: {}", String::from_utf8_lossy(&e1)),
    )?;
    check(
        o1 == o4,
        "summary tables differ between --jobs 1 and --jobs 4",
    )?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("s.csv");
    let (code, _, _) = run_cli(&[
        "synth",
        "--synth-samples",
        "30",
        "--synth-primary-labels",
        "15",
        "--output",
        data.to_str().unwrap(),
    ]);
    check(code == 0, "synth failed")?;
    let fit_cfg = |model: &Path| RunConfig {
        data: Some(data.clone()),
        model: Some(model.to_path_buf()),
        restarts: Some(2),
        seed: Some(9),
        ..RunConfig::default()
    };
    let m1 = dir.path().join("m1.json");
    let m2 = dir.path().join("m2.json");
    let fitted = cmd_fit(&fit_cfg(&m1), &mut std::io::sink()).map_err(|e| e.to_string())?;
    cmd_fit(&fit_cfg(&m2), &mut std::io::sink()).map_err(|e| e.to_string())?;
    let b1 = std::fs::read(&m1).map_err(|e| e.to_string())?;
    check(
        b1 == std::fs::read(&m2).map_err(|e| e.to_string())?,
        "model files differ for the same seed",
    )?;
    let loaded = SavedModel::load(&m1).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let xs = DMatrix::from_fn(16, fitted.wavelengths.len(), |_, _| {
        rng.random_range(0.0..1.0)
    });
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    for t in 0..fitted.task_names.len() {
        let a = fitted.predict(&xs, t).map_err(|e| e.to_string())?;
        let b = loaded.predict(&xs, t).map_err(|e| e.to_string())?;
        check(
            bits(&a.0) == bits(&b.0) && bits(&a.1) == bits(&b.1),
            "round-trip predictions differ",
        )?;
    }
    Ok(format!(
        "benchmark tables byte-identical for --jobs 1/4 ({} bytes); model files identical; round-trip predictions bit-identical",
        o1.len()
    ))
}

fn c10_map() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let wl: Vec<f64> = (0..=34).map(|b| 400.0 + 50.0 * b as f64).collect(); // 400..2100 nm
    let red = wl.iter().position(|&w| w == 650.0).unwrap();
    let nir = wl.iter().position(|&w| w == 800.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let (w, h) = (4, 4);
    let mut pixels = Vec::new();
    let mut expected_mask = Vec::new();
    for p in 0..w * h {
        let mut s: Vec<f32> = wl.iter().map(|_| rng.random_range(0.05f32..0.6)).collect();
        let (r, n) = if p % 3 == 0 {
            (0.30f32, 0.32f32)
        } else {
            (0.05f32, 0.45f32)
        };
        s[red] = r;
        s[nir] = n;
        let ndvi = (n as f64 - r as f64) / (n as f64 + r as f64);
        expected_mask.push(ndvi >= 0.3);
        pixels.push(s);
    }
    let cube = HyperCube::from_pixels(w, h, wl.clone(), &pixels).map_err(|e| e.to_string())?;
    let cube_path = dir.path().join("scene.bsq");
    cube.write(&cube_path, dir.path().join("scene.json"))
        .map_err(|e| e.to_string())?;

    // model on a grid offset from the cube's bands, so pixels are interpolated
    let model_wl = vec![525.0, 675.0, 975.0, 1225.0, 1625.0, 2025.0];
    let x = DMatrix::from_fn(12, model_wl.len(), |_, _| rng.random_range(0.05..0.6));
    let y = DMatrix::from_fn(12, 2, |i, j| (i as f64 * 0.1).sin() + j as f64);
    let data = ObservationSet::full_grid(x, &y).unwrap();
    let cfg = random_config(Method::SharedCovariance(KernelKind::Se), 2, &mut rng);
    let saved = SavedModel {
        model: FittedModel::condition(cfg, data, 0).unwrap(),
        scaler: mtgp::data::TargetScaler {
            mean: vec![2.0, -1.0],
            std: vec![0.5, 3.0],
        },
        method: Some(Method::SharedCovariance(KernelKind::Se)),
        task_names: vec!["nitrogen".into(), "chlorophyll".into()],
        wavelengths: model_wl.clone(),
    };
    let model_path = dir.path().join("m.json");
    saved.save(&model_path).map_err(|e| e.to_string())?;

    let out = dir.path().join("maps");
    let (code, _, err) = run_cli(&[
        "map",
        "--model",
        model_path.to_str().unwrap(),
        "--cube",
        cube_path.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
        "--ndvi-red",
        "650",
        "--ndvi-nir",
        "800",
        "--jobs",
        "3",
    ]);
    check(
        code == 0,
        format!("map exit {code}: {}", String::from_utf8_lossy(&err)),
    )?;

    let read_grid = |name: &str| -> Vec<Option<f64>> {
        std::fs::read_to_string(out.join(name))
            .unwrap()
            .lines()
            .flat_map(|l| {
                l.split(',')
                    .map(|c| {
                        if c.is_empty() {
                            None
                        } else {
                            Some(c.parse().unwrap())
                        }
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    let mask: Vec<bool> = read_grid("mask.csv")
        .iter()
        .map(|v| *v == Some(1.0))
        .collect();
    check(
        mask == expected_mask,
        "NDVI mask differs from the hand-computed mask",
    )?;

    let keep = band_keep_mask(&wl, &DEFAULT_WATER_BANDS).unwrap();
    let mut worst: f64 = 0.0;
    for (t, name) in ["nitrogen", "chlorophyll"].iter().enumerate() {
        let grid = read_grid(&format!("{name}.csv"));
        for p in 0..w * h {
            match (expected_mask[p], grid[p]) {
                (false, None) => {}
                (true, Some(v)) => {
                    // hand preprocessing: drop water bands, interpolate linearly
                    let (kw, kv): (Vec<f64>, Vec<f64>) = wl
                        .iter()
                        .zip(&pixels[p])
                        .zip(&keep)
                        .filter(|(_, k)| **k)
                        .map(|((w, v), _)| (*w, *v as f64))
                        .unzip();
                    let spec: Vec<f64> = model_wl
                        .iter()
                        .map(|&q| {
                            let k = kw.iter().position(|&w| w >= q).unwrap();
                            if kw[k] == q {
                                kv[k]
                            } else {
                                kv[k - 1]
                                    + (kv[k] - kv[k - 1]) * (q - kw[k - 1]) / (kw[k] - kw[k - 1])
                            }
                        })
                        .collect();
                    let xq = DMatrix::from_row_slice(1, spec.len(), &spec);
                    let mean = saved.model.predict_mean(&xq, t).unwrap()[0];
                    worst = worst.max((v - saved.scaler.inverse(t, mean)).abs());
                }
                _ => return Err(format!("pixel {p} masked inconsistently in {name}")),
            }
        }
    }
    check(
        worst <= 1e-12,
        format!("map differs from predict_mean by {worst:.2e}"),
    )?;

    let grid: Vec<f64> = (0..=1700).map(|i| 350.0 + i as f64).collect();
    let removed_enum = grid
        .iter()
        .filter(|&&w| {
            DEFAULT_WATER_BANDS
                .iter()
                .any(|&(lo, hi)| w >= lo && w <= hi)
        })
        .count();
    let removed = band_keep_mask(&grid, &DEFAULT_WATER_BANDS)
        .unwrap()
        .iter()
        .filter(|k| !**k)
        .count();
    check(
        removed == removed_enum && removed == 282,
        format!("removed {removed}, enumeration {removed_enum}"),
    )?;
    Ok(format!(
        "{} of 16 pixels unmasked as computed by hand; maps match predict_mean within {worst:.1e}; {removed} water bands removed on 350-2050 nm",
        expected_mask.iter().filter(|m| **m).count()
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient suite", c1_gradients),
        ("dense oracle equivalence", c2_dense_oracle),
        ("reduction equivalences", c3_reductions),
        ("interpolation", c4_interpolation),
        ("synthetic transfer", c5_transfer),
        ("PSD property suite", c6_psd),
        ("optimizer", c7_optimizer),
        ("protocol arithmetic", c8_protocol),
        ("end-to-end determinism", c9_determinism),
        ("map pipeline", c10_map),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
