//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits with a
//! non-zero status if any criterion fails.

// Negated comparisons make NaN count as a failure.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::Path;
use std::time::{Duration, Instant};

use meca::alignment::{covariance, evaluate_penalty, AlignmentPenalty, PenaltyKind};
use meca::data::{
    gen_blobs, parse_idx_images, read_csv, read_idx, rotated_blobs, write_csv, Dataset,
};
use meca::error::MecaError;
use meca::linalg::DenseMatrix;
use meca::network::{
    backward, cross_entropy, entropy, forward, grad_cross_entropy_wrt_probs,
    grad_entropy_wrt_probs, Activation, MlpModel,
};
use meca::selection::{
    final_readout, selection_gap, sweep, write_summary_csv, SweepOptions, SweepResult,
    DEFAULT_LAMBDA_GRID,
};
use meca::spd::{dist_log_euclidean, sym_eig, SpdMatrix, DEFAULT_JITTER_REL};
use meca::trainer::{
    kl_diagnostic, train_run, write_metrics_csv, EpochMetrics, Method, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Training protocol used on the rotated-blobs benchmark.
const BENCH_HIDDEN: [usize; 2] = [64, 64];
const BENCH_LR: f64 = 5e-4;
const BENCH_EPOCHS: usize = 60;
const BENCH_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn bench_model(seed: u64) -> MlpModel {
    let mut sizes = vec![16];
    sizes.extend(BENCH_HIDDEN);
    sizes.push(4);
    MlpModel::init(&sizes, Activation::Relu, seed).unwrap()
}

fn bench_config(method: Method, weight: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        method,
        lambda_or_gamma: weight,
        epochs: BENCH_EPOCHS,
        learning_rate: BENCH_LR,
        seed,
        ..TrainConfig::default()
    }
}

fn bench_run(method: Method, weight: f64, seed: u64) -> Vec<EpochMetrics> {
    let (source, target) = rotated_blobs(seed).unwrap();
    let run = train_run(
        bench_model(seed),
        &source,
        &target,
        &bench_config(method, weight, seed),
    )
    .unwrap();
    assert!(!run.diverged(), "{method} λ={weight} seed {seed} diverged");
    run.metrics
}

fn bench_sweep(method: Method, seed: u64) -> SweepResult {
    let (source, target) = rotated_blobs(seed).unwrap();
    sweep(
        &bench_config(method, 0.0, seed),
        &DEFAULT_LAMBDA_GRID,
        &bench_model(seed),
        &source,
        &target,
        &SweepOptions::default(),
    )
    .unwrap()
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let data = (0..rows * cols)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    DenseMatrix::new(rows, cols, data).unwrap()
}

// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
enum Loss {
    CrossEntropy,
    Entropy,
    Euclidean,
    LogEuclidean,
}

struct Case {
    model: MlpModel,
    xs: DenseMatrix,
    zs: DenseMatrix,
    xt: DenseMatrix,
}

fn loss_value(model: &MlpModel, case: &Case, loss: Loss) -> f64 {
    let layer = model.penultimate_index();
    let ts = forward(model, &case.xs, layer).unwrap();
    let tt = forward(model, &case.xt, layer).unwrap();
    match loss {
        Loss::CrossEntropy => cross_entropy(&ts.probs, &case.zs).unwrap(),
        Loss::Entropy => entropy(&tt.probs).unwrap(),
        Loss::Euclidean | Loss::LogEuclidean => {
            let cs = covariance(ts.feature_acts(), DEFAULT_JITTER_REL).unwrap();
            let ct = covariance(tt.feature_acts(), DEFAULT_JITTER_REL).unwrap();
            match loss {
                Loss::Euclidean => meca::spd::dist_euclidean(&cs, &ct).unwrap(),
                _ => dist_log_euclidean(&cs, &ct).unwrap(),
            }
        }
    }
}

fn loss_grad(model: &MlpModel, case: &Case, loss: Loss) -> Vec<f64> {
    let layer = model.penultimate_index();
    let ts = forward(model, &case.xs, layer).unwrap();
    let tt = forward(model, &case.xt, layer).unwrap();
    let g = match loss {
        Loss::CrossEntropy => {
            let gp = grad_cross_entropy_wrt_probs(&ts.probs, &case.zs).unwrap();
            backward(model, &ts, Some(&gp), None).unwrap()
        }
        Loss::Entropy => {
            let gp = grad_entropy_wrt_probs(&tt.probs).unwrap();
            backward(model, &tt, Some(&gp), None).unwrap()
        }
        Loss::Euclidean | Loss::LogEuclidean => {
            let kind = match loss {
                Loss::Euclidean => PenaltyKind::Euclidean,
                _ => PenaltyKind::LogEuclidean,
            };
            let pen = evaluate_penalty(
                ts.feature_acts(),
                tt.feature_acts(),
                &AlignmentPenalty::new(kind, 1.0).unwrap(),
            )
            .unwrap();
            let mut g = backward(model, &ts, None, Some(&pen.grad_source)).unwrap();
            g.add_assign(&backward(model, &tt, None, Some(&pen.grad_target)).unwrap());
            g
        }
    };
    g.flatten()
}

fn criterion_1() -> Outcome {
    let step = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut failures = Vec::new();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let model = MlpModel::init(&[3, 5, 4, 3], Activation::Tanh, seed).unwrap();
        let xs = normal_matrix(3, 6, &mut rng);
        let xt = normal_matrix(3, 6, &mut rng).map(|v| 1.4 * v + 0.3);
        let classes: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
        let mut zs = DenseMatrix::zeros(6, 3);
        for (i, &c) in classes.iter().enumerate() {
            zs.set(i, c, 1.0);
        }
        let case = Case { model, xs, zs, xt };
        for loss in [
            Loss::CrossEntropy,
            Loss::Entropy,
            Loss::Euclidean,
            Loss::LogEuclidean,
        ] {
            let analytic = loss_grad(&case.model, &case, loss);
            let theta = case.model.params_flat();
            let mut probe = case.model.clone();
            for (i, &a) in analytic.iter().enumerate() {
                let mut p = theta.clone();
                p[i] = theta[i] + step;
                probe.set_params_flat(&p).unwrap();
                let up = loss_value(&probe, &case, loss);
                p[i] = theta[i] - step;
                probe.set_params_flat(&p).unwrap();
                let down = loss_value(&probe, &case, loss);
                let fd = (up - down) / (2.0 * step);
                if a.abs() <= 1e-8 {
                    continue;
                }
                checked += 1;
                let err = (a - fd).abs() / a.abs().max(fd.abs());
                worst = worst.max(err);
                if !(err < 1e-4) {
                    failures.push(format!("seed {seed} {loss:?} coord {i}: {a:e} vs {fd:e}"));
                }
            }
        }
    }
    outcome(
        failures.is_empty() && checked > 0,
        format!(
            "{checked} coordinates over 20 seeds, max relative error {worst:.3e} (< 1e-4), {} failures{}",
            failures.len(),
            failures.first().map(|f| format!(" e.g. {f}")).unwrap_or_default()
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut failures = Vec::new();
    let (mut es, mut eq, mut ei) = (0.0f64, 0.0f64, 0.0f64);
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    let random_spd = |d: usize, rng: &mut ChaCha8Rng| {
        let b = normal_matrix(d, d, rng);
        SpdMatrix::new(
            &b.matmul_t(&b)
                .add(&DenseMatrix::identity(d).scale(0.1))
                .symmetrized(),
        )
        .unwrap()
    };
    let mut pairs = 0;
    for d in [2usize, 4, 8] {
        for _ in 0..100 {
            let c1 = random_spd(d, &mut rng);
            let c2 = random_spd(d, &mut rng);
            let m = normal_matrix(d, d, &mut rng);
            let q = sym_eig(&m.add(&m.transpose())).unwrap().1;
            let base = dist_log_euclidean(&c1, &c2).unwrap();
            pairs += 1;
            if !(base > 0.0) {
                failures.push(format!("d={d}: non-positive distance {base}"));
            }
            if dist_log_euclidean(&c2, &c1).unwrap() != base {
                failures.push(format!("d={d}: asymmetric"));
            }
            if dist_log_euclidean(&c1, &c1).unwrap() != 0.0 {
                failures.push(format!("d={d}: d(C, C) != 0"));
            }
            for s in [0.1, 1.0, 10.0] {
                let e = rel(
                    dist_log_euclidean(&c1.scaled(s).unwrap(), &c2.scaled(s).unwrap()).unwrap(),
                    base,
                );
                es = es.max(e);
                if !(e <= 1e-9) {
                    failures.push(format!("d={d}: scale {s} error {e:e}"));
                }
            }
            let e = rel(
                dist_log_euclidean(&c1.congruence(&q).unwrap(), &c2.congruence(&q).unwrap())
                    .unwrap(),
                base,
            );
            eq = eq.max(e);
            if !(e <= 1e-8) {
                failures.push(format!("d={d}: congruence error {e:e}"));
            }
            let e = rel(
                dist_log_euclidean(&c1.inverse(), &c2.inverse()).unwrap(),
                base,
            );
            ei = ei.max(e);
            if !(e <= 1e-8) {
                failures.push(format!("d={d}: inversion error {e:e}"));
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "{pairs} pairs; max rel error scale {es:.1e} (<= 1e-9), congruence {eq:.1e} (<= 1e-8), inversion {ei:.1e} (<= 1e-8); {} failures",
            failures.len()
        ),
    )
}

fn criterion_3() -> Outcome {
    let k = 3;
    let source = gen_blobs(k, 40, 2, 0).unwrap();
    let target = source.without_labels();
    let n = source.len() as f64;
    let model = MlpModel::init(&[2, 16, 8, k], Activation::Tanh, 0).unwrap();
    let config = TrainConfig {
        method: Method::MecaGeodesic,
        lambda_or_gamma: 1.0,
        epochs: 300,
        batch_size: 32,
        learning_rate: 0.01,
        ..TrainConfig::default()
    };
    let run = train_run(model, &source, &target, &config).unwrap();
    let Some(at) = run.metrics.iter().position(|m| m.h_source < 0.01 * n) else {
        return outcome(false, format!("h_source never fell below {:.2}", 0.01 * n));
    };
    let m = &run.metrics[at];
    let e_bound = 0.05 * n * (k as f64).ln();
    outcome(
        !run.diverged() && m.e_target < e_bound && m.pen_value < 1e-3,
        format!(
            "h_source {:.4} < {:.2} first at epoch {}: e_target {:.4} (< {e_bound:.3}), pen_value {:.2e} (< 1e-3)",
            m.h_source,
            0.01 * n,
            m.epoch,
            m.e_target,
            m.pen_value
        ),
    )
}

fn criterion_4() -> Outcome {
    let (source, target) = rotated_blobs(0).unwrap();
    let mut bias = vec![0.0; 4];
    bias[2] = 1e3;
    let dummy = MlpModel::from_parameters(
        vec![DenseMatrix::zeros(4, 16)],
        vec![bias],
        Activation::Relu,
    )
    .unwrap();
    let trained = {
        let run = train_run(
            bench_model(0),
            &source,
            &target,
            &bench_config(Method::SourceOnly, 0.0, 0),
        )
        .unwrap();
        run.model
    };
    let raw = |s: &Dataset, t: &Dataset| {
        let kl = kl_diagnostic(s.inputs(), t.inputs()).unwrap();
        let cs = covariance(s.inputs(), DEFAULT_JITTER_REL).unwrap();
        let ct = covariance(t.inputs(), DEFAULT_JITTER_REL).unwrap();
        (kl, dist_log_euclidean(&cs, &ct).unwrap())
    };
    let before = raw(&source, &target);
    let dummy_t = forward(&dummy, target.inputs(), 0).unwrap();
    let dummy_s = forward(&dummy, source.inputs(), 0).unwrap();
    let after = (
        kl_diagnostic(dummy_s.feature_acts(), dummy_t.feature_acts()).unwrap(),
        evaluate_penalty(
            dummy_s.feature_acts(),
            dummy_t.feature_acts(),
            &AlignmentPenalty::new(PenaltyKind::LogEuclidean, 1.0).unwrap(),
        )
        .unwrap()
        .distance,
    );
    let e_dummy = entropy(&dummy_t.probs).unwrap();
    let e_trained = entropy(&forward(&trained, target.inputs(), 0).unwrap().probs).unwrap();
    outcome(
        e_dummy == 0.0 && before == after && before.0 > 0.0 && before.1 > 0.0,
        format!(
            "constant predictor e_target = {e_dummy} (trained model {e_trained:.3}); raw KL {:.4} and log-Euclidean distance {:.4e} unchanged",
            before.0, before.1
        ),
    )
}

fn criterion_5() -> Outcome {
    let src = bench_run(Method::SourceOnly, 0.0, 0);
    let meca = bench_run(Method::MecaGeodesic, 0.1, 0);
    let (e_src, e_meca) = (src.last().unwrap().e_target, meca.last().unwrap().e_target);
    let e: Vec<f64> = meca.iter().map(|m| m.e_target).collect();
    // e[t] is the entropy after epoch t + 1.
    let violations: Vec<usize> = (20..e.len().saturating_sub(10))
        .filter(|&t| e[t + 10] > 1.05 * e[t])
        .map(|t| t + 1)
        .collect();
    outcome(
        e_meca < e_src && violations.is_empty(),
        format!(
            "final e_target meca {e_meca:.6} vs source_only {e_src:.6}; 10-epoch windows after epoch 20 rising > 5%: {violations:?}"
        ),
    )
}

fn criterion_6(meca: &SweepResult) -> Outcome {
    let coral = bench_sweep(Method::CoralEuclidean, 0);
    let gap = selection_gap(meca).unwrap();
    let coral_gap = selection_gap(&coral)
        .map(|g| format!("{g:.4} (selected λ {})", coral.selected_lambda))
        .unwrap_or_else(|e| format!("n/a ({e})"));
    outcome(
        gap <= 0.02,
        format!(
            "meca gap {gap:.4} (<= 0.02) at selected λ {}; euclidean gap {coral_gap}, {} euclidean runs diverged",
            meca.selected_lambda,
            coral.failures.len()
        ),
    )
}

fn criterion_7(seed0_sweep: SweepResult) -> Outcome {
    let mut src_acc = Vec::new();
    let mut meca_acc = Vec::new();
    let mut rows = Vec::new();
    let mut sweeps = vec![seed0_sweep];
    for &seed in &BENCH_SEEDS[1..] {
        sweeps.push(bench_sweep(Method::MecaGeodesic, seed));
    }
    for (&seed, result) in BENCH_SEEDS.iter().zip(&sweeps) {
        let s = final_readout(&bench_run(Method::SourceOnly, 0.0, seed))
            .unwrap()
            .1
            .unwrap();
        let rec = result
            .records
            .iter()
            .find(|r| r.lambda == result.selected_lambda)
            .unwrap();
        let m = rec.final_target_acc.unwrap();
        rows.push(format!("seed {seed}: {s:.4} -> {m:.4} (λ {})", rec.lambda));
        src_acc.push(s);
        meca_acc.push(m);
    }
    let gain = median(meca_acc.clone()) - median(src_acc.clone());
    let paired = median(meca_acc.iter().zip(&src_acc).map(|(m, s)| m - s).collect());
    outcome(
        gain >= 0.05,
        format!(
            "median target accuracy meca {:.4} vs source_only {:.4}: gain {gain:+.4} (>= 0.05); median paired gain {paired:+.4}; {}",
            median(meca_acc),
            median(src_acc),
            rows.join(", ")
        ),
    )
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (source, target) = rotated_blobs(3).unwrap();
    let model = MlpModel::init(&[16, 16, 4], Activation::Relu, 3).unwrap();
    let config = TrainConfig {
        epochs: 5,
        learning_rate: BENCH_LR,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut train_files = Vec::new();
    for i in 0..2 {
        let p = dir.path().join(format!("train{i}.csv"));
        let run = train_run(model.clone(), &source, &target, &config).unwrap();
        write_metrics_csv(&run.metrics, &p).unwrap();
        train_files.push(std::fs::read(p).unwrap());
    }
    let mut sweep_files = Vec::new();
    for (i, jobs) in [1usize, 1, 8].into_iter().enumerate() {
        let out = dir.path().join(format!("sweep{i}"));
        let result = sweep(
            &config,
            &DEFAULT_LAMBDA_GRID,
            &model,
            &source,
            &target,
            &SweepOptions {
                jobs,
                out_dir: Some(out.clone()),
            },
        )
        .unwrap();
        write_summary_csv(&result, &out.join("summary.csv")).unwrap();
        let mut files = vec![std::fs::read(out.join("summary.csv")).unwrap()];
        for l in DEFAULT_LAMBDA_GRID {
            files.push(std::fs::read(out.join(format!("metrics_lambda_{l}.csv"))).unwrap());
        }
        sweep_files.push(files);
    }
    let train_same = train_files[0] == train_files[1];
    let sweep_same = sweep_files[0] == sweep_files[1] && sweep_files[0] == sweep_files[2];
    outcome(
        train_same && sweep_same,
        format!("repeated train CSV identical: {train_same}; sweep CSVs identical across repeats and --jobs 1/8: {sweep_same}"),
    )
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (source, _) = rotated_blobs(4).unwrap();
    let path = dir.path().join("s.csv");
    write_csv(&source, &path).unwrap();
    let back = read_csv(&path).unwrap().with_num_classes(4).unwrap();
    let max_err = back
        .inputs()
        .as_slice()
        .iter()
        .zip(source.inputs().as_slice())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let csv_ok = max_err <= 1e-15 && back.labels() == source.labels();

    let header = |magic: u32, dims: &[u32]| {
        let mut b = magic.to_be_bytes().to_vec();
        for d in dims {
            b.extend(d.to_be_bytes());
        }
        b
    };
    let mut images = header(0x0000_0803, &[2, 28, 28]);
    images.extend((0..1568).map(|i| (i % 256) as u8));
    let mut labels = header(0x0000_0801, &[2]);
    labels.extend([7u8, 2]);
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
    std::fs::write(&ip, &images).unwrap();
    std::fs::write(&lp, &labels).unwrap();
    let idx_ok = match read_idx(&ip, Some(&lp)) {
        Ok(ds) => {
            ds.len() == 2
                && ds.dim() == 784
                && ds.inputs().get(255, 0) == 1.0
                && ds.class_indices() == Some(vec![7, 2])
        }
        Err(_) => false,
    };
    let mut bad = images.clone();
    bad[2] = 0x09;
    let magic_rejected = matches!(
        parse_idx_images(&bad, Path::new("img")),
        Err(MecaError::BadMagic { .. })
    );
    let truncated_rejected = matches!(
        parse_idx_images(&images[..images.len() - 1], Path::new("img")),
        Err(MecaError::TruncatedFile { .. })
    );
    outcome(
        csv_ok && idx_ok && magic_rejected && truncated_rejected,
        format!(
            "CSV max error {max_err:e} (<= 1e-15); IDX fixture parsed: {idx_ok}; bad magic rejected: {magic_rejected}; truncated rejected: {truncated_rejected}"
        ),
    )
}

fn report(id: u32, name: &str, limit: Option<Duration>, run: impl FnOnce() -> Outcome) -> bool {
    let started = Instant::now();
    let out = run();
    let elapsed = started.elapsed();
    let in_time = limit.is_none_or(|l| elapsed <= l);
    let passed = out.passed && in_time;
    let budget = limit
        .map(|l| format!(", budget {}s", l.as_secs()))
        .unwrap_or_default();
    println!(
        "criterion {id} {} {name}: {} [{:.1}s{budget}]",
        if passed { "PASS" } else { "FAIL" },
        out.detail,
        elapsed.as_secs_f64()
    );
    passed
}

fn main() {
    let secs = Duration::from_secs;
    let mut all = vec![
        report(1, "gradient fidelity", Some(secs(60)), criterion_1),
        report(
            2,
            "log-Euclidean metric axioms",
            Some(secs(10)),
            criterion_2,
        ),
        report(
            3,
            "aligned-domain construction",
            Some(secs(120)),
            criterion_3,
        ),
        report(4, "constant-predictor counterexample", None, criterion_4),
        report(
            5,
            "entropy descent path at λ = 0.1",
            Some(secs(300)),
            criterion_5,
        ),
    ];

    let started = Instant::now();
    let seed0 = bench_sweep(Method::MecaGeodesic, 0);
    let seed0_time = started.elapsed();
    all.push(report(
        6,
        "entropy-selected λ is near-optimal",
        None,
        || criterion_6(&seed0),
    ));
    all.push(report(
        7,
        "adaptation benefit over source_only",
        Some(secs(600) - seed0_time),
        || criterion_7(seed0),
    ));
    all.push(report(8, "determinism", None, criterion_8));
    all.push(report(9, "format round-trips", None, criterion_9));

    let passed = all.iter().filter(|&&p| p).count();
    println!("{passed}/{} criteria passed", all.len());
    if passed != all.len() {
        std::process::exit(1);
    }
}
