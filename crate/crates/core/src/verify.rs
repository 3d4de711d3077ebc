//! Self-checks shipped with the library: finite-difference gradient checks,
//! log-Euclidean metric axioms, the aligned-domain construction and the
//! constant-predictor counterexample.

// Negated comparisons make NaN count as a failure.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::alignment::{covariance, evaluate_penalty, AlignmentPenalty, PenaltyKind};
use crate::data::{gen_blobs, one_hot, rotated_blobs, Dataset};
use crate::error::{MecaError, Result};
use crate::linalg::DenseMatrix;
use crate::network::{
    backward, cross_entropy, entropy, forward, grad_cross_entropy_wrt_probs,
    grad_entropy_wrt_probs, Activation, MlpModel, ParamGrads,
};
use crate::spd::{dist_log_euclidean, sym_eig, SpdMatrix};
use crate::trainer::{evaluate, kl_diagnostic, train_run, Method, TrainConfig};

pub const GRAD_CHECK_SIZES: [usize; 4] = [3, 5, 4, 3];
pub const GRAD_CHECK_BATCH: usize = 6;
pub const GRAD_CHECK_SEEDS: u64 = 20;
pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-4;
/// Coordinates whose analytic gradient is at most this large are skipped.
pub const GRAD_MIN_MAGNITUDE: f64 = 1e-8;

pub const AXIOM_PAIRS: usize = 100;
pub const AXIOM_DIMS: [usize; 3] = [2, 4, 8];
pub const SCALE_TOL: f64 = 1e-9;
pub const CONGRUENCE_TOL: f64 = 1e-8;
pub const INVERSION_TOL: f64 = 1e-8;

/// One of the bundled suites.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Check {
    Gradients,
    MetricAxioms,
    AlignedDomains,
    DummyClassifier,
}

impl Check {
    pub const ALL: [Check; 4] = [
        Check::Gradients,
        Check::MetricAxioms,
        Check::AlignedDomains,
        Check::DummyClassifier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::Gradients => "gradients",
            Check::MetricAxioms => "metric-axioms",
            Check::AlignedDomains => "aligned-domains",
            Check::DummyClassifier => "dummy-classifier",
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Check {
    type Err = MecaError;

    fn from_str(s: &str) -> Result<Self> {
        Check::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Check::ALL.iter().map(|c| c.name()).collect();
                MecaError::ConfigInvalid(format!("unknown check {s:?}; expected one of {names:?}"))
            })
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    /// Test hook: perturbs one analytic gradient coordinate so the gradient
    /// suite must fail.
    pub corrupt_gradient: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub check: Check,
    pub passed: bool,
    pub detail: String,
}

pub fn run_check(check: Check, opts: &VerifyOptions) -> CheckReport {
    let outcome = match check {
        Check::Gradients => {
            gradient_suite(GRAD_CHECK_SEEDS, opts).map(|s| (s.passed(), s.to_string()))
        }
        Check::MetricAxioms => {
            metric_axiom_suite(AXIOM_PAIRS, 0).map(|s| (s.passed(), s.to_string()))
        }
        Check::AlignedDomains => aligned_domain_check(0).map(|s| (s.passed(), s.to_string())),
        Check::DummyClassifier => dummy_classifier_check(0).map(|s| (s.passed(), s.to_string())),
    };
    match outcome {
        Ok((passed, detail)) => CheckReport {
            check,
            passed,
            detail,
        },
        Err(e) => CheckReport {
            check,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

// ---------------------------------------------------------------------------
// Gradients

/// Loss functions covered by the gradient suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradLoss {
    CrossEntropy,
    Entropy,
    EuclideanPenalty,
    LogEuclideanPenalty,
}

impl GradLoss {
    pub const ALL: [GradLoss; 4] = [
        GradLoss::CrossEntropy,
        GradLoss::Entropy,
        GradLoss::EuclideanPenalty,
        GradLoss::LogEuclideanPenalty,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradLoss::CrossEntropy => "cross_entropy",
            GradLoss::Entropy => "entropy",
            GradLoss::EuclideanPenalty => "dist_euclidean",
            GradLoss::LogEuclideanPenalty => "dist_log_euclidean",
        }
    }
}

/// A random model and batch pair for one gradient-check case.
#[derive(Clone, Debug)]
pub struct GradCase {
    pub model: MlpModel,
    pub xs: DenseMatrix,
    pub zs: DenseMatrix,
    pub xt: DenseMatrix,
}

impl GradCase {
    pub fn random(sizes: &[usize], n: usize, seed: u64) -> Result<Self> {
        let model = MlpModel::init(sizes, Activation::Tanh, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let d = sizes[0];
        let k = *sizes.last().unwrap();
        let mut normal = |shift: f64, scale: f64| -> DenseMatrix {
            let data = (0..d * n)
                .map(|_| shift + scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            DenseMatrix::new(d, n, data).expect("finite samples")
        };
        let xs = normal(0.0, 1.0);
        let xt = normal(0.5, 1.5);
        let classes: Vec<usize> = (0..n).map(|i| i % k).collect();
        let zs = one_hot(&classes, k)?;
        Ok(Self { model, xs, zs, xt })
    }

    /// Loss value of `model` on this case.
    pub fn loss(&self, model: &MlpModel, which: GradLoss) -> Result<f64> {
        let layer = model.penultimate_index();
        match which {
            GradLoss::CrossEntropy => {
                cross_entropy(&forward(model, &self.xs, layer)?.probs, &self.zs)
            }
            GradLoss::Entropy => entropy(&forward(model, &self.xt, layer)?.probs),
            GradLoss::EuclideanPenalty | GradLoss::LogEuclideanPenalty => {
                let ts = forward(model, &self.xs, layer)?;
                let tt = forward(model, &self.xt, layer)?;
                Ok(
                    evaluate_penalty(ts.feature_acts(), tt.feature_acts(), &penalty_for(which)?)?
                        .value,
                )
            }
        }
    }

    /// Analytic gradient of [`GradCase::loss`].
    pub fn grad(&self, model: &MlpModel, which: GradLoss) -> Result<ParamGrads> {
        let layer = model.penultimate_index();
        match which {
            GradLoss::CrossEntropy => {
                let ts = forward(model, &self.xs, layer)?;
                let g = grad_cross_entropy_wrt_probs(&ts.probs, &self.zs)?;
                backward(model, &ts, Some(&g), None)
            }
            GradLoss::Entropy => {
                let tt = forward(model, &self.xt, layer)?;
                let g = grad_entropy_wrt_probs(&tt.probs)?;
                backward(model, &tt, Some(&g), None)
            }
            GradLoss::EuclideanPenalty | GradLoss::LogEuclideanPenalty => {
                let ts = forward(model, &self.xs, layer)?;
                let tt = forward(model, &self.xt, layer)?;
                let pen =
                    evaluate_penalty(ts.feature_acts(), tt.feature_acts(), &penalty_for(which)?)?;
                let mut g = backward(model, &ts, None, Some(&pen.grad_source))?;
                g.add_assign(&backward(model, &tt, None, Some(&pen.grad_target))?);
                Ok(g)
            }
        }
    }
}

fn penalty_for(which: GradLoss) -> Result<AlignmentPenalty> {
    let kind = match which {
        GradLoss::EuclideanPenalty => PenaltyKind::Euclidean,
        _ => PenaltyKind::LogEuclidean,
    };
    AlignmentPenalty::new(kind, 1.0)
}

/// Central finite differences of `f` at `params`.
pub fn finite_difference_grad(
    params: &[f64],
    step: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut p = params.to_vec();
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let up = f(&p)?;
        p[i] = orig - step;
        let down = f(&p)?;
        p[i] = orig;
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// `|a − b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckSummary {
    pub cases: usize,
    pub coordinates_checked: usize,
    pub max_rel_error: f64,
    /// `(seed, loss name, coordinate, relative error)` of every failure.
    pub failures: Vec<(u64, &'static str, usize, f64)>,
}

impl GradCheckSummary {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.coordinates_checked > 0
    }
}

impl fmt::Display for GradCheckSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} cases, {} coordinates, max rel error {:.3e} (tol {:e}), {} failures",
            self.cases,
            self.coordinates_checked,
            self.max_rel_error,
            GRAD_REL_TOL,
            self.failures.len()
        )
    }
}

/// Compares analytic and finite-difference gradients of every [`GradLoss`]
/// on `seeds` random cases.
pub fn gradient_suite(seeds: u64, opts: &VerifyOptions) -> Result<GradCheckSummary> {
    let mut summary = GradCheckSummary {
        cases: 0,
        coordinates_checked: 0,
        max_rel_error: 0.0,
        failures: Vec::new(),
    };
    for seed in 0..seeds {
        let case = GradCase::random(&GRAD_CHECK_SIZES, GRAD_CHECK_BATCH, seed)?;
        for which in GradLoss::ALL {
            let mut analytic = case.grad(&case.model, which)?.flatten();
            if opts.corrupt_gradient && seed == 0 {
                analytic[0] = analytic[0] * 1.5 + 1e-3;
            }
            let mut probe = case.model.clone();
            let numeric = finite_difference_grad(&case.model.params_flat(), FD_STEP, |p| {
                probe.set_params_flat(p)?;
                case.loss(&probe, which)
            })?;
            summary.cases += 1;
            for (i, (&a, &fd)) in analytic.iter().zip(&numeric).enumerate() {
                if a.abs() <= GRAD_MIN_MAGNITUDE {
                    continue;
                }
                let err = relative_error(a, fd);
                summary.coordinates_checked += 1;
                summary.max_rel_error = summary.max_rel_error.max(err);
                if !(err < GRAD_REL_TOL) {
                    summary.failures.push((seed, which.name(), i, err));
                }
            }
        }
    }
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Metric axioms

/// `B Bᵀ + 0.1 I` with standard normal `B`.
pub fn random_spd(d: usize, rng: &mut impl Rng) -> Result<SpdMatrix> {
    let b = random_matrix(d, d, rng);
    SpdMatrix::new(
        &b.matmul_t(&b)
            .add(&DenseMatrix::identity(d).scale(0.1))
            .symmetrized(),
    )
}

/// Orthogonal matrix from the eigenvectors of a random symmetric matrix.
pub fn random_orthogonal(d: usize, rng: &mut impl Rng) -> Result<DenseMatrix> {
    let b = random_matrix(d, d, rng);
    Ok(sym_eig(&b.add(&b.transpose()))?.1)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseMatrix {
    let data = (0..rows * cols)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    DenseMatrix::new(rows, cols, data).expect("finite samples")
}

#[derive(Clone, Debug, PartialEq)]
pub struct AxiomSummary {
    pub pairs: usize,
    pub max_scale_err: f64,
    pub max_congruence_err: f64,
    pub max_inversion_err: f64,
    pub failures: Vec<String>,
}

impl AxiomSummary {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.pairs > 0
    }
}

impl fmt::Display for AxiomSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} pairs, max rel err scale {:.2e} congruence {:.2e} inversion {:.2e}, {} failures",
            self.pairs,
            self.max_scale_err,
            self.max_congruence_err,
            self.max_inversion_err,
            self.failures.len()
        )?;
        if let Some(first) = self.failures.first() {
            write!(f, " (first: {first})")?;
        }
        Ok(())
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

/// Axioms and invariances of `dist_log_euclidean` on `pairs` random SPD
/// pairs for each dimension in [`AXIOM_DIMS`].
pub fn metric_axiom_suite(pairs: usize, seed: u64) -> Result<AxiomSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = AxiomSummary {
        pairs: 0,
        max_scale_err: 0.0,
        max_congruence_err: 0.0,
        max_inversion_err: 0.0,
        failures: Vec::new(),
    };
    for &d in &AXIOM_DIMS {
        for i in 0..pairs {
            let c1 = random_spd(d, &mut rng)?;
            let c2 = random_spd(d, &mut rng)?;
            let q = random_orthogonal(d, &mut rng)?;
            let dist = dist_log_euclidean(&c1, &c2)?;
            let tag = format!("d={d} pair {i}");
            s.pairs += 1;

            if !(dist > 0.0) {
                s.failures
                    .push(format!("{tag}: distance {dist} not positive"));
            }
            if dist_log_euclidean(&c2, &c1)? != dist {
                s.failures.push(format!("{tag}: asymmetric"));
            }
            if dist_log_euclidean(&c1, &c1)? != 0.0 {
                s.failures.push(format!("{tag}: d(C, C) != 0"));
            }
            for k in [0.1, 1.0, 10.0] {
                let e = rel(dist_log_euclidean(&c1.scaled(k)?, &c2.scaled(k)?)?, dist);
                s.max_scale_err = s.max_scale_err.max(e);
                if !(e <= SCALE_TOL) {
                    s.failures.push(format!("{tag}: scale {k} error {e:e}"));
                }
            }
            let e = rel(
                dist_log_euclidean(&c1.congruence(&q)?, &c2.congruence(&q)?)?,
                dist,
            );
            s.max_congruence_err = s.max_congruence_err.max(e);
            if !(e <= CONGRUENCE_TOL) {
                s.failures.push(format!("{tag}: congruence error {e:e}"));
            }
            let e = rel(dist_log_euclidean(&c1.inverse(), &c2.inverse())?, dist);
            s.max_inversion_err = s.max_inversion_err.max(e);
            if !(e <= INVERSION_TOL) {
                s.failures.push(format!("{tag}: inversion error {e:e}"));
            }
        }
    }
    Ok(s)
}

// ---------------------------------------------------------------------------
// Aligned domains

/// Classes, samples per class and input dimension of the aligned-domain
/// construction.
pub const ALIGNED_CLASSES: usize = 3;
pub const ALIGNED_PER_CLASS: usize = 40;
pub const ALIGNED_DIM: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct AlignedSummary {
    pub n: usize,
    pub k: usize,
    pub epochs_run: usize,
    pub h_source: f64,
    pub e_target: f64,
    pub pen_value: f64,
    pub h_decreased: bool,
}

impl AlignedSummary {
    pub fn h_bound(&self) -> f64 {
        0.01 * self.n as f64
    }

    pub fn e_bound(&self) -> f64 {
        0.05 * self.n as f64 * (self.k as f64).ln()
    }

    pub fn passed(&self) -> bool {
        self.h_source < self.h_bound()
            && self.e_target < self.e_bound()
            && self.pen_value < 1e-3
            && self.h_decreased
    }
}

impl fmt::Display for AlignedSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "n={} K={} epochs={}: h_source {:.4} (< {:.3}), e_target {:.4} (< {:.3}), pen {:.2e} (< 1e-3)",
            self.n,
            self.k,
            self.epochs_run,
            self.h_source,
            self.h_bound(),
            self.e_target,
            self.e_bound(),
            self.pen_value
        )
    }
}

/// Trains `meca` with the target set to an unlabeled copy of the source and
/// reads off the final epoch.
pub fn aligned_domain_check(seed: u64) -> Result<AlignedSummary> {
    let source = gen_blobs(ALIGNED_CLASSES, ALIGNED_PER_CLASS, ALIGNED_DIM, seed)?;
    let target = source.without_labels();
    let model = MlpModel::init(
        &[ALIGNED_DIM, 16, 8, ALIGNED_CLASSES],
        Activation::Tanh,
        seed,
    )?;
    let config = TrainConfig {
        method: Method::MecaGeodesic,
        lambda_or_gamma: 1.0,
        epochs: 300,
        batch_size: 32,
        learning_rate: 0.01,
        seed,
        ..TrainConfig::default()
    };
    let run = train_run(model, &source, &target, &config)?;
    if let Some(err) = run.divergence_error() {
        return Err(err);
    }
    let first = run.metrics.first().expect("at least one epoch");
    let last = run.metrics.last().expect("at least one epoch");
    Ok(AlignedSummary {
        n: source.len(),
        k: ALIGNED_CLASSES,
        epochs_run: run.metrics.len(),
        h_source: last.h_source,
        e_target: last.e_target,
        pen_value: last.pen_value,
        h_decreased: last.h_source < first.h_source,
    })
}

// ---------------------------------------------------------------------------
// Constant predictor

#[derive(Clone, Debug, PartialEq)]
pub struct DummySummary {
    pub e_target: f64,
    pub accuracy: f64,
    pub kl_raw: f64,
    pub kl_through_model: f64,
    pub pen_raw: f64,
    pub pen_through_model: f64,
}

impl DummySummary {
    pub fn passed(&self) -> bool {
        self.e_target == 0.0
            && self.kl_raw == self.kl_through_model
            && self.pen_raw == self.pen_through_model
            && self.kl_raw > 0.0
            && self.pen_raw > 0.0
    }
}

impl fmt::Display for DummySummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "e_target {} with accuracy {:.3}; raw-domain KL {:.4} and log-Euclidean distance {:.4e} unchanged",
            self.e_target, self.accuracy, self.kl_raw, self.pen_raw
        )
    }
}

/// A network whose output is class `class` with probability exactly one for
/// every input.
pub fn constant_predictor(input_dim: usize, num_classes: usize, class: usize) -> Result<MlpModel> {
    if class >= num_classes {
        return Err(MecaError::BadParams(format!(
            "class {class} >= {num_classes}"
        )));
    }
    let mut bias = vec![0.0; num_classes];
    bias[class] = 1e3;
    MlpModel::from_parameters(
        vec![DenseMatrix::zeros(num_classes, input_dim)],
        vec![bias],
        Activation::Relu,
    )
}

/// Zero target entropy without any change to the domain discrepancy.
pub fn dummy_classifier_check(seed: u64) -> Result<DummySummary> {
    let (source, target) = rotated_blobs(seed)?;
    let k = source.num_classes().expect("labeled source");
    let model = constant_predictor(source.dim(), k, 0)?;

    let raw_distance = |s: &Dataset, t: &Dataset| -> Result<(f64, f64)> {
        let kl = kl_diagnostic(s.inputs(), t.inputs())?;
        let cs = covariance(s.inputs(), crate::spd::DEFAULT_JITTER_REL)?;
        let ct = covariance(t.inputs(), crate::spd::DEFAULT_JITTER_REL)?;
        Ok((kl, dist_log_euclidean(&cs, &ct)?))
    };
    let (kl_raw, pen_raw) = raw_distance(&source, &target)?;

    let ts = forward(&model, source.inputs(), 0)?;
    let tt = forward(&model, target.inputs(), 0)?;
    let kl_through_model = kl_diagnostic(ts.feature_acts(), tt.feature_acts())?;
    let penalty = AlignmentPenalty::new(PenaltyKind::LogEuclidean, 1.0)?;
    let pen_through_model =
        evaluate_penalty(ts.feature_acts(), tt.feature_acts(), &penalty)?.distance;

    let eval = evaluate(&model, &target)?;
    Ok(DummySummary {
        e_target: entropy(&tt.probs)?,
        accuracy: eval.accuracy,
        kl_raw,
        kl_through_model,
        pen_raw,
        pen_through_model,
    })
}
