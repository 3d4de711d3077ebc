//! Training loop for a single (method, weight) configuration.
//!
//! Each epoch shuffles both domains, pairs equal-size source and target
//! mini-batches (the target permutation cycles when it runs out) and takes
//! one SGD-with-momentum step per pair. Target labels, if present, are read
//! only by the accuracy metric.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{
    covariance_with, evaluate_penalty, penalty_distance, AlignmentPenalty, PenaltyKind,
};
use crate::data::{format_f64, Dataset};
use crate::error::{MecaError, Result};
use crate::linalg::DenseMatrix;
use crate::network::{
    argmax, backward, cross_entropy, entropy, forward, grad_cross_entropy_wrt_probs,
    grad_entropy_wrt_probs, label_indices, MlpModel, ParamGrads,
};
use crate::spd::DEFAULT_JITTER_REL;

/// Floor applied to per-feature variances in [`kl_diagnostic`].
pub const KL_VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// Source cross-entropy only.
    SourceOnly,
    /// Cross-entropy plus `γ ×` target entropy.
    EntropyReg,
    /// Cross-entropy plus `λ ×` Euclidean covariance distance.
    CoralEuclidean,
    /// Cross-entropy plus `λ ×` log-Euclidean covariance distance.
    MecaGeodesic,
}

impl Method {
    pub fn penalty_kind(self) -> PenaltyKind {
        match self {
            Method::CoralEuclidean => PenaltyKind::Euclidean,
            Method::MecaGeodesic => PenaltyKind::LogEuclidean,
            Method::SourceOnly | Method::EntropyReg => PenaltyKind::None,
        }
    }

    /// Distance reported as `pen_value`: the method's own penalty, or the
    /// log-Euclidean distance for methods without one.
    pub fn reported_kind(self) -> PenaltyKind {
        match self.penalty_kind() {
            PenaltyKind::None => PenaltyKind::LogEuclidean,
            k => k,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::SourceOnly => "source_only",
            Method::EntropyReg => "entropy_reg",
            Method::CoralEuclidean => "coral",
            Method::MecaGeodesic => "meca",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = MecaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source_only" => Ok(Method::SourceOnly),
            "entropy_reg" => Ok(Method::EntropyReg),
            "coral" | "coral_euclidean" => Ok(Method::CoralEuclidean),
            "meca" | "meca_geodesic" => Ok(Method::MecaGeodesic),
            other => Err(MecaError::ConfigInvalid(format!(
                "unknown method {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    /// λ for the alignment methods, γ for `EntropyReg`, unused otherwise.
    pub lambda_or_gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Index into the model's `layer_sizes`; `None` picks the penultimate
    /// layer.
    pub alignment_layer_index: Option<usize>,
    pub jitter_rel: f64,
    pub normalize_cov: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::MecaGeodesic,
            lambda_or_gamma: 0.1,
            epochs: 50,
            batch_size: 128,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            alignment_layer_index: None,
            jitter_rel: DEFAULT_JITTER_REL,
            normalize_cov: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MecaError::ConfigInvalid(msg));
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch size {} must be at least 2", self.batch_size));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate {} must be positive",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if !(self.lambda_or_gamma >= 0.0 && self.lambda_or_gamma.is_finite()) {
            return bad(format!(
                "weight {} must be finite and non-negative",
                self.lambda_or_gamma
            ));
        }
        if !(self.jitter_rel >= 0.0 && self.jitter_rel.is_finite()) {
            return bad(format!(
                "jitter {} must be finite and non-negative",
                self.jitter_rel
            ));
        }
        Ok(())
    }

    pub fn objective(&self, model: &MlpModel) -> Result<Objective> {
        let alignment_layer = self
            .alignment_layer_index
            .unwrap_or_else(|| model.penultimate_index());
        if alignment_layer >= model.num_layers() {
            return Err(MecaError::ConfigInvalid(format!(
                "alignment layer {alignment_layer} does not exist in {:?}",
                model.layer_sizes()
            )));
        }
        Ok(Objective {
            method: self.method,
            weight: self.lambda_or_gamma,
            alignment_layer,
            jitter_rel: self.jitter_rel,
            normalize_cov: self.normalize_cov,
        })
    }
}

/// The per-step training loss of one method.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub method: Method,
    pub weight: f64,
    pub alignment_layer: usize,
    pub jitter_rel: f64,
    pub normalize_cov: bool,
}

/// Loss components on one pair of batches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub h_source: f64,
    /// Target entropy; only evaluated for `EntropyReg`, zero otherwise.
    pub e_target: f64,
    /// Unweighted covariance distance; zero for methods without a penalty.
    pub pen_value: f64,
}

impl Objective {
    fn penalty(&self) -> AlignmentPenalty {
        AlignmentPenalty {
            kind: self.method.penalty_kind(),
            lambda: self.weight,
            jitter_rel: self.jitter_rel,
            normalize_cov: self.normalize_cov,
        }
    }

    fn needs_target(&self) -> bool {
        self.method != Method::SourceOnly && self.weight != 0.0
    }

    /// Loss value only.
    pub fn value(
        &self,
        model: &MlpModel,
        xs: &DenseMatrix,
        zs: &DenseMatrix,
        xt: &DenseMatrix,
    ) -> Result<LossParts> {
        self.evaluate(model, xs, zs, xt, false).map(|(l, _)| l)
    }

    /// Loss value and its gradient with respect to every model parameter.
    pub fn value_and_grad(
        &self,
        model: &MlpModel,
        xs: &DenseMatrix,
        zs: &DenseMatrix,
        xt: &DenseMatrix,
    ) -> Result<(LossParts, ParamGrads)> {
        self.evaluate(model, xs, zs, xt, true)
            .map(|(l, g)| (l, g.expect("gradient requested")))
    }

    fn evaluate(
        &self,
        model: &MlpModel,
        xs: &DenseMatrix,
        zs: &DenseMatrix,
        xt: &DenseMatrix,
        with_grad: bool,
    ) -> Result<(LossParts, Option<ParamGrads>)> {
        let ts = forward(model, xs, self.alignment_layer)?;
        let h_source = cross_entropy(&ts.probs, zs)?;
        let mut parts = LossParts {
            total: h_source,
            h_source,
            e_target: 0.0,
            pen_value: 0.0,
        };
        let g_ce = if with_grad {
            Some(grad_cross_entropy_wrt_probs(&ts.probs, zs)?)
        } else {
            None
        };
        if !self.needs_target() {
            let grads = match g_ce {
                Some(g) => Some(backward(model, &ts, Some(&g), None)?),
                None => None,
            };
            return Ok((parts, grads));
        }

        let tt = forward(model, xt, self.alignment_layer)?;
        match self.method {
            Method::EntropyReg => {
                let e = entropy(&tt.probs)?;
                parts.e_target = e;
                parts.total = h_source + self.weight * e;
                if !with_grad {
                    return Ok((parts, None));
                }
                let ge = grad_entropy_wrt_probs(&tt.probs)?.scale(self.weight);
                let mut grads = backward(model, &ts, g_ce.as_ref(), None)?;
                grads.add_assign(&backward(model, &tt, Some(&ge), None)?);
                Ok((parts, Some(grads)))
            }
            Method::CoralEuclidean | Method::MecaGeodesic => {
                let pen = evaluate_penalty(ts.feature_acts(), tt.feature_acts(), &self.penalty())?;
                parts.pen_value = pen.distance;
                parts.total = h_source + pen.value;
                if !with_grad {
                    return Ok((parts, None));
                }
                let mut grads = backward(model, &ts, g_ce.as_ref(), Some(&pen.grad_source))?;
                grads.add_assign(&backward(model, &tt, None, Some(&pen.grad_target))?);
                Ok((parts, Some(grads)))
            }
            Method::SourceOnly => unreachable!(),
        }
    }
}

/// Quantities tracked once per epoch over the full datasets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Summed source cross-entropy.
    pub h_source: f64,
    /// Summed target entropy.
    pub e_target: f64,
    /// Covariance distance between the full source and target feature sets.
    pub pen_value: f64,
    /// `None` when the target set carries no labels.
    pub target_accuracy: Option<f64>,
    pub kl_st: f64,
}

/// Outcome of [`train_run`].
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub model: MlpModel,
    pub metrics: Vec<EpochMetrics>,
    /// Set when a loss or parameter went non-finite; `metrics` then holds
    /// the epochs completed before the abort.
    pub divergence: Option<(usize, usize)>,
}

impl TrainRun {
    pub fn diverged(&self) -> bool {
        self.divergence.is_some()
    }

    /// The divergence as an error value, if any.
    pub fn divergence_error(&self) -> Option<MecaError> {
        self.divergence
            .map(|(epoch, step)| MecaError::NumericalDivergence { epoch, step })
    }
}

fn check_domains(model: &MlpModel, source: &Dataset, target: &Dataset) -> Result<()> {
    let k = model.num_classes();
    match source.num_classes() {
        None => {
            return Err(MecaError::ConfigInvalid(
                "source dataset has no labels".into(),
            ))
        }
        Some(ks) if ks != k => {
            return Err(MecaError::BadShape(format!(
                "source labels have {ks} classes, model outputs {k}"
            )))
        }
        _ => {}
    }
    if let Some(kt) = target.num_classes() {
        if kt != k {
            return Err(MecaError::BadShape(format!(
                "target labels have {kt} classes, model outputs {k}"
            )));
        }
    }
    for ds in [source, target] {
        if ds.dim() != model.input_dim() {
            return Err(MecaError::BadShape(format!(
                "{} has width {}, model expects {}",
                ds.domain_tag,
                ds.dim(),
                model.input_dim()
            )));
        }
        if ds.len() < 2 {
            return Err(MecaError::TooFewSamples(ds.len()));
        }
    }
    Ok(())
}

/// Trains `model` on the labeled `source` and unlabeled `target` domains.
pub fn train_run(
    mut model: MlpModel,
    source: &Dataset,
    target: &Dataset,
    config: &TrainConfig,
) -> Result<TrainRun> {
    config.validate()?;
    check_domains(&model, source, target)?;
    let objective = config.objective(&model)?;
    let source_labels = source.labels().expect("checked above");

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut velocity = ParamGrads::zeros_like(&model);
    let mut perm_s: Vec<usize> = (0..source.len()).collect();
    let mut perm_t: Vec<usize> = (0..target.len()).collect();
    let mut metrics = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        perm_s.shuffle(&mut rng);
        perm_t.shuffle(&mut rng);
        let mut cursor = 0;
        for (step, chunk) in perm_s.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let idx_t: Vec<usize> = (0..chunk.len())
                .map(|i| perm_t[(cursor + i) % perm_t.len()])
                .collect();
            cursor = (cursor + chunk.len()) % perm_t.len();

            let xs = source.inputs().select_cols(chunk);
            let zs = source_labels.select_rows(chunk);
            let xt = target.inputs().select_cols(&idx_t);
            let step_result = match objective.value_and_grad(&model, &xs, &zs, &xt) {
                Ok((parts, grads)) if parts.total.is_finite() && grads.all_finite() => Some(grads),
                Ok(_) => None,
                // Eigen-solves on non-finite activations fail before the
                // loss can be inspected.
                Err(e) if e.is_numerical() => None,
                Err(e) => return Err(e),
            };
            let Some(grads) = step_result else {
                return Ok(TrainRun {
                    model,
                    metrics,
                    divergence: Some((epoch, step)),
                });
            };
            model.apply_momentum_step(&mut velocity, &grads, config.learning_rate, config.momentum);
            if !model.all_finite() {
                return Ok(TrainRun {
                    model,
                    metrics,
                    divergence: Some((epoch, step)),
                });
            }
        }

        match epoch_metrics(&model, source, target, &objective, epoch) {
            Ok(m) if m.is_finite() => metrics.push(m),
            Ok(_) => {
                return Ok(TrainRun {
                    model,
                    metrics,
                    divergence: Some((epoch, usize::MAX)),
                })
            }
            Err(e) if e.is_numerical() => {
                return Ok(TrainRun {
                    model,
                    metrics,
                    divergence: Some((epoch, usize::MAX)),
                })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainRun {
        model,
        metrics,
        divergence: None,
    })
}

impl EpochMetrics {
    fn is_finite(&self) -> bool {
        self.h_source.is_finite()
            && self.e_target.is_finite()
            && self.pen_value.is_finite()
            && self.kl_st.is_finite()
            && self.target_accuracy.is_none_or(f64::is_finite)
    }
}

fn epoch_metrics(
    model: &MlpModel,
    source: &Dataset,
    target: &Dataset,
    objective: &Objective,
    epoch: usize,
) -> Result<EpochMetrics> {
    let ts = forward(model, source.inputs(), objective.alignment_layer)?;
    let tt = forward(model, target.inputs(), objective.alignment_layer)?;
    let h_source = cross_entropy(&ts.probs, source.labels().expect("source is labeled"))?;
    let e_target = entropy(&tt.probs)?;
    let kind = objective.method.reported_kind();
    let cs = covariance_with(
        ts.feature_acts(),
        objective.jitter_rel,
        objective.normalize_cov,
    )?;
    let ct = covariance_with(
        tt.feature_acts(),
        objective.jitter_rel,
        objective.normalize_cov,
    )?;
    let pen_value = penalty_distance(kind, &cs, &ct)?;
    let target_accuracy = match target.labels() {
        Some(l) => Some(accuracy(&tt.probs, l)?),
        None => None,
    };
    let kl_st = kl_diagnostic(ts.feature_acts(), tt.feature_acts())?;
    Ok(EpochMetrics {
        epoch,
        h_source,
        e_target,
        pen_value,
        target_accuracy,
        kl_st,
    })
}

fn accuracy(probs: &DenseMatrix, labels: &DenseMatrix) -> Result<f64> {
    if probs.shape() != labels.shape() {
        return Err(MecaError::BadShape(format!(
            "probs {:?} vs labels {:?}",
            probs.shape(),
            labels.shape()
        )));
    }
    if probs.rows() == 0 {
        return Err(MecaError::BadShape("empty dataset".into()));
    }
    let truth = label_indices(labels);
    let hits = (0..probs.rows())
        .filter(|&i| argmax(probs.row(i)) == truth[i])
        .count();
    Ok(hits as f64 / probs.rows() as f64)
}

/// Accuracy, summed entropy and summed cross-entropy of a prediction matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub entropy: f64,
    pub cross_entropy: f64,
}

/// Scores arbitrary class probabilities (`n × K`) against one-hot labels.
/// Argmax ties resolve to the lowest class index.
pub fn evaluate_probs(probs: &DenseMatrix, labels: &DenseMatrix) -> Result<Evaluation> {
    let accuracy = accuracy(probs, labels)?;
    Ok(Evaluation {
        accuracy,
        entropy: entropy(probs)?,
        cross_entropy: cross_entropy(probs, labels)?,
    })
}

/// Scores a model on a labeled dataset.
pub fn evaluate(model: &MlpModel, data: &Dataset) -> Result<Evaluation> {
    let labels = data.labels().ok_or_else(|| {
        MecaError::BadShape(format!("dataset {:?} has no labels", data.domain_tag))
    })?;
    if data.is_empty() {
        return Err(MecaError::BadShape("empty dataset".into()));
    }
    let trace = forward(model, data.inputs(), 0)?;
    evaluate_probs(&trace.probs, labels)
}

fn moments(acts: &DenseMatrix) -> (Vec<f64>, Vec<f64>) {
    let n = acts.cols() as f64;
    let mut means = Vec::with_capacity(acts.rows());
    let mut vars = Vec::with_capacity(acts.rows());
    for r in 0..acts.rows() {
        let row = acts.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        means.push(mean);
        vars.push(var.max(KL_VARIANCE_FLOOR));
    }
    (means, vars)
}

/// `KL(N_s ‖ N_t)` between diagonal Gaussians fitted per feature (rows) to
/// the two activation sets. Diagnostic only.
pub fn kl_diagnostic(feature_acts_s: &DenseMatrix, feature_acts_t: &DenseMatrix) -> Result<f64> {
    for a in [feature_acts_s, feature_acts_t] {
        if a.cols() < 2 {
            return Err(MecaError::TooFewSamples(a.cols()));
        }
    }
    if feature_acts_s.rows() != feature_acts_t.rows() {
        return Err(MecaError::DimMismatch(format!(
            "{} vs {} features",
            feature_acts_s.rows(),
            feature_acts_t.rows()
        )));
    }
    let (ms, vs) = moments(feature_acts_s);
    let (mt, vt) = moments(feature_acts_t);
    let kl = (0..ms.len())
        .map(|j| 0.5 * ((vt[j] / vs[j]).ln() + (vs[j] + (ms[j] - mt[j]).powi(2)) / vt[j] - 1.0))
        .sum::<f64>();
    Ok(kl.max(0.0))
}

pub const METRICS_HEADER: &str = "epoch,h_source,e_target,pen_value,target_acc,kl_st";

/// Writes one CSV row per epoch; a missing target accuracy prints as `NaN`.
pub fn write_metrics_csv(metrics: &[EpochMetrics], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{METRICS_HEADER}")?;
    for m in metrics {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            m.epoch,
            format_f64(m.h_source),
            format_f64(m.e_target),
            format_f64(m.pen_value),
            m.target_accuracy
                .map_or_else(|| "NaN".to_string(), format_f64),
            format_f64(m.kl_st)
        )?;
    }
    w.flush()?;
    Ok(())
}
