//! Covariance alignment penalties between source and target activations.
//!
//! Covariances are formed as `C = A J Aᵀ` with the centering matrix
//! `J = I − 11ᵀ/n`, then jittered to be strictly positive definite. The
//! penalty gradients are pulled back through that construction, jitter
//! included, to the activations `A`.

use crate::error::{MecaError, Result};
use crate::linalg::DenseMatrix;
use crate::network::{cross_entropy, ForwardTrace};
use crate::spd::{
    dist_euclidean, dist_log_euclidean, grad_dist_euclidean, grad_dist_log_euclidean, make_spd,
    SpdMatrix, DEFAULT_JITTER_REL,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PenaltyKind {
    None,
    /// Squared Frobenius distance scaled by `1/(4d²)`.
    Euclidean,
    /// Squared log-Euclidean distance scaled by `1/(4d²)`.
    LogEuclidean,
}

/// Which distance to align with, and how strongly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentPenalty {
    pub kind: PenaltyKind,
    pub lambda: f64,
    pub jitter_rel: f64,
    /// Divide `A J Aᵀ` by `n − 1`.
    pub normalize_cov: bool,
}

impl AlignmentPenalty {
    pub fn new(kind: PenaltyKind, lambda: f64) -> Result<Self> {
        let p = Self {
            kind,
            lambda,
            jitter_rel: DEFAULT_JITTER_REL,
            normalize_cov: false,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn none() -> Self {
        Self {
            kind: PenaltyKind::None,
            lambda: 0.0,
            jitter_rel: DEFAULT_JITTER_REL,
            normalize_cov: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(MecaError::ConfigInvalid(format!(
                "lambda {} must be finite and non-negative",
                self.lambda
            )));
        }
        if !(self.jitter_rel.is_finite() && self.jitter_rel >= 0.0) {
            return Err(MecaError::ConfigInvalid(format!(
                "jitter_rel {} must be finite and non-negative",
                self.jitter_rel
            )));
        }
        Ok(())
    }

    /// True when the penalty contributes nothing to loss or gradient.
    pub fn is_inactive(&self) -> bool {
        self.kind == PenaltyKind::None || self.lambda == 0.0
    }
}

fn cov_scale(n: usize, normalize: bool) -> f64 {
    if normalize {
        1.0 / (n - 1) as f64
    } else {
        1.0
    }
}

/// `A J Aᵀ` (optionally over `n − 1`) before any jitter.
pub fn raw_covariance(acts: &DenseMatrix, normalize: bool) -> Result<DenseMatrix> {
    let n = acts.cols();
    if n < 2 {
        return Err(MecaError::TooFewSamples(n));
    }
    let centered = acts.center_rows();
    let c = centered.matmul_t(&centered).symmetrized();
    Ok(if normalize {
        c.scale(cov_scale(n, true))
    } else {
        c
    })
}

/// Jittered covariance of `d × n` activations, `A J Aᵀ + εI`.
pub fn covariance(acts: &DenseMatrix, jitter_rel: f64) -> Result<SpdMatrix> {
    covariance_with(acts, jitter_rel, false)
}

pub fn covariance_with(acts: &DenseMatrix, jitter_rel: f64, normalize: bool) -> Result<SpdMatrix> {
    make_spd(&raw_covariance(acts, normalize)?, jitter_rel)
}

/// Unweighted distance between two covariances under `kind`.
pub fn penalty_distance(kind: PenaltyKind, cs: &SpdMatrix, ct: &SpdMatrix) -> Result<f64> {
    match kind {
        PenaltyKind::None => Ok(0.0),
        PenaltyKind::Euclidean => dist_euclidean(cs, ct),
        PenaltyKind::LogEuclidean => dist_log_euclidean(cs, ct),
    }
}

/// Penalty value (already multiplied by λ) together with its gradients with
/// respect to the source and target activations.
#[derive(Clone, Debug)]
pub struct PenaltyEval {
    pub distance: f64,
    pub value: f64,
    pub grad_source: DenseMatrix,
    pub grad_target: DenseMatrix,
}

/// Chain rule through `C = s·A J Aᵀ + ε(A) I` with
/// `ε = jitter_rel · tr(s·A J Aᵀ)/d + floor`:
/// `∂ℓ/∂A = s · (G + Gᵀ + 2·jitter_rel·tr(G)/d · I) · A J`.
fn pull_back(g: &DenseMatrix, acts: &DenseMatrix, jitter_rel: f64, normalize: bool) -> DenseMatrix {
    let d = g.rows();
    let mut m = g.add(&g.transpose());
    m.add_to_diag(2.0 * jitter_rel * g.trace() / d as f64);
    let s = cov_scale(acts.cols(), normalize);
    m.matmul(&acts.center_rows()).scale(s)
}

/// Evaluates the weighted penalty and its activation gradients.
pub fn evaluate_penalty(
    acts_s: &DenseMatrix,
    acts_t: &DenseMatrix,
    penalty: &AlignmentPenalty,
) -> Result<PenaltyEval> {
    penalty.validate()?;
    for a in [acts_s, acts_t] {
        if a.cols() < 2 {
            return Err(MecaError::TooFewSamples(a.cols()));
        }
    }
    if acts_s.rows() != acts_t.rows() {
        return Err(MecaError::DimMismatch(format!(
            "source width {} vs target width {}",
            acts_s.rows(),
            acts_t.rows()
        )));
    }
    let zeros = || {
        (
            DenseMatrix::zeros(acts_s.rows(), acts_s.cols()),
            DenseMatrix::zeros(acts_t.rows(), acts_t.cols()),
        )
    };
    if penalty.kind == PenaltyKind::None {
        let (grad_source, grad_target) = zeros();
        return Ok(PenaltyEval {
            distance: 0.0,
            value: 0.0,
            grad_source,
            grad_target,
        });
    }
    let cs = covariance_with(acts_s, penalty.jitter_rel, penalty.normalize_cov)?;
    let ct = covariance_with(acts_t, penalty.jitter_rel, penalty.normalize_cov)?;
    let distance = penalty_distance(penalty.kind, &cs, &ct)?;
    if penalty.lambda == 0.0 {
        let (grad_source, grad_target) = zeros();
        return Ok(PenaltyEval {
            distance,
            value: 0.0,
            grad_source,
            grad_target,
        });
    }
    let (gs, gt) = match penalty.kind {
        PenaltyKind::Euclidean => grad_dist_euclidean(&cs, &ct)?,
        PenaltyKind::LogEuclidean => grad_dist_log_euclidean(&cs, &ct)?,
        PenaltyKind::None => unreachable!(),
    };
    let lambda = penalty.lambda;
    Ok(PenaltyEval {
        distance,
        value: lambda * distance,
        grad_source: pull_back(&gs, acts_s, penalty.jitter_rel, penalty.normalize_cov)
            .scale(lambda),
        grad_target: pull_back(&gt, acts_t, penalty.jitter_rel, penalty.normalize_cov)
            .scale(lambda),
    })
}

/// Gradients of `λ·ℓ(C_S, C_T)` with respect to both activation batches.
pub fn grad_covariance_penalty(
    acts_s: &DenseMatrix,
    acts_t: &DenseMatrix,
    penalty: &AlignmentPenalty,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let eval = evaluate_penalty(acts_s, acts_t, penalty)?;
    Ok((eval.grad_source, eval.grad_target))
}

/// Components of the alignment objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompositeLoss {
    pub total: f64,
    pub h_source: f64,
    /// Unweighted distance `ℓ(C_S, C_T)`.
    pub pen_value: f64,
}

/// `H(X_S, Z_S) + λ·ℓ(C_S, C_T)`.
pub fn composite_loss(
    trace_s: &ForwardTrace,
    labels_s: &DenseMatrix,
    trace_t: &ForwardTrace,
    penalty: &AlignmentPenalty,
) -> Result<CompositeLoss> {
    penalty.validate()?;
    if trace_s.alignment_layer() != trace_t.alignment_layer() {
        return Err(MecaError::BadShape(
            "source and target traces use different alignment layers".into(),
        ));
    }
    let h_source = cross_entropy(&trace_s.probs, labels_s)?;
    let pen_value = if penalty.kind == PenaltyKind::None {
        0.0
    } else {
        let cs = covariance_with(
            trace_s.feature_acts(),
            penalty.jitter_rel,
            penalty.normalize_cov,
        )?;
        let ct = covariance_with(
            trace_t.feature_acts(),
            penalty.jitter_rel,
            penalty.normalize_cov,
        )?;
        penalty_distance(penalty.kind, &cs, &ct)?
    };
    let total = if penalty.lambda == 0.0 {
        h_source
    } else {
        h_source + penalty.lambda * pen_value
    };
    Ok(CompositeLoss {
        total,
        h_source,
        pen_value,
    })
}
