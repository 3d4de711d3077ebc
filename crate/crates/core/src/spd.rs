//! Symmetric positive-definite matrices and the distances between them.
//!
//! Everything here rests on a cyclic Jacobi eigensolver. A covariance is
//! held as an [`SpdMatrix`], which caches its eigendecomposition so that
//! matrix functions (log, exp, inverse square root) and the Fréchet
//! derivative of the logarithm are cheap once the matrix exists.
//!
//! Three distances are provided:
//!
//! * [`dist_euclidean`]: `‖Cs − Ct‖²_F / (4d²)`
//! * [`dist_log_euclidean`]: `‖log Cs − log Ct‖²_F / (4d²)`
//! * [`dist_affine`]: `‖log(Ct^{-1/2} Cs Ct^{-1/2})‖_F`, unnormalized
//!
//! The first two come with closed-form gradients with respect to both
//! arguments; the affine distance is for comparison only.

use crate::error::{MecaError, Result};
use crate::linalg::DenseMatrix;

/// Sweep cap for the cyclic Jacobi scheme.
pub const MAX_JACOBI_SWEEPS: usize = 100;

/// Stopping threshold: off-diagonal Frobenius norm relative to the diagonal.
pub const JACOBI_TOL: f64 = 1e-12;

/// Default relative jitter added to covariance diagonals.
pub const DEFAULT_JITTER_REL: f64 = 1e-5;

/// Absolute jitter floor.
pub const JITTER_FLOOR: f64 = 1e-12;

/// Relative eigenvalue gap below which a Loewner entry uses its limit value.
pub const LOEWNER_DEGENERATE_REL: f64 = 1e-12;

const SYMMETRY_TOL_REL: f64 = 1e-10;

fn check_symmetric(m: &DenseMatrix) -> Result<()> {
    if !m.is_square() {
        return Err(MecaError::BadShape(format!(
            "expected a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if !m.all_finite() {
        return Err(MecaError::NonFinite(
            "matrix passed to the eigensolver".into(),
        ));
    }
    let tolerance = SYMMETRY_TOL_REL * m.max_abs();
    let asymmetry = m.asymmetry();
    if asymmetry > tolerance {
        return Err(MecaError::NonSymmetric {
            asymmetry,
            tolerance,
        });
    }
    Ok(())
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order (ties keep their original diagonal
/// position) and the matching orthonormal eigenvectors as columns. Each
/// eigenvector's largest-magnitude component is made positive, so identical
/// input bits give identical output bits.
pub fn sym_eig(m: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix)> {
    check_symmetric(m)?;
    let n = m.rows();
    let mut a = m.symmetrized();
    let mut v = DenseMatrix::identity(n);

    let mut converged = n <= 1;
    for _ in 0..MAX_JACOBI_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                // Entries this small relative to their diagonal pair no
                // longer move the eigenvalues at working precision.
                if apq.abs() <= f64::EPSILON * (app.abs() * aqq.abs()).sqrt() {
                    a.set(p, q, 0.0);
                    a.set(q, p, 0.0);
                    continue;
                }
                rotated = true;
                rotate(&mut a, &mut v, p, q);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        let (off, diag) = off_and_diag_norms(&a);
        if off > JACOBI_TOL * diag {
            return Err(MecaError::NoConvergence {
                sweeps: MAX_JACOBI_SWEEPS,
            });
        }
    }

    let raw = a.diag();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps equal eigenvalues in index order.
    order.sort_by(|&i, &j| raw[j].total_cmp(&raw[i]));
    let eigvals: Vec<f64> = order.iter().map(|&i| raw[i]).collect();
    let mut vecs = v.select_cols(&order);
    for c in 0..n {
        let mut big = 0usize;
        let mut big_abs = -1.0;
        for r in 0..n {
            let x = vecs.get(r, c).abs();
            if x > big_abs {
                big_abs = x;
                big = r;
            }
        }
        if vecs.get(big, c) < 0.0 {
            for r in 0..n {
                vecs.set(r, c, -vecs.get(r, c));
            }
        }
    }
    Ok((eigvals, vecs))
}

fn off_and_diag_norms(a: &DenseMatrix) -> (f64, f64) {
    let n = a.rows();
    let mut off = 0.0;
    let mut diag = 0.0;
    for i in 0..n {
        for j in 0..n {
            let x = a.get(i, j);
            if i == j {
                diag += x * x;
            } else {
                off += x * x;
            }
        }
    }
    (off.sqrt(), diag.sqrt())
}

/// Applies the rotation annihilating `a[p][q]`: `a ← Jᵀ a J`, `v ← v J`.
fn rotate(a: &mut DenseMatrix, v: &mut DenseMatrix, p: usize, q: usize) {
    let n = a.rows();
    let apq = a.get(p, q);
    let app = a.get(p, p);
    let aqq = a.get(q, q);
    let theta = (aqq - app) / (2.0 * apq);
    let t = if theta.abs() > 1e150 {
        0.5 / theta
    } else {
        theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
    };
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;

    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = a.get(k, p);
        let akq = a.get(k, q);
        let np = c * akp - s * akq;
        let nq = s * akp + c * akq;
        a.set(k, p, np);
        a.set(p, k, np);
        a.set(k, q, nq);
        a.set(q, k, nq);
    }
    a.set(p, p, app - t * apq);
    a.set(q, q, aqq + t * apq);
    a.set(p, q, 0.0);
    a.set(q, p, 0.0);

    for k in 0..n {
        let vkp = v.get(k, p);
        let vkq = v.get(k, q);
        v.set(k, p, c * vkp - s * vkq);
        v.set(k, q, s * vkp + c * vkq);
    }
}

/// `U diag(values) Uᵀ`
fn from_eigensystem(vecs: &DenseMatrix, values: &[f64]) -> DenseMatrix {
    let n = vecs.rows();
    let mut scaled = vecs.clone();
    for r in 0..n {
        for (x, &s) in scaled.row_mut(r).iter_mut().zip(values) {
            *x *= s;
        }
    }
    scaled.matmul_t(vecs).symmetrized()
}

/// A symmetric positive-definite matrix with its cached eigendecomposition.
#[derive(Clone, Debug)]
pub struct SpdMatrix {
    mat: DenseMatrix,
    eigvals: Vec<f64>,
    eigvecs: DenseMatrix,
}

impl SpdMatrix {
    /// Wraps a matrix that must already be symmetric positive definite.
    pub fn new(m: &DenseMatrix) -> Result<Self> {
        let (eigvals, eigvecs) = sym_eig(m)?;
        if let Some(&bad) = eigvals.iter().find(|&&s| s <= 0.0 || !s.is_finite()) {
            return Err(MecaError::Degenerate(format!(
                "eigenvalue {bad:e} is not strictly positive"
            )));
        }
        Ok(Self {
            mat: m.symmetrized(),
            eigvals,
            eigvecs,
        })
    }

    /// Builds `U diag(eigvals) Uᵀ` from positive eigenvalues and an
    /// orthonormal basis supplied by the caller.
    fn from_parts(eigvals: Vec<f64>, eigvecs: DenseMatrix) -> Self {
        let mat = from_eigensystem(&eigvecs, &eigvals);
        Self {
            mat,
            eigvals,
            eigvecs,
        }
    }

    pub fn dim(&self) -> usize {
        self.mat.rows()
    }

    pub fn mat(&self) -> &DenseMatrix {
        &self.mat
    }

    /// Eigenvalues, descending.
    pub fn eigvals(&self) -> &[f64] {
        &self.eigvals
    }

    /// Orthonormal eigenvectors as columns, matching [`SpdMatrix::eigvals`].
    pub fn eigvecs(&self) -> &DenseMatrix {
        &self.eigvecs
    }

    /// `U diag(f(σ)) Uᵀ` for a scalar function `f`.
    pub fn apply(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        let vals: Vec<f64> = self.eigvals.iter().map(|&s| f(s)).collect();
        from_eigensystem(&self.eigvecs, &vals)
    }

    pub fn log(&self) -> DenseMatrix {
        self.apply(f64::ln)
    }

    pub fn inverse(&self) -> SpdMatrix {
        let vals = self.eigvals.iter().map(|s| 1.0 / s).collect();
        Self::from_parts(vals, self.eigvecs.clone())
    }

    pub fn inv_sqrt(&self) -> DenseMatrix {
        self.apply(|s| 1.0 / s.sqrt())
    }

    /// Congruence `g · self · gᵀ`.
    pub fn congruence(&self, g: &DenseMatrix) -> Result<SpdMatrix> {
        if g.cols() != self.dim() {
            return Err(MecaError::DimMismatch(format!(
                "{}x{} transform for dimension {}",
                g.rows(),
                g.cols(),
                self.dim()
            )));
        }
        SpdMatrix::new(&g.matmul(&self.mat).matmul_t(g))
    }

    /// `s · self` for `s > 0`.
    pub fn scaled(&self, s: f64) -> Result<SpdMatrix> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(MecaError::BadParams(format!("scale {s} must be positive")));
        }
        let vals = self.eigvals.iter().map(|v| v * s).collect();
        Ok(Self::from_parts(vals, self.eigvecs.clone()))
    }
}

/// Repairs a symmetric (possibly rank-deficient) matrix into an SPD one by
/// adding `ε I` with `ε = jitter_rel · trace/dim + 1e-12`.
///
/// A negative trace contributes no relative jitter.
pub fn make_spd(m: &DenseMatrix, jitter_rel: f64) -> Result<SpdMatrix> {
    if !(jitter_rel >= 0.0 && jitter_rel.is_finite()) {
        return Err(MecaError::BadParams(format!(
            "jitter_rel {jitter_rel} must be finite and non-negative"
        )));
    }
    let (mut eigvals, eigvecs) = sym_eig(m)?;
    let d = m.rows();
    if d == 0 {
        return Err(MecaError::BadShape("empty matrix".into()));
    }
    let eps = jitter_rel * m.trace().max(0.0) / d as f64 + JITTER_FLOOR;
    for s in eigvals.iter_mut() {
        *s += eps;
    }
    if let Some(&bad) = eigvals.iter().find(|&&s| s <= 0.0) {
        return Err(MecaError::Degenerate(format!(
            "eigenvalue {bad:e} remains non-positive after jitter {eps:e}"
        )));
    }
    let mut mat = m.symmetrized();
    mat.add_to_diag(eps);
    Ok(SpdMatrix {
        mat,
        eigvals,
        eigvecs,
    })
}

/// Matrix logarithm through the cached eigenbasis.
pub fn mat_log(c: &SpdMatrix) -> DenseMatrix {
    c.log()
}

/// Matrix exponential of a symmetric matrix.
pub fn mat_exp_sym(m: &DenseMatrix) -> Result<DenseMatrix> {
    let (vals, vecs) = sym_eig(m)?;
    let e: Vec<f64> = vals.iter().map(|v| v.exp()).collect();
    Ok(from_eigensystem(&vecs, &e))
}

fn check_dims(cs: &SpdMatrix, ct: &SpdMatrix) -> Result<usize> {
    if cs.dim() != ct.dim() {
        return Err(MecaError::DimMismatch(format!(
            "covariances of dimension {} and {}",
            cs.dim(),
            ct.dim()
        )));
    }
    Ok(cs.dim())
}

fn norm_factor(d: usize) -> f64 {
    1.0 / (4.0 * (d * d) as f64)
}

/// `‖cs − ct‖²_F / (4d²)`
pub fn dist_euclidean(cs: &SpdMatrix, ct: &SpdMatrix) -> Result<f64> {
    let d = check_dims(cs, ct)?;
    Ok(norm_factor(d) * cs.mat.sub(&ct.mat).frobenius_sq())
}

/// `‖log cs − log ct‖²_F / (4d²)`
pub fn dist_log_euclidean(cs: &SpdMatrix, ct: &SpdMatrix) -> Result<f64> {
    let d = check_dims(cs, ct)?;
    Ok(norm_factor(d) * cs.log().sub(&ct.log()).frobenius_sq())
}

/// Affine-invariant distance `‖log(ct^{-1/2} cs ct^{-1/2})‖_F`.
///
/// Same value as `‖log(cs ct⁻¹)‖_F`, evaluated in the symmetric congruence
/// form so only symmetric eigenproblems are solved.
pub fn dist_affine(cs: &SpdMatrix, ct: &SpdMatrix) -> Result<f64> {
    check_dims(cs, ct)?;
    let p = ct.inv_sqrt();
    let inner = p.matmul(&cs.mat).matmul(&p).symmetrized();
    let (vals, _) = sym_eig(&inner)?;
    if let Some(&bad) = vals.iter().find(|&&v| v <= 0.0) {
        return Err(MecaError::Degenerate(format!(
            "whitened matrix has eigenvalue {bad:e}"
        )));
    }
    Ok(vals.iter().map(|v| v.ln().powi(2)).sum::<f64>().sqrt())
}

/// Divided difference of `ln` at a pair of eigenvalues.
fn loewner_log(si: f64, sj: f64) -> f64 {
    let diff = si - sj;
    if diff.abs() < LOEWNER_DEGENERATE_REL * si.max(sj) {
        return 1.0 / si;
    }
    let rel = diff / sj;
    if rel.abs() < 0.5 {
        // ln(si) - ln(sj) = ln(1 + rel), without cancellation.
        rel.ln_1p() / diff
    } else {
        (si.ln() - sj.ln()) / diff
    }
}

/// Pulls a gradient `g = ∂f/∂(log c)` back to `∂f/∂c` through the Fréchet
/// derivative of the matrix logarithm: `U (L ∘ (Uᵀ g U)) Uᵀ`.
pub fn log_frechet_adjoint(c: &SpdMatrix, g: &DenseMatrix) -> DenseMatrix {
    let u = &c.eigvecs;
    let mut inner = u.t_matmul(g).matmul(u);
    let s = &c.eigvals;
    let n = s.len();
    for i in 0..n {
        for j in 0..n {
            let l = loewner_log(s[i], s[j]);
            inner.set(i, j, inner.get(i, j) * l);
        }
    }
    u.matmul(&inner).matmul_t(u).symmetrized()
}

/// Gradients of [`dist_log_euclidean`] with respect to both arguments.
pub fn grad_dist_log_euclidean(
    cs: &SpdMatrix,
    ct: &SpdMatrix,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let d = check_dims(cs, ct)?;
    let delta = cs.log().sub(&ct.log());
    let g = delta.scale(2.0 * norm_factor(d));
    let gs = log_frechet_adjoint(cs, &g);
    let gt = log_frechet_adjoint(ct, &g).scale(-1.0);
    Ok((gs, gt))
}

/// Gradients of [`dist_euclidean`] with respect to both arguments.
pub fn grad_dist_euclidean(cs: &SpdMatrix, ct: &SpdMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
    let d = check_dims(cs, ct)?;
    let gs = cs.mat.sub(&ct.mat).scale(2.0 * norm_factor(d));
    let gt = gs.scale(-1.0);
    Ok((gs, gt))
}
