//! Feed-forward softmax classifier with hand-written forward and backward
//! passes.
//!
//! Activations are stored feature-major: a batch of `n` samples of width `d`
//! is a `d × n` matrix whose columns are samples. Class probabilities are the
//! exception and come out `n × K`, one row per sample.

use std::io::{Read, Write};

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MecaError, Result};
use crate::linalg::DenseMatrix;

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before the
/// logarithm in the cross-entropy.
pub const PROB_CLAMP: f64 = 1e-12;

const MODEL_MAGIC: &[u8; 4] = b"MECA";
const MODEL_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }

    fn code(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

impl std::str::FromStr for Activation {
    type Err = MecaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(MecaError::BadParams(format!(
                "unknown activation {other:?}"
            ))),
        }
    }
}

/// Multilayer perceptron `f(·; θ)`.
///
/// `layer_sizes = [d₀, h₁, …, K]`. Layer `l` (1-based) maps width
/// `layer_sizes[l-1]` to `layer_sizes[l]` with weight matrix
/// `weights[l-1]` of shape `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    layer_sizes: Vec<usize>,
    weights: Vec<DenseMatrix>,
    biases: Vec<Vec<f64>>,
    hidden_activation: Activation,
}

impl MlpModel {
    /// Glorot-uniform weights, zero biases, deterministic in `seed`.
    pub fn init(layer_sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(MecaError::BadShape(format!(
                "need at least an input and an output layer, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(MecaError::BadShape(format!(
                "zero-width layer in {layer_sizes:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
        let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit)
                .map_err(|e| MecaError::BadParams(e.to_string()))?;
            let data = (0..fan_in * fan_out)
                .map(|_| dist.sample(&mut rng))
                .collect();
            weights.push(DenseMatrix::from_raw(fan_out, fan_in, data));
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            hidden_activation: activation,
        })
    }

    /// Builds a model from explicit parameters.
    pub fn from_parameters(
        weights: Vec<DenseMatrix>,
        biases: Vec<Vec<f64>>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(MecaError::BadShape(format!(
                "{} weight matrices and {} bias vectors",
                weights.len(),
                biases.len()
            )));
        }
        let mut sizes = vec![weights[0].cols()];
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.cols() != *sizes.last().unwrap() || b.len() != w.rows() || w.rows() == 0 {
                return Err(MecaError::BadShape(format!(
                    "layer {l}: weights {}x{}, bias {}",
                    w.rows(),
                    w.cols(),
                    b.len()
                )));
            }
            if !w.all_finite() || b.iter().any(|v| !v.is_finite()) {
                return Err(MecaError::BadShape(format!(
                    "layer {l}: non-finite parameter"
                )));
            }
            sizes.push(w.rows());
        }
        Ok(Self {
            layer_sizes: sizes,
            weights,
            biases,
            hidden_activation: activation,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn weights(&self) -> &[DenseMatrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    /// Index of the penultimate layer in `layer_sizes`.
    pub fn penultimate_index(&self) -> usize {
        self.layer_sizes.len() - 2
    }

    pub fn num_params(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.as_slice().len() + b.len())
            .sum()
    }

    /// All parameters, layer by layer: weights row-major, then biases.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    /// Inverse of [`MlpModel::params_flat`].
    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(MecaError::BadShape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut pos = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let nw = w.as_slice().len();
            w.as_mut_slice().copy_from_slice(&flat[pos..pos + nw]);
            pos += nw;
            let nb = b.len();
            b.copy_from_slice(&flat[pos..pos + nb]);
            pos += nb;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(DenseMatrix::all_finite)
            && self.biases.iter().flatten().all(|v| v.is_finite())
    }

    /// One SGD-with-momentum update, `v ← μv + g; θ ← θ − η v`.
    pub(crate) fn apply_momentum_step(
        &mut self,
        velocity: &mut ParamGrads,
        grads: &ParamGrads,
        learning_rate: f64,
        momentum: f64,
    ) {
        for l in 0..self.weights.len() {
            let v = velocity.weights[l].as_mut_slice();
            let g = grads.weights[l].as_slice();
            let w = self.weights[l].as_mut_slice();
            for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = momentum * *vi + gi;
                *wi -= learning_rate * *vi;
            }
            let v = &mut velocity.biases[l];
            let g = &grads.biases[l];
            let b = &mut self.biases[l];
            for ((bi, vi), gi) in b.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = momentum * *vi + gi;
                *bi -= learning_rate * *vi;
            }
        }
    }

    /// Serializes to the flat binary record:
    /// `"MECA"`, version, layer count, layer sizes, activation code (all
    /// little-endian u32), then per layer the weights (row-major) and the
    /// biases as little-endian f64.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&(self.layer_sizes.len() as u32).to_le_bytes())?;
        for &s in &self.layer_sizes {
            w.write_all(&(s as u32).to_le_bytes())?;
        }
        w.write_all(&self.hidden_activation.code().to_le_bytes())?;
        for v in self.params_flat() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        fn u32_le<R: Read>(r: &mut R) -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        }
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(MecaError::BadMagic {
                found: u32::from_be_bytes(magic),
                expected: u32::from_be_bytes(*MODEL_MAGIC),
            });
        }
        let version = u32_le(&mut r)?;
        if version != MODEL_VERSION {
            return Err(MecaError::BadParams(format!(
                "unsupported model version {version}"
            )));
        }
        let count = u32_le(&mut r)? as usize;
        let sizes = (0..count)
            .map(|_| u32_le(&mut r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let activation = Activation::from_code(u32_le(&mut r)?)
            .ok_or_else(|| MecaError::BadParams("unknown activation code".into()))?;
        let mut model = Self::init(&sizes, activation, 0)?;
        let mut flat = vec![0.0; model.num_params()];
        let mut b = [0u8; 8];
        for v in flat.iter_mut() {
            r.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(MecaError::BadParams(
                "non-finite parameter in model file".into(),
            ));
        }
        model.set_params_flat(&flat)?;
        Ok(model)
    }
}

/// Convenience wrapper: relu hidden layers.
pub fn init_model(layer_sizes: &[usize], seed: u64) -> Result<MlpModel> {
    MlpModel::init(layer_sizes, Activation::Relu, seed)
}

/// Gradients with the same layout as an [`MlpModel`]'s parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub weights: Vec<DenseMatrix>,
    pub biases: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            weights: model
                .weights
                .iter()
                .map(|w| DenseMatrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.add_assign(b);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Same ordering as [`MlpModel::params_flat`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(DenseMatrix::all_finite)
            && self.biases.iter().flatten().all(|v| v.is_finite())
    }
}

/// Source samples with one-hot labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    inputs: DenseMatrix,
    labels: DenseMatrix,
}

impl LabeledBatch {
    /// `inputs` is `d₀ × n`, `labels` is `n × K` one-hot.
    pub fn new(inputs: DenseMatrix, labels: DenseMatrix) -> Result<Self> {
        if inputs.cols() != labels.rows() {
            return Err(MecaError::BadShape(format!(
                "{} samples but {} label rows",
                inputs.cols(),
                labels.rows()
            )));
        }
        check_one_hot(&labels)?;
        Ok(Self { inputs, labels })
    }

    pub fn inputs(&self) -> &DenseMatrix {
        &self.inputs
    }

    pub fn labels(&self) -> &DenseMatrix {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.inputs.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Target samples, no labels.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledBatch {
    inputs: DenseMatrix,
}

impl UnlabeledBatch {
    pub fn new(inputs: DenseMatrix) -> Result<Self> {
        if !inputs.all_finite() {
            return Err(MecaError::BadShape("non-finite input".into()));
        }
        Ok(Self { inputs })
    }

    pub fn inputs(&self) -> &DenseMatrix {
        &self.inputs
    }

    pub fn len(&self) -> usize {
        self.inputs.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Every row must contain exactly one `1` and zeros elsewhere.
pub fn check_one_hot(labels: &DenseMatrix) -> Result<()> {
    for r in 0..labels.rows() {
        let row = labels.row(r);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(MecaError::BadShape(format!("label row {r} is not one-hot")));
        }
    }
    Ok(())
}

/// Index of the `1` in each one-hot row.
pub fn label_indices(labels: &DenseMatrix) -> Vec<usize> {
    (0..labels.rows()).map(|r| argmax(labels.row(r))).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// `pre_acts[l]` is the input to the nonlinearity of layer `l + 1`; the
    /// last one holds the logits (`K × n`).
    pub pre_acts: Vec<DenseMatrix>,
    /// `acts[0]` is the input batch, `acts[l]` the output of hidden layer `l`.
    pub acts: Vec<DenseMatrix>,
    /// Softmax probabilities, `n × K`.
    pub probs: DenseMatrix,
    alignment_layer: usize,
}

impl ForwardTrace {
    /// Activations at the alignment layer, `d × n`.
    pub fn feature_acts(&self) -> &DenseMatrix {
        &self.acts[self.alignment_layer]
    }

    pub fn alignment_layer(&self) -> usize {
        self.alignment_layer
    }

    pub fn batch_size(&self) -> usize {
        self.probs.rows()
    }
}

/// Forward pass. `alignment_layer` indexes `layer_sizes` and must name a
/// non-output layer; `0` captures the raw inputs.
pub fn forward(
    model: &MlpModel,
    inputs: &DenseMatrix,
    alignment_layer: usize,
) -> Result<ForwardTrace> {
    if inputs.rows() != model.input_dim() {
        return Err(MecaError::BadShape(format!(
            "input width {} but model expects {}",
            inputs.rows(),
            model.input_dim()
        )));
    }
    if inputs.cols() == 0 {
        return Err(MecaError::BadShape("empty batch".into()));
    }
    if alignment_layer >= model.num_layers() {
        return Err(MecaError::BadShape(format!(
            "alignment layer {alignment_layer} is not a hidden layer of {:?}",
            model.layer_sizes
        )));
    }
    let n = inputs.cols();
    let last = model.num_layers() - 1;
    let mut acts = Vec::with_capacity(model.num_layers());
    let mut pre_acts = Vec::with_capacity(model.num_layers());
    acts.push(inputs.clone());
    for (l, (w, b)) in model.weights.iter().zip(&model.biases).enumerate() {
        let mut z = w.matmul(&acts[l]);
        for (r, &bias) in b.iter().enumerate() {
            for v in z.row_mut(r) {
                *v += bias;
            }
        }
        if l < last {
            acts.push(z.map(|v| model.hidden_activation.apply(v)));
        }
        pre_acts.push(z);
    }
    let logits = pre_acts.last().unwrap();
    let k = logits.rows();
    let mut probs = DenseMatrix::zeros(n, k);
    for i in 0..n {
        let col: Vec<f64> = (0..k).map(|c| logits.get(c, i)).collect();
        let max = col.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let exps: Vec<f64> = col.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (c, e) in exps.into_iter().enumerate() {
            probs.set(i, c, e / sum);
        }
    }
    Ok(ForwardTrace {
        pre_acts,
        acts,
        probs,
        alignment_layer,
    })
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Batch-summed cross-entropy `−Σᵢ ⟨zᵢ, log f(xᵢ)⟩`.
pub fn cross_entropy(probs: &DenseMatrix, labels: &DenseMatrix) -> Result<f64> {
    if probs.shape() != labels.shape() {
        return Err(MecaError::BadShape(format!(
            "probs {:?} vs labels {:?}",
            probs.shape(),
            labels.shape()
        )));
    }
    Ok(0.0
        - probs
            .as_slice()
            .iter()
            .zip(labels.as_slice())
            .filter(|(_, &z)| z != 0.0)
            .map(|(&p, &z)| z * clamp_prob(p).ln())
            .sum::<f64>())
}

/// Gradient of [`cross_entropy`] with respect to the probabilities. Zero
/// where the clamp is active.
pub fn grad_cross_entropy_wrt_probs(
    probs: &DenseMatrix,
    labels: &DenseMatrix,
) -> Result<DenseMatrix> {
    if probs.shape() != labels.shape() {
        return Err(MecaError::BadShape(format!(
            "probs {:?} vs labels {:?}",
            probs.shape(),
            labels.shape()
        )));
    }
    Ok(probs.zip_map(labels, |p, z| {
        if z == 0.0 || !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
            0.0
        } else {
            -z / p
        }
    }))
}

fn check_stochastic(probs: &DenseMatrix) -> Result<()> {
    for r in 0..probs.rows() {
        let row = probs.row(r);
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(MecaError::BadShape(format!(
                "probability row {r} is not a distribution (sum {s})"
            )));
        }
    }
    Ok(())
}

/// Batch-summed Shannon entropy `−Σₜ ⟨f(xₜ), log f(xₜ)⟩` with `0 log 0 = 0`.
///
/// Only the lower clamp is applied here, so a Dirac row contributes exactly
/// zero.
pub fn entropy(probs: &DenseMatrix) -> Result<f64> {
    check_stochastic(probs)?;
    Ok(0.0
        - probs
            .as_slice()
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.max(PROB_CLAMP).ln())
            .sum::<f64>())
}

/// Gradient of [`entropy`]: `−(1 + log p)` per entry, and `−log(clamp)`
/// below the clamp where the logarithm is frozen.
pub fn grad_entropy_wrt_probs(probs: &DenseMatrix) -> Result<DenseMatrix> {
    check_stochastic(probs)?;
    Ok(probs.map(|p| {
        if p < PROB_CLAMP {
            -PROB_CLAMP.ln()
        } else {
            -(1.0 + p.ln())
        }
    }))
}

/// Backward pass.
///
/// `grad_probs` (`n × K`) is the loss gradient at the softmax output and
/// `grad_features` (`d × n`) an extra gradient injected at the alignment
/// layer's activations. Either may be omitted; contributions accumulate
/// through the shared layers.
pub fn backward(
    model: &MlpModel,
    trace: &ForwardTrace,
    grad_probs: Option<&DenseMatrix>,
    grad_features: Option<&DenseMatrix>,
) -> Result<ParamGrads> {
    let n = trace.batch_size();
    let k = model.num_classes();
    if trace.pre_acts.len() != model.num_layers() {
        return Err(MecaError::BadShape(
            "trace does not match model depth".into(),
        ));
    }
    if let Some(g) = grad_probs {
        if g.shape() != (n, k) {
            return Err(MecaError::BadShape(format!(
                "probability gradient {:?}, expected {:?}",
                g.shape(),
                (n, k)
            )));
        }
    }
    if let Some(g) = grad_features {
        if g.shape() != trace.feature_acts().shape() {
            return Err(MecaError::BadShape(format!(
                "feature gradient {:?}, expected {:?}",
                g.shape(),
                trace.feature_acts().shape()
            )));
        }
    }

    // Softmax Jacobian: dz_c = p_c (g_c − ⟨g, p⟩), laid out K × n.
    let mut dz = DenseMatrix::zeros(k, n);
    if let Some(g) = grad_probs {
        for i in 0..n {
            let p = trace.probs.row(i);
            let gi = g.row(i);
            let inner: f64 = p.iter().zip(gi).map(|(a, b)| a * b).sum();
            for c in 0..k {
                dz.set(c, i, p[c] * (gi[c] - inner));
            }
        }
    }

    let mut grads = ParamGrads::zeros_like(model);
    for l in (0..model.num_layers()).rev() {
        grads.weights[l] = dz.matmul_t(&trace.acts[l]);
        grads.biases[l] = dz.row_sums();
        if l == 0 {
            break;
        }
        // Gradient at acts[l], the output of hidden layer l.
        let mut da = model.weights[l].t_matmul(&dz);
        if l == trace.alignment_layer {
            if let Some(g) = grad_features {
                da.add_assign(g);
            }
        }
        let z = &trace.pre_acts[l - 1];
        let a = &trace.acts[l];
        let act = model.hidden_activation;
        dz = DenseMatrix::from_raw(
            da.rows(),
            da.cols(),
            da.as_slice()
                .iter()
                .zip(z.as_slice().iter().zip(a.as_slice()))
                .map(|(&g, (&zv, &av))| g * act.derivative(zv, av))
                .collect(),
        );
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        let a = init_model(&[2, 8, 64, 3], 7).unwrap();
        let b = init_model(&[2, 8, 64, 3], 7).unwrap();
        let c = init_model(&[2, 8, 64, 3], 8).unwrap();
        assert_eq!(a.weights().len(), 3);
        assert_eq!(a.params_flat(), b.params_flat());
        assert_ne!(a.params_flat(), c.params_flat());
        assert!(a.biases().iter().flatten().all(|&v| v == 0.0));
        let limit = (6.0_f64 / 72.0).sqrt();
        assert!(a.weights()[1].as_slice().iter().all(|v| v.abs() <= limit));
        assert!(matches!(init_model(&[2], 7), Err(MecaError::BadShape(_))));
    }

    #[test]
    fn zero_model_gives_uniform_probs() {
        let mut model = init_model(&[3, 5, 4], 1).unwrap();
        model
            .set_params_flat(&vec![0.0; model.num_params()])
            .unwrap();
        let x = m(&[&[1.0, -2.0], &[0.5, 3.0], &[9.0, 0.0]]);
        let t = forward(&model, &x, 1).unwrap();
        for r in 0..2 {
            assert_eq!(t.probs.row(r), &[0.25; 4]);
        }
    }

    #[test]
    fn single_linear_layer_softmax() {
        let model = MlpModel::from_parameters(
            vec![DenseMatrix::identity(3)],
            vec![vec![0.0; 3]],
            Activation::Relu,
        )
        .unwrap();
        let t = forward(&model, &DenseMatrix::identity(3), 0).unwrap();
        let e = std::f64::consts::E;
        let (hi, lo) = (e / (e + 2.0), 1.0 / (e + 2.0));
        for i in 0..3 {
            for c in 0..3 {
                let want = if c == i { hi } else { lo };
                assert!((t.probs.get(i, c) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let model = init_model(&[3, 5, 4], 1).unwrap();
        assert!(forward(&model, &DenseMatrix::zeros(2, 4), 1).is_err());
        assert!(forward(&model, &DenseMatrix::zeros(3, 4), 2).is_err());
        assert!(forward(&model, &DenseMatrix::zeros(3, 0), 1).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let labels = m(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        assert!(cross_entropy(&labels, &labels).unwrap() < 1e-11);
        let uniform = DenseMatrix::from_raw(3, 4, vec![0.25; 12]);
        let l4 = DenseMatrix::from_rows(&[
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ])
        .unwrap();
        assert!((cross_entropy(&uniform, &l4).unwrap() - 3.0 * 4f64.ln()).abs() < 1e-14);
        let p = m(&[&[0.7, 0.2, 0.1]]);
        let z = m(&[&[1.0, 0.0, 0.0]]);
        assert!((cross_entropy(&p, &z).unwrap() + 0.7f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&p, &labels).is_err());
    }

    #[test]
    fn entropy_examples() {
        let one_hot = m(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0]]);
        assert_eq!(entropy(&one_hot).unwrap(), 0.0);
        let uniform = DenseMatrix::from_raw(2, 4, vec![0.25; 8]);
        assert!((entropy(&uniform).unwrap() - 2.0 * 4f64.ln()).abs() < 1e-14);
        let half = m(&[&[0.5, 0.5, 0.0, 0.0]]);
        assert!((entropy(&half).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(entropy(&m(&[&[0.5, 0.6]])).is_err());
    }

    #[test]
    fn entropy_gradient_examples() {
        let g = grad_entropy_wrt_probs(&m(&[&[0.5, 0.5]])).unwrap();
        let want = -(1.0 + 0.5f64.ln());
        assert_eq!(g.row(0), &[want, want]);
        let g = grad_entropy_wrt_probs(&m(&[&[1.0, 0.0]])).unwrap();
        assert!(g.all_finite());
    }

    #[test]
    fn entropy_gradient_matches_finite_differences() {
        let p = m(&[&[0.2, 0.3, 0.5], &[0.6, 0.1, 0.3]]);
        let g = grad_entropy_wrt_probs(&p).unwrap();
        // Entropy is a sum of independent per-entry terms.
        let h = 1e-6;
        for r in 0..2 {
            for c in 0..3 {
                let x = p.get(r, c);
                let f = |v: f64| -v * v.ln();
                let fd = (f(x + h) - f(x - h)) / (2.0 * h);
                let rel = (fd - g.get(r, c)).abs() / g.get(r, c).abs();
                assert!(rel < 1e-5, "{rel}");
            }
        }
    }

    #[test]
    fn backward_with_no_gradient_is_zero() {
        let model = init_model(&[3, 5, 4, 3], 2).unwrap();
        let x = DenseMatrix::from_raw(3, 4, (0..12).map(|i| i as f64 * 0.1 - 0.5).collect());
        let t = forward(&model, &x, 2).unwrap();
        let g = backward(&model, &t, None, None).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        let zp = DenseMatrix::zeros(4, 3);
        let zf = DenseMatrix::zeros(4, 4);
        let g = backward(&model, &t, Some(&zp), Some(&zf)).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(backward(&model, &t, Some(&DenseMatrix::zeros(3, 3)), None).is_err());
    }

    #[test]
    fn model_binary_round_trip() {
        let model = MlpModel::init(&[4, 6, 3], Activation::Tanh, 11).unwrap();
        let mut buf = Vec::new();
        model.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"MECA");
        assert_eq!(buf.len(), 4 + 4 + 4 + 3 * 4 + 4 + model.num_params() * 8);
        let back = MlpModel::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, model);
        buf[0] = b'X';
        assert!(matches!(
            MlpModel::read_from(buf.as_slice()),
            Err(MecaError::BadMagic { .. })
        ));
    }

    #[test]
    fn one_hot_checks() {
        assert!(check_one_hot(&m(&[&[0.0, 1.0]])).is_ok());
        assert!(check_one_hot(&m(&[&[1.0, 1.0]])).is_err());
        assert!(check_one_hot(&m(&[&[0.5, 0.5]])).is_err());
        assert_eq!(argmax(&[0.3, 0.3, 0.1]), 0);
    }
}
