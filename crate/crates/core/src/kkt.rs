//! DKKT losses: cross-entropy margin, primal loss (gated and ungated), the
//! lambda-weighted parameter-gradient aggregate, the stationarity loss, and
//! dual-feasibility projection.
//!
//! The stationarity loss measures how far the trained parameters are from
//! the negative lambda-weighted sum of per-sample parameter gradients, as a
//! cosine distance on the flattened vectors. Its pixel gradient therefore
//! differentiates through a created-graph parameter gradient.

use crate::nn::{forward, ModelError, ModelSpec, ParamVars, Parameters};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KktError {
    #[error("invalid synthetic set: {0}")]
    InvalidSet(String),
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
    #[error("stationarity loss needs a nontrivial model (zero parameter norm)")]
    ZeroTheta,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// The optimized artifact: images, labels, and per-image Lagrange
/// multipliers.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSet {
    /// (n, c, h, w) pixel tensor.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub lambdas: Vec<f64>,
}

impl SyntheticSet {
    pub fn new(images: Tensor, labels: Vec<usize>, lambdas: Vec<f64>) -> Result<Self, KktError> {
        let set = SyntheticSet { images, labels, lambdas };
        set.check_consistent()?;
        Ok(set)
    }

    fn check_consistent(&self) -> Result<(), KktError> {
        let shape = self.images.shape();
        if shape.len() != 4 {
            return Err(KktError::InvalidSet(format!(
                "images must be (n, c, h, w), got {shape:?}"
            )));
        }
        if self.labels.len() != shape[0] || self.lambdas.len() != shape[0] {
            return Err(KktError::InvalidSet(format!(
                "{} images, {} labels, {} lambdas",
                shape[0],
                self.labels.len(),
                self.lambdas.len()
            )));
        }
        Ok(())
    }

    /// Full validation against a class count: label range plus dual
    /// feasibility.
    pub fn validate(&self, classes: usize) -> Result<(), KktError> {
        self.check_consistent()?;
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= classes) {
            return Err(KktError::InvalidSet(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        if let Some(&bad) = self.lambdas.iter().find(|&&l| l < 0.0) {
            return Err(KktError::InvalidSet(format!("negative lambda {bad}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Contiguous (start, len) row ranges per class, requiring class-major
    /// layout (all synthesis initializers produce it).
    pub fn class_ranges(&self, classes: usize) -> Result<Vec<Option<(usize, usize)>>, KktError> {
        let mut ranges: Vec<Option<(usize, usize)>> = vec![None; classes];
        for (i, &y) in self.labels.iter().enumerate() {
            if y >= classes {
                return Err(KktError::InvalidSet(format!("label {y} out of range")));
            }
            match &mut ranges[y] {
                None => ranges[y] = Some((i, 1)),
                Some((start, len)) => {
                    if *start + *len != i {
                        return Err(KktError::InvalidSet(
                            "labels are not grouped by class".into(),
                        ));
                    }
                    *len += 1;
                }
            }
        }
        Ok(ranges)
    }

    pub fn dual_feasible(&self) -> bool {
        self.lambdas.iter().all(|&l| l >= 0.0)
    }
}

/// Clamp all multipliers at zero; everything else untouched. Idempotent.
pub fn project_lambdas(mut set: SyntheticSet) -> SyntheticSet {
    for l in &mut set.lambdas {
        if *l < 0.0 {
            *l = 0.0;
        }
    }
    set
}

/// Loss term weights: alpha scales stationarity inside DKKT, beta the
/// augmented DKKT term, gamma the distribution-matching term.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self, KktError> {
        let w = LossWeights { alpha, beta, gamma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), KktError> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(KktError::InvalidWeights(format!("{self:?} has a negative weight")));
        }
        Ok(())
    }
}

/// Cross-entropy loss and margin of one logit row: the margin is the
/// negative loss, `logits[y] - logsumexp(logits)`.
pub fn ce_margin(logits: &Tensor, y: usize) -> Result<(f64, f64), KktError> {
    let c = logits.numel();
    if y >= c {
        return Err(KktError::InvalidSet(format!("label {y} out of range for {c} logits")));
    }
    let data = logits.data();
    let m = data.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + data.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    let loss = lse - data[y];
    Ok((loss, -loss))
}

/// Per-sample cross-entropy column (n, 1) from logits (n, C).
pub fn batch_ce<'t>(
    tape: &'t Tape,
    logits: Var<'t>,
    labels: &[usize],
) -> Result<Var<'t>, KktError> {
    let s = logits.shape();
    let (n, c) = (s[0], s[1]);
    if labels.len() != n {
        return Err(KktError::InvalidSet(format!("{} labels for {n} logit rows", labels.len())));
    }
    let mut onehot = vec![0.0; n * c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(KktError::InvalidSet(format!("label {y} out of range")));
        }
        onehot[i * c + y] = 1.0;
    }
    let picked = logits
        .mul(tape.leaf(Tensor::from_vec(vec![n, c], onehot)?))?
        .sum_to_shape(&[n, 1])?;
    Ok(logits.log_sum_exp()?.sub(picked)?)
}

/// Per-sample gate: 0 where the argmax prediction equals the label, 1
/// elsewhere. Computed from values (argmax ties go to the lowest class) and
/// applied as a stop-gradient mask.
fn correctness_gate(logits: &Tensor, labels: &[usize]) -> Tensor {
    let s = logits.shape();
    let (n, c) = (s[0], s[1]);
    let mut mask = vec![0.0; n];
    for i in 0..n {
        let row = &logits.data()[i * c..(i + 1) * c];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        mask[i] = if best == labels[i] { 0.0 } else { 1.0 };
    }
    Tensor::from_vec(vec![n, 1], mask).expect("mask shape")
}

/// Mean cross-entropy of the synthetic images under the fixed model; the
/// gated variant zeroes per-sample terms that are already classified
/// correctly (mean over all n either way).
pub fn primal_loss<'t>(
    tape: &'t Tape,
    spec: &ModelSpec,
    theta: &ParamVars<'t>,
    images: Var<'t>,
    labels: &[usize],
    gated: bool,
) -> Result<Var<'t>, KktError> {
    let logits = forward(spec, theta, images)?;
    let ce = batch_ce(tape, logits, labels)?;
    let n = labels.len() as f64;
    let summed = if gated {
        let gate = tape.leaf(correctness_gate(&logits.value(), labels));
        ce.mul(gate)?.sum_all()
    } else {
        ce.sum_all()
    };
    Ok(summed.scale(1.0 / n))
}

/// Flattened `-sum_i lambda_i * d/dtheta L(Phi(x_i), y_i)`, kept
/// differentiable with respect to both images and lambdas via create-graph
/// gradients.
pub fn aggregated_gradient<'t>(
    tape: &'t Tape,
    spec: &ModelSpec,
    theta: &ParamVars<'t>,
    images: Var<'t>,
    labels: &[usize],
    lambdas: Var<'t>,
) -> Result<Var<'t>, KktError> {
    let logits = forward(spec, theta, images)?;
    let ce = batch_ce(tape, logits, labels)?;
    let n = labels.len();
    let weighted = ce.mul(lambdas.reshape(&[n, 1])?)?.sum_all();
    let grads = weighted.grad(&theta.vars, true)?;
    let flat: Vec<Var<'t>> = grads
        .iter()
        .map(|g| g.reshape(&[g.numel()]))
        .collect::<Result<_, _>>()?;
    Ok(tape.concat(&flat, 0)?.scale(-1.0))
}

/// Cosine distance `1 - cos(flatten(theta*), agg)` in [0, 2]; returns 1 when
/// the aggregate is the zero vector (declared convention). Errors when the
/// model parameters themselves have zero norm.
pub fn stationarity_loss<'t>(
    tape: &'t Tape,
    theta_flat: &Tensor,
    agg: Var<'t>,
) -> Result<Var<'t>, KktError> {
    if theta_flat.numel() != agg.numel() {
        return Err(KktError::Tensor(TensorError::ShapeMismatch {
            op: "stationarity_loss",
            lhs: theta_flat.shape().to_vec(),
            rhs: agg.shape(),
        }));
    }
    let theta_norm = theta_flat.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if theta_norm == 0.0 {
        return Err(KktError::ZeroTheta);
    }
    let agg_norm_sq: f64 = agg.value().data().iter().map(|v| v * v).sum();
    if agg_norm_sq == 0.0 {
        return Ok(tape.leaf(Tensor::scalar(1.0)));
    }
    let u = tape.leaf(theta_flat.clone());
    let cos = u
        .dot(agg)?
        .mul(agg.norm_sq().sqrt().recip())?
        .scale(1.0 / theta_norm);
    Ok(cos.neg().add_scalar(1.0))
}

/// The two DKKT terms and their alpha-weighted combination.
pub struct DkktTerms<'t> {
    pub primal: Var<'t>,
    pub stationarity: Var<'t>,
    pub total: Var<'t>,
}

/// `L_primal + alpha * L_stat` on the given images/lambdas, differentiable
/// with respect to both.
#[allow(clippy::too_many_arguments)]
pub fn dkkt_loss<'t>(
    tape: &'t Tape,
    spec: &ModelSpec,
    theta: &ParamVars<'t>,
    theta_flat: &Tensor,
    images: Var<'t>,
    labels: &[usize],
    lambdas: Var<'t>,
    alpha: f64,
    gated: bool,
) -> Result<DkktTerms<'t>, KktError> {
    let primal = primal_loss(tape, spec, theta, images, labels, gated)?;
    let agg = aggregated_gradient(tape, spec, theta, images, labels, lambdas)?;
    let stationarity = stationarity_loss(tape, theta_flat, agg)?;
    let total = primal.add(stationarity.scale(alpha))?;
    Ok(DkktTerms { primal, stationarity, total })
}

/// Value-level DKKT evaluation of a synthetic set.
pub fn dkkt_loss_value(
    spec: &ModelSpec,
    theta: &Parameters,
    set: &SyntheticSet,
    alpha: f64,
    gated: bool,
) -> Result<f64, KktError> {
    set.validate(spec.classes)?;
    let tape = Tape::new();
    let tv = ParamVars::leaf(&tape, theta);
    let images = tape.leaf(set.images.clone());
    let lambdas = tape.leaf(Tensor::from_vec(vec![set.len()], set.lambdas.clone())?);
    let terms = dkkt_loss(
        &tape,
        spec,
        &tv,
        &theta.flatten(),
        images,
        &set.labels,
        lambdas,
        alpha,
        gated,
    )?;
    Ok(terms.total.item())
}

/// Synthetic set with the default uniform multipliers (1/n each).
pub fn uniform_lambda_set(images: Tensor, labels: Vec<usize>) -> Result<SyntheticSet, KktError> {
    let n = labels.len();
    SyntheticSet::new(images, labels, vec![1.0 / n as f64; n])
}
