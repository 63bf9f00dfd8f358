//! Evaluation harness: SAM training of fresh models on synthetic sets and
//! test-accuracy measurement.
//!
//! The sharpness-aware step takes the gradient at an adversarially perturbed
//! parameter point: eps = rho * g / |g| at theta, then theta <- theta - lr *
//! grad(theta + eps). With rho = 0 (or a zero gradient) the second pass is
//! skipped, which makes the reduction to vanilla descent bitwise.

use crate::data::{DataError, LabeledSet};
use crate::kkt::{batch_ce, KktError, SyntheticSet};
use crate::nn::{forward, forward_logits, init_params, ModelError, ModelSpec, ParamVars, Parameters};
use crate::rng::{stream_rng, STREAM_EVAL_SHUFFLE};
use crate::tensor::{Tape, Tensor, TensorError};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid sam config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error("non-finite gradient in sam step")]
    NonFiniteGradient,
    #[error("empty training set")]
    EmptySet,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Kkt(#[from] KktError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Sharpness-aware minimization settings. `batch = 0` selects the default
/// policy: full batch up to 512 samples, mini-batches of 256 above.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamConfig {
    pub lr: f64,
    pub rho: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl SamConfig {
    /// The published evaluation protocol: lr 0.1, rho 0.001.
    pub fn published(epochs: usize, seed: u64) -> Self {
        SamConfig { lr: 0.1, rho: 0.001, epochs, batch: 0, seed }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.lr <= 0.0 {
            return Err(EvalError::InvalidConfig("learning rate must be > 0".into()));
        }
        if self.rho < 0.0 {
            return Err(EvalError::InvalidConfig("rho must be >= 0".into()));
        }
        Ok(())
    }
}

/// One SAM update. `grad_fn` returns the loss gradient of every parameter
/// tensor (canonical order) at an arbitrary parameter point.
pub fn sam_step<F>(
    params: &Parameters,
    mut grad_fn: F,
    lr: f64,
    rho: f64,
) -> Result<Parameters, EvalError>
where
    F: FnMut(&Parameters) -> Result<Vec<Tensor>, EvalError>,
{
    let g = grad_fn(params)?;
    let norm_sq: f64 = g.iter().flat_map(|t| t.data()).map(|v| v * v).sum();
    if !norm_sq.is_finite() {
        return Err(EvalError::NonFiniteGradient);
    }
    let g_final = if rho == 0.0 || norm_sq == 0.0 {
        g
    } else {
        let scale = rho / norm_sq.sqrt();
        let mut i = 0usize;
        let perturbed = params.map_tensors(|_, t| {
            let gt = &g[i];
            i += 1;
            let data = t
                .data()
                .iter()
                .zip(gt.data())
                .map(|(p, gv)| p + scale * gv)
                .collect();
            Tensor::from_vec(t.shape().to_vec(), data).expect("same shape")
        });
        let g2 = grad_fn(&perturbed)?;
        if g2.iter().any(|t| !t.all_finite()) {
            return Err(EvalError::NonFiniteGradient);
        }
        g2
    };
    let mut i = 0usize;
    Ok(params.map_tensors(|_, t| {
        let gt = &g_final[i];
        i += 1;
        let data = t
            .data()
            .iter()
            .zip(gt.data())
            .map(|(p, gv)| p - lr * gv)
            .collect();
        Tensor::from_vec(t.shape().to_vec(), data).expect("same shape")
    }))
}

fn ce_grads(
    spec: &ModelSpec,
    params: &Parameters,
    images: &Tensor,
    labels: &[usize],
) -> Result<(f64, Vec<Tensor>), EvalError> {
    let tape = Tape::new();
    let pv = ParamVars::leaf(&tape, params);
    let batch = tape.leaf(images.clone());
    let logits = forward(spec, &pv, batch)?;
    let loss = batch_ce(&tape, logits, labels)?.mean_all();
    let grads = loss.grad(&pv.vars, false)?;
    Ok((loss.item(), grads.into_iter().map(|g| g.value()).collect()))
}

fn train_loop(
    spec: &ModelSpec,
    images: &Tensor,
    labels: &[usize],
    cfg: &SamConfig,
) -> Result<Parameters, EvalError> {
    cfg.validate()?;
    spec.validate()?;
    let n = labels.len();
    if n == 0 {
        return Err(EvalError::EmptySet);
    }
    let mut params = init_params(spec, cfg.seed)?;
    let batch_size = match cfg.batch {
        0 => {
            if n <= 512 {
                n
            } else {
                256
            }
        }
        b => b.min(n),
    };
    let il: usize = images.shape()[1..].iter().product();
    let image_dims = &images.shape()[1..];

    for epoch in 0..cfg.epochs {
        let order: Vec<usize> = if batch_size == n {
            (0..n).collect()
        } else {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut stream_rng(cfg.seed, STREAM_EVAL_SHUFFLE, epoch as u64));
            idx
        };
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(batch_size) {
            let mut data = Vec::with_capacity(chunk.len() * il);
            let mut batch_labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                data.extend_from_slice(&images.data()[i * il..(i + 1) * il]);
                batch_labels.push(labels[i]);
            }
            let mut shape = vec![chunk.len()];
            shape.extend_from_slice(image_dims);
            let batch = Tensor::from_vec(shape, data)?;
            let mut last_loss = 0.0;
            params = sam_step(
                &params,
                |p| {
                    let (loss, grads) = ce_grads(spec, p, &batch, &batch_labels)?;
                    last_loss = loss;
                    Ok(grads)
                },
                cfg.lr,
                cfg.rho,
            )?;
            epoch_loss += last_loss;
        }
        if !epoch_loss.is_finite() {
            return Err(EvalError::NonFinite { epoch });
        }
    }
    Ok(params)
}

/// Train a fresh model on a synthetic set with SAM; deterministic per seed.
/// `epochs = 0` returns the fresh initialization.
pub fn train_on_synthetic(
    spec: &ModelSpec,
    set: &SyntheticSet,
    cfg: &SamConfig,
) -> Result<Parameters, EvalError> {
    set.validate(spec.classes)?;
    train_loop(spec, &set.images, &set.labels, cfg)
}

/// Train a fresh model on real labeled data (the pretraining path; rho = 0
/// gives plain minibatch SGD).
pub fn train_classifier(
    spec: &ModelSpec,
    data: &LabeledSet,
    cfg: &SamConfig,
) -> Result<Parameters, EvalError> {
    if data.is_empty() {
        return Err(EvalError::EmptySet);
    }
    train_loop(spec, &data.images, &data.labels, cfg)
}

/// Percentage of argmax-correct predictions; ties break toward the lowest
/// class index.
pub fn test_accuracy(
    spec: &ModelSpec,
    params: &Parameters,
    test: &LabeledSet,
) -> Result<f64, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let mut correct = 0usize;
    // fixed-size chunks keep memory flat on big test sets
    let il = test.image_len();
    let (c, h, w) = test.image_dims();
    let chunk = 512usize;
    for start in (0..test.len()).step_by(chunk) {
        let end = (start + chunk).min(test.len());
        let batch = Tensor::from_vec(
            vec![end - start, c, h, w],
            test.images.data()[start * il..end * il].to_vec(),
        )?;
        let logits = forward_logits(spec, params, &batch)?;
        let classes = spec.classes;
        for i in 0..end - start {
            let row = &logits.data()[i * classes..(i + 1) * classes];
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == test.labels[start + i] {
                correct += 1;
            }
        }
    }
    Ok(100.0 * correct as f64 / test.len() as f64)
}

/// One evaluation outcome, appended to line-delimited metrics files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub ipc: usize,
    pub pipc: String,
    pub method: String,
    pub seed: u64,
    pub accuracy: f64,
    pub epochs: usize,
    pub wall_ms: u64,
}

impl MetricsRecord {
    pub fn append_jsonl(&self, path: &Path) -> Result<(), std::io::Error> {
        use std::io::Write;
        let mut line = serde_json::to_string(self).expect("record serializes");
        line.push('\n');
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        f.write_all(line.as_bytes())
    }

    pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRecord>, std::io::Error> {
        let text = std::fs::read_to_string(path)?;
        let mut out = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            out.push(serde_json::from_str(line).map_err(|e| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string())
            })?);
        }
        Ok(out)
    }
}

/// Mean and sample standard deviation (the "+/-" convention of reported
/// tables).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kkt::uniform_lambda_set;

    #[test]
    fn sam_analytic_one_step_quadratic() {
        // f(w) = w^2/2, w = 1, lr = 0.1, rho = 0.001 -> w' = 1 - 0.1*1.001
        let params = Parameters::new(vec![("w".into(), Tensor::from_vec(vec![1], vec![1.0]).unwrap())]);
        let updated = sam_step(
            &params,
            |p| Ok(vec![p.get("w").unwrap().clone()]),
            0.1,
            0.001,
        )
        .unwrap();
        let w = updated.get("w").unwrap().data()[0];
        assert!((w - 0.8999).abs() <= 1e-12, "{w}");
    }

    #[test]
    fn sam_rho_zero_is_vanilla_bitwise_and_zero_grad_is_identity() {
        let params = Parameters::new(vec![(
            "w".into(),
            Tensor::from_vec(vec![3], vec![0.3, -0.7, 1.1]).unwrap(),
        )]);
        let grad = Tensor::from_vec(vec![3], vec![0.11, -0.02, 0.5]).unwrap();
        let g2 = grad.clone();
        let sam = sam_step(&params, |_| Ok(vec![g2.clone()]), 0.05, 0.0).unwrap();
        let vanilla = params.map_tensors(|_, t| {
            let data = t.data().iter().zip(grad.data()).map(|(p, g)| p - 0.05 * g).collect();
            Tensor::from_vec(t.shape().to_vec(), data).unwrap()
        });
        assert!(sam.get("w").unwrap().bit_eq(vanilla.get("w").unwrap()));

        let frozen = sam_step(&params, |_| Ok(vec![Tensor::zeros(&[3])]), 0.05, 0.01).unwrap();
        assert!(frozen.get("w").unwrap().bit_eq(params.get("w").unwrap()));
    }

    #[test]
    fn trains_two_separable_points_to_perfection() {
        let spec = ModelSpec::mlp((2, 1, 1), 2, 4, 2);
        let images = Tensor::from_vec(vec![2, 2, 1, 1], vec![1.0, 0.5, -1.0, -0.5]).unwrap();
        let set = uniform_lambda_set(images.clone(), vec![1, 0]).unwrap();
        let cfg = SamConfig::published(200, 3);
        let params = train_on_synthetic(&spec, &set, &cfg).unwrap();
        let train = LabeledSet::new(images, vec![1, 0], 2).unwrap();
        assert_eq!(test_accuracy(&spec, &params, &train).unwrap(), 100.0);
    }

    #[test]
    fn training_is_deterministic_and_epochs_zero_is_fresh_init() {
        let spec = ModelSpec::mlp((1, 2, 2), 2, 3, 2);
        let images = Tensor::from_vec(
            vec![4, 1, 2, 2],
            (0..16).map(|i| (i as f64) * 0.1 - 0.8).collect(),
        )
        .unwrap();
        let set = uniform_lambda_set(images, vec![0, 0, 1, 1]).unwrap();
        let cfg = SamConfig::published(30, 5);
        let a = train_on_synthetic(&spec, &set, &cfg).unwrap();
        let b = train_on_synthetic(&spec, &set, &cfg).unwrap();
        assert_eq!(a, b);

        let zero = SamConfig::published(0, 5);
        let fresh = train_on_synthetic(&spec, &set, &zero).unwrap();
        assert_eq!(fresh, init_params(&spec, 5).unwrap());
    }

    #[test]
    fn constant_logits_give_first_class_share_and_shuffle_invariance() {
        let spec = ModelSpec::mlp((1, 1, 1), 10, 1, 1);
        // zero params -> constant zero logits -> argmax tie -> class 0
        let params = init_params(&spec, 0)
            .unwrap()
            .map_tensors(|_, t| Tensor::zeros(t.shape()));
        let n = 40;
        let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
        let images = Tensor::ones(&[n, 1, 1, 1]);
        let balanced = LabeledSet::new(images.clone(), labels.clone(), 10).unwrap();
        assert_eq!(test_accuracy(&spec, &params, &balanced).unwrap(), 10.0);

        // shuffled test set gives the same accuracy
        let perm: Vec<usize> = (0..n).rev().collect();
        let shuffled = balanced.subset(&perm).unwrap();
        assert_eq!(
            test_accuracy(&spec, &params, &balanced).unwrap(),
            test_accuracy(&spec, &params, &shuffled).unwrap()
        );
    }

    #[test]
    fn memorizer_scores_100_on_its_training_set() {
        let spec = ModelSpec::mlp((2, 1, 1), 2, 8, 2);
        let images = Tensor::from_vec(
            vec![4, 2, 1, 1],
            vec![1.0, 1.0, 0.8, 1.2, -1.0, -1.0, -0.7, -1.3],
        )
        .unwrap();
        let set = uniform_lambda_set(images.clone(), vec![1, 1, 0, 0]).unwrap();
        let params = train_on_synthetic(&spec, &set, &SamConfig::published(300, 9)).unwrap();
        let train = LabeledSet::new(images, vec![1, 1, 0, 0], 2).unwrap();
        assert_eq!(test_accuracy(&spec, &params, &train).unwrap(), 100.0);
    }

    #[test]
    fn metrics_records_append_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        for seed in 0..3 {
            MetricsRecord {
                ipc: 1,
                pipc: "50".into(),
                method: "dm".into(),
                seed,
                accuracy: 30.0 + seed as f64,
                epochs: 300,
                wall_ms: 10,
            }
            .append_jsonl(&path)
            .unwrap();
        }
        let records = MetricsRecord::read_jsonl(&path).unwrap();
        assert_eq!(records.len(), 3);
        let accs: Vec<f64> = records.iter().map(|r| r.accuracy).collect();
        let (mean, std) = mean_std(&accs);
        assert!((mean - 31.0).abs() <= 1e-12);
        assert!((std - 1.0).abs() <= 1e-12);
    }
}
