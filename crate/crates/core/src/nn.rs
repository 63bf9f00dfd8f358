//! Model definitions, parameter initialization, and checkpoint persistence.
//!
//! Two architectures: an MLP (`depth` linear layers, relu between them) and a
//! ConvNet of `depth` blocks (3x3 conv pad 1 -> instance norm -> relu -> 2x2
//! average pool) followed by a linear head. `depth` counts linear layers for
//! the MLP, so `depth = 1` is a single linear map — the linear probe the SVM
//! oracle trains on toy data.

use crate::tensor::{Tape, Tensor, TensorError, Var};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("parameter structure mismatch: {0}")]
    StructureMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: bad magic {found:?} (expected \"DFCK\")")]
    BadMagic { found: [u8; 4] },
    #[error("corrupt checkpoint: unsupported version {found}")]
    BadVersion { found: u32 },
    #[error("corrupt checkpoint: truncated while reading {field}")]
    Truncated { field: String },
    #[error("corrupt checkpoint: invalid {field}")]
    Invalid { field: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Mlp,
    ConvNet,
}

/// Architecture description; together with a seed it fully determines the
/// parameter names, shapes, and initial values.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    /// Input (channels, height, width).
    pub in_shape: (usize, usize, usize),
    pub classes: usize,
    /// Hidden units (MLP) or channels (ConvNet).
    pub width: usize,
    /// Linear layers (MLP) or conv blocks (ConvNet).
    pub depth: usize,
}

impl ModelSpec {
    pub fn mlp(in_shape: (usize, usize, usize), classes: usize, width: usize, depth: usize) -> Self {
        ModelSpec { arch: Arch::Mlp, in_shape, classes, width, depth }
    }

    pub fn convnet(
        in_shape: (usize, usize, usize),
        classes: usize,
        width: usize,
        depth: usize,
    ) -> Self {
        ModelSpec { arch: Arch::ConvNet, in_shape, classes, width, depth }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.classes < 2 {
            return Err(ModelError::InvalidSpec(format!(
                "classes must be >= 2, got {}",
                self.classes
            )));
        }
        if self.width < 1 || self.depth < 1 {
            return Err(ModelError::InvalidSpec(format!(
                "width and depth must be >= 1, got width {} depth {}",
                self.width, self.depth
            )));
        }
        let (c, h, w) = self.in_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(ModelError::InvalidSpec(format!(
                "input shape must be positive, got {:?}",
                self.in_shape
            )));
        }
        if self.arch == Arch::ConvNet {
            let (mut sh, mut sw) = (h, w);
            for block in 0..self.depth {
                if sh < 2 || sw < 2 {
                    return Err(ModelError::InvalidSpec(format!(
                        "conv block {block} would pool a {sh}x{sw} map to zero extent"
                    )));
                }
                sh /= 2;
                sw /= 2;
            }
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        let (c, h, w) = self.in_shape;
        c * h * w
    }

    /// Flattened length of the feature map feeding the head (the embedding
    /// length when the head is removed).
    pub fn feature_len(&self) -> usize {
        match self.arch {
            Arch::Mlp => {
                if self.depth == 1 {
                    self.input_len()
                } else {
                    self.width
                }
            }
            Arch::ConvNet => {
                let (_, mut h, mut w) = self.in_shape;
                for _ in 0..self.depth {
                    h /= 2;
                    w /= 2;
                }
                self.width * h * w
            }
        }
    }

    /// Parameter names and shapes in canonical (construction) order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        match self.arch {
            Arch::Mlp => {
                let mut fan_in = self.input_len();
                for layer in 0..self.depth - 1 {
                    out.push((format!("fc{layer}.weight"), vec![fan_in, self.width]));
                    out.push((format!("fc{layer}.bias"), vec![self.width]));
                    fan_in = self.width;
                }
                out.push(("head.weight".into(), vec![fan_in, self.classes]));
                out.push(("head.bias".into(), vec![self.classes]));
            }
            Arch::ConvNet => {
                let mut cin = self.in_shape.0;
                for block in 0..self.depth {
                    out.push((format!("block{block}.conv.weight"), vec![self.width, cin, 3, 3]));
                    out.push((format!("block{block}.conv.bias"), vec![self.width]));
                    cin = self.width;
                }
                out.push(("head.weight".into(), vec![self.feature_len(), self.classes]));
                out.push(("head.bias".into(), vec![self.classes]));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Ordered named tensors for one model. Immutable by convention: updates
/// build a new collection.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    entries: Vec<(String, Tensor)>,
}

impl Parameters {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        Parameters { entries }
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Structural equality with a spec: same names, same shapes, same order.
    pub fn matches_spec(&self, spec: &ModelSpec) -> Result<(), ModelError> {
        let expected = spec.param_shapes();
        if expected.len() != self.entries.len() {
            return Err(ModelError::StructureMismatch(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.entries.len()
            )));
        }
        for ((en, es), (n, t)) in expected.iter().zip(&self.entries) {
            if en != n || es != t.shape() {
                return Err(ModelError::StructureMismatch(format!(
                    "expected {en} with shape {es:?}, found {n} with shape {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Concatenation of all tensors, in canonical name order, as one vector.
    pub fn flatten(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.total_len());
        for (_, t) in &self.entries {
            data.extend_from_slice(t.data());
        }
        Tensor::from_vec(vec![data.len()], data).expect("non-empty parameters")
    }

    /// Inverse of `flatten` given the owning spec.
    pub fn from_flat(spec: &ModelSpec, flat: &Tensor) -> Result<Self, ModelError> {
        let shapes = spec.param_shapes();
        let total: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if flat.numel() != total {
            return Err(ModelError::StructureMismatch(format!(
                "flat vector has {} elements, spec needs {total}",
                flat.numel()
            )));
        }
        let mut entries = Vec::with_capacity(shapes.len());
        let mut at = 0usize;
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            let data = flat.data()[at..at + n].to_vec();
            entries.push((name, Tensor::from_vec(shape, data)?));
            at += n;
        }
        Ok(Parameters { entries })
    }

    /// Map over tensors, preserving names and order.
    pub fn map_tensors(&self, mut f: impl FnMut(&str, &Tensor) -> Tensor) -> Self {
        Parameters {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), f(n, t))).collect(),
        }
    }
}

/// Fan-in-scaled uniform weights, zero biases; deterministic for a seed.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<Parameters, ModelError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (name, shape) in spec.param_shapes() {
        let t = if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            let fan_in: usize = if shape.len() == 4 {
                shape[1] * shape[2] * shape[3]
            } else {
                shape[0]
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            Tensor::rand_uniform(&shape, -bound, bound, &mut rng)
        };
        entries.push((name, t));
    }
    Ok(Parameters { entries })
}

/// Tape handles for a parameter collection, in canonical order.
pub struct ParamVars<'t> {
    names: Vec<String>,
    pub vars: Vec<Var<'t>>,
}

impl<'t> ParamVars<'t> {
    pub fn leaf(tape: &'t Tape, params: &Parameters) -> Self {
        let mut names = Vec::with_capacity(params.len());
        let mut vars = Vec::with_capacity(params.len());
        for (n, t) in params.entries() {
            names.push(n.clone());
            vars.push(tape.leaf(t.clone()));
        }
        ParamVars { names, vars }
    }

    pub fn get(&self, name: &str) -> Option<Var<'t>> {
        self.names.iter().position(|n| n == name).map(|i| self.vars[i])
    }

    fn expect(&self, name: &str) -> Result<Var<'t>, ModelError> {
        self.get(name)
            .ok_or_else(|| ModelError::StructureMismatch(format!("missing parameter {name}")))
    }
}

fn check_batch(spec: &ModelSpec, batch: &[usize]) -> Result<(), ModelError> {
    let (c, h, w) = spec.in_shape;
    if batch.len() != 4 || batch[1] != c || batch[2] != h || batch[3] != w {
        return Err(ModelError::StructureMismatch(format!(
            "batch shape {batch:?} does not match input shape (n, {c}, {h}, {w})"
        )));
    }
    Ok(())
}

/// Feature extractor: everything up to (and excluding) the linear head,
/// flattened to (n, feature_len).
pub fn features<'t>(
    spec: &ModelSpec,
    params: &ParamVars<'t>,
    batch: Var<'t>,
) -> Result<Var<'t>, ModelError> {
    check_batch(spec, &batch.shape())?;
    let n = batch.shape()[0];
    match spec.arch {
        Arch::Mlp => {
            let mut x = batch.reshape(&[n, spec.input_len()])?;
            for layer in 0..spec.depth - 1 {
                let w = params.expect(&format!("fc{layer}.weight"))?;
                let b = params.expect(&format!("fc{layer}.bias"))?;
                let z = x.matmul(w)?;
                let zs = z.shape();
                x = z.add(b.broadcast_to(&zs)?)?.relu();
            }
            Ok(x)
        }
        Arch::ConvNet => {
            let mut x = batch;
            for block in 0..spec.depth {
                let w = params.expect(&format!("block{block}.conv.weight"))?;
                let b = params.expect(&format!("block{block}.conv.bias"))?;
                let conv = x.conv2d(w, 1, 1)?;
                let cs = conv.shape();
                let bias = b.reshape(&[spec.width, 1, 1])?.broadcast_to(&cs)?;
                x = conv.add(bias)?.instance_norm(INSTANCE_NORM_EPS)?.relu().avg_pool2()?;
            }
            x.reshape(&[n, spec.feature_len()]).map_err(ModelError::from)
        }
    }
}

/// Full forward pass to logits of shape (n, classes).
pub fn forward<'t>(
    spec: &ModelSpec,
    params: &ParamVars<'t>,
    batch: Var<'t>,
) -> Result<Var<'t>, ModelError> {
    let feats = features(spec, params, batch)?;
    let w = params.expect("head.weight")?;
    let b = params.expect("head.bias")?;
    let z = feats.matmul(w)?;
    let zs = z.shape();
    Ok(z.add(b.broadcast_to(&zs)?)?)
}

/// Value-level forward pass on a scratch tape.
pub fn forward_logits(
    spec: &ModelSpec,
    params: &Parameters,
    batch: &Tensor,
) -> Result<Tensor, ModelError> {
    let tape = Tape::new();
    let pv = ParamVars::leaf(&tape, params);
    let b = tape.leaf(batch.clone());
    Ok(forward(spec, &pv, b)?.value())
}

/// Reserved checkpoint entries: `meta.*` encodes the spec, `norm.*` the
/// per-channel standardization constants of the training split.
const META_ARCH: &str = "meta.arch";
const META_IN_SHAPE: &str = "meta.in_shape";
const META_CLASSES: &str = "meta.classes";
const META_WIDTH: &str = "meta.width";
const META_DEPTH: &str = "meta.depth";
const NORM_MEAN: &str = "norm.mean";
const NORM_STD: &str = "norm.std";

/// Write a self-describing model checkpoint: parameters plus reserved
/// `meta.*` spec entries and optional `norm.*` standardization constants.
pub fn save_model(
    spec: &ModelSpec,
    params: &Parameters,
    norm: Option<&crate::data::NormStats>,
    path: &Path,
) -> Result<(), CheckpointError> {
    params.matches_spec(spec)?;
    let mut entries = params.entries().to_vec();
    let scalar = |v: f64| Tensor::from_vec(vec![1], vec![v]).expect("scalar entry");
    entries.push((
        META_ARCH.into(),
        scalar(match spec.arch {
            Arch::Mlp => 0.0,
            Arch::ConvNet => 1.0,
        }),
    ));
    entries.push((
        META_IN_SHAPE.into(),
        Tensor::from_vec(
            vec![3],
            vec![spec.in_shape.0 as f64, spec.in_shape.1 as f64, spec.in_shape.2 as f64],
        )
        .expect("shape entry"),
    ));
    entries.push((META_CLASSES.into(), scalar(spec.classes as f64)));
    entries.push((META_WIDTH.into(), scalar(spec.width as f64)));
    entries.push((META_DEPTH.into(), scalar(spec.depth as f64)));
    if let Some(stats) = norm {
        entries.push((
            NORM_MEAN.into(),
            Tensor::from_vec(vec![stats.mean.len()], stats.mean.clone()).expect("norm entry"),
        ));
        entries.push((
            NORM_STD.into(),
            Tensor::from_vec(vec![stats.std.len()], stats.std.clone()).expect("norm entry"),
        ));
    }
    save_checkpoint(&Parameters::new(entries), path)
}

/// Load a model checkpoint written by `save_model`, reconstructing the spec
/// and splitting off the normalization constants.
pub fn load_model(
    path: &Path,
) -> Result<(ModelSpec, Parameters, Option<crate::data::NormStats>), CheckpointError> {
    let all = load_checkpoint(path)?;
    let field = |name: &str| -> Result<&Tensor, CheckpointError> {
        all.get(name).ok_or_else(|| CheckpointError::Invalid { field: name.to_string() })
    };
    let scalar = |name: &str| -> Result<f64, CheckpointError> {
        let t = field(name)?;
        if t.numel() != 1 {
            return Err(CheckpointError::Invalid { field: name.to_string() });
        }
        Ok(t.data()[0])
    };
    let arch = match scalar(META_ARCH)? as i64 {
        0 => Arch::Mlp,
        1 => Arch::ConvNet,
        _ => return Err(CheckpointError::Invalid { field: META_ARCH.into() }),
    };
    let shape = field(META_IN_SHAPE)?;
    if shape.numel() != 3 {
        return Err(CheckpointError::Invalid { field: META_IN_SHAPE.into() });
    }
    let spec = ModelSpec {
        arch,
        in_shape: (
            shape.data()[0] as usize,
            shape.data()[1] as usize,
            shape.data()[2] as usize,
        ),
        classes: scalar(META_CLASSES)? as usize,
        width: scalar(META_WIDTH)? as usize,
        depth: scalar(META_DEPTH)? as usize,
    };
    spec.validate()?;
    let norm = match (all.get(NORM_MEAN), all.get(NORM_STD)) {
        (Some(m), Some(s)) => Some(crate::data::NormStats {
            mean: m.data().to_vec(),
            std: s.data().to_vec(),
        }),
        _ => None,
    };
    let params = Parameters::new(
        all.entries()
            .iter()
            .filter(|(n, _)| !n.starts_with("meta.") && !n.starts_with("norm."))
            .cloned()
            .collect(),
    );
    params.matches_spec(&spec)?;
    Ok((spec, params, norm))
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"DFCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Write named tensors: magic `DFCK`, u32 version, u32 entry count, then per
/// entry name length + UTF-8 name, u32 rank, u64 extents, f64 little-endian
/// payload. The write is atomic (temp file + rename).
pub fn save_checkpoint(params: &Parameters, path: &Path) -> Result<(), CheckpointError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.entries() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    atomic_write(path, &buf).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8], CheckpointError> {
        if self.at + n > self.bytes.len() {
            return Err(CheckpointError::Truncated { field: field.into() });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Parameters, CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
    let mut r = Reader { bytes: &bytes, at: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic { found: magic.try_into().unwrap() });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::BadVersion { found: version });
    }
    let count = r.u32("entry count")?;
    let mut entries = Vec::with_capacity(count as usize);
    for i in 0..count {
        let name_len = r.u32(&format!("entry {i} name length"))? as usize;
        if name_len > 4096 {
            return Err(CheckpointError::Invalid { field: format!("entry {i} name length") });
        }
        let name = std::str::from_utf8(r.take(name_len, &format!("entry {i} name"))?)
            .map_err(|_| CheckpointError::Invalid { field: format!("entry {i} name") })?
            .to_string();
        let rank = r.u32(&format!("entry {i} rank"))? as usize;
        if rank > 8 {
            return Err(CheckpointError::Invalid { field: format!("entry {i} rank") });
        }
        let mut shape = Vec::with_capacity(rank);
        for d in 0..rank {
            shape.push(r.u64(&format!("entry {i} extent {d}"))? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 8, &format!("entry {i} payload"))?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::from_vec(shape, data)
            .map_err(|_| CheckpointError::Invalid { field: format!("entry {i} shape table") })?;
        entries.push((name, t));
    }
    if r.at != bytes.len() {
        return Err(CheckpointError::Invalid { field: "trailing bytes".into() });
    }
    Ok(Parameters::new(entries))
}
