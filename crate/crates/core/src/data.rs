//! Dataset ingestion (CIFAR-10 binary, IDX, text toys), per-channel
//! standardization, toy problem generators, and the synthetic-set artifact
//! format.

use crate::kkt::SyntheticSet;
use crate::nn::atomic_write;
use crate::rng::{stream_rng, STREAM_TOY};
use crate::tensor::{Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::Rng;
use std::fs;
use std::io::Read;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Labeled image collection: (n, c, h, w) pixels plus class indices.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledSet {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self, DataError> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(DataError::Invalid(format!("images must be (n,c,h,w), got {shape:?}")));
        }
        if labels.len() != shape[0] {
            return Err(DataError::Invalid(format!(
                "{} labels for {} images",
                labels.len(),
                shape[0]
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(DataError::Invalid(format!("label {bad} out of range")));
        }
        Ok(LabeledSet { images, labels, classes })
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

    pub fn image_len(&self) -> usize {
        let (c, h, w) = self.image_dims();
        c * h * w
    }

    pub fn per_class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        by_class
    }

    /// New set from the given row indices, preserving order.
    pub fn subset(&self, indices: &[usize]) -> Result<LabeledSet, DataError> {
        let il = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * il);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(DataError::Invalid(format!("index {i} out of range")));
            }
            data.extend_from_slice(&self.images.data()[i * il..(i + 1) * il]);
            labels.push(self.labels[i]);
        }
        let (c, h, w) = self.image_dims();
        Ok(LabeledSet {
            images: Tensor::from_vec(vec![indices.len(), c, h, w], data)?,
            labels,
            classes: self.classes,
        })
    }

    /// Per-class image tensors (None for absent classes), in label order.
    pub fn split_by_class(&self) -> Vec<Option<Tensor>> {
        let il = self.image_len();
        let (c, h, w) = self.image_dims();
        self.per_class_indices()
            .into_iter()
            .map(|idx| {
                if idx.is_empty() {
                    return None;
                }
                let mut data = Vec::with_capacity(idx.len() * il);
                for &i in &idx {
                    data.extend_from_slice(&self.images.data()[i * il..(i + 1) * il]);
                }
                Some(Tensor::from_vec(vec![idx.len(), c, h, w], data).expect("subset shape"))
            })
            .collect()
    }
}

/// Per-channel standardization constants.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population mean/std per channel; a zero std is replaced by 1 so
    /// constant channels pass through centered.
    pub fn compute(set: &LabeledSet) -> NormStats {
        let (c, h, w) = set.image_dims();
        let per = h * w;
        let n = set.len();
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * per;
                for &v in &set.images.data()[base..base + per] {
                    mean[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let count = (n * per) as f64;
        for ch in 0..c {
            mean[ch] /= count;
            let var = (sq[ch] / count - mean[ch] * mean[ch]).max(0.0);
            let s = var.sqrt();
            sq[ch] = if s > 0.0 { s } else { 1.0 };
        }
        NormStats { mean, std: sq }
    }

    pub fn apply(&self, set: &LabeledSet) -> LabeledSet {
        let (c, h, w) = set.image_dims();
        let per = h * w;
        let mut data = set.images.data().to_vec();
        for i in 0..set.len() {
            for ch in 0..c {
                let base = (i * c + ch) * per;
                for v in &mut data[base..base + per] {
                    *v = (*v - self.mean[ch]) / self.std[ch];
                }
            }
        }
        LabeledSet {
            images: Tensor::from_vec(set.images.shape().to_vec(), data).expect("same shape"),
            labels: set.labels.clone(),
            classes: set.classes,
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    Ok(bytes)
}

const CIFAR_RECORD: usize = 3073;

/// CIFAR-10 binary batches: 3073-byte records (1 label byte + 3072 pixels,
/// channel-planar 3x32x32). Returns images scaled to [0,1] and then
/// standardized with the set's own per-channel constants, which are also
/// returned so other splits can share them.
pub fn parse_cifar10(paths: &[impl AsRef<Path>]) -> Result<(LabeledSet, NormStats), DataError> {
    let raw = parse_cifar10_raw(paths)?;
    let stats = NormStats::compute(&raw);
    Ok((stats.apply(&raw), stats))
}

/// CIFAR-10 records as [0,1] values without standardization.
pub fn parse_cifar10_raw(paths: &[impl AsRef<Path>]) -> Result<LabeledSet, DataError> {
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(DataError::Corrupt {
                path: path.display().to_string(),
                reason: format!("size {} is not a positive multiple of {CIFAR_RECORD}", bytes.len()),
            });
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            let label = rec[0] as usize;
            if label > 9 {
                return Err(DataError::Corrupt {
                    path: path.display().to_string(),
                    reason: format!("label byte {label} out of range"),
                });
            }
            labels.push(label);
            data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    let n = labels.len();
    LabeledSet::new(Tensor::from_vec(vec![n, 3, 32, 32], data)?, labels, 10)
}

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// IDX image/label file pair (big-endian headers). Pixel bytes map to
/// [0, 1]; dimensions come from the image header.
pub fn parse_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledSet, DataError> {
    let img_bytes = read_file(images_path)?;
    let corrupt = |path: &Path, reason: String| DataError::Corrupt {
        path: path.display().to_string(),
        reason,
    };
    let be32 = |b: &[u8], at: usize| -> Option<u32> {
        b.get(at..at + 4).map(|s| u32::from_be_bytes(s.try_into().unwrap()))
    };

    let magic = be32(&img_bytes, 0)
        .ok_or_else(|| corrupt(images_path, "truncated header".into()))?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(corrupt(
            images_path,
            format!("image magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}"),
        ));
    }
    let n = be32(&img_bytes, 4).ok_or_else(|| corrupt(images_path, "truncated count".into()))?
        as usize;
    let rows = be32(&img_bytes, 8).ok_or_else(|| corrupt(images_path, "truncated rows".into()))?
        as usize;
    let cols = be32(&img_bytes, 12)
        .ok_or_else(|| corrupt(images_path, "truncated cols".into()))? as usize;
    let expected = 16 + n * rows * cols;
    if img_bytes.len() != expected {
        return Err(corrupt(
            images_path,
            format!("payload {} bytes, header implies {expected}", img_bytes.len()),
        ));
    }

    let lab_bytes = read_file(labels_path)?;
    let lmagic = be32(&lab_bytes, 0)
        .ok_or_else(|| corrupt(labels_path, "truncated header".into()))?;
    if lmagic != IDX_LABEL_MAGIC {
        return Err(corrupt(
            labels_path,
            format!("label magic {lmagic:#010x}, expected {IDX_LABEL_MAGIC:#010x}"),
        ));
    }
    let ln = be32(&lab_bytes, 4).ok_or_else(|| corrupt(labels_path, "truncated count".into()))?
        as usize;
    if ln != n || lab_bytes.len() != 8 + n {
        return Err(corrupt(
            labels_path,
            format!("{ln} labels for {n} images (payload {} bytes)", lab_bytes.len()),
        ));
    }

    let data: Vec<f64> = img_bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lab_bytes[8..].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(1, |&m| m + 1).max(2);
    LabeledSet::new(Tensor::from_vec(vec![n, 1, rows, cols], data)?, labels, classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyKind {
    /// Gaussian clusters (3 classes), class means at least 4 sigma apart.
    Blobs,
    /// Two interleaved half-circles with mild noise.
    Moons,
    /// Linearly separable halves with margin >= 0.5 around a random line.
    Separable2d,
    /// The exact fixture +/-(1,0), +/-(2,0) with sign labels.
    SeparableSymmetric,
    /// Two parallel clusters sitting exactly on the margin lines (every
    /// point is a support point); the geometry that makes the deep-vs.-
    /// classical support-vector comparison exact.
    MarginLines,
}

/// 2-D toy points as a LabeledSet with image shape (2, 1, 1); deterministic
/// per seed.
pub fn gen_toy(kind: ToyKind, n_per_class: usize, seed: u64) -> Result<LabeledSet, DataError> {
    if n_per_class == 0 {
        return Err(DataError::Invalid("n_per_class must be >= 1".into()));
    }
    let mut rng = stream_rng(seed, STREAM_TOY, kind as u64);
    let (points, labels, classes): (Vec<[f64; 2]>, Vec<usize>, usize) = match kind {
        ToyKind::SeparableSymmetric => (
            vec![[-2.0, 0.0], [-1.0, 0.0], [1.0, 0.0], [2.0, 0.0]],
            vec![0, 0, 1, 1],
            2,
        ),
        ToyKind::Separable2d => {
            // margin >= 0.5: each class is pushed at least 0.25 from the line
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let u = [theta.cos(), theta.sin()];
            let offset: f64 = rng.gen_range(-0.5..0.5);
            let mut pts = Vec::new();
            let mut labs = Vec::new();
            for class in 0..2usize {
                let sign = if class == 0 { -1.0 } else { 1.0 };
                for _ in 0..n_per_class {
                    let g = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
                    let along = u[0] * g[0] + u[1] * g[1];
                    let target = offset + sign * (0.25 + rng.gen_range(0.0f64..1.5));
                    pts.push([g[0] + (target - along) * u[0], g[1] + (target - along) * u[1]]);
                    labs.push(class);
                }
            }
            (pts, labs, 2)
        }
        ToyKind::Blobs => {
            // sigma 0.5, means 4 sigma = 2.0 apart on a triangle
            let sigma = 0.5;
            let means = [[0.0, 0.0], [2.0, 0.0], [1.0, 2.0]];
            let mut pts = Vec::new();
            let mut labs = Vec::new();
            for (class, m) in means.iter().enumerate() {
                for _ in 0..n_per_class {
                    pts.push([
                        m[0] + sigma * rng.sample::<f64, _>(rand_distr::StandardNormal),
                        m[1] + sigma * rng.sample::<f64, _>(rand_distr::StandardNormal),
                    ]);
                    labs.push(class);
                }
            }
            (pts, labs, 3)
        }
        ToyKind::MarginLines => {
            // classes sit on u.x = offset -/+ 0.5 (margin width exactly 1.0)
            // at v-positions symmetric about the center, so the regularized
            // optimum has no perpendicular component and every point shares
            // the same functional margin
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let u = [theta.cos(), theta.sin()];
            let v = [-u[1], u[0]];
            let offset: f64 = rng.gen_range(-0.5..0.5);
            let spread = 0.4;
            let mut pts = Vec::new();
            let mut labs = Vec::new();
            for class in 0..2usize {
                let sign = if class == 0 { -1.0 } else { 1.0 };
                for k in 0..n_per_class {
                    let along =
                        spread * (2.0 * k as f64 + 1.0 - n_per_class as f64) / n_per_class as f64;
                    let d = offset + sign * 0.5;
                    pts.push([d * u[0] + along * v[0], d * u[1] + along * v[1]]);
                    labs.push(class);
                }
            }
            (pts, labs, 2)
        }
        ToyKind::Moons => {
            let noise = 0.08;
            let mut pts = Vec::new();
            let mut labs = Vec::new();
            for class in 0..2usize {
                for i in 0..n_per_class {
                    let t = std::f64::consts::PI * i as f64 / (n_per_class.max(2) - 1) as f64;
                    let (mut x, mut y) = if class == 0 {
                        (t.cos(), t.sin())
                    } else {
                        (1.0 - t.cos(), 0.5 - t.sin())
                    };
                    x += noise * rng.sample::<f64, _>(rand_distr::StandardNormal);
                    y += noise * rng.sample::<f64, _>(rand_distr::StandardNormal);
                    pts.push([x, y]);
                    labs.push(class);
                }
            }
            (pts, labs, 2)
        }
    };
    let n = points.len();
    let data: Vec<f64> = points.iter().flat_map(|p| [p[0], p[1]]).collect();
    LabeledSet::new(Tensor::from_vec(vec![n, 2, 1, 1], data)?, labels, classes)
}

/// Extract toy points back out of the (n, 2, 1, 1) layout.
pub fn toy_points(set: &LabeledSet) -> Vec<Vec<f64>> {
    let d = set.image_len();
    (0..set.len())
        .map(|i| set.images.data()[i * d..(i + 1) * d].to_vec())
        .collect()
}

/// Text toy format: one `x1 x2 ... label` row per point.
pub fn toy_write_text(set: &LabeledSet, path: &Path) -> Result<(), DataError> {
    let d = set.image_len();
    let mut out = String::new();
    for i in 0..set.len() {
        for v in &set.images.data()[i * d..(i + 1) * d] {
            out.push_str(&format!("{v} "));
        }
        out.push_str(&format!("{}\n", set.labels[i]));
    }
    atomic_write(path, out.as_bytes())
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

pub fn toy_read_text(path: &Path) -> Result<LabeledSet, DataError> {
    let text = fs::read_to_string(path)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut dim: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 2 {
            return Err(DataError::Corrupt {
                path: path.display().to_string(),
                reason: format!("line {}: need at least one coordinate and a label", lineno + 1),
            });
        }
        let d = fields.len() - 1;
        if *dim.get_or_insert(d) != d {
            return Err(DataError::Corrupt {
                path: path.display().to_string(),
                reason: format!("line {}: inconsistent dimension", lineno + 1),
            });
        }
        for f in &fields[..d] {
            data.push(f.parse::<f64>().map_err(|_| DataError::Corrupt {
                path: path.display().to_string(),
                reason: format!("line {}: bad coordinate {f}", lineno + 1),
            })?);
        }
        labels.push(fields[d].parse::<usize>().map_err(|_| DataError::Corrupt {
            path: path.display().to_string(),
            reason: format!("line {}: bad label {}", lineno + 1, fields[d]),
        })?);
    }
    let d = dim.ok_or_else(|| DataError::Corrupt {
        path: path.display().to_string(),
        reason: "empty file".into(),
    })?;
    let n = labels.len();
    let classes = labels.iter().max().map_or(1, |&m| m + 1).max(2);
    LabeledSet::new(Tensor::from_vec(vec![n, d, 1, 1], data)?, labels, classes)
}

const SYNTH_MAGIC: &[u8; 4] = b"DFSS";
const SYNTH_VERSION: u32 = 1;

/// Synthetic-set artifact: magic `DFSS`, u32 version, u64 n/c/h/w, u64
/// labels, f64 lambdas, f64 image payload, all little-endian. Bit-exact
/// round trip; atomic write.
pub fn save_synthetic(set: &SyntheticSet, path: &Path) -> Result<(), DataError> {
    let shape = set.images.shape();
    let mut buf = Vec::new();
    buf.extend_from_slice(SYNTH_MAGIC);
    buf.extend_from_slice(&SYNTH_VERSION.to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &y in &set.labels {
        buf.extend_from_slice(&(y as u64).to_le_bytes());
    }
    for &l in &set.lambdas {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    for v in set.images.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(path, &buf)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

pub fn load_synthetic(path: &Path) -> Result<SyntheticSet, DataError> {
    let bytes = read_file(path)?;
    let corrupt = |reason: String| DataError::Corrupt {
        path: path.display().to_string(),
        reason,
    };
    if bytes.len() < 8 || &bytes[..4] != SYNTH_MAGIC {
        return Err(corrupt(format!(
            "bad magic {:?}, expected \"DFSS\"",
            bytes.get(..4).unwrap_or(&[])
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != SYNTH_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let u64_at = |at: usize| -> Result<u64, DataError> {
        bytes
            .get(at..at + 8)
            .map(|s| u64::from_le_bytes(s.try_into().unwrap()))
            .ok_or_else(|| corrupt("truncated header".into()))
    };
    let n = u64_at(8)? as usize;
    let c = u64_at(16)? as usize;
    let h = u64_at(24)? as usize;
    let w = u64_at(32)? as usize;
    let expect = 40 + n * 8 + n * 8 + n * c * h * w * 8;
    if bytes.len() != expect {
        return Err(corrupt(format!("{} bytes, header implies {expect}", bytes.len())));
    }
    let mut at = 40usize;
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(u64_at(at)? as usize);
        at += 8;
    }
    let f64_at = |at: usize| f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
    let mut lambdas = Vec::with_capacity(n);
    for _ in 0..n {
        lambdas.push(f64_at(at));
        at += 8;
    }
    let mut data = Vec::with_capacity(n * c * h * w);
    for _ in 0..n * c * h * w {
        data.push(f64_at(at));
        at += 8;
    }
    let images = Tensor::from_vec(vec![n, c, h, w], data)?;
    SyntheticSet::new(images, labels, lambdas).map_err(|e| corrupt(e.to_string()))
}

/// Deterministic per-class shuffle used by subsampling and real-image
/// initialization.
pub fn seeded_class_draw(
    by_class: &[Vec<usize>],
    take: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>, DataError> {
    by_class
        .iter()
        .enumerate()
        .map(|(class, idx)| {
            if idx.len() < take {
                return Err(DataError::Invalid(format!(
                    "class {class} has {} samples, need {take}",
                    idx.len()
                )));
            }
            let mut pool = idx.clone();
            pool.shuffle(rng);
            let mut chosen: Vec<usize> = pool[..take].to_vec();
            chosen.sort_unstable();
            Ok(chosen)
        })
        .collect()
}
