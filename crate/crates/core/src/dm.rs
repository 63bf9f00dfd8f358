//! Distribution matching: randomly initialized embedding networks,
//! differentiable Siamese augmentation, and the classwise MMD loss.
//!
//! One augmentation draw per matching step is applied identically to the
//! real and synthetic batches (the Siamese property); the real side is a
//! constant of the graph, since only the synthetic pixels are optimized.

use crate::nn::{features, init_params, ModelError, ModelSpec, ParamVars, Parameters};
use crate::tensor::{affine_grid, Tape, Tensor, TensorError, Var};
use rand::Rng;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DmError {
    #[error("unknown augmentation op \"{0}\"")]
    UnknownOp(String),
    #[error("class {0} has no real samples")]
    EmptyRealClass(usize),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A never-trained feature extractor: a ConvNet trunk with the head removed.
#[derive(Clone, Debug)]
pub struct EmbeddingNet {
    pub spec: ModelSpec,
    pub params: Parameters,
}

/// Fresh random embedding; deterministic per seed, never trained.
pub fn sample_embedding(
    seed: u64,
    in_shape: (usize, usize, usize),
    width: usize,
    depth: usize,
) -> Result<EmbeddingNet, DmError> {
    // class count is irrelevant (the head is never used); 2 keeps the spec valid
    let spec = ModelSpec::convnet(in_shape, 2, width, depth);
    let params = init_params(&spec, seed)?;
    Ok(EmbeddingNet { spec, params })
}

/// Anything that maps an image batch to a flat (n, d) feature matrix on a
/// tape.
pub trait Embed {
    fn feature_len(&self) -> usize;
    fn embed<'t>(&self, tape: &'t Tape, batch: Var<'t>) -> Result<Var<'t>, DmError>;
}

impl Embed for EmbeddingNet {
    fn feature_len(&self) -> usize {
        self.spec.feature_len()
    }

    fn embed<'t>(&self, tape: &'t Tape, batch: Var<'t>) -> Result<Var<'t>, DmError> {
        let pv = ParamVars::leaf(tape, &self.params);
        Ok(features(&self.spec, &pv, batch)?)
    }
}

/// Flattens pixels unchanged; the trivial embedding used by oracles.
pub struct IdentityEmbed {
    pub in_len: usize,
}

impl Embed for IdentityEmbed {
    fn feature_len(&self) -> usize {
        self.in_len
    }

    fn embed<'t>(&self, _tape: &'t Tape, batch: Var<'t>) -> Result<Var<'t>, DmError> {
        let n = batch.shape()[0];
        Ok(batch.reshape(&[n, self.in_len])?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugOp {
    Flip,
    Translate,
    Scale,
    Rotate,
    Color,
    Cutout,
}

/// Ordered subset of augmentation ops, parsed from a comma-separated list
/// like `flip,translate,color`. Ops apply in the canonical order below no
/// matter the list order.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AugPolicy {
    ops: Vec<AugOp>,
}

const CANONICAL_ORDER: [AugOp; 6] = [
    AugOp::Flip,
    AugOp::Translate,
    AugOp::Scale,
    AugOp::Rotate,
    AugOp::Color,
    AugOp::Cutout,
];

impl AugPolicy {
    pub fn none() -> Self {
        AugPolicy { ops: vec![] }
    }

    pub fn all() -> Self {
        AugPolicy { ops: CANONICAL_ORDER.to_vec() }
    }

    pub fn from_ops(ops: &[AugOp]) -> Self {
        let ops = CANONICAL_ORDER
            .iter()
            .copied()
            .filter(|op| ops.contains(op))
            .collect();
        AugPolicy { ops }
    }

    pub fn has(&self, op: AugOp) -> bool {
        self.ops.contains(&op)
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }
}

impl FromStr for AugPolicy {
    type Err = DmError;

    fn from_str(s: &str) -> Result<Self, DmError> {
        let mut ops = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let op = match part {
                "flip" => AugOp::Flip,
                "translate" => AugOp::Translate,
                "scale" => AugOp::Scale,
                "rotate" => AugOp::Rotate,
                "color" => AugOp::Color,
                "cutout" => AugOp::Cutout,
                other => return Err(DmError::UnknownOp(other.to_string())),
            };
            ops.push(op);
        }
        Ok(AugPolicy::from_ops(&ops))
    }
}

impl fmt::Display for AugPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self
            .ops
            .iter()
            .map(|op| match op {
                AugOp::Flip => "flip",
                AugOp::Translate => "translate",
                AugOp::Scale => "scale",
                AugOp::Rotate => "rotate",
                AugOp::Color => "color",
                AugOp::Cutout => "cutout",
            })
            .collect();
        write!(f, "{}", names.join(","))
    }
}

/// One set of per-op random draws, applied identically to both batches of a
/// matching step. Translation offsets are fractions of the side length.
#[derive(Clone, Debug, PartialEq)]
pub struct AugSample {
    pub flip: bool,
    pub dx_frac: f64,
    pub dy_frac: f64,
    pub scale: f64,
    pub angle: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub cut_cx: f64,
    pub cut_cy: f64,
}

/// Default draw ranges: flip p=0.5, translate up to 12.5% of the side,
/// scale in [0.8, 1.2], rotate within +/-15 degrees, color jitter +/-0.25,
/// cutout box half the side at a random center.
pub const TRANSLATE_FRAC: f64 = 0.125;
pub const CUTOUT_FRAC: f64 = 0.5;

impl AugSample {
    /// All fields are drawn regardless of the active policy, so the stream
    /// consumption does not depend on configuration.
    pub fn draw<R: Rng>(rng: &mut R) -> Self {
        AugSample {
            flip: rng.gen_range(0.0..1.0) < 0.5,
            dx_frac: rng.gen_range(-TRANSLATE_FRAC..TRANSLATE_FRAC),
            dy_frac: rng.gen_range(-TRANSLATE_FRAC..TRANSLATE_FRAC),
            scale: rng.gen_range(0.8..1.2),
            angle: rng.gen_range(-15f64.to_radians()..15f64.to_radians()),
            brightness: rng.gen_range(-0.25..0.25),
            contrast: rng.gen_range(-0.25..0.25),
            saturation: rng.gen_range(-0.25..0.25),
            cut_cx: rng.gen_range(0.0..1.0),
            cut_cy: rng.gen_range(0.0..1.0),
        }
    }

    /// The identity draw: every op it parameterizes is a no-op.
    pub fn identity() -> Self {
        AugSample {
            flip: false,
            dx_frac: 0.0,
            dy_frac: 0.0,
            scale: 1.0,
            angle: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            cut_cx: 0.5,
            cut_cy: 0.5,
        }
    }
}

/// Compose the active geometric ops into one output-to-source affine map.
fn geometry_matrix(omega: &AugSample, policy: &AugPolicy, h: usize, w: usize) -> [f64; 6] {
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    // forward content transform is flip, then scale, then rotate, then
    // translate; the sampling map inverts it: src = Inv(dst - center - t) + center
    let (mut dy, mut dx) = (0.0, 0.0);
    if policy.has(AugOp::Translate) {
        dy = omega.dy_frac * h as f64;
        dx = omega.dx_frac * w as f64;
    }
    let s = if policy.has(AugOp::Scale) { omega.scale } else { 1.0 };
    let a = if policy.has(AugOp::Rotate) { omega.angle } else { 0.0 };
    let flip = policy.has(AugOp::Flip) && omega.flip;
    let (cos_a, sin_a) = (a.cos(), a.sin());
    // inverse rotation by -a, inverse scale 1/s, inverse flip on x
    let inv_s = 1.0 / s;
    let fx = if flip { -1.0 } else { 1.0 };
    // src_y = inv_s * ( cos_a * v_y + sin_a * v_x )
    // src_x = fx * inv_s * ( -sin_a * v_y + cos_a * v_x )   with v = dst - center - t
    let m0 = inv_s * cos_a;
    let m1 = inv_s * sin_a;
    let m3 = fx * inv_s * -sin_a;
    let m4 = fx * inv_s * cos_a;
    let vy0 = -cy - dy;
    let vx0 = -cx - dx;
    [
        m0,
        m1,
        m0 * vy0 + m1 * vx0 + cy,
        m3,
        m4,
        m3 * vy0 + m4 * vx0 + cx,
    ]
}

/// Apply the policy's ops under one shared draw. Differentiable with respect
/// to the batch pixels: geometry resolves to a single bilinear warp with
/// zero padding, color terms are smooth, and the cutout mask is a constant.
pub fn augment<'t>(
    tape: &'t Tape,
    batch: Var<'t>,
    omega: &AugSample,
    policy: &AugPolicy,
) -> Result<Var<'t>, DmError> {
    let shape = batch.shape();
    if shape.len() != 4 {
        return Err(DmError::InvalidBatch(format!("expected (n, c, h, w), got {shape:?}")));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = batch;

    let geometric = policy.has(AugOp::Flip)
        || policy.has(AugOp::Translate)
        || policy.has(AugOp::Scale)
        || policy.has(AugOp::Rotate);
    if geometric {
        let mat = geometry_matrix(omega, policy, h, w);
        let grid = Arc::new(affine_grid(n, h, w, &vec![mat; n]));
        out = out.warp(grid)?;
    }

    if policy.has(AugOp::Color) {
        // contrast scales deviation from the per-image mean
        let mean = out.sum_to_shape(&[n, 1, 1, 1])?.scale(1.0 / (c * h * w) as f64);
        let centered = out.sub(mean.broadcast_to(&shape)?)?;
        out = centered
            .scale(1.0 + omega.contrast)
            .add(mean.broadcast_to(&shape)?)?;
        if c == 3 {
            // saturation scales deviation from the per-pixel channel mean
            let gray = out.sum_to_shape(&[n, 1, h, w])?.scale(1.0 / c as f64);
            let dev = out.sub(gray.broadcast_to(&shape)?)?;
            out = dev
                .scale(1.0 + omega.saturation)
                .add(gray.broadcast_to(&shape)?)?;
        }
        out = out.add_scalar(omega.brightness);
    }

    if policy.has(AugOp::Cutout) {
        let box_h = ((h as f64 * CUTOUT_FRAC).round() as usize).max(1);
        let box_w = ((w as f64 * CUTOUT_FRAC).round() as usize).max(1);
        let cy = (omega.cut_cy * h as f64) as isize - (box_h / 2) as isize;
        let cx = (omega.cut_cx * w as f64) as isize - (box_w / 2) as isize;
        let mut mask = vec![1.0; h * w];
        for y in cy.max(0)..(cy + box_h as isize).min(h as isize) {
            for x in cx.max(0)..(cx + box_w as isize).min(w as isize) {
                mask[y as usize * w + x as usize] = 0.0;
            }
        }
        let mask = Tensor::from_vec(vec![1, 1, h, w], mask)?;
        out = out.mul(tape.leaf(mask).broadcast_to(&shape)?)?;
    }

    Ok(out)
}

/// Value-level augmentation on a scratch tape.
pub fn augment_values(
    batch: &Tensor,
    omega: &AugSample,
    policy: &AugPolicy,
) -> Result<Tensor, DmError> {
    let tape = Tape::new();
    let v = tape.leaf(batch.clone());
    Ok(augment(&tape, v, omega, policy)?.value())
}

/// Classwise squared MMD between embedded means: the mean over classes
/// present in the synthetic set of `|| mean psi(A(real_c)) - mean
/// psi(A(synth_c)) ||^2`, under one shared draw. Real batches are constants;
/// the result is differentiable with respect to the synthetic pixels only.
#[allow(clippy::too_many_arguments)]
pub fn dm_loss<'t, E: Embed>(
    tape: &'t Tape,
    embed: &E,
    real_by_class: &[Option<Tensor>],
    synth_images: Var<'t>,
    synth_labels: &[usize],
    omega: &AugSample,
    policy: &AugPolicy,
) -> Result<Var<'t>, DmError> {
    let shape = synth_images.shape();
    if shape.len() != 4 || shape[0] != synth_labels.len() {
        return Err(DmError::InvalidBatch(format!(
            "synthetic batch {shape:?} with {} labels",
            synth_labels.len()
        )));
    }

    // contiguous class blocks in the synthetic batch
    let classes = real_by_class.len();
    let mut ranges: Vec<Option<(usize, usize)>> = vec![None; classes];
    for (i, &y) in synth_labels.iter().enumerate() {
        if y >= classes {
            return Err(DmError::InvalidBatch(format!("label {y} out of range")));
        }
        match &mut ranges[y] {
            None => ranges[y] = Some((i, 1)),
            Some((start, len)) => {
                if *start + *len != i {
                    return Err(DmError::InvalidBatch("labels not grouped by class".into()));
                }
                *len += 1;
            }
        }
    }

    let feats = embed.embed(tape, augment(tape, synth_images, omega, policy)?)?;
    let d = embed.feature_len();

    let mut total: Option<Var<'t>> = None;
    let mut present = 0usize;
    for (class, range) in ranges.iter().enumerate() {
        let Some((start, len)) = range else { continue };
        present += 1;
        let real = real_by_class[class]
            .as_ref()
            .ok_or(DmError::EmptyRealClass(class))?;

        // real side on a scratch tape: augment + embed to plain values
        let real_mean = {
            let scratch = Tape::new();
            let rv = scratch.leaf(real.clone());
            let rf = embed.embed(&scratch, augment(&scratch, rv, omega, policy)?)?;
            let m = rf
                .sum_to_shape(&[1, d])?
                .scale(1.0 / real.shape()[0] as f64);
            m.value()
        };

        let synth_mean = feats
            .slice(0, *start, *len)?
            .sum_to_shape(&[1, d])?
            .scale(1.0 / *len as f64);
        let diff = synth_mean.sub(tape.leaf(real_mean))?;
        let term = diff.norm_sq();
        total = Some(match total {
            None => term,
            Some(t) => t.add(term)?,
        });
    }

    let total = total.ok_or_else(|| DmError::InvalidBatch("empty synthetic set".into()))?;
    Ok(total.scale(1.0 / present as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::tensor::{fd_fn, finite_difference_check};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn embeddings_are_seeded_and_fixed_length() {
        let x = {
            let mut r = ChaCha8Rng::seed_from_u64(0);
            Tensor::randn(&[2, 1, 8, 8], &mut r)
        };
        let run = |seed: u64| {
            let net = sample_embedding(seed, (1, 8, 8), 4, 2).unwrap();
            let tape = Tape::new();
            let v = tape.leaf(x.clone());
            net.embed(&tape, v).unwrap().value()
        };
        let a = run(1);
        let b = run(1);
        let c = run(2);
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
        assert_eq!(a.shape(), &[2, 4 * 2 * 2]);
    }

    #[test]
    fn policy_parses_and_rejects_unknown_ops() {
        let p: AugPolicy = "flip,translate,color".parse().unwrap();
        assert!(p.has(AugOp::Flip) && p.has(AugOp::Color) && !p.has(AugOp::Cutout));
        assert_eq!(p.to_string(), "flip,translate,color");
        assert!(matches!("flip,wobble".parse::<AugPolicy>(), Err(DmError::UnknownOp(_))));
    }

    #[test]
    fn flip_twice_is_identity_and_zero_translation_is_identity() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 1, 6, 6], &mut r);
        let policy: AugPolicy = "flip".parse().unwrap();
        let mut omega = AugSample::identity();
        omega.flip = true;
        let once = augment_values(&x, &omega, &policy).unwrap();
        let twice = augment_values(&once, &omega, &policy).unwrap();
        assert!(twice.bit_eq(&x));

        let policy: AugPolicy = "translate".parse().unwrap();
        let omega = AugSample::identity();
        let moved = augment_values(&x, &omega, &policy).unwrap();
        assert!(moved.bit_eq(&x));
    }

    #[test]
    fn scale_gradient_passes_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[1, 1, 6, 6], &mut r);
        let policy: AugPolicy = "scale".parse().unwrap();
        let mut omega = AugSample::identity();
        omega.scale = 1.1;
        let err = finite_difference_check(
            fd_fn(move |t, v| {
                augment(t, v, &omega, &policy)
                    .map(|a| a.norm_sq())
                    .map_err(|_| TensorError::NonFinite("augment".into()))
            }),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "scale gradient error {err}");
    }

    #[test]
    fn dm_loss_identity_case_and_hand_value() {
        // synthetic identical to real under a shared draw -> exactly 0
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let imgs = Tensor::randn(&[4, 1, 6, 6], &mut r);
        let labels = vec![0, 0, 1, 1];
        let real: Vec<Option<Tensor>> = vec![
            Some(Tensor::from_vec(vec![2, 1, 6, 6], imgs.data()[..72].to_vec()).unwrap()),
            Some(Tensor::from_vec(vec![2, 1, 6, 6], imgs.data()[72..].to_vec()).unwrap()),
        ];
        let net = sample_embedding(9, (1, 6, 6), 4, 1).unwrap();
        for step in 0..5 {
            let omega = AugSample::draw(&mut stream_rng(11, 1, step));
            let tape = Tape::new();
            let sv = tape.leaf(imgs.clone());
            let loss =
                dm_loss(&tape, &net, &real, sv, &labels, &omega, &AugPolicy::all()).unwrap();
            assert!(loss.item().abs() <= 1e-18, "step {step}: {}", loss.item());
        }

        // identity embedding, no augmentation, real {2}, synth {0} -> (2-0)^2 = 4
        let tape = Tape::new();
        let real = vec![Some(Tensor::from_vec(vec![1, 1, 1, 1], vec![2.0]).unwrap())];
        let sv = tape.leaf(Tensor::from_vec(vec![1, 1, 1, 1], vec![0.0]).unwrap());
        let loss = dm_loss(
            &tape,
            &IdentityEmbed { in_len: 1 },
            &real,
            sv,
            &[0],
            &AugSample::identity(),
            &AugPolicy::none(),
        )
        .unwrap();
        assert_eq!(loss.item(), 4.0);
    }

    #[test]
    fn dm_loss_is_order_invariant_within_class() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let a = Tensor::randn(&[3, 1, 4, 4], &mut r);
        let perm: Vec<f64> = {
            // rows 2, 0, 1
            let d = a.data();
            [&d[32..48], &d[..16], &d[16..32]].concat()
        };
        let b = Tensor::from_vec(vec![3, 1, 4, 4], perm).unwrap();
        let real = vec![Some(Tensor::randn(&[4, 1, 4, 4], &mut r))];
        let net = sample_embedding(7, (1, 4, 4), 3, 1).unwrap();
        let omega = AugSample::draw(&mut stream_rng(8, 1, 0));
        let eval = |imgs: &Tensor| {
            let tape = Tape::new();
            let sv = tape.leaf(imgs.clone());
            dm_loss(&tape, &net, &real, sv, &[0, 0, 0], &omega, &AugPolicy::all())
                .unwrap()
                .item()
        };
        assert!((eval(&a) - eval(&b)).abs() <= 1e-12);
    }

    #[test]
    fn dm_loss_errors_on_missing_real_class() {
        let tape = Tape::new();
        let sv = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        let real: Vec<Option<Tensor>> = vec![None];
        let err = dm_loss(
            &tape,
            &IdentityEmbed { in_len: 4 },
            &real,
            sv,
            &[0],
            &AugSample::identity(),
            &AugPolicy::none(),
        )
        .unwrap_err();
        assert!(matches!(err, DmError::EmptyRealClass(0)));
    }

    #[test]
    fn dm_pixel_gradient_passes_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::randn(&[2, 1, 8, 8], &mut r);
        let real = vec![Some(Tensor::randn(&[3, 1, 8, 8], &mut r))];
        let net = sample_embedding(11, (1, 8, 8), 4, 1).unwrap();
        let omega = AugSample::draw(&mut stream_rng(12, 1, 0));
        let err = finite_difference_check(
            fd_fn(move |t, v| {
                dm_loss(t, &net, &real, v, &[0, 0], &omega, &AugPolicy::all())
                    .map_err(|_| TensorError::NonFinite("dm".into()))
            }),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "dm pixel gradient error {err}");
    }
}
