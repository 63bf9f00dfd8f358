//! Classical hard-margin SVM ground truth: an SMO-style dual solver, KKT
//! residual checks, and the comparison report between extracted deep support
//! vectors and the true support vectors of a linear toy problem.

use crate::kkt::SyntheticSet;
use crate::nn::{forward_logits, ModelSpec, Parameters};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SvmError {
    #[error("labels must be +1/-1 and match the point count")]
    BadLabels,
    #[error("need at least one point of each class")]
    OneClass,
    #[error("data does not appear to be linearly separable (no solver progress)")]
    NonSeparable,
    #[error("dimension mismatch: {0}")]
    Dims(String),
}

/// Maximum-margin separator: weights, bias, and the dual coefficients.
#[derive(Clone, Debug)]
pub struct SvmSolution {
    pub w: Vec<f64>,
    pub b: f64,
    pub alphas: Vec<f64>,
}

impl SvmSolution {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.b
    }

    /// Indices with meaningfully positive dual coefficients.
    pub fn support_indices(&self, tol: f64) -> Vec<usize> {
        self.alphas
            .iter()
            .enumerate()
            .filter(|(_, &a)| a > tol)
            .map(|(i, _)| i)
            .collect()
    }
}

const PAIR_TOL: f64 = 1e-10;
const MAX_ITERS: usize = 500_000;
const ALPHA_BLOWUP: f64 = 1e8;

/// Solve the hard-margin dual with maximal-violating-pair updates.
///
/// Labels are +1/-1; the data must be strictly linearly separable, otherwise
/// the dual is unbounded and the solver reports failure once the multipliers
/// blow up or the iteration cap is hit without reaching optimality.
pub fn solve_svm(points: &[Vec<f64>], labels: &[f64]) -> Result<SvmSolution, SvmError> {
    let n = points.len();
    if n == 0 || labels.len() != n || labels.iter().any(|&y| y != 1.0 && y != -1.0) {
        return Err(SvmError::BadLabels);
    }
    if labels.iter().all(|&y| y == 1.0) || labels.iter().all(|&y| y == -1.0) {
        return Err(SvmError::OneClass);
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(SvmError::Dims("ragged point dimensions".into()));
    }

    let kernel: Vec<f64> = {
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                k[i * n + j] = points[i].iter().zip(&points[j]).map(|(a, b)| a * b).sum();
            }
        }
        k
    };

    let mut alpha = vec![0.0f64; n];
    // f_i = sum_j alpha_j y_j K_ij
    let mut f = vec![0.0f64; n];
    let mut converged = false;

    for _ in 0..MAX_ITERS {
        // maximal violating pair over (y_i - f_i):
        //   i may move up (alpha_i can grow) when y_i = +1, or y_i = -1 with alpha_i > 0
        //   j may move down when y_j = -1, or y_j = +1 with alpha_j > 0
        let mut up: Option<(usize, f64)> = None;
        let mut low: Option<(usize, f64)> = None;
        for t in 0..n {
            let v = labels[t] - f[t];
            let can_up = labels[t] > 0.0 || alpha[t] > 0.0;
            let can_low = labels[t] < 0.0 || alpha[t] > 0.0;
            if can_up && up.is_none_or(|(_, m)| v > m) {
                up = Some((t, v));
            }
            if can_low && low.is_none_or(|(_, m)| v < m) {
                low = Some((t, v));
            }
        }
        let (Some((i, m_up)), Some((j, m_low))) = (up, low) else {
            return Err(SvmError::NonSeparable);
        };
        if m_up - m_low <= PAIR_TOL {
            converged = true;
            break;
        }

        let quad = kernel[i * n + i] + kernel[j * n + j] - 2.0 * kernel[i * n + j];
        if quad <= 1e-300 {
            // duplicate or colinear pair; a degenerate direction with an
            // unresolvable violation means no separating margin exists
            return Err(SvmError::NonSeparable);
        }
        // step t moves alpha_i by y_i*t and alpha_j by -y_j*t, keeping
        // sum(alpha .* y) fixed; clip so both multipliers stay nonnegative
        let mut t_step = (m_up - m_low) / quad;
        if labels[i] < 0.0 {
            t_step = t_step.min(alpha[i]);
        }
        if labels[j] > 0.0 {
            t_step = t_step.min(alpha[j]);
        }
        if t_step <= 0.0 {
            return Err(SvmError::NonSeparable);
        }
        alpha[i] += labels[i] * t_step;
        alpha[j] -= labels[j] * t_step;
        for t in 0..n {
            f[t] += t_step * (kernel[i * n + t] - kernel[j * n + t]);
        }
        if alpha[i].max(alpha[j]) > ALPHA_BLOWUP {
            return Err(SvmError::NonSeparable);
        }
    }
    if !converged {
        return Err(SvmError::NonSeparable);
    }

    let mut w = vec![0.0f64; d];
    for t in 0..n {
        if alpha[t] > 0.0 {
            for (wd, &xd) in w.iter_mut().zip(&points[t]) {
                *wd += alpha[t] * labels[t] * xd;
            }
        }
    }
    // optimal bias lies in [min over low set, max over up set] of y - f;
    // at convergence the interval has collapsed
    let mut m_up = f64::NEG_INFINITY;
    let mut m_low = f64::INFINITY;
    for t in 0..n {
        let v = labels[t] - f[t];
        if labels[t] > 0.0 || alpha[t] > 0.0 {
            m_up = m_up.max(v);
        }
        if labels[t] < 0.0 || alpha[t] > 0.0 {
            m_low = m_low.min(v);
        }
    }
    let b = 0.5 * (m_up + m_low);

    Ok(SvmSolution { w, b, alphas: alpha })
}

/// Worst-case violations of the four KKT conditions.
#[derive(Clone, Copy, Debug)]
pub struct KktResiduals {
    /// max over i of max(0, 1 - y_i (w.x_i + b))
    pub primal: f64,
    /// max over i of max(0, -alpha_i)
    pub dual: f64,
    /// max over i of |alpha_i (y_i (w.x_i + b) - 1)|
    pub slack: f64,
    /// || w - sum_i alpha_i y_i x_i ||
    pub stationarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.slack).max(self.stationarity)
    }
}

pub fn kkt_residuals(sol: &SvmSolution, points: &[Vec<f64>], labels: &[f64]) -> KktResiduals {
    let mut primal = 0.0f64;
    let mut dual = 0.0f64;
    let mut slack = 0.0f64;
    let mut recon = vec![0.0f64; sol.w.len()];
    for ((x, &y), &a) in points.iter().zip(labels).zip(&sol.alphas) {
        let margin = y * sol.decision(x);
        primal = primal.max(1.0 - margin);
        dual = dual.max(-a);
        slack = slack.max((a * (margin - 1.0)).abs());
        for (r, &xd) in recon.iter_mut().zip(x) {
            *r += a * y * xd;
        }
    }
    let stationarity = sol
        .w
        .iter()
        .zip(&recon)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    KktResiduals { primal: primal.max(0.0), dual, slack, stationarity }
}

/// One row of the DSV-versus-support-vector comparison.
#[derive(Clone, Debug)]
pub struct DsvRow {
    pub index: usize,
    pub nearest_sv_distance: f64,
    pub functional_margin: f64,
}

#[derive(Clone, Debug)]
pub struct DsvSvReport {
    pub rows: Vec<DsvRow>,
    pub min_train_margin: f64,
}

/// Binary decision score of a two-class linear model: the logit difference
/// (class 1 minus class 0), the analogue of `w.x + b` with labels
/// `{0 -> -1, 1 -> +1}`.
pub fn linear_score(
    spec: &ModelSpec,
    params: &Parameters,
    point: &[f64],
) -> Result<f64, SvmError> {
    if spec.classes != 2 {
        return Err(SvmError::Dims(format!("expected 2 classes, spec has {}", spec.classes)));
    }
    if point.len() != spec.input_len() {
        return Err(SvmError::Dims(format!(
            "point has {} coordinates, model expects {}",
            point.len(),
            spec.input_len()
        )));
    }
    let (c, h, w) = spec.in_shape;
    let batch = crate::tensor::Tensor::from_vec(vec![1, c, h, w], point.to_vec())
        .map_err(|e| SvmError::Dims(e.to_string()))?;
    let logits =
        forward_logits(spec, params, &batch).map_err(|e| SvmError::Dims(e.to_string()))?;
    Ok(logits.data()[1] - logits.data()[0])
}

/// For each extracted DSV: distance to the nearest true support vector and
/// its functional margin under the trained model, with the minimum training
/// margin for reference.
pub fn dsv_vs_sv_distance(
    dsvs: &SyntheticSet,
    sol: &SvmSolution,
    points: &[Vec<f64>],
    spec: &ModelSpec,
    params: &Parameters,
) -> Result<DsvSvReport, SvmError> {
    let sv_idx = sol.support_indices(1e-6);
    if sv_idx.is_empty() {
        return Err(SvmError::Dims("solution has no support vectors".into()));
    }
    let d = spec.input_len();
    let n = dsvs.len();
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let point = &dsvs.images.data()[i * d..(i + 1) * d];
        let nearest = sv_idx
            .iter()
            .map(|&s| {
                points[s]
                    .iter()
                    .zip(point)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(f64::INFINITY, f64::min);
        let margin = linear_score(spec, params, point)?.abs();
        rows.push(DsvRow { index: i, nearest_sv_distance: nearest, functional_margin: margin });
    }
    let min_train_margin = points
        .iter()
        .map(|p| linear_score(spec, params, p).map(f64::abs))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    Ok(DsvSvReport { rows, min_train_margin })
}

/// Outcome of the end-to-end oracle validation suite.
#[derive(Clone, Debug)]
pub struct OracleOutcome {
    /// Worst residual over the random separable instances.
    pub max_random_residual: f64,
    pub instances: usize,
    /// Deviations of the symmetric fixture from (w, b, alpha) = ((1,0), 0, 0.5).
    pub fixture_error: f64,
    /// Final stationarity loss of the DSV extraction run.
    pub final_stationarity: f64,
    /// DSV margins against the minimum training margin.
    pub report: DsvSvReport,
    /// max over DSVs of |margin - min_train_margin|.
    pub worst_margin_gap: f64,
}

/// Train the two-class linear probe to true convergence: full-batch
/// gradient descent on mean cross-entropy plus a small ridge term, until the
/// gradient vanishes. The ridge term gives a unique optimum, and at that
/// optimum the parameters equal a negative positively-weighted combination
/// of per-sample gradients — the exact stationarity geometry the extraction
/// is asked to recover.
pub fn train_linear_probe(
    data: &crate::data::LabeledSet,
    decay: f64,
    seed: u64,
) -> Result<(ModelSpec, Parameters), SvmError> {
    use crate::kkt::batch_ce;
    use crate::nn::{forward, init_params, ParamVars};
    use crate::tensor::{Tape, Tensor};

    let (c, h, w) = data.image_dims();
    let spec = ModelSpec::mlp((c, h, w), 2, 1, 1);
    let mut params = init_params(&spec, seed).map_err(|e| SvmError::Dims(e.to_string()))?;
    let lr = 2.0;
    for _ in 0..400_000 {
        let tape = Tape::new();
        let pv = ParamVars::leaf(&tape, &params);
        let batch = tape.leaf(data.images.clone());
        let logits = forward(&spec, &pv, batch).map_err(|e| SvmError::Dims(e.to_string()))?;
        let loss = batch_ce(&tape, logits, &data.labels)
            .map_err(|e| SvmError::Dims(e.to_string()))?
            .mean_all();
        let grads = loss
            .grad(&pv.vars, false)
            .map_err(|e| SvmError::Dims(e.to_string()))?;
        let mut max_step = 0.0f64;
        let mut i = 0usize;
        params = params.map_tensors(|name, t| {
            let g = grads[i].value();
            i += 1;
            let ridge = if name.ends_with(".bias") { 0.0 } else { decay };
            let data: Vec<f64> = t
                .data()
                .iter()
                .zip(g.data())
                .map(|(p, gv)| {
                    let full = gv + ridge * p;
                    max_step = max_step.max(full.abs());
                    p - lr * full
                })
                .collect();
            Tensor::from_vec(t.shape().to_vec(), data).expect("same shape")
        });
        if max_step <= 1e-12 {
            break;
        }
    }
    Ok((spec, params))
}

/// Run the full SVM-oracle validation: solver exactness on the symmetric
/// fixture, KKT residuals on random separable instances, and DSV extraction
/// on a converged linear two-class model compared against the true support
/// vectors.
pub fn run_oracle_suite(instances: usize, seed: u64) -> Result<OracleOutcome, SvmError> {
    use crate::data::{gen_toy, toy_points, ToyKind};
    use crate::engine::{extract_dsv_from, DistillConfig, InitMode, Pipc};
    use crate::kkt::LossWeights;

    // exact symmetric fixture
    let sym = gen_toy(ToyKind::SeparableSymmetric, 1, 0).map_err(to_dims)?;
    let sym_points = toy_points(&sym);
    let sym_labels: Vec<f64> = sym.labels.iter().map(|&y| if y == 1 { 1.0 } else { -1.0 }).collect();
    let sol = solve_svm(&sym_points, &sym_labels)?;
    let mut fixture_error: f64 = (sol.w[0] - 1.0).abs().max(sol.w[1].abs()).max(sol.b.abs());
    for (i, &a) in sol.alphas.iter().enumerate() {
        let want = if sym_points[i][0].abs() == 1.0 { 0.5 } else { 0.0 };
        fixture_error = fixture_error.max((a - want).abs());
    }

    // random separable instances
    let mut max_random_residual = 0.0f64;
    for k in 0..instances {
        let toy = gen_toy(ToyKind::Separable2d, 10, seed.wrapping_add(k as u64)).map_err(to_dims)?;
        let pts = toy_points(&toy);
        let labels: Vec<f64> = toy.labels.iter().map(|&y| if y == 1 { 1.0 } else { -1.0 }).collect();
        let sol = solve_svm(&pts, &labels)?;
        max_random_residual = max_random_residual.max(kkt_residuals(&sol, &pts, &labels).max());
    }

    // deep extraction against the classical solution, on the geometry where
    // the correspondence is exact: every accessible point on the margin
    let toy = gen_toy(ToyKind::MarginLines, 10, seed).map_err(to_dims)?;
    let points = toy_points(&toy);
    let labels_pm: Vec<f64> = toy.labels.iter().map(|&y| if y == 1 { 1.0 } else { -1.0 }).collect();
    let sol = solve_svm(&points, &labels_pm)?;

    let (spec, theta) = train_linear_probe(&toy, 1e-4, seed ^ 0x5eed)?;

    let mut config = DistillConfig::new(
        2,
        Pipc::All,
        LossWeights { alpha: 1.0, beta: 0.0, gamma: 0.0 },
        seed ^ 0xd5,
    );
    config.steps = 2000;
    config.pixel_lr = 0.0002;
    config.lambda_lr = 0.1;
    config.init = InitMode::Real;
    config.gated = true;
    let (dsvs, manifest) =
        extract_dsv_from(&spec, &theta, Some(&toy), &config).map_err(|e| SvmError::Dims(e.to_string()))?;
    let final_stationarity = manifest.trace.last().map(|t| t.stat).unwrap_or(f64::NAN);

    let report = dsv_vs_sv_distance(&dsvs, &sol, &points, &spec, &theta)?;
    let worst_margin_gap = report
        .rows
        .iter()
        .map(|r| (r.functional_margin - report.min_train_margin).abs())
        .fold(0.0, f64::max);

    Ok(OracleOutcome {
        max_random_residual,
        instances,
        fixture_error,
        final_stationarity,
        report,
        worst_margin_gap,
    })
}

fn to_dims(e: crate::data::DataError) -> SvmError {
    SvmError::Dims(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn symmetric_fixture() -> (Vec<Vec<f64>>, Vec<f64>) {
        (
            vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![-1.0, 0.0], vec![-2.0, 0.0]],
            vec![1.0, 1.0, -1.0, -1.0],
        )
    }

    #[test]
    fn symmetric_fixture_is_exact() {
        let (points, labels) = symmetric_fixture();
        let sol = solve_svm(&points, &labels).unwrap();
        assert!((sol.w[0] - 1.0).abs() <= 1e-6, "w = {:?}", sol.w);
        assert!(sol.w[1].abs() <= 1e-6);
        assert!(sol.b.abs() <= 1e-6);
        assert!((sol.alphas[0] - 0.5).abs() <= 1e-6);
        assert!((sol.alphas[2] - 0.5).abs() <= 1e-6);
        assert!(sol.alphas[1].abs() <= 1e-6);
        assert!(sol.alphas[3].abs() <= 1e-6);
        let res = kkt_residuals(&sol, &points, &labels);
        assert!(res.max() <= 1e-9, "{res:?}");
    }

    #[test]
    fn scaling_inputs_rescales_the_margin() {
        let (points, labels) = symmetric_fixture();
        let doubled: Vec<Vec<f64>> = points
            .iter()
            .map(|p| p.iter().map(|v| v * 2.0).collect())
            .collect();
        let sol = solve_svm(&doubled, &labels).unwrap();
        assert!((sol.w[0] - 0.5).abs() <= 1e-6, "w = {:?}", sol.w);
    }

    #[test]
    fn duplicating_points_leaves_separator_unchanged() {
        let (mut points, mut labels) = random_separable(20, 42);
        let sol_a = solve_svm(&points, &labels).unwrap();
        let extra: Vec<Vec<f64>> = points.clone();
        points.extend(extra);
        labels.extend(labels.clone());
        let sol_b = solve_svm(&points, &labels).unwrap();
        for (a, b) in sol_a.w.iter().zip(&sol_b.w) {
            assert!((a - b).abs() <= 1e-6);
        }
        assert!((sol_a.b - sol_b.b).abs() <= 1e-6);
    }

    pub(crate) fn random_separable(n_per_class: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        // points pushed away from a random hyperplane by at least half the
        // margin on each side
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let u = [theta.cos(), theta.sin()];
        let offset: f64 = rng.gen_range(-0.5..0.5);
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for class in [1.0f64, -1.0] {
            for _ in 0..n_per_class {
                let g = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
                let along: f64 = u[0] * g[0] + u[1] * g[1];
                let shift = offset + class * (0.25 + rng.gen_range(0.0f64..1.5));
                points.push(vec![g[0] + (shift - along) * u[0], g[1] + (shift - along) * u[1]]);
                labels.push(class);
            }
        }
        (points, labels)
    }

    #[test]
    fn random_instances_satisfy_kkt_residuals() {
        for seed in 0..25 {
            let (points, labels) = random_separable(10, seed);
            let sol = solve_svm(&points, &labels).unwrap();
            let res = kkt_residuals(&sol, &points, &labels);
            assert!(res.max() <= 1e-6, "seed {seed}: {res:?}");
            // non-support points get vanishing duals
            for (i, &a) in sol.alphas.iter().enumerate() {
                let margin = labels[i] * sol.decision(&points[i]);
                if margin > 1.0 + 1e-4 {
                    assert!(a <= 1e-6, "seed {seed} point {i}: alpha {a} margin {margin}");
                }
            }
        }
    }

    #[test]
    fn objective_matches_subset_enumeration_oracle() {
        // exhaustive oracle: the hard-margin optimum is determined by 2 or 3
        // active constraints; try every candidate set, solve the equality
        // system, keep feasible candidates, take the minimum-norm one
        for seed in [1u64, 2, 3, 4, 5] {
            let (points, labels) = random_separable(10, 100 + seed);
            let sol = solve_svm(&points, &labels).unwrap();
            let got = sol.w.iter().map(|v| v * v).sum::<f64>();
            let want = enumerate_optimum(&points, &labels);
            assert!(
                (got - want).abs() <= 1e-4 * want.max(1.0),
                "seed {seed}: solver {got} oracle {want}"
            );
        }
    }

    fn enumerate_optimum(points: &[Vec<f64>], labels: &[f64]) -> f64 {
        let n = points.len();
        let feasible = |w: &[f64; 2], b: f64| {
            points
                .iter()
                .zip(labels)
                .all(|(x, &y)| y * (w[0] * x[0] + w[1] * x[1] + b) >= 1.0 - 1e-9)
        };
        let mut best = f64::INFINITY;
        // pairs with opposite labels: both on the margin, w along x_i - x_j
        for i in 0..n {
            for j in 0..n {
                if labels[i] <= labels[j] {
                    continue;
                }
                let dx = [points[i][0] - points[j][0], points[i][1] - points[j][1]];
                let d2: f64 = dx[0] * dx[0] + dx[1] * dx[1];
                if d2 < 1e-12 {
                    continue;
                }
                let w = [2.0 * dx[0] / d2, 2.0 * dx[1] / d2];
                let b = 1.0 - (w[0] * points[i][0] + w[1] * points[i][1]);
                if feasible(&w, b) {
                    best = best.min(w[0] * w[0] + w[1] * w[1]);
                }
            }
        }
        // triples: solve y_k (w.x_k + b) = 1 exactly for (w, b)
        for i in 0..n {
            for j in i + 1..n {
                for k in j + 1..n {
                    let idx = [i, j, k];
                    let mut m = [[0.0f64; 3]; 3];
                    let mut rhs = [0.0f64; 3];
                    for (r, &t) in idx.iter().enumerate() {
                        m[r] = [labels[t] * points[t][0], labels[t] * points[t][1], labels[t]];
                        rhs[r] = 1.0;
                    }
                    let Some(wb) = solve3(&m, &rhs) else { continue };
                    let w = [wb[0], wb[1]];
                    if feasible(&w, wb[2]) {
                        best = best.min(w[0] * w[0] + w[1] * w[1]);
                    }
                }
            }
        }
        best
    }

    fn solve3(m: &[[f64; 3]; 3], rhs: &[f64; 3]) -> Option<[f64; 3]> {
        let mut a = *m;
        let mut b = *rhs;
        for col in 0..3 {
            let piv = (col..3).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
            if a[piv][col].abs() < 1e-12 {
                return None;
            }
            a.swap(col, piv);
            b.swap(col, piv);
            for row in 0..3 {
                if row != col {
                    let f = a[row][col] / a[col][col];
                    let pivot_row = a[col];
                    for (entry, pv) in a[row].iter_mut().zip(pivot_row) {
                        *entry -= f * pv;
                    }
                    b[row] -= f * b[col];
                }
            }
        }
        Some([b[0] / a[0][0], b[1] / a[1][1], b[2] / a[2][2]])
    }

    #[test]
    fn residuals_respond_linearly_to_perturbation() {
        let (points, labels) = symmetric_fixture();
        let sol = solve_svm(&points, &labels).unwrap();

        // alpha bumped by 0.1 on a support vector: stationarity = 0.1 * |x|
        let mut bumped = sol.clone();
        bumped.alphas[0] += 0.1;
        let res = kkt_residuals(&bumped, &points, &labels);
        let norm = (points[0][0] * points[0][0] + points[0][1] * points[0][1]).sqrt();
        assert!((res.stationarity - 0.1 * norm).abs() <= 1e-9);

        // zeroed alphas: stationarity = |w|
        let mut zeroed = sol.clone();
        zeroed.alphas.iter_mut().for_each(|a| *a = 0.0);
        let res = kkt_residuals(&zeroed, &points, &labels);
        let wn = sol.w.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((res.stationarity - wn).abs() <= 1e-9);
    }

    #[test]
    fn dsv_report_has_zero_distance_at_support_vectors() {
        use crate::kkt::SyntheticSet;
        use crate::tensor::Tensor;
        let (points, labels) = symmetric_fixture();
        let sol = solve_svm(&points, &labels).unwrap();
        let (spec, theta) = {
            let set = crate::data::gen_toy(crate::data::ToyKind::SeparableSymmetric, 1, 0).unwrap();
            train_linear_probe(&set, 1e-3, 3).unwrap()
        };
        // candidates placed exactly at the two support vectors
        let dsvs = SyntheticSet::new(
            Tensor::from_vec(vec![2, 2, 1, 1], vec![-1.0, 0.0, 1.0, 0.0]).unwrap(),
            vec![0, 1],
            vec![0.5, 0.5],
        )
        .unwrap();
        let report = dsv_vs_sv_distance(&dsvs, &sol, &points, &spec, &theta).unwrap();
        assert_eq!(report.rows.len(), dsvs.len());
        for row in &report.rows {
            assert!(row.nearest_sv_distance <= 1e-12, "{row:?}");
        }
    }

    #[test]
    fn non_separable_data_is_reported() {
        let points = vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![1.0, 1.0], vec![-1.0, 0.5]];
        let labels = vec![1.0, -1.0, 1.0, -1.0];
        assert!(matches!(solve_svm(&points, &labels), Err(SvmError::NonSeparable)));
    }
}
