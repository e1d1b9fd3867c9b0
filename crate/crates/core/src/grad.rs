//! Reverse-mode gradients: from an image gradient back through rendering,
//! the point recurrence, and the matrix factorization, down to every
//! continuous transform parameter.
//!
//! The adjoint recurrence runs backward over the trajectory, scatter-adding
//! matrix and translation gradients into the shared transform slots selected
//! by the index sequence. Matrix gradients are then chained into the factored
//! parameters analytically. The canvas-fit map produced by point
//! normalization is treated as a constant throughout.

use crate::error::{Error, Result};
use crate::ifs::{
    iterate_with_tables, normalize_map, FractalSystem, IndexSequence, NormalizeMap,
};
use crate::render::{render, render_backward, Canvas, RenderConfig};

/// Gradients for one transform's continuous parameters. The flip signs are
/// discrete and receive no gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TransformGradients {
    pub d_theta: f64,
    pub d_phi: f64,
    pub d_sigma1: f64,
    pub d_sigma2: f64,
    pub d_b: [f64; 2],
}

/// Gradients for every transform of a system, in transform order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterGradients {
    pub per_transform: Vec<TransformGradients>,
}

impl ParameterGradients {
    pub fn zeros(n: usize) -> Self {
        ParameterGradients {
            per_transform: vec![TransformGradients::default(); n],
        }
    }

    pub fn add_assign(&mut self, other: &ParameterGradients) {
        for (a, b) in self.per_transform.iter_mut().zip(&other.per_transform) {
            a.d_theta += b.d_theta;
            a.d_phi += b.d_phi;
            a.d_sigma1 += b.d_sigma1;
            a.d_sigma2 += b.d_sigma2;
            a.d_b[0] += b.d_b[0];
            a.d_b[1] += b.d_b[1];
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.per_transform {
            g.d_theta *= factor;
            g.d_phi *= factor;
            g.d_sigma1 *= factor;
            g.d_sigma2 *= factor;
            g.d_b[0] *= factor;
            g.d_b[1] *= factor;
        }
    }

    /// Euclidean norm over all entries.
    pub fn norm(&self) -> f64 {
        self.per_transform
            .iter()
            .map(|g| {
                g.d_theta * g.d_theta
                    + g.d_phi * g.d_phi
                    + g.d_sigma1 * g.d_sigma1
                    + g.d_sigma2 * g.d_sigma2
                    + g.d_b[0] * g.d_b[0]
                    + g.d_b[1] * g.d_b[1]
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.per_transform.iter().all(|g| {
            g.d_theta.is_finite()
                && g.d_phi.is_finite()
                && g.d_sigma1.is_finite()
                && g.d_sigma2.is_finite()
                && g.d_b[0].is_finite()
                && g.d_b[1].is_finite()
        })
    }
}

/// Matrix-space gradients (entries of `A_n` and `b_n`), before any chaining
/// into the factored parameterization.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixGradients {
    pub d_matrices: Vec<[[f64; 2]; 2]>,
    pub d_translations: Vec<[f64; 2]>,
}

impl MatrixGradients {
    pub fn zeros(n: usize) -> Self {
        MatrixGradients {
            d_matrices: vec![[[0.0; 2]; 2]; n],
            d_translations: vec![[0.0; 2]; n],
        }
    }

    pub fn add_assign(&mut self, other: &MatrixGradients) {
        for (a, b) in self.d_matrices.iter_mut().zip(&other.d_matrices) {
            for i in 0..2 {
                for j in 0..2 {
                    a[i][j] += b[i][j];
                }
            }
        }
        for (a, b) in self.d_translations.iter_mut().zip(&other.d_translations) {
            a[0] += b[0];
            a[1] += b[1];
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for m in &mut self.d_matrices {
            for row in m.iter_mut() {
                row[0] *= factor;
                row[1] *= factor;
            }
        }
        for b in &mut self.d_translations {
            b[0] *= factor;
            b[1] *= factor;
        }
    }

    pub fn norm(&self) -> f64 {
        let m_sq: f64 = self
            .d_matrices
            .iter()
            .flat_map(|m| m.iter().flatten())
            .map(|v| v * v)
            .sum();
        let b_sq: f64 = self
            .d_translations
            .iter()
            .flat_map(|b| b.iter())
            .map(|v| v * v)
            .sum();
        (m_sq + b_sq).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.d_matrices
            .iter()
            .all(|m| m.iter().flatten().all(|v| v.is_finite()))
            && self
                .d_translations
                .iter()
                .all(|b| b[0].is_finite() && b[1].is_finite())
    }
}

/// A loss over images that also supplies the gradient with respect to the
/// generated image. Any source of image gradients can drive the engine
/// through this interface.
pub trait ImageLoss: Sync {
    /// Returns `(loss, d_loss / d_generated)` with the gradient flattened
    /// row-major to `h * w` entries.
    fn loss_and_grad(&self, generated: &Canvas, target: &Canvas) -> Result<(f64, Vec<f64>)>;
}

/// Pixel-wise mean squared error.
#[derive(Clone, Copy, Debug, Default)]
pub struct MseLoss;

impl ImageLoss for MseLoss {
    fn loss_and_grad(&self, generated: &Canvas, target: &Canvas) -> Result<(f64, Vec<f64>)> {
        mse_loss(generated, target)
    }
}

/// Mean over pixels of `(generated - target)^2`, with gradient
/// `2 (generated - target) / (h * w)`.
pub fn mse_loss(generated: &Canvas, target: &Canvas) -> Result<(f64, Vec<f64>)> {
    if !generated.same_shape(target) {
        return Err(Error::ShapeMismatch {
            expected_h: target.h,
            expected_w: target.w,
            got_h: generated.h,
            got_w: generated.w,
        });
    }
    let count = generated.pixels.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(generated.pixels.len());
    for (&g, &t) in generated.pixels.iter().zip(&target.pixels) {
        let diff = g - t;
        loss += diff * diff;
        grad.push(2.0 * diff / count);
    }
    Ok((loss / count, grad))
}

/// Runs the adjoint recurrence backward over a trajectory, producing
/// matrix-space gradients. `point_grads` must hold `T + 1` entries aligned
/// with `traj.points`; the entry for `v0` is ignored because the initial
/// point is not learned.
pub fn backprop_to_matrices(
    traj: &crate::ifs::PointTrajectory,
    point_grads: &[[f64; 2]],
    matrices: &[[[f64; 2]; 2]],
) -> MatrixGradients {
    assert_eq!(
        point_grads.len(),
        traj.points.len(),
        "point gradients must align with trajectory points"
    );
    let n = matrices.len();
    let mut grads = MatrixGradients::zeros(n);
    let t_len = traj.t_len();
    let mut adjoint = [0.0f64; 2];
    if t_len > 0 {
        adjoint = point_grads[t_len];
    }
    for t in (1..=t_len).rev() {
        let idx = traj.indices.indices[t - 1];
        let v_prev = traj.points[t - 1];
        let da = &mut grads.d_matrices[idx];
        da[0][0] += adjoint[0] * v_prev[0];
        da[0][1] += adjoint[0] * v_prev[1];
        da[1][0] += adjoint[1] * v_prev[0];
        da[1][1] += adjoint[1] * v_prev[1];
        grads.d_translations[idx][0] += adjoint[0];
        grads.d_translations[idx][1] += adjoint[1];
        let a = &matrices[idx];
        adjoint = [
            a[0][0] * adjoint[0] + a[1][0] * adjoint[1] + point_grads[t - 1][0],
            a[0][1] * adjoint[0] + a[1][1] * adjoint[1] + point_grads[t - 1][1],
        ];
    }
    grads
}

/// Chains matrix-space gradients into the factored parameters using the
/// closed-form entry derivatives.
pub fn chain_to_parameters(s: &FractalSystem, matrix_grads: &MatrixGradients) -> ParameterGradients {
    let per_transform = s
        .transforms()
        .iter()
        .zip(&matrix_grads.d_matrices)
        .zip(&matrix_grads.d_translations)
        .map(|((t, da), db)| {
            let p = t.matrix_partials();
            let dot = |m: &[[f64; 2]; 2]| {
                da[0][0] * m[0][0] + da[0][1] * m[0][1] + da[1][0] * m[1][0] + da[1][1] * m[1][1]
            };
            TransformGradients {
                d_theta: dot(&p.d_theta),
                d_phi: dot(&p.d_phi),
                d_sigma1: dot(&p.d_sigma1),
                d_sigma2: dot(&p.d_sigma2),
                d_b: *db,
            }
        })
        .collect();
    ParameterGradients { per_transform }
}

/// Backpropagates point gradients through one trajectory into the factored
/// parameters of the system that generated it.
pub fn backprop_trajectory(
    traj: &crate::ifs::PointTrajectory,
    point_grads: &[[f64; 2]],
    s: &FractalSystem,
) -> Result<ParameterGradients> {
    let matrix_grads = backprop_to_matrices(traj, point_grads, &s.matrices());
    let grads = chain_to_parameters(s, &matrix_grads);
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient {
            context: "trajectory backprop".into(),
        });
    }
    Ok(grads)
}

/// Pulls pixel-space point gradients back through the canvas-fit map into
/// raw trajectory coordinates, including the map's own dependence on the
/// cloud's bounding box.
///
/// The fit is `p_pix = (q - c) * s + C` with `c` the box center and `s =
/// usable / max(range_row, range_col, eps)`. Besides the direct `* s` term,
/// gradients flow into the extremal coordinates that define `c` and `s`;
/// ties take the first point in trajectory order. The resulting gradient
/// field is invariant to translating or uniformly rescaling the whole cloud,
/// which is what makes it stable: shrinking every transform cannot pretend
/// to darken the canvas, because the re-fit cancels it. A fully collapsed
/// cloud (range below `eps` on both axes) gets zero gradients; noise or
/// other batch members must revive it.
pub fn chain_through_fit_map(
    raw_points: &[[f64; 2]],
    pixel_grads: &[[f64; 2]],
    map: &NormalizeMap,
) -> Vec<[f64; 2]> {
    assert_eq!(raw_points.len(), pixel_grads.len());
    let mut min = [f64::INFINITY; 2];
    let mut max = [f64::NEG_INFINITY; 2];
    let mut argmin = [0usize; 2];
    let mut argmax = [0usize; 2];
    for (t, q) in raw_points.iter().enumerate() {
        for k in 0..2 {
            if q[k] < min[k] {
                min[k] = q[k];
                argmin[k] = t;
            }
            if q[k] > max[k] {
                max[k] = q[k];
                argmax[k] = t;
            }
        }
    }
    let ranges = [max[0] - min[0], max[1] - min[1]];
    let range = ranges[0].max(ranges[1]);
    if range < crate::ifs::NORMALIZE_EPS {
        return vec![[0.0; 2]; raw_points.len()];
    }
    let s = map.scale;
    let c = map.source_center;

    // Direct term.
    let mut grads: Vec<[f64; 2]> = pixel_grads.iter().map(|g| [g[0] * s, g[1] * s]).collect();

    // Through the box center: c_k = (min_k + max_k) / 2.
    let axis_grad_sum = [
        pixel_grads.iter().map(|g| g[0]).sum::<f64>(),
        pixel_grads.iter().map(|g| g[1]).sum::<f64>(),
    ];
    for k in 0..2 {
        let d_center = -s * axis_grad_sum[k] / 2.0;
        grads[argmin[k]][k] += d_center;
        grads[argmax[k]][k] += d_center;
    }

    // Through the scale: s = usable / r with r the larger range.
    let d_scale: f64 = pixel_grads
        .iter()
        .zip(raw_points)
        .map(|(g, q)| g[0] * (q[0] - c[0]) + g[1] * (q[1] - c[1]))
        .sum();
    let sel = if ranges[0] >= ranges[1] { 0 } else { 1 };
    let d_range = -d_scale * s / range;
    grads[argmax[sel]][sel] += d_range;
    grads[argmin[sel]][sel] -= d_range;

    grads
}

/// Loss and matrix-space gradient of one full trajectory pipeline:
/// iterate, fit to canvas, render, loss, and backpropagate.
pub fn trajectory_loss_grad(
    matrices: &[[[f64; 2]; 2]],
    translations: &[[f64; 2]],
    z: &IndexSequence,
    v0: [f64; 2],
    target: &Canvas,
    render_cfg: &RenderConfig,
    loss: &dyn ImageLoss,
) -> Result<(f64, MatrixGradients)> {
    let traj = iterate_with_tables(matrices, translations, z, v0)?;
    let map = normalize_map(&traj.points, render_cfg.h, render_cfg.w);
    let pixel_points = map.apply_all(&traj.points);
    let canvas = render(&pixel_points, render_cfg)?;
    let (loss_value, grad_image) = loss.loss_and_grad(&canvas, target)?;
    let pixel_grads = render_backward(&pixel_points, render_cfg, &canvas, &grad_image)?;
    let point_grads = chain_through_fit_map(&traj.points, &pixel_grads, &map);
    let grads = backprop_to_matrices(&traj, &point_grads, matrices);
    if !loss_value.is_finite() || !grads.is_finite() {
        return Err(Error::NonFiniteGradient {
            context: "trajectory pipeline".into(),
        });
    }
    Ok((loss_value, grads))
}

/// Forward-only variant of [`trajectory_loss_grad`].
pub fn trajectory_loss(
    matrices: &[[[f64; 2]; 2]],
    translations: &[[f64; 2]],
    z: &IndexSequence,
    v0: [f64; 2],
    target: &Canvas,
    render_cfg: &RenderConfig,
    loss: &dyn ImageLoss,
) -> Result<f64> {
    let traj = iterate_with_tables(matrices, translations, z, v0)?;
    let map = normalize_map(&traj.points, render_cfg.h, render_cfg.w);
    let pixel_points = map.apply_all(&traj.points);
    let canvas = render(&pixel_points, render_cfg)?;
    Ok(loss.loss_and_grad(&canvas, target)?.0)
}

/// Maximum relative error between analytic and central-difference gradients,
/// split by parameter kind.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheckReport {
    pub theta: f64,
    pub phi: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub b: f64,
}

impl GradCheckReport {
    pub fn max(&self) -> f64 {
        self.theta
            .max(self.phi)
            .max(self.sigma1)
            .max(self.sigma2)
            .max(self.b)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max() < tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "parameter  max_rel_error")?;
        writeln!(f, "theta      {:.3e}", self.theta)?;
        writeln!(f, "phi        {:.3e}", self.phi)?;
        writeln!(f, "sigma1     {:.3e}", self.sigma1)?;
        writeln!(f, "sigma2     {:.3e}", self.sigma2)?;
        write!(f, "b          {:.3e}", self.b)
    }
}

/// Verifies the analytic gradient of the averaged full-pipeline loss against
/// central finite differences, perturbing every continuous scalar parameter.
///
/// Index sequences and initial points are held fixed across the perturbed
/// evaluations; the canvas-fit map is recomputed inside each forward pass,
/// matching the differentiated function. Sigma values should stay at least
/// `step` away from the clamp boundaries.
pub fn finite_difference_check(
    s: &FractalSystem,
    sequences: &[(IndexSequence, [f64; 2])],
    target: &Canvas,
    render_cfg: &RenderConfig,
    step: f64,
) -> Result<GradCheckReport> {
    assert!(step > 0.0, "step must be positive");
    let loss = MseLoss;
    let matrices = s.matrices();
    let translations = s.translations();

    // Analytic batch gradient: average over sequences.
    let mut total = MatrixGradients::zeros(s.n());
    for (z, v0) in sequences {
        let (_, g) =
            trajectory_loss_grad(&matrices, &translations, z, *v0, target, render_cfg, &loss)?;
        total.add_assign(&g);
    }
    total.scale(1.0 / sequences.len() as f64);
    let analytic = chain_to_parameters(s, &total);

    let batch_loss = |sys: &FractalSystem| -> Result<f64> {
        let m = sys.matrices();
        let b = sys.translations();
        let mut acc = 0.0;
        for (z, v0) in sequences {
            acc += trajectory_loss(&m, &b, z, *v0, target, render_cfg, &loss)?;
        }
        Ok(acc / sequences.len() as f64)
    };

    type Access = fn(&mut crate::ifs::ReparamTransform) -> &mut f64;
    let scalar_params: [Access; 6] = [
        |t| &mut t.theta,
        |t| &mut t.phi,
        |t| &mut t.sigma1,
        |t| &mut t.sigma2,
        |t| &mut t.b[0],
        |t| &mut t.b[1],
    ];
    let mut report = GradCheckReport::default();
    for i in 0..s.n() {
        let analytic_i = analytic.per_transform[i];
        let analytic_values = [
            analytic_i.d_theta,
            analytic_i.d_phi,
            analytic_i.d_sigma1,
            analytic_i.d_sigma2,
            analytic_i.d_b[0],
            analytic_i.d_b[1],
        ];
        for (kind, (access, analytic_value)) in
            scalar_params.iter().zip(analytic_values).enumerate()
        {
            let mut plus = s.clone();
            *access(&mut plus.transforms_mut()[i]) += step;
            let mut minus = s.clone();
            *access(&mut minus.transforms_mut()[i]) -= step;
            let numeric = (batch_loss(&plus)? - batch_loss(&minus)?) / (2.0 * step);
            let rel = (analytic_value - numeric).abs() / numeric.abs().max(1e-8);
            let slot = match kind {
                0 => &mut report.theta,
                1 => &mut report.phi,
                2 => &mut report.sigma1,
                3 => &mut report.sigma2,
                _ => &mut report.b,
            };
            if rel > *slot {
                *slot = rel;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ifs::{sample_index_sequence, sample_v0, PointTrajectory, ReparamTransform};
    use rand::RngExt;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn simple_system(n: usize, seed: u64) -> FractalSystem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let s = FractalSystem::random(n, &mut rng);
            let ok = s
                .transforms()
                .iter()
                .all(|t| t.sigma1 >= 0.2 && t.sigma1 <= 0.8 && t.sigma2 >= 0.2 && t.sigma2 <= 0.8);
            if ok {
                return s;
            }
        }
    }

    fn canvas_from(values: &[f64], h: usize, w: usize) -> Canvas {
        Canvas {
            h,
            w,
            pixels: values.to_vec(),
            pre_clamp: None,
        }
    }

    #[test]
    fn mse_identical_images_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let values: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
        let a = canvas_from(&values, 8, 8);
        let (loss, grad) = mse_loss(&a, &a).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mse_ones_vs_zeros() {
        let ones = canvas_from(&vec![1.0; 1024], 32, 32);
        let zeros = canvas_from(&vec![0.0; 1024], 32, 32);
        let (loss, grad) = mse_loss(&ones, &zeros).unwrap();
        assert!((loss - 1.0).abs() < 1e-15);
        assert!(grad.iter().all(|&g| (g - 2.0 / 1024.0).abs() < 1e-18));
    }

    #[test]
    fn mse_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a_vals: Vec<f64> = (0..414).map(|_| rng.random::<f64>()).collect();
        let b_vals: Vec<f64> = (0..414).map(|_| rng.random::<f64>()).collect();
        let a = canvas_from(&a_vals, 18, 23);
        let b = canvas_from(&b_vals, 18, 23);
        let (loss, _) = mse_loss(&a, &b).unwrap();
        let mut acc = 0.0;
        for i in 0..18 {
            for j in 0..23 {
                let d = a.at(i, j) - b.at(i, j);
                acc += d * d;
            }
        }
        assert!((loss - acc / 414.0).abs() < 1e-12);
    }

    #[test]
    fn mse_shape_mismatch() {
        let a = canvas_from(&vec![0.0; 64], 8, 8);
        let b = canvas_from(&vec![0.0; 16], 4, 4);
        assert!(matches!(mse_loss(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn backprop_one_step_chain_rule() {
        // Loss = first coordinate of v1, so the point gradient is (1, 0) on
        // v1 and zero elsewhere.
        let t = ReparamTransform {
            theta: 0.4,
            phi: 1.1,
            sigma1: 0.7,
            sigma2: 0.3,
            d1: 1.0,
            d2: -1.0,
            b: [0.2, -0.5],
        };
        let s = FractalSystem::new(vec![t]).unwrap();
        let v0 = [0.3, 0.8];
        let z = IndexSequence { indices: vec![0] };
        let traj = crate::ifs::iterate_ifs(&s, &z, v0).unwrap();
        let point_grads = vec![[0.0, 0.0], [1.0, 0.0]];

        let m = backprop_to_matrices(&traj, &point_grads, &s.matrices());
        assert_eq!(m.d_translations[0], [1.0, 0.0]);
        assert_eq!(m.d_matrices[0], [[v0[0], v0[1]], [0.0, 0.0]]);

        // Chained parameter gradients against finite differences of
        // f(params) = (A v0 + b)[0].
        let chained = backprop_trajectory(&traj, &point_grads, &s).unwrap();
        let f = |tr: &ReparamTransform| {
            let m = tr.matrix();
            m[0][0] * v0[0] + m[0][1] * v0[1] + tr.b[0]
        };
        let step = 1e-6;
        let fields: [(f64, fn(&mut ReparamTransform) -> &mut f64); 4] = [
            (chained.per_transform[0].d_theta, |t| &mut t.theta),
            (chained.per_transform[0].d_phi, |t| &mut t.phi),
            (chained.per_transform[0].d_sigma1, |t| &mut t.sigma1),
            (chained.per_transform[0].d_sigma2, |t| &mut t.sigma2),
        ];
        for (analytic, access) in fields {
            let mut plus = t;
            *access(&mut plus) += step;
            let mut minus = t;
            *access(&mut minus) -= step;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * step);
            assert!((analytic - numeric).abs() < 1e-8);
        }
        assert_eq!(chained.per_transform[0].d_b, [1.0, 0.0]);
    }

    #[test]
    fn backprop_zero_point_grads() {
        let s = simple_system(3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = sample_index_sequence(&s, 25, &mut rng).unwrap();
        let traj = crate::ifs::iterate_ifs(&s, &z, sample_v0(&mut rng)).unwrap();
        let grads = backprop_trajectory(&traj, &vec![[0.0; 2]; 26], &s).unwrap();
        for g in &grads.per_transform {
            assert_eq!(*g, TransformGradients::default());
        }
    }

    #[test]
    fn unvisited_transforms_get_exact_zero() {
        let s = simple_system(4, 7);
        // Only transform 2 is ever applied.
        let z = IndexSequence { indices: vec![2; 12] };
        let traj = crate::ifs::iterate_ifs(&s, &z, [0.1, 0.2]).unwrap();
        let point_grads: Vec<[f64; 2]> = (0..13).map(|i| [i as f64 * 0.1, -0.3]).collect();
        let grads = backprop_trajectory(&traj, &point_grads, &s).unwrap();
        for (i, g) in grads.per_transform.iter().enumerate() {
            if i != 2 {
                assert_eq!(*g, TransformGradients::default());
            } else {
                assert!(g.d_b != [0.0, 0.0]);
            }
        }
    }

    #[test]
    fn backprop_is_linear_in_point_grads() {
        let s = simple_system(3, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = sample_index_sequence(&s, 30, &mut rng).unwrap();
        let traj = crate::ifs::iterate_ifs(&s, &z, sample_v0(&mut rng)).unwrap();
        let g1: Vec<[f64; 2]> = (0..31)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let g2: Vec<[f64; 2]> = (0..31)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let sum: Vec<[f64; 2]> = g1
            .iter()
            .zip(&g2)
            .map(|(a, b)| [a[0] + b[0], a[1] + b[1]])
            .collect();
        let mut lhs = backprop_trajectory(&traj, &sum, &s).unwrap();
        let r1 = backprop_trajectory(&traj, &g1, &s).unwrap();
        let r2 = backprop_trajectory(&traj, &g2, &s).unwrap();
        lhs.scale(-1.0);
        lhs.add_assign(&r1);
        lhs.add_assign(&r2);
        assert!(lhs.norm() < 1e-10);
    }

    #[test]
    fn full_pipeline_gradcheck_small() {
        // Ten random configurations of the acceptance shape (the acceptance
        // suite runs the full fifty).
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let render_cfg = RenderConfig {
            h: 8,
            w: 8,
            tau: 1.0,
            clamp: false,
            truncation_radius: None,
        };
        for case in 0..10 {
            let s = simple_system(3, 100 + case);
            let sequences: Vec<(IndexSequence, [f64; 2])> = (0..2)
                .map(|_| {
                    let z = sample_index_sequence(&s, 20, &mut rng).unwrap();
                    (z, sample_v0(&mut rng))
                })
                .collect();
            let target_vals: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
            let target = canvas_from(&target_vals, 8, 8);
            let report =
                finite_difference_check(&s, &sequences, &target, &render_cfg, 1e-5).unwrap();
            assert!(report.passes(1e-4), "case {case}: {report}");
        }
    }

    #[test]
    fn gradcheck_zero_gradient_configuration() {
        // Target equals the render, so loss and gradient are both zero.
        let s = simple_system(2, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let render_cfg = RenderConfig {
            h: 8,
            w: 8,
            tau: 1.0,
            clamp: false,
            truncation_radius: None,
        };
        let z = sample_index_sequence(&s, 15, &mut rng).unwrap();
        let v0 = sample_v0(&mut rng);
        let traj = crate::ifs::iterate_ifs(&s, &z, v0).unwrap();
        let map = normalize_map(&traj.points, 8, 8);
        let target = render(&map.apply_all(&traj.points), &render_cfg).unwrap();
        // At the optimum the analytic gradient is exactly zero and central
        // differences only see the O(step^2) curvature residue, so the
        // reported relative error (floored at 1e-8) shrinks with the step.
        let report =
            finite_difference_check(&s, &[(z, v0)], &target, &render_cfg, 1e-7).unwrap();
        assert!(report.max() < 1e-2, "{report}");
    }

    #[test]
    fn gradcheck_error_shrinks_with_step() {
        let s = simple_system(3, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let render_cfg = RenderConfig {
            h: 8,
            w: 8,
            tau: 1.0,
            clamp: false,
            truncation_radius: None,
        };
        let sequences: Vec<(IndexSequence, [f64; 2])> = (0..2)
            .map(|_| {
                let z = sample_index_sequence(&s, 20, &mut rng).unwrap();
                (z, sample_v0(&mut rng))
            })
            .collect();
        let target_vals: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
        let target = canvas_from(&target_vals, 8, 8);
        let coarse =
            finite_difference_check(&s, &sequences, &target, &render_cfg, 2e-4).unwrap();
        let fine = finite_difference_check(&s, &sequences, &target, &render_cfg, 1e-4).unwrap();
        // Central differences are second order; halving the step should not
        // make the agreement meaningfully worse (roundoff sets a small floor).
        assert!(fine.max() <= coarse.max() * 1.5 + 1e-9);
    }

    #[test]
    fn saturated_pixels_give_zero_analytic_gradient() {
        // A single-transform system with sigma = 0 sends every point to b;
        // the saturated blob around it passes no gradient when the loss
        // gradient is restricted to saturated pixels.
        let t = ReparamTransform {
            theta: 0.0,
            phi: 0.0,
            sigma1: 0.0,
            sigma2: 0.0,
            d1: 1.0,
            d2: 1.0,
            b: [0.3, 0.1],
        };
        let s = FractalSystem::new(vec![t]).unwrap();
        let z = IndexSequence { indices: vec![0; 40] };
        let traj = crate::ifs::iterate_ifs(&s, &z, [0.9, -0.4]).unwrap();
        let render_cfg = RenderConfig {
            h: 8,
            w: 8,
            tau: 1.0,
            clamp: true,
            truncation_radius: None,
        };
        let map = normalize_map(&traj.points, 8, 8);
        let pixel_points = map.apply_all(&traj.points);
        let canvas = render(&pixel_points, &render_cfg).unwrap();
        let pre = canvas.pre_clamp.as_ref().unwrap();
        let grad_image: Vec<f64> = pre
            .iter()
            .map(|&v| if v > 1.0 { 1.0 } else { 0.0 })
            .collect();
        assert!(grad_image.iter().any(|&g| g != 0.0));
        let pixel_grads =
            render_backward(&pixel_points, &render_cfg, &canvas, &grad_image).unwrap();
        assert!(pixel_grads.iter().all(|g| g[0] == 0.0 && g[1] == 0.0));
        let grads = backprop_trajectory(&traj, &pixel_grads, &s).unwrap();
        assert!(grads.per_transform[0] == TransformGradients::default());
    }
}
