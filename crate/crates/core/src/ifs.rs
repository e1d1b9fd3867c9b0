//! Iterated function system parameters and the chaos-game generator.
//!
//! A system is an ordered set of affine maps `v -> A v + b`. Each `A` is
//! stored in factored form (rotation, scaling, rotation, flip) so that the
//! scale factors are exactly the singular values of `A`; clamping them to
//! `[0, 1]` bounds how fast repeated application can grow. Transform
//! selection probabilities are proportional to `|det A| = sigma1 * sigma2`.

use rand::distr::weighted::WeightedIndex;
use rand::prelude::Distribution;
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound on the summed singular-value products when sampling a random
/// system; systems below it are resampled.
pub const MIN_DET_SUM: f64 = 0.1;

/// One affine map in factored form: `A = R(theta) * diag(sigma1, sigma2) *
/// R(phi) * diag(d1, d2)`, plus the translation `b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReparamTransform {
    pub theta: f64,
    pub phi: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    /// Flip sign, exactly -1.0 or +1.0; fixed at initialization.
    pub d1: f64,
    /// Flip sign, exactly -1.0 or +1.0; fixed at initialization.
    pub d2: f64,
    pub b: [f64; 2],
}

/// Partial derivatives of the composed matrix entries with respect to the
/// four continuous factors (the flips are discrete and get no derivative).
#[derive(Clone, Copy, Debug)]
pub struct MatrixPartials {
    pub d_theta: [[f64; 2]; 2],
    pub d_phi: [[f64; 2]; 2],
    pub d_sigma1: [[f64; 2]; 2],
    pub d_sigma2: [[f64; 2]; 2],
}

impl ReparamTransform {
    /// Composes the factored form into the plain 2x2 matrix.
    ///
    /// The maximum singular value of the result is `max(sigma1, sigma2)` and
    /// `|det| = sigma1 * sigma2`.
    pub fn matrix(&self) -> [[f64; 2]; 2] {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        let (s1, s2) = (self.sigma1, self.sigma2);
        [
            [
                self.d1 * (s1 * ct * cp - s2 * st * sp),
                self.d2 * (-s1 * ct * sp - s2 * st * cp),
            ],
            [
                self.d1 * (s1 * st * cp + s2 * ct * sp),
                self.d2 * (-s1 * st * sp + s2 * ct * cp),
            ],
        ]
    }

    /// Entry-wise derivatives of [`Self::matrix`] in the four continuous
    /// factors, written out from the trig products.
    pub fn matrix_partials(&self) -> MatrixPartials {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        let (s1, s2) = (self.sigma1, self.sigma2);
        let (d1, d2) = (self.d1, self.d2);
        MatrixPartials {
            d_theta: [
                [
                    d1 * (-s1 * st * cp - s2 * ct * sp),
                    d2 * (s1 * st * sp - s2 * ct * cp),
                ],
                [
                    d1 * (s1 * ct * cp - s2 * st * sp),
                    d2 * (-s1 * ct * sp - s2 * st * cp),
                ],
            ],
            d_phi: [
                [
                    d1 * (-s1 * ct * sp - s2 * st * cp),
                    d2 * (-s1 * ct * cp + s2 * st * sp),
                ],
                [
                    d1 * (-s1 * st * sp + s2 * ct * cp),
                    d2 * (-s1 * st * cp - s2 * ct * sp),
                ],
            ],
            d_sigma1: [[d1 * ct * cp, -d2 * ct * sp], [d1 * st * cp, -d2 * st * sp]],
            d_sigma2: [[-d1 * st * sp, -d2 * st * cp], [d1 * ct * sp, d2 * ct * cp]],
        }
    }

    /// Singular-value product `sigma1 * sigma2 = |det A|`.
    pub fn det_abs(&self) -> f64 {
        self.sigma1 * self.sigma2
    }
}

/// Composes a factored transform into its plain 2x2 matrix.
pub fn compose_matrix(t: &ReparamTransform) -> [[f64; 2]; 2] {
    t.matrix()
}

/// The learnable object: an ordered set of N factored affine transforms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SystemRepr", into = "SystemRepr")]
pub struct FractalSystem {
    transforms: Vec<ReparamTransform>,
}

/// Wire form of [`FractalSystem`]: `{"n": ..., "transforms": [...]}`.
#[derive(Serialize, Deserialize)]
struct SystemRepr {
    n: usize,
    transforms: Vec<ReparamTransform>,
}

impl From<FractalSystem> for SystemRepr {
    fn from(s: FractalSystem) -> Self {
        SystemRepr {
            n: s.transforms.len(),
            transforms: s.transforms,
        }
    }
}

impl TryFrom<SystemRepr> for FractalSystem {
    type Error = String;

    fn try_from(repr: SystemRepr) -> std::result::Result<Self, String> {
        if repr.n != repr.transforms.len() {
            return Err(format!(
                "declared n = {} but {} transforms present",
                repr.n,
                repr.transforms.len()
            ));
        }
        FractalSystem::new(repr.transforms).map_err(|e| e.to_string())
    }
}

impl FractalSystem {
    /// Builds a system, checking the structural invariants: at least one
    /// transform, flips exactly +-1, scales in `[0, 1]`, everything finite.
    pub fn new(transforms: Vec<ReparamTransform>) -> Result<Self> {
        if transforms.is_empty() {
            return Err(Error::InvalidConfig("a system needs n >= 1 transforms".into()));
        }
        for (i, t) in transforms.iter().enumerate() {
            if t.d1.abs() != 1.0 || t.d2.abs() != 1.0 {
                return Err(Error::InvalidConfig(format!(
                    "transform {i}: flips must be exactly -1 or +1"
                )));
            }
            if !(0.0..=1.0).contains(&t.sigma1) || !(0.0..=1.0).contains(&t.sigma2) {
                return Err(Error::InvalidConfig(format!(
                    "transform {i}: sigma out of [0, 1]"
                )));
            }
            let finite = t.theta.is_finite()
                && t.phi.is_finite()
                && t.b[0].is_finite()
                && t.b[1].is_finite();
            if !finite {
                return Err(Error::InvalidConfig(format!(
                    "transform {i}: non-finite parameter"
                )));
            }
        }
        Ok(FractalSystem { transforms })
    }

    /// Samples a random system: angles uniform on `[0, 2pi)`, `sigma1 ~
    /// U[0,1]`, `sigma2 ~ U[0, sigma1]`, flips uniform on `{-1, +1}`,
    /// translation components uniform on `[-1, 1]`. The whole system is
    /// resampled until the singular-value products sum to at least
    /// [`MIN_DET_SUM`], which keeps the selection probabilities well defined.
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        assert!(n >= 1, "a system needs n >= 1 transforms");
        loop {
            let transforms: Vec<ReparamTransform> = (0..n)
                .map(|_| {
                    let theta = rng.random_range(0.0..std::f64::consts::TAU);
                    let phi = rng.random_range(0.0..std::f64::consts::TAU);
                    let sigma1: f64 = rng.random::<f64>();
                    let sigma2 = rng.random::<f64>() * sigma1;
                    let d1 = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    let d2 = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    let b = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                    ReparamTransform {
                        theta,
                        phi,
                        sigma1,
                        sigma2,
                        d1,
                        d2,
                        b,
                    }
                })
                .collect();
            let det_sum: f64 = transforms.iter().map(|t| t.det_abs()).sum();
            if det_sum >= MIN_DET_SUM {
                return FractalSystem { transforms };
            }
        }
    }

    pub fn n(&self) -> usize {
        self.transforms.len()
    }

    pub fn transforms(&self) -> &[ReparamTransform] {
        &self.transforms
    }

    pub fn transforms_mut(&mut self) -> &mut [ReparamTransform] {
        &mut self.transforms
    }

    /// Composed 2x2 matrices of all transforms, in order.
    pub fn matrices(&self) -> Vec<[[f64; 2]; 2]> {
        self.transforms.iter().map(|t| t.matrix()).collect()
    }

    /// Translation vectors of all transforms, in order.
    pub fn translations(&self) -> Vec<[f64; 2]> {
        self.transforms.iter().map(|t| t.b).collect()
    }

    /// Drops the factored form: plain matrices plus translations. The raw
    /// representation is only useful for the no-reparameterization ablation.
    pub fn to_raw(&self) -> RawSystem {
        RawSystem {
            matrices: self.matrices(),
            translations: self.translations(),
        }
    }
}

/// Selection probabilities `p_n = sigma1_n * sigma2_n / sum_m sigma1_m *
/// sigma2_m`. Fails with [`Error::DegenerateSystem`] when every product is
/// zero.
pub fn transform_probabilities(s: &FractalSystem) -> Result<Vec<f64>> {
    let dets: Vec<f64> = s.transforms.iter().map(|t| t.det_abs()).collect();
    normalize_probabilities(dets)
}

fn normalize_probabilities(dets: Vec<f64>) -> Result<Vec<f64>> {
    let total: f64 = dets.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::DegenerateSystem);
    }
    Ok(dets.into_iter().map(|d| d / total).collect())
}

/// A pre-sampled sequence of transform indices: all of the randomness of one
/// chaos-game run, drawn before iteration starts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexSequence {
    pub indices: Vec<usize>,
}

impl IndexSequence {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Draws `t_len` i.i.d. transform indices according to the system's current
/// selection probabilities.
pub fn sample_index_sequence<R: Rng + ?Sized>(
    s: &FractalSystem,
    t_len: usize,
    rng: &mut R,
) -> Result<IndexSequence> {
    assert!(t_len >= 1, "t_len must be >= 1");
    let probs = transform_probabilities(s)?;
    let dist = WeightedIndex::new(&probs).map_err(|_| Error::DegenerateSystem)?;
    let indices = (0..t_len).map(|_| dist.sample(rng)).collect();
    Ok(IndexSequence { indices })
}

/// The points visited by one chaos-game run, `v0` included.
#[derive(Clone, Debug, PartialEq)]
pub struct PointTrajectory {
    /// `T + 1` points: `points[0] == v0`, `points[t] = A(z_t) points[t-1] + b(z_t)`.
    pub points: Vec<[f64; 2]>,
    pub indices: IndexSequence,
    pub v0: [f64; 2],
}

impl PointTrajectory {
    /// Number of iterations T (one less than the number of points).
    pub fn t_len(&self) -> usize {
        self.points.len() - 1
    }
}

/// Runs the recurrence `v_t = A(z_t) v_{t-1} + b(z_t)` over a pre-sampled
/// index sequence.
pub fn iterate_ifs(s: &FractalSystem, z: &IndexSequence, v0: [f64; 2]) -> Result<PointTrajectory> {
    iterate_with_tables(&s.matrices(), &s.translations(), z, v0)
}

/// Recurrence over explicit per-transform tables. Shared by the factored and
/// raw paths and by batched gather iteration.
pub fn iterate_with_tables(
    matrices: &[[[f64; 2]; 2]],
    translations: &[[f64; 2]],
    z: &IndexSequence,
    v0: [f64; 2],
) -> Result<PointTrajectory> {
    let mut points = Vec::with_capacity(z.len() + 1);
    points.push(v0);
    let mut v = v0;
    for (step, &idx) in z.indices.iter().enumerate() {
        let a = &matrices[idx];
        let b = &translations[idx];
        v = [
            a[0][0] * v[0] + a[0][1] * v[1] + b[0],
            a[1][0] * v[0] + a[1][1] * v[1] + b[1],
        ];
        if !v[0].is_finite() || !v[1].is_finite() {
            return Err(Error::NonFiniteTrajectory { iteration: step + 1 });
        }
        points.push(v);
    }
    Ok(PointTrajectory {
        points,
        indices: z.clone(),
        v0,
    })
}

/// Several systems packed column-wise so a mini-batch over different systems
/// becomes a single gather-indexed table.
///
/// Column `k` of `a_columns` holds the 2x2 matrix of one transform flattened
/// column-major (`[a11, a21, a12, a22]`); `b_columns[k]` holds its
/// translation. System `j` occupies the `n_j` columns starting at
/// `batch_offsets[j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchedSystemMatrix {
    pub a_columns: Vec<[f64; 4]>,
    pub b_columns: Vec<[f64; 2]>,
    pub batch_offsets: Vec<usize>,
}

impl BatchedSystemMatrix {
    /// Unflattens column `k` back into its 2x2 matrix.
    pub fn matrix_at(&self, k: usize) -> [[f64; 2]; 2] {
        let c = self.a_columns[k];
        [[c[0], c[2]], [c[1], c[3]]]
    }

    /// Gathers transform `local_index` of system `batch`.
    pub fn gather(&self, batch: usize, local_index: usize) -> ([[f64; 2]; 2], [f64; 2]) {
        let k = self.batch_offsets[batch] + local_index;
        (self.matrix_at(k), self.b_columns[k])
    }

    /// Chaos-game iteration for system `batch`, resolving indices through the
    /// packed columns.
    pub fn iterate(&self, batch: usize, z: &IndexSequence, v0: [f64; 2]) -> Result<PointTrajectory> {
        let offset = self.batch_offsets[batch];
        let end = self
            .batch_offsets
            .get(batch + 1)
            .copied()
            .unwrap_or(self.a_columns.len());
        let matrices: Vec<[[f64; 2]; 2]> =
            (offset..end).map(|k| self.matrix_at(k)).collect();
        let translations = self.b_columns[offset..end].to_vec();
        iterate_with_tables(&matrices, &translations, z, v0)
    }
}

/// Packs a batch of systems into one column-indexed parameter table.
pub fn concat_systems(systems: &[FractalSystem]) -> BatchedSystemMatrix {
    let mut a_columns = Vec::new();
    let mut b_columns = Vec::new();
    let mut batch_offsets = Vec::with_capacity(systems.len());
    for s in systems {
        batch_offsets.push(a_columns.len());
        for t in s.transforms() {
            let m = t.matrix();
            a_columns.push([m[0][0], m[1][0], m[0][1], m[1][1]]);
            b_columns.push(t.b);
        }
    }
    BatchedSystemMatrix {
        a_columns,
        b_columns,
        batch_offsets,
    }
}

/// The affine map produced by fitting a point cloud into a canvas. The scale
/// and offset depend on the cloud's bounding box, and the gradient pipeline
/// chains through that dependence (see `grad::chain_through_fit_map`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizeMap {
    pub scale: f64,
    /// Bounding-box center in raw coordinates.
    pub source_center: [f64; 2],
    /// Canvas center in pixel coordinates.
    pub target_center: [f64; 2],
}

impl NormalizeMap {
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            (p[0] - self.source_center[0]) * self.scale + self.target_center[0],
            (p[1] - self.source_center[1]) * self.scale + self.target_center[1],
        ]
    }

    pub fn apply_all(&self, points: &[[f64; 2]]) -> Vec<[f64; 2]> {
        points.iter().map(|&p| self.apply(p)).collect()
    }
}

pub(crate) const NORMALIZE_MARGIN: f64 = 1.0;
pub(crate) const NORMALIZE_EPS: f64 = 1e-6;

/// Computes the isotropic fit of a point cloud into an `h x w` canvas: the
/// larger bounding-box extent is scaled to the short canvas side minus a
/// one-pixel margin, and the box is centered. A degenerate (single-point)
/// cloud maps to the canvas center.
pub fn normalize_map(points: &[[f64; 2]], h: usize, w: usize) -> NormalizeMap {
    assert!(h >= 2 && w >= 2, "canvas must be at least 2x2");
    let mut min = [f64::INFINITY; 2];
    let mut max = [f64::NEG_INFINITY; 2];
    for p in points {
        for k in 0..2 {
            min[k] = min[k].min(p[k]);
            max[k] = max[k].max(p[k]);
        }
    }
    let range = (max[0] - min[0]).max(max[1] - min[1]).max(NORMALIZE_EPS);
    let usable = (h.min(w) as f64 - 1.0) - 2.0 * NORMALIZE_MARGIN;
    NormalizeMap {
        scale: usable / range,
        source_center: [(min[0] + max[0]) / 2.0, (min[1] + max[1]) / 2.0],
        target_center: [(h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0],
    }
}

/// Maps trajectory points into pixel coordinates (see [`normalize_map`]).
pub fn normalize_points(traj: &PointTrajectory, h: usize, w: usize) -> Vec<[f64; 2]> {
    normalize_map(&traj.points, h, w).apply_all(&traj.points)
}

/// A system in plain matrix form, without the factored parameterization.
///
/// Only used to reproduce the unstable no-reparameterization baseline; the
/// singular values of the matrices are unconstrained here.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSystem {
    pub matrices: Vec<[[f64; 2]; 2]>,
    pub translations: Vec<[f64; 2]>,
}

impl RawSystem {
    pub fn n(&self) -> usize {
        self.matrices.len()
    }

    /// Selection probabilities from `|det A_n|`, like the factored form.
    pub fn probabilities(&self) -> Result<Vec<f64>> {
        let dets = self
            .matrices
            .iter()
            .map(|m| (m[0][0] * m[1][1] - m[0][1] * m[1][0]).abs())
            .collect();
        normalize_probabilities(dets)
    }

    pub fn sample_sequence<R: Rng + ?Sized>(
        &self,
        t_len: usize,
        rng: &mut R,
    ) -> Result<IndexSequence> {
        let probs = self.probabilities()?;
        let dist = WeightedIndex::new(&probs).map_err(|_| Error::DegenerateSystem)?;
        let indices = (0..t_len).map(|_| dist.sample(rng)).collect();
        Ok(IndexSequence { indices })
    }

    pub fn iterate(&self, z: &IndexSequence, v0: [f64; 2]) -> Result<PointTrajectory> {
        iterate_with_tables(&self.matrices, &self.translations, z, v0)
    }
}

/// Draws an initial chaos-game point uniformly from `[-1, 1]^2`.
pub fn sample_v0<R: Rng + ?Sized>(rng: &mut R) -> [f64; 2] {
    [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
}
