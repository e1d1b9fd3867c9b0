//! The training loop: stochastic gradient descent over index-sequence
//! batches with Adam updates, learning-rate decay, periodic parameter noise,
//! and scale clamping.
//!
//! Two objectives are supported. `Expectation` resamples the batch from the
//! current system every step, so every likely sequence is pushed toward the
//! target. `Fixed` pre-samples one batch up front and reuses it, fixing all
//! generation randomness for the whole run.

use rand::distr::weighted::WeightedIndex;
use rand::prelude::Distribution;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{
    trajectory_loss_grad, ImageLoss, MatrixGradients, MseLoss,
};
use crate::ifs::{
    iterate_ifs, normalize_points, sample_v0, FractalSystem, IndexSequence, RawSystem,
};
use crate::render::{render, Canvas, RenderConfig};

/// Which distribution the per-step sequence batch is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Resample from the current system at every step.
    Expectation,
    /// Pre-sample once from the initial system and reuse every step.
    Fixed,
}

/// Update rule. Adam is the default; plain momentum SGD is kept only for the
/// optimizer comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptKind {
    Adam,
    Sgd,
}

/// All knobs of the optimization loop.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub objective: Objective,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    /// Multiplicative learning-rate factor applied every `decay_every` steps.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub noise_enabled: bool,
    /// Standard deviation of the Gaussian parameter noise.
    pub noise_std: f64,
    /// Steps between noise injections.
    pub noise_every: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Chaos-game iterations per trajectory.
    pub t_len: usize,
    pub seed: u64,
    pub opt_kind: OptKind,
    pub sgd_momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            objective: Objective::Expectation,
            batch_size: 50,
            steps: 1000,
            lr: 0.05,
            lr_decay: 0.5,
            decay_every: 250,
            noise_enabled: true,
            noise_std: 0.1,
            noise_every: 5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            t_len: 300,
            seed: 0,
            opt_kind: OptKind::Adam,
            sgd_momentum: 0.9,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::InvalidConfig("lr must be >= 0".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidConfig("lr_decay must be in (0, 1]".into()));
        }
        if self.noise_std < 0.0 {
            return Err(Error::InvalidConfig("noise_std must be >= 0".into()));
        }
        if self.decay_every == 0 || self.noise_every == 0 {
            return Err(Error::InvalidConfig(
                "decay_every and noise_every must be >= 1".into(),
            ));
        }
        if self.t_len < 1 {
            return Err(Error::InvalidConfig("t_len must be >= 1".into()));
        }
        Ok(())
    }

    /// Learning rate at a zero-based step index.
    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr * self.lr_decay.powi((step / self.decay_every) as i32)
    }

    /// Whether noise is injected after the given zero-based step.
    pub fn noise_at(&self, step: usize) -> bool {
        self.noise_enabled
            && self.noise_std > 0.0
            && (step + 1).is_multiple_of(self.noise_every)
    }

    /// Whether noise is actually injected after the given zero-based step in
    /// a run of `self.steps` steps: the schedule above, except that a kick
    /// landing after the final update is skipped (it would be returned
    /// un-optimized).
    pub fn noise_applied_at(&self, step: usize) -> bool {
        self.noise_at(step) && step + 1 < self.steps
    }

    /// Noise standard deviation at a zero-based step: the configured std
    /// annealed by the same factor as the learning rate, Langevin-style, so
    /// late kicks stay recoverable within the decayed step size.
    pub fn noise_std_at(&self, step: usize) -> f64 {
        self.noise_std * self.lr_decay.powi((step / self.decay_every) as i32)
    }
}

/// Adam moment accumulators, one scalar per learnable parameter, laid out as
/// `[theta, phi, sigma1, sigma2, b0, b1]` per transform.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: usize,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step_count: 0,
        }
    }

    /// One bias-corrected Adam update, in place.
    pub fn update(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) {
        self.step_count += 1;
        let bc1 = 1.0 - beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - beta2.powi(self.step_count as i32);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

enum OptState {
    Adam(AdamState),
    Sgd { velocity: Vec<f64>, momentum: f64 },
}

impl OptState {
    fn new(cfg: &OptimizerConfig, len: usize) -> Self {
        match cfg.opt_kind {
            OptKind::Adam => OptState::Adam(AdamState::new(len)),
            OptKind::Sgd => OptState::Sgd {
                velocity: vec![0.0; len],
                momentum: cfg.sgd_momentum,
            },
        }
    }

    fn update(&mut self, cfg: &OptimizerConfig, params: &mut [f64], grads: &[f64], lr: f64) {
        match self {
            OptState::Adam(state) => state.update(
                params,
                grads,
                lr,
                cfg.adam_beta1,
                cfg.adam_beta2,
                cfg.adam_eps,
            ),
            OptState::Sgd { velocity, momentum } => {
                for ((p, &g), vel) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
                    *vel = *momentum * *vel + g;
                    *p -= lr * *vel;
                }
            }
        }
    }
}

/// Output of a fit run.
#[derive(Clone, Debug)]
pub struct FitOutcome<P> {
    pub learned: P,
    /// Per-step losses, recorded before each update on the batch that
    /// produced the gradient.
    pub loss_curve: Vec<f64>,
    /// Minimum of the loss curve (infinite for a zero-step run).
    pub best_loss: f64,
    /// Euclidean norm of the averaged parameter gradient at each step.
    pub grad_norm_curve: Vec<f64>,
}

pub type FitResult = FitOutcome<FractalSystem>;

/// A fit run that had to stop: a gradient, loss, or trajectory went
/// non-finite (or sampling became impossible). Carries the last system that
/// was still finite.
#[derive(Debug, thiserror::Error)]
#[error("fit aborted at step {step}: {reason}")]
pub struct FitAbort<P: std::fmt::Debug> {
    pub step: usize,
    pub last_system: P,
    pub reason: Error,
    pub partial_loss_curve: Vec<f64>,
    pub partial_grad_norms: Vec<f64>,
}

/// How parameters flatten into the optimizer's vector and how matrix-space
/// gradients chain back into them.
pub(crate) trait Learnable: Clone + std::fmt::Debug {
    fn param_count(&self) -> usize;
    fn write_flat(&self, out: &mut [f64]);
    fn read_flat(&mut self, flat: &[f64]);
    fn tables(&self) -> (Vec<[[f64; 2]; 2]>, Vec<[f64; 2]>);
    fn probabilities(&self) -> Result<Vec<f64>>;
    fn chain(&self, mg: &MatrixGradients) -> Vec<f64>;
    /// Projection applied after every update (scale clamping, angle
    /// wrapping). No-op for the raw parameterization.
    fn project(&mut self);
    /// Projection applied after noise injection (scale clamping only).
    fn reclamp(&mut self);
}

impl Learnable for FractalSystem {
    fn param_count(&self) -> usize {
        6 * self.n()
    }

    fn write_flat(&self, out: &mut [f64]) {
        for (t, chunk) in self.transforms().iter().zip(out.chunks_exact_mut(6)) {
            chunk[0] = t.theta;
            chunk[1] = t.phi;
            chunk[2] = t.sigma1;
            chunk[3] = t.sigma2;
            chunk[4] = t.b[0];
            chunk[5] = t.b[1];
        }
    }

    fn read_flat(&mut self, flat: &[f64]) {
        for (t, chunk) in self.transforms_mut().iter_mut().zip(flat.chunks_exact(6)) {
            t.theta = chunk[0];
            t.phi = chunk[1];
            t.sigma1 = chunk[2];
            t.sigma2 = chunk[3];
            t.b[0] = chunk[4];
            t.b[1] = chunk[5];
        }
    }

    fn tables(&self) -> (Vec<[[f64; 2]; 2]>, Vec<[f64; 2]>) {
        (self.matrices(), self.translations())
    }

    fn probabilities(&self) -> Result<Vec<f64>> {
        crate::ifs::transform_probabilities(self)
    }

    fn chain(&self, mg: &MatrixGradients) -> Vec<f64> {
        let chained = crate::grad::chain_to_parameters(self, mg);
        let mut flat = vec![0.0; self.param_count()];
        for (g, chunk) in chained.per_transform.iter().zip(flat.chunks_exact_mut(6)) {
            chunk[0] = g.d_theta;
            chunk[1] = g.d_phi;
            chunk[2] = g.d_sigma1;
            chunk[3] = g.d_sigma2;
            chunk[4] = g.d_b[0];
            chunk[5] = g.d_b[1];
        }
        flat
    }

    fn project(&mut self) {
        for t in self.transforms_mut() {
            t.sigma1 = t.sigma1.clamp(0.0, 1.0);
            t.sigma2 = t.sigma2.clamp(0.0, 1.0);
            t.theta = t.theta.rem_euclid(std::f64::consts::TAU);
            t.phi = t.phi.rem_euclid(std::f64::consts::TAU);
        }
    }

    fn reclamp(&mut self) {
        for t in self.transforms_mut() {
            t.sigma1 = t.sigma1.clamp(0.0, 1.0);
            t.sigma2 = t.sigma2.clamp(0.0, 1.0);
        }
    }
}

impl Learnable for RawSystem {
    fn param_count(&self) -> usize {
        6 * self.n()
    }

    fn write_flat(&self, out: &mut [f64]) {
        for ((m, b), chunk) in self
            .matrices
            .iter()
            .zip(&self.translations)
            .zip(out.chunks_exact_mut(6))
        {
            chunk[0] = m[0][0];
            chunk[1] = m[0][1];
            chunk[2] = m[1][0];
            chunk[3] = m[1][1];
            chunk[4] = b[0];
            chunk[5] = b[1];
        }
    }

    fn read_flat(&mut self, flat: &[f64]) {
        for ((m, b), chunk) in self
            .matrices
            .iter_mut()
            .zip(&mut self.translations)
            .zip(flat.chunks_exact(6))
        {
            m[0][0] = chunk[0];
            m[0][1] = chunk[1];
            m[1][0] = chunk[2];
            m[1][1] = chunk[3];
            b[0] = chunk[4];
            b[1] = chunk[5];
        }
    }

    fn tables(&self) -> (Vec<[[f64; 2]; 2]>, Vec<[f64; 2]>) {
        (self.matrices.clone(), self.translations.clone())
    }

    fn probabilities(&self) -> Result<Vec<f64>> {
        RawSystem::probabilities(self)
    }

    fn chain(&self, mg: &MatrixGradients) -> Vec<f64> {
        let mut flat = vec![0.0; self.param_count()];
        for ((m, b), chunk) in mg
            .d_matrices
            .iter()
            .zip(&mg.d_translations)
            .zip(flat.chunks_exact_mut(6))
        {
            chunk[0] = m[0][0];
            chunk[1] = m[0][1];
            chunk[2] = m[1][0];
            chunk[3] = m[1][1];
            chunk[4] = b[0];
            chunk[5] = b[1];
        }
        flat
    }

    fn project(&mut self) {}

    fn reclamp(&mut self) {}
}

/// Selection probabilities for sampling inside the optimizer. A fully
/// collapsed system (every `sigma1 * sigma2 == 0`) falls back to uniform
/// selection instead of failing: the determinant rule is undefined there, and
/// staying alive lets gradients and noise revive the scales.
fn sampling_probabilities<P: Learnable>(system: &P) -> Vec<f64> {
    match system.probabilities() {
        Ok(p) => p,
        Err(_) => {
            let n = system.tables().0.len();
            vec![1.0 / n as f64; n]
        }
    }
}

/// Extra hooks for a fit run.
pub struct FitOptions<'a> {
    /// Image loss; pixel-wise MSE by default.
    pub loss: &'a dyn ImageLoss,
    /// Explicit sequence/initial-point pairs for the `Fixed` objective,
    /// replacing the pre-sampling step. The effective batch size becomes the
    /// slice length. Ignored under `Expectation`.
    pub fixed_sequences: Option<&'a [(IndexSequence, [f64; 2])]>,
    /// Called after every completed step with `(step, system, loss,
    /// grad_norm)`; the system already reflects the step's update.
    pub observer: Option<&'a mut dyn FnMut(usize, &FractalSystem, f64, f64)>,
}

impl Default for FitOptions<'_> {
    fn default() -> Self {
        FitOptions {
            loss: &MseLoss,
            fixed_sequences: None,
            observer: None,
        }
    }
}

/// Learns a system that reconstructs the target image. See
/// [`OptimizerConfig`] for the schedule and [`FitOptions`] for hooks.
pub fn fit(
    init: &FractalSystem,
    target: &Canvas,
    cfg: &OptimizerConfig,
    render_cfg: &RenderConfig,
) -> std::result::Result<FitResult, FitAbort<FractalSystem>> {
    fit_with(init, target, cfg, render_cfg, FitOptions::default())
}

/// [`fit`] with a custom loss, explicit fixed sequences, or a step observer.
pub fn fit_with(
    init: &FractalSystem,
    target: &Canvas,
    cfg: &OptimizerConfig,
    render_cfg: &RenderConfig,
    mut options: FitOptions<'_>,
) -> std::result::Result<FitResult, FitAbort<FractalSystem>> {
    let observer = options.observer.take();
    fit_driver(
        init,
        target,
        cfg,
        render_cfg,
        options.loss,
        options.fixed_sequences,
        observer,
    )
}

/// Optimizes plain matrix entries without the factored parameterization.
/// Nothing bounds the singular values here, so long trajectories routinely
/// blow up; this exists to demonstrate exactly that.
pub fn fit_raw(
    init: &RawSystem,
    target: &Canvas,
    cfg: &OptimizerConfig,
    render_cfg: &RenderConfig,
) -> std::result::Result<FitOutcome<RawSystem>, FitAbort<RawSystem>> {
    fit_driver::<RawSystem>(init, target, cfg, render_cfg, &MseLoss, None, None)
}

fn fit_driver<P: Learnable>(
    init: &P,
    target: &Canvas,
    cfg: &OptimizerConfig,
    render_cfg: &RenderConfig,
    loss: &dyn ImageLoss,
    fixed_override: Option<&[(IndexSequence, [f64; 2])]>,
    mut observer: Option<&mut dyn FnMut(usize, &P, f64, f64)>,
) -> std::result::Result<FitOutcome<P>, FitAbort<P>> {
    let abort = |step: usize,
                 system: &P,
                 reason: Error,
                 losses: &[f64],
                 norms: &[f64]| FitAbort {
        step,
        last_system: system.clone(),
        reason,
        partial_loss_curve: losses.to_vec(),
        partial_grad_norms: norms.to_vec(),
    };

    let setup = |reason: Error| abort(0, init, reason, &[], &[]);
    cfg.validate().map_err(setup)?;
    render_cfg.validate().map_err(setup)?;
    if target.h != render_cfg.h || target.w != render_cfg.w {
        return Err(setup(Error::ShapeMismatch {
            expected_h: render_cfg.h,
            expected_w: render_cfg.w,
            got_h: target.h,
            got_w: target.w,
        }));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut system = init.clone();
    let mut flat = vec![0.0; system.param_count()];
    system.write_flat(&mut flat);
    let mut opt_state = OptState::new(cfg, flat.len());

    let fixed_batch: Option<Vec<(IndexSequence, [f64; 2])>> = match cfg.objective {
        Objective::Fixed => Some(match fixed_override {
            Some(seqs) => seqs.to_vec(),
            None => sample_batch(&system, cfg.batch_size, cfg.t_len, &mut rng)
                .map_err(setup)?,
        }),
        Objective::Expectation => None,
    };

    let mut loss_curve = Vec::with_capacity(cfg.steps);
    let mut grad_norms = Vec::with_capacity(cfg.steps);
    let mut fresh_batch = Vec::new();

    for step in 0..cfg.steps {
        let batch: &[(IndexSequence, [f64; 2])] = match &fixed_batch {
            Some(b) => b,
            None => {
                fresh_batch.clear();
                let probs = sampling_probabilities(&system);
                let dist = WeightedIndex::new(&probs)
                    .map_err(|_| abort(step, &system, Error::DegenerateSystem, &loss_curve, &grad_norms))?;
                for _ in 0..cfg.batch_size {
                    let indices = (0..cfg.t_len).map(|_| dist.sample(&mut rng)).collect();
                    let v0 = sample_v0(&mut rng);
                    fresh_batch.push((IndexSequence { indices }, v0));
                }
                &fresh_batch
            }
        };

        let (matrices, translations) = system.tables();
        let evals: Vec<Result<(f64, MatrixGradients)>> = batch
            .par_iter()
            .map(|(z, v0)| {
                trajectory_loss_grad(
                    &matrices,
                    &translations,
                    z,
                    *v0,
                    target,
                    render_cfg,
                    loss,
                )
            })
            .collect();

        // Sequential reduction in batch order keeps results bit-identical
        // across thread counts.
        let mut mean_loss = 0.0;
        let mut mean_grads = MatrixGradients::zeros(matrices.len());
        for eval in evals {
            let (l, g) =
                eval.map_err(|e| abort(step, &system, e, &loss_curve, &grad_norms))?;
            mean_loss += l;
            mean_grads.add_assign(&g);
        }
        let scale = 1.0 / batch.len() as f64;
        mean_loss *= scale;
        mean_grads.scale(scale);

        let flat_grad = system.chain(&mean_grads);
        let grad_norm = flat_grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !grad_norm.is_finite() || !mean_loss.is_finite() {
            return Err(abort(
                step,
                &system,
                Error::NonFiniteGradient {
                    context: format!("step {step}"),
                },
                &loss_curve,
                &grad_norms,
            ));
        }

        loss_curve.push(mean_loss);
        grad_norms.push(grad_norm);

        opt_state.update(cfg, &mut flat, &flat_grad, cfg.lr_at(step));
        system.read_flat(&flat);
        system.project();
        system.write_flat(&mut flat);

        if cfg.noise_applied_at(step) {
            let noise = Normal::new(0.0, cfg.noise_std_at(step)).expect("noise_std validated");
            for p in flat.iter_mut() {
                *p += noise.sample(&mut rng);
            }
            system.read_flat(&flat);
            system.reclamp();
            system.write_flat(&mut flat);
        }

        if let Some(obs) = observer.as_deref_mut() {
            obs(step, &system, mean_loss, grad_norm);
        }
    }

    let best_loss = loss_curve.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(FitOutcome {
        learned: system,
        loss_curve,
        best_loss,
        grad_norm_curve: grad_norms,
    })
}

fn sample_batch<P: Learnable, R: Rng + ?Sized>(
    system: &P,
    batch_size: usize,
    t_len: usize,
    rng: &mut R,
) -> Result<Vec<(IndexSequence, [f64; 2])>> {
    let probs = sampling_probabilities(system);
    let dist = WeightedIndex::new(&probs).map_err(|_| Error::DegenerateSystem)?;
    Ok((0..batch_size)
        .map(|_| {
            let indices = (0..t_len).map(|_| dist.sample(rng)).collect();
            let v0 = sample_v0(rng);
            (IndexSequence { indices }, v0)
        })
        .collect())
}

/// Returns a copy with both scale factors clamped into `[0, 1]`.
pub fn clamp_sigmas(s: &FractalSystem) -> FractalSystem {
    let mut out = s.clone();
    out.reclamp();
    out
}

/// Returns a copy with i.i.d. `N(0, std^2)` noise added to every angle,
/// scale, and translation component (flips untouched), scales re-clamped.
pub fn inject_noise<R: Rng + ?Sized>(s: &FractalSystem, std: f64, rng: &mut R) -> FractalSystem {
    assert!(std >= 0.0, "std must be >= 0");
    let noise = Normal::new(0.0, std).expect("std checked above");
    let mut out = s.clone();
    let mut flat = vec![0.0; Learnable::param_count(&out)];
    out.write_flat(&mut flat);
    for p in flat.iter_mut() {
        *p += noise.sample(rng);
    }
    out.read_flat(&flat);
    out.reclamp();
    out
}

/// Samples `n_samples` fresh images from the system and returns the smallest
/// mean squared error against the target, using the same trajectory length
/// and render settings as training.
pub fn evaluate_min_mse<R: Rng + ?Sized>(
    s: &FractalSystem,
    target: &Canvas,
    n_samples: usize,
    t_len: usize,
    render_cfg: &RenderConfig,
    rng: &mut R,
) -> Result<f64> {
    evaluate_best_render(s, target, n_samples, t_len, render_cfg, rng).map(|(mse, _)| mse)
}

/// [`evaluate_min_mse`] that also returns the best-scoring render.
pub fn evaluate_best_render<R: Rng + ?Sized>(
    s: &FractalSystem,
    target: &Canvas,
    n_samples: usize,
    t_len: usize,
    render_cfg: &RenderConfig,
    rng: &mut R,
) -> Result<(f64, Canvas)> {
    assert!(n_samples >= 1, "n_samples must be >= 1");
    let probs = sampling_probabilities(s);
    let dist = WeightedIndex::new(&probs).map_err(|_| Error::DegenerateSystem)?;
    let mut best = f64::INFINITY;
    let mut best_canvas = None;
    for _ in 0..n_samples {
        let z = IndexSequence {
            indices: (0..t_len).map(|_| dist.sample(rng)).collect(),
        };
        let v0 = sample_v0(rng);
        let traj = iterate_ifs(s, &z, v0)?;
        let pixel_points = normalize_points(&traj, render_cfg.h, render_cfg.w);
        let canvas = render(&pixel_points, render_cfg)?;
        let (mse, _) = crate::grad::mse_loss(&canvas, target)?;
        if mse < best {
            best = mse;
            best_canvas = Some(canvas);
        }
    }
    Ok((best, best_canvas.expect("n_samples >= 1")))
}
