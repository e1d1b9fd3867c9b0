//! Learning the parameters of an iterated function system (IFS) from a
//! target image by gradient descent.
//!
//! The pipeline: a fractal system generates a point trajectory through the
//! chaos game ([`ifs`]), the points are fit to the canvas and splatted
//! through a differentiable RBF kernel ([`render`]), an image loss drives
//! reverse-mode gradients back through rendering and the recurrence into
//! every transform parameter ([`grad`]), and an Adam loop with scale
//! clamping and periodic parameter noise updates the system ([`optim`]).
//! [`io`] covers targets and artifacts on disk.

pub mod error;
pub mod grad;
pub mod ifs;
pub mod io;
pub mod optim;
pub mod render;

pub use error::{Error, Result};
pub use grad::{
    backprop_trajectory, finite_difference_check, mse_loss, GradCheckReport, ImageLoss,
    MatrixGradients, MseLoss, ParameterGradients, TransformGradients,
};
pub use ifs::{
    compose_matrix, concat_systems, iterate_ifs, normalize_map, normalize_points,
    sample_index_sequence, sample_v0, transform_probabilities, BatchedSystemMatrix,
    FractalSystem, IndexSequence, NormalizeMap, PointTrajectory, RawSystem, ReparamTransform,
};
pub use io::{
    generate_fractaldb_target, load_system_json, load_target, read_idx_images, read_pgm,
    save_system_json, write_pgm_p2, write_pgm_p5, GeneratedTarget, TargetImage,
};
pub use optim::{
    clamp_sigmas, evaluate_best_render, evaluate_min_mse, fit, fit_raw, fit_with, inject_noise,
    AdamState, FitAbort, FitOptions, FitOutcome, FitResult, Objective, OptKind, OptimizerConfig,
};
pub use render::{rasterize_hard, render, render_backward, Canvas, RenderConfig};
