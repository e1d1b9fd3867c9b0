//! Differentiable point rendering.
//!
//! Points deposit mass on the canvas through a Gaussian RBF kernel,
//! `I[h][w] = sum_t exp(-|[h,w] - v_t|^2 / tau)`, so pixel values are smooth
//! in the point coordinates. Pixel `(h, w)` sits at integer lattice point
//! `[h, w]`; the first point coordinate is the row. A hard one-pixel-per-point
//! rasterizer produces binary targets and is never differentiated.

use crate::error::{Error, Result};

/// Rendering parameters.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RenderConfig {
    pub h: usize,
    pub w: usize,
    /// Kernel bandwidth in squared pixels.
    pub tau: f64,
    /// Clamp pixel values into `[0, 1]` after accumulation.
    pub clamp: bool,
    /// Kernel support cutoff in pixels; `None` renders the exact full kernel.
    pub truncation_radius: Option<f64>,
}

impl RenderConfig {
    pub fn new(h: usize, w: usize, tau: f64) -> Self {
        RenderConfig {
            h,
            w,
            tau,
            clamp: true,
            truncation_radius: None,
        }
    }

    /// Checks field ranges: positive bandwidth, and any truncation radius at
    /// least `3 * sqrt(tau)` so the dropped tail stays negligible.
    pub fn validate(&self) -> Result<()> {
        if self.h < 1 || self.w < 1 {
            return Err(Error::InvalidConfig("canvas dimensions must be positive".into()));
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(Error::InvalidConfig("tau must be positive".into()));
        }
        if let Some(r) = self.truncation_radius {
            if r < 3.0 * self.tau.sqrt() {
                return Err(Error::InvalidConfig(format!(
                    "truncation radius {r} below 3*sqrt(tau) = {}",
                    3.0 * self.tau.sqrt()
                )));
            }
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.h * self.w
    }
}

/// An `h x w` grayscale grid, row-major. When produced by a clamped render it
/// also keeps the unclamped sums, which the backward pass needs to identify
/// saturated pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f64>,
    pub pre_clamp: Option<Vec<f64>>,
}

impl Canvas {
    pub fn zeros(h: usize, w: usize) -> Self {
        Canvas {
            h,
            w,
            pixels: vec![0.0; h * w],
            pre_clamp: None,
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.w + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.pixels[row * self.w + col] = value;
    }

    pub fn same_shape(&self, other: &Canvas) -> bool {
        self.h == other.h && self.w == other.w
    }
}

fn check_points_finite(points: &[[f64; 2]]) -> Result<()> {
    for (index, p) in points.iter().enumerate() {
        if !p[0].is_finite() || !p[1].is_finite() {
            return Err(Error::NonFinitePoint { index });
        }
    }
    Ok(())
}

/// Fills `buf[i] = exp(-(i - p)^2 / tau)` for one axis.
///
/// Consecutive lattice weights differ by a factor `exp(-(2 (i - p) + 1) /
/// tau)`, which itself shrinks by the constant `exp(-2 / tau)` per step, so
/// the whole row needs three `exp` evaluations. Sweeping outward from the
/// lattice point nearest `p` keeps every intermediate in `[0, 1]`; far tails
/// underflow to zero instead of overflowing.
fn axis_weights(p: f64, inv_tau: f64, buf: &mut [f64]) {
    let len = buf.len();
    let center = (p.round().max(0.0) as usize).min(len - 1);
    let e2 = (-2.0 * inv_tau).exp();
    let delta = center as f64 - p;
    let w0 = (-delta * delta * inv_tau).exp();
    buf[center] = w0;
    // Upward sweep: i = center+1 .. len-1.
    let mut w = w0;
    let mut ratio = (-(2.0 * delta + 1.0) * inv_tau).exp();
    for slot in buf[center + 1..].iter_mut() {
        w *= ratio;
        ratio *= e2;
        *slot = w;
    }
    // Downward sweep: i = center-1 .. 0.
    let mut w = w0;
    let mut ratio = ((2.0 * delta - 1.0) * inv_tau).exp();
    for slot in buf[..center].iter_mut().rev() {
        w *= ratio;
        ratio *= e2;
        *slot = w;
    }
}

/// Renders points (already in pixel coordinates) onto a canvas with the RBF
/// kernel. The kernel is separable, so each point contributes the outer
/// product of per-row and per-column weights.
pub fn render(points: &[[f64; 2]], cfg: &RenderConfig) -> Result<Canvas> {
    cfg.validate()?;
    check_points_finite(points)?;
    let (h, w) = (cfg.h, cfg.w);
    let mut sums = vec![0.0f64; h * w];
    let mut row_weights = vec![0.0f64; h];
    let mut col_weights = vec![0.0f64; w];
    let inv_tau = 1.0 / cfg.tau;

    match cfg.truncation_radius {
        None => {
            for p in points {
                axis_weights(p[0], inv_tau, &mut row_weights);
                axis_weights(p[1], inv_tau, &mut col_weights);
                for (i, &rw) in row_weights.iter().enumerate() {
                    let row = &mut sums[i * w..(i + 1) * w];
                    for (v, &cw) in row.iter_mut().zip(col_weights.iter()) {
                        *v += rw * cw;
                    }
                }
            }
        }
        Some(radius) => {
            let r2 = radius * radius;
            for p in points {
                let (i0, i1) = clip_range(p[0], radius, h);
                let (j0, j1) = clip_range(p[1], radius, w);
                for i in i0..i1 {
                    let dh = i as f64 - p[0];
                    let dh2 = dh * dh;
                    let row = &mut sums[i * w..(i + 1) * w];
                    for (j, v) in row.iter_mut().enumerate().take(j1).skip(j0) {
                        let dw = j as f64 - p[1];
                        let d2 = dh2 + dw * dw;
                        if d2 <= r2 {
                            *v += (-d2 * inv_tau).exp();
                        }
                    }
                }
            }
        }
    }

    if cfg.clamp {
        let pixels = sums.iter().map(|&v| v.min(1.0)).collect();
        Ok(Canvas {
            h,
            w,
            pixels,
            pre_clamp: Some(sums),
        })
    } else {
        Ok(Canvas {
            h,
            w,
            pixels: sums,
            pre_clamp: None,
        })
    }
}

/// Half-open index range of lattice points within `radius` of `center`,
/// clipped to `[0, len)`.
fn clip_range(center: f64, radius: f64, len: usize) -> (usize, usize) {
    let lo = (center - radius).ceil().max(0.0) as usize;
    let hi = ((center + radius).floor() as isize + 1).clamp(0, len as isize) as usize;
    (lo.min(len), hi)
}

/// Backward pass of [`render`]: turns an image gradient into per-point 2D
/// gradients.
///
/// Pixels that were clamped (unclamped sum strictly greater than one) pass no
/// gradient; a pixel at exactly 1.0 passes through. The `canvas` must come
/// from [`render`] with the same points and config.
pub fn render_backward(
    points: &[[f64; 2]],
    cfg: &RenderConfig,
    canvas: &Canvas,
    grad_image: &[f64],
) -> Result<Vec<[f64; 2]>> {
    cfg.validate()?;
    check_points_finite(points)?;
    if canvas.h != cfg.h || canvas.w != cfg.w {
        return Err(Error::ShapeMismatch {
            expected_h: cfg.h,
            expected_w: cfg.w,
            got_h: canvas.h,
            got_w: canvas.w,
        });
    }
    if grad_image.len() != cfg.pixel_count() {
        return Err(Error::ShapeMismatch {
            expected_h: cfg.h,
            expected_w: cfg.w,
            got_h: grad_image.len() / cfg.w.max(1),
            got_w: cfg.w,
        });
    }

    let (h, w) = (cfg.h, cfg.w);
    // Zero the gradient wherever the forward pass saturated.
    let masked: Vec<f64> = if cfg.clamp {
        let pre = canvas
            .pre_clamp
            .as_ref()
            .expect("clamped canvas must retain pre-clamp sums");
        grad_image
            .iter()
            .zip(pre.iter())
            .map(|(&g, &s)| if s > 1.0 { 0.0 } else { g })
            .collect()
    } else {
        grad_image.to_vec()
    };

    let inv_tau = 1.0 / cfg.tau;
    let two_inv_tau = 2.0 * inv_tau;
    let mut grads = Vec::with_capacity(points.len());
    let mut row_weights = vec![0.0f64; h];
    let mut col_weights = vec![0.0f64; w];

    match cfg.truncation_radius {
        None => {
            let mut col_acc = vec![0.0f64; w];
            for p in points {
                axis_weights(p[0], inv_tau, &mut row_weights);
                axis_weights(p[1], inv_tau, &mut col_weights);
                // grad_row = sum_i rw_i (i - p0) * (sum_j cw_j g_ij), and
                // symmetrically for the column coordinate.
                let mut g0 = 0.0;
                col_acc.iter_mut().for_each(|v| *v = 0.0);
                for (i, &rw) in row_weights.iter().enumerate() {
                    let row = &masked[i * w..(i + 1) * w];
                    let mut dot = 0.0;
                    for ((&g, &cw), acc) in
                        row.iter().zip(col_weights.iter()).zip(col_acc.iter_mut())
                    {
                        dot += g * cw;
                        *acc += rw * g;
                    }
                    g0 += rw * (i as f64 - p[0]) * dot;
                }
                let mut g1 = 0.0;
                for (j, (&cw, &acc)) in col_weights.iter().zip(col_acc.iter()).enumerate() {
                    g1 += cw * (j as f64 - p[1]) * acc;
                }
                grads.push([two_inv_tau * g0, two_inv_tau * g1]);
            }
        }
        Some(radius) => {
            let r2 = radius * radius;
            for p in points {
                let (i0, i1) = clip_range(p[0], radius, h);
                let (j0, j1) = clip_range(p[1], radius, w);
                let mut g0 = 0.0;
                let mut g1 = 0.0;
                for i in i0..i1 {
                    let dh = i as f64 - p[0];
                    let dh2 = dh * dh;
                    for j in j0..j1 {
                        let dw = j as f64 - p[1];
                        let d2 = dh2 + dw * dw;
                        if d2 <= r2 {
                            let k = (-d2 * inv_tau).exp() * masked[i * w + j];
                            g0 += k * dh;
                            g1 += k * dw;
                        }
                    }
                }
                grads.push([two_inv_tau * g0, two_inv_tau * g1]);
            }
        }
    }
    Ok(grads)
}

/// Rounds each point to its nearest pixel and lights that pixel. Points that
/// round outside the canvas (or are non-finite) are skipped.
pub fn rasterize_hard(points: &[[f64; 2]], h: usize, w: usize) -> Canvas {
    let mut canvas = Canvas::zeros(h, w);
    for p in points {
        if !p[0].is_finite() || !p[1].is_finite() {
            continue;
        }
        let row = p[0].round();
        let col = p[1].round();
        if row >= 0.0 && col >= 0.0 && (row as usize) < h && (col as usize) < w {
            canvas.set(row as usize, col as usize, 1.0);
        }
    }
    canvas
}
