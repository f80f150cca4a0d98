//! Affine transforms about the grid center and bilinear resampling.
//!
//! Pixel centers sit at integer coordinates; the transform rotates and scales
//! around `((W-1)/2, (H-1)/2)` and then translates by a fraction of the image
//! size. Samples falling outside the canvas read as zero.

use ndarray::{Array3, ArrayView3};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    /// Radians, counter-clockwise in image coordinates.
    pub rotation: f64,
    pub scale: f64,
    /// Fraction of the image width.
    pub translate_x: f64,
    /// Fraction of the image height.
    pub translate_y: f64,
}

impl AffineTransform {
    pub const IDENTITY: Self = Self {
        rotation: 0.0,
        scale: 1.0,
        translate_x: 0.0,
        translate_y: 0.0,
    };

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            translate_x: tx,
            translate_y: ty,
            ..Self::IDENTITY
        }
    }

    pub fn rotation(radians: f64) -> Self {
        Self {
            rotation: radians,
            ..Self::IDENTITY
        }
    }

    /// Maps a source coordinate to its destination on an `h×w` grid.
    fn apply(&self, x: f64, y: f64, h: usize, w: usize) -> (f64, f64) {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (s, c) = self.rotation.sin_cos();
        let (dx, dy) = (x - cx, y - cy);
        (
            cx + self.scale * (c * dx - s * dy) + self.translate_x * w as f64,
            cy + self.scale * (s * dx + c * dy) + self.translate_y * h as f64,
        )
    }

    /// Inverse of [`AffineTransform::apply`].
    fn unapply(&self, x: f64, y: f64, h: usize, w: usize) -> (f64, f64) {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (s, c) = self.rotation.sin_cos();
        let dx = (x - cx - self.translate_x * w as f64) / self.scale;
        let dy = (y - cy - self.translate_y * h as f64) / self.scale;
        (cx + c * dx + s * dy, cy - s * dx + c * dy)
    }
}

/// Closed sampling intervals for [`sample_affine`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineRanges {
    pub rotation: (f64, f64),
    pub scale: (f64, f64),
    pub translate: (f64, f64),
}

impl Default for AffineRanges {
    fn default() -> Self {
        let deg30 = 30f64.to_radians();
        Self {
            rotation: (-deg30, deg30),
            scale: (0.8, 1.2),
            translate: (-0.1, 0.1),
        }
    }
}

impl AffineRanges {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("rotation", self.rotation),
            ("scale", self.scale),
            ("translate", self.translate),
        ] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("{name} range [{lo}, {hi}] is empty")));
            }
        }
        if self.scale.0 <= 0.0 {
            return Err(Error::Config("scale range must be positive".into()));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Draws each parameter uniformly from its range.
pub fn sample_affine<R: Rng + ?Sized>(
    rng: &mut R,
    ranges: &AffineRanges,
) -> Result<AffineTransform> {
    ranges.validate()?;
    Ok(AffineTransform {
        rotation: uniform(rng, ranges.rotation),
        scale: uniform(rng, ranges.scale),
        translate_x: uniform(rng, ranges.translate),
        translate_y: uniform(rng, ranges.translate),
    })
}

/// Bilinear taps for every output pixel. Applying the plan is linear in the
/// input, so its adjoint gives exact gradients.
#[derive(Debug, Clone)]
pub struct WarpPlan {
    h: usize,
    w: usize,
    /// Four `(source index, weight)` taps per output pixel; out-of-canvas taps
    /// are dropped.
    taps: Vec<[(usize, f64); 4]>,
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

impl WarpPlan {
    /// With `inverse = false` the output is the input moved by `t`; with
    /// `inverse = true` it is moved by `t⁻¹`.
    pub fn new(t: &AffineTransform, h: usize, w: usize, inverse: bool) -> Self {
        let mut taps = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let (x, y) = if inverse {
                    t.apply(j as f64, i as f64, h, w)
                } else {
                    t.unapply(j as f64, i as f64, h, w)
                };
                let (x, y) = (snap(x), snap(y));
                let (x0, y0) = (x.floor(), y.floor());
                let (fx, fy) = (x - x0, y - y0);
                let mut cell = [(0usize, 0.0f64); 4];
                let corners = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x0 + 1.0, (1.0 - fy) * fx),
                    (y0 + 1.0, x0, fy * (1.0 - fx)),
                    (y0 + 1.0, x0 + 1.0, fy * fx),
                ];
                for (slot, (yy, xx, wgt)) in cell.iter_mut().zip(corners) {
                    let inside = yy >= 0.0 && xx >= 0.0 && yy < h as f64 && xx < w as f64;
                    if inside && wgt != 0.0 {
                        *slot = (yy as usize * w + xx as usize, wgt);
                    }
                }
                taps.push(cell);
            }
        }
        Self { h, w, taps }
    }

    /// Resamples every channel of a `c×h×w` tensor.
    pub fn apply(&self, x: ArrayView3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        assert_eq!((h, w), (self.h, self.w), "warp plan grid mismatch");
        let mut out = Array3::zeros((c, h, w));
        for ch in 0..c {
            let src = x.index_axis(ndarray::Axis(0), ch);
            let src = src.as_standard_layout();
            let src = src.as_slice().expect("standard layout");
            let mut dst = out.index_axis_mut(ndarray::Axis(0), ch);
            let dst = dst.as_slice_mut().expect("standard layout");
            for (o, cell) in dst.iter_mut().zip(&self.taps) {
                *o = cell.iter().map(|&(idx, wgt)| wgt * src[idx]).sum();
            }
        }
        out
    }

    /// Transpose of [`WarpPlan::apply`].
    pub fn adjoint(&self, g: ArrayView3<f64>) -> Array3<f64> {
        let (c, h, w) = g.dim();
        assert_eq!((h, w), (self.h, self.w), "warp plan grid mismatch");
        let mut out = Array3::zeros((c, h, w));
        for ch in 0..c {
            let src = g.index_axis(ndarray::Axis(0), ch);
            let src = src.as_standard_layout();
            let src = src.as_slice().expect("standard layout");
            let mut dst = out.index_axis_mut(ndarray::Axis(0), ch);
            let dst = dst.as_slice_mut().expect("standard layout");
            for (gv, cell) in src.iter().zip(&self.taps) {
                for &(idx, wgt) in cell {
                    dst[idx] += wgt * gv;
                }
            }
        }
        out
    }
}

/// Bilinear warp of a `c×h×w` grid by `t` (or by `t⁻¹` when `inverse`).
pub fn warp(grid: ArrayView3<f64>, t: &AffineTransform, inverse: bool) -> Array3<f64> {
    let (_, h, w) = grid.dim();
    WarpPlan::new(t, h, w, inverse).apply(grid)
}
