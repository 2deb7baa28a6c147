//! Boundary-constrained random-resized-crop geometry.
//!
//! Crops keep at least `r_w` of the frame width and `r_h` of its height, so
//! only thin bands at the left and right edges can ever be cut away. Width
//! and height ratios are drawn independently and uniformly, which satisfies
//! the aspect-ratio and minimum-area bounds without rejection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropParams {
    pub r_w: f64,
    pub r_h: f64,
}

impl Default for CropParams {
    fn default() -> Self {
        Self { r_w: 0.9, r_h: 0.6 }
    }
}

impl CropParams {
    pub fn new(r_w: f64, r_h: f64) -> Result<Self> {
        if !(r_w > 0.0 && r_w <= 1.0) {
            return Err(Error::invalid("r_w", format!("{r_w} not in (0, 1]")));
        }
        if !(r_h > 0.0 && r_h <= 1.0) {
            return Err(Error::invalid("r_h", format!("{r_h} not in (0, 1]")));
        }
        Ok(Self { r_w, r_h })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub x: u32,
    pub y: u32,
    pub cw: u32,
    pub ch: u32,
}

impl CropRect {
    pub fn aspect(&self) -> f64 {
        self.cw as f64 / self.ch as f64
    }

    pub fn area_ratio(&self, w: u32, h: u32) -> f64 {
        (self.cw as f64 * self.ch as f64) / (w as f64 * h as f64)
    }
}

/// `(A_min, A_max) = (r_w * w / h, w / (r_h * h))`
pub fn aspect_bounds(w: u32, h: u32, params: CropParams) -> (f64, f64) {
    let (w, h) = (w as f64, h as f64);
    (params.r_w * w / h, w / (params.r_h * h))
}

pub fn min_area_ratio(params: CropParams) -> f64 {
    params.r_w * params.r_h
}

#[inline]
fn round_half_up(v: f64) -> u32 {
    (v + 0.5).floor() as u32
}

/// Smallest pixel extent not below `ratio * size`; the epsilon absorbs
/// representation error in products like `0.6 * 1080`.
#[inline]
fn min_extent(ratio: f64, size: u32) -> u32 {
    ((ratio * size as f64) - 1e-9).ceil().max(1.0) as u32
}

pub fn sample_crop(w: u32, h: u32, params: CropParams, rng: &mut StreamRng) -> CropRect {
    assert!(w > 0 && h > 0, "frame must be non-empty");
    let u_w = uniform(rng, params.r_w);
    let u_h = uniform(rng, params.r_h);
    let cw = round_half_up(u_w * w as f64).clamp(min_extent(params.r_w, w), w);
    let ch = round_half_up(u_h * h as f64).clamp(min_extent(params.r_h, h), h);
    let x = rng.random_range(0..=w - cw);
    let y = rng.random_range(0..=h - ch);
    CropRect { x, y, cw, ch }
}

fn uniform(rng: &mut StreamRng, lo: f64) -> f64 {
    if lo >= 1.0 {
        // still consume a draw so streams stay aligned across parameter sets
        let _: f64 = rng.random();
        1.0
    } else {
        rng.random_range(lo..=1.0)
    }
}

/// Crops a `w x h` single-channel grid and resizes it to `out_w x out_h`
/// with nearest-neighbour sampling.
pub fn crop_and_resize(
    frame: &[f32],
    w: u32,
    h: u32,
    rect: CropRect,
    out_w: u32,
    out_h: u32,
) -> Result<Vec<f32>> {
    if frame.len() != (w * h) as usize {
        return Err(Error::DimensionMismatch {
            field: "frame",
            expected: (w * h) as usize,
            found: frame.len(),
        });
    }
    if rect.x + rect.cw > w || rect.y + rect.ch > h || rect.cw == 0 || rect.ch == 0 {
        return Err(Error::invalid("rect", "crop rectangle outside frame"));
    }
    let mut out = Vec::with_capacity((out_w * out_h) as usize);
    for oy in 0..out_h {
        let sy = rect.y + ((oy as u64 * rect.ch as u64) / out_h as u64) as u32;
        for ox in 0..out_w {
            let sx = rect.x + ((ox as u64 * rect.cw as u64) / out_w as u64) as u32;
            out.push(frame[(sy * w + sx) as usize]);
        }
    }
    Ok(out)
}
