//! Depth and tactile embedders: H x W x C grids cut into non-overlapping
//! P x P patches, plus the depth-to-disparity normalization.

use alloc::vec;
use alloc::vec::Vec;

use crate::array::Array;
use crate::error::{config_err, degenerate_err, Result};
use crate::nn::Linear;
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tokenize::TokenSequence;

/// Dense H x W x C grid, channel-interleaved storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Grid {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(config_err!(
                "grid data length {} does not match {h}x{w}x{c}",
                data.len()
            ));
        }
        Ok(Grid { h, w, c, data })
    }

    pub fn at(&self, r: usize, col: usize, ch: usize) -> f64 {
        self.data[(r * self.w + col) * self.c + ch]
    }

    pub fn at_mut(&mut self, r: usize, col: usize, ch: usize) -> &mut f64 {
        &mut self.data[(r * self.w + col) * self.c + ch]
    }
}

pub const DISPARITY_D_MIN: f64 = 1e-3;

/// Depth (meters) to standardized disparity: scale/max(depth, d_min) with
/// non-finite depths treated as zero (hence clamped to the maximum), then
/// per-map standardization to zero mean, unit variance. A constant map
/// standardizes to all zeros.
pub fn depth_to_disparity(depth: &Grid, scale_const: f64) -> Result<Grid> {
    if depth.c != 1 {
        return Err(config_err!("depth maps are single-channel, got {}", depth.c));
    }
    let mut out = depth.clone();
    for v in out.data.iter_mut() {
        let d = if v.is_finite() && *v > 0.0 { *v } else { 0.0 };
        *v = scale_const / d.max(DISPARITY_D_MIN);
    }
    let n = out.data.len() as f64;
    let mean = out.data.iter().sum::<f64>() / n;
    let var = out.data.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = libm::sqrt(var);
    for v in out.data.iter_mut() {
        *v = if std > 0.0 { (*v - mean) / std } else { 0.0 };
    }
    Ok(out)
}

/// Clamp tactile frames into [0, 1].
pub fn clamp_unit(grid: &mut Grid) {
    for v in grid.data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

#[derive(Debug, Clone)]
pub struct GridPatcher {
    pub proj: Linear,
    pub p: usize,
    pub channels: usize,
    /// Zero-pad bottom/right to the next multiple of p instead of erroring.
    pub pad: bool,
}

impl GridPatcher {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        p: usize,
        channels: usize,
        d: usize,
        pad: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if p == 0 || channels == 0 {
            return Err(config_err!("patch size and channels must be >= 1"));
        }
        Ok(GridPatcher {
            proj: Linear::new(
                store,
                &alloc::format!("{prefix}.proj"),
                p * p * channels,
                d,
                rng,
            )?,
            p,
            channels,
            pad,
        })
    }

    pub fn token_count(&self, h: usize, w: usize) -> Result<usize> {
        let (th, tw) = self.tiles(h, w)?;
        Ok(th * tw)
    }

    fn tiles(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h == 0 || w == 0 {
            return Err(degenerate_err!("empty grid"));
        }
        if !self.pad && (h % self.p != 0 || w % self.p != 0) {
            return Err(config_err!(
                "grid {h}x{w} not divisible by patch {} and padding is off",
                self.p
            ));
        }
        Ok((h.div_ceil(self.p), w.div_ceil(self.p)))
    }

    /// Non-overlapping patches in row-major order, flattened
    /// (row, col, channel) and projected to d.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        grid: &Grid,
    ) -> Result<TokenSequence> {
        if grid.c != self.channels {
            return Err(config_err!(
                "grid has {} channels, patcher expects {}",
                grid.c,
                self.channels
            ));
        }
        let (th, tw) = self.tiles(grid.h, grid.w)?;
        let m = th * tw;
        let width = self.p * self.p * self.channels;
        let mut flat = Array::zeros(m, width);
        for ti in 0..th {
            for tj in 0..tw {
                let row = ti * tw + tj;
                for pr in 0..self.p {
                    for pc in 0..self.p {
                        for ch in 0..self.channels {
                            let (r, c) = (ti * self.p + pr, tj * self.p + pc);
                            let v = if r < grid.h && c < grid.w {
                                grid.at(r, c, ch)
                            } else {
                                0.0
                            };
                            *flat.at_mut(row, (pr * self.p + pc) * self.channels + ch) =
                                S::from_f64(v);
                        }
                    }
                }
            }
        }
        let node = tape.constant(flat);
        let tokens = self.proj.forward(tape, store, node)?;
        Ok(TokenSequence::new(tape, tokens))
    }
}
