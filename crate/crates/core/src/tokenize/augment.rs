//! Training-time augmentation, one policy per modality. EEG trains without
//! augmentation. Every policy with probabilities 0 and mask lengths 0 is the
//! identity on values (rng state may still advance).

use crate::array::Array;
use crate::error::{config_err, Result};
use crate::rng::Rng;
use crate::tokenize::grid::Grid;
use crate::tokenize::point::PointCloud;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AudioAugment {
    /// Maximum frequency-mask span in mel bins.
    pub freq_mask_max: usize,
    /// Maximum time-mask span in frames.
    pub time_mask_max: usize,
    /// Probability of mixing a batch pair (spectrogram and anchor jointly).
    pub mixup_p: f64,
}

impl Default for AudioAugment {
    fn default() -> Self {
        AudioAugment {
            freq_mask_max: 12,
            time_mask_max: 48,
            mixup_p: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct PointAugment {
    pub dropout_p: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub shift_max: f64,
    pub jitter_std: f64,
    pub rotate: bool,
}

impl Default for PointAugment {
    fn default() -> Self {
        PointAugment {
            dropout_p: 0.1,
            scale_lo: 0.9,
            scale_hi: 1.1,
            shift_max: 0.1,
            jitter_std: 0.01,
            rotate: true,
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct GridAugment {
    pub hflip_p: f64,
    pub vflip_p: f64,
    /// Crop this many pixels total from each axis at a random offset.
    pub crop_margin: usize,
}

impl Default for GridAugment {
    fn default() -> Self {
        GridAugment {
            hflip_p: 0.5,
            vflip_p: 0.0,
            crop_margin: 0,
        }
    }
}

/// Zero the closed span of `width` rows starting at `offset`.
pub fn apply_freq_mask(values: &mut Array<f64>, offset: usize, width: usize) {
    let end = (offset + width).min(values.rows());
    for r in offset..end {
        for c in 0..values.cols() {
            *values.at_mut(r, c) = 0.0;
        }
    }
}

/// Zero `width` frames (columns) starting at `offset`.
pub fn apply_time_mask(values: &mut Array<f64>, offset: usize, width: usize) {
    let end = (offset + width).min(values.cols());
    for r in 0..values.rows() {
        for c in offset..end {
            *values.at_mut(r, c) = 0.0;
        }
    }
}

/// One frequency mask and one time mask, widths uniform in 0..=max,
/// offsets uniform over the positions where the span fits.
pub fn spec_augment(values: &mut Array<f64>, cfg: &AudioAugment, rng: &mut Rng) {
    if cfg.freq_mask_max > 0 && values.rows() > 0 {
        let max_w = cfg.freq_mask_max.min(values.rows());
        let w = rng.below(max_w + 1);
        if w > 0 {
            let offset = rng.below(values.rows() - w + 1);
            apply_freq_mask(values, offset, w);
        }
    }
    if cfg.time_mask_max > 0 && values.cols() > 0 {
        let max_w = cfg.time_mask_max.min(values.cols());
        let w = rng.below(max_w + 1);
        if w > 0 {
            let offset = rng.below(values.cols() - w + 1);
            apply_time_mask(values, offset, w);
        }
    }
}

/// Mixing weight with the arcsine (Beta(1/2, 1/2)) law via the inverse CDF
/// sin^2(pi u / 2).
pub fn mixup_lambda(rng: &mut Rng) -> f64 {
    let u = rng.uniform_f64();
    let s = libm::sin(core::f64::consts::PI * u / 2.0);
    s * s
}

/// Convex blend lambda*a + (1-lambda)*b, elementwise. Shapes must agree.
pub fn mixup_blend(a: &Array<f64>, b: &Array<f64>, lambda: f64) -> Result<Array<f64>> {
    if a.shape() != b.shape() {
        return Err(config_err!(
            "mixup shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| lambda * x + (1.0 - lambda) * y)
        .collect();
    Array::from_vec(a.rows(), a.cols(), data)
}

/// In-place point cloud augmentation: dropout (dropped points collapse onto
/// the first kept point), global scale, global shift, per-coordinate jitter,
/// rotation about the z axis.
pub fn augment_points(pc: &mut PointCloud, cfg: &PointAugment, rng: &mut Rng) {
    let n = pc.points.rows();
    if cfg.dropout_p > 0.0 {
        let keep: alloc::vec::Vec<bool> = (0..n).map(|_| !rng.coin(cfg.dropout_p)).collect();
        if let Some(first_kept) = keep.iter().position(|&k| k) {
            let anchor: [f64; 3] = [
                pc.points.at(first_kept, 0),
                pc.points.at(first_kept, 1),
                pc.points.at(first_kept, 2),
            ];
            for i in 0..n {
                if !keep[i] {
                    for c in 0..3 {
                        *pc.points.at_mut(i, c) = anchor[c];
                    }
                }
            }
        }
    }
    let scale = rng.uniform_range(cfg.scale_lo, cfg.scale_hi);
    let shift: [f64; 3] = [
        rng.uniform_range(-cfg.shift_max, cfg.shift_max),
        rng.uniform_range(-cfg.shift_max, cfg.shift_max),
        rng.uniform_range(-cfg.shift_max, cfg.shift_max),
    ];
    for i in 0..n {
        for c in 0..3 {
            let v = pc.points.at(i, c) * scale + shift[c];
            *pc.points.at_mut(i, c) = v + rng.normal::<f64>(0.0, cfg.jitter_std);
        }
    }
    if cfg.rotate {
        let theta = rng.uniform_range(0.0, 2.0 * core::f64::consts::PI);
        let (s, c) = (libm::sin(theta), libm::cos(theta));
        for i in 0..n {
            let x = pc.points.at(i, 0);
            let y = pc.points.at(i, 1);
            *pc.points.at_mut(i, 0) = x * c - y * s;
            *pc.points.at_mut(i, 1) = x * s + y * c;
        }
    }
}

/// In-place flips and an aligned random crop. With margin m the output is
/// (h-m) x (w-m) at a random offset; m = 0 keeps the full grid.
pub fn augment_grid(grid: &mut Grid, cfg: &GridAugment, rng: &mut Rng) -> Result<()> {
    if cfg.crop_margin >= grid.h || cfg.crop_margin >= grid.w {
        return Err(config_err!(
            "crop margin {} too large for {}x{}",
            cfg.crop_margin,
            grid.h,
            grid.w
        ));
    }
    if rng.coin(cfg.hflip_p) {
        for r in 0..grid.h {
            for c in 0..grid.w / 2 {
                for ch in 0..grid.c {
                    let a = grid.at(r, c, ch);
                    let b = grid.at(r, grid.w - 1 - c, ch);
                    *grid.at_mut(r, c, ch) = b;
                    *grid.at_mut(r, grid.w - 1 - c, ch) = a;
                }
            }
        }
    }
    if rng.coin(cfg.vflip_p) {
        for r in 0..grid.h / 2 {
            for c in 0..grid.w {
                for ch in 0..grid.c {
                    let a = grid.at(r, c, ch);
                    let b = grid.at(grid.h - 1 - r, c, ch);
                    *grid.at_mut(r, c, ch) = b;
                    *grid.at_mut(grid.h - 1 - r, c, ch) = a;
                }
            }
        }
    }
    if cfg.crop_margin > 0 {
        let (nh, nw) = (grid.h - cfg.crop_margin, grid.w - cfg.crop_margin);
        let dr = rng.below(cfg.crop_margin + 1);
        let dc = rng.below(cfg.crop_margin + 1);
        let mut out = Grid::zeros(nh, nw, grid.c);
        for r in 0..nh {
            for c in 0..nw {
                for ch in 0..grid.c {
                    *out.at_mut(r, c, ch) = grid.at(r + dr, c + dc, ch);
                }
            }
        }
        *grid = out;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disabled_masks_are_the_identity() {
        let mut rng = Rng::from_seed(1);
        let mut values = Array::trunc_normal(16, 20, 1.0, &mut rng);
        let before = values.data().to_vec();
        spec_augment(
            &mut values,
            &AudioAugment {
                freq_mask_max: 0,
                time_mask_max: 0,
                mixup_p: 0.0,
            },
            &mut rng,
        );
        assert_eq!(values.data(), &before[..]);
    }

    #[test]
    fn freq_mask_zeroes_exactly_its_span() {
        let mut values = Array::filled(32, 10, 1.0);
        apply_freq_mask(&mut values, 5, 12);
        for r in 0..32 {
            for c in 0..10 {
                let want = if (5..17).contains(&r) { 0.0 } else { 1.0 };
                assert_eq!(values.at(r, c), want, "row {r}");
            }
        }
    }

    #[test]
    fn time_mask_zeroes_exactly_its_span() {
        let mut values = Array::filled(4, 100, 2.0);
        apply_time_mask(&mut values, 10, 48);
        for c in 0..100 {
            let want = if (10..58).contains(&c) { 0.0 } else { 2.0 };
            assert_eq!(values.at(0, c), want);
        }
    }

    #[test]
    fn random_masks_stay_within_bounds() {
        let mut rng = Rng::from_seed(7);
        for _ in 0..50 {
            // Wider than the time-mask cap so a time span never blanks a full row.
            let mut values = Array::filled(16, 100, 1.0);
            spec_augment(&mut values, &AudioAugment::default(), &mut rng);
            let zero_rows = (0..16)
                .filter(|&r| values.row_slice(r).iter().all(|&v| v == 0.0))
                .count();
            let zero_cols = (0..100)
                .filter(|&c| (0..16).all(|r| values.at(r, c) == 0.0))
                .count();
            assert!(zero_rows <= 12);
            assert!(zero_cols <= 48);
            assert!(values.all_finite());
        }
    }

    #[test]
    fn mixup_lambda_in_unit_interval_and_symmetric_ends() {
        let mut rng = Rng::from_seed(3);
        for _ in 0..200 {
            let l = mixup_lambda(&mut rng);
            assert!((0.0..=1.0).contains(&l));
        }
    }

    #[test]
    fn mixup_blend_boundaries() {
        let a = Array::from_vec(1, 2, alloc::vec![1.0, 2.0]).unwrap();
        let b = Array::from_vec(1, 2, alloc::vec![3.0, 4.0]).unwrap();
        assert_eq!(mixup_blend(&a, &b, 1.0).unwrap().data(), a.data());
        assert_eq!(mixup_blend(&a, &b, 0.0).unwrap().data(), b.data());
        let half = mixup_blend(&a, &b, 0.5).unwrap();
        assert_eq!(half.data(), &[2.0, 3.0]);
    }

    #[test]
    fn point_augment_identity_settings_leave_values_unchanged() {
        let mut rng = Rng::from_seed(5);
        let coords: alloc::vec::Vec<f64> = (0..30).map(|_| rng.normal_f64()).collect();
        let mut pc =
            PointCloud::new(Array::from_vec(10, 3, coords.clone()).unwrap()).unwrap();
        augment_points(
            &mut pc,
            &PointAugment {
                dropout_p: 0.0,
                scale_lo: 1.0,
                scale_hi: 1.0,
                shift_max: 0.0,
                jitter_std: 0.0,
                rotate: false,
            },
            &mut rng,
        );
        assert_eq!(pc.points.data(), &coords[..]);
    }

    #[test]
    fn rotation_preserves_distances_to_origin() {
        let mut rng = Rng::from_seed(6);
        let coords: alloc::vec::Vec<f64> = (0..30).map(|_| rng.normal_f64()).collect();
        let mut pc = PointCloud::new(Array::from_vec(10, 3, coords).unwrap()).unwrap();
        let norms: alloc::vec::Vec<f64> = (0..10)
            .map(|i| (0..3).map(|c| pc.points.at(i, c).powi(2)).sum::<f64>())
            .collect();
        augment_points(
            &mut pc,
            &PointAugment {
                dropout_p: 0.0,
                scale_lo: 1.0,
                scale_hi: 1.0,
                shift_max: 0.0,
                jitter_std: 0.0,
                rotate: true,
            },
            &mut rng,
        );
        for i in 0..10 {
            let n: f64 = (0..3).map(|c| pc.points.at(i, c).powi(2)).sum();
            assert!((n - norms[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn grid_identity_settings_leave_grid_unchanged() {
        let mut rng = Rng::from_seed(8);
        let mut g = Grid::from_vec(2, 3, 1, alloc::vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let before = g.clone();
        augment_grid(
            &mut g,
            &GridAugment {
                hflip_p: 0.0,
                vflip_p: 0.0,
                crop_margin: 0,
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(g, before);
    }

    #[test]
    fn forced_hflip_reverses_columns() {
        let mut rng = Rng::from_seed(9);
        let mut g = Grid::from_vec(1, 3, 1, alloc::vec![1.0, 2.0, 3.0]).unwrap();
        augment_grid(
            &mut g,
            &GridAugment {
                hflip_p: 1.0,
                vflip_p: 0.0,
                crop_margin: 0,
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(g.data, alloc::vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn crop_shrinks_both_axes() {
        let mut rng = Rng::from_seed(10);
        let mut g = Grid::zeros(8, 10, 2);
        augment_grid(
            &mut g,
            &GridAugment {
                hflip_p: 0.0,
                vflip_p: 0.0,
                crop_margin: 2,
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!((g.h, g.w, g.c), (6, 8, 2));
    }
}
