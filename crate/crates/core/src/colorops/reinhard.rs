//! Reinhard color transfer in the decorrelated lαβ space.

use std::sync::OnceLock;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::data::ColorTile;
use crate::error::Result;

/// Lower bound on a source standard deviation; constant channels would otherwise divide by zero.
pub const DEGENERATE_STD: f64 = 1e-6;

/// Floor applied to cone responses before taking logarithms.
const LMS_FLOOR: f64 = 1e-6;

struct Spaces {
    rgb_to_lms: Matrix3<f64>,
    lms_to_rgb: Matrix3<f64>,
    log_to_lab: Matrix3<f64>,
    lab_to_log: Matrix3<f64>,
}

fn spaces() -> &'static Spaces {
    static SPACES: OnceLock<Spaces> = OnceLock::new();
    SPACES.get_or_init(|| {
        let rgb_to_lms = Matrix3::new(
            0.3811, 0.5783, 0.0402, //
            0.1967, 0.7244, 0.0782, //
            0.0241, 0.1288, 0.8444,
        );
        let mix = Matrix3::new(
            1.0, 1.0, 1.0, //
            1.0, 1.0, -2.0, //
            1.0, -1.0, 0.0,
        );
        let scale = Matrix3::from_diagonal(&Vector3::new(
            1.0 / 3f64.sqrt(),
            1.0 / 6f64.sqrt(),
            1.0 / 2f64.sqrt(),
        ));
        let log_to_lab = scale * mix;
        Spaces {
            rgb_to_lms,
            lms_to_rgb: rgb_to_lms.try_inverse().expect("invertible"),
            log_to_lab,
            lab_to_log: log_to_lab.try_inverse().expect("invertible"),
        }
    })
}

pub fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let s = spaces();
    let lms = s.rgb_to_lms * Vector3::from(rgb);
    let log = lms.map(|v| v.max(LMS_FLOOR).log10());
    (s.log_to_lab * log).into()
}

/// Unclipped inverse of [`rgb_to_lab`].
pub fn lab_to_rgb(lab: [f64; 3]) -> [f64; 3] {
    let s = spaces();
    let lms = (s.lab_to_log * Vector3::from(lab)).map(|v| 10f64.powf(v));
    (s.lms_to_rgb * lms).into()
}

/// Per-channel mean and standard deviation in lαβ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    pub fn of_lab(lab: &[[f64; 3]]) -> Self {
        let n = lab.len().max(1) as f64;
        let mut mean = [0.0; 3];
        for p in lab {
            for c in 0..3 {
                mean[c] += p[c];
            }
        }
        mean = mean.map(|v| v / n);
        let mut var = [0.0; 3];
        for p in lab {
            for c in 0..3 {
                var[c] += (p[c] - mean[c]).powi(2);
            }
        }
        Self { mean, std: var.map(|v| (v / n).sqrt()) }
    }

    pub fn of_tile(tile: &ColorTile) -> Self {
        Self::of_lab(&tile_lab(tile))
    }

    /// Statistics of all pixels of all tiles taken together.
    pub fn pooled(tiles: &[&ColorTile]) -> Self {
        let lab: Vec<[f64; 3]> = tiles.iter().flat_map(|t| tile_lab(t)).collect();
        Self::of_lab(&lab)
    }
}

fn tile_lab(tile: &ColorTile) -> Vec<[f64; 3]> {
    tile.rgb().map(|p| rgb_to_lab(p.map(f64::from))).collect()
}

/// lαβ coordinates after matching `target`, before converting back to RGB.
pub(crate) fn transfer_lab(src: &ColorTile, target: &ChannelStats) -> Vec<[f64; 3]> {
    let lab = tile_lab(src);
    let stats = ChannelStats::of_lab(&lab);
    lab.into_iter()
        .map(|p| {
            std::array::from_fn(|c| {
                let sd = stats.std[c].max(DEGENERATE_STD);
                (p[c] - stats.mean[c]) / sd * target.std[c] + target.mean[c]
            })
        })
        .collect()
}

pub fn reinhard_normalize(src: &ColorTile, target: &ChannelStats) -> Result<ColorTile> {
    let pixels = transfer_lab(src, target)
        .into_iter()
        .flat_map(|lab| lab_to_rgb(lab).map(|v| v as f32))
        .collect();
    ColorTile::new_clipped(src.d(), pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_tile, Label, StainStyleParams};

    fn sample_tile() -> ColorTile {
        synth_tile(&StainStyleParams::reference_a(), Label::Tumor, 64, 3).unwrap().tile
    }

    #[test]
    fn lab_round_trip() {
        for rgb in [[0.2, 0.5, 0.9], [1.0, 1.0, 1.0], [0.01, 0.3, 0.02]] {
            let back = lab_to_rgb(rgb_to_lab(rgb));
            for c in 0..3 {
                assert!((back[c] - rgb[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn own_statistics_are_the_identity() {
        let src = sample_tile();
        let out = reinhard_normalize(&src, &ChannelStats::of_tile(&src)).unwrap();
        let worst = out.pixels().iter().zip(src.pixels()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(worst <= 1e-4, "max deviation {worst}");
    }

    #[test]
    fn uniform_source_lands_on_target_mean() {
        let src = ColorTile::uniform(8, [0.5; 3]).unwrap();
        let target = ChannelStats { mean: rgb_to_lab([0.6, 0.4, 0.55]), std: [0.3, 0.05, 0.02] };
        let out = reinhard_normalize(&src, &target).unwrap();
        // Hand evaluation: every pixel is the RGB whose lαβ equals target.mean.
        let expected = [0.6f32, 0.4, 0.55];
        for p in out.rgb() {
            for c in 0..3 {
                assert!((p[c] - expected[c]).abs() < 1e-5, "{p:?}");
            }
        }
    }

    #[test]
    fn transferred_statistics_match_target_before_clipping() {
        let src = sample_tile();
        let other = synth_tile(&StainStyleParams::reference_b(), Label::Normal, 64, 9).unwrap().tile;
        let target = ChannelStats::of_tile(&other);
        let lab = transfer_lab(&src, &target);
        // Independent statistics: two-pass mean and population std computed inline.
        for c in 0..3 {
            let vals: Vec<f64> = lab.iter().map(|p| p[c]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!((mean - target.mean[c]).abs() < 1e-3);
            assert!((std - target.std[c]).abs() < 1e-2);
        }
    }

    #[test]
    fn degenerate_source_does_not_divide_by_zero() {
        let src = ColorTile::uniform(4, [0.0; 3]).unwrap();
        let target = ChannelStats { mean: [0.0; 3], std: [1.0; 3] };
        let out = reinhard_normalize(&src, &target).unwrap();
        assert!(out.pixels().iter().all(|v| v.is_finite()));
    }
}
