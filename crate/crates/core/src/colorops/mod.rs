//! Gray normalization and the classical stain-normalization baselines.

mod histogram;
mod macenko;
mod reinhard;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ColorTile, GrayTile};
use crate::error::{Error, Result};

pub use histogram::{histogram_specification, ChannelHistograms, BINS};
pub use macenko::{estimate_stain_matrix, estimate_stain_matrix_pooled, macenko_normalize, MacenkoParams, StainMatrix};
pub use reinhard::{lab_to_rgb, reinhard_normalize, rgb_to_lab, ChannelStats, DEGENERATE_STD};

/// ITU-R BT.601 luma weights.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Luma of every pixel.
pub fn to_gray(tile: &ColorTile) -> GrayTile {
    let pixels = tile
        .rgb()
        .map(|[r, g, b]| {
            if r == g && g == b {
                r
            } else {
                (LUMA[0] * r + LUMA[1] * g + LUMA[2] * b).clamp(0.0, 1.0)
            }
        })
        .collect();
    GrayTile::new(tile.d(), pixels).expect("luma of a valid tile is a valid gray tile")
}

/// Fitted targets for every baseline, serialized as one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineTargets {
    pub reinhard: ChannelStats,
    pub macenko: StainMatrix,
    pub histogram: ChannelHistograms,
}

impl BaselineTargets {
    /// Pooled fit over all `tiles` of the target style.
    pub fn fit(tiles: &[&ColorTile]) -> Result<Self> {
        if tiles.is_empty() {
            return Err(Error::InvalidDataset("no tiles to fit baselines on".into()));
        }
        Ok(Self {
            reinhard: ChannelStats::pooled(tiles),
            macenko: estimate_stain_matrix_pooled(tiles, &MacenkoParams::default())?,
            histogram: ChannelHistograms::pooled(tiles),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
