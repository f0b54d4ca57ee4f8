//! Per-channel histogram specification.

use serde::{Deserialize, Serialize};

use crate::data::ColorTile;
use crate::error::{Error, Result};

pub const BINS: usize = 256;

fn level(v: f32) -> usize {
    ((v.clamp(0.0, 1.0) * (BINS - 1) as f32).round() as usize).min(BINS - 1)
}

/// Normalized 256-bin histograms of the R, G and B channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawHistograms", into = "RawHistograms")]
pub struct ChannelHistograms {
    bins: [Vec<f64>; 3],
}

#[derive(Serialize, Deserialize)]
struct RawHistograms {
    bins: [Vec<f64>; 3],
}

impl TryFrom<RawHistograms> for ChannelHistograms {
    type Error = Error;

    fn try_from(raw: RawHistograms) -> Result<Self> {
        Self::new(raw.bins)
    }
}

impl From<ChannelHistograms> for RawHistograms {
    fn from(h: ChannelHistograms) -> Self {
        RawHistograms { bins: h.bins }
    }
}

impl ChannelHistograms {
    /// Each channel must have [`BINS`] nonnegative entries summing to 1.
    pub fn new(bins: [Vec<f64>; 3]) -> Result<Self> {
        for (c, h) in bins.iter().enumerate() {
            if h.len() != BINS {
                return Err(Error::InvalidConfig(format!("channel {c} histogram has {} bins, expected {BINS}", h.len())));
            }
            if h.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidConfig(format!("channel {c} histogram has a negative or non-finite bin")));
            }
            let total: f64 = h.iter().sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidConfig(format!("channel {c} histogram sums to {total}")));
            }
        }
        Ok(Self { bins })
    }

    pub fn of_tile(tile: &ColorTile) -> Self {
        Self::pooled(&[tile])
    }

    pub fn pooled(tiles: &[&ColorTile]) -> Self {
        let mut counts = [vec![0u64; BINS], vec![0u64; BINS], vec![0u64; BINS]];
        for tile in tiles {
            for p in tile.rgb() {
                for c in 0..3 {
                    counts[c][level(p[c])] += 1;
                }
            }
        }
        let bins = counts.map(|h| {
            let n = h.iter().sum::<u64>().max(1) as f64;
            h.into_iter().map(|v| v as f64 / n).collect()
        });
        Self { bins }
    }

    pub fn uniform() -> Self {
        Self { bins: std::array::from_fn(|_| vec![1.0 / BINS as f64; BINS]) }
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.bins[c]
    }
}

fn cdf(h: &[f64]) -> Vec<f64> {
    h.iter()
        .scan(0.0, |acc, v| {
            *acc += v;
            Some(*acc)
        })
        .collect()
}

/// Lookup table from source level to target level.
fn mapping(src: &[f64], target: &[f64]) -> Vec<usize> {
    let src_cdf = cdf(src);
    let tgt_cdf = cdf(target);
    // Tolerate rounding in the final cumulative sum.
    let last = tgt_cdf.iter().rposition(|&v| v > 0.0).unwrap_or(BINS - 1);
    (0..BINS)
        .map(|s| {
            let prev = if s == 0 { 0.0 } else { src_cdf[s - 1] };
            let mid = 0.5 * (prev + src_cdf[s]);
            tgt_cdf.iter().position(|&t| t >= mid - 1e-12).unwrap_or(last)
        })
        .collect()
}

/// Maps every channel of `src` so its distribution follows `target`.
pub fn histogram_specification(src: &ColorTile, target: &ChannelHistograms) -> Result<ColorTile> {
    let own = ChannelHistograms::of_tile(src);
    let luts: [Vec<usize>; 3] = std::array::from_fn(|c| mapping(own.channel(c), target.channel(c)));
    let pixels = src
        .pixels()
        .iter()
        .enumerate()
        .map(|(i, &v)| luts[i % 3][level(v)] as f32 / (BINS - 1) as f32)
        .collect();
    ColorTile::new(src.d(), pixels)
}
