//! Tiles, labeled datasets, manifests and the synthetic stained-tissue generator.

mod manifest;
mod style;
mod synth;
mod tile;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use manifest::{load_manifest, save_png, read_png, write_manifest, MANIFEST_FILE};
pub use style::{StainStyleParams, MIN_STAIN_ANGLE_DEG};
pub use synth::{
    derive_seed, make_synthetic_benchmark, render_tile, synth_layout, synth_tile, ConcentrationMap,
};
pub use tile::{batch_to_tiles, color_batch, gray_batch, ColorTile, GrayTile};

#[cfg(test)]
pub(crate) use style::angle_deg;
pub(crate) use style::normalized;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Normal = 0,
    Tumor = 1,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn as_f64(self) -> f64 {
        self as u8 as f64
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::Normal => Label::Tumor,
            Label::Tumor => Label::Normal,
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l.as_u8()
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            0 => Ok(Label::Normal),
            1 => Ok(Label::Tumor),
            other => Err(format!("label {other} outside {{0, 1}}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledTile {
    pub tile: ColorTile,
    pub label: Label,
    pub institute: String,
}

/// Nonempty ordered collection of equally sized labeled tiles.
#[derive(Clone, Debug)]
pub struct Dataset {
    tiles: Vec<LabeledTile>,
    split: Split,
}

impl Dataset {
    pub fn new(tiles: Vec<LabeledTile>, split: Split) -> Result<Self> {
        let Some(first) = tiles.first() else {
            return Err(Error::InvalidDataset("dataset is empty".into()));
        };
        let d = first.tile.d();
        if let Some(i) = tiles.iter().position(|t| t.tile.d() != d) {
            return Err(Error::InvalidDataset(format!(
                "tile {i} has side {} but tile 0 has side {d}",
                tiles[i].tile.d()
            )));
        }
        Ok(Self { tiles, split })
    }

    pub fn tiles(&self) -> &[LabeledTile] {
        &self.tiles
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn d(&self) -> usize {
        self.tiles[0].tile.d()
    }

    /// `(normal, tumor)` counts.
    pub fn class_counts(&self) -> (usize, usize) {
        let tumor = self.tiles.iter().filter(|t| t.label == Label::Tumor).count();
        (self.tiles.len() - tumor, tumor)
    }

    pub fn is_balanced(&self) -> bool {
        let (n, t) = self.class_counts();
        n == t
    }

    pub fn labels(&self) -> Vec<Label> {
        self.tiles.iter().map(|t| t.label).collect()
    }

    /// Mean of each RGB channel over all pixels of all tiles.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for t in &self.tiles {
            let m = t.tile.channel_means();
            for c in 0..3 {
                acc[c] += m[c];
            }
        }
        acc.map(|v| v / self.tiles.len() as f64)
    }

    /// First `n` tiles (or all of them) as a new dataset.
    pub fn take(&self, n: usize) -> Self {
        Self { tiles: self.tiles[..n.min(self.tiles.len())].to_vec(), split: self.split }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tile(d: usize, label: Label) -> LabeledTile {
        LabeledTile { tile: ColorTile::uniform(d, [0.5; 3]).unwrap(), label, institute: "x".into() }
    }

    #[test]
    fn dataset_invariants() {
        assert!(Dataset::new(vec![], Split::Train).is_err());
        assert!(Dataset::new(vec![tile(4, Label::Normal), tile(8, Label::Tumor)], Split::Train).is_err());
        let ds = Dataset::new(vec![tile(4, Label::Normal), tile(4, Label::Tumor)], Split::Val).unwrap();
        assert_eq!(ds.class_counts(), (1, 1));
        assert!(ds.is_balanced());
        assert_eq!(ds.d(), 4);
    }

    #[test]
    fn label_conversions() {
        assert_eq!(Label::try_from(1u8), Ok(Label::Tumor));
        assert!(Label::try_from(2u8).is_err());
        assert_eq!(serde_json::to_string(&Label::Tumor).unwrap(), "1");
    }
}
