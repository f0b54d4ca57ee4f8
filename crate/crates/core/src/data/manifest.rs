//! CSV manifests (`path,label,institute`) and 8-bit PNG tile files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ColorTile, Dataset, Label, LabeledTile, Split};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    path: String,
    label: String,
    institute: String,
}

pub fn read_png(path: &Path) -> Result<ColorTile> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.into(), message: e.to_string() })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    if w != h {
        return Err(Error::Image { path: path.into(), message: format!("tile is {w}x{h}, expected square") });
    }
    let pixels = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    ColorTile::new(w as usize, pixels).map_err(|e| Error::Image { path: path.into(), message: e.to_string() })
}

pub fn save_png(tile: &ColorTile, path: &Path) -> Result<()> {
    let d = tile.d() as u32;
    let bytes: Vec<u8> = tile.pixels().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    let img = image::RgbImage::from_raw(d, d, bytes).expect("buffer matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image { path: path.into(), message: e.to_string() })
}

/// Loads every row of a manifest, preserving order. Row numbers in errors are 1-based data rows.
pub fn load_manifest(path: &Path, split: Split) -> Result<Dataset> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::ManifestRow { row: 0, message: e.to_string() })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "label", "institute"] {
        return Err(Error::ManifestRow {
            row: 0,
            message: format!("header must be `path,label,institute`, got `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut tiles: Vec<LabeledTile> = Vec::new();
    for (i, record) in reader.deserialize::<Row>().enumerate() {
        let row = i + 1;
        let err = |message: String| Error::ManifestRow { row, message };
        let record = record.map_err(|e| err(e.to_string()))?;
        let label = record
            .label
            .trim()
            .parse::<u8>()
            .map_err(|_| err(format!("label `{}` is not 0 or 1", record.label)))
            .and_then(|v| Label::try_from(v).map_err(err))?;
        let file: PathBuf = base.join(&record.path);
        if !file.exists() {
            return Err(err(format!("missing file {}", file.display())));
        }
        let tile = read_png(&file).map_err(|e| err(e.to_string()))?;
        if let Some(first) = tiles.first() {
            if first.tile.d() != tile.d() {
                return Err(err(format!("tile side {} differs from first tile side {}", tile.d(), first.tile.d())));
            }
        }
        tiles.push(LabeledTile { tile, label, institute: record.institute });
    }
    if tiles.is_empty() {
        return Err(Error::EmptyManifest(path.to_path_buf()));
    }
    Dataset::new(tiles, split)
}

/// Writes `dir/tile_NNNNN.png` for every tile plus `dir/manifest.csv`. Returns the manifest path.
pub fn write_manifest(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join(MANIFEST_FILE);
    let file = std::fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut writer = csv::Writer::from_writer(file);
    for (i, t) in dataset.tiles().iter().enumerate() {
        let name = format!("tile_{i:05}.png");
        save_png(&t.tile, &dir.join(&name))?;
        writer
            .serialize(Row { path: name, label: t.label.as_u8().to_string(), institute: t.institute.clone() })
            .map_err(|e| Error::ManifestRow { row: i + 1, message: e.to_string() })?;
    }
    writer.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join(MANIFEST_FILE);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn empty_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "path,label,institute\n");
        assert!(matches!(load_manifest(&p, Split::Train), Err(Error::EmptyManifest(_))));
    }

    #[test]
    fn two_rows_load_in_order() {
        let dir = tempfile::tempdir().unwrap();
        save_png(&ColorTile::uniform(4, [1.0, 0.0, 0.0]).unwrap(), &dir.path().join("a.png")).unwrap();
        save_png(&ColorTile::uniform(4, [0.0, 0.0, 1.0]).unwrap(), &dir.path().join("b.png")).unwrap();
        let p = write(dir.path(), "path,label,institute\nb.png,1,X\na.png,0,Y\n");
        let ds = load_manifest(&p, Split::Test).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.tiles()[0].tile.pixel(0, 0), [0.0, 0.0, 1.0]);
        assert_eq!(ds.tiles()[0].label, Label::Tumor);
        assert_eq!(ds.tiles()[1].institute, "Y");
    }

    #[test]
    fn bad_label_names_its_row() {
        let dir = tempfile::tempdir().unwrap();
        save_png(&ColorTile::uniform(4, [0.5; 3]).unwrap(), &dir.path().join("a.png")).unwrap();
        let p = write(dir.path(), "path,label,institute\na.png,0,X\na.png,2,X\n");
        match load_manifest(&p, Split::Train) {
            Err(Error::ManifestRow { row, .. }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_and_size_mismatch_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        save_png(&ColorTile::uniform(4, [0.5; 3]).unwrap(), &dir.path().join("a.png")).unwrap();
        save_png(&ColorTile::uniform(8, [0.5; 3]).unwrap(), &dir.path().join("b.png")).unwrap();
        let p = write(dir.path(), "path,label,institute\na.png,0,X\nnope.png,0,X\n");
        assert!(matches!(load_manifest(&p, Split::Train), Err(Error::ManifestRow { row: 2, .. })));
        let p = write(dir.path(), "path,label,institute\na.png,0,X\nb.png,0,X\n");
        assert!(matches!(load_manifest(&p, Split::Train), Err(Error::ManifestRow { row: 2, .. })));
        std::fs::write(dir.path().join("junk.png"), b"not a png").unwrap();
        let p = write(dir.path(), "path,label,institute\njunk.png,0,X\n");
        assert!(matches!(load_manifest(&p, Split::Train), Err(Error::ManifestRow { row: 1, .. })));
    }

    #[test]
    fn written_manifest_reloads_at_8_bit_precision() {
        let dir = tempfile::tempdir().unwrap();
        let tile = ColorTile::from_fn(8, |y, x| [y as f32 / 7.0, x as f32 / 7.0, 0.3]).unwrap();
        let ds = Dataset::new(
            vec![LabeledTile { tile: tile.clone(), label: Label::Tumor, institute: "A".into() }],
            Split::Train,
        )
        .unwrap();
        let p = write_manifest(&ds, dir.path()).unwrap();
        let back = load_manifest(&p, Split::Train).unwrap();
        for (a, b) in back.tiles()[0].tile.pixels().iter().zip(tile.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        // A second write/read cycle is exact.
        let dir2 = tempfile::tempdir().unwrap();
        let p2 = write_manifest(&back, dir2.path()).unwrap();
        assert_eq!(load_manifest(&p2, Split::Train).unwrap().tiles()[0].tile, back.tiles()[0].tile);
    }
}
