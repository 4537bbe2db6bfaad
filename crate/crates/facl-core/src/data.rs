//! Dataset ingestion, manifests, and the built-in synthetic domains used
//! for desk-scale runs.
//!
//! Datasets live on disk in image-folder layout with split directories:
//!
//! ```text
//! root/
//!   train/<class_name>/*.png
//!   val/<class_name>/*.png
//! ```
//!
//! Ingestion validates and indexes the tree into a manifest; pixel data is
//! loaded lazily when a split is materialized.

pub mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemRef {
    /// Path relative to the dataset root.
    pub path: String,
    pub class: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuarantineEntry {
    pub path: String,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub id: String,
    pub root: PathBuf,
    pub num_classes: usize,
    pub resolution: usize,
    /// Sorted class directory names; index = label.
    pub classes: Vec<String>,
    pub splits: BTreeMap<String, Vec<ItemRef>>,
    pub checksum: String,
    pub quarantined: Vec<QuarantineEntry>,
}

impl DatasetManifest {
    pub fn items(&self, split: &str) -> Result<&[ItemRef]> {
        self.splits
            .get(split)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Dataset(format!("dataset `{}` has no `{split}` split", self.id)))
    }
}

fn list_sorted_dirs(path: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io_at(path, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn list_sorted_files(path: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io_at(path, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

/// Scans and validates an image-folder tree, producing a manifest.
///
/// Every image is decoded once to prove it is readable; corrupt files are
/// quarantined (listed and excluded) rather than failing the run. An empty
/// class directory is an error. Class names must agree across splits.
pub fn ingest_dataset(root: &Path, id: &str, resolution: usize) -> Result<DatasetManifest> {
    let root = &root.canonicalize().map_err(|e| Error::io_at(root, e))?;
    let split_names: Vec<String> = list_sorted_dirs(root)?
        .into_iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    if !split_names.iter().any(|s| s == "train") {
        return Err(Error::Dataset(format!(
            "{}: expected split directories (at least `train`)",
            root.display()
        )));
    }

    let mut classes: Vec<String> = Vec::new();
    let mut splits: BTreeMap<String, Vec<ItemRef>> = BTreeMap::new();
    let mut quarantined = Vec::new();
    let mut hasher = Sha256::new();

    for split in &split_names {
        let split_dir = root.join(split);
        let class_dirs = list_sorted_dirs(&split_dir)?;
        let names: Vec<String> = class_dirs
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect();
        if classes.is_empty() {
            classes = names.clone();
        } else if classes != names {
            return Err(Error::Dataset(format!(
                "split `{split}` classes {names:?} do not match {classes:?}"
            )));
        }
        let mut items = Vec::new();
        for (class_idx, dir) in class_dirs.iter().enumerate() {
            let files = list_sorted_files(dir)?;
            if files.is_empty() {
                return Err(Error::Dataset(format!(
                    "class directory `{}` in split `{split}` is empty",
                    names[class_idx]
                )));
            }
            for f in files {
                let rel = f
                    .strip_prefix(root)
                    .expect("file under root")
                    .to_string_lossy()
                    .into_owned();
                let bytes = std::fs::read(&f).map_err(|e| Error::io_at(&f, e))?;
                match image::load_from_memory(&bytes) {
                    Ok(_) => {
                        hasher.update(rel.as_bytes());
                        hasher.update(&bytes);
                        items.push(ItemRef {
                            path: rel,
                            class: class_idx,
                        });
                    }
                    Err(e) => quarantined.push(QuarantineEntry {
                        path: rel,
                        reason: e.to_string(),
                    }),
                }
            }
        }
        splits.insert(split.clone(), items);
    }

    let manifest = DatasetManifest {
        id: id.to_string(),
        root: root.to_path_buf(),
        num_classes: classes.len(),
        resolution,
        classes,
        splits,
        checksum: format!("{:x}", hasher.finalize()),
        quarantined,
    };
    Ok(manifest)
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)?;
    std::fs::write(path, json).map_err(|e| Error::io_at(path, e))?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let json = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    Ok(serde_json::from_str(&json)?)
}

/// Decodes one image to a (3, H, W) grid on the 0-255 scale, resized to
/// `resolution` when needed.
pub fn load_image(path: &Path, resolution: usize) -> Result<Array3<f64>> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    let mut arr = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            arr[(c, y as usize, x as usize)] = p.0[c] as f64;
        }
    }
    if (h as usize, w as usize) != (resolution, resolution) {
        arr = resize_bilinear(&arr, resolution, resolution);
    }
    Ok(arr)
}

/// Bilinear resize of a (C, H, W) image.
pub fn resize_bilinear(img: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let mut out = Array3::<f64>::zeros((c, out_h, out_w));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let v00 = img[(ch, y0, x0)];
                let v01 = img[(ch, y0, x1)];
                let v10 = img[(ch, y1, x0)];
                let v11 = img[(ch, y1, x1)];
                out[(ch, oy, ox)] = v00 * (1.0 - wy) * (1.0 - wx)
                    + v01 * (1.0 - wy) * wx
                    + v10 * wy * (1.0 - wx)
                    + v11 * wy * wx;
            }
        }
    }
    out
}

/// A fully materialized split: stacked images plus labels.
#[derive(Debug, Clone)]
pub struct LoadedSplit {
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
}

/// Loads and stacks every item of a split at the manifest resolution.
pub fn load_split(manifest: &DatasetManifest, split: &str) -> Result<LoadedSplit> {
    let items = manifest.items(split)?;
    let r = manifest.resolution;
    let mut images = Array4::<f64>::zeros((items.len(), 3, r, r));
    let mut labels = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let img = load_image(&manifest.root.join(&item.path), r)?;
        images.index_axis_mut(Axis(0), i).assign(&img);
        labels.push(item.class);
    }
    Ok(LoadedSplit { images, labels })
}

/// Writes a (3, H, W) 0-255 image as a PNG, clamping out-of-range values.
pub fn save_image_png(img: &Array3<f64>, path: &Path) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::InvalidInput(format!("expected 3 channels, got {c}")));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                img[(0, y, x)].round().clamp(0.0, 255.0) as u8,
                img[(1, y, x)].round().clamp(0.0, 255.0) as u8,
                img[(2, y, x)].round().clamp(0.0, 255.0) as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
    }
    buf.save(path)?;
    Ok(())
}

/// Writes a single-channel map as a grayscale PNG after min-max scaling.
pub fn save_map_png(map: &ndarray::Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in map.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = (hi - lo).max(1e-12);
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = ((map[(y, x)] - lo) / span * 255.0).round() as u8;
            buf.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
    }
    buf.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use synth::{generate_dataset, SynthDomain, SynthSpec};

    fn tiny_spec(domain: SynthDomain) -> SynthSpec {
        SynthSpec {
            domain,
            per_class_train: 3,
            per_class_val: 2,
            resolution: 16,
            seed: 7,
        }
    }

    #[test]
    fn ingest_counts_classes_and_items() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(dir.path(), &tiny_spec(SynthDomain::ShapesA)).unwrap();
        let m = ingest_dataset(dir.path(), "t", 16).unwrap();
        assert_eq!(m.num_classes, 10);
        assert_eq!(m.items("train").unwrap().len(), 30);
        assert_eq!(m.items("val").unwrap().len(), 20);
        assert!(m.quarantined.is_empty());
    }

    #[test]
    fn ingest_rejects_empty_class_dir() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(dir.path(), &tiny_spec(SynthDomain::ShapesA)).unwrap();
        let victim = dir.path().join("train/class_03");
        for f in std::fs::read_dir(&victim).unwrap() {
            std::fs::remove_file(f.unwrap().path()).unwrap();
        }
        let err = ingest_dataset(dir.path(), "t", 16).unwrap_err();
        assert!(err.to_string().contains("class_03"), "error was: {err}");
    }

    #[test]
    fn ingest_checksum_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(dir.path(), &tiny_spec(SynthDomain::GlyphsB)).unwrap();
        let a = ingest_dataset(dir.path(), "t", 16).unwrap();
        let b = ingest_dataset(dir.path(), "t", 16).unwrap();
        assert_eq!(a.checksum, b.checksum);
    }

    #[test]
    fn corrupt_images_are_quarantined() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(dir.path(), &tiny_spec(SynthDomain::ShapesA)).unwrap();
        std::fs::write(dir.path().join("train/class_00/zz_bad.png"), b"garbage").unwrap();
        let m = ingest_dataset(dir.path(), "t", 16).unwrap();
        assert_eq!(m.quarantined.len(), 1);
        assert!(m.quarantined[0].path.contains("zz_bad"));
        assert_eq!(m.items("train").unwrap().len(), 30);
    }

    #[test]
    fn image_round_trip_through_png() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array3::from_shape_fn((3, 8, 8), |(c, y, x)| ((c * 83 + y * 11 + x * 3) % 256) as f64);
        let path = dir.path().join("x.png");
        save_image_png(&img, &path).unwrap();
        let back = load_image(&path, 8).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn resize_preserves_constant_images() {
        let img = Array3::from_elem((3, 10, 10), 77.0);
        let out = resize_bilinear(&img, 32, 32);
        assert!(out.iter().all(|&v| (v - 77.0).abs() < 1e-9));
    }

    #[test]
    fn splits_are_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(dir.path(), &tiny_spec(SynthDomain::ShapesA)).unwrap();
        let m = ingest_dataset(dir.path(), "t", 16).unwrap();
        let train: std::collections::HashSet<_> =
            m.items("train").unwrap().iter().map(|i| &i.path).collect();
        for item in m.items("val").unwrap() {
            assert!(!train.contains(&item.path));
        }
    }

    #[test]
    fn loaded_split_shapes_match() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(dir.path(), &tiny_spec(SynthDomain::GlyphsB)).unwrap();
        let m = ingest_dataset(dir.path(), "t", 16).unwrap();
        let split = load_split(&m, "val").unwrap();
        assert_eq!(split.images.dim(), (20, 3, 16, 16));
        assert_eq!(split.labels.len(), 20);
        assert!(split.labels.iter().all(|&l| l < 10));
    }
}
