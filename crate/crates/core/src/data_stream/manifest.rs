use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Sample};
use crate::error::{load_error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub path: String,
    pub label: usize,
}

/// `{"class_count": int, "items": [{"path": str, "label": int}, ...]}`.
/// Item paths are resolved relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub class_count: usize,
    pub items: Vec<ManifestItem>,
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| load_error(path, e.to_string()))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| load_error(path, format!("malformed manifest: {e}")))?;
    if manifest.class_count == 0 {
        return Err(load_error(path, "class_count must be positive"));
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();

    let mut samples = Vec::with_capacity(manifest.items.len());
    let mut shape: Option<Vec<usize>> = None;
    for (i, item) in manifest.items.iter().enumerate() {
        if item.label >= manifest.class_count {
            return Err(load_error(
                path,
                format!(
                    "item {i} ({}): label {} >= class_count {}",
                    item.path, item.label, manifest.class_count
                ),
            ));
        }
        let image_path = root.join(&item.path);
        if !image_path.exists() {
            return Err(load_error(&image_path, "image file not found"));
        }
        let img = image::open(&image_path)
            .map_err(|e| load_error(&image_path, e.to_string()))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data: Vec<f64> = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        let image = Tensor::new([h as usize, w as usize, 3], data);
        match &shape {
            None => shape = Some(image.shape().to_vec()),
            Some(s) if s.as_slice() != image.shape() => {
                return Err(load_error(
                    &image_path,
                    format!("image shape {:?} differs from {s:?}", image.shape()),
                ))
            }
            _ => {}
        }
        samples.push(Sample { image, label: item.label });
    }
    LabeledDataset::new(samples, manifest.class_count).map_err(|e| load_error(path, e.to_string()))
}

/// Writes every sample as an 8-bit PNG next to a `manifest.json`; returns
/// the manifest path.
pub fn export_manifest(dataset: &LabeledDataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("images"))?;
    let mut items = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.samples().iter().enumerate() {
        let shape = s.image.shape();
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let mut rgb = Vec::with_capacity(h * w * 3);
        for px in s.image.data().chunks(c) {
            for ch in 0..3 {
                let v = px[ch.min(c - 1)];
                rgb.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        let rel = format!("images/{i:06}_c{}.png", s.label);
        image::RgbImage::from_raw(w as u32, h as u32, rgb)
            .expect("buffer sized from shape")
            .save(dir.join(&rel))
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        items.push(ManifestItem { path: rel, label: s.label });
    }
    let manifest = Manifest { class_count: dataset.class_count(), items };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn write_png(path: &Path, shade: u8) {
        image::RgbImage::from_pixel(4, 4, image::Rgb([shade, 0, 255])).save(path).unwrap();
    }

    fn write_manifest(dir: &Path, class_count: usize, items: &[(&str, usize)]) -> PathBuf {
        let manifest = Manifest {
            class_count,
            items: items.iter().map(|(p, l)| ManifestItem { path: p.to_string(), label: *l }).collect(),
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
        path
    }

    #[test]
    fn loads_four_images() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..4 {
            write_png(&dir.path().join(format!("{i}.png")), 60 * i as u8);
        }
        let path = write_manifest(dir.path(), 2, &[("0.png", 0), ("1.png", 1), ("2.png", 0), ("3.png", 1)]);
        let ds = load_manifest(path).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.image_shape(), Some(&[4usize, 4, 3][..]));
        let px = &ds.samples()[1].image.data()[..3];
        assert_eq!(px, &[60.0 / 255.0, 0.0, 1.0]);
    }

    #[test]
    fn missing_file_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), 2, &[("nope.png", 0)]);
        let err = load_manifest(path).unwrap_err();
        assert!(matches!(err, Error::Load { .. }));
        assert!(err.to_string().contains("nope.png"), "{err}");
    }

    #[test]
    fn label_beyond_class_count_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("a.png"), 1);
        let path = write_manifest(dir.path(), 3, &[("a.png", 5)]);
        let err = load_manifest(path).unwrap_err();
        assert!(err.to_string().contains("label 5"), "{err}");
    }

    #[test]
    fn malformed_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, "{\"class_count\": 2, \"items\": [").unwrap();
        assert!(load_manifest(&path).unwrap_err().to_string().contains("malformed"));
    }

    #[test]
    fn export_then_load() {
        let ds = crate::data_stream::make_synthetic(&crate::data_stream::SyntheticSpec {
            classes: 2,
            per_class: 3,
            image_side: 4,
            separation: 2.0,
            seed: 0,
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let back = load_manifest(export_manifest(&ds, dir.path()).unwrap()).unwrap();
        assert_eq!(back.len(), ds.len());
        for (a, b) in ds.samples().iter().zip(back.samples()) {
            assert_eq!(a.label, b.label);
            assert!(a.image.max_abs_diff(&b.image) <= 0.5 / 255.0 + 1e-12);
        }
    }
}
