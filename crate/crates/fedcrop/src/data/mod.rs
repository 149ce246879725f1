//! Dataset loading and construction: a synthetic blob set for fast runs, a
//! manifest-driven on-disk loader, and a CIFAR-10 binary reader.

mod partition;
mod poison;

pub use partition::{dirichlet_partition, dirichlet_partition_with, PartitionPlan};
pub use poison::{inject_trigger, poison_dataset, poison_dataset_indexed, Corner, PoisonSpec, TriggerPattern};

use crate::error::{Error, Result};
use crate::rng::seeded_rng;
use ndarray::{Array3, Array4};
use rand::Rng;
use serde::Deserialize;
use std::fs;
use std::io::Read;
use std::path::Path;

/// One image with its class label. Pixels are `(channels, height, width)`
/// floats in `[0,1]`.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub pixels: Array3<f32>,
    pub label: usize,
}

impl ImageSample {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if self.label >= n_classes {
            return Err(Error::InvalidArgument(format!(
                "label {} out of range for {} classes",
                self.label, n_classes
            )));
        }
        if self.pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidArgument(
                "pixel values must be finite and in [0,1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(samples: Vec<ImageSample>, n_classes: usize) -> Self {
        Dataset { samples, n_classes }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(channels, height, width)` of the samples.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let d = self.samples[0].pixels.dim();
        (d.0, d.1, d.2)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            n_classes: self.n_classes,
        }
    }

    /// First `n` samples (used to carve public/eval splits deterministically).
    pub fn take(&self, n: usize) -> Dataset {
        Dataset {
            samples: self.samples.iter().take(n).cloned().collect(),
            n_classes: self.n_classes,
        }
    }

    pub fn skip(&self, n: usize) -> Dataset {
        Dataset {
            samples: self.samples.iter().skip(n).cloned().collect(),
            n_classes: self.n_classes,
        }
    }

    /// Stack samples `indices` into an `(n, c, h, w)` batch plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Array4<f32>, Vec<usize>) {
        let (c, h, w) = self.image_shape();
        let mut x = Array4::<f32>::zeros((indices.len(), c, h, w));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            let s = &self.samples[i];
            x.index_axis_mut(ndarray::Axis(0), row).assign(&s.pixels);
            labels.push(s.label);
        }
        (x, labels)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let shape = self.samples[0].pixels.dim();
        for s in &self.samples {
            if s.pixels.dim() != shape {
                return Err(Error::ShapeMismatch(format!(
                    "sample shape {:?} != {:?}",
                    s.pixels.dim(),
                    shape
                )));
            }
            s.validate(self.n_classes)?;
        }
        Ok(())
    }
}

/// Synthetic Gaussian-blob images: class k places a coloured blob at a
/// class-specific position over a noisy background. Learnable by a small CNN
/// in a few epochs, which keeps tests fast.
pub fn synthetic_blobs(n: usize, n_classes: usize, hw: usize, seed: u64) -> Dataset {
    assert!(n_classes <= 12, "blob palette supports up to 12 classes");
    let palette: [[f32; 3]; 12] = [
        [0.9, 0.2, 0.2],
        [0.2, 0.9, 0.2],
        [0.2, 0.2, 0.9],
        [0.9, 0.9, 0.2],
        [0.9, 0.2, 0.9],
        [0.2, 0.9, 0.9],
        [0.9, 0.6, 0.2],
        [0.6, 0.2, 0.9],
        [0.4, 0.9, 0.5],
        [0.8, 0.8, 0.8],
        [0.5, 0.5, 0.2],
        [0.2, 0.5, 0.5],
    ];
    let mut rng = seeded_rng(seed, "blobs", 0);
    let sigma = hw as f32 / 6.0;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % n_classes;
        let col = label % 3;
        let row = label / 3;
        let cx = (0.25 + 0.25 * col as f32) * hw as f32;
        let cy = (0.2 + 0.2 * row as f32) * hw as f32;
        // small positional jitter so classes are clouds, not points
        let jx: f32 = rng.random_range(-1.0..1.0);
        let jy: f32 = rng.random_range(-1.0..1.0);
        let color = palette[label];
        let mut pixels = Array3::<f32>::zeros((3, hw, hw));
        for y in 0..hw {
            for x in 0..hw {
                let dx = x as f32 - (cx + jx);
                let dy = y as f32 - (cy + jy);
                let g = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                for ch in 0..3 {
                    let noise: f32 = rng.random_range(-0.05..0.05);
                    let v = 0.1 + color[ch] * g + noise;
                    pixels[(ch, y, x)] = v.clamp(0.0, 1.0);
                }
            }
        }
        samples.push(ImageSample { pixels, label });
    }
    Dataset::new(samples, n_classes)
}

#[derive(Debug, Deserialize)]
struct ManifestEntry {
    file: String,
    label: usize,
    /// Required for raw `.bin` tensors: `(channels, height, width)`.
    #[serde(default)]
    shape: Option<(usize, usize, usize)>,
}

/// Load a dataset from a directory holding `manifest.json` plus image files.
///
/// Entries may be PNG images (decoded to RGB and scaled to `[0,1]`) or raw
/// little-endian f32 tensors (`.bin`, with `shape` given in the manifest).
pub fn load_manifest_dir(dir: &Path, n_classes: usize) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
    if entries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut samples = Vec::with_capacity(entries.len());
    for entry in &entries {
        let path = dir.join(&entry.file);
        let pixels = if entry.file.ends_with(".bin") {
            let (c, h, w) = entry.shape.ok_or_else(|| {
                Error::InvalidArgument(format!("manifest entry {} missing shape", entry.file))
            })?;
            let mut buf = Vec::new();
            fs::File::open(&path)?.read_to_end(&mut buf)?;
            if buf.len() != c * h * w * 4 {
                return Err(Error::ShapeMismatch(format!(
                    "{}: expected {} bytes, found {}",
                    entry.file,
                    c * h * w * 4,
                    buf.len()
                )));
            }
            let values: Vec<f32> = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]).clamp(0.0, 1.0))
                .collect();
            Array3::from_shape_vec((c, h, w), values)
                .map_err(|e| Error::ShapeMismatch(e.to_string()))?
        } else {
            let img = image::open(&path)
                .map_err(|e| Error::InvalidArgument(format!("{}: {e}", entry.file)))?
                .to_rgb8();
            let (w, h) = img.dimensions();
            let mut pixels = Array3::<f32>::zeros((3, h as usize, w as usize));
            for (x, y, p) in img.enumerate_pixels() {
                for ch in 0..3 {
                    pixels[(ch, y as usize, x as usize)] = p.0[ch] as f32 / 255.0;
                }
            }
            pixels
        };
        samples.push(ImageSample {
            pixels,
            label: entry.label,
        });
    }
    let ds = Dataset::new(samples, n_classes);
    ds.validate()?;
    Ok(ds)
}

/// Load the CIFAR-10 binary format (3073-byte records) from `dir`.
///
/// `train=true` reads `data_batch_1..5.bin`, otherwise `test_batch.bin`.
pub fn load_cifar10(dir: &Path, train: bool) -> Result<Dataset> {
    let files: Vec<String> = if train {
        (1..=5).map(|i| format!("data_batch_{i}.bin")).collect()
    } else {
        vec!["test_batch.bin".to_string()]
    };
    let mut samples = Vec::new();
    for name in files {
        let path = dir.join(&name);
        let mut buf = Vec::new();
        fs::File::open(&path)?.read_to_end(&mut buf)?;
        if buf.len() % 3073 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{name}: length {} is not a multiple of 3073",
                buf.len()
            )));
        }
        for record in buf.chunks_exact(3073) {
            let label = record[0] as usize;
            let mut pixels = Array3::<f32>::zeros((3, 32, 32));
            for ch in 0..3 {
                for y in 0..32 {
                    for x in 0..32 {
                        pixels[(ch, y, x)] =
                            record[1 + ch * 1024 + y * 32 + x] as f32 / 255.0;
                    }
                }
            }
            samples.push(ImageSample { pixels, label });
        }
    }
    let ds = Dataset::new(samples, 10);
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn blobs_are_valid_and_deterministic() {
        let a = synthetic_blobs(50, 10, 16, 3);
        let b = synthetic_blobs(50, 10, 16, 3);
        a.validate().unwrap();
        assert_eq!(a.len(), 50);
        assert_eq!(a.image_shape(), (3, 16, 16));
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.label, y.label);
            assert_eq!(x.pixels, y.pixels);
        }
        let c = synthetic_blobs(50, 10, 16, 4);
        assert_ne!(a.samples[0].pixels, c.samples[0].pixels);
    }

    #[test]
    fn cifar_reader_parses_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut record = vec![0u8; 3073];
        record[0] = 7; // label
        record[1] = 255; // first red pixel
        let mut record2 = vec![0u8; 3073];
        record2[0] = 3;
        let mut f = fs::File::create(dir.path().join("test_batch.bin")).unwrap();
        f.write_all(&record).unwrap();
        f.write_all(&record2).unwrap();
        drop(f);
        let ds = load_cifar10(dir.path(), false).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.samples[0].label, 7);
        assert_eq!(ds.samples[1].label, 3);
        assert!((ds.samples[0].pixels[(0, 0, 0)] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn manifest_loader_reads_bin_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let values: Vec<f32> = (0..12).map(|i| i as f32 / 12.0).collect();
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.path().join("img0.bin"), &bytes).unwrap();
        fs::write(
            dir.path().join("manifest.json"),
            r#"[{"file": "img0.bin", "label": 1, "shape": [3, 2, 2]}]"#,
        )
        .unwrap();
        let ds = load_manifest_dir(dir.path(), 2).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.samples[0].label, 1);
        assert_eq!(ds.samples[0].pixels.dim(), (3, 2, 2));
        assert!((ds.samples[0].pixels[(0, 0, 1)] - 1.0 / 12.0).abs() < 1e-6);
    }

    #[test]
    fn manifest_loader_rejects_bad_labels() {
        let dir = tempfile::tempdir().unwrap();
        let bytes: Vec<u8> = (0..12).flat_map(|_| 0.0f32.to_le_bytes()).collect();
        fs::write(dir.path().join("img0.bin"), &bytes).unwrap();
        fs::write(
            dir.path().join("manifest.json"),
            r#"[{"file": "img0.bin", "label": 9, "shape": [3, 2, 2]}]"#,
        )
        .unwrap();
        assert!(load_manifest_dir(dir.path(), 2).is_err());
    }
}
