//! Trigger patterns and poisoned-dataset construction.

use crate::data::{Dataset, ImageSample};
use crate::error::{Error, Result};
use crate::rng::seeded_rng;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

/// Image corner, for placing patch triggers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corner {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

/// An additive perturbation, optionally restricted to a binary mask.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TriggerPattern {
    pub delta: Array3<f32>,
    pub mask: Option<Array3<f32>>,
}

impl TriggerPattern {
    /// Solid square patch of `value` at a corner, the default attack trigger.
    pub fn corner_patch(
        shape: (usize, usize, usize),
        patch: usize,
        value: f32,
        corner: Corner,
    ) -> Self {
        let (c, h, w) = shape;
        let patch = patch.min(h).min(w);
        let (y0, x0) = match corner {
            Corner::TopLeft => (0, 0),
            Corner::TopRight => (0, w - patch),
            Corner::BottomLeft => (h - patch, 0),
            Corner::BottomRight => (h - patch, w - patch),
        };
        let mut delta = Array3::<f32>::zeros(shape);
        let mut mask = Array3::<f32>::zeros(shape);
        for ch in 0..c {
            for y in y0..y0 + patch {
                for x in x0..x0 + patch {
                    delta[(ch, y, x)] = value;
                    mask[(ch, y, x)] = 1.0;
                }
            }
        }
        TriggerPattern {
            delta,
            mask: Some(mask),
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let d = self.delta.dim();
        (d.0, d.1, d.2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("trigger delta must be finite".into()));
        }
        if let Some(mask) = &self.mask {
            if mask.dim() != self.delta.dim() {
                return Err(Error::ShapeMismatch(
                    "trigger mask shape differs from delta".into(),
                ));
            }
            for (d, m) in self.delta.iter().zip(mask.iter()) {
                if *m == 0.0 && *d != 0.0 {
                    return Err(Error::InvalidArgument(
                        "trigger delta must be zero outside the mask".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// `clip(pixels + delta ⊙ mask, 0, 1)` applied in place.
    pub fn apply(&self, pixels: &mut Array3<f32>) {
        match &self.mask {
            Some(mask) => {
                ndarray::Zip::from(pixels)
                    .and(&self.delta)
                    .and(mask)
                    .for_each(|p, d, m| *p = (*p + d * m).clamp(0.0, 1.0));
            }
            None => {
                ndarray::Zip::from(pixels)
                    .and(&self.delta)
                    .for_each(|p, d| *p = (*p + d).clamp(0.0, 1.0));
            }
        }
    }
}

/// The backdoor task: which trigger, which target class, what share of a
/// dataset to poison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoisonSpec {
    pub trigger: TriggerPattern,
    pub target_label: usize,
    pub fraction: f64,
}

impl PoisonSpec {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        self.trigger.validate()?;
        if self.target_label >= n_classes {
            return Err(Error::InvalidArgument(format!(
                "target label {} out of range for {} classes",
                self.target_label, n_classes
            )));
        }
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(Error::InvalidArgument(format!(
                "poison fraction {} outside [0,1]",
                self.fraction
            )));
        }
        Ok(())
    }
}

/// Apply `trigger` to a single image; the label is unchanged.
pub fn inject_trigger(image: &ImageSample, trigger: &TriggerPattern) -> Result<ImageSample> {
    if image.pixels.dim() != trigger.delta.dim() {
        return Err(Error::ShapeMismatch(format!(
            "image {:?} vs trigger {:?}",
            image.pixels.dim(),
            trigger.delta.dim()
        )));
    }
    let mut out = image.clone();
    trigger.apply(&mut out.pixels);
    Ok(out)
}

/// Poison exactly `floor(fraction * len)` samples, chosen uniformly by `seed`:
/// trigger injected and label replaced by the target. Sample order is
/// preserved; untouched samples are bit-identical to the input.
pub fn poison_dataset(dataset: &Dataset, spec: &PoisonSpec, seed: u64) -> Result<Dataset> {
    poison_dataset_indexed(dataset, spec, seed).map(|(ds, _)| ds)
}

/// As [`poison_dataset`], also returning the poisoned indices (ascending).
pub fn poison_dataset_indexed(
    dataset: &Dataset,
    spec: &PoisonSpec,
    seed: u64,
) -> Result<(Dataset, Vec<usize>)> {
    spec.validate(dataset.n_classes)?;
    let n = dataset.len();
    let k = ((spec.fraction * n as f64).floor() as usize).min(n);
    let mut rng = seeded_rng(seed, "poison-selection", 0);
    let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, n, k).into_vec();
    chosen.sort_unstable();
    let mut out = dataset.clone();
    for &i in &chosen {
        let poisoned = inject_trigger(&out.samples[i], &spec.trigger)?;
        out.samples[i] = ImageSample {
            pixels: poisoned.pixels,
            label: spec.target_label,
        };
    }
    Ok((out, chosen))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;

    fn zero_image(hw: usize) -> ImageSample {
        ImageSample {
            pixels: Array3::zeros((3, hw, hw)),
            label: 2,
        }
    }

    #[test]
    fn zero_delta_is_identity() {
        let ds = synthetic_blobs(4, 2, 8, 0);
        let trigger = TriggerPattern {
            delta: Array3::zeros((3, 8, 8)),
            mask: None,
        };
        let out = inject_trigger(&ds.samples[0], &trigger).unwrap();
        assert_eq!(out.pixels, ds.samples[0].pixels);
        assert_eq!(out.label, ds.samples[0].label);
    }

    #[test]
    fn addition_clips_at_one() {
        let mut img = zero_image(4);
        img.pixels[(0, 1, 1)] = 0.9;
        let mut delta = Array3::zeros((3, 4, 4));
        delta[(0, 1, 1)] = 0.5;
        let trigger = TriggerPattern { delta, mask: None };
        let out = inject_trigger(&img, &trigger).unwrap();
        assert_eq!(out.pixels[(0, 1, 1)], 1.0);
    }

    #[test]
    fn corner_patch_hits_exactly_nine_pixels_per_channel() {
        let img = zero_image(8);
        let trigger = TriggerPattern::corner_patch((3, 8, 8), 3, 1.0, Corner::BottomRight);
        trigger.validate().unwrap();
        let out = inject_trigger(&img, &trigger).unwrap();
        for ch in 0..3 {
            let ones = out
                .pixels
                .index_axis(ndarray::Axis(0), ch)
                .iter()
                .filter(|&&v| v == 1.0)
                .count();
            let zeros = out
                .pixels
                .index_axis(ndarray::Axis(0), ch)
                .iter()
                .filter(|&&v| v == 0.0)
                .count();
            assert_eq!(ones, 9);
            assert_eq!(zeros, 64 - 9);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let img = zero_image(8);
        let trigger = TriggerPattern::corner_patch((3, 4, 4), 2, 1.0, Corner::TopLeft);
        assert!(inject_trigger(&img, &trigger).is_err());
    }

    #[test]
    fn poison_fraction_zero_is_identity() {
        let ds = synthetic_blobs(20, 4, 8, 1);
        let spec = PoisonSpec {
            trigger: TriggerPattern::corner_patch((3, 8, 8), 2, 1.0, Corner::BottomRight),
            target_label: 0,
            fraction: 0.0,
        };
        let out = poison_dataset(&ds, &spec, 7).unwrap();
        for (a, b) in out.samples.iter().zip(&ds.samples) {
            assert_eq!(a.pixels, b.pixels);
            assert_eq!(a.label, b.label);
        }
    }

    #[test]
    fn poison_fraction_one_hits_everything() {
        let ds = synthetic_blobs(20, 4, 8, 1);
        let spec = PoisonSpec {
            trigger: TriggerPattern::corner_patch((3, 8, 8), 2, 1.0, Corner::BottomRight),
            target_label: 0,
            fraction: 1.0,
        };
        let out = poison_dataset(&ds, &spec, 7).unwrap();
        assert!(out.samples.iter().all(|s| s.label == 0));
        assert!(out
            .samples
            .iter()
            .all(|s| s.pixels[(0, 7, 7)] == 1.0 && s.pixels[(2, 6, 6)] == 1.0));
    }

    #[test]
    fn poison_count_is_floor_of_fraction() {
        let ds = synthetic_blobs(100, 4, 8, 1);
        let spec = PoisonSpec {
            trigger: TriggerPattern::corner_patch((3, 8, 8), 2, 1.0, Corner::BottomRight),
            target_label: 0,
            fraction: 0.3,
        };
        let (out, idx) = poison_dataset_indexed(&ds, &spec, 3).unwrap();
        assert_eq!(idx.len(), 30);
        // untouched samples bit-identical
        let poisoned: std::collections::HashSet<_> = idx.iter().collect();
        for (i, (a, b)) in out.samples.iter().zip(&ds.samples).enumerate() {
            if poisoned.contains(&i) {
                assert_eq!(a.label, 0);
            } else {
                assert_eq!(a.pixels, b.pixels);
                assert_eq!(a.label, b.label);
            }
        }
        // deterministic
        let (out2, idx2) = poison_dataset_indexed(&ds, &spec, 3).unwrap();
        assert_eq!(idx, idx2);
        for (a, b) in out.samples.iter().zip(&out2.samples) {
            assert_eq!(a.pixels, b.pixels);
        }
    }

    #[test]
    fn delta_outside_mask_is_rejected() {
        let mut delta = Array3::zeros((1, 2, 2));
        delta[(0, 0, 0)] = 0.5;
        let mask = Array3::zeros((1, 2, 2));
        let t = TriggerPattern {
            delta,
            mask: Some(mask),
        };
        assert!(t.validate().is_err());
    }
}
