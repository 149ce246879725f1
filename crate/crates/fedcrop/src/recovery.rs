//! Trigger recovery and backdoor mitigation.
//!
//! A small image-to-image generator is trained against the frozen suspect
//! model: `G(x)` is added to probe images and the suspect's cross-entropy
//! toward a candidate target class drives the generator, with an L2 penalty
//! keeping the perturbation small. A backdoored class admits a tiny
//! perturbation that flips predictions; clean classes need large ones, which
//! is what the per-class target search ranks. Mitigation retrains the suspect
//! on clean data where a share of samples carry the recovered trigger but
//! keep their true labels.

use crate::data::{Dataset, TriggerPattern};
use crate::error::{Error, Result};
use crate::model::{local_train, unflatten_params, ModelSpec, ParameterVector, TrainConfig};
use crate::nn::{argmax_rows, clip_grad_norm, softmax_cross_entropy, Batch, Conv2d, Layer, Network, Sgd};
use crate::rng::{derive_seed, seeded_rng};
use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Which class the generator should flip predictions toward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSelection {
    /// Rank every class by recovered perturbation norm.
    Search,
    Class(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub target_class: TargetSelection,
    /// Weight of the L2 perturbation penalty.
    pub lambda_norm: f64,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Flip rate below this flags the recovery `unconverged`.
    pub flip_threshold: f64,
    pub batch_size: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            target_class: TargetSelection::Search,
            lambda_norm: 0.01,
            steps: 60,
            lr: 0.05,
            seed: 0,
            flip_threshold: 0.7,
            batch_size: 16,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_norm < 0.0 {
            return Err(Error::InvalidArgument("lambda_norm must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_threshold) {
            return Err(Error::InvalidArgument("flip_threshold must be in [0,1]".into()));
        }
        if self.batch_size == 0 || self.lr <= 0.0 {
            return Err(Error::InvalidArgument("bad generator batch_size/lr".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> GeneratorConfig {
        GeneratorConfig { seed, ..self.clone() }
    }
}

/// Result of a recovery run: the generator itself, its averaged pattern, and
/// quality statistics over the probe set.
#[derive(Debug, Clone)]
pub struct RecoveredTrigger {
    pub generator: Network,
    /// Average `G(x)` over the probes — the fixed-pattern view of the trigger.
    pub mean_pattern: TriggerPattern,
    pub target_class: usize,
    /// Fraction of probes predicted as the target after perturbation.
    pub flip_rate: f64,
    /// Mean per-image L2 norm of `G(x)` over the probes.
    pub mean_norm: f64,
    /// False when `flip_rate < flip_threshold`.
    pub converged: bool,
}

impl RecoveredTrigger {
    /// Apply the generator to a batch: `clip(x + G(x), 0, 1)`.
    pub fn perturb(&self, x: &Array4<f32>) -> Array4<f32> {
        let g = self.generator.forward_im(x).expect_im();
        let mut out = x + &g;
        out.mapv_inplace(|v| v.clamp(0.0, 1.0));
        out
    }
}

/// Encoder–decoder perturbation generator: 3 down / 3 up conv blocks with a
/// tanh output in [-1, 1].
pub fn build_generator(input_shape: (usize, usize, usize), seed: u64) -> Network {
    let (c, h, w) = input_shape;
    assert!(h % 4 == 0 && w % 4 == 0, "generator needs H,W divisible by 4");
    let mut rng = seeded_rng(seed, "generator-init", 0);
    Network::new(
        vec![
            Layer::Conv(Conv2d::new("g1", c, 8, 3, 1, 1, &mut rng)),
            Layer::Relu,
            Layer::MaxPool2,
            Layer::Conv(Conv2d::new("g2", 8, 16, 3, 1, 1, &mut rng)),
            Layer::Relu,
            Layer::MaxPool2,
            Layer::Conv(Conv2d::new("g3", 16, 16, 3, 1, 1, &mut rng)),
            Layer::Relu,
            Layer::Upsample2,
            Layer::Conv(Conv2d::new("g4", 16, 8, 3, 1, 1, &mut rng)),
            Layer::Relu,
            Layer::Upsample2,
            Layer::Conv(Conv2d::new("g5", 8, 8, 3, 1, 1, &mut rng)),
            Layer::Relu,
            Layer::Conv(Conv2d::new("g6", 8, c, 3, 1, 1, &mut rng)),
            Layer::Tanh,
        ],
        input_shape,
    )
}

/// Train a generator against the frozen suspect so that `clip(x + G(x))` is
/// predicted as `target`, with an L2 penalty of weight `lambda_norm` on the
/// perturbation. Labels in `probe_images` are ignored.
pub fn train_trigger_generator(
    spec: &ModelSpec,
    suspect: &ParameterVector,
    probe_images: &Dataset,
    target: usize,
    cfg: &GeneratorConfig,
) -> Result<RecoveredTrigger> {
    cfg.validate()?;
    if probe_images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if target >= spec.n_classes {
        return Err(Error::InvalidArgument(format!(
            "target class {target} out of range"
        )));
    }
    let mut suspect_net = spec.build(0);
    unflatten_params(suspect, &mut suspect_net)?;
    let mut gen = build_generator(spec.input_shape, derive_seed(cfg.seed, "gen", target as u64));
    let mut opt = Sgd::new(cfg.lr as f32, 0.0);

    let n = probe_images.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeded_rng(cfg.seed, "probe-shuffle", target as u64);
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    for step in 0..cfg.steps {
        // next batch of probe indices, reshuffling on wrap
        let mut batch_idx = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size.min(n) {
            if cursor == n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch_idx.push(order[cursor]);
            cursor += 1;
        }
        let (x, _) = probe_images.batch(&batch_idx);
        let (g_out, g_trace) = gen.forward_trace(Batch::Im(x.clone()));
        let g = g_out.expect_im();
        let raw = &x + &g;
        let clipped = raw.mapv(|v| v.clamp(0.0, 1.0));
        let (logits, s_trace) = suspect_net.forward_trace(Batch::Im(clipped));
        let labels = vec![target; batch_idx.len()];
        let (ce, dlogits) = softmax_cross_entropy(&logits.expect_flat(), &labels);

        // L2 penalty: lambda * mean_i ||G_i||
        let bsz = batch_idx.len();
        let mut norms = Vec::with_capacity(bsz);
        for i in 0..bsz {
            let gi = g.index_axis(Axis(0), i);
            norms.push(gi.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt());
        }
        let penalty = cfg.lambda_norm * norms.iter().sum::<f64>() / bsz as f64;
        let loss = ce + penalty;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch: 0, batch: step });
        }

        // gradient wrt G: suspect input grad masked by the clip, plus penalty
        let mut dg = suspect_net
            .backward_input(&s_trace, Batch::Flat(dlogits))
            .expect_im();
        ndarray::Zip::from(&mut dg).and(&raw).for_each(|d, r| {
            if *r < 0.0 || *r > 1.0 {
                *d = 0.0;
            }
        });
        let scale = cfg.lambda_norm / bsz as f64;
        for i in 0..bsz {
            let denom = norms[i].max(1e-8);
            let mut dgi = dg.index_axis_mut(Axis(0), i);
            let gi = g.index_axis(Axis(0), i);
            ndarray::Zip::from(&mut dgi).and(&gi).for_each(|d, v| {
                *d += (scale * (*v as f64) / denom) as f32;
            });
        }
        // elementwise clip keeps extreme penalty weights from oscillating
        // the tanh output into saturation
        dg.mapv_inplace(|v| v.clamp(-1.0, 1.0));
        let mut grads = gen.zero_grads();
        gen.backward(&g_trace, Batch::Im(dg), &mut grads);
        clip_grad_norm(&mut grads, 5.0);
        opt.step(&mut gen, &grads);
    }

    // final statistics over the whole probe set
    let all: Vec<usize> = (0..n).collect();
    let mut flips = 0usize;
    let mut norm_sum = 0.0f64;
    let (c, h, w) = spec.input_shape;
    let mut pattern_sum = Array3::<f64>::zeros((c, h, w));
    for chunk in all.chunks(256) {
        let (x, _) = probe_images.batch(chunk);
        let g = gen.forward_im(&x).expect_im();
        let clipped = (&x + &g).mapv(|v: f32| v.clamp(0.0, 1.0));
        let logits = suspect_net.forward(Batch::Im(clipped)).expect_flat();
        flips += argmax_rows(&logits).iter().filter(|&&p| p == target).count();
        for i in 0..chunk.len() {
            let gi = g.index_axis(Axis(0), i);
            norm_sum += gi.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            ndarray::Zip::from(&mut pattern_sum).and(&gi).for_each(|s, v| *s += *v as f64);
        }
    }
    let flip_rate = flips as f64 / n as f64;
    let mean_norm = norm_sum / n as f64;
    let mean_pattern = TriggerPattern {
        delta: pattern_sum.mapv(|v| (v / n as f64) as f32),
        mask: None,
    };
    Ok(RecoveredTrigger {
        generator: gen,
        mean_pattern,
        target_class: target,
        flip_rate,
        mean_norm,
        converged: flip_rate >= cfg.flip_threshold,
    })
}

/// Run recovery once per class and pick the backdoor target: the smallest
/// mean perturbation norm among classes whose flip rate clears the threshold.
/// If no class converges, the max-flip-rate recovery is returned flagged
/// `unconverged`.
pub fn infer_target_class(
    spec: &ModelSpec,
    suspect: &ParameterVector,
    probe_images: &Dataset,
    cfg: &GeneratorConfig,
) -> Result<(usize, RecoveredTrigger)> {
    if spec.n_classes < 2 {
        return Err(Error::InvalidArgument("target search needs >= 2 classes".into()));
    }
    if let TargetSelection::Class(k) = cfg.target_class {
        let rec = train_trigger_generator(spec, suspect, probe_images, k, cfg)?;
        return Ok((k, rec));
    }
    let recoveries: Vec<RecoveredTrigger> = (0..spec.n_classes)
        .into_par_iter()
        .map(|class| {
            let class_cfg = cfg.with_seed(derive_seed(cfg.seed, "class-search", class as u64));
            train_trigger_generator(spec, suspect, probe_images, class, &class_cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let winner = recoveries
        .iter()
        .enumerate()
        .filter(|(_, r)| r.converged)
        .min_by(|(_, a), (_, b)| a.mean_norm.partial_cmp(&b.mean_norm).expect("finite norms"))
        .map(|(k, _)| k);
    let chosen = match winner {
        Some(k) => k,
        None => recoveries
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.flip_rate.partial_cmp(&b.flip_rate).expect("finite rates"))
            .map(|(k, _)| k)
            .expect("at least two classes"),
    };
    let mut rec = recoveries.into_iter().nth(chosen).expect("chosen in range");
    rec.target_class = chosen;
    Ok((chosen, rec))
}

impl RecoveredTrigger {
    /// Persist as a lossless 16-bit PNG of the mean pattern (values mapped
    /// from [-1,1] to the full u16 range) plus a JSON sidecar with the
    /// statistics and config.
    pub fn save(&self, dir: &std::path::Path, cfg: &GeneratorConfig) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let (c, h, w) = self.mean_pattern.shape();
        if c != 3 {
            return Err(Error::InvalidArgument(format!(
                "pattern export expects 3 channels, got {c}"
            )));
        }
        let mut img = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(w as u32, h as u32);
        for (x, y, p) in img.enumerate_pixels_mut() {
            let map = |v: f32| -> u16 {
                (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * u16::MAX as f32).round() as u16
            };
            *p = image::Rgb([
                map(self.mean_pattern.delta[(0, y as usize, x as usize)]),
                map(self.mean_pattern.delta[(1, y as usize, x as usize)]),
                map(self.mean_pattern.delta[(2, y as usize, x as usize)]),
            ]);
        }
        img.save(dir.join("mean_pattern.png"))
            .map_err(|e| Error::InvalidArgument(format!("pattern png: {e}")))?;
        let sidecar = serde_json::json!({
            "target_class": self.target_class,
            "flip_rate": self.flip_rate,
            "mean_norm": self.mean_norm,
            "converged": self.converged,
            "config": cfg,
        });
        std::fs::write(
            dir.join("recovered.json"),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        Ok(())
    }
}

/// Mitigation retraining: fine-tune the suspect on clean data where a
/// `augment_fraction` share of samples carry the recovered trigger with their
/// original labels kept.
pub fn repair_model(
    spec: &ModelSpec,
    suspect: &ParameterVector,
    clean_set: &Dataset,
    recovered: &RecoveredTrigger,
    cfg: &TrainConfig,
    augment_fraction: f64,
) -> Result<ParameterVector> {
    if !(0.0..=1.0).contains(&augment_fraction) {
        return Err(Error::InvalidArgument(
            "augment_fraction must be in [0,1]".into(),
        ));
    }
    if clean_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut augmented = clean_set.clone();
    let n = augmented.len();
    let k = (augment_fraction * n as f64).floor() as usize;
    if k > 0 {
        let mut rng = seeded_rng(cfg.seed, "repair-augment", 0);
        let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, n, k).into_vec();
        chosen.sort_unstable();
        for block in chosen.chunks(256) {
            let (x, _) = augmented.batch(block);
            let perturbed = recovered.perturb(&x);
            for (row, &i) in block.iter().enumerate() {
                augmented.samples[i].pixels = perturbed.index_axis(Axis(0), row).to_owned();
                // label deliberately unchanged
            }
        }
    }
    local_train(spec, suspect, &augmented, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{poison_dataset, synthetic_blobs, Corner, PoisonSpec};
    use crate::model::{backdoor_accuracy, evaluate, Architecture};

    fn toy_spec() -> ModelSpec {
        ModelSpec::new(Architecture::Smallcnn, (3, 8, 8), 4)
    }

    fn toy_trigger() -> TriggerPattern {
        TriggerPattern::corner_patch((3, 8, 8), 2, 1.0, Corner::BottomRight)
    }

    /// Train a deliberately backdoored model on poisoned blobs.
    fn backdoored_model(spec: &ModelSpec, target: usize) -> (ParameterVector, Dataset) {
        let data = synthetic_blobs(240, 4, 8, 11);
        let poison = PoisonSpec {
            trigger: toy_trigger(),
            target_label: target,
            fraction: 0.4,
        };
        let poisoned = poison_dataset(&data, &poison, 5).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.08,
            epochs: 5,
            batch_size: 16,
            seed: 2,
            momentum: 0.0,
        };
        let start = spec.init_params(1);
        let trained = local_train(spec, &start, &poisoned, &cfg).unwrap();
        (trained, data)
    }

    #[test]
    fn generator_training_is_deterministic() {
        let spec = toy_spec();
        let (suspect, data) = backdoored_model(&spec, 0);
        let probes = data.take(60);
        let cfg = GeneratorConfig {
            steps: 10,
            batch_size: 8,
            seed: 7,
            ..GeneratorConfig::default()
        };
        let a = train_trigger_generator(&spec, &suspect, &probes, 0, &cfg).unwrap();
        let b = train_trigger_generator(&spec, &suspect, &probes, 0, &cfg).unwrap();
        assert_eq!(a.flip_rate, b.flip_rate);
        assert_eq!(a.mean_norm, b.mean_norm);
        assert_eq!(a.mean_pattern.delta, b.mean_pattern.delta);
    }

    #[test]
    fn recovers_planted_backdoor_with_high_flip_rate() {
        let spec = toy_spec();
        let (suspect, data) = backdoored_model(&spec, 0);
        // sanity: the backdoor is actually implanted
        let poison = PoisonSpec {
            trigger: toy_trigger(),
            target_label: 0,
            fraction: 0.4,
        };
        let asr = backdoor_accuracy(&spec, &suspect, &data, &poison).unwrap();
        assert!(asr > 0.8, "backdoor not implanted (asr={asr})");

        let probes = data.take(80);
        let cfg = GeneratorConfig {
            steps: 60,
            batch_size: 16,
            lr: 0.05,
            seed: 3,
            ..GeneratorConfig::default()
        };
        let rec = train_trigger_generator(&spec, &suspect, &probes, 0, &cfg).unwrap();
        assert!(rec.flip_rate >= 0.7, "flip rate {}", rec.flip_rate);
        assert!(rec.converged);
        assert_eq!(rec.mean_pattern.shape(), (3, 8, 8));
    }

    #[test]
    fn heavy_norm_penalty_shrinks_the_perturbation() {
        let spec = toy_spec();
        let (suspect, data) = backdoored_model(&spec, 0);
        let probes = data.take(48);
        let base = GeneratorConfig {
            steps: 30,
            batch_size: 16,
            seed: 5,
            lambda_norm: 0.0,
            ..GeneratorConfig::default()
        };
        let free = train_trigger_generator(&spec, &suspect, &probes, 0, &base).unwrap();
        let squeezed = train_trigger_generator(
            &spec,
            &suspect,
            &probes,
            0,
            &GeneratorConfig {
                lambda_norm: 1e6,
                ..base
            },
        )
        .unwrap();
        assert!(
            squeezed.mean_norm < free.mean_norm,
            "penalized {} vs free {}",
            squeezed.mean_norm,
            free.mean_norm
        );
    }

    #[test]
    fn target_search_finds_the_true_class() {
        let spec = toy_spec();
        let (suspect, data) = backdoored_model(&spec, 2);
        let probes = data.take(60);
        let cfg = GeneratorConfig {
            steps: 50,
            batch_size: 16,
            seed: 9,
            flip_threshold: 0.6,
            ..GeneratorConfig::default()
        };
        let (class, rec) = infer_target_class(&spec, &suspect, &probes, &cfg).unwrap();
        assert_eq!(class, 2);
        assert!(rec.flip_rate >= 0.6);
        // deterministic
        let (class2, rec2) = infer_target_class(&spec, &suspect, &probes, &cfg).unwrap();
        assert_eq!(class, class2);
        assert_eq!(rec.mean_norm, rec2.mean_norm);
    }

    #[test]
    fn fixed_target_skips_the_search() {
        let spec = toy_spec();
        let (suspect, data) = backdoored_model(&spec, 1);
        let probes = data.take(40);
        let cfg = GeneratorConfig {
            target_class: TargetSelection::Class(1),
            steps: 20,
            batch_size: 8,
            seed: 4,
            ..GeneratorConfig::default()
        };
        let (class, _) = infer_target_class(&spec, &suspect, &probes, &cfg).unwrap();
        assert_eq!(class, 1);
    }

    #[test]
    fn recovered_trigger_persists_with_sidecar() {
        let spec = toy_spec();
        let (suspect, data) = backdoored_model(&spec, 0);
        let cfg = GeneratorConfig {
            steps: 5,
            batch_size: 8,
            ..GeneratorConfig::default()
        };
        let rec = train_trigger_generator(&spec, &suspect, &data.take(16), 0, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        rec.save(dir.path(), &cfg).unwrap();
        assert!(dir.path().join("mean_pattern.png").exists());
        let sidecar: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("recovered.json")).unwrap())
                .unwrap();
        assert_eq!(sidecar["target_class"], 0);
        assert!(sidecar["flip_rate"].is_number());
        assert!(sidecar["mean_norm"].is_number());
        // lossless container: PNG decodes to the same dimensions
        let img = image::open(dir.path().join("mean_pattern.png")).unwrap();
        assert_eq!(img.width(), 8);
        assert_eq!(img.height(), 8);
    }

    #[test]
    fn repair_with_zero_epochs_is_identity() {
        let spec = toy_spec();
        let (suspect, data) = backdoored_model(&spec, 0);
        let probes = data.take(24);
        let rec = train_trigger_generator(
            &spec,
            &suspect,
            &probes,
            0,
            &GeneratorConfig {
                steps: 5,
                batch_size: 8,
                ..GeneratorConfig::default()
            },
        )
        .unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 0,
            batch_size: 16,
            seed: 0,
            momentum: 0.0,
        };
        let out = repair_model(&spec, &suspect, &data.take(50), &rec, &cfg, 0.5).unwrap();
        assert_eq!(out.values, suspect.values);
    }

    #[test]
    fn zero_augmentation_reduces_to_plain_fine_tuning() {
        let spec = toy_spec();
        let (suspect, data) = backdoored_model(&spec, 0);
        let probes = data.take(24);
        let rec = train_trigger_generator(
            &spec,
            &suspect,
            &probes,
            0,
            &GeneratorConfig {
                steps: 5,
                batch_size: 8,
                ..GeneratorConfig::default()
            },
        )
        .unwrap();
        let clean = data.take(60);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 2,
            batch_size: 16,
            seed: 8,
            momentum: 0.0,
        };
        let repaired = repair_model(&spec, &suspect, &clean, &rec, &cfg, 0.0).unwrap();
        let fine_tuned = local_train(&spec, &suspect, &clean, &cfg).unwrap();
        assert_eq!(repaired.values, fine_tuned.values);
    }

    #[test]
    fn repair_suppresses_the_backdoor() {
        let spec = toy_spec();
        let (suspect, data) = backdoored_model(&spec, 0);
        let poison = PoisonSpec {
            trigger: toy_trigger(),
            target_label: 0,
            fraction: 0.4,
        };
        let before = backdoor_accuracy(&spec, &suspect, &data, &poison).unwrap();
        assert!(before > 0.8);

        let probes = data.take(80);
        let rec = train_trigger_generator(
            &spec,
            &suspect,
            &probes,
            0,
            &GeneratorConfig {
                steps: 60,
                batch_size: 16,
                seed: 6,
                ..GeneratorConfig::default()
            },
        )
        .unwrap();
        let clean = data.take(120);
        let cfg = TrainConfig {
            learning_rate: 0.08,
            epochs: 6,
            batch_size: 16,
            seed: 13,
            momentum: 0.0,
        };
        let repaired = repair_model(&spec, &suspect, &clean, &rec, &cfg, 0.5).unwrap();
        let after = backdoor_accuracy(&spec, &repaired, &data, &poison).unwrap();
        let clean_acc = evaluate(&spec, &repaired, &data).unwrap();
        assert!(
            after < 0.3,
            "backdoor should fall below 0.3, got {after} (before {before})"
        );
        assert!(clean_acc > 0.6, "main accuracy collapsed to {clean_acc}");
    }
}
