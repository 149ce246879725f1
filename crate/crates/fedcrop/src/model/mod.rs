//! Classifier architectures, the flat parameter codec, local SGD training,
//! and evaluation.

use crate::data::{Dataset, PoisonSpec};
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, softmax_cross_entropy, Batch, Conv2d, Dense, Layer, Network, ResidualBlock, Sgd};
use crate::rng::seeded_rng;
use ndarray::Array4;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Ordered `(name, shape)` list defining how a model flattens into a vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout(pub Vec<LayoutEntry>);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl Layout {
    pub fn param_count(&self) -> usize {
        self.0.iter().map(|e| e.shape.iter().product::<usize>()).sum()
    }

    /// Byte range of entry `name` within the flat vector.
    pub fn range_of(&self, name: &str) -> Option<std::ops::Range<usize>> {
        let mut offset = 0usize;
        for entry in &self.0 {
            let len = entry.shape.iter().product::<usize>();
            if entry.name == name {
                return Some(offset..offset + len);
            }
            offset += len;
        }
        None
    }
}

/// Flat weight vector plus the layout that gives it meaning. The unit of
/// client/server exchange.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParameterVector {
    pub values: Vec<f32>,
    pub layout: Layout,
}

impl ParameterVector {
    pub fn compatible_with(&self, other: &ParameterVector) -> bool {
        self.layout == other.layout
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Element-wise difference (`self - other`); layouts must match.
    pub fn delta(&self, other: &ParameterVector) -> Result<ParameterVector> {
        if !self.compatible_with(other) {
            return Err(Error::LayoutMismatch("delta of incompatible layouts".into()));
        }
        Ok(ParameterVector {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
            layout: self.layout.clone(),
        })
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt()
    }
}

/// Extract a model's parameters into a flat vector with a deterministic layout.
pub fn flatten_params(net: &Network) -> ParameterVector {
    let mut entries = Vec::new();
    let mut values = Vec::new();
    net.visit_params(&mut |name, shape, vals| {
        entries.push(LayoutEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
        });
        values.extend_from_slice(vals);
    });
    ParameterVector {
        values,
        layout: Layout(entries),
    }
}

/// Write a flat vector back into a model. The layout must match exactly.
pub fn unflatten_params(vec: &ParameterVector, net: &mut Network) -> Result<()> {
    let expected = flatten_params(net).layout;
    if expected != vec.layout {
        return Err(Error::LayoutMismatch(format!(
            "vector layout does not match model ({} vs {} entries)",
            vec.layout.0.len(),
            expected.0.len()
        )));
    }
    let mut offset = 0usize;
    net.visit_params_mut(&mut |_, vals| {
        vals.copy_from_slice(&vec.values[offset..offset + vals.len()]);
        offset += vals.len();
    });
    Ok(())
}

/// Registered classifier architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Two conv blocks and two dense layers; ~100K parameters on 16x16 input.
    Smallcnn,
    /// Reduced-width 18-layer residual net; downsamples with strided convs
    /// instead of pooling.
    Resnet18Lite,
}

impl Architecture {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "smallcnn" => Ok(Architecture::Smallcnn),
            "resnet18-lite" => Ok(Architecture::Resnet18Lite),
            other => Err(Error::InvalidArgument(format!(
                "unknown architecture '{other}' (expected smallcnn | resnet18-lite)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Smallcnn => "smallcnn",
            Architecture::Resnet18Lite => "resnet18-lite",
        }
    }
}

/// Everything needed to build a concrete model: architecture, input shape,
/// class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub input_shape: (usize, usize, usize),
    pub n_classes: usize,
}

impl ModelSpec {
    pub fn new(arch: Architecture, input_shape: (usize, usize, usize), n_classes: usize) -> Self {
        ModelSpec {
            arch,
            input_shape,
            n_classes,
        }
    }

    /// Build the network with seeded initial weights.
    pub fn build(&self, seed: u64) -> Network {
        match self.arch {
            Architecture::Smallcnn => build_smallcnn(self.input_shape, self.n_classes, seed),
            Architecture::Resnet18Lite => build_resnet18_lite(self.input_shape, self.n_classes, seed),
        }
    }

    /// The layout shared by every model built from this spec.
    pub fn layout(&self) -> Layout {
        flatten_params(&self.build(0)).layout
    }

    /// Initial global parameters for a federated run.
    pub fn init_params(&self, seed: u64) -> ParameterVector {
        flatten_params(&self.build(seed))
    }
}

fn build_smallcnn(input_shape: (usize, usize, usize), n_classes: usize, seed: u64) -> Network {
    let (c, h, w) = input_shape;
    assert!(h % 4 == 0 && w % 4 == 0, "smallcnn needs H,W divisible by 4");
    let mut rng = seeded_rng(seed, "init-smallcnn", 0);
    let flat = 48 * (h / 4) * (w / 4);
    let layers = vec![
        Layer::Conv(Conv2d::new("conv1", c, 24, 3, 1, 1, &mut rng)),
        Layer::Relu,
        Layer::MaxPool2,
        Layer::Conv(Conv2d::new("conv2", 24, 48, 3, 1, 1, &mut rng)),
        Layer::Relu,
        Layer::MaxPool2,
        Layer::Flatten,
        Layer::Dense(Dense::new("fc1", flat, 112, &mut rng)),
        Layer::Relu,
        Layer::Dense(Dense::new("fc2", 112, n_classes, &mut rng)),
    ];
    Network::new(layers, input_shape)
}

fn basic_block(
    name: &str,
    in_c: usize,
    out_c: usize,
    stride: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Layer {
    let shortcut = if stride != 1 || in_c != out_c {
        Some(Conv2d::new(&format!("{name}.skip"), in_c, out_c, 1, stride, 0, rng))
    } else {
        None
    };
    Layer::Residual(ResidualBlock {
        main: vec![
            Layer::Conv(Conv2d::new(&format!("{name}.conv1"), in_c, out_c, 3, stride, 1, rng)),
            Layer::Relu,
            Layer::Conv(Conv2d::new(&format!("{name}.conv2"), out_c, out_c, 3, 1, 1, rng)),
        ],
        shortcut,
    })
}

fn build_resnet18_lite(input_shape: (usize, usize, usize), n_classes: usize, seed: u64) -> Network {
    let (c, h, w) = input_shape;
    assert!(h % 8 == 0 && w % 8 == 0, "resnet18-lite needs H,W divisible by 8");
    let mut rng = seeded_rng(seed, "init-resnet18-lite", 0);
    let mut layers = vec![
        Layer::Conv(Conv2d::new("conv1", c, 16, 3, 1, 1, &mut rng)),
        Layer::Relu,
    ];
    let widths = [16usize, 32, 64, 128];
    let mut in_c = 16usize;
    for (stage, &width) in widths.iter().enumerate() {
        for block in 0..2 {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            layers.push(basic_block(
                &format!("s{}b{}", stage + 1, block + 1),
                in_c,
                width,
                stride,
                &mut rng,
            ));
            layers.push(Layer::Relu);
            in_c = width;
        }
    }
    layers.push(Layer::Flatten);
    let flat = 128 * (h / 8) * (w / 8);
    layers.push(Layer::Dense(Dense::new("fc", flat, n_classes, &mut rng)));
    Network::new(layers, input_shape)
}

/// Local SGD hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub momentum: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must be in [0,1)".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.clone()
        }
    }
}

/// Mini-batch SGD from `start`. Deterministic given `(start, data order,
/// cfg.seed)`; epoch shuffles are derived from the seed.
pub fn local_train(
    spec: &ModelSpec,
    start: &ParameterVector,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<ParameterVector> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(start.clone());
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut net = spec.build(0);
    unflatten_params(start, &mut net)?;
    let mut opt = Sgd::new(cfg.learning_rate as f32, cfg.momentum as f32);
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = seeded_rng(cfg.seed, "epoch-shuffle", epoch as u64);
        order.shuffle(&mut rng);
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = data.batch(chunk);
            let (out, trace) = net.forward_trace(Batch::Im(x));
            let (loss, dlogits) = softmax_cross_entropy(&out.expect_flat(), &labels);
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    batch: batch_idx,
                });
            }
            let mut grads = net.zero_grads();
            net.backward(&trace, Batch::Flat(dlogits), &mut grads);
            opt.step(&mut net, &grads);
        }
    }
    Ok(flatten_params(&net))
}

fn forward_logits(net: &Network, data: &Dataset, indices: &[usize]) -> ndarray::Array2<f32> {
    let (x, _) = data.batch(indices);
    net.forward(Batch::Im(x)).expect_flat()
}

const EVAL_BATCH: usize = 256;

/// Fraction of samples whose argmax prediction equals the label.
pub fn evaluate(spec: &ModelSpec, params: &ParameterVector, test_set: &Dataset) -> Result<f64> {
    if test_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut net = spec.build(0);
    unflatten_params(params, &mut net)?;
    let indices: Vec<usize> = (0..test_set.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(EVAL_BATCH) {
        let logits = forward_logits(&net, test_set, chunk);
        let preds = argmax_rows(&logits);
        for (row, &i) in chunk.iter().enumerate() {
            if preds[row] == test_set.samples[i].label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / test_set.len() as f64)
}

/// Mean cross-entropy of `params` on `data` (used by loss-based rejection).
pub fn mean_loss(spec: &ModelSpec, params: &ParameterVector, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut net = spec.build(0);
    unflatten_params(params, &mut net)?;
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0f64;
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, labels) = data.batch(chunk);
        let logits = net.forward(Batch::Im(x)).expect_flat();
        let (loss, _) = softmax_cross_entropy(&logits, &labels);
        total += loss * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Attack success rate: over test samples whose label differs from the
/// poison target, inject the trigger and report the fraction predicted as
/// the target class.
pub fn backdoor_accuracy(
    spec: &ModelSpec,
    params: &ParameterVector,
    test_set: &Dataset,
    poison: &PoisonSpec,
) -> Result<f64> {
    let keep: Vec<usize> = (0..test_set.len())
        .filter(|&i| test_set.samples[i].label != poison.target_label)
        .collect();
    if keep.is_empty() {
        return Err(Error::InvalidArgument(
            "backdoor accuracy undefined: all samples carry the target label".into(),
        ));
    }
    let mut net = spec.build(0);
    unflatten_params(params, &mut net)?;
    let (c, h, w) = test_set.image_shape();
    let mut hits = 0usize;
    for chunk in keep.chunks(EVAL_BATCH) {
        let mut x = Array4::<f32>::zeros((chunk.len(), c, h, w));
        for (row, &i) in chunk.iter().enumerate() {
            let mut pixels = test_set.samples[i].pixels.clone();
            poison.trigger.apply(&mut pixels);
            x.index_axis_mut(ndarray::Axis(0), row).assign(&pixels);
        }
        let logits = net.forward(Batch::Im(x)).expect_flat();
        hits += argmax_rows(&logits)
            .iter()
            .filter(|&&p| p == poison.target_label)
            .count();
    }
    Ok(hits as f64 / keep.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_blobs, Corner, TriggerPattern};

    fn desk_spec() -> ModelSpec {
        ModelSpec::new(Architecture::Smallcnn, (3, 16, 16), 10)
    }

    #[test]
    fn flatten_round_trip_is_exact_for_all_architectures() {
        for spec in [
            desk_spec(),
            ModelSpec::new(Architecture::Resnet18Lite, (3, 16, 16), 10),
        ] {
            let net = spec.build(11);
            let pv = flatten_params(&net);
            assert_eq!(pv.values.len(), net.param_count());
            let mut rebuilt = spec.build(99);
            unflatten_params(&pv, &mut rebuilt).unwrap();
            let pv2 = flatten_params(&rebuilt);
            assert_eq!(pv.values, pv2.values, "{:?}", spec.arch);
            assert_eq!(pv.layout, pv2.layout);
        }
    }

    #[test]
    fn layouts_are_deterministic_across_builds() {
        let spec = desk_spec();
        assert_eq!(spec.build(1).param_count(), spec.build(2).param_count());
        assert_eq!(
            flatten_params(&spec.build(1)).layout,
            flatten_params(&spec.build(2)).layout
        );
    }

    #[test]
    fn smallcnn_has_about_100k_params() {
        let n = desk_spec().build(0).param_count();
        assert!((80_000..130_000).contains(&n), "got {n}");
    }

    #[test]
    fn layout_mismatch_is_an_error() {
        let pv = flatten_params(&desk_spec().build(0));
        let mut other = ModelSpec::new(Architecture::Resnet18Lite, (3, 16, 16), 10).build(0);
        assert!(matches!(
            unflatten_params(&pv, &mut other),
            Err(Error::LayoutMismatch(_))
        ));
    }

    #[test]
    fn zero_vector_gives_zero_weights() {
        let spec = desk_spec();
        let layout = spec.layout();
        let pv = ParameterVector {
            values: vec![0.0; layout.param_count()],
            layout,
        };
        let mut net = spec.build(5);
        unflatten_params(&pv, &mut net).unwrap();
        net.visit_params(&mut |_, _, vals| assert!(vals.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn zero_epochs_is_identity() {
        let spec = desk_spec();
        let start = spec.init_params(3);
        let data = synthetic_blobs(16, 10, 16, 0);
        let cfg = TrainConfig {
            learning_rate: 0.1,
            epochs: 0,
            batch_size: 8,
            seed: 0,
            momentum: 0.0,
        };
        let out = local_train(&spec, &start, &data, &cfg).unwrap();
        assert_eq!(out.values, start.values);
    }

    #[test]
    fn training_is_deterministic() {
        let spec = desk_spec();
        let start = spec.init_params(3);
        let data = synthetic_blobs(32, 10, 16, 0);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 2,
            batch_size: 8,
            seed: 42,
            momentum: 0.0,
        };
        let a = local_train(&spec, &start, &data, &cfg).unwrap();
        let b = local_train(&spec, &start, &data, &cfg).unwrap();
        assert_eq!(a.values, b.values);
        let c = local_train(&spec, &start, &data, &cfg.with_seed(43)).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn overfits_a_single_batch() {
        // Oracle for the training loop: 50 epochs on one batch of 8 must cut
        // the loss to under a tenth of its initial value.
        let spec = desk_spec();
        let start = spec.init_params(7);
        let data = synthetic_blobs(8, 10, 16, 1).take(8);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 50,
            batch_size: 8,
            seed: 9,
            momentum: 0.0,
        };
        let initial = mean_loss(&spec, &start, &data).unwrap();
        let trained = local_train(&spec, &start, &data, &cfg).unwrap();
        let final_loss = mean_loss(&spec, &trained, &data).unwrap();
        assert!(
            final_loss < 0.1 * initial,
            "final {final_loss} vs initial {initial}"
        );
    }

    /// Parameters that make the classifier always output class `k`: zero
    /// everything, bias the last layer toward `k`.
    fn constant_predictor(spec: &ModelSpec, k: usize) -> ParameterVector {
        let layout = spec.layout();
        let mut values = vec![0.0f32; layout.param_count()];
        let last = layout.0.last().unwrap().clone();
        let range = layout.range_of(&last.name).unwrap();
        values[range.start + k] = 1.0;
        ParameterVector { values, layout }
    }

    #[test]
    fn evaluate_constant_predictor() {
        let spec = desk_spec();
        let pv = constant_predictor(&spec, 4);
        let all_k = Dataset::new(
            synthetic_blobs(30, 10, 16, 2)
                .samples
                .into_iter()
                .map(|mut s| {
                    s.label = 4;
                    s
                })
                .collect(),
            10,
        );
        assert_eq!(evaluate(&spec, &pv, &all_k).unwrap(), 1.0);
        let none_k = Dataset::new(
            synthetic_blobs(30, 10, 16, 2)
                .samples
                .into_iter()
                .map(|mut s| {
                    s.label = 5;
                    s
                })
                .collect(),
            10,
        );
        assert_eq!(evaluate(&spec, &pv, &none_k).unwrap(), 0.0);
    }

    #[test]
    fn random_weights_predict_at_chance_level() {
        let spec = desk_spec();
        let data = synthetic_blobs(1000, 10, 16, 5);
        let mut accs = Vec::new();
        for seed in 0..10 {
            let pv = spec.init_params(seed);
            accs.push(evaluate(&spec, &pv, &data).unwrap());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!(
            (0.05..=0.20).contains(&mean),
            "mean accuracy {mean} outside chance band"
        );
    }

    #[test]
    fn backdoor_accuracy_on_constant_predictors() {
        let spec = desk_spec();
        let data = synthetic_blobs(60, 10, 16, 3);
        let poison = PoisonSpec {
            trigger: TriggerPattern::corner_patch((3, 16, 16), 3, 1.0, Corner::BottomRight),
            target_label: 0,
            fraction: 0.5,
        };
        let to_target = constant_predictor(&spec, 0);
        assert_eq!(
            backdoor_accuracy(&spec, &to_target, &data, &poison).unwrap(),
            1.0
        );
        let to_other = constant_predictor(&spec, 3);
        assert_eq!(
            backdoor_accuracy(&spec, &to_other, &data, &poison).unwrap(),
            0.0
        );
    }

    #[test]
    fn backdoor_accuracy_needs_non_target_samples() {
        let spec = desk_spec();
        let all_target = Dataset::new(
            synthetic_blobs(10, 10, 16, 3)
                .samples
                .into_iter()
                .map(|mut s| {
                    s.label = 0;
                    s
                })
                .collect(),
            10,
        );
        let poison = PoisonSpec {
            trigger: TriggerPattern::corner_patch((3, 16, 16), 3, 1.0, Corner::BottomRight),
            target_label: 0,
            fraction: 0.5,
        };
        let pv = spec.init_params(0);
        assert!(backdoor_accuracy(&spec, &pv, &all_target, &poison).is_err());
    }
}
