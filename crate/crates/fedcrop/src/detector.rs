//! Contrastive model-update detection.
//!
//! The server simulates a small federation on its public dataset — some
//! clients poisoned with a planted trigger, the rest clean — collects every
//! local model into a labelled pool, trains a parameter-embedding encoder
//! with InfoNCE over within/cross-class pairs, then fits a linear head on the
//! frozen embeddings. Incoming client updates are scored as their delta
//! against the broadcast global model.

use crate::aggregation::{fedavg, ClientUpdate};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{poison_dataset_indexed, Dataset, PoisonSpec, TriggerPattern};
use crate::error::{Error, Result};
use crate::model::{flatten_params, local_train, unflatten_params, Layout, ModelSpec, ParameterVector, TrainConfig};
use crate::nn::{Batch, Dense, Layer, Network, Sgd};
use crate::rng::{derive_seed, seeded_rng};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Pool-entry class: was the simulated client trained on poisoned data?
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolLabel {
    Benign,
    Poisoned,
}

/// A simulated client model with the global it started from.
#[derive(Debug, Clone)]
pub struct SimPoolEntry {
    pub params: ParameterVector,
    pub reference: ParameterVector,
    pub label: PoolLabel,
}

/// Labelled pool of simulated benign/poisoned models.
#[derive(Debug, Clone)]
pub struct SimPool {
    pub entries: Vec<SimPoolEntry>,
    pub trigger_used: TriggerPattern,
    pub public_set_id: String,
}

impl SimPool {
    pub fn count(&self, label: PoolLabel) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    /// Pair construction needs at least two models per class.
    pub fn validate(&self) -> Result<()> {
        if self.count(PoolLabel::Benign) < 2 || self.count(PoolLabel::Poisoned) < 2 {
            return Err(Error::InvalidArgument(format!(
                "sim pool needs >=2 models per label (benign={}, poisoned={})",
                self.count(PoolLabel::Benign),
                self.count(PoolLabel::Poisoned)
            )));
        }
        Ok(())
    }
}

/// Detector hyperparameters. The `sim_*` fields size the simulated
/// federation that supervises the encoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// InfoNCE temperature.
    pub tau: f64,
    /// Embedding dimension.
    pub d_emb: usize,
    /// Layout entries fed to the encoder; empty means "first conv + final
    /// dense layer", resolved from the model layout.
    #[serde(default)]
    pub feature_slice: Vec<String>,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Suspect threshold on the calibrated score.
    pub threshold: f64,
    pub n_sim: usize,
    pub sim_rounds: usize,
    pub sim_attacker_fraction: f64,
    /// Poison fraction used for the simulated attackers.
    pub sim_gamma: f64,
    /// Class the simulated attackers relabel to.
    pub sim_target: usize,
    /// Local epochs for the simulated clients.
    pub sim_local_epochs: usize,
    /// Pairs per InfoNCE gradient step.
    pub pairs_per_batch: usize,
    /// Epochs for the linear head.
    pub head_epochs: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            tau: 0.5,
            d_emb: 64,
            feature_slice: Vec::new(),
            epochs: 30,
            lr: 0.01,
            seed: 0,
            threshold: 0.5,
            n_sim: 12,
            sim_rounds: 3,
            sim_attacker_fraction: 0.5,
            sim_gamma: 0.5,
            sim_target: 0,
            sim_local_epochs: 2,
            pairs_per_batch: 8,
            head_epochs: 60,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArgument("tau must be > 0".into()));
        }
        if self.d_emb == 0 {
            return Err(Error::InvalidArgument("d_emb must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-client verdict with a calibrated suspect probability.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionVerdict {
    pub client_id: usize,
    pub label: VerdictLabel,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictLabel {
    Benign,
    Suspect,
}

/// Unit-normalized parameter embedding.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub vector: Array1<f32>,
}

impl Embedding {
    pub fn cosine(&self, other: &Embedding) -> f64 {
        self.vector
            .iter()
            .zip(other.vector.iter())
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum()
    }
}

// ---------------------------------------------------------------------------
// Sim pool

/// Run a simulated federation on the public set and collect every client
/// model, labelled by whether its owner trained on poisoned data.
///
/// Attackers train on `poison_dataset(public_set, gamma)`; benign clients on
/// the untouched complement. The sim global advances by FedAvg each round, so
/// later rounds contribute drifted models and the pool spans the conditions
/// live rounds will show.
#[allow(clippy::too_many_arguments)]
pub fn build_sim_pool(
    spec: &ModelSpec,
    public_set: &Dataset,
    trigger: &TriggerPattern,
    sim_target: usize,
    gamma: f64,
    n_sim: usize,
    attacker_fraction: f64,
    rounds: usize,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<SimPool> {
    if public_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(0.0 < attacker_fraction && attacker_fraction < 1.0) {
        return Err(Error::InvalidArgument(
            "attacker_fraction must be in (0,1)".into(),
        ));
    }
    let n_attackers = ((n_sim as f64 * attacker_fraction).round() as usize).clamp(1, n_sim - 1);
    let poison = PoisonSpec {
        trigger: trigger.clone(),
        target_label: sim_target,
        fraction: gamma,
    };
    let (poisoned_set, poisoned_idx) =
        poison_dataset_indexed(public_set, &poison, derive_seed(seed, "sim-poison", 0))?;
    let clean_complement: Vec<usize> = (0..public_set.len())
        .filter(|i| !poisoned_idx.contains(i))
        .collect();
    if clean_complement.is_empty() {
        return Err(Error::InvalidArgument(
            "sim gamma leaves no clean complement for benign clients".into(),
        ));
    }
    let benign_data = public_set.subset(&clean_complement);

    let mut global = spec.init_params(derive_seed(seed, "sim-init", 0));
    let mut entries = Vec::with_capacity(n_sim * rounds);
    for round in 0..rounds {
        let updates: Vec<(usize, ParameterVector)> = (0..n_sim)
            .into_par_iter()
            .map(|client| {
                let k = (round * n_sim + client) as u64;
                let cfg = train_cfg.with_seed(derive_seed(seed, "sim-train", k));
                let source = if client < n_attackers {
                    &poisoned_set
                } else {
                    &benign_data
                };
                // bootstrap subset per client so the pool carries data
                // heterogeneity, as live non-IID shards will
                let take = ((source.len() as f64 * 0.8).ceil() as usize).max(1);
                let mut rng = seeded_rng(seed, "sim-bootstrap", k);
                let idx = rand::seq::index::sample(&mut rng, source.len(), take).into_vec();
                let data = source.subset(&idx);
                local_train(spec, &global, &data, &cfg).map(|pv| (client, pv))
            })
            .collect::<Result<Vec<_>>>()?;
        for (client, params) in &updates {
            entries.push(SimPoolEntry {
                params: params.clone(),
                reference: global.clone(),
                label: if *client < n_attackers {
                    PoolLabel::Poisoned
                } else {
                    PoolLabel::Benign
                },
            });
        }
        let client_updates: Vec<ClientUpdate> = updates
            .iter()
            .map(|(client, pv)| {
                let n = if *client < n_attackers {
                    poisoned_set.len()
                } else {
                    benign_data.len()
                };
                ClientUpdate::new(*client, pv.clone(), n)
            })
            .collect();
        global = fedavg(&client_updates)?;
    }
    let pool = SimPool {
        entries,
        trigger_used: trigger.clone(),
        public_set_id: format!("public[{}]", public_set.len()),
    };
    pool.validate()?;
    Ok(pool)
}

/// All unordered within-class pairs (positives) and cross-class pairs
/// (negatives), as index pairs into the pool.
pub fn make_pairs(pool: &SimPool) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for i in 0..pool.entries.len() {
        for j in i + 1..pool.entries.len() {
            if pool.entries[i].label == pool.entries[j].label {
                positives.push((i, j));
            } else {
                negatives.push((i, j));
            }
        }
    }
    (positives, negatives)
}

// ---------------------------------------------------------------------------
// Encoder

/// MLP projector over a slice of the parameter delta.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub net: Network,
    pub feature_slice: Vec<String>,
    pub input_dim: usize,
    pub d_emb: usize,
    /// Mean InfoNCE loss per epoch, recorded during training.
    pub loss_history: Vec<f64>,
}

/// Default slice: the first convolutional layer (where peripheral pixel
/// triggers imprint) and the final dense layer (where the target class sits).
pub fn default_feature_slice(layout: &Layout) -> Vec<String> {
    let mut names = Vec::new();
    if let Some(first) = layout.0.first() {
        let base = first.name.rsplit_once('.').map(|(b, _)| b).unwrap_or(&first.name);
        for e in &layout.0 {
            if e.name.starts_with(&format!("{base}.")) {
                names.push(e.name.clone());
            }
        }
    }
    if let Some(last) = layout.0.last() {
        let base = last.name.rsplit_once('.').map(|(b, _)| b).unwrap_or(&last.name);
        for e in &layout.0 {
            if e.name.starts_with(&format!("{base}.")) && !names.contains(&e.name) {
                names.push(e.name.clone());
            }
        }
    }
    names
}

/// Concatenate the named layout entries of `params - reference`, then
/// L2-normalize. Normalization makes detection scale-invariant: a client's
/// delta shrinks as the global converges, but the trigger's direction in
/// parameter space persists.
pub fn feature_vector(
    params: &ParameterVector,
    reference: &ParameterVector,
    slice: &[String],
) -> Result<Array1<f32>> {
    if params.layout != reference.layout {
        return Err(Error::LayoutMismatch(
            "feature vector needs matching layouts".into(),
        ));
    }
    let mut out = Vec::new();
    for name in slice {
        let range = params.layout.range_of(name).ok_or_else(|| {
            Error::LayoutMismatch(format!("feature slice entry '{name}' not in layout"))
        })?;
        out.extend(
            params.values[range.clone()]
                .iter()
                .zip(&reference.values[range])
                .map(|(a, b)| a - b),
        );
    }
    let norm = out.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
    let inv = 1.0 / norm.max(1e-12);
    Ok(Array1::from_vec(out.into_iter().map(|v| (v as f64 * inv) as f32).collect()))
}

fn build_encoder_net(input_dim: usize, d_emb: usize, seed: u64) -> Network {
    let mut rng = seeded_rng(seed, "encoder-init", 0);
    Network::new(
        vec![
            Layer::Dense(Dense::new("enc1", input_dim, 256, &mut rng)),
            Layer::Relu,
            Layer::Dense(Dense::new("enc2", 256, 128, &mut rng)),
            Layer::Relu,
            Layer::Dense(Dense::new("enc3", 128, d_emb, &mut rng)),
        ],
        (1, 1, input_dim),
    )
}

fn normalize_rows(z: &Array2<f32>) -> (Array2<f32>, Vec<f32>) {
    let mut out = z.clone();
    let mut norms = Vec::with_capacity(z.nrows());
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
        row.mapv_inplace(|v| v / norm);
        norms.push(norm);
    }
    (out, norms)
}

impl Encoder {
    /// Unit-norm embedding of a model delta. Deterministic.
    pub fn embed(&self, params: &ParameterVector, reference: &ParameterVector) -> Result<Embedding> {
        let feat = feature_vector(params, reference, &self.feature_slice)?;
        if feat.len() != self.input_dim {
            return Err(Error::LayoutMismatch(format!(
                "feature dim {} != encoder input {}",
                feat.len(),
                self.input_dim
            )));
        }
        let row = feat.insert_axis(ndarray::Axis(0));
        let z = self.net.forward(Batch::Flat(row)).expect_flat();
        let (zn, _) = normalize_rows(&z);
        Ok(Embedding {
            vector: zn.row(0).to_owned(),
        })
    }
}

/// InfoNCE with cosine similarity: positive pair in the numerator, the
/// negatives summed in the denominator. Computed with max-subtracted
/// log-sum-exp, so the all-equal degenerate case is exact.
pub fn info_nce_loss(
    anchor: &Embedding,
    positive: &Embedding,
    negatives: &[Embedding],
    tau: f64,
) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument("tau must be > 0".into()));
    }
    if negatives.is_empty() {
        return Err(Error::InvalidArgument(
            "info_nce_loss needs at least one negative".into(),
        ));
    }
    let pos = anchor.cosine(positive) / tau;
    let negs: Vec<f64> = negatives.iter().map(|n| anchor.cosine(n) / tau).collect();
    let max = negs.iter().fold(pos, |m, v| m.max(*v));
    let sum: f64 = (pos - max).exp() + negs.iter().map(|v| (v - max).exp()).sum::<f64>();
    Ok((max - pos) + sum.ln())
}

/// Train the encoder by SGD on batched InfoNCE over the pool's pairs.
pub fn train_contrastive_encoder(
    spec: &ModelSpec,
    pool: &SimPool,
    cfg: &DetectorConfig,
) -> Result<Encoder> {
    cfg.validate()?;
    pool.validate()?;
    let _ = spec;
    let slice = if cfg.feature_slice.is_empty() {
        default_feature_slice(&pool.entries[0].params.layout)
    } else {
        cfg.feature_slice.clone()
    };
    // fixed design matrix of pool features
    let feats: Vec<Array1<f32>> = pool
        .entries
        .iter()
        .map(|e| feature_vector(&e.params, &e.reference, &slice))
        .collect::<Result<Vec<_>>>()?;
    let input_dim = feats[0].len();
    let p = pool.entries.len();
    let mut design = Array2::<f32>::zeros((p, input_dim));
    for (i, f) in feats.iter().enumerate() {
        design.row_mut(i).assign(f);
    }

    let mut net = build_encoder_net(input_dim, cfg.d_emb, cfg.seed);
    let (positives, _) = make_pairs(pool);
    let neg_indices: Vec<Vec<usize>> = pool
        .entries
        .iter()
        .map(|e| {
            pool.entries
                .iter()
                .enumerate()
                .filter(|(_, o)| o.label != e.label)
                .map(|(k, _)| k)
                .collect()
        })
        .collect();

    let mut opt = Sgd::new(cfg.lr as f32, 0.0);
    let tau = cfg.tau;
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order = positives.clone();
        let mut rng = seeded_rng(cfg.seed, "pair-shuffle", epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut epoch_pairs = 0usize;
        for batch in order.chunks(cfg.pairs_per_batch.max(1)) {
            let (z_raw, trace) = net.forward_trace(Batch::Flat(design.clone()));
            let z_raw = z_raw.expect_flat();
            let (z, norms) = normalize_rows(&z_raw);
            let mut dz_hat = Array2::<f32>::zeros(z.dim());
            let inv_b = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0f64;
            for &(a, pidx) in batch {
                let negs = &neg_indices[a];
                let za = z.row(a);
                let zp = z.row(pidx);
                let s_pos: f64 = za.iter().zip(zp).map(|(x, y)| (*x as f64) * (*y as f64)).sum::<f64>() / tau;
                let s_negs: Vec<f64> = negs
                    .iter()
                    .map(|&k| {
                        za.iter()
                            .zip(z.row(k))
                            .map(|(x, y)| (*x as f64) * (*y as f64))
                            .sum::<f64>()
                            / tau
                    })
                    .collect();
                let max = s_negs.iter().fold(s_pos, |m, v| m.max(*v));
                let denom: f64 =
                    (s_pos - max).exp() + s_negs.iter().map(|v| (v - max).exp()).sum::<f64>();
                batch_loss += (max - s_pos) + denom.ln();
                // d loss / d s_pos = p_pos - 1 ; d loss / d s_neg_k = p_k
                let p_pos = (s_pos - max).exp() / denom;
                let g_pos = ((p_pos - 1.0) / tau * inv_b) as f32;
                for ((da, va), vp) in dz_hat.row_mut(a).iter_mut().zip(za).zip(zp) {
                    let _ = va;
                    *da += g_pos * vp;
                }
                for (dp, va) in dz_hat.row_mut(pidx).iter_mut().zip(za) {
                    *dp += g_pos * va;
                }
                for (k, s_n) in negs.iter().zip(&s_negs) {
                    let p_k = (s_n - max).exp() / denom;
                    let g_k = (p_k / tau * inv_b) as f32;
                    let zk = z.row(*k);
                    for ((da, _), vk) in dz_hat.row_mut(a).iter_mut().zip(zp).zip(zk) {
                        *da += g_k * vk;
                    }
                    for (dk, va) in dz_hat.row_mut(*k).iter_mut().zip(za) {
                        *dk += g_k * va;
                    }
                }
            }
            let loss = batch_loss * inv_b;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch, batch: 0 });
            }
            epoch_loss += batch_loss;
            epoch_pairs += batch.len();
            // backprop through row normalization: dz = (dẑ - ẑ(ẑ·dẑ)) / ‖z‖
            let mut dz = dz_hat;
            for (i, mut row) in dz.rows_mut().into_iter().enumerate() {
                let zr = z.row(i);
                let dot: f32 = row.iter().zip(zr).map(|(d, v)| d * v).sum();
                for (d, v) in row.iter_mut().zip(zr) {
                    *d = (*d - dot * v) / norms[i];
                }
            }
            let mut grads = net.zero_grads();
            net.backward(&trace, Batch::Flat(dz), &mut grads);
            opt.step(&mut net, &grads);
        }
        loss_history.push(epoch_loss / epoch_pairs.max(1) as f64);
    }
    Ok(Encoder {
        net,
        feature_slice: slice,
        input_dim,
        d_emb: cfg.d_emb,
        loss_history,
    })
}

// ---------------------------------------------------------------------------
// Linear head

/// Logistic-regression head over frozen embeddings; scores are suspect
/// probabilities in [0,1].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearHead {
    pub weights: Vec<f32>,
    pub bias: f32,
    pub train_accuracy: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl LinearHead {
    pub fn score(&self, e: &Embedding) -> f64 {
        let z: f64 = self
            .weights
            .iter()
            .zip(e.vector.iter())
            .map(|(w, v)| (*w as f64) * (*v as f64))
            .sum::<f64>()
            + self.bias as f64;
        sigmoid(z)
    }
}

/// Fit the linear head on the pool's frozen embeddings.
pub fn train_classifier(encoder: &Encoder, pool: &SimPool, epochs: usize, lr: f64, seed: u64) -> Result<LinearHead> {
    pool.validate()?;
    let embeddings: Vec<(Embedding, f64)> = pool
        .entries
        .iter()
        .map(|e| {
            encoder
                .embed(&e.params, &e.reference)
                .map(|emb| (emb, if e.label == PoolLabel::Poisoned { 1.0 } else { 0.0 }))
        })
        .collect::<Result<Vec<_>>>()?;
    let d = encoder.d_emb;
    let mut w = vec![0.0f32; d];
    let mut b = 0.0f32;
    let mut order: Vec<usize> = (0..embeddings.len()).collect();
    for epoch in 0..epochs {
        let mut rng = seeded_rng(seed, "head-shuffle", epoch as u64);
        order.shuffle(&mut rng);
        for &i in &order {
            let (emb, y) = &embeddings[i];
            let z: f64 = w
                .iter()
                .zip(emb.vector.iter())
                .map(|(w, v)| (*w as f64) * (*v as f64))
                .sum::<f64>()
                + b as f64;
            if !z.is_finite() {
                return Err(Error::TrainingDiverged { epoch, batch: i });
            }
            let err = (sigmoid(z) - y) as f32;
            for (wk, v) in w.iter_mut().zip(emb.vector.iter()) {
                *wk -= lr as f32 * err * v;
            }
            b -= lr as f32 * err;
        }
    }
    let head = LinearHead {
        weights: w,
        bias: b,
        train_accuracy: 0.0,
    };
    let correct = embeddings
        .iter()
        .filter(|(emb, y)| (head.score(emb) >= 0.5) == (*y > 0.5))
        .count();
    Ok(LinearHead {
        train_accuracy: correct as f64 / embeddings.len() as f64,
        ..head
    })
}

// ---------------------------------------------------------------------------
// Detector bundle

/// Trained detector: encoder + linear head + config.
#[derive(Debug, Clone)]
pub struct Detector {
    pub encoder: Encoder,
    pub head: LinearHead,
    pub config: DetectorConfig,
}

impl Detector {
    /// Train encoder and head from a sim pool.
    pub fn train(spec: &ModelSpec, pool: &SimPool, cfg: &DetectorConfig) -> Result<Detector> {
        let encoder = train_contrastive_encoder(spec, pool, cfg)?;
        let head = train_classifier(&encoder, pool, cfg.head_epochs, cfg.lr.max(0.05), derive_seed(cfg.seed, "head", 0))?;
        Ok(Detector {
            encoder,
            head,
            config: cfg.clone(),
        })
    }

    /// Suspect probability of one update relative to the broadcast global.
    pub fn score(&self, params: &ParameterVector, reference: &ParameterVector) -> Result<f64> {
        Ok(self.head.score(&self.encoder.embed(params, reference)?))
    }

    /// One verdict per update; `suspect` iff score >= threshold.
    pub fn classify_updates(
        &self,
        updates: &[ClientUpdate],
        reference: &ParameterVector,
        threshold: f64,
    ) -> Result<Vec<DetectionVerdict>> {
        updates
            .iter()
            .map(|u| {
                let score = self.score(&u.params, reference)?;
                Ok(DetectionVerdict {
                    client_id: u.client_id,
                    label: if score >= threshold {
                        VerdictLabel::Suspect
                    } else {
                        VerdictLabel::Benign
                    },
                    score,
                })
            })
            .collect()
    }

    /// Persist as an `FCROP1` checkpoint of the encoder weights with the
    /// head and config in the metadata block.
    pub fn save(&self, path: &Path) -> Result<()> {
        let pv = flatten_params(&self.encoder.net);
        let meta = serde_json::json!({
            "kind": "detector",
            "tau": self.config.tau,
            "d_emb": self.config.d_emb,
            "feature_slice": self.encoder.feature_slice,
            "threshold": self.config.threshold,
            "input_dim": self.encoder.input_dim,
            "head": self.head,
            "config": self.config,
        });
        save_checkpoint(path, &pv, &meta)
    }

    pub fn load(path: &Path) -> Result<Detector> {
        let (pv, meta) = load_checkpoint(path)?;
        let input_dim = meta["input_dim"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("detector meta missing input_dim".into()))?
            as usize;
        let config: DetectorConfig = serde_json::from_value(meta["config"].clone())?;
        let head: LinearHead = serde_json::from_value(meta["head"].clone())?;
        let feature_slice: Vec<String> = serde_json::from_value(meta["feature_slice"].clone())?;
        let mut net = build_encoder_net(input_dim, config.d_emb, 0);
        unflatten_params(&pv, &mut net)?;
        Ok(Detector {
            encoder: Encoder {
                net,
                feature_slice,
                input_dim,
                d_emb: config.d_emb,
                loss_history: Vec::new(),
            },
            head,
            config,
        })
    }
}

/// Rank-based ROC-AUC of `(score, is_positive)` pairs, ties averaged.
pub fn roc_auc(scored: &[(f64, bool)]) -> f64 {
    let mut ranked: Vec<(f64, bool)> = scored.to_vec();
    ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
    let n_pos = ranked.iter().filter(|(_, p)| *p).count();
    let n_neg = ranked.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return f64::NAN;
    }
    // average ranks over ties
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0usize;
    while i < ranked.len() {
        let mut j = i;
        while j + 1 < ranked.len() && ranked[j + 1].0 == ranked[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for item in &ranked[i..=j] {
            if item.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    (rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos as f64 * n_neg as f64)
}
