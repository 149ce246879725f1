//! Federated round driver: distribute the global model, run benign and
//! attacker clients, apply the configured aggregation/defense, and record
//! per-round metrics.

use crate::aggregation::{fang_lfr, fedavg, gancrop_merge, krum, trimmed_mean, AggregatorKind, ClientUpdate};
use crate::checkpoint::save_checkpoint;
use crate::data::{dirichlet_partition_with, load_cifar10, load_manifest_dir, poison_dataset, synthetic_blobs, Corner, Dataset, PartitionPlan, PoisonSpec, TriggerPattern};
use crate::detector::{build_sim_pool, DetectionVerdict, Detector, DetectorConfig, VerdictLabel};
use crate::error::{Error, Result};
use crate::model::{backdoor_accuracy, evaluate, local_train, Architecture, ModelSpec, ParameterVector, TrainConfig};
use crate::recovery::{infer_target_class, repair_model, GeneratorConfig};
use crate::rng::{derive_seed, seeded_rng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// `synthetic` | `cifar10` | `manifest`
    pub name: String,
    /// Data directory for the on-disk loaders.
    #[serde(default)]
    pub dir: Option<std::path::PathBuf>,
    pub train_size: usize,
    pub test_size: usize,
    /// Synthetic image side length.
    pub image_hw: usize,
    pub n_classes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoisonConfig {
    pub patch_size: usize,
    pub patch_value: f32,
    pub corner: Corner,
    pub target_label: usize,
    /// Share of each attacker's shard that is poisoned.
    pub fraction: f64,
}

impl PoisonConfig {
    pub fn to_spec(&self, image_shape: (usize, usize, usize)) -> PoisonSpec {
        PoisonSpec {
            trigger: TriggerPattern::corner_patch(
                image_shape,
                self.patch_size,
                self.patch_value,
                self.corner,
            ),
            target_label: self.target_label,
            fraction: self.fraction,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub alpha: f64,
    /// Defaults to the experiment seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub allow_empty_clients: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepairConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub augment_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Label used in summaries/plots; defaults to the aggregator name.
    #[serde(default)]
    pub name: Option<String>,
    pub seed: u64,
    pub n_clients: usize,
    pub attacker_fraction: f64,
    pub rounds: usize,
    pub aggregator: AggregatorKind,
    pub dataset: DatasetConfig,
    pub architecture: String,
    pub partition: PartitionConfig,
    pub poison: PoisonConfig,
    pub train: TrainConfig,
    pub detector: DetectorConfig,
    pub generator: GeneratorConfig,
    pub repair: RepairConfig,
    /// Share of the test split carved into the server's public dataset.
    pub public_fraction: f64,
    /// Krum's assumed attacker count; defaults to ceil(0.3 n).
    #[serde(default)]
    pub krum_f: Option<usize>,
    /// Trimmed-mean cut per side; defaults to floor(0.3 n).
    #[serde(default)]
    pub trim_k: Option<usize>,
    /// Rejections for loss-based filtering; defaults to floor(0.3 n).
    #[serde(default)]
    pub fang_n_reject: Option<usize>,
}

impl ExperimentConfig {
    pub fn method_name(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| self.aggregator.name().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::InvalidArgument("n_clients must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.attacker_fraction) {
            return Err(Error::InvalidArgument(
                "attacker_fraction must be in [0,1)".into(),
            ));
        }
        if self.rounds == 0 {
            return Err(Error::InvalidArgument("rounds must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.public_fraction) || self.public_fraction == 0.0 {
            return Err(Error::InvalidArgument(
                "public_fraction must be in (0,1)".into(),
            ));
        }
        Architecture::from_name(&self.architecture)?;
        self.train.validate()?;
        self.detector.validate()?;
        self.generator.validate()?;
        Ok(())
    }

    fn krum_f(&self) -> usize {
        self.krum_f
            .unwrap_or_else(|| (0.3 * self.n_clients as f64).ceil() as usize)
    }

    fn trim_k(&self) -> usize {
        self.trim_k
            .unwrap_or_else(|| (0.3 * self.n_clients as f64).floor() as usize)
    }

    fn fang_n_reject(&self) -> usize {
        self.fang_n_reject
            .unwrap_or_else(|| (0.3 * self.n_clients as f64).floor() as usize)
    }
}

/// The `desk` profile: 10 clients, 30% attackers, smallcnn on synthetic
/// blobs, 20 rounds. Finishes in minutes on a laptop.
pub fn desk_profile() -> ExperimentConfig {
    ExperimentConfig {
        name: None,
        seed: 0,
        n_clients: 10,
        attacker_fraction: 0.3,
        rounds: 20,
        aggregator: AggregatorKind::Fedavg,
        dataset: DatasetConfig {
            name: "synthetic".into(),
            dir: None,
            train_size: 5000,
            test_size: 1000,
            image_hw: 16,
            n_classes: 10,
        },
        architecture: "smallcnn".into(),
        partition: PartitionConfig {
            alpha: 0.7,
            seed: None,
            allow_empty_clients: false,
        },
        poison: PoisonConfig {
            patch_size: 3,
            patch_value: 1.0,
            corner: Corner::BottomRight,
            target_label: 0,
            fraction: 0.5,
        },
        train: TrainConfig {
            learning_rate: 0.1,
            epochs: 2,
            batch_size: 32,
            seed: 0,
            momentum: 0.0,
        },
        detector: DetectorConfig::default(),
        generator: GeneratorConfig {
            steps: 48,
            batch_size: 12,
            lr: 0.05,
            ..GeneratorConfig::default()
        },
        repair: RepairConfig {
            epochs: 6,
            learning_rate: 0.08,
            augment_fraction: 0.5,
        },
        public_fraction: 0.2,
        krum_f: None,
        trim_k: None,
        fang_n_reject: None,
    }
}

/// The `paper` profile: 40 clients, 50 rounds, Dirichlet 0.7, 30% attackers,
/// lr 0.1, 4 local epochs, residual architecture on CIFAR-10.
pub fn paper_profile() -> ExperimentConfig {
    let mut cfg = desk_profile();
    cfg.n_clients = 40;
    cfg.rounds = 50;
    cfg.dataset = DatasetConfig {
        name: "cifar10".into(),
        dir: None,
        train_size: 50_000,
        test_size: 10_000,
        image_hw: 32,
        n_classes: 10,
    };
    cfg.architecture = "resnet18-lite".into();
    cfg.train = TrainConfig {
        learning_rate: 0.1,
        epochs: 4,
        batch_size: 64,
        seed: 0,
        momentum: 0.0,
    };
    cfg
}

pub fn profile_by_name(name: &str) -> Result<ExperimentConfig> {
    match name {
        "desk" => Ok(desk_profile()),
        "paper" => Ok(paper_profile()),
        other => Err(Error::InvalidArgument(format!(
            "unknown profile '{other}' (expected desk | paper)"
        ))),
    }
}

fn merge_json(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parse a config JSON document. A `profile` field ("desk" | "paper")
/// supplies defaults; every other field overrides the profile.
pub fn load_config(text: &str) -> Result<ExperimentConfig> {
    let mut overlay: serde_json::Value = serde_json::from_str(text)?;
    let profile_name = overlay
        .as_object_mut()
        .and_then(|o| o.remove("profile"))
        .and_then(|v| v.as_str().map(|s| s.to_string()))
        .unwrap_or_else(|| "desk".to_string());
    let base_cfg = profile_by_name(&profile_name)?;
    let mut base = serde_json::to_value(&base_cfg)?;
    merge_json(&mut base, overlay);
    let cfg: ExperimentConfig = serde_json::from_value(base)?;
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Reports

/// Accuracy of the two GANcrop sub-models in a round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubmodelStats {
    pub benign_main: Option<f64>,
    pub benign_backdoor: Option<f64>,
    pub repaired_main: Option<f64>,
    pub repaired_backdoor: Option<f64>,
    pub n_repaired: usize,
}

/// Per-round record: the experiment's unit of output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub main_acc: f64,
    pub backdoor_acc: f64,
    pub verdicts: Vec<DetectionVerdict>,
    pub n_suspects: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub t_train: f64,
    pub t_detect: f64,
    pub t_recover: f64,
    pub t_aggregate: f64,
    pub global_digest: String,
    #[serde(default)]
    pub submodels: Option<SubmodelStats>,
    /// Suspects dropped because recovery did not converge.
    #[serde(default)]
    pub dropped_clients: Vec<usize>,
}

impl RoundReport {
    pub fn total_time(&self) -> f64 {
        self.t_train + self.t_detect + self.t_recover + self.t_aggregate
    }
}

fn digest_params(params: &ParameterVector) -> String {
    let mut hasher = Sha256::new();
    for v in &params.values {
        hasher.update(v.to_le_bytes());
    }
    format!("{:x}", hasher.finalize())
}

/// Digest of the run's deterministic content (wall times excluded).
pub fn reports_digest(reports: &[RoundReport]) -> String {
    let mut hasher = Sha256::new();
    for r in reports {
        hasher.update(r.round.to_le_bytes());
        hasher.update(r.main_acc.to_le_bytes());
        hasher.update(r.backdoor_acc.to_le_bytes());
        hasher.update(r.n_suspects.to_le_bytes());
        hasher.update(r.true_positives.to_le_bytes());
        hasher.update(r.false_positives.to_le_bytes());
        hasher.update(r.global_digest.as_bytes());
        for v in &r.verdicts {
            hasher.update(v.client_id.to_le_bytes());
            hasher.update(v.score.to_le_bytes());
        }
    }
    format!("{:x}", hasher.finalize())
}

// ---------------------------------------------------------------------------
// Experiment state

/// Everything fixed at setup time: data splits, shards, attacker set, model
/// spec, and the trained detector for GANcrop runs.
pub struct ExperimentState {
    pub spec: ModelSpec,
    pub eval_set: Dataset,
    pub public_set: Dataset,
    pub plan: PartitionPlan,
    /// Per-client local data; attacker shards are already poisoned.
    pub client_data: Vec<Dataset>,
    pub attacker_ids: BTreeSet<usize>,
    /// Ground-truth attack, for metrics.
    pub poison_spec: PoisonSpec,
    pub detector: Option<Detector>,
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.dataset;
    match d.name.as_str() {
        "synthetic" => {
            let train = synthetic_blobs(
                d.train_size,
                d.n_classes,
                d.image_hw,
                derive_seed(cfg.seed, "data-train", 0),
            );
            let test = synthetic_blobs(
                d.test_size,
                d.n_classes,
                d.image_hw,
                derive_seed(cfg.seed, "data-test", 0),
            );
            Ok((train, test))
        }
        "cifar10" => {
            let dir = d.dir.as_ref().ok_or_else(|| {
                Error::InvalidArgument("cifar10 dataset needs a `dir`".into())
            })?;
            let train = load_cifar10(dir, true)?;
            let test = load_cifar10(dir, false)?;
            Ok((subsample(&train, d.train_size, cfg.seed), subsample(&test, d.test_size, cfg.seed)))
        }
        "manifest" => {
            let dir = d.dir.as_ref().ok_or_else(|| {
                Error::InvalidArgument("manifest dataset needs a `dir`".into())
            })?;
            let train = load_manifest_dir(&dir.join("train"), d.n_classes)?;
            let test = load_manifest_dir(&dir.join("test"), d.n_classes)?;
            Ok((subsample(&train, d.train_size, cfg.seed), subsample(&test, d.test_size, cfg.seed)))
        }
        other => Err(Error::InvalidArgument(format!(
            "unknown dataset '{other}' (expected synthetic | cifar10 | manifest)"
        ))),
    }
}

fn subsample(ds: &Dataset, cap: usize, seed: u64) -> Dataset {
    if ds.len() <= cap {
        return ds.clone();
    }
    let mut rng = seeded_rng(seed, "subsample", ds.len() as u64);
    let idx = rand::seq::index::sample(&mut rng, ds.len(), cap).into_vec();
    ds.subset(&idx)
}

/// Build the fixed experiment state: splits, partition, attacker shards, and
/// (for GANcrop) the trained detector.
pub fn setup(cfg: &ExperimentConfig) -> Result<(ParameterVector, ExperimentState)> {
    cfg.validate()?;
    let (train, test) = load_dataset(cfg)?;
    train.validate()?;
    test.validate()?;
    let image_shape = train.image_shape();
    let spec = ModelSpec::new(
        Architecture::from_name(&cfg.architecture)?,
        image_shape,
        train.n_classes,
    );

    // Carve the server's public set from the test split; the rest is the
    // evaluation subset.
    let mut test_idx: Vec<usize> = (0..test.len()).collect();
    {
        use rand::seq::SliceRandom;
        let mut rng = seeded_rng(cfg.seed, "public-split", 0);
        test_idx.shuffle(&mut rng);
    }
    let n_public = ((cfg.public_fraction * test.len() as f64).floor() as usize).max(1);
    let public_set = test.subset(&test_idx[..n_public]);
    let eval_set = test.subset(&test_idx[n_public..]);

    let partition_seed = cfg.partition.seed.unwrap_or(cfg.seed);
    let plan = dirichlet_partition_with(
        &train,
        cfg.n_clients,
        cfg.partition.alpha,
        partition_seed,
        cfg.partition.allow_empty_clients,
    )?;

    let n_attackers = (cfg.attacker_fraction * cfg.n_clients as f64).round() as usize;
    let mut rng = seeded_rng(cfg.seed, "attacker-assignment", 0);
    let attacker_ids: BTreeSet<usize> =
        rand::seq::index::sample(&mut rng, cfg.n_clients, n_attackers)
            .into_iter()
            .collect();

    let poison_spec = cfg.poison.to_spec(image_shape);
    poison_spec.validate(train.n_classes)?;
    let mut client_data = Vec::with_capacity(cfg.n_clients);
    for (client, indices) in plan.assignments.iter().enumerate() {
        let shard = train.subset(indices);
        if attacker_ids.contains(&client) {
            client_data.push(poison_dataset(
                &shard,
                &poison_spec,
                derive_seed(cfg.seed, "shard-poison", client as u64),
            )?);
        } else {
            client_data.push(shard);
        }
    }

    let detector = if cfg.aggregator == AggregatorKind::Gancrop {
        let sim_train = TrainConfig {
            epochs: cfg.detector.sim_local_epochs,
            seed: derive_seed(cfg.seed, "sim-train-base", 0),
            ..cfg.train.clone()
        };
        let pool = build_sim_pool(
            &spec,
            &public_set,
            &poison_spec.trigger,
            cfg.detector.sim_target,
            cfg.detector.sim_gamma,
            cfg.detector.n_sim,
            cfg.detector.sim_attacker_fraction,
            cfg.detector.sim_rounds,
            &sim_train,
            derive_seed(cfg.seed, "sim-pool", 0),
        )?;
        let det_cfg = DetectorConfig {
            seed: derive_seed(cfg.seed, "detector", 0),
            ..cfg.detector.clone()
        };
        Some(Detector::train(&spec, &pool, &det_cfg)?)
    } else {
        None
    };

    let global = spec.init_params(derive_seed(cfg.seed, "global-init", 0));
    Ok((
        global,
        ExperimentState {
            spec,
            eval_set,
            public_set,
            plan,
            client_data,
            attacker_ids,
            poison_spec,
            detector,
        },
    ))
}

// ---------------------------------------------------------------------------
// Rounds

/// GANcrop's server step: classify updates, recover and repair each suspect,
/// then merge the benign and repaired models.
pub fn gancrop_defense_step(
    updates: &[ClientUpdate],
    global: &ParameterVector,
    cfg: &ExperimentConfig,
    state: &ExperimentState,
    round_idx: usize,
) -> Result<(ParameterVector, Vec<DetectionVerdict>, SubmodelStats, Vec<usize>, f64, f64)> {
    let detector = state.detector.as_ref().ok_or_else(|| {
        Error::InvalidArgument("gancrop aggregation requires a trained detector".into())
    })?;
    let t0 = Instant::now();
    let verdicts = detector.classify_updates(updates, global, cfg.detector.threshold)?;
    let t_detect = t0.elapsed().as_secs_f64();

    let suspect_ids: BTreeSet<usize> = verdicts
        .iter()
        .filter(|v| v.label == VerdictLabel::Suspect)
        .map(|v| v.client_id)
        .collect();
    let benign: Vec<ClientUpdate> = updates
        .iter()
        .filter(|u| !suspect_ids.contains(&u.client_id))
        .cloned()
        .collect();
    let suspects: Vec<&ClientUpdate> = updates
        .iter()
        .filter(|u| suspect_ids.contains(&u.client_id))
        .collect();

    let t1 = Instant::now();
    // Each suspect's backdoor is recovered and retrained away independently.
    let repaired_results: Vec<(usize, Option<ClientUpdate>)> = suspects
        .par_iter()
        .map(|u| {
            let gen_cfg = cfg.generator.with_seed(derive_seed(
                cfg.seed,
                "recover",
                (round_idx * cfg.n_clients + u.client_id) as u64,
            ));
            let (_, recovered) =
                infer_target_class(&state.spec, &u.params, &state.public_set, &gen_cfg)?;
            if !recovered.converged {
                return Ok((u.client_id, None));
            }
            let repair_cfg = TrainConfig {
                learning_rate: cfg.repair.learning_rate,
                epochs: cfg.repair.epochs,
                batch_size: cfg.train.batch_size,
                seed: derive_seed(
                    cfg.seed,
                    "repair",
                    (round_idx * cfg.n_clients + u.client_id) as u64,
                ),
                momentum: 0.0,
            };
            let repaired = repair_model(
                &state.spec,
                &u.params,
                &state.public_set,
                &recovered,
                &repair_cfg,
                cfg.repair.augment_fraction,
            )?;
            Ok((
                u.client_id,
                Some(ClientUpdate {
                    client_id: u.client_id,
                    params: repaired,
                    n_samples: u.n_samples,
                    wall_time: 0.0,
                }),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let t_recover = t1.elapsed().as_secs_f64();

    let mut repaired = Vec::new();
    let mut dropped = Vec::new();
    for (client_id, update) in repaired_results {
        match update {
            Some(u) => repaired.push(u),
            None => dropped.push(client_id),
        }
    }

    let t2 = Instant::now();
    let new_global = gancrop_merge(&benign, &repaired)?;
    let t_aggregate = t2.elapsed().as_secs_f64();

    let eval_sub = |updates: &[ClientUpdate]| -> Result<(Option<f64>, Option<f64>)> {
        if updates.is_empty() {
            return Ok((None, None));
        }
        let sub = fedavg(updates)?;
        Ok((
            Some(evaluate(&state.spec, &sub, &state.eval_set)?),
            Some(backdoor_accuracy(
                &state.spec,
                &sub,
                &state.eval_set,
                &state.poison_spec,
            )?),
        ))
    };
    let (benign_main, benign_backdoor) = eval_sub(&benign)?;
    let (repaired_main, repaired_backdoor) = eval_sub(&repaired)?;
    let submodels = SubmodelStats {
        benign_main,
        benign_backdoor,
        repaired_main,
        repaired_backdoor,
        n_repaired: repaired.len(),
    };

    Ok((new_global, verdicts, submodels, dropped, t_detect, t_recover + t_aggregate))
}

/// Run one federated round: local training fan-out, defense/aggregation,
/// evaluation, and the round report.
pub fn run_round(
    global: &ParameterVector,
    cfg: &ExperimentConfig,
    round_idx: usize,
    state: &ExperimentState,
) -> Result<(ParameterVector, RoundReport)> {
    let t0 = Instant::now();
    let updates: Vec<ClientUpdate> = (0..cfg.n_clients)
        .into_par_iter()
        .map(|client| {
            let t = Instant::now();
            let train_cfg = cfg.train.with_seed(derive_seed(
                cfg.seed,
                "local-train",
                (round_idx * cfg.n_clients + client) as u64,
            ));
            let params = local_train(&state.spec, global, &state.client_data[client], &train_cfg)?;
            Ok(ClientUpdate {
                client_id: client,
                params,
                n_samples: state.client_data[client].len(),
                wall_time: t.elapsed().as_secs_f64(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let t_train = t0.elapsed().as_secs_f64();

    let mut verdicts = Vec::new();
    let mut submodels = None;
    let mut dropped = Vec::new();
    let mut t_detect = 0.0;
    let mut t_recover = 0.0;
    let t_agg_start = Instant::now();
    let new_global = match cfg.aggregator {
        AggregatorKind::Fedavg => fedavg(&updates)?,
        AggregatorKind::Krum => krum(&updates, cfg.krum_f())?,
        AggregatorKind::TrimmedMean => trimmed_mean(&updates, cfg.trim_k())?,
        AggregatorKind::Fang => fang_lfr(
            &state.spec,
            &updates,
            global,
            &state.public_set,
            cfg.fang_n_reject(),
        )?,
        AggregatorKind::Gancrop => {
            let (g, v, s, d, td, tr) =
                gancrop_defense_step(&updates, global, cfg, state, round_idx)?;
            verdicts = v;
            submodels = Some(s);
            dropped = d;
            t_detect = td;
            t_recover = tr;
            g
        }
    };
    let t_aggregate = if cfg.aggregator == AggregatorKind::Gancrop {
        0.0 // folded into t_recover by the defense step
    } else {
        t_agg_start.elapsed().as_secs_f64()
    };

    let main_acc = evaluate(&state.spec, &new_global, &state.eval_set)?;
    let backdoor_acc = backdoor_accuracy(&state.spec, &new_global, &state.eval_set, &state.poison_spec)?;

    let suspects: Vec<usize> = verdicts
        .iter()
        .filter(|v| v.label == VerdictLabel::Suspect)
        .map(|v| v.client_id)
        .collect();
    let true_positives = suspects
        .iter()
        .filter(|id| state.attacker_ids.contains(id))
        .count();
    let false_positives = suspects.len() - true_positives;

    let report = RoundReport {
        round: round_idx,
        main_acc,
        backdoor_acc,
        n_suspects: suspects.len(),
        true_positives,
        false_positives,
        verdicts,
        t_train,
        t_detect,
        t_recover,
        t_aggregate,
        global_digest: digest_params(&new_global),
        submodels,
        dropped_clients: dropped,
    };
    Ok((new_global, report))
}

// ---------------------------------------------------------------------------
// Experiment driver

pub const ROUNDS_CSV_HEADER: &str =
    "round,main_acc,backdoor_acc,n_suspects,true_positives,false_positives,t_train,t_detect,t_recover,t_aggregate";

fn csv_row(r: &RoundReport) -> String {
    format!(
        "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
        r.round,
        r.main_acc,
        r.backdoor_acc,
        r.n_suspects,
        r.true_positives,
        r.false_positives,
        r.t_train,
        r.t_detect,
        r.t_recover,
        r.t_aggregate
    )
}

fn submodel_csv_row(r: &RoundReport) -> Option<String> {
    let s = r.submodels.as_ref()?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    Some(format!(
        "{},{},{},{},{},{}",
        r.round,
        opt(s.benign_main),
        opt(s.benign_backdoor),
        opt(s.repaired_main),
        opt(s.repaired_backdoor),
        s.n_repaired
    ))
}

struct ReportSinks {
    rounds_csv: fs::File,
    rounds_jsonl: fs::File,
    submodels_csv: Option<fs::File>,
}

impl ReportSinks {
    fn create(dir: &Path, gancrop: bool) -> Result<ReportSinks> {
        fs::create_dir_all(dir)?;
        let mut rounds_csv = fs::File::create(dir.join("rounds.csv"))?;
        writeln!(rounds_csv, "{ROUNDS_CSV_HEADER}")?;
        let rounds_jsonl = fs::File::create(dir.join("rounds.jsonl"))?;
        let submodels_csv = if gancrop {
            let mut f = fs::File::create(dir.join("submodels.csv"))?;
            writeln!(
                f,
                "round,benign_main_acc,benign_backdoor_acc,repaired_main_acc,repaired_backdoor_acc,n_repaired"
            )?;
            Some(f)
        } else {
            None
        };
        Ok(ReportSinks {
            rounds_csv,
            rounds_jsonl,
            submodels_csv,
        })
    }

    fn write(&mut self, report: &RoundReport) -> Result<()> {
        writeln!(self.rounds_csv, "{}", csv_row(report))?;
        self.rounds_csv.flush()?;
        writeln!(self.rounds_jsonl, "{}", serde_json::to_string(report)?)?;
        self.rounds_jsonl.flush()?;
        if let (Some(f), Some(row)) = (self.submodels_csv.as_mut(), submodel_csv_row(report)) {
            writeln!(f, "{row}")?;
            f.flush()?;
        }
        Ok(())
    }
}

/// Run a full experiment. Reports stream to `out_dir` (rounds.csv,
/// rounds.jsonl, submodels.csv for GANcrop) as rounds complete, so partial
/// results survive an aborted run; a final `FCROP1` checkpoint is written on
/// success.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<Vec<RoundReport>> {
    let (mut global, state) = setup(cfg)?;
    let mut sinks = match out_dir {
        Some(dir) => Some(ReportSinks::create(
            dir,
            cfg.aggregator == AggregatorKind::Gancrop,
        )?),
        None => None,
    };
    let mut reports = Vec::with_capacity(cfg.rounds);
    for round_idx in 0..cfg.rounds {
        let (next, report) = run_round(&global, cfg, round_idx, &state)
            .map_err(|e| e.in_round(round_idx))?;
        global = next;
        if let Some(s) = sinks.as_mut() {
            s.write(&report)?;
        }
        reports.push(report);
    }
    if let Some(dir) = out_dir {
        let meta = serde_json::json!({
            "arch": cfg.architecture,
            "input_shape": state.spec.input_shape,
            "n_classes": state.spec.n_classes,
            "aggregator": cfg.aggregator.name(),
            "seed": cfg.seed,
        });
        save_checkpoint(&dir.join("final.fcrop"), &global, &meta)?;
        if let Some(det) = &state.detector {
            det.save(&dir.join("detector.fcrop"))?;
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Tiny config for fast orchestration tests.
    fn tiny_cfg(aggregator: AggregatorKind) -> ExperimentConfig {
        let mut cfg = desk_profile();
        cfg.aggregator = aggregator;
        cfg.n_clients = 4;
        cfg.rounds = 2;
        cfg.dataset.train_size = 240;
        cfg.dataset.test_size = 120;
        cfg.dataset.image_hw = 8;
        cfg.dataset.n_classes = 4;
        cfg.poison.patch_size = 2;
        cfg.train.epochs = 1;
        cfg.train.batch_size = 16;
        cfg.detector.n_sim = 6;
        cfg.detector.sim_rounds = 1;
        cfg.detector.epochs = 8;
        cfg.generator.steps = 12;
        cfg.generator.batch_size = 8;
        cfg.repair.epochs = 2;
        cfg
    }

    #[test]
    fn no_attack_fedavg_round_equals_plain_fedavg() {
        let mut cfg = tiny_cfg(AggregatorKind::Fedavg);
        cfg.attacker_fraction = 0.0;
        let (global, state) = setup(&cfg).unwrap();
        assert!(state.attacker_ids.is_empty());
        let (next, report) = run_round(&global, &cfg, 0, &state).unwrap();
        // rebuild the same updates by hand and fedavg them
        let updates: Vec<ClientUpdate> = (0..cfg.n_clients)
            .map(|client| {
                let train_cfg = cfg.train.with_seed(derive_seed(
                    cfg.seed,
                    "local-train",
                    client as u64,
                ));
                let params =
                    local_train(&state.spec, &global, &state.client_data[client], &train_cfg)
                        .unwrap();
                ClientUpdate::new(client, params, state.client_data[client].len())
            })
            .collect();
        let expect = fedavg(&updates).unwrap();
        assert_eq!(next.values, expect.values);
        assert_eq!(report.n_suspects, 0);
        assert!(report.verdicts.is_empty());
    }

    #[test]
    fn gancrop_with_no_suspects_degenerates_to_fedavg() {
        let mut cfg = tiny_cfg(AggregatorKind::Gancrop);
        cfg.detector.threshold = 1.0 + 1e-9; // force every verdict to benign
        let (global, state) = setup(&cfg).unwrap();
        let (next, report) = run_round(&global, &cfg, 0, &state).unwrap();
        assert_eq!(report.n_suspects, 0);
        assert_eq!(report.verdicts.len(), cfg.n_clients);

        let mut fed_cfg = cfg.clone();
        fed_cfg.aggregator = AggregatorKind::Fedavg;
        let (fed_global, fed_state) = setup(&fed_cfg).unwrap();
        assert_eq!(fed_global.values, global.values);
        let (fed_next, _) = run_round(&fed_global, &fed_cfg, 0, &fed_state).unwrap();
        assert_eq!(next.values, fed_next.values);
    }

    #[test]
    fn runs_are_bit_reproducible() {
        let cfg = tiny_cfg(AggregatorKind::Fedavg);
        let a = run_experiment(&cfg, None).unwrap();
        let b = run_experiment(&cfg, None).unwrap();
        assert_eq!(reports_digest(&a), reports_digest(&b));
        let mut cfg2 = cfg.clone();
        cfg2.seed = 1;
        let c = run_experiment(&cfg2, None).unwrap();
        assert_ne!(reports_digest(&a), reports_digest(&c));
    }

    #[test]
    fn report_files_are_written_and_flushed() {
        let cfg = tiny_cfg(AggregatorKind::Fedavg);
        let dir = tempfile::tempdir().unwrap();
        let reports = run_experiment(&cfg, Some(dir.path())).unwrap();
        assert_eq!(reports.len(), cfg.rounds);
        let csv = fs::read_to_string(dir.path().join("rounds.csv")).unwrap();
        assert_eq!(csv.lines().count(), cfg.rounds + 1); // header + rows
        assert!(csv.lines().next().unwrap().starts_with("round,main_acc"));
        let jsonl = fs::read_to_string(dir.path().join("rounds.jsonl")).unwrap();
        assert_eq!(jsonl.lines().count(), cfg.rounds);
        let parsed: RoundReport = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
        assert_eq!(parsed.round, 0);
        assert!(dir.path().join("final.fcrop").exists());
    }

    #[test]
    fn config_profiles_resolve_and_merge() {
        let cfg = load_config(r#"{"profile": "desk", "aggregator": "krum", "rounds": 3}"#).unwrap();
        assert_eq!(cfg.aggregator, AggregatorKind::Krum);
        assert_eq!(cfg.rounds, 3);
        assert_eq!(cfg.n_clients, 10); // desk default
        let paper = load_config(r#"{"profile": "paper"}"#).unwrap();
        assert_eq!(paper.n_clients, 40);
        assert_eq!(paper.rounds, 50);
        assert_eq!(paper.partition.alpha, 0.7);
        assert_eq!(paper.train.epochs, 4);
        assert_eq!(paper.train.learning_rate, 0.1);
        assert_eq!(paper.attacker_fraction, 0.3);
        assert!(load_config(r#"{"profile": "nope"}"#).is_err());
        // nested overrides keep sibling defaults
        let nested = load_config(r#"{"train": {"epochs": 7}}"#).unwrap();
        assert_eq!(nested.train.epochs, 7);
        assert_eq!(nested.train.batch_size, desk_profile().train.batch_size);
    }

    #[test]
    fn default_knobs_follow_attack_ratio() {
        let cfg = desk_profile();
        assert_eq!(cfg.krum_f(), 3); // ceil(0.3 * 10)
        assert_eq!(cfg.trim_k(), 3); // floor(0.3 * 10)
        assert_eq!(cfg.fang_n_reject(), 3);
    }
}
