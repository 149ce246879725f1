//! `fedcrop` — config-driven federated-learning backdoor experiments.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fedcrop::aggregation::AggregatorKind;
use fedcrop::checkpoint::load_checkpoint;
use fedcrop::data::{load_manifest_dir, Dataset, ImageSample};
use fedcrop::model::{Architecture, ModelSpec};
use fedcrop::orchestrator::{load_config, run_experiment, setup, ExperimentConfig};
use fedcrop::recovery::{infer_target_class, GeneratorConfig, TargetSelection};
use fedcrop::summary::{compare_methods, summarize};
use ndarray::Array3;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "fedcrop", version, about = "Federated-learning backdoor attack/defense simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for rounds.csv / rounds.jsonl / checkpoints.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config seed (takes precedence over FEDCROP_SEED).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run several configs against shared seeds and compare the methods.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
        #[arg(long, default_value = "compare-out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pre-train the contrastive detector and cache it as a checkpoint.
    DetectTrain {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint path (default: detector.fcrop).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recover a trigger from a model checkpoint using probe images.
    Recover {
        /// FCROP1 model checkpoint with arch metadata.
        #[arg(long)]
        model: PathBuf,
        /// Directory of probe images (manifest dir or loose PNGs).
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fix the target class instead of searching all classes.
        #[arg(long)]
        target: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn effective_seed(flag: Option<u64>) -> Option<u64> {
    flag.or_else(|| {
        std::env::var("FEDCROP_SEED")
            .ok()
            .and_then(|s| s.parse().ok())
    })
}

fn load_experiment_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut cfg = load_config(&text).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(s) = effective_seed(seed) {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn cmd_run(config: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let cfg = load_experiment_config(config, seed)?;
    let method = cfg.method_name();
    let default_out = PathBuf::from(format!("out-{method}"));
    let out_dir = out.unwrap_or(&default_out);
    eprintln!(
        "running {method}: {} clients, {} rounds, seed {} -> {}",
        cfg.n_clients,
        cfg.rounds,
        cfg.seed,
        out_dir.display()
    );
    let reports = run_experiment(&cfg, Some(out_dir))?;
    let summary = summarize(&method, &reports)?;
    println!(
        "{}: defense_success_rounds={} final_main_acc={:.4} final_backdoor_acc={:.4} mean_round_time={:.2}s",
        summary.method,
        summary.defense_success_rounds,
        summary.final_main_acc,
        summary.final_backdoor_acc,
        summary.mean_round_time
    );
    Ok(())
}

fn cmd_compare(configs: &[PathBuf], out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfgs = Vec::new();
    for path in configs {
        cfgs.push(load_experiment_config(path, seed)?);
    }
    let (summaries, _) = compare_methods(&cfgs, Some(out))?;
    println!(
        "{:<14} {:>8} {:>12} {:>14} {:>12}  status",
        "method", "defended", "final main", "final backdoor", "round time"
    );
    for s in &summaries {
        println!(
            "{:<14} {:>8} {:>12.4} {:>14.4} {:>11.2}s  {}",
            s.method,
            s.defense_success_rounds,
            s.final_main_acc,
            s.final_backdoor_acc,
            s.mean_round_time,
            s.status
        );
    }
    if summaries.iter().any(|s| s.status != "ok") {
        bail!("one or more methods failed");
    }
    Ok(())
}

fn cmd_detect_train(config: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_experiment_config(config, seed)?;
    cfg.aggregator = AggregatorKind::Gancrop; // setup trains the detector for gancrop
    let (_, state) = setup(&cfg)?;
    let detector = state
        .detector
        .expect("gancrop setup always trains a detector");
    let out_path = out.unwrap_or(Path::new("detector.fcrop"));
    detector.save(out_path)?;
    println!(
        "detector trained (head accuracy {:.3}) -> {}",
        detector.head.train_accuracy,
        out_path.display()
    );
    Ok(())
}

fn load_probe_images(dir: &Path, spec: &ModelSpec) -> Result<Dataset> {
    if dir.join("manifest.json").exists() {
        return Ok(load_manifest_dir(dir, spec.n_classes)?);
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .png probe images in {}", dir.display());
    }
    let (c, h, w) = spec.input_shape;
    if c != 3 {
        bail!("probe loader expects 3-channel models");
    }
    let mut samples = Vec::new();
    for path in paths {
        let img = image::open(&path)
            .with_context(|| format!("decoding {}", path.display()))?
            .to_rgb8();
        if (img.height() as usize, img.width() as usize) != (h, w) {
            bail!(
                "{}: image is {}x{}, model expects {h}x{w}",
                path.display(),
                img.height(),
                img.width()
            );
        }
        let mut pixels = Array3::<f32>::zeros((3, h, w));
        for (x, y, p) in img.enumerate_pixels() {
            for ch in 0..3 {
                pixels[(ch, y as usize, x as usize)] = p.0[ch] as f32 / 255.0;
            }
        }
        samples.push(ImageSample { pixels, label: 0 });
    }
    Ok(Dataset::new(samples, spec.n_classes))
}

fn cmd_recover(
    model: &Path,
    images: &Path,
    out: &Path,
    target: Option<usize>,
    steps: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let (params, meta) = load_checkpoint(model)?;
    let arch = meta["arch"]
        .as_str()
        .context("checkpoint metadata missing `arch`")?;
    let shape = meta["input_shape"]
        .as_array()
        .context("checkpoint metadata missing `input_shape`")?;
    let input_shape = (
        shape[0].as_u64().context("bad input_shape")? as usize,
        shape[1].as_u64().context("bad input_shape")? as usize,
        shape[2].as_u64().context("bad input_shape")? as usize,
    );
    let n_classes = meta["n_classes"]
        .as_u64()
        .context("checkpoint metadata missing `n_classes`")? as usize;
    let spec = ModelSpec::new(Architecture::from_name(arch)?, input_shape, n_classes);
    let probes = load_probe_images(images, &spec)?;
    let cfg = GeneratorConfig {
        target_class: match target {
            Some(k) => TargetSelection::Class(k),
            None => TargetSelection::Search,
        },
        steps: steps.unwrap_or(GeneratorConfig::default().steps),
        seed: effective_seed(seed).unwrap_or(0),
        ..GeneratorConfig::default()
    };
    eprintln!(
        "recovering trigger from {} with {} probes",
        model.display(),
        probes.len()
    );
    let (class, recovered) = infer_target_class(&spec, &params, &probes, &cfg)?;
    recovered.save(out, &cfg)?;
    println!(
        "target_class={class} flip_rate={:.3} mean_norm={:.4} converged={} -> {}",
        recovered.flip_rate,
        recovered.mean_norm,
        recovered.converged,
        out.display()
    );
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, out, seed } => cmd_run(config, out.as_deref(), *seed),
        Command::Compare { configs, out, seed } => cmd_compare(configs, out, *seed),
        Command::DetectTrain { config, out, seed } => {
            cmd_detect_train(config, out.as_deref(), *seed)
        }
        Command::Recover {
            model,
            images,
            out,
            target,
            steps,
            seed,
        } => cmd_recover(model, images, out, *target, *steps, *seed),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
