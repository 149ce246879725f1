//! Metric summarization and multi-method comparison.

use crate::error::{Error, Result};
use crate::orchestrator::{run_experiment, ExperimentConfig, RoundReport};
use crate::plots::emit_plots;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

/// One method's end-of-run summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryReport {
    pub method: String,
    pub defense_success_rounds: usize,
    pub final_main_acc: f64,
    pub final_backdoor_acc: f64,
    pub mean_round_time: f64,
    /// "ok", or the error that stopped the run.
    pub status: String,
}

/// Count rounds whose backdoor accuracy falls strictly below `threshold`.
pub fn defense_success_rounds(history: &[f64], threshold: f64) -> Result<usize> {
    if history.is_empty() {
        return Err(Error::InvalidArgument(
            "defense_success_rounds needs a non-empty history".into(),
        ));
    }
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::InvalidArgument(
            "threshold must be in (0,1)".into(),
        ));
    }
    Ok(history.iter().filter(|&&b| b < threshold).count())
}

/// Paper's defense-success bar: backdoor accuracy below 30%.
pub const DEFENSE_SUCCESS_THRESHOLD: f64 = 0.3;

/// Summarize a completed run.
pub fn summarize(method: &str, reports: &[RoundReport]) -> Result<SummaryReport> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no reports to summarize".into()));
    }
    let history: Vec<f64> = reports.iter().map(|r| r.backdoor_acc).collect();
    let last = reports.last().expect("non-empty");
    Ok(SummaryReport {
        method: method.to_string(),
        defense_success_rounds: defense_success_rounds(&history, DEFENSE_SUCCESS_THRESHOLD)?,
        final_main_acc: last.main_acc,
        final_backdoor_acc: last.backdoor_acc,
        mean_round_time: reports.iter().map(|r| r.total_time()).sum::<f64>() / reports.len() as f64,
        status: "ok".into(),
    })
}

/// Run every config and produce one summary per method, plus `summary.csv`
/// and comparison plots under `out_dir`. Configs must share the experiment
/// and partition seeds so the comparison is paired. A method that fails is
/// recorded with its error; the rest still run.
pub fn compare_methods(
    configs: &[ExperimentConfig],
    out_dir: Option<&Path>,
) -> Result<(Vec<SummaryReport>, Vec<(String, Vec<RoundReport>)>)> {
    if configs.is_empty() {
        return Err(Error::InvalidArgument("no configs to compare".into()));
    }
    let first = &configs[0];
    for cfg in configs {
        let same_partition_seed = cfg.partition.seed.unwrap_or(cfg.seed)
            == first.partition.seed.unwrap_or(first.seed);
        if cfg.seed != first.seed || !same_partition_seed {
            return Err(Error::InvalidArgument(
                "compare_methods needs identical dataset/partition seeds across configs".into(),
            ));
        }
    }

    let mut summaries = Vec::with_capacity(configs.len());
    let mut all_reports: Vec<(String, Vec<RoundReport>)> = Vec::new();
    for cfg in configs {
        let method = cfg.method_name();
        let method_dir = out_dir.map(|d| d.join(&method));
        match run_experiment(cfg, method_dir.as_deref()) {
            Ok(reports) => {
                summaries.push(summarize(&method, &reports)?);
                all_reports.push((method, reports));
            }
            Err(e) => summaries.push(SummaryReport {
                method,
                defense_success_rounds: 0,
                final_main_acc: f64::NAN,
                final_backdoor_acc: f64::NAN,
                mean_round_time: f64::NAN,
                status: e.to_string(),
            }),
        }
    }

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        write_summary_csv(&summaries, &dir.join("summary.csv"))?;
        if !all_reports.is_empty() {
            emit_plots(&all_reports, dir)?;
        }
    }
    Ok((summaries, all_reports))
}

pub fn write_summary_csv(summaries: &[SummaryReport], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(
        f,
        "method,defense_success_rounds,final_main_acc,final_backdoor_acc,mean_round_time,status"
    )?;
    for s in summaries {
        writeln!(
            f,
            "{},{},{},{},{:.6},{}",
            s.method,
            s.defense_success_rounds,
            s.final_main_acc,
            s.final_backdoor_acc,
            s.mean_round_time,
            s.status
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_rounds_under_the_bar() {
        assert_eq!(
            defense_success_rounds(&[0.9, 0.2, 0.25, 0.8], 0.3).unwrap(),
            2
        );
        assert_eq!(defense_success_rounds(&[0.0; 50], 0.3).unwrap(), 50);
        // strict inequality at the boundary
        assert_eq!(defense_success_rounds(&[0.3], 0.3).unwrap(), 0);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(defense_success_rounds(&[], 0.3).is_err());
        assert!(defense_success_rounds(&[0.1], 0.0).is_err());
        assert!(defense_success_rounds(&[0.1], 1.0).is_err());
    }

    #[test]
    fn monotone_in_threshold() {
        let history = [0.05, 0.12, 0.31, 0.29, 0.6, 0.45, 0.3];
        let mut last = 0;
        for t in [0.1, 0.2, 0.3, 0.4, 0.5, 0.9] {
            let n = defense_success_rounds(&history, t).unwrap();
            assert!(n >= last);
            last = n;
        }
    }

    #[test]
    fn mismatched_seeds_are_rejected() {
        let mut a = crate::orchestrator::desk_profile();
        a.rounds = 1;
        let mut b = a.clone();
        b.seed = 99;
        assert!(compare_methods(&[a, b], None).is_err());
    }
}
