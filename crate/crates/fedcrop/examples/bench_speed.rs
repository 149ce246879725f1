//! Scratch calibration runs (not part of the test suite).

use fedcrop::aggregation::AggregatorKind;
use fedcrop::orchestrator::{desk_profile, run_experiment};
use std::time::Instant;

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "fedavg".into());
    let seed: u64 = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let mut cfg = desk_profile();
    cfg.seed = seed;
    cfg.aggregator = match which.as_str() {
        "fedavg" => AggregatorKind::Fedavg,
        "krum" => AggregatorKind::Krum,
        "trimmed_mean" => AggregatorKind::TrimmedMean,
        "fang" => AggregatorKind::Fang,
        "gancrop" => AggregatorKind::Gancrop,
        other => panic!("unknown method {other}"),
    };
    let t = Instant::now();
    let reports = run_experiment(&cfg, None).unwrap();
    let total = t.elapsed().as_secs_f64();
    for r in &reports {
        print!(
            "round {:2}: main {:.3} backdoor {:.3} suspects {} tp {} fp {} | train {:.1}s recover {:.1}s",
            r.round, r.main_acc, r.backdoor_acc, r.n_suspects, r.true_positives, r.false_positives,
            r.t_train, r.t_recover
        );
        if let Some(s) = &r.submodels {
            print!(
                " | sub benign m{:.2}/b{:.2} repaired m{:.2}/b{:.2} n={}",
                s.benign_main.unwrap_or(f64::NAN),
                s.benign_backdoor.unwrap_or(f64::NAN),
                s.repaired_main.unwrap_or(f64::NAN),
                s.repaired_backdoor.unwrap_or(f64::NAN),
                s.n_repaired
            );
        }
        println!();
    }
    println!("== {which} seed {seed}: total {total:.1}s");
}
