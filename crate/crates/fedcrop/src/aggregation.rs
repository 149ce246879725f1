//! Server-side aggregation rules: FedAvg, Krum, coordinate-wise trimmed mean,
//! loss-based rejection ("Fang"), and the merge used after detect-and-repair.
//!
//! All rules canonicalize input order by client id, so results are exactly
//! permutation-invariant.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{mean_loss, ModelSpec, ParameterVector};
use serde::{Deserialize, Serialize};
use std::str::FromStr;

/// One client's contribution to a round.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ParameterVector,
    pub n_samples: usize,
    pub wall_time: f64,
}

impl ClientUpdate {
    pub fn new(client_id: usize, params: ParameterVector, n_samples: usize) -> Self {
        ClientUpdate {
            client_id,
            params,
            n_samples,
            wall_time: 0.0,
        }
    }
}

fn check_updates(updates: &[ClientUpdate]) -> Result<()> {
    if updates.is_empty() {
        return Err(Error::InsufficientUpdates("no updates to aggregate".into()));
    }
    let layout = &updates[0].params.layout;
    for u in updates {
        if &u.params.layout != layout {
            return Err(Error::LayoutMismatch(format!(
                "client {} layout differs",
                u.client_id
            )));
        }
        if u.n_samples == 0 {
            return Err(Error::InvalidArgument(format!(
                "client {} has zero samples",
                u.client_id
            )));
        }
        if !u.params.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "client {} sent non-finite parameters",
                u.client_id
            )));
        }
    }
    Ok(())
}

fn by_client_id(updates: &[ClientUpdate]) -> Vec<&ClientUpdate> {
    let mut refs: Vec<&ClientUpdate> = updates.iter().collect();
    refs.sort_by_key(|u| u.client_id);
    refs
}

/// Sample-count-weighted coordinate-wise average.
pub fn fedavg(updates: &[ClientUpdate]) -> Result<ParameterVector> {
    check_updates(updates)?;
    let refs = by_client_id(updates);
    let total: f64 = refs.iter().map(|u| u.n_samples as f64).sum();
    let dim = refs[0].params.values.len();
    let mut acc = vec![0.0f64; dim];
    for u in &refs {
        let w = u.n_samples as f64 / total;
        for (a, v) in acc.iter_mut().zip(&u.params.values) {
            *a += w * (*v as f64);
        }
    }
    Ok(ParameterVector {
        values: acc.into_iter().map(|v| v as f32).collect(),
        layout: refs[0].params.layout.clone(),
    })
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (*x as f64) - (*y as f64);
            d * d
        })
        .sum()
}

/// Krum selection: return the update minimizing the summed squared distance
/// to its `n - f - 2` nearest neighbours. Ties break toward the lowest
/// client id. Requires `n >= f + 3`.
pub fn krum(updates: &[ClientUpdate], f: usize) -> Result<ParameterVector> {
    check_updates(updates)?;
    let n = updates.len();
    if n < f + 3 {
        return Err(Error::InsufficientUpdates(format!(
            "krum needs n >= f + 3 (n={n}, f={f})"
        )));
    }
    let refs = by_client_id(updates);
    let neighbours = n - f - 2;
    let mut best: Option<(f64, usize, usize)> = None; // (score, client_id, index)
    for (i, u) in refs.iter().enumerate() {
        let mut dists: Vec<f64> = refs
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, v)| squared_distance(&u.params.values, &v.params.values))
            .collect();
        dists.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        let score: f64 = dists[..neighbours].iter().sum();
        let key = (score, u.client_id, i);
        if best.map_or(true, |(s, id, _)| (score, u.client_id) < (s, id)) {
            best = Some(key);
        }
    }
    let (_, _, idx) = best.expect("non-empty updates");
    Ok(refs[idx].params.clone())
}

/// Coordinate-wise trimmed mean: per coordinate, sort all `n` values, drop
/// the `k` smallest and `k` largest, average the rest unweighted. Requires
/// `n > 2k`.
pub fn trimmed_mean(updates: &[ClientUpdate], k: usize) -> Result<ParameterVector> {
    check_updates(updates)?;
    let n = updates.len();
    if n <= 2 * k {
        return Err(Error::InsufficientUpdates(format!(
            "trimmed mean needs n > 2k (n={n}, k={k})"
        )));
    }
    let refs = by_client_id(updates);
    let dim = refs[0].params.values.len();
    let mut out = vec![0.0f32; dim];
    let mut column = vec![0.0f32; n];
    for d in 0..dim {
        for (slot, u) in column.iter_mut().zip(&refs) {
            *slot = u.params.values[d];
        }
        column.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite values"));
        let kept = &column[k..n - k];
        let sum: f64 = kept.iter().map(|v| *v as f64).sum();
        out[d] = (sum / kept.len() as f64) as f32;
    }
    Ok(ParameterVector {
        values: out,
        layout: refs[0].params.layout.clone(),
    })
}

/// Loss-based rejection: for each update, score the validation loss of the
/// FedAvg of all *other* updates; reject the `n_reject` updates whose
/// exclusion lowers the loss most, then FedAvg the rest.
pub fn fang_lfr(
    spec: &ModelSpec,
    updates: &[ClientUpdate],
    global: &ParameterVector,
    val_set: &Dataset,
    n_reject: usize,
) -> Result<ParameterVector> {
    check_updates(updates)?;
    if updates[0].params.layout != global.layout {
        return Err(Error::LayoutMismatch(
            "updates incompatible with global model".into(),
        ));
    }
    let n = updates.len();
    if n_reject >= n {
        return Err(Error::InvalidArgument(format!(
            "cannot reject {n_reject} of {n} updates"
        )));
    }
    if val_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if n_reject == 0 {
        return fedavg(updates);
    }
    let refs = by_client_id(updates);
    // (leave-one-out loss, client_id) per update
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (i, u) in refs.iter().enumerate() {
        let rest: Vec<ClientUpdate> = refs
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, v)| (*v).clone())
            .collect();
        let loo = fedavg(&rest)?;
        let loss = mean_loss(spec, &loo, val_set)?;
        scored.push((loss, u.client_id));
    }
    let mut ranked = scored.clone();
    ranked.sort_by(|a, b| a.partial_cmp(b).expect("finite losses"));
    let rejected: std::collections::BTreeSet<usize> =
        ranked[..n_reject].iter().map(|(_, id)| *id).collect();
    let kept: Vec<ClientUpdate> = refs
        .iter()
        .filter(|u| !rejected.contains(&u.client_id))
        .map(|u| (*u).clone())
        .collect();
    fedavg(&kept)
}

/// Final GANcrop merge: FedAvg over verdict-benign and repaired models
/// together, weighted by their sample counts.
pub fn gancrop_merge(
    benign: &[ClientUpdate],
    repaired: &[ClientUpdate],
) -> Result<ParameterVector> {
    if benign.is_empty() && repaired.is_empty() {
        return Err(Error::NoModelsToMerge);
    }
    let mut all: Vec<ClientUpdate> = Vec::with_capacity(benign.len() + repaired.len());
    all.extend_from_slice(benign);
    all.extend_from_slice(repaired);
    fedavg(&all)
}

/// Aggregation rule selector, parsed from config strings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    Fedavg,
    Krum,
    TrimmedMean,
    Fang,
    Gancrop,
}

impl AggregatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            AggregatorKind::Fedavg => "fedavg",
            AggregatorKind::Krum => "krum",
            AggregatorKind::TrimmedMean => "trimmed_mean",
            AggregatorKind::Fang => "fang",
            AggregatorKind::Gancrop => "gancrop",
        }
    }
}

impl FromStr for AggregatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(AggregatorKind::Fedavg),
            "krum" => Ok(AggregatorKind::Krum),
            "trimmed_mean" => Ok(AggregatorKind::TrimmedMean),
            "fang" => Ok(AggregatorKind::Fang),
            "gancrop" => Ok(AggregatorKind::Gancrop),
            other => Err(Error::InvalidArgument(format!(
                "unknown aggregator '{other}' (expected fedavg | krum | trimmed_mean | fang | gancrop)"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Layout, LayoutEntry};

    fn vec_update(id: usize, values: Vec<f32>, n_samples: usize) -> ClientUpdate {
        let layout = Layout(vec![LayoutEntry {
            name: "w".into(),
            shape: vec![values.len()],
        }]);
        ClientUpdate::new(id, ParameterVector { values, layout }, n_samples)
    }

    #[test]
    fn fedavg_midpoint_and_weighted() {
        let mid = fedavg(&[
            vec_update(0, vec![0.0, 2.0], 5),
            vec_update(1, vec![2.0, 4.0], 5),
        ])
        .unwrap();
        assert_eq!(mid.values, vec![1.0, 3.0]);

        let weighted = fedavg(&[vec_update(0, vec![0.0], 1), vec_update(1, vec![3.0], 2)])
            .unwrap();
        assert!((weighted.values[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn fedavg_identical_updates_is_idempotent() {
        let out = fedavg(&[
            vec_update(0, vec![0.5, -1.5], 3),
            vec_update(1, vec![0.5, -1.5], 9),
        ])
        .unwrap();
        assert_eq!(out.values, vec![0.5, -1.5]);
    }

    #[test]
    fn krum_picks_the_centre_of_the_cluster() {
        // scores with f=1, n=5 use the 2 nearest neighbours:
        // score(0.2) = 0.04 + 0.09 = 0.13 is minimal
        let updates = vec![
            vec_update(0, vec![0.0], 1),
            vec_update(1, vec![0.2], 1),
            vec_update(2, vec![0.5], 1),
            vec_update(3, vec![0.9], 1),
            vec_update(4, vec![10.0], 1),
        ];
        let out = krum(&updates, 1).unwrap();
        assert_eq!(out.values, vec![0.2]);
    }

    #[test]
    fn krum_identical_updates_tie_break_and_selection_rule() {
        let updates = vec![
            vec_update(2, vec![1.0, 1.0], 1),
            vec_update(0, vec![1.0, 1.0], 1),
            vec_update(1, vec![1.0, 1.0], 1),
            vec_update(3, vec![1.0, 1.0], 1),
        ];
        let out = krum(&updates, 1).unwrap();
        assert_eq!(out.values, vec![1.0, 1.0]);
        // output is exactly one of the inputs
        assert!(updates.iter().any(|u| u.params.values == out.values));
    }

    #[test]
    fn krum_needs_enough_updates() {
        let updates = vec![
            vec_update(0, vec![0.0], 1),
            vec_update(1, vec![1.0], 1),
            vec_update(2, vec![2.0], 1),
        ];
        assert!(krum(&updates, 1).is_err());
    }

    #[test]
    fn trimmed_mean_drops_extremes() {
        let updates = vec![
            vec_update(0, vec![1.0], 1),
            vec_update(1, vec![2.0], 1),
            vec_update(2, vec![3.0], 1),
            vec_update(3, vec![4.0], 1),
            vec_update(4, vec![100.0], 1),
        ];
        let out = trimmed_mean(&updates, 1).unwrap();
        assert_eq!(out.values, vec![3.0]);
        // k=0 is the unweighted mean
        let mean = trimmed_mean(&updates, 0).unwrap();
        assert_eq!(mean.values, vec![22.0]);
        // all equal stays equal for any valid k
        let eq = vec![
            vec_update(0, vec![7.0], 1),
            vec_update(1, vec![7.0], 2),
            vec_update(2, vec![7.0], 3),
        ];
        assert_eq!(trimmed_mean(&eq, 1).unwrap().values, vec![7.0]);
        assert!(trimmed_mean(&eq, 2).is_err());
    }

    #[test]
    fn aggregators_are_permutation_invariant() {
        let a = vec![
            vec_update(0, vec![0.1, 0.9], 2),
            vec_update(1, vec![0.4, -0.3], 5),
            vec_update(2, vec![-0.2, 0.7], 1),
            vec_update(3, vec![0.3, 0.1], 4),
            vec_update(4, vec![2.0, -2.0], 3),
        ];
        let mut b = a.clone();
        b.reverse();
        b.swap(1, 3);
        assert_eq!(fedavg(&a).unwrap().values, fedavg(&b).unwrap().values);
        assert_eq!(krum(&a, 1).unwrap().values, krum(&b, 1).unwrap().values);
        assert_eq!(
            trimmed_mean(&a, 1).unwrap().values,
            trimmed_mean(&b, 1).unwrap().values
        );
    }

    #[test]
    fn outputs_stay_within_coordinate_bounds() {
        let updates = vec![
            vec_update(0, vec![0.0, -1.0], 1),
            vec_update(1, vec![1.0, 2.0], 2),
            vec_update(2, vec![0.5, 0.5], 3),
        ];
        for pv in [fedavg(&updates).unwrap(), trimmed_mean(&updates, 1).unwrap()] {
            for (d, v) in pv.values.iter().enumerate() {
                let lo = updates
                    .iter()
                    .map(|u| u.params.values[d])
                    .fold(f32::INFINITY, f32::min);
                let hi = updates
                    .iter()
                    .map(|u| u.params.values[d])
                    .fold(f32::NEG_INFINITY, f32::max);
                assert!(*v >= lo && *v <= hi);
            }
        }
    }

    #[test]
    fn gancrop_merge_degenerate_cases() {
        let benign = vec![vec_update(0, vec![0.0], 1)];
        let repaired = vec![vec_update(1, vec![2.0], 1)];
        assert_eq!(
            gancrop_merge(&benign, &[]).unwrap().values,
            fedavg(&benign).unwrap().values
        );
        assert_eq!(
            gancrop_merge(&[], &repaired).unwrap().values,
            fedavg(&repaired).unwrap().values
        );
        assert_eq!(gancrop_merge(&benign, &repaired).unwrap().values, vec![1.0]);
        assert!(matches!(gancrop_merge(&[], &[]), Err(Error::NoModelsToMerge)));
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let a = vec_update(0, vec![0.0], 1);
        let mut b = vec_update(1, vec![1.0, 2.0], 1);
        b.params.layout = Layout(vec![LayoutEntry {
            name: "w".into(),
            shape: vec![2],
        }]);
        assert!(matches!(
            fedavg(&[a, b]),
            Err(Error::LayoutMismatch(_))
        ));
    }

    #[test]
    fn aggregator_kind_parses_config_strings() {
        for (s, k) in [
            ("fedavg", AggregatorKind::Fedavg),
            ("krum", AggregatorKind::Krum),
            ("trimmed_mean", AggregatorKind::TrimmedMean),
            ("fang", AggregatorKind::Fang),
            ("gancrop", AggregatorKind::Gancrop),
        ] {
            assert_eq!(s.parse::<AggregatorKind>().unwrap(), k);
            assert_eq!(k.name(), s);
        }
        assert!("median".parse::<AggregatorKind>().is_err());
    }
}
