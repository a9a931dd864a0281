//! KNN-Shapley data valuation and the discard-lowest-value refit sweep.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PartialDataset, ScalerParams};
use crate::error::{Error, Result};
use crate::glm::FamilyKind;
use crate::surrogate::RemediationKind;
use crate::victim::{self, VictimReport, VictimSetup};

pub const DEFAULT_NEIGHBORS: usize = 10;

/// How a training label agrees with a validation label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Utility {
    /// `1{y_i = y_v}`.
    Classification,
    /// `1 − min(1, (y_i − y_v)² / Var(y_val))`.
    Regression,
}

impl Utility {
    pub fn for_family(kind: FamilyKind) -> Self {
        match kind {
            FamilyKind::Bernoulli => Utility::Classification,
            FamilyKind::Gaussian => Utility::Regression,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValuationResult {
    pub values: Vec<f64>,
    pub k_neighbors: usize,
    pub validation_size: usize,
}

fn feature_matrix(d: &Dataset) -> Vec<Vec<f64>> {
    let cols: Vec<usize> = d
        .schema()
        .feature_columns()
        .into_iter()
        .filter(|&j| Some(j) != d.schema().intercept_index)
        .collect();
    (0..d.n_rows())
        .map(|i| cols.iter().map(|&j| d.values()[(i, j)]).collect())
        .collect()
}

/// Per-validation-point utilities `u_i` of every training row.
fn utilities(train_y: &[f64], y_val: f64, var_val: f64, utility: Utility) -> Vec<f64> {
    train_y
        .iter()
        .map(|&y| match utility {
            Utility::Classification => f64::from(u8::from(y == y_val)),
            Utility::Regression if var_val > 0.0 => 1.0 - ((y - y_val).powi(2) / var_val).min(1.0),
            Utility::Regression => f64::from(u8::from(y == y_val)),
        })
        .collect()
}

/// Exact Shapley values of one validation point; `order` lists training
/// rows by ascending distance.
fn shapley_one(order: &[usize], u: &[f64], k: usize) -> Vec<f64> {
    let n = order.len();
    let kf = k as f64;
    let mut s = vec![0.0; n];
    let last = order[n - 1];
    s[last] = u[last] * (k.min(n) as f64) / (kf * n as f64);
    for pos in (0..n - 1).rev() {
        let (cur, next) = (order[pos], order[pos + 1]);
        let rank = pos + 1;
        s[cur] = s[next] + (u[cur] - u[next]) * (k.min(rank) as f64) / (kf * rank as f64);
    }
    s
}

/// Exact KNN-Shapley values of `train` rows against `validation`.
///
/// Distances use every feature column except the intercept, so both sets
/// should be standardized with the same scaler. Ties in distance are
/// broken by row index.
pub fn knn_shapley_values(train: &Dataset, validation: &Dataset, k: usize, utility: Utility) -> Result<ValuationResult> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if validation.n_rows() == 0 {
        return Err(Error::Empty("validation set".into()));
    }
    if train.n_rows() == 0 {
        return Err(Error::Empty("training set".into()));
    }
    let xt = feature_matrix(train);
    let xv = feature_matrix(validation);
    if xt[0].len() != xv[0].len() {
        return Err(Error::Dimension("training and validation features differ".into()));
    }
    let yt = train.response();
    let yv = validation.response();
    let m = yv.len() as f64;
    let mean = yv.iter().sum::<f64>() / m;
    let var_val = yv.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
    let per_point: Vec<Vec<f64>> = (0..yv.len())
        .into_par_iter()
        .map(|v| {
            let dist: Vec<f64> = xt
                .iter()
                .map(|row| row.iter().zip(&xv[v]).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .collect();
            let mut order: Vec<usize> = (0..xt.len()).collect();
            order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
            let u = utilities(&yt, yv[v], var_val, utility);
            shapley_one(&order, &u, k)
        })
        .collect();
    let mut values = vec![0.0; xt.len()];
    for s in &per_point {
        for (acc, x) in values.iter_mut().zip(s) {
            *acc += x;
        }
    }
    for v in &mut values {
        *v /= m;
    }
    Ok(ValuationResult {
        values,
        k_neighbors: k,
        validation_size: yv.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub fraction: f64,
    pub rows_discarded: usize,
    pub report: VictimReport,
}

/// Remediates `poisoned`, values the remediated rows against the audit
/// split, and refits after discarding each requested share of the
/// lowest-valued rows.
pub fn defense_sweep(
    poisoned: &PartialDataset,
    strategy: RemediationKind,
    setup: &VictimSetup,
    fractions: &[f64],
    k: usize,
) -> Result<Vec<SweepPoint>> {
    if let Some(f) = fractions.iter().find(|f| !(0.0..1.0).contains(*f)) {
        return Err(Error::InvalidArgument(format!("discard fraction {f} must lie in [0, 1)")));
    }
    let remediated = victim::remediate_with(poisoned, strategy, &setup.options)?;
    let scaler = ScalerParams::fit(&remediated, &remediated.schema().default_scaling_exclusions())?;
    let valuation = knn_shapley_values(
        &scaler.apply(&remediated)?,
        &scaler.apply(&setup.audit)?,
        k,
        Utility::for_family(setup.family.kind),
    )?;
    let mut ranked: Vec<usize> = (0..remediated.n_rows()).collect();
    ranked.sort_by(|&a, &b| valuation.values[a].total_cmp(&valuation.values[b]).then(a.cmp(&b)));
    let rates = poisoned.missing_rates();
    fractions
        .iter()
        .map(|&fraction| {
            let drop = (fraction * remediated.n_rows() as f64).floor() as usize;
            let mut keep: Vec<usize> = ranked[drop..].to_vec();
            keep.sort_unstable();
            let kept = remediated.select_rows(&keep);
            let report = victim::report_on_dataset(&kept, strategy, rates.clone(), setup)?;
            Ok(SweepPoint {
                fraction,
                rows_discarded: drop,
                report,
            })
        })
        .collect()
}

/// CSV with columns `fraction,distance_to_alpha,distance_to_true,target_p_value`.
pub fn write_sweep_csv(points: &[SweepPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["fraction", "distance_to_alpha", "distance_to_true", "target_p_value"])?;
    for p in points {
        w.write_record([
            format!("{:?}", p.fraction),
            format!("{:?}", p.report.distance_to_alpha),
            format!("{:?}", p.report.distance_to_true),
            format!("{:?}", p.report.target_p_value),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn points(rows: &[(f64, f64)]) -> Dataset {
        let m = DMatrix::from_fn(rows.len(), 2, |i, j| if j == 0 { rows[i].0 } else { rows[i].1 });
        Dataset::from_columns(&["x", "y"], m, "y").unwrap()
    }

    fn random_points(n: usize, seed: u64, classes: bool) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                let x = rng.gen_range(-1.0..1.0);
                let y = if classes {
                    f64::from(u8::from(rng.gen::<bool>()))
                } else {
                    x + rng.gen_range(-0.5..0.5)
                };
                (x, y)
            })
            .collect();
        points(&rows)
    }

    /// `U(S) = (1/k) Σ` of the utilities of the `min(k, |S|)` nearest members.
    fn knn_utility(subset: &[usize], dist: &[f64], u: &[f64], k: usize) -> f64 {
        let mut s = subset.to_vec();
        s.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
        s.iter().take(k).map(|&i| u[i]).sum::<f64>() / k as f64
    }

    fn brute_force(train: &Dataset, val: &Dataset, k: usize, utility: Utility) -> Vec<f64> {
        let n = train.n_rows();
        let xt = feature_matrix(train);
        let xv = feature_matrix(val);
        let yv = val.response();
        let m = yv.len() as f64;
        let mean = yv.iter().sum::<f64>() / m;
        let var = yv.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
        let fact = |q: usize| (1..=q).map(|v| v as f64).product::<f64>();
        let mut out = vec![0.0; n];
        for v in 0..yv.len() {
            let dist: Vec<f64> = xt.iter().map(|r| r.iter().zip(&xv[v]).map(|(a, b)| (a - b).powi(2)).sum()).collect();
            let u = utilities(&train.response(), yv[v], var, utility);
            for i in 0..n {
                for mask in 0..(1usize << n) {
                    if mask >> i & 1 == 1 {
                        continue;
                    }
                    let s: Vec<usize> = (0..n).filter(|&j| mask >> j & 1 == 1).collect();
                    let mut with = s.clone();
                    with.push(i);
                    let weight = fact(s.len()) * fact(n - s.len() - 1) / fact(n);
                    out[i] += weight * (knn_utility(&with, &dist, &u, k) - knn_utility(&s, &dist, &u, k)) / m;
                }
            }
        }
        out
    }

    #[test]
    fn single_training_point_gets_its_utility() {
        let train = points(&[(0.3, 1.0)]);
        let val = points(&[(0.0, 1.0), (1.0, 0.0)]);
        let r = knn_shapley_values(&train, &val, 1, Utility::Classification).unwrap();
        assert_eq!(r.values, vec![0.5]);
    }

    #[test]
    fn matches_brute_force_shapley() {
        for seed in 0..6 {
            for n in [2, 5, 8] {
                for (classes, utility) in [(true, Utility::Classification), (false, Utility::Regression)] {
                    let train = random_points(n, seed, classes);
                    let val = random_points(3, seed + 50, classes);
                    let fast = knn_shapley_values(&train, &val, 2, utility).unwrap().values;
                    let slow = brute_force(&train, &val, 2, utility);
                    for (a, b) in fast.iter().zip(&slow) {
                        assert!((a - b).abs() <= 1e-10, "n={n} seed={seed}: {a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn fewer_points_than_neighbors_still_exact() {
        let train = random_points(3, 9, false);
        let val = random_points(4, 10, false);
        let fast = knn_shapley_values(&train, &val, 5, Utility::Regression).unwrap().values;
        let slow = brute_force(&train, &val, 5, Utility::Regression);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn efficiency_sums_to_full_set_utility() {
        let train = random_points(7, 11, false);
        let val = random_points(5, 12, false);
        let values = knn_shapley_values(&train, &val, 2, Utility::Regression).unwrap().values;
        let xt = feature_matrix(&train);
        let xv = feature_matrix(&val);
        let yv = val.response();
        let mean = yv.iter().sum::<f64>() / 5.0;
        let var = yv.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        let all: Vec<usize> = (0..7).collect();
        let full: f64 = (0..5)
            .map(|v| {
                let dist: Vec<f64> = xt.iter().map(|r| (r[0] - xv[v][0]).powi(2)).collect();
                knn_utility(&all, &dist, &utilities(&train.response(), yv[v], var, Utility::Regression), 2)
            })
            .sum::<f64>()
            / 5.0;
        assert!((values.iter().sum::<f64>() - full).abs() < 1e-12);
    }

    #[test]
    fn identical_labels_give_equal_values() {
        let train = points(&[(0.1, 1.0), (0.5, 1.0), (-0.7, 1.0), (2.0, 1.0)]);
        let val = points(&[(0.0, 1.0), (0.4, 1.0)]);
        let r = knn_shapley_values(&train, &val, 2, Utility::Classification).unwrap();
        for v in &r.values {
            assert!((v - r.values[0]).abs() < 1e-15);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let train = random_points(9, 13, false);
        let val = random_points(4, 14, false);
        let base = knn_shapley_values(&train, &val, 3, Utility::Regression).unwrap().values;
        let perm = [4, 2, 8, 0, 1, 7, 3, 6, 5];
        let shuffled = train.select_rows(&perm);
        let moved = knn_shapley_values(&shuffled, &val, 3, Utility::Regression).unwrap().values;
        for (q, &i) in perm.iter().enumerate() {
            assert!((moved[q] - base[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_arguments_are_rejected() {
        let train = random_points(4, 1, false);
        let val = random_points(2, 2, false);
        assert!(knn_shapley_values(&train, &val, 0, Utility::Regression).is_err());
        let empty = val.select_rows(&[]);
        assert!(matches!(
            knn_shapley_values(&train, &empty, 2, Utility::Regression),
            Err(Error::Empty(_))
        ));
    }
}
