//! Cross-fold aggregation of run metrics.
//!
//! Runs are grouped by (variant, p). Within a group every fold must have
//! been evaluated on the identical iteration grid, which lets us average
//! validation curves pointwise. Two summary statistics are kept side by
//! side because they answer different questions:
//!
//! * `averaged_min` — the minimum of the *mean* validation curve: "how good
//!   is this configuration at its best shared stopping point". This is the
//!   headline number.
//! * `mean_fold_min` — the mean of each fold's own minimum: "how good is
//!   this configuration if each fold stops at its own best iteration".
//!   Always ≤ `averaged_min`; the gap measures how much the folds disagree
//!   about when to stop.
//!
//! Wall-clock statistics use median-exclusive quartiles (the convention
//! where the overall median is left out of both halves when computing Q1
//! and Q3) and Tukey whiskers at 1.5×IQR.

use lpattn_core::error::{Error, Result};
use lpattn_core::training::MetricsRecord;
use std::collections::BTreeMap;

/// Validation/train curve for a single fold of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldCurve {
    pub fold: usize,
    pub run_id: String,
    pub val: Vec<f64>,
    pub train: Vec<f64>,
    /// Minimum of `val`, with the earliest iteration achieving it.
    pub min_val: f64,
    pub argmin_iter: usize,
    /// Wall-clock seconds for the whole run (elapsed at the last record).
    pub wall_seconds: f64,
}

/// Five-number summary (plus mean and outliers) of per-run wall times.
#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeStats {
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    /// Most extreme observations still within 1.5×IQR of the quartiles.
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    /// Observations beyond the whisker fences, ascending.
    pub outliers: Vec<f64>,
}

/// All folds of one (variant, p) cell, averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    pub variant: String,
    pub p: Option<f64>,
    /// Shared evaluation grid (iteration numbers).
    pub iters: Vec<usize>,
    pub mean_val: Vec<f64>,
    pub mean_train: Vec<f64>,
    pub folds: Vec<FoldCurve>,
    /// Minimum of `mean_val` and the iteration where it occurs.
    pub averaged_min: f64,
    pub argmin_iter: usize,
    /// Mean of the per-fold minima.
    pub mean_fold_min: f64,
    pub runtime: RuntimeStats,
}

impl GroupSummary {
    /// Human/CSV label: the bare p value for lp runs, the variant name for
    /// baselines. `2.0` renders as `2` to match the metrics CSV convention.
    pub fn label(&self) -> String {
        match self.p {
            Some(p) => p.to_string(),
            None => self.variant.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    /// lp groups ascending in p, then qknorm, then standard.
    pub groups: Vec<GroupSummary>,
}

fn variant_rank(variant: &str) -> usize {
    match variant {
        "lp" => 0,
        "qknorm" => 1,
        "standard" => 2,
        _ => 3,
    }
}

/// Median of an already-sorted slice.
fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Median-exclusive quartiles of an already-sorted slice: for odd n the
/// overall median belongs to neither half. A single observation is its own
/// median and both quartiles.
pub fn quartiles(sorted: &[f64]) -> (f64, f64, f64) {
    let n = sorted.len();
    let med = median(sorted);
    if n == 1 {
        return (sorted[0], med, sorted[0]);
    }
    let q1 = median(&sorted[..n / 2]);
    let q3 = median(&sorted[n - n / 2..]);
    (q1, med, q3)
}

impl RuntimeStats {
    pub fn from_values(values: &[f64]) -> Result<RuntimeStats> {
        if values.is_empty() {
            return Err(Error::Aggregation(
                "runtime statistics need at least one observation".into(),
            ));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite wall times"));
        let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
        let (q1, med, q3) = quartiles(&sorted);
        let iqr = q3 - q1;
        let lo_fence = q1 - 1.5 * iqr;
        let hi_fence = q3 + 1.5 * iqr;
        let whisker_lo = sorted
            .iter()
            .copied()
            .find(|v| *v >= lo_fence)
            .unwrap_or(med);
        let whisker_hi = sorted
            .iter()
            .rev()
            .copied()
            .find(|v| *v <= hi_fence)
            .unwrap_or(med);
        let outliers = sorted
            .iter()
            .copied()
            .filter(|v| *v < lo_fence || *v > hi_fence)
            .collect();
        Ok(RuntimeStats {
            mean,
            median: med,
            q1,
            q3,
            whisker_lo,
            whisker_hi,
            outliers,
        })
    }
}

/// Earliest index of the minimum of a finite series.
fn argmin(series: &[f64]) -> (usize, f64) {
    let (idx, &v) = series
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite losses"))
        .expect("non-empty series");
    (idx, v)
}

/// Group records by (variant, p), validate fold consistency, and average.
pub fn aggregate(records: &[MetricsRecord]) -> Result<SweepSummary> {
    if records.is_empty() {
        return Err(Error::Aggregation("no metrics records to aggregate".into()));
    }
    // Key on the bit pattern of p so the map stays hashable/ordered; the
    // display order is re-derived after the loop.
    let mut by_group: BTreeMap<(String, Option<u64>), Vec<&MetricsRecord>> = BTreeMap::new();
    for rec in records {
        by_group
            .entry((rec.variant.clone(), rec.p.map(f64::to_bits)))
            .or_default()
            .push(rec);
    }

    let mut groups = Vec::with_capacity(by_group.len());
    for ((variant, p_bits), recs) in by_group {
        let p = p_bits.map(f64::from_bits);
        let group_name = match p {
            Some(p) => format!("{variant} p={p}"),
            None => variant.clone(),
        };

        let mut by_fold: BTreeMap<usize, Vec<&MetricsRecord>> = BTreeMap::new();
        for rec in recs {
            by_fold.entry(rec.fold).or_default().push(rec);
        }

        let mut grid: Option<Vec<usize>> = None;
        let mut folds: Vec<FoldCurve> = Vec::with_capacity(by_fold.len());
        for (fold, mut frecs) in by_fold {
            let run_ids: std::collections::BTreeSet<&str> =
                frecs.iter().map(|r| r.run_id.as_str()).collect();
            if run_ids.len() > 1 {
                return Err(Error::Aggregation(format!(
                    "{group_name} fold {fold} appears in multiple runs: {run_ids:?}"
                )));
            }
            frecs.sort_by_key(|r| r.iter);
            if frecs.windows(2).any(|w| w[0].iter == w[1].iter) {
                return Err(Error::Aggregation(format!(
                    "{group_name} fold {fold} has duplicate iteration records"
                )));
            }
            let iters: Vec<usize> = frecs.iter().map(|r| r.iter).collect();
            match &grid {
                None => grid = Some(iters.clone()),
                Some(g) if *g != iters => {
                    return Err(Error::Aggregation(format!(
                        "{group_name}: fold {fold} was evaluated on a different \
                         iteration grid ({} vs {} points); cannot average curves",
                        iters.len(),
                        g.len()
                    )));
                }
                Some(_) => {}
            }
            let val: Vec<f64> = frecs.iter().map(|r| r.val_loss).collect();
            let train: Vec<f64> = frecs.iter().map(|r| r.train_loss).collect();
            let (argmin_idx, min_val) = argmin(&val);
            folds.push(FoldCurve {
                fold,
                run_id: frecs[0].run_id.clone(),
                min_val,
                argmin_iter: iters[argmin_idx],
                wall_seconds: frecs.last().expect("non-empty").elapsed_seconds,
                val,
                train,
            });
        }

        let iters = grid.expect("group has at least one fold");
        let nf = folds.len() as f64;
        let mut mean_val = vec![0.0; iters.len()];
        let mut mean_train = vec![0.0; iters.len()];
        for fc in &folds {
            for i in 0..iters.len() {
                mean_val[i] += fc.val[i];
                mean_train[i] += fc.train[i];
            }
        }
        for v in &mut mean_val {
            *v /= nf;
        }
        for v in &mut mean_train {
            *v /= nf;
        }
        let (argmin_idx, averaged_min) = argmin(&mean_val);
        let argmin_iter = iters[argmin_idx];
        let mean_fold_min = folds.iter().map(|f| f.min_val).sum::<f64>() / nf;
        let walls: Vec<f64> = folds.iter().map(|f| f.wall_seconds).collect();
        let runtime = RuntimeStats::from_values(&walls)?;
        groups.push(GroupSummary {
            variant,
            p,
            iters,
            mean_val,
            mean_train,
            folds,
            averaged_min,
            argmin_iter,
            mean_fold_min,
            runtime,
        });
    }

    groups.sort_by(|a, b| {
        variant_rank(&a.variant)
            .cmp(&variant_rank(&b.variant))
            .then_with(|| {
                a.p.unwrap_or(f64::NEG_INFINITY)
                    .partial_cmp(&b.p.unwrap_or(f64::NEG_INFINITY))
                    .expect("finite p")
            })
            .then_with(|| a.variant.cmp(&b.variant))
    });
    Ok(SweepSummary { groups })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(
        variant: &str,
        p: Option<f64>,
        fold: usize,
        iter: usize,
        train: f64,
        val: f64,
        elapsed: f64,
    ) -> MetricsRecord {
        let run_id = match p {
            Some(p) => format!("{variant}_p{p:.1}_fold{fold}"),
            None => format!("{variant}_fold{fold}"),
        };
        MetricsRecord {
            run_id,
            variant: variant.to_string(),
            p,
            fold,
            iter,
            train_loss: train,
            val_loss: val,
            elapsed_seconds: elapsed,
        }
    }

    /// Two folds whose curves are [2,1] and [4,3]: the mean curve is [3,2].
    #[test]
    fn mean_curve_is_the_pointwise_fold_average() {
        let records = vec![
            rec("lp", Some(2.0), 0, 0, 2.5, 2.0, 1.0),
            rec("lp", Some(2.0), 0, 100, 1.5, 1.0, 2.0),
            rec("lp", Some(2.0), 1, 0, 4.5, 4.0, 1.0),
            rec("lp", Some(2.0), 1, 100, 3.5, 3.0, 2.0),
        ];
        let summary = aggregate(&records).unwrap();
        assert_eq!(summary.groups.len(), 1);
        let g = &summary.groups[0];
        assert_eq!(g.iters, vec![0, 100]);
        assert_eq!(g.mean_val, vec![3.0, 2.0]);
        assert_eq!(g.mean_train, vec![3.5, 2.5]);
        assert_eq!(g.averaged_min, 2.0);
        assert_eq!(g.argmin_iter, 100);
    }

    /// Folds [2,5] and [5,1] pull the two definitions apart: the mean curve
    /// is [3.5, 3.0] so its minimum is 3.0, while the per-fold minima are
    /// 2 and 1 whose mean is 1.5.
    #[test]
    fn min_of_mean_differs_from_mean_of_minima() {
        let records = vec![
            rec("lp", Some(1.5), 0, 0, 0.0, 2.0, 1.0),
            rec("lp", Some(1.5), 0, 50, 0.0, 5.0, 2.0),
            rec("lp", Some(1.5), 1, 0, 0.0, 5.0, 1.0),
            rec("lp", Some(1.5), 1, 50, 0.0, 1.0, 2.0),
        ];
        let g = &aggregate(&records).unwrap().groups[0];
        assert_eq!(g.averaged_min, 3.0);
        assert_eq!(g.argmin_iter, 50);
        assert_eq!(g.mean_fold_min, 1.5);
        assert!(g.mean_fold_min <= g.averaged_min);
        assert_eq!(g.folds[0].min_val, 2.0);
        assert_eq!(g.folds[0].argmin_iter, 0);
        assert_eq!(g.folds[1].min_val, 1.0);
        assert_eq!(g.folds[1].argmin_iter, 50);
    }

    #[test]
    fn single_fold_group_is_its_own_average() {
        let records = vec![
            rec("standard", None, 0, 0, 4.0, 4.2, 3.0),
            rec("standard", None, 0, 10, 3.0, 3.2, 7.0),
        ];
        let g = &aggregate(&records).unwrap().groups[0];
        assert_eq!(g.mean_val, vec![4.2, 3.2]);
        assert_eq!(g.averaged_min, 3.2);
        assert_eq!(g.mean_fold_min, 3.2);
        assert_eq!(g.runtime.median, 7.0);
        assert_eq!(g.runtime.q1, 7.0);
        assert_eq!(g.runtime.q3, 7.0);
        assert!(g.runtime.outliers.is_empty());
    }

    #[test]
    fn mismatched_iteration_grids_are_rejected() {
        let records = vec![
            rec("lp", Some(2.0), 0, 0, 0.0, 2.0, 1.0),
            rec("lp", Some(2.0), 0, 100, 0.0, 1.0, 2.0),
            rec("lp", Some(2.0), 1, 0, 0.0, 2.0, 1.0),
            rec("lp", Some(2.0), 1, 50, 0.0, 1.0, 2.0),
        ];
        let err = aggregate(&records).unwrap_err();
        assert!(
            err.to_string().contains("iteration grid"),
            "unexpected message: {err}"
        );
    }

    #[test]
    fn duplicate_folds_from_different_runs_are_rejected() {
        let mut records = vec![
            rec("lp", Some(2.0), 0, 0, 0.0, 2.0, 1.0),
            rec("lp", Some(2.0), 0, 100, 0.0, 1.0, 2.0),
        ];
        let mut dup = rec("lp", Some(2.0), 0, 0, 0.0, 2.1, 1.0);
        dup.run_id = "lp_p2.0_fold0_copy".into();
        records.push(dup);
        let err = aggregate(&records).unwrap_err();
        assert!(
            err.to_string().contains("multiple runs"),
            "unexpected message: {err}"
        );
    }

    #[test]
    fn groups_sort_lp_by_p_then_baselines() {
        let records = vec![
            rec("standard", None, 0, 0, 0.0, 1.0, 1.0),
            rec("lp", Some(4.0), 0, 0, 0.0, 1.0, 1.0),
            rec("qknorm", None, 0, 0, 0.0, 1.0, 1.0),
            rec("lp", Some(1.0), 0, 0, 0.0, 1.0, 1.0),
            rec("lp", Some(2.5), 0, 0, 0.0, 1.0, 1.0),
        ];
        let summary = aggregate(&records).unwrap();
        let labels: Vec<String> = summary.groups.iter().map(|g| g.label()).collect();
        assert_eq!(labels, vec!["1", "2.5", "4", "qknorm", "standard"]);
    }

    #[test]
    fn aggregation_is_invariant_to_record_order() {
        let records = vec![
            rec("lp", Some(2.0), 0, 0, 2.5, 2.0, 1.0),
            rec("lp", Some(2.0), 0, 100, 1.5, 1.0, 2.0),
            rec("lp", Some(2.0), 1, 0, 4.5, 4.0, 1.0),
            rec("lp", Some(2.0), 1, 100, 3.5, 3.0, 2.0),
            rec("qknorm", None, 0, 0, 4.0, 4.1, 1.0),
            rec("qknorm", None, 0, 100, 3.0, 3.1, 2.0),
        ];
        let forward = aggregate(&records).unwrap();
        let mut reversed = records.clone();
        reversed.reverse();
        assert_eq!(forward, aggregate(&reversed).unwrap());
    }

    #[test]
    fn quartiles_are_median_exclusive() {
        let values: Vec<f64> = (1..=10).map(|v| v as f64).collect();
        let (q1, med, q3) = quartiles(&values);
        assert_eq!((q1, med, q3), (3.0, 5.5, 8.0));

        let odd: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let (q1, med, q3) = quartiles(&odd);
        // halves exclude the median 5: {1,2,3,4} and {6,7,8,9}
        assert_eq!((q1, med, q3), (2.5, 5.0, 7.5));

        assert_eq!(quartiles(&[42.0]), (42.0, 42.0, 42.0));
    }

    #[test]
    fn whiskers_clamp_to_data_and_outliers_fall_outside() {
        let mut values: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        values.push(100.0);
        let stats = RuntimeStats::from_values(&values).unwrap();
        // sorted: 1..9,100 -> q1=3, q3=8, iqr=5, fences [-4.5, 15.5]
        assert_eq!(stats.q1, 3.0);
        assert_eq!(stats.q3, 8.0);
        assert_eq!(stats.whisker_lo, 1.0);
        assert_eq!(stats.whisker_hi, 9.0);
        assert_eq!(stats.outliers, vec![100.0]);
        assert!((stats.mean - 14.5).abs() < 1e-12);
        assert_eq!(stats.median, 5.5);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(aggregate(&[]).is_err());
    }
}
