//! Multi-round patient-wise k-fold cross-validation.
//!
//! Each round derives a fresh split seed, trains on every fold, pools the
//! folds' test predictions into one per-round metrics report, and the
//! rounds aggregate into mean plus or minus a 95% half-width. Rounds may
//! execute on worker threads; every task's seed is derived from its round
//! index and results are reduced in round order, so the aggregate is
//! independent of scheduling.

use alloc::vec::Vec;

use crate::data::{patient_kfold_split, DatasetManifest};
use crate::error::Error;
use crate::metrics::{aggregate, confusion, metrics, AggregateReport, MetricsReport};
use crate::rng::SplitMix64;
use crate::Result;

/// Trains on one fold and predicts its held-out records.
pub trait FoldModel: Sync {
    /// `train` and `test` index into `manifest.records`; the result must
    /// hold one predicted class per test index, in order.
    fn train_and_predict(
        &self,
        manifest: &DatasetManifest,
        train: &[usize],
        test: &[usize],
        seed: u64,
    ) -> Result<Vec<usize>>;
}

#[derive(Debug, Clone)]
pub struct CvConfig {
    pub k: usize,
    pub rounds: usize,
    pub seed: u64,
    pub threads: usize,
}

/// Desk-scale default round count; the full 25-round protocol is opt-in.
pub const DEFAULT_ROUNDS: usize = 3;
pub const FULL_ROUNDS: usize = 25;
pub const DEFAULT_FOLDS: usize = 5;

const ROUND_TAG: u64 = u64::from_le_bytes(*b"cvround\0");
const FOLD_TAG: u64 = u64::from_le_bytes(*b"cvfold\0\0");

/// Seed for one round's split.
pub fn round_seed(seed: u64, round: usize) -> u64 {
    SplitMix64::derive(seed, &[ROUND_TAG, round as u64]).state()
}

/// Seed for one fold's training.
pub fn fold_seed(seed: u64, round: usize, fold: usize) -> u64 {
    SplitMix64::derive(seed, &[FOLD_TAG, round as u64, fold as u64]).state()
}

fn run_round(model: &dyn FoldModel, manifest: &DatasetManifest, cfg: &CvConfig, round: usize) -> Result<MetricsReport> {
    let rseed = round_seed(cfg.seed, round);
    let plan = patient_kfold_split(manifest, cfg.k, rseed)?;
    let mut pooled_pred = Vec::new();
    let mut pooled_truth = Vec::new();
    for (fold_idx, fold) in plan.folds.iter().enumerate() {
        let train = manifest.record_indices_for(&fold.train_patients);
        let test = manifest.record_indices_for(&fold.test_patients);
        let preds = model
            .train_and_predict(manifest, &train, &test, fold_seed(cfg.seed, round, fold_idx))
            .map_err(|e| Error::InvalidArgument {
                op: "cross_validate",
                message: alloc::format!("round {round} fold {fold_idx}: {e}"),
            })?;
        if preds.len() != test.len() {
            return Err(Error::invalid(
                "cross_validate",
                alloc::format!(
                    "round {round} fold {fold_idx}: {} predictions for {} test records",
                    preds.len(),
                    test.len()
                ),
            ));
        }
        pooled_pred.extend(preds);
        pooled_truth.extend(test.iter().map(|&i| manifest.records[i].label));
    }
    let counts = confusion(&pooled_pred, &pooled_truth, manifest.class_names.len())?;
    Ok(metrics(&counts))
}

/// Runs the full protocol and returns the aggregate plus each round's report.
pub fn cross_validate(
    model: &dyn FoldModel,
    manifest: &DatasetManifest,
    cfg: &CvConfig,
) -> Result<(AggregateReport, Vec<MetricsReport>)> {
    manifest.validate()?;
    if cfg.rounds == 0 {
        return Err(Error::invalid("cross_validate", "rounds must be at least 1"));
    }
    let reports = run_rounds(model, manifest, cfg)?;
    let agg = aggregate(&reports)?;
    Ok((agg, reports))
}

#[cfg(feature = "std")]
fn run_rounds(model: &dyn FoldModel, manifest: &DatasetManifest, cfg: &CvConfig) -> Result<Vec<MetricsReport>> {
    let threads = cfg.threads.max(1).min(cfg.rounds);
    if threads == 1 {
        return (0..cfg.rounds).map(|r| run_round(model, manifest, cfg, r)).collect();
    }
    let mut slots: Vec<Option<Result<MetricsReport>>> = (0..cfg.rounds).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (worker, chunk) in slots.chunks_mut(cfg.rounds.div_ceil(threads)).enumerate() {
            let base = worker * cfg.rounds.div_ceil(threads);
            scope.spawn(move || {
                for (offset, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(run_round(model, manifest, cfg, base + offset));
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every round slot filled"))
        .collect()
}

#[cfg(not(feature = "std"))]
fn run_rounds(model: &dyn FoldModel, manifest: &DatasetManifest, cfg: &CvConfig) -> Result<Vec<MetricsReport>> {
    (0..cfg.rounds).map(|r| run_round(model, manifest, cfg, r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ManifestRecord;
    use crate::metrics::METRIC_NAMES;
    use alloc::format;
    use alloc::string::ToString;
    use alloc::vec;

    struct TruthModel;

    impl FoldModel for TruthModel {
        fn train_and_predict(
            &self,
            manifest: &DatasetManifest,
            _train: &[usize],
            test: &[usize],
            _seed: u64,
        ) -> Result<Vec<usize>> {
            Ok(test.iter().map(|&i| manifest.records[i].label).collect())
        }
    }

    /// Predicts the patient-number parity; deterministic but imperfect.
    struct ParityModel;

    impl FoldModel for ParityModel {
        fn train_and_predict(
            &self,
            manifest: &DatasetManifest,
            _train: &[usize],
            test: &[usize],
            _seed: u64,
        ) -> Result<Vec<usize>> {
            Ok(test
                .iter()
                .map(|&i| usize::from(manifest.records[i].path.len() % 2 == 0))
                .collect())
        }
    }

    fn manifest() -> DatasetManifest {
        let mut records = Vec::new();
        for p in 0..15 {
            for i in 0..3 {
                records.push(ManifestRecord {
                    path: format!("p{p}i{i}{}", if p % 3 == 0 { "x" } else { "" }),
                    patient_id: format!("p{p:02}"),
                    label: p % 2,
                });
            }
        }
        DatasetManifest::new(records, vec!["a".to_string(), "b".to_string()]).unwrap()
    }

    #[test]
    fn deterministic_stub_has_zero_half_width() {
        let cfg = CvConfig {
            k: 5,
            rounds: 3,
            seed: 9,
            threads: 1,
        };
        let (agg, reports) = cross_validate(&TruthModel, &manifest(), &cfg).unwrap();
        assert_eq!(reports.len(), 3);
        for class in 0..2 {
            for metric in METRIC_NAMES {
                let cell = agg.cell(class, metric).unwrap();
                assert_eq!(cell.half_width, 0.0);
                assert_eq!(cell.mean, 1.0);
            }
        }
    }

    #[test]
    fn single_round_reports_caveat() {
        let cfg = CvConfig {
            k: 3,
            rounds: 1,
            seed: 2,
            threads: 1,
        };
        let (agg, _) = cross_validate(&TruthModel, &manifest(), &cfg).unwrap();
        assert!(agg.single_round);
        assert_eq!(agg.cell(0, "accuracy").unwrap().half_width, 0.0);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let base = CvConfig {
            k: 5,
            rounds: 6,
            seed: 31,
            threads: 1,
        };
        let (agg1, reports1) = cross_validate(&ParityModel, &manifest(), &base).unwrap();
        let mut par = base.clone();
        par.threads = 4;
        let (agg4, reports4) = cross_validate(&ParityModel, &manifest(), &par).unwrap();
        assert_eq!(reports1, reports4);
        assert_eq!(agg1, agg4);
    }

    #[test]
    fn prediction_count_mismatch_is_reported_with_context() {
        struct ShortModel;
        impl FoldModel for ShortModel {
            fn train_and_predict(
                &self,
                _m: &DatasetManifest,
                _train: &[usize],
                _test: &[usize],
                _seed: u64,
            ) -> Result<Vec<usize>> {
                Ok(vec![0])
            }
        }
        let cfg = CvConfig {
            k: 3,
            rounds: 1,
            seed: 0,
            threads: 1,
        };
        let err = cross_validate(&ShortModel, &manifest(), &cfg).unwrap_err();
        let text = alloc::format!("{err}");
        assert!(text.contains("round 0"), "{text}");
    }
}
