//! Dataset manifests and leak-free patient-wise splitting.
//!
//! The unit of splitting is the patient: no patient's images may appear on
//! both sides of any train/test or train/validation boundary, so a
//! classifier can never score by recognizing a patient's anatomy instead of
//! the pathology.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Error;
use crate::rng::SplitMix64;
use crate::Result;

/// One labelled image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub path: String,
    pub patient_id: String,
    /// Class index in `0..class_names.len()`.
    pub label: usize,
}

/// A validated set of image records plus the class-name table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub class_names: Vec<String>,
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>, class_names: Vec<String>) -> Result<Self> {
        let manifest = DatasetManifest {
            records,
            class_names,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(Error::InvalidDataset {
                message: String::from("no class names"),
            });
        }
        let mut paths: Vec<&str> = self.records.iter().map(|r| r.path.as_str()).collect();
        paths.sort_unstable();
        if let Some(dup) = paths.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidDataset {
                message: format!("duplicate image path {:?}", dup[0]),
            });
        }
        for r in &self.records {
            if r.label >= self.class_names.len() {
                return Err(Error::InvalidDataset {
                    message: format!(
                        "label {} out of range for {} classes (path {:?})",
                        r.label,
                        self.class_names.len(),
                        r.path
                    ),
                });
            }
            if r.patient_id.is_empty() {
                return Err(Error::InvalidDataset {
                    message: format!("empty patient id for {:?}", r.path),
                });
            }
        }
        Ok(())
    }

    /// Sorted unique patient ids (the canonical ordering for splits).
    pub fn patients(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.records.iter().map(|r| r.patient_id.clone()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Image count per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = alloc::vec![0usize; self.class_names.len()];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }

    /// Indices of records whose patient is in `patients` (record order).
    pub fn record_indices_for(&self, patients: &[String]) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| patients.iter().any(|p| *p == r.patient_id))
            .map(|(i, _)| i)
            .collect()
    }
}

/// One cross-validation fold, as disjoint patient sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train_patients: Vec<String>,
    pub test_patients: Vec<String>,
}

/// A full k-fold assignment. Every patient appears in exactly one test set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub folds: Vec<Fold>,
    pub seed: u64,
}

impl SplitPlan {
    /// Checks the leak-freedom invariants; used by tests and callers that
    /// construct plans externally.
    pub fn validate(&self, all_patients: &[String]) -> Result<()> {
        let mut seen_in_test: Vec<&str> = Vec::new();
        for fold in &self.folds {
            for t in &fold.test_patients {
                if fold.train_patients.contains(t) {
                    return Err(Error::InvalidDataset {
                        message: format!("patient {:?} leaks between train and test", t),
                    });
                }
                seen_in_test.push(t);
            }
            let mut union: Vec<&str> = fold
                .train_patients
                .iter()
                .chain(fold.test_patients.iter())
                .map(String::as_str)
                .collect();
            union.sort_unstable();
            let mut expect: Vec<&str> = all_patients.iter().map(String::as_str).collect();
            expect.sort_unstable();
            if union != expect {
                return Err(Error::InvalidDataset {
                    message: String::from("fold does not cover every patient exactly once"),
                });
            }
        }
        seen_in_test.sort_unstable();
        let mut expect: Vec<&str> = all_patients.iter().map(String::as_str).collect();
        expect.sort_unstable();
        if seen_in_test != expect {
            return Err(Error::InvalidDataset {
                message: String::from("patients must appear in exactly one test set"),
            });
        }
        Ok(())
    }
}

const SPLIT_TAG: u64 = u64::from_le_bytes(*b"kfoldspl");
const VAL_TAG: u64 = u64::from_le_bytes(*b"valsplit");

/// Patient-wise k-fold split: patients are shuffled by `seed` and dealt
/// round-robin into `k` test groups; fold `i` trains on all other patients.
pub fn patient_kfold_split(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<SplitPlan> {
    let mut patients = manifest.patients();
    if k == 0 {
        return Err(Error::invalid("patient_kfold_split", "k must be positive"));
    }
    if k > patients.len() {
        return Err(Error::invalid(
            "patient_kfold_split",
            format!("k = {} exceeds {} patients", k, patients.len()),
        ));
    }
    let mut rng = SplitMix64::derive(seed, &[SPLIT_TAG]);
    rng.shuffle(&mut patients);
    let mut groups: Vec<Vec<String>> = alloc::vec![Vec::new(); k];
    for (i, p) in patients.iter().enumerate() {
        groups[i % k].push(p.clone());
    }
    let folds = (0..k)
        .map(|i| {
            let mut test_patients = groups[i].clone();
            let mut train_patients: Vec<String> = groups
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .flat_map(|(_, g)| g.iter().cloned())
                .collect();
            test_patients.sort_unstable();
            train_patients.sort_unstable();
            Fold {
                train_patients,
                test_patients,
            }
        })
        .collect();
    Ok(SplitPlan { folds, seed })
}

/// Patient-wise validation split: `ceil(fraction * P)` patients move to the
/// validation side (capped so at least one patient stays in training).
pub fn train_val_split(patients: &[String], fraction: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if patients.len() < 2 {
        return Err(Error::invalid(
            "train_val_split",
            "at least two patients required",
        ));
    }
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(
            "train_val_split",
            format!("fraction must lie in [0,1), got {fraction}"),
        ));
    }
    let mut shuffled = patients.to_vec();
    shuffled.sort_unstable();
    shuffled.dedup();
    let mut rng = SplitMix64::derive(seed, &[VAL_TAG]);
    rng.shuffle(&mut shuffled);
    let val_count = (crate::math::ceil(fraction * shuffled.len() as f64) as usize).min(shuffled.len() - 1);
    let mut val: Vec<String> = shuffled[..val_count].to_vec();
    let mut train: Vec<String> = shuffled[val_count..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

/// Uniform seeded permutation (Fisher-Yates).
pub fn shuffle<T>(records: &mut [T], rng: &mut SplitMix64) {
    rng.shuffle(records);
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn manifest(patients: usize, images_each: usize) -> DatasetManifest {
        let mut records = Vec::new();
        for p in 0..patients {
            for i in 0..images_each {
                records.push(ManifestRecord {
                    path: format!("p{p}_i{i}.pgm"),
                    patient_id: format!("p{p:03}"),
                    label: p % 2,
                });
            }
        }
        DatasetManifest::new(records, vec!["a".to_string(), "b".to_string()]).unwrap()
    }

    #[test]
    fn duplicate_path_names_the_offender() {
        let records = vec![
            ManifestRecord {
                path: "x.pgm".to_string(),
                patient_id: "p0".to_string(),
                label: 0,
            },
            ManifestRecord {
                path: "x.pgm".to_string(),
                patient_id: "p1".to_string(),
                label: 1,
            },
        ];
        let err = DatasetManifest::new(records, vec!["a".to_string(), "b".to_string()]).unwrap_err();
        match err {
            Error::InvalidDataset { message } => assert!(message.contains("x.pgm")),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn label_out_of_range_rejected() {
        let records = vec![ManifestRecord {
            path: "x.pgm".to_string(),
            patient_id: "p0".to_string(),
            label: 2,
        }];
        assert!(DatasetManifest::new(records, vec!["a".to_string(), "b".to_string()]).is_err());
    }

    #[test]
    fn paper_scale_histogram() {
        // Mirror of the reference dataset's shape: 2168/758/1247 images over
        // 80/50/80 patients in three classes.
        let spec = [(2168usize, 80usize), (758, 50), (1247, 80)];
        let mut records = Vec::new();
        for (class, (images, patients)) in spec.iter().enumerate() {
            for i in 0..*images {
                records.push(ManifestRecord {
                    path: format!("c{class}_img{i}.pgm"),
                    patient_id: format!("c{class}_p{:03}", i % patients),
                    label: class,
                });
            }
        }
        let m = DatasetManifest::new(
            records,
            vec!["covid".to_string(), "healthy".to_string(), "other".to_string()],
        )
        .unwrap();
        assert_eq!(m.class_histogram(), vec![2168, 758, 1247]);
        assert_eq!(m.patients().len(), 210);
    }

    #[test]
    fn five_patients_five_folds_is_one_each() {
        let m = manifest(5, 2);
        let plan = patient_kfold_split(&m, 5, 0).unwrap();
        for fold in &plan.folds {
            assert_eq!(fold.test_patients.len(), 1);
            assert_eq!(fold.train_patients.len(), 4);
        }
        plan.validate(&m.patients()).unwrap();
    }

    #[test]
    fn two_hundred_ten_patients_five_folds() {
        let m = manifest(210, 1);
        let plan = patient_kfold_split(&m, 5, 7).unwrap();
        for fold in &plan.folds {
            assert_eq!(fold.test_patients.len(), 42);
        }
        plan.validate(&m.patients()).unwrap();
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let m = manifest(20, 3);
        let a = patient_kfold_split(&m, 5, 11).unwrap();
        let b = patient_kfold_split(&m, 5, 11).unwrap();
        assert_eq!(a, b);
        let mut distinct = 0;
        for seed in 0..100u64 {
            if patient_kfold_split(&m, 5, seed).unwrap() != a {
                distinct += 1;
            }
        }
        assert!(distinct >= 99, "only {distinct} of 100 seeds differed");
    }

    #[test]
    fn k_larger_than_patients_is_an_error() {
        let m = manifest(3, 1);
        assert!(patient_kfold_split(&m, 4, 0).is_err());
    }

    #[test]
    fn val_split_takes_ceil_fraction() {
        let patients: Vec<String> = (0..20).map(|i| format!("p{i:02}")).collect();
        let (train, val) = train_val_split(&patients, 0.15, 3).unwrap();
        assert_eq!(val.len(), 3);
        assert_eq!(train.len(), 17);
        for v in &val {
            assert!(!train.contains(v));
        }
    }

    #[test]
    fn val_split_zero_fraction_keeps_all_in_train() {
        let patients: Vec<String> = (0..5).map(|i| format!("p{i}")).collect();
        let (train, val) = train_val_split(&patients, 0.0, 3).unwrap();
        assert!(val.is_empty());
        assert_eq!(train.len(), 5);
    }

    #[test]
    fn val_split_is_a_partition() {
        let patients: Vec<String> = (0..13).map(|i| format!("p{i:02}")).collect();
        let (train, val) = train_val_split(&patients, 0.3, 9).unwrap();
        let mut union: Vec<String> = train.iter().chain(val.iter()).cloned().collect();
        union.sort_unstable();
        let mut expect = patients.clone();
        expect.sort_unstable();
        assert_eq!(union, expect);
    }

    #[test]
    fn val_split_needs_two_patients() {
        let patients = vec!["p0".to_string()];
        assert!(train_val_split(&patients, 0.15, 0).is_err());
    }

    #[test]
    fn shuffle_single_record_unchanged() {
        let mut v = vec![42];
        shuffle(&mut v, &mut SplitMix64::new(1));
        assert_eq!(v, vec![42]);
    }

    #[test]
    fn shuffle_deterministic_and_multiset_preserving() {
        let mut rng1 = SplitMix64::new(5);
        let mut rng2 = SplitMix64::new(5);
        let mut a: Vec<u32> = (0..50).collect();
        let mut b: Vec<u32> = (0..50).collect();
        shuffle(&mut a, &mut rng1);
        shuffle(&mut b, &mut rng2);
        assert_eq!(a, b);
        let mut rng = SplitMix64::new(6);
        let mut v: Vec<u32> = (0..20).collect();
        for _ in 0..1000 {
            shuffle(&mut v, &mut rng);
            let mut sorted = v.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        }
    }
}
