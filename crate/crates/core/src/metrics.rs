//! One-vs-rest confusion counting, the five classification metrics, and
//! multi-round aggregation with 95% confidence half-widths.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::math;
use crate::Result;

/// Metric column order used by every report and table.
pub const METRIC_NAMES: [&str; 5] = ["f1", "accuracy", "sensitivity", "specificity", "precision"];

/// Per-class one-vs-rest counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Confusion counts for every class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub per_class: Vec<ClassCounts>,
    pub total: usize,
}

/// One-vs-rest confusion counts from parallel label sequences.
pub fn confusion(predicted: &[usize], truth: &[usize], classes: usize) -> Result<ConfusionCounts> {
    if predicted.len() != truth.len() {
        return Err(Error::invalid(
            "confusion",
            format!("{} predictions vs {} truths", predicted.len(), truth.len()),
        ));
    }
    if let Some(&bad) = predicted.iter().chain(truth.iter()).find(|&&l| l >= classes) {
        return Err(Error::invalid(
            "confusion",
            format!("label {bad} out of range for {classes} classes"),
        ));
    }
    let mut per_class = vec![
        ClassCounts {
            tp: 0,
            tn: 0,
            fp: 0,
            fn_: 0
        };
        classes
    ];
    for (&p, &t) in predicted.iter().zip(truth.iter()) {
        for (c, counts) in per_class.iter_mut().enumerate() {
            match (t == c, p == c) {
                (true, true) => counts.tp += 1,
                (true, false) => counts.fn_ += 1,
                (false, true) => counts.fp += 1,
                (false, false) => counts.tn += 1,
            }
        }
    }
    Ok(ConfusionCounts {
        per_class,
        total: predicted.len(),
    })
}

/// A metric value with a defined/undefined flag. Undefined metrics (zero
/// denominators) report 0 with the flag cleared so tables stay rectangular.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricValue {
    pub value: f64,
    pub defined: bool,
}

impl MetricValue {
    fn ratio(num: usize, den: usize) -> Self {
        if den == 0 {
            MetricValue {
                value: 0.0,
                defined: false,
            }
        } else {
            MetricValue {
                value: num as f64 / den as f64,
                defined: true,
            }
        }
    }
}

/// Accuracy, precision, specificity, sensitivity, and F1 for one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub accuracy: MetricValue,
    pub precision: MetricValue,
    pub specificity: MetricValue,
    pub sensitivity: MetricValue,
    pub f1: MetricValue,
}

impl ClassMetrics {
    /// Lookup by metric name as listed in [`METRIC_NAMES`].
    pub fn get(&self, name: &str) -> Option<MetricValue> {
        match name {
            "f1" => Some(self.f1),
            "accuracy" => Some(self.accuracy),
            "sensitivity" => Some(self.sensitivity),
            "specificity" => Some(self.specificity),
            "precision" => Some(self.precision),
            _ => None,
        }
    }
}

/// Per-class metrics for one evaluation round.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
}

/// Evaluates the five metrics from confusion counts.
pub fn metrics(counts: &ConfusionCounts) -> MetricsReport {
    let per_class = counts
        .per_class
        .iter()
        .map(|c| {
            let accuracy = MetricValue::ratio(c.tp + c.tn, c.total());
            let precision = MetricValue::ratio(c.tp, c.tp + c.fp);
            let specificity = MetricValue::ratio(c.tn, c.tn + c.fp);
            let sensitivity = MetricValue::ratio(c.tp, c.tp + c.fn_);
            let f1 = if precision.defined && sensitivity.defined && precision.value + sensitivity.value > 0.0 {
                MetricValue {
                    value: 2.0 * precision.value * sensitivity.value / (precision.value + sensitivity.value),
                    defined: true,
                }
            } else {
                MetricValue {
                    value: 0.0,
                    defined: false,
                }
            };
            ClassMetrics {
                accuracy,
                precision,
                specificity,
                sensitivity,
                f1,
            }
        })
        .collect();
    MetricsReport { per_class }
}

/// Mean, sample standard deviation, and 95% half-width of one metric cell
/// across rounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateCell {
    pub mean: f64,
    pub std_dev: f64,
    /// `1.96 * s / sqrt(n)`; 0 when `n == 1` (see `single_round`).
    pub half_width: f64,
    pub rounds: usize,
    pub undefined_rounds: usize,
}

/// Cross-round aggregation of per-class metric reports.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateReport {
    /// `cells[class][metric]` in [`METRIC_NAMES`] order.
    pub cells: Vec<Vec<AggregateCell>>,
    pub rounds: usize,
    /// Set when only one round was aggregated: the half-width is reported
    /// as 0 but carries no variance information.
    pub single_round: bool,
}

impl AggregateReport {
    pub fn classes(&self) -> usize {
        self.cells.len()
    }

    pub fn cell(&self, class: usize, metric: &str) -> Option<&AggregateCell> {
        let idx = METRIC_NAMES.iter().position(|m| *m == metric)?;
        self.cells.get(class)?.get(idx)
    }
}

/// Aggregates per-round reports into mean plus or minus `1.96 s / sqrt(n)`.
pub fn aggregate(reports: &[MetricsReport]) -> Result<AggregateReport> {
    let n = reports.len();
    if n == 0 {
        return Err(Error::invalid("aggregate", "no reports to aggregate"));
    }
    let classes = reports[0].per_class.len();
    if reports.iter().any(|r| r.per_class.len() != classes) {
        return Err(Error::invalid("aggregate", "reports disagree on class count"));
    }
    let mut cells = Vec::with_capacity(classes);
    for class in 0..classes {
        let mut row = Vec::with_capacity(METRIC_NAMES.len());
        for metric in METRIC_NAMES {
            let values: Vec<f64> = reports
                .iter()
                .map(|r| r.per_class[class].get(metric).expect("known metric name").value)
                .collect();
            let undefined_rounds = reports
                .iter()
                .filter(|r| !r.per_class[class].get(metric).expect("known metric name").defined)
                .count();
            let mean = values.iter().sum::<f64>() / n as f64;
            let std_dev = if n > 1 {
                let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
                math::sqrt(ss / (n as f64 - 1.0))
            } else {
                0.0
            };
            let half_width = if n > 1 {
                1.96 * std_dev / math::sqrt(n as f64)
            } else {
                0.0
            };
            row.push(AggregateCell {
                mean,
                std_dev,
                half_width,
                rounds: n,
                undefined_rounds,
            });
        }
        cells.push(row);
    }
    Ok(AggregateReport {
        cells,
        rounds: n,
        single_round: n == 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_have_no_errors() {
        let labels = [0usize, 1, 2, 1, 0];
        let c = confusion(&labels, &labels, 3).unwrap();
        for counts in &c.per_class {
            assert_eq!(counts.fp, 0);
            assert_eq!(counts.fn_, 0);
        }
    }

    #[test]
    fn confusion_hand_enumeration() {
        let truth = [0usize, 1, 2, 0];
        let pred = [0usize, 2, 2, 1];
        let c = confusion(&pred, &truth, 3).unwrap();
        assert_eq!(
            c.per_class[0],
            ClassCounts {
                tp: 1,
                fn_: 1,
                fp: 0,
                tn: 2
            }
        );
        assert_eq!(
            c.per_class[1],
            ClassCounts {
                tp: 0,
                fn_: 1,
                fp: 1,
                tn: 2
            }
        );
        assert_eq!(
            c.per_class[2],
            ClassCounts {
                tp: 1,
                fn_: 0,
                fp: 1,
                tn: 2
            }
        );
    }

    #[test]
    fn empty_input_is_all_zeros() {
        let c = confusion(&[], &[], 3).unwrap();
        assert_eq!(c.total, 0);
        for counts in &c.per_class {
            assert_eq!(counts.total(), 0);
        }
    }

    #[test]
    fn label_out_of_range_is_an_error() {
        assert!(confusion(&[3], &[0], 3).is_err());
    }

    #[test]
    fn metrics_hand_case() {
        let counts = ConfusionCounts {
            per_class: alloc::vec![ClassCounts {
                tp: 90,
                tn: 80,
                fp: 20,
                fn_: 10
            }],
            total: 200,
        };
        let m = metrics(&counts);
        let c = &m.per_class[0];
        assert!((c.accuracy.value - 0.85).abs() < 1e-12);
        assert!((c.precision.value - 0.8181818).abs() < 1e-7);
        assert!((c.specificity.value - 0.8).abs() < 1e-12);
        assert!((c.sensitivity.value - 0.9).abs() < 1e-12);
        assert!((c.f1.value - 0.8571429).abs() < 1e-7);
    }

    #[test]
    fn perfect_counts_give_all_ones() {
        let counts = ConfusionCounts {
            per_class: alloc::vec![ClassCounts {
                tp: 5,
                tn: 7,
                fp: 0,
                fn_: 0
            }],
            total: 12,
        };
        let c = metrics(&counts).per_class[0];
        for v in [c.accuracy, c.precision, c.specificity, c.sensitivity, c.f1] {
            assert!(v.defined);
            assert_eq!(v.value, 1.0);
        }
    }

    #[test]
    fn zero_denominators_flag_undefined() {
        let counts = ConfusionCounts {
            per_class: alloc::vec![ClassCounts {
                tp: 0,
                tn: 10,
                fp: 0,
                fn_: 2
            }],
            total: 12,
        };
        let c = metrics(&counts).per_class[0];
        assert!(!c.precision.defined);
        assert!(!c.f1.defined);
        assert!(c.specificity.defined);
    }

    #[test]
    fn aggregate_two_rounds_hand_case() {
        let make = |v: f64| MetricsReport {
            per_class: alloc::vec![ClassMetrics {
                accuracy: MetricValue { value: v, defined: true },
                precision: MetricValue { value: v, defined: true },
                specificity: MetricValue { value: v, defined: true },
                sensitivity: MetricValue { value: v, defined: true },
                f1: MetricValue { value: v, defined: true },
            }],
        };
        let agg = aggregate(&[make(0.9), make(1.0)]).unwrap();
        let cell = agg.cell(0, "accuracy").unwrap();
        assert!((cell.mean - 0.95).abs() < 1e-12);
        assert!((cell.std_dev - 0.0707107).abs() < 1e-7);
        assert!((cell.half_width - 0.098).abs() < 1e-6);
    }

    #[test]
    fn aggregate_single_round_flags_caveat() {
        let report = MetricsReport {
            per_class: alloc::vec![ClassMetrics {
                accuracy: MetricValue { value: 0.5, defined: true },
                precision: MetricValue { value: 0.5, defined: true },
                specificity: MetricValue { value: 0.5, defined: true },
                sensitivity: MetricValue { value: 0.5, defined: true },
                f1: MetricValue { value: 0.5, defined: true },
            }],
        };
        let agg = aggregate(&[report]).unwrap();
        assert!(agg.single_round);
        assert_eq!(agg.cell(0, "f1").unwrap().half_width, 0.0);
    }

    #[test]
    fn identical_rounds_have_zero_half_width() {
        let report = metrics(&confusion(&[0, 1, 1], &[0, 1, 0], 2).unwrap());
        let agg = aggregate(&[report.clone(), report.clone(), report]).unwrap();
        for class in 0..2 {
            for metric in METRIC_NAMES {
                assert_eq!(agg.cell(class, metric).unwrap().half_width, 0.0);
            }
        }
    }
}
