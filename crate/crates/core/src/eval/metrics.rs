use serde::{Deserialize, Serialize};

/// Binary confusion counts with "anomalous" as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn record(&mut self, truth: bool, predicted: bool) {
        match (truth, predicted) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fn_ += 1,
        }
    }

    pub fn from_outcomes(outcomes: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = Self::default();
        for (t, p) in outcomes {
            c.record(t, p);
        }
        c
    }
}

/// Undefined ratios are `None` and never silently zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub specificity: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Metrics {
        precision,
        recall,
        f1,
        specificity: ratio(c.tn, c.tn + c.fp),
    }
}

/// `"nan"` for undefined values, four decimals otherwise.
pub fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |v| format!("{v:.4}"))
}

/// Mean over the defined entries; `None` when none is defined.
pub fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.into_iter().flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nine_one_one() {
        let m = metrics(&ConfusionCounts { tp: 9, fp: 1, tn: 0, fn_: 1 });
        assert!((m.precision.unwrap() - 0.9).abs() < 1e-12);
        assert!((m.recall.unwrap() - 0.9).abs() < 1e-12);
        assert!((m.f1.unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn undefined_precision() {
        let m = metrics(&ConfusionCounts { tp: 0, fp: 0, tn: 5, fn_: 3 });
        assert_eq!(m.precision, None);
        assert_eq!(m.recall, Some(0.0));
        assert_eq!(m.f1, None);
        assert_eq!(m.specificity, Some(1.0));
        assert_eq!(fmt_metric(m.precision), "nan");
        assert_eq!(fmt_metric(m.recall), "0.0000");
    }

    #[test]
    fn all_normal_with_no_alarms() {
        let m = metrics(&ConfusionCounts::from_outcomes(vec![(false, false); 10]));
        assert_eq!((m.precision, m.recall, m.f1), (None, None, None));
        assert_eq!(m.specificity, Some(1.0));
    }

    #[test]
    fn mean_skips_undefined() {
        assert_eq!(mean_defined([Some(0.5), None, Some(1.0)]), Some(0.75));
        assert_eq!(mean_defined([None, None]), None);
    }

    proptest! {
        #[test]
        fn matches_independent_formulas(tp in 0usize..50, fp in 0usize..50, tn in 0usize..50, fn_ in 0usize..50) {
            let m = metrics(&ConfusionCounts { tp, fp, tn, fn_ });
            let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
            if tp + fp > 0.0 {
                prop_assert!((m.precision.unwrap() - tp / (tp + fp)).abs() < 1e-12);
            } else {
                prop_assert!(m.precision.is_none());
            }
            if tp + fn_ > 0.0 {
                prop_assert!((m.recall.unwrap() - tp / (tp + fn_)).abs() < 1e-12);
            }
            if tp + fp > 0.0 && tp + fn_ > 0.0 {
                // F1 = 2TP / (2TP + FP + FN)
                prop_assert!((m.f1.unwrap() - 2.0 * tp / (2.0 * tp + fp + fn_)).abs() < 1e-12);
            }
            for v in [m.precision, m.recall, m.f1, m.specificity].into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn counts_sum_to_outcomes(outcomes in prop::collection::vec((any::<bool>(), any::<bool>()), 0..100)) {
            let c = ConfusionCounts::from_outcomes(outcomes.iter().copied());
            prop_assert_eq!(c.total(), outcomes.len());
            prop_assert_eq!(c.tp, outcomes.iter().filter(|&&(t, p)| t && p).count());
        }
    }
}
