//! Confusion matrices, threshold metrics, precision-recall curves and
//! average precision.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classes::{Abnormality, N_CLASSES};
use crate::error::{Error, Result};
use crate::model::io::write_atomic;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    /// Positive iff `score > threshold`.
    pub fn from_scores(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let mut cm = Self::default();
        for (&s, &y) in scores.iter().zip(labels) {
            match (s > threshold, y) {
                (true, true) => cm.tp += 1,
                (true, false) => cm.fp += 1,
                (false, true) => cm.fn_ += 1,
                (false, false) => cm.tn += 1,
            }
        }
        cm
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Which ratios had a zero denominator (and were reported as 0).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Degenerate {
    pub precision: bool,
    pub recall: bool,
    pub specificity: bool,
    pub f1: bool,
}

impl Degenerate {
    pub fn any(&self) -> bool {
        self.precision || self.recall || self.specificity || self.f1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
    pub degenerate: Degenerate,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> Metrics {
    let (precision, dp) = ratio(cm.tp, cm.tp + cm.fp);
    let (recall, dr) = ratio(cm.tp, cm.tp + cm.fn_);
    let (specificity, ds) = ratio(cm.tn, cm.tn + cm.fp);
    let (f1, df) = f1_score(precision, recall);
    Metrics {
        precision,
        recall,
        specificity,
        f1,
        degenerate: Degenerate {
            precision: dp,
            recall: dr,
            specificity: ds,
            f1: df,
        },
    }
}

fn f1_score(p: f64, r: f64) -> (f64, bool) {
    if p + r == 0.0 {
        (0.0, true)
    } else {
        (2.0 * p * r / (p + r), false)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// One point per distinct score, from the highest threshold down, so recall
/// rises along the list. Point `k` predicts positive exactly the exams whose
/// score is among the top `k` distinct values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

impl PrCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,precision,recall\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.threshold, p.precision, p.recall);
        }
        out
    }
}

/// The curve and its step-interpolated average precision
/// `Σ (R_k − R_{k−1})·P_k`.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<(PrCurve, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores, {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Input(format!("score {s} is not a number")));
    }
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 {
        return Err(Error::UndefinedAveragePrecision("no positive labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let threshold = match order.get(i).map(|&j| scores[j]) {
            Some(next) => {
                let mid = next + (s - next) / 2.0;
                if mid > next && mid < s {
                    mid
                } else {
                    next
                }
            }
            None => s.next_down(),
        };
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push(PrPoint {
            threshold,
            precision,
            recall,
        });
    }
    Ok((PrCurve { points }, ap))
}

/// The curve threshold with the largest F1; ties go to the higher threshold.
pub fn select_threshold(curve: &PrCurve) -> Result<f64> {
    let mut best: Option<(f64, f64)> = None;
    for p in &curve.points {
        let (f1, _) = f1_score(p.precision, p.recall);
        let better = match best {
            None => true,
            Some((bf, bt)) => f1 > bf || (f1 == bf && p.threshold > bt),
        };
        if better {
            best = Some((f1, p.threshold));
        }
    }
    best.map(|(_, t)| t)
        .ok_or_else(|| Error::Input("cannot select a threshold from an empty curve".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: Abnormality,
    pub threshold: f64,
    pub confusion: ConfusionMatrix,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
    pub degenerate: Degenerate,
    /// Absent when the class has no positive exam.
    pub average_precision: Option<f64>,
    #[serde(skip)]
    pub curve: PrCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_exams: usize,
    pub classes: Vec<ClassReport>,
}

/// Column `c` of an `[N, classes]` score tensor.
pub fn class_scores(probs: &Tensor<f32>, c: usize) -> Result<Vec<f64>> {
    let (n, k) = probs.dims2()?;
    if c >= k {
        return Err(Error::Shape(format!("class {c} out of range for {k} columns")));
    }
    Ok((0..n).map(|i| probs.data()[i * k + c] as f64).collect())
}

fn check_inputs(probs: &Tensor<f32>, labels: &[[bool; N_CLASSES]]) -> Result<()> {
    let (n, k) = probs.dims2()?;
    if k != N_CLASSES || n != labels.len() {
        return Err(Error::Shape(format!(
            "scores are {:?}, labels cover {} exams of {N_CLASSES} classes",
            probs.shape(),
            labels.len()
        )));
    }
    Ok(())
}

fn class_labels(labels: &[[bool; N_CLASSES]], c: usize) -> Vec<bool> {
    labels.iter().map(|l| l[c]).collect()
}

/// Max-F1 threshold per class. A class with no positive exam gets 0.5.
pub fn select_thresholds(probs: &Tensor<f32>, labels: &[[bool; N_CLASSES]]) -> Result<[f64; N_CLASSES]> {
    check_inputs(probs, labels)?;
    let mut out = [0.5; N_CLASSES];
    for (c, t) in out.iter_mut().enumerate() {
        match pr_curve(&class_scores(probs, c)?, &class_labels(labels, c)) {
            Ok((curve, _)) => *t = select_threshold(&curve)?,
            Err(Error::UndefinedAveragePrecision(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

pub fn evaluate(
    probs: &Tensor<f32>,
    labels: &[[bool; N_CLASSES]],
    thresholds: &[f64; N_CLASSES],
) -> Result<MetricsReport> {
    check_inputs(probs, labels)?;
    let mut classes = Vec::with_capacity(N_CLASSES);
    for class in Abnormality::ALL {
        let c = class.index();
        let scores = class_scores(probs, c)?;
        let y = class_labels(labels, c);
        let confusion = ConfusionMatrix::from_scores(&scores, &y, thresholds[c]);
        let m = metrics_from_confusion(&confusion);
        let (curve, average_precision) = match pr_curve(&scores, &y) {
            Ok((curve, ap)) => (curve, Some(ap)),
            Err(Error::UndefinedAveragePrecision(_)) => (PrCurve::default(), None),
            Err(e) => return Err(e),
        };
        classes.push(ClassReport {
            class,
            threshold: thresholds[c],
            confusion,
            precision: m.precision,
            recall: m.recall,
            specificity: m.specificity,
            f1: m.f1,
            degenerate: m.degenerate,
            average_precision,
            curve,
        });
    }
    Ok(MetricsReport {
        n_exams: labels.len(),
        classes,
    })
}

impl MetricsReport {
    pub fn class(&self, c: Abnormality) -> &ClassReport {
        &self.classes[c.index()]
    }

    /// Fixed-width table rounded to three decimals.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<7}{:>10}{:>10}{:>10}{:>12}{:>8}{:>8}\n",
            "class", "threshold", "precision", "recall", "specificity", "F1", "AP"
        );
        for r in &self.classes {
            let ap = r.average_precision.map_or("-".to_string(), |v| format!("{v:.3}"));
            let _ = writeln!(
                out,
                "{:<7}{:>10.3}{:>10.3}{:>10.3}{:>12.3}{:>8.3}{:>8}",
                r.class.abbrev(),
                r.threshold,
                r.precision,
                r.recall,
                r.specificity,
                r.f1,
                ap
            );
        }
        out
    }

    /// `report.json` plus `pr_<class>.csv` per class.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        write_atomic(&dir.join("report.json"), &json)?;
        for r in &self.classes {
            write_atomic(
                &dir.join(format!("pr_{}.csv", r.class.abbrev())),
                r.curve.to_csv().as_bytes(),
            )?;
        }
        Ok(())
    }
}

/// Published confusion matrices of a six-class ECG classifier on a 953-exam
/// test set, with the metrics reported for them (rounded to three decimals),
/// used as a golden check of the metric formulas.
pub mod reference {
    use super::ConfusionMatrix;

    pub const N_EXAMS: u64 = 953;

    const fn cm(tp: u64, fn_: u64, fp: u64, tn: u64) -> ConfusionMatrix {
        ConfusionMatrix { tp, fp, fn_, tn }
    }

    /// Class order: 1dAVb, RBBB, LBBB, SB, AF, ST.
    pub const CONFUSIONS: [ConfusionMatrix; 6] = [
        cm(24, 9, 2, 918),
        cm(36, 0, 5, 912),
        cm(33, 0, 1, 919),
        cm(19, 3, 5, 926),
        cm(11, 2, 2, 938),
        cm(40, 2, 6, 905),
    ];

    /// Precision, recall, specificity, F1 per class.
    pub const METRICS: [[f64; 4]; 6] = [
        [0.923, 0.727, 0.998, 0.813],
        [0.878, 1.000, 0.995, 0.935],
        [0.971, 1.000, 0.999, 0.985],
        [0.792, 0.864, 0.995, 0.826],
        [0.846, 0.846, 0.998, 0.846],
        [0.870, 0.952, 0.993, 0.909],
    ];

    pub const TOLERANCE: f64 = 1e-3;

    /// Largest deviation between recomputed and reported metrics, over all
    /// 24 values.
    pub fn max_deviation() -> f64 {
        CONFUSIONS
            .iter()
            .zip(METRICS.iter())
            .flat_map(|(cm, expected)| {
                let m = super::metrics_from_confusion(cm);
                [m.precision, m.recall, m.specificity, m.f1]
                    .into_iter()
                    .zip(expected.iter())
                    .map(|(a, b)| (a - b).abs())
                    .collect::<Vec<_>>()
            })
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_metrics_reproduce() {
        for (cm, expected) in reference::CONFUSIONS.iter().zip(reference::METRICS) {
            assert_eq!(cm.total(), reference::N_EXAMS);
            let m = metrics_from_confusion(cm);
            for (got, want) in [m.precision, m.recall, m.specificity, m.f1].iter().zip(expected) {
                assert!((got - want).abs() <= reference::TOLERANCE, "{cm:?}: {got} vs {want}");
            }
        }
        assert!(reference::max_deviation() <= reference::TOLERANCE);
    }

    #[test]
    fn degenerate_ratios_flagged() {
        let m = metrics_from_confusion(&ConfusionMatrix {
            tp: 0,
            fp: 0,
            fn_: 3,
            tn: 5,
        });
        assert_eq!(m.precision, 0.0);
        assert!(m.degenerate.precision && m.degenerate.f1 && !m.degenerate.specificity);
    }

    #[test]
    fn separated_and_constant_scores() {
        let scores = [0.9, 0.8, 0.3, 0.2, 0.1];
        let labels = [true, true, false, false, false];
        let (curve, ap) = pr_curve(&scores, &labels).unwrap();
        assert_eq!(ap, 1.0);
        let t = select_threshold(&curve).unwrap();
        assert!(t > 0.3 && t < 0.8);
        let cm = ConfusionMatrix::from_scores(&scores, &labels, t);
        assert_eq!(metrics_from_confusion(&cm).f1, 1.0);

        let (curve, ap) = pr_curve(&[0.4; 8], &[true, false, false, true, false, false, false, false]).unwrap();
        assert_eq!(curve.points.len(), 1);
        assert!((ap - 0.25).abs() < 1e-12);
        assert!(curve.points[0].threshold < 0.4);

        assert!(matches!(
            pr_curve(&[0.1, 0.2], &[false, false]),
            Err(Error::UndefinedAveragePrecision(_))
        ));
    }

    #[test]
    fn selects_the_constructed_peak() {
        let point = |threshold, precision, recall| PrPoint {
            threshold,
            precision,
            recall,
        };
        let curve = PrCurve {
            points: vec![
                point(0.9, 1.0, 0.2),
                point(0.7, 0.9, 0.8),
                point(0.5, 0.6, 0.9),
                point(0.2, 0.3, 1.0),
            ],
        };
        assert_eq!(select_threshold(&curve).unwrap(), 0.7);
        let tied = PrCurve {
            points: vec![point(0.8, 0.5, 0.5), point(0.4, 0.5, 0.5)],
        };
        assert_eq!(select_threshold(&tied).unwrap(), 0.8);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let labels = vec![
            [true, false, false, true, false, false],
            [false, true, true, false, true, true],
            [false, false, false, false, false, false],
        ];
        let probs = Tensor::from_vec(
            &[3, 6],
            labels.iter().flatten().map(|&l| if l { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let r = evaluate(&probs, &labels, &[0.5; 6]).unwrap();
        for c in &r.classes {
            assert_eq!((c.precision, c.recall, c.specificity, c.f1), (1.0, 1.0, 1.0, 1.0));
            assert_eq!(c.average_precision, Some(1.0));
        }
        assert!(r.table().lines().count() == 7);
    }

    #[test]
    fn reference_confusions_as_predictions() {
        // lay each published matrix out as scores and labels
        let n = reference::N_EXAMS as usize;
        let mut labels = vec![[false; N_CLASSES]; n];
        let mut probs = vec![0.0f32; n * N_CLASSES];
        for (c, cm) in reference::CONFUSIONS.iter().enumerate() {
            let mut i = 0;
            for (count, label, score) in [
                (cm.tp, true, 0.9),
                (cm.fn_, true, 0.1),
                (cm.fp, false, 0.9),
                (cm.tn, false, 0.1),
            ] {
                for _ in 0..count {
                    labels[i][c] = label;
                    probs[i * N_CLASSES + c] = score;
                    i += 1;
                }
            }
        }
        let probs = Tensor::from_vec(&[n, N_CLASSES], probs).unwrap();
        let r = evaluate(&probs, &labels, &[0.5; 6]).unwrap();
        for (c, expected) in r.classes.iter().zip(reference::METRICS) {
            assert_eq!(c.confusion, reference::CONFUSIONS[c.class.index()]);
            for (got, want) in [c.precision, c.recall, c.specificity, c.f1].iter().zip(expected) {
                assert!((got - want).abs() <= 1e-3);
            }
        }
    }

    fn arb_scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (1usize..60)
            .prop_flat_map(|n| {
                (
                    proptest::collection::vec(prop_oneof![0.0f64..1.0, (0u8..5).prop_map(|v| v as f64 / 4.0)], n),
                    proptest::collection::vec(any::<bool>(), n),
                )
            })
            .prop_filter("needs a positive", |(_, y)| y.iter().any(|&v| v))
    }

    proptest! {
        #[test]
        fn recall_falls_as_threshold_rises((s, y) in arb_scored()) {
            let (curve, ap) = pr_curve(&s, &y).unwrap();
            for w in curve.points.windows(2) {
                prop_assert!(w[0].threshold > w[1].threshold);
                prop_assert!(w[0].recall <= w[1].recall);
            }
            for p in &curve.points {
                prop_assert!((0.0..=1.0).contains(&p.precision) && (0.0..=1.0).contains(&p.recall));
                // each point's threshold reproduces its own counts
                let m = metrics_from_confusion(&ConfusionMatrix::from_scores(&s, &y, p.threshold));
                prop_assert!((m.recall - p.recall).abs() < 1e-12);
                prop_assert!((m.precision - p.precision).abs() < 1e-12);
            }
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
        }

        #[test]
        fn ap_ignores_monotone_transforms((s, y) in arb_scored()) {
            let (_, ap) = pr_curve(&s, &y).unwrap();
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            let (_, ap2) = pr_curve(&t, &y).unwrap();
            prop_assert!((ap - ap2).abs() < 1e-12);
        }

        #[test]
        fn selected_threshold_attains_best_f1((s, y) in arb_scored()) {
            let (curve, _) = pr_curve(&s, &y).unwrap();
            let t = select_threshold(&curve).unwrap();
            let f1_at = |t: f64| metrics_from_confusion(&ConfusionMatrix::from_scores(&s, &y, t)).f1;
            // exhaustive sweep: every score and just below the lowest
            let mut best = 0.0f64;
            for &c in s.iter().chain([s.iter().copied().fold(f64::INFINITY, f64::min).next_down()].iter()) {
                best = best.max(f1_at(c));
            }
            prop_assert!((f1_at(t) - best).abs() < 1e-12);
        }

        #[test]
        fn metric_identities(tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500, tn in 0u64..500) {
            let cm = ConfusionMatrix { tp, fp, fn_, tn };
            let m = metrics_from_confusion(&cm);
            if tp + fp > 0 { prop_assert!((m.precision * (tp + fp) as f64 - tp as f64).abs() < 1e-9); }
            if tp + fn_ > 0 { prop_assert!((m.recall * (tp + fn_) as f64 - tp as f64).abs() < 1e-9); }
            if m.precision + m.recall > 0.0 {
                prop_assert!((m.f1 - 2.0 * m.precision * m.recall / (m.precision + m.recall)).abs() < 1e-9);
            }
            for v in [m.precision, m.recall, m.specificity, m.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn order_does_not_matter((s, y) in arb_scored(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut idx: Vec<usize> = (0..s.len()).collect();
            idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let s2: Vec<f64> = idx.iter().map(|&i| s[i]).collect();
            let y2: Vec<bool> = idx.iter().map(|&i| y[i]).collect();
            prop_assert_eq!(pr_curve(&s, &y).unwrap(), pr_curve(&s2, &y2).unwrap());
        }
    }
}
