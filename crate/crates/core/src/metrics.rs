//! Confusion matrices and the classification metrics built on them.
//!
//! Per-class precision/recall/F1 use a one-vs-rest reduction. An undefined
//! ratio (0/0) counts as 0, and so does an MCC whose denominator vanishes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("class {value} out of range for K={k}")]
    OutOfRange { value: usize, k: usize },
    #[error("{preds} predictions for {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("confusion matrix is empty")]
    Empty,
    #[error("binary MCC needs K=2, got K={0}")]
    NotBinary(usize),
    #[error("unknown averaging mode `{0}`")]
    UnknownAveraging(String),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// `K×K` counts; rows are true classes, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let k = rows.len();
        assert!(rows.iter().all(|r| r.len() == k), "confusion matrix must be square");
        Self {
            k,
            counts: rows.concat(),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        for v in [truth, pred] {
            if v >= self.k {
                return Err(MetricsError::OutOfRange { value: v, k: self.k });
            }
        }
        self.counts[truth * self.k + pred] += 1;
        Ok(())
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    /// Row sums: how many samples truly belong to each class.
    pub fn support(&self) -> Vec<u64> {
        (0..self.k).map(|t| (0..self.k).map(|p| self.get(t, p)).sum()).collect()
    }

    /// Column sums: how often each class was predicted.
    pub fn predicted(&self) -> Vec<u64> {
        (0..self.k).map(|p| (0..self.k).map(|t| self.get(t, p)).sum()).collect()
    }

    /// One-vs-rest counts for class `c`.
    pub fn one_vs_rest(&self, c: usize) -> BinaryCounts {
        let tp = self.get(c, c);
        let fn_ = self.support()[c] - tp;
        let fp = self.predicted()[c] - tp;
        BinaryCounts {
            tp,
            fp,
            fn_,
            tn: self.total() - tp - fp - fn_,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BinaryCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

pub fn confusion(preds: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    let mut cm = ConfusionMatrix::zeros(k);
    for (&p, &t) in preds.iter().zip(labels) {
        cm.add(t, p)?;
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    Micro,
    Macro,
    #[default]
    Weighted,
}

impl Averaging {
    pub const ALL: [Averaging; 3] = [Averaging::Micro, Averaging::Macro, Averaging::Weighted];
}

impl fmt::Display for Averaging {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Averaging::Micro => "micro",
            Averaging::Macro => "macro",
            Averaging::Weighted => "weighted",
        })
    }
}

impl FromStr for Averaging {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "micro" => Ok(Averaging::Micro),
            "macro" => Ok(Averaging::Macro),
            "weighted" => Ok(Averaging::Weighted),
            other => Err(MetricsError::UnknownAveraging(other.into())),
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

pub fn per_class(cm: &ConfusionMatrix) -> Vec<ClassScores> {
    (0..cm.k())
        .map(|c| {
            let b = cm.one_vs_rest(c);
            ClassScores {
                precision: ratio(b.tp, b.tp + b.fp),
                recall: ratio(b.tp, b.tp + b.fn_),
                // 2TP / (2TP + FP + FN) is the harmonic mean without the 0/0 detour
                f1: ratio(2 * b.tp, 2 * b.tp + b.fp + b.fn_),
                support: b.tp + b.fn_,
            }
        })
        .collect()
}

/// Averaged `(precision, recall, f1)`.
pub fn prf1(cm: &ConfusionMatrix, averaging: Averaging) -> (f64, f64, f64) {
    match averaging {
        Averaging::Micro => {
            // Σfp and Σfn both equal total − trace, so all three collapse to accuracy.
            let a = ratio(cm.trace(), cm.total());
            (a, a, a)
        }
        Averaging::Macro => {
            let scores = per_class(cm);
            let k = scores.len().max(1) as f64;
            let mean = |f: fn(&ClassScores) -> f64| scores.iter().map(f).sum::<f64>() / k;
            (mean(|s| s.precision), mean(|s| s.recall), mean(|s| s.f1))
        }
        Averaging::Weighted => {
            let scores = per_class(cm);
            let n = cm.total();
            let wmean = |f: fn(&ClassScores) -> f64| {
                if n == 0 {
                    0.0
                } else {
                    scores.iter().map(|s| s.support as f64 * f(s)).sum::<f64>() / n as f64
                }
            };
            // support·(tp/support) = tp, so the weighted recall is trace/total.
            (wmean(|s| s.precision), ratio(cm.trace(), n), wmean(|s| s.f1))
        }
    }
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(ratio(cm.trace(), cm.total()))
}

/// Two-class MCC with class 1 as positive.
pub fn mcc_binary(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.k() != 2 {
        return Err(MetricsError::NotBinary(cm.k()));
    }
    let (tp, tn, fp, fn_) = (
        cm.get(1, 1) as f64,
        cm.get(0, 0) as f64,
        cm.get(0, 1) as f64,
        cm.get(1, 0) as f64,
    );
    let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok((tp * tn - fp * fn_) / den.sqrt())
}

/// Gorodkin's R_K: covariance of the one-hot truth and prediction indicators.
pub fn mcc_multiclass(cm: &ConfusionMatrix) -> f64 {
    let s = cm.total() as f64;
    let c = cm.trace() as f64;
    let t = cm.support();
    let p = cm.predicted();
    let pt: f64 = p.iter().zip(&t).map(|(&a, &b)| a as f64 * b as f64).sum();
    let pp: f64 = p.iter().map(|&a| (a as f64).powi(2)).sum();
    let tt: f64 = t.iter().map(|&a| (a as f64).powi(2)).sum();
    let den = (s * s - pp) * (s * s - tt);
    if den <= 0.0 {
        return 0.0;
    }
    ((c * s - pt) / den.sqrt()).clamp(-1.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
    pub averaging: Averaging,
    pub per_class: Vec<ClassScores>,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn from_confusion(cm: ConfusionMatrix, averaging: Averaging) -> Result<Self> {
        let accuracy = accuracy(&cm)?;
        let (precision, recall, f1) = prf1(&cm, averaging);
        Ok(Self {
            accuracy,
            precision,
            recall,
            f1,
            mcc: mcc_multiclass(&cm),
            averaging,
            per_class: per_class(&cm),
            confusion: cm,
        })
    }

    pub fn compute(preds: &[usize], labels: &[usize], k: usize, averaging: Averaging) -> Result<Self> {
        Self::from_confusion(confusion(preds, labels, k)?, averaging)
    }

    /// `metric\tvalue` rows followed by the per-class table. Values are
    /// percentages with two decimals, MCC stays on its [-1, 1] scale.
    pub fn to_tsv(&self, class_names: &[String]) -> String {
        let mut out = String::from("metric\tvalue\n");
        out += &format!("averaging\t{}\n", self.averaging);
        for (name, v) in [
            ("accuracy", self.accuracy),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
        ] {
            out += &format!("{name}\t{:.2}\n", 100.0 * v);
        }
        out += &format!("mcc\t{:.4}\n\n", self.mcc);
        out += "class\tprecision\trecall\tf1\tsupport\n";
        for (i, s) in self.per_class.iter().enumerate() {
            let name = class_names.get(i).cloned().unwrap_or_else(|| i.to_string());
            out += &format!(
                "{name}\t{:.2}\t{:.2}\t{:.2}\t{}\n",
                100.0 * s.precision,
                100.0 * s.recall,
                100.0 * s.f1,
                s.support
            );
        }
        out
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Accuracy   {:>6.2}%", 100.0 * self.accuracy)?;
        writeln!(f, "Precision  {:>6.2}%  ({})", 100.0 * self.precision, self.averaging)?;
        writeln!(f, "Recall     {:>6.2}%", 100.0 * self.recall)?;
        writeln!(f, "F1-score   {:>6.2}%", 100.0 * self.f1)?;
        write!(f, "MCC        {:>7.4}", self.mcc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm2() -> ConfusionMatrix {
        confusion(&[0, 1, 1], &[0, 0, 1], 2).unwrap()
    }

    #[test]
    fn confusion_examples() {
        assert_eq!(cm2().rows(), vec![vec![1, 1], vec![0, 1]]);
        assert_eq!(confusion(&[], &[], 3).unwrap().total(), 0);
        let d = confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(d.trace(), 3);
        assert_eq!(confusion(&[3], &[0], 3), Err(MetricsError::OutOfRange { value: 3, k: 3 }));
    }

    #[test]
    fn macro_example() {
        let (p, r, f) = prf1(&cm2(), Averaging::Macro);
        assert_eq!((p, r), (0.75, 0.75));
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
        let pc = per_class(&cm2());
        assert_eq!((pc[0].precision, pc[0].recall), (1.0, 0.5));
        assert_eq!((pc[1].precision, pc[1].recall), (0.5, 1.0));
    }

    #[test]
    fn never_predicted_class_has_zero_precision() {
        let cm = confusion(&[0, 0, 0], &[0, 1, 1], 2).unwrap();
        assert_eq!(per_class(&cm)[1].precision, 0.0);
        assert_eq!(per_class(&cm)[1].f1, 0.0);
    }

    #[test]
    fn accuracy_examples() {
        assert!((accuracy(&cm2()).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let off = ConfusionMatrix::from_rows(&[vec![0, 3], vec![3, 0]]);
        assert_eq!(accuracy(&off).unwrap(), 0.0);
        assert_eq!(accuracy(&ConfusionMatrix::zeros(2)), Err(MetricsError::Empty));
    }

    #[test]
    fn binary_mcc_examples() {
        // rows: true 0 then true 1
        let cm = ConfusionMatrix::from_rows(&[vec![3, 1], vec![2, 4]]);
        assert!((mcc_binary(&cm).unwrap() - 10.0 / 600f64.sqrt()).abs() < 1e-12);
        let perfect = ConfusionMatrix::from_rows(&[vec![5, 0], vec![0, 5]]);
        assert_eq!(mcc_binary(&perfect).unwrap(), 1.0);
        let constant = ConfusionMatrix::from_rows(&[vec![4, 0], vec![6, 0]]);
        assert_eq!(mcc_binary(&constant).unwrap(), 0.0);
        assert!(mcc_binary(&ConfusionMatrix::zeros(3)).is_err());
    }

    #[test]
    fn multiclass_mcc_examples() {
        let perfect = ConfusionMatrix::from_rows(&[vec![2, 0, 0], vec![0, 3, 0], vec![0, 0, 1]]);
        assert_eq!(mcc_multiclass(&perfect), 1.0);
        // every row is proportional to the predicted marginal
        let indep = ConfusionMatrix::from_rows(&[vec![6, 2], vec![3, 1]]);
        assert!(mcc_multiclass(&indep).abs() < 1e-12);
    }

    #[test]
    fn report_formats() {
        let r = MetricsReport::compute(&[0, 1, 1], &[0, 0, 1], 2, Averaging::Weighted).unwrap();
        let tsv = r.to_tsv(&["a".into(), "b".into()]);
        assert!(tsv.contains("accuracy\t66.67\n"));
        assert!(tsv.contains("a\t100.00\t50.00\t66.67\t2\n"));
        assert!(r.to_string().starts_with("Accuracy    66.67%"));
        assert_eq!("macro".parse::<Averaging>().unwrap(), Averaging::Macro);
    }
}
