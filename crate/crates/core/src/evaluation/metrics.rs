use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::errorset::Label;
use crate::introspector::IntrospectionVerdict;
use crate::naps::NapMode;

fn check_binary(labels: &[u8]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.iter().filter(|&&l| l == 0).count();
    if pos + neg != labels.len() {
        return Err(Error::Invalid("labels must be 0 or 1".into()));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve by trapezoidal integration over every distinct
/// score threshold. Tied scores contribute a diagonal segment, which is the
/// same as counting tied positive/negative pairs as one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let (pos, neg) = check_binary(labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::Invalid("AUROC needs both classes".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Invalid("scores contain NaN".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    // Work in integer counts; divide once at the end.
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut twice_area = 0u64;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += (fp - fp0) * (tp + tp0);
    }
    Ok(twice_area as f64 / (2.0 * pos as f64 * neg as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    /// Positive class is Error (1).
    pub fn from_labels(predicted: &[u8], truth: &[u8]) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::Invalid(format!(
                "{} predictions but {} labels",
                predicted.len(),
                truth.len()
            )));
        }
        let mut c = Confusion::default();
        for (&p, &t) in predicted.iter().zip(truth) {
            match (p, t) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fn_ += 1,
                (0, 0) => c.tn += 1,
                _ => return Err(Error::Invalid("labels must be 0 or 1".into())),
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `tp / (tp + fn)`, undefined without positives.
    pub fn recall_pos(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    /// `tn / (tn + fp)`, undefined without negatives.
    pub fn recall_neg(&self) -> Option<f64> {
        let d = self.tn + self.fp;
        (d > 0).then(|| self.tn as f64 / d as f64)
    }
}

/// `(recall_pos, recall_neg)`; a recall is `None` when its class is absent.
pub fn recalls(predicted: &[u8], truth: &[u8]) -> Result<(Option<f64>, Option<f64>)> {
    let c = Confusion::from_labels(predicted, truth)?;
    Ok((c.recall_pos(), c.recall_neg()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Bucket {
    #[serde(rename = "TP")]
    Tp,
    #[serde(rename = "FP")]
    Fp,
    #[serde(rename = "FN")]
    Fn,
    #[serde(rename = "TN")]
    Tn,
}

impl Bucket {
    pub const ALL: [Bucket; 4] = [Bucket::Tp, Bucket::Fp, Bucket::Fn, Bucket::Tn];

    pub fn as_str(&self) -> &'static str {
        match self {
            Bucket::Tp => "TP",
            Bucket::Fp => "FP",
            Bucket::Fn => "FN",
            Bucket::Tn => "TN",
        }
    }

    pub fn of(predicted: Label, truth: Label) -> Self {
        match (predicted, truth) {
            (Label::Error, Label::Error) => Bucket::Tp,
            (Label::Error, Label::NoError) => Bucket::Fp,
            (Label::NoError, Label::Error) => Bucket::Fn,
            (Label::NoError, Label::NoError) => Bucket::Tn,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted data, `q` in `[0, 1]`.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    Some(Summary {
        count: s.len(),
        mean: s.iter().sum::<f64>() / s.len() as f64,
        min: s[0],
        q1: quantile(&s, 0.25),
        median: quantile(&s, 0.5),
        q3: quantile(&s, 0.75),
        max: s[s.len() - 1],
    })
}

/// Verdict confidences grouped by confusion bucket, in input order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfidenceBuckets {
    pub entries: Vec<(Bucket, String, f64)>,
}

impl ConfidenceBuckets {
    pub fn values(&self, bucket: Bucket) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.0 == bucket)
            .map(|e| e.2)
            .collect()
    }

    pub fn size(&self, bucket: Bucket) -> usize {
        self.entries.iter().filter(|e| e.0 == bucket).count()
    }

    pub fn summary(&self, bucket: Bucket) -> Option<Summary> {
        summarize(&self.values(bucket))
    }
}

pub fn confusion_buckets(
    verdicts: &[IntrospectionVerdict],
    truth: &[u8],
) -> Result<ConfidenceBuckets> {
    if verdicts.len() != truth.len() {
        return Err(Error::Invalid(format!(
            "{} verdicts but {} labels",
            verdicts.len(),
            truth.len()
        )));
    }
    let mut out = ConfidenceBuckets::default();
    for (v, &t) in verdicts.iter().zip(truth) {
        let t = Label::from_u8(t).ok_or_else(|| Error::Invalid("labels must be 0 or 1".into()))?;
        out.entries
            .push((Bucket::of(v.label, t), v.frame_id.clone(), v.confidence));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: NapMode,
    pub auroc: Option<f64>,
    pub recall_pos: Option<f64>,
    pub recall_neg: Option<f64>,
    pub n_samples: usize,
    pub confusion: Confusion,
}

impl MetricsReport {
    pub fn from_verdicts(
        mode: NapMode,
        verdicts: &[IntrospectionVerdict],
        truth: &[u8],
    ) -> Result<Self> {
        let predicted: Vec<u8> = verdicts.iter().map(|v| v.label.as_u8()).collect();
        let confusion = Confusion::from_labels(&predicted, truth)?;
        let scores: Vec<f64> = verdicts.iter().map(|v| v.p_error).collect();
        Ok(Self {
            mode,
            auroc: auroc(&scores, truth).ok(),
            recall_pos: confusion.recall_pos(),
            recall_neg: confusion.recall_neg(),
            n_samples: verdicts.len(),
            confusion,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.4; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.8, 0.4, 0.3], &[1, 0, 1, 0]).unwrap(), 0.75);
        assert!(auroc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn recall_examples() {
        assert_eq!(
            recalls(&[1, 0, 1], &[1, 0, 1]).unwrap(),
            (Some(1.0), Some(1.0))
        );
        assert_eq!(
            recalls(&[1, 1, 1], &[1, 0, 0]).unwrap(),
            (Some(1.0), Some(0.0))
        );
        // tp=3, fn=1, tn=2, fp=2
        let pred = [1, 1, 1, 0, 0, 0, 1, 1];
        let truth = [1, 1, 1, 1, 0, 0, 0, 0];
        assert_eq!(recalls(&pred, &truth).unwrap(), (Some(0.75), Some(0.5)));
        assert_eq!(recalls(&[1], &[0]).unwrap().0, None);
    }

    #[test]
    fn one_verdict_per_bucket() {
        let mk = |label, c| IntrospectionVerdict {
            frame_id: "f".into(),
            label,
            confidence: c,
            p_error: 0.5,
        };
        let v = [
            mk(Label::Error, 0.9),
            mk(Label::Error, 0.6),
            mk(Label::NoError, 0.7),
            mk(Label::NoError, 0.8),
        ];
        let b = confusion_buckets(&v, &[1, 0, 1, 0]).unwrap();
        for bucket in Bucket::ALL {
            assert_eq!(b.size(bucket), 1);
        }
        assert_eq!(b.values(Bucket::Fn), vec![0.7]);
        assert!(confusion_buckets(&v, &[1]).is_err());
    }

    #[test]
    fn summary_quartiles() {
        let s = summarize(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!(
            (s.min, s.q1, s.median, s.q3, s.max, s.mean),
            (1.0, 2.0, 3.0, 4.0, 5.0, 3.0)
        );
    }
}
