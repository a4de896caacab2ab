//! Max-Rule authentication and the evaluation metrics.
//!
//! Percentages are in `[0, 100]`. Device labels are dense indices
//! `0..n_classes`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baseline::{argmax, classify, ClassifierModel, ClassifierOutput};
use crate::error::{Error, Result};
use crate::iqdata::SliceSet;
use crate::reveal::{translate, TranslatorPair};

/// Counts of (true device, predicted device) pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[true][predicted]`.
    pub counts: Vec<Vec<u64>>,
    pub n_slices: u64,
}

impl ConfusionMatrix {
    pub fn from_predictions(
        n_classes: usize,
        predicted: &[usize],
        labels: &[usize],
    ) -> Result<Self> {
        check_lengths(predicted.len(), labels.len())?;
        let mut counts = vec![vec![0u64; n_classes]; n_classes];
        for (&p, &t) in predicted.iter().zip(labels) {
            if p >= n_classes || t >= n_classes {
                return Err(Error::Precondition(format!(
                    "label {} outside 0..{n_classes}",
                    p.max(t)
                )));
            }
            counts[t][p] += 1;
        }
        Ok(Self {
            counts,
            n_slices: predicted.len() as u64,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|i| self.counts[i][i]).sum()
    }

    /// Relabels device `d` as `perm[d]` on both axes.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n_classes();
        let mut counts = vec![vec![0u64; n]; n];
        for (t, row) in self.counts.iter().enumerate() {
            for (p, &c) in row.iter().enumerate() {
                counts[perm[t]][perm[p]] = c;
            }
        }
        Self {
            counts,
            n_slices: self.n_slices,
        }
    }

    /// Header row of predicted labels, then one row per true label.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["true\\predicted".to_string()];
        header.extend((0..self.n_classes()).map(|i| i.to_string()));
        w.write_record(&header)?;
        for (t, row) in self.counts.iter().enumerate() {
            let mut rec = vec![t.to_string()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_lengths(left: usize, right: usize) -> Result<()> {
    if left != right {
        return Err(Error::LengthMismatch { left, right });
    }
    Ok(())
}

/// Percentage of correctly predicted slices. Called TTSD or TTOD depending
/// on which split supplied the slices.
pub fn pstest(output: &ClassifierOutput, labels: &[usize]) -> Result<f64> {
    pstest_from_predictions(&output.predicted, labels)
}

pub fn pstest_from_predictions(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(predicted.len(), labels.len())?;
    if labels.is_empty() {
        return Err(Error::Precondition("no slices to score".into()));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, t)| p == t).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

pub fn pstest_from_confusion(cm: &ConfusionMatrix) -> f64 {
    if cm.n_slices == 0 {
        return 0.0;
    }
    100.0 * cm.trace() as f64 / cm.n_slices as f64
}

/// Mean softmax row over each device's slices: `result[d][c]`.
pub fn per_device_mean_softmax(
    n_classes: usize,
    probabilities: &[f32],
    labels: &[usize],
) -> Result<Vec<Vec<f64>>> {
    check_lengths(probabilities.len(), labels.len() * n_classes)?;
    let mut sums = vec![vec![0.0f64; n_classes]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (row, &t) in probabilities.chunks(n_classes).zip(labels) {
        if t >= n_classes {
            return Err(Error::Precondition(format!(
                "label {t} outside 0..{n_classes}"
            )));
        }
        counts[t] += 1;
        for (s, &p) in sums[t].iter_mut().zip(row) {
            *s += p as f64;
        }
    }
    for (d, (row, &c)) in sums.iter_mut().zip(&counts).enumerate() {
        if c == 0 {
            return Err(Error::EmptyDeviceRow(d));
        }
        row.iter_mut().for_each(|s| *s /= c as f64);
    }
    Ok(sums)
}

fn strict_row_max(row: &[f64], i: usize) -> bool {
    row.iter().enumerate().all(|(c, &v)| c == i || row[i] > v)
}

/// Radio recognition percentage from per-device mean softmax rows: device
/// `i` is recognized when `rows[i][i]` strictly exceeds every other class.
pub fn rrp(rows: &[Vec<f64>]) -> Result<f64> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::Precondition(format!(
            "need at least 2 devices, got {n}"
        )));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != n) {
        return Err(Error::Shape(format!(
            "softmax row of length {} for {n} devices",
            r.len()
        )));
    }
    let hits = (0..n).filter(|&i| strict_row_max(&rows[i], i)).count();
    Ok(100.0 * hits as f64 / n as f64)
}

/// Same rule applied to confusion-matrix rows.
pub fn rrp_from_confusion(cm: &ConfusionMatrix) -> Result<f64> {
    let rows: Vec<Vec<f64>> = cm
        .counts
        .iter()
        .enumerate()
        .map(|(d, r)| {
            if r.iter().all(|&c| c == 0) {
                Err(Error::EmptyDeviceRow(d))
            } else {
                Ok(r.iter().map(|&c| c as f64).collect())
            }
        })
        .collect::<Result<_>>()?;
    rrp(&rows)
}

/// `new / old`, cut to one decimal. Truncation (not round-half-up) is what
/// reproduces the reference multipliers, e.g. 34 / 9 = 3.78 → 3.7.
pub fn improvement(old_pct: f64, new_pct: f64) -> Result<f64> {
    if old_pct == 0.0 {
        return Err(Error::ZeroBaseline);
    }
    if old_pct.is_nan() || old_pct <= 0.0 || !new_pct.is_finite() || new_pct < 0.0 {
        return Err(Error::Precondition(format!(
            "improvement needs positive finite percentages, got {old_pct} → {new_pct}"
        )));
    }
    // the epsilon absorbs representation error in exact ratios such as 0.3
    Ok(((new_pct / old_pct) * 10.0 + 1e-9).floor() / 10.0)
}

pub fn format_improvement(x: f64) -> String {
    format!("{x:.1}x")
}

/// Which input won a Max-Rule decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecisionPath {
    Raw,
    Translated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxRuleOutput {
    pub n_classes: usize,
    /// Row-major per-hypothesis scores, `m × n_classes`.
    pub scores: Vec<f32>,
    pub predicted: Vec<usize>,
    pub paths: Vec<DecisionPath>,
}

impl MaxRuleOutput {
    pub fn len(&self) -> usize {
        self.predicted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicted.is_empty()
    }

    pub fn row(&self, k: usize) -> &[f32] {
        &self.scores[k * self.n_classes..(k + 1) * self.n_classes]
    }

    /// Fraction of decisions taken on translated slices, in percent.
    pub fn translated_share(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let n = self
            .paths
            .iter()
            .filter(|&&p| p == DecisionPath::Translated)
            .count();
        100.0 * n as f64 / self.len() as f64
    }
}

/// Decision for one slice: `score_i = max(raw[i], translated[i])`, label
/// `argmax_i score_i` (lowest index on ties). The path is `Translated` only
/// when the translated probability strictly beats the raw one for the
/// winning hypothesis.
pub fn max_rule_row(raw: &[f32], translated: &[f32]) -> (Vec<f32>, usize, DecisionPath) {
    let scores: Vec<f32> = raw
        .iter()
        .zip(translated)
        .map(|(&r, &t)| r.max(t))
        .collect();
    let label = argmax(&scores);
    let path = if translated[label] > raw[label] {
        DecisionPath::Translated
    } else {
        DecisionPath::Raw
    };
    (scores, label, path)
}

/// Max Rule over every device hypothesis. `translated[i]` is the classifier
/// output on the same slices after device `i`'s translator; only its class
/// `i` column is used.
pub fn max_rule(raw: &ClassifierOutput, translated: &[ClassifierOutput]) -> Result<MaxRuleOutput> {
    let n = raw.n_classes;
    if translated.len() != n {
        return Err(Error::HypothesisMismatch(format!(
            "{} translated outputs for {n} classes",
            translated.len()
        )));
    }
    for (i, t) in translated.iter().enumerate() {
        if t.n_classes != n || t.len() != raw.len() {
            return Err(Error::HypothesisMismatch(format!(
                "hypothesis {i}: {} slices × {} classes, raw has {} × {n}",
                t.len(),
                t.n_classes,
                raw.len()
            )));
        }
    }
    let mut out = MaxRuleOutput {
        n_classes: n,
        scores: Vec::with_capacity(raw.probabilities.len()),
        predicted: Vec::with_capacity(raw.len()),
        paths: Vec::with_capacity(raw.len()),
    };
    let mut hyp = vec![0.0f32; n];
    for k in 0..raw.len() {
        for (i, h) in hyp.iter_mut().enumerate() {
            *h = translated[i].row(k)[i];
        }
        let (scores, label, path) = max_rule_row(raw.row(k), &hyp);
        out.scores.extend(scores);
        out.predicted.push(label);
        out.paths.push(path);
    }
    Ok(out)
}

/// Metric bundle for one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub n_slices: u64,
    pub pstest_pct: f64,
    pub ttsd_pct: Option<f64>,
    pub ttod_pct: Option<f64>,
    pub rrp_pct: f64,
    pub improvement_x: Option<f64>,
    /// Mean true-class probability per device.
    pub per_device_softmax: Vec<f64>,
    pub confusion: ConfusionMatrix,
}

/// Which split produced the slices being scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalDomain {
    Same,
    Other,
}

impl MetricsReport {
    /// Scores rows of (possibly unnormalized) per-class scores against labels.
    pub fn from_scores(
        label: impl Into<String>,
        n_classes: usize,
        scores: &[f32],
        predicted: &[usize],
        labels: &[usize],
        domain: EvalDomain,
    ) -> Result<Self> {
        let confusion = ConfusionMatrix::from_predictions(n_classes, predicted, labels)?;
        let pct = pstest_from_predictions(predicted, labels)?;
        let rows = per_device_mean_softmax(n_classes, scores, labels)?;
        Ok(Self {
            label: label.into(),
            n_slices: labels.len() as u64,
            pstest_pct: pct,
            ttsd_pct: (domain == EvalDomain::Same).then_some(pct),
            ttod_pct: (domain == EvalDomain::Other).then_some(pct),
            rrp_pct: rrp(&rows)?,
            improvement_x: None,
            per_device_softmax: (0..n_classes).map(|i| rows[i][i]).collect(),
            confusion,
        })
    }

    pub fn from_output(
        label: impl Into<String>,
        output: &ClassifierOutput,
        labels: &[usize],
        domain: EvalDomain,
    ) -> Result<Self> {
        Self::from_scores(
            label,
            output.n_classes,
            &output.probabilities,
            &output.predicted,
            labels,
            domain,
        )
    }

    pub fn from_max_rule(
        label: impl Into<String>,
        output: &MaxRuleOutput,
        labels: &[usize],
    ) -> Result<Self> {
        Self::from_scores(
            label,
            output.n_classes,
            &output.scores,
            &output.predicted,
            labels,
            EvalDomain::Other,
        )
    }

    /// Records the multiplier of this report's PSTest over `baseline_pct`.
    pub fn with_improvement_over(mut self, baseline_pct: f64) -> Result<Self> {
        self.improvement_x = Some(improvement(baseline_pct, self.pstest_pct)?);
        Ok(self)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Outcome of feeding one device's slices through another device's translator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialReport {
    pub source_device: usize,
    pub target_device: usize,
    pub n_slices: u64,
    /// Share of translated slices classified as the target device.
    pub impersonation_pct: f64,
    /// Share still classified as the true source device.
    pub accuracy_pct: f64,
    pub confusion: ConfusionMatrix,
}

/// Translates device `j`'s slices with `target`'s translator (device `i`)
/// and reports how often the classifier is fooled into answering `i`.
pub fn adversarial_eval(
    target: &TranslatorPair,
    classifier: &ClassifierModel,
    slices: &SliceSet,
) -> Result<AdversarialReport> {
    let devices = slices.label_set();
    let j = match devices.len() {
        1 => *devices.iter().next().expect("one device"),
        0 => return Err(Error::Precondition("no slices to impersonate with".into())),
        _ => {
            return Err(Error::LabelMismatch(format!(
                "adversarial slices mix devices {devices:?}"
            )))
        }
    };
    let i = target.device_id;
    if i == j {
        return Err(Error::SameDevice(i));
    }
    let out = classify(classifier, &translate(target, slices, "T")?)?;
    adversarial_from_output(i, j, &out)
}

/// Scoring half of [`adversarial_eval`] for an already classified batch of
/// device `source` slices translated towards `target`.
pub fn adversarial_from_output(
    target: usize,
    source: usize,
    out: &ClassifierOutput,
) -> Result<AdversarialReport> {
    if target == source {
        return Err(Error::SameDevice(target));
    }
    if out.is_empty() {
        return Err(Error::Precondition("no slices to impersonate with".into()));
    }
    let labels = vec![source; out.len()];
    let confusion = ConfusionMatrix::from_predictions(out.n_classes, &out.predicted, &labels)?;
    let n = out.len() as f64;
    Ok(AdversarialReport {
        source_device: source,
        target_device: target,
        n_slices: out.len() as u64,
        impersonation_pct: 100.0 * confusion.counts[source][target] as f64 / n,
        accuracy_pct: 100.0 * confusion.counts[source][source] as f64 / n,
        confusion,
    })
}
