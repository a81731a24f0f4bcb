//! Open-set evaluation: closed-set accuracy, H-score at a validation
//! threshold, and the threshold-free OSCR.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numeric::{softmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Largest softmax probability among the known classes.
    pub confidence: f64,
    /// Arg-max over the known classes.
    pub predicted: usize,
    pub label: usize,
    pub unseen: bool,
}

/// Builds records from classifier logits. The softmax runs over every output
/// column (including any extra class beyond `known`), but the prediction and
/// its confidence come from the first `known` columns only.
pub fn records_from_logits(
    logits: &Tensor,
    labels: &[usize],
    known: usize,
) -> Result<Vec<EvalRecord>> {
    ensure!(
        logits.rows() == labels.len(),
        Dimension,
        "{} logit rows for {} labels",
        logits.rows(),
        labels.len()
    );
    ensure!(
        known >= 1 && known <= logits.cols(),
        Dimension,
        "{known} known classes but {} outputs",
        logits.cols()
    );
    let probs = softmax(logits)?;
    Ok(probs
        .iter_rows()
        .zip(labels)
        .map(|(p, &label)| {
            let mut best = 0;
            for k in 1..known {
                if p[k] > p[best] {
                    best = k;
                }
            }
            EvalRecord {
                confidence: p[best],
                predicted: best,
                label,
                unseen: label >= known,
            }
        })
        .collect())
}

fn split_counts(records: &[EvalRecord]) -> (usize, usize) {
    let unseen = records.iter().filter(|r| r.unseen).count();
    (records.len() - unseen, unseen)
}

fn require_both(records: &[EvalRecord]) -> Result<(usize, usize)> {
    let (seen, unseen) = split_counts(records);
    ensure!(seen > 0, Undefined, "no seen-category records");
    ensure!(unseen > 0, Undefined, "no unseen-category records");
    Ok((seen, unseen))
}

pub fn closed_acc(records: &[EvalRecord]) -> Result<f64> {
    let (seen, _) = split_counts(records);
    ensure!(
        seen > 0,
        Undefined,
        "closed-set accuracy needs seen-category records"
    );
    let hits = records
        .iter()
        .filter(|r| !r.unseen && r.predicted == r.label)
        .count();
    Ok(hits as f64 / seen as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HScore {
    pub acc_known: f64,
    pub acc_unknown: f64,
    pub h: f64,
}

/// Records with confidence below `lambda` are rejected as unseen. A seen
/// record counts only when accepted and correctly classified.
pub fn h_score(records: &[EvalRecord], lambda: f64) -> Result<HScore> {
    let (seen, unseen) = require_both(records)?;
    let known_hits = records
        .iter()
        .filter(|r| !r.unseen && r.predicted == r.label && r.confidence >= lambda)
        .count();
    let unknown_hits = records
        .iter()
        .filter(|r| r.unseen && r.confidence < lambda)
        .count();
    let acc_known = known_hits as f64 / seen as f64;
    let acc_unknown = unknown_hits as f64 / unseen as f64;
    let h = if acc_known + acc_unknown == 0.0 {
        0.0
    } else {
        2.0 * acc_known * acc_unknown / (acc_known + acc_unknown)
    };
    Ok(HScore {
        acc_known,
        acc_unknown,
        h,
    })
}

/// Linear-interpolation quantile of sorted data at `p` in [0, 1].
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Candidate thresholds: the 1st through 99th percentiles of the validation
/// confidences, ascending.
pub fn lambda_grid(validation: &[EvalRecord]) -> Vec<f64> {
    let mut conf: Vec<f64> = validation.iter().map(|r| r.confidence).collect();
    conf.sort_by(f64::total_cmp);
    (1..100)
        .map(|k| quantile(&conf, k as f64 / 100.0))
        .collect()
}

/// Fraction of records that are correctly classified and accepted at `lambda`.
pub fn accuracy_at(records: &[EvalRecord], lambda: f64) -> f64 {
    let hits = records
        .iter()
        .filter(|r| r.predicted == r.label && r.confidence >= lambda)
        .count();
    hits as f64 / records.len().max(1) as f64
}

/// Default threshold when there is no validation data.
pub const FALLBACK_LAMBDA: f64 = 0.5;

/// Picks the grid threshold maximizing validation accuracy-at-threshold,
/// ties to the smallest threshold.
pub fn select_lambda(validation: &[EvalRecord]) -> f64 {
    if validation.is_empty() {
        log::warn!("empty validation set; using threshold {FALLBACK_LAMBDA}");
        return FALLBACK_LAMBDA;
    }
    // Correct-record confidences, sorted, so each candidate costs a binary search.
    let mut correct: Vec<f64> = validation
        .iter()
        .filter(|r| r.predicted == r.label)
        .map(|r| r.confidence)
        .collect();
    correct.sort_by(f64::total_cmp);
    let mut best = (f64::NAN, usize::MAX);
    for lambda in lambda_grid(validation) {
        let accepted = correct.len() - correct.partition_point(|&c| c < lambda);
        if best.1 == usize::MAX || accepted > best.1 {
            best = (lambda, accepted);
        }
    }
    best.0
}

/// Area under the correct-classification-rate versus false-positive-rate
/// curve as the threshold sweeps from above every confidence down to minus
/// infinity. A record is accepted when its confidence is strictly above the
/// threshold; each FPR step is weighted by the CCR just before it.
pub fn oscr(records: &[EvalRecord]) -> Result<f64> {
    let (seen, unseen) = require_both(records)?;
    let mut sorted: Vec<&EvalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let (mut ccr_hits, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let c = sorted[i].confidence;
        let prev_ccr = ccr_hits as f64 / seen as f64;
        let prev_fp = fp;
        while i < sorted.len() && sorted[i].confidence == c {
            let r = sorted[i];
            if r.unseen {
                fp += 1;
            } else if r.predicted == r.label {
                ccr_hits += 1;
            }
            i += 1;
        }
        area += (fp - prev_fp) as f64 / unseen as f64 * prev_ccr;
    }
    Ok(area)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub seen: usize,
    pub unseen: usize,
}

/// Equal-width confidence bins over [0, 1]; the last bin is closed.
pub fn confidence_histogram(records: &[EvalRecord], bins: usize) -> Vec<HistogramBin> {
    let bins = bins.max(1);
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            lo: b as f64 / bins as f64,
            hi: (b + 1) as f64 / bins as f64,
            seen: 0,
            unseen: 0,
        })
        .collect();
    for r in records {
        let b = ((r.confidence * bins as f64).floor() as usize).min(bins - 1);
        if r.unseen {
            out[b].unseen += 1;
        } else {
            out[b].seen += 1;
        }
    }
    out
}

/// Test-domain scores for one trained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub acc: f64,
    pub h_score: f64,
    pub oscr: f64,
    pub lambda: f64,
}

pub fn score(test: &[EvalRecord], lambda: f64) -> Result<Scores> {
    Ok(Scores {
        acc: closed_acc(test)?,
        h_score: h_score(test, lambda)?.h,
        oscr: oscr(test)?,
        lambda,
    })
}

/// One line of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub variant: String,
    /// Held-out domain, or `None` for a cross-split average.
    pub split: Option<usize>,
    pub seed: u64,
    pub noise: String,
    pub acc: f64,
    pub h_score: f64,
    pub oscr: f64,
    pub partition_accuracy: Option<f64>,
}

impl MetricsRow {
    /// Arithmetic mean of `rows` (same variant, seed and noise) as an
    /// average row.
    pub fn average(rows: &[MetricsRow]) -> Result<MetricsRow> {
        ensure!(!rows.is_empty(), Undefined, "cannot average zero rows");
        let n = rows.len() as f64;
        let mean = |f: fn(&MetricsRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let part: Option<Vec<f64>> = rows.iter().map(|r| r.partition_accuracy).collect();
        let first = &rows[0];
        if rows
            .iter()
            .any(|r| r.variant != first.variant || r.seed != first.seed || r.noise != first.noise)
        {
            return Err(Error::Config(
                "averaged rows mix variants, seeds or noise settings".into(),
            ));
        }
        Ok(MetricsRow {
            variant: first.variant.clone(),
            split: None,
            seed: first.seed,
            noise: first.noise.clone(),
            acc: mean(|r| r.acc),
            h_score: mean(|r| r.h_score),
            oscr: mean(|r| r.oscr),
            partition_accuracy: part.map(|p| p.iter().sum::<f64>() / n),
        })
    }
}
