//! Forecast-deviation scoring, point-adjusted evaluation and the threshold
//! sweep.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

/// `(1/M)·Σ_t ‖Y(t) − Ŷ(t)‖²` for `[.., M]` predictions and observations;
/// every leading index is a time step. Not averaged over time.
pub fn mse_loss(tape: &mut Tape, predicted: Var, observed: Var) -> Result<Var> {
    let sp = tape.shape(predicted).to_vec();
    if sp != tape.shape(observed) {
        return Err(Error::shape(
            "mse_loss",
            format!("{sp:?} vs {:?}", tape.shape(observed)),
        ));
    }
    let m = *sp.last().unwrap();
    let diff = tape.sub(predicted, observed)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / m as f64))
}

/// Sum over sensors of the squared deviation at one time step.
pub fn anomaly_score(predicted: &[f64], observed: &[f64]) -> f64 {
    debug_assert_eq!(predicted.len(), observed.len());
    predicted.iter().zip(observed).map(|(p, o)| (p - o) * (p - o)).sum()
}

fn check_binary(name: &str, labels: &[u8]) -> Result<()> {
    match labels.iter().position(|&v| v > 1) {
        Some(i) => Err(Error::InvalidArgument(format!(
            "{name} label {} at index {i} is not binary",
            labels[i]
        ))),
        None => Ok(()),
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::InvalidArgument(format!("label lengths differ: {a} vs {b}")));
    }
    Ok(())
}

/// Maximal runs of ground-truth anomalies as half-open ranges.
pub fn anomaly_segments(gt: &[u8]) -> Vec<(usize, usize)> {
    let mut segs = Vec::new();
    let mut start = None;
    for (t, &g) in gt.iter().enumerate() {
        match (g == 1, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                segs.push((s, t));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        segs.push((s, gt.len()));
    }
    segs
}

/// Marks a whole ground-truth segment as detected when any raw prediction
/// inside it fires. Predictions outside segments are kept as they are.
pub fn point_adjust(gt: &[u8], raw: &[u8]) -> Result<Vec<u8>> {
    check_lengths(gt.len(), raw.len())?;
    check_binary("ground-truth", gt)?;
    check_binary("predicted", raw)?;
    let mut out = raw.to_vec();
    for (s, e) in anomaly_segments(gt) {
        if raw[s..e].contains(&1) {
            out[s..e].fill(1);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    BestF1,
    BestRecall,
}

impl Variant {
    /// `**` marks the best-F1 row, `*` the best-recall row.
    pub fn marker(self) -> &'static str {
        match self {
            Variant::BestF1 => "**",
            Variant::BestRecall => "*",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
    pub variant: Option<Variant>,
}

impl MetricsReport {
    /// Precision, recall and F1 from counts; an empty denominator gives 0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
            threshold: f64::NAN,
            variant: None,
        }
    }

    fn at(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = self.variant.map_or("", Variant::marker);
        write!(
            f,
            "{mark:<2} threshold={:<12.6} precision={:.4} recall={:.4} f1={:.4} tp={} fp={} fn={} tn={}",
            self.threshold, self.precision, self.recall, self.f1, self.tp, self.fp, self.fn_, self.tn
        )
    }
}

/// Confusion counts of binary predictions against ground truth, taken as
/// given (no adjustment).
pub fn compute_metrics(gt: &[u8], preds: &[u8]) -> Result<MetricsReport> {
    check_lengths(gt.len(), preds.len())?;
    check_binary("ground-truth", gt)?;
    check_binary("predicted", preds)?;
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&g, &p) in gt.iter().zip(preds) {
        match (g, p) {
            (1, 1) => tp += 1,
            (0, 1) => fp += 1,
            (1, 0) => fn_ += 1,
            _ => tn += 1,
        }
    }
    Ok(MetricsReport::from_counts(tp, fp, fn_, tn))
}

/// Binary labels `score > threshold`.
pub fn apply_threshold(scores: &[f64], threshold: f64) -> Vec<u8> {
    scores.iter().map(|&s| u8::from(s > threshold)).collect()
}

/// Thresholds, point-adjusts and counts.
pub fn evaluate_at(scores: &[f64], gt: &[u8], threshold: f64) -> Result<MetricsReport> {
    let adjusted = point_adjust(gt, &apply_threshold(scores, threshold))?;
    Ok(compute_metrics(gt, &adjusted)?.at(threshold))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdSweep {
    /// One row per candidate in ascending threshold order, starting with the
    /// `−∞` sentinel that flags every point.
    pub rows: Vec<MetricsReport>,
    pub best_f1: usize,
    pub best_recall: usize,
}

impl ThresholdSweep {
    pub fn best_f1(&self) -> MetricsReport {
        MetricsReport {
            variant: Some(Variant::BestF1),
            ..self.rows[self.best_f1].clone()
        }
    }

    pub fn best_recall(&self) -> MetricsReport {
        MetricsReport {
            variant: Some(Variant::BestRecall),
            ..self.rows[self.best_recall].clone()
        }
    }
}

/// Evaluates every distinct score as a threshold (plus `−∞`) with point
/// adjustment. The best-F1 row breaks ties by recall, the best-recall row by
/// F1; remaining ties keep the lowest threshold.
///
/// Runs in `O(N log N)`: under point adjustment a segment is detected exactly
/// when its maximum score exceeds the threshold.
pub fn threshold_sweep(scores: &[f64], gt: &[u8]) -> Result<ThresholdSweep> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("threshold sweep over an empty series".into()));
    }
    check_lengths(scores.len(), gt.len())?;
    check_binary("ground-truth", gt)?;
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("anomaly score {s}")));
    }
    let mut candidates = scores.to_vec();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    candidates.insert(0, f64::NEG_INFINITY);

    let mut normal: Vec<f64> = scores.iter().zip(gt).filter(|(_, &g)| g == 0).map(|(s, _)| *s).collect();
    normal.sort_by(f64::total_cmp);
    let mut segments: Vec<(f64, usize)> = anomaly_segments(gt)
        .into_iter()
        .map(|(s, e)| (scores[s..e].iter().copied().fold(f64::NEG_INFINITY, f64::max), e - s))
        .collect();
    segments.sort_by(|a, b| a.0.total_cmp(&b.0));
    // suffix sums of segment lengths by ascending maximum
    let mut covered = vec![0; segments.len() + 1];
    for k in (0..segments.len()).rev() {
        covered[k] = covered[k + 1] + segments[k].1;
    }
    let positives = covered[0];

    let rows: Vec<MetricsReport> = candidates
        .iter()
        .map(|&v| {
            let fp = normal.len() - normal.partition_point(|&s| s <= v);
            let tp = covered[segments.partition_point(|&(mx, _)| mx <= v)];
            MetricsReport::from_counts(tp, fp, positives - tp, normal.len() - fp).at(v)
        })
        .collect();

    let argmax = |key: &dyn Fn(&MetricsReport) -> (f64, f64)| {
        let mut best = 0;
        for (i, r) in rows.iter().enumerate().skip(1) {
            if key(r) > key(&rows[best]) {
                best = i;
            }
        }
        best
    };
    let best_f1 = argmax(&|r| (r.f1, r.recall));
    let best_recall = argmax(&|r| (r.recall, r.f1));
    Ok(ThresholdSweep {
        rows,
        best_f1,
        best_recall,
    })
}
