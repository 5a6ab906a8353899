//! Series ingestion and preprocessing: min-max normalization fitted on the
//! training split, median downsampling, sliding windows, CSV files and the
//! planted-graph synthetic generator.

mod files;
pub mod synthetic;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::detector::MetricsReport;
use crate::error::{Error, Result};
use crate::graph_policy::AdjacencySample;
use crate::numerics::Tensor;

pub use files::{parse_series, read_scores, read_series, write_scores, write_series, ScoreRow};
pub use synthetic::{generate_synthetic, AnomalyKind, AnomalySpec, SyntheticData, SyntheticSpec};

/// Multivariate series stored sensor-major: `values[i][t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    pub names: Vec<String>,
    pub timestamps: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub labels: Option<Vec<u8>>,
}

impl RawSeries {
    pub fn new(names: Vec<String>, timestamps: Vec<String>, values: Vec<Vec<f64>>, labels: Option<Vec<u8>>) -> Result<Self> {
        let s = Self {
            names,
            timestamps,
            values,
            labels,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.names.len() != self.values.len() {
            return Err(Error::Data(format!(
                "{} sensor names for {} sensors",
                self.names.len(),
                self.values.len()
            )));
        }
        let len = self.timestamps.len();
        if let Some(i) = self.values.iter().position(|v| v.len() != len) {
            return Err(Error::Data(format!(
                "sensor {} has {} values, expected {len}",
                self.names[i],
                self.values[i].len()
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != len {
                return Err(Error::Data(format!("{} labels for {len} rows", labels.len())));
            }
            if let Some(t) = labels.iter().position(|&l| l > 1) {
                return Err(Error::Data(format!("label {} at row {t} is not binary", labels[t])));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn num_sensors(&self) -> usize {
        self.values.len()
    }

    /// All sensors at step `t`.
    pub fn row(&self, t: usize) -> Vec<f64> {
        self.values.iter().map(|v| v[t]).collect()
    }

    pub fn slice(&self, range: Range<usize>) -> Self {
        Self {
            names: self.names.clone(),
            timestamps: self.timestamps[range.clone()].to_vec(),
            values: self.values.iter().map(|v| v[range.clone()].to_vec()).collect(),
            labels: self.labels.as_ref().map(|l| l[range].to_vec()),
        }
    }
}

pub const NORM_EPS: f64 = 1e-12;

/// Per-sensor extrema of the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizerStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormalizerStats {
    pub fn fit(train: &RawSeries) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("cannot fit normalization on an empty series".into()));
        }
        let fold = |v: &Vec<f64>, f: fn(f64, f64) -> f64, init: f64| v.iter().copied().fold(init, f);
        Ok(Self {
            min: train.values.iter().map(|v| fold(v, f64::min, f64::INFINITY)).collect(),
            max: train.values.iter().map(|v| fold(v, f64::max, f64::NEG_INFINITY)).collect(),
        })
    }

    fn check(&self, x: &RawSeries) -> Result<()> {
        if self.min.len() != x.num_sensors() {
            return Err(Error::Data(format!(
                "normalization fitted on {} sensors, series has {}",
                self.min.len(),
                x.num_sensors()
            )));
        }
        Ok(())
    }

    fn span(&self, i: usize) -> f64 {
        (self.max[i] - self.min[i]).max(NORM_EPS)
    }

    /// `(x − min) / max(max − min, ε)`; values outside the training range
    /// are not clipped.
    pub fn normalize(&self, x: &RawSeries) -> Result<RawSeries> {
        self.check(x)?;
        let mut out = x.clone();
        for (i, v) in out.values.iter_mut().enumerate() {
            let (lo, span) = (self.min[i], self.span(i));
            v.iter_mut().for_each(|e| *e = (*e - lo) / span);
        }
        Ok(out)
    }

    pub fn denormalize(&self, x: &RawSeries) -> Result<RawSeries> {
        self.check(x)?;
        let mut out = x.clone();
        for (i, v) in out.values.iter_mut().enumerate() {
            let (lo, span) = (self.min[i], self.span(i));
            v.iter_mut().for_each(|e| *e = *e * span + lo);
        }
        Ok(out)
    }
}

fn median(block: &mut [f64]) -> f64 {
    block.sort_by(f64::total_cmp);
    let n = block.len();
    if n % 2 == 1 {
        block[n / 2]
    } else {
        (block[n / 2 - 1] + block[n / 2]) / 2.0
    }
}

/// Per-sensor median over consecutive blocks of `factor` steps (a shorter
/// final block is kept). A block is labeled anomalous if any step in it is;
/// its timestamp is that of its first step.
pub fn median_downsample(x: &RawSeries, factor: usize) -> Result<RawSeries> {
    if factor == 0 {
        return Err(Error::InvalidArgument("downsampling factor must be at least 1".into()));
    }
    let blocks: Vec<Range<usize>> = (0..x.len())
        .step_by(factor)
        .map(|s| s..(s + factor).min(x.len()))
        .collect();
    Ok(RawSeries {
        names: x.names.clone(),
        timestamps: blocks.iter().map(|b| x.timestamps[b.start].clone()).collect(),
        values: x
            .values
            .iter()
            .map(|v| blocks.iter().map(|b| median(&mut v[b.clone()].to_vec())).collect())
            .collect(),
        labels: x
            .labels
            .as_ref()
            .map(|l| blocks.iter().map(|b| l[b.clone()].iter().copied().max().unwrap_or(0)).collect()),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub window: usize,
    pub label_len: usize,
    pub stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            window: 60,
            label_len: 30,
            stride: 1,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.stride == 0 || self.label_len == 0 || self.label_len >= self.window {
            return Err(Error::Config(format!(
                "window {}, label length {}, stride {}: need 0 < label < window and stride ≥ 1",
                self.window, self.label_len, self.stride
            )));
        }
        Ok(())
    }
}

/// One training triple. `target_index` is the step being forecast; the
/// encoder window covers the `n` steps before it.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub target_index: usize,
    /// `[M × n]`, sensor-major.
    pub encoder: Vec<f64>,
    /// `[(label_len + 1) × M]`: the last `label_len` window steps, then a
    /// zero row for the target slot.
    pub decoder: Vec<f64>,
    pub target: Vec<f64>,
}

/// Windows whose targets run from step `n` to the end of the series.
pub fn make_windows(x: &RawSeries, cfg: &WindowConfig) -> Result<Vec<Window>> {
    cfg.validate()?;
    let n = cfg.window;
    if x.len() <= n {
        return Err(Error::Data(format!(
            "series of {} steps is too short for window {n}",
            x.len()
        )));
    }
    Ok((n..x.len()).step_by(cfg.stride).map(|t| window_at(x, cfg, t)).collect())
}

/// The window targeting step `t` (requires `t ≥ n`).
pub fn window_at(x: &RawSeries, cfg: &WindowConfig, t: usize) -> Window {
    let (n, l, m) = (cfg.window, cfg.label_len, x.num_sensors());
    let mut encoder = Vec::with_capacity(m * n);
    for v in &x.values {
        encoder.extend_from_slice(&v[t - n..t]);
    }
    let mut decoder = Vec::with_capacity((l + 1) * m);
    for s in t - l..t {
        decoder.extend(x.values.iter().map(|v| v[s]));
    }
    decoder.resize((l + 1) * m, 0.0);
    Window {
        target_index: t,
        encoder,
        decoder,
        target: x.row(t),
    }
}

/// A batch of windows as tensors `[B, M, n]`, `[B, label_len + 1, M]` and
/// `[B, M]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub encoder: Tensor,
    pub decoder: Tensor,
    pub target: Tensor,
}

pub fn stack_windows(windows: &[&Window], num_sensors: usize, cfg: &WindowConfig) -> Result<Batch> {
    if windows.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let b = windows.len();
    let cat = |f: fn(&Window) -> &Vec<f64>| windows.iter().flat_map(|w| f(w).iter().copied()).collect::<Vec<_>>();
    Ok(Batch {
        encoder: Tensor::new(&[b, num_sensors, cfg.window], cat(|w| &w.encoder))?,
        decoder: Tensor::new(&[b, cfg.label_len + 1, num_sensors], cat(|w| &w.decoder))?,
        target: Tensor::new(&[b, num_sensors], cat(|w| &w.target))?,
    })
}

/// Directed-edge classification of `learned` against `planted`; self-pairs
/// are excluded.
pub fn edge_recovery_metrics(learned: &AdjacencySample, planted: &AdjacencySample) -> Result<MetricsReport> {
    let m = planted.num_nodes();
    if learned.num_nodes() != m {
        return Err(Error::InvalidArgument(format!(
            "learned graph has {} nodes, planted graph {m}",
            learned.num_nodes()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for i in 0..m {
        for j in (0..m).filter(|&j| j != i) {
            match (learned.weights.at(&[i, j]) != 0.0, planted.weights.at(&[i, j]) != 0.0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
    }
    Ok(MetricsReport::from_counts(tp, fp, fn_, tn))
}
