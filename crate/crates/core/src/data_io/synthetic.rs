//! Synthetic sensors on a planted directed acyclic graph.
//!
//! Every node owns a base signal (a seasonal sine plus AR(1) noise). Each
//! edge `i → j` with lag `ℓ` and coupling `c` adds `c·x_i(t − ℓ)` to `x_j(t)`,
//! so anomalies injected into a node reach its descendants through the same
//! lags and couplings.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::RawSeries;
use crate::error::{Error, Result};
use crate::graph_policy::AdjacencySample;
use crate::numerics::Generator;

/// Steps simulated and discarded before the training split.
pub const BURN_IN: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyKind {
    /// Adds `magnitude` for the whole segment.
    Spike,
    /// Holds the value from the step before the segment.
    Stuck,
    /// Adds a ramp rising to `magnitude` at the end of the segment.
    Drift,
}

/// One injected anomaly; `start` counts from the first test step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    pub node: usize,
    pub start: usize,
    pub duration: usize,
    #[serde(default)]
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub nodes: usize,
    pub train_length: usize,
    pub test_length: usize,
    /// Directed edges `[src, dst]`.
    pub edges: Vec<[usize; 2]>,
    /// Propagation lag of each edge, at least 1.
    pub lags: Vec<usize>,
    pub couplings: Vec<f64>,
    /// Innovation std of the AR(1) component.
    pub noise: f64,
    pub ar: f64,
    pub seasonal_amplitude: f64,
    /// Period of node `j` is `period + j·period_step`.
    pub period: f64,
    pub period_step: f64,
    pub anomalies: Vec<AnomalySpec>,
}

impl Default for SyntheticSpec {
    /// Ten sensors, three roots, twelve edges.
    fn default() -> Self {
        let planted: [(usize, usize, usize, f64); 12] = [
            (0, 3, 1, 0.8),
            (0, 4, 2, 0.6),
            (1, 4, 1, 0.7),
            (1, 5, 3, 0.8),
            (2, 5, 1, 0.6),
            (2, 6, 2, 0.8),
            (3, 7, 1, 0.7),
            (4, 7, 2, 0.5),
            (5, 8, 1, 0.6),
            (6, 8, 3, 0.5),
            (6, 9, 1, 0.7),
            (7, 9, 2, 0.5),
        ];
        let anomaly = |kind, node, start, duration, magnitude| AnomalySpec {
            kind,
            node,
            start,
            duration,
            magnitude,
        };
        use AnomalyKind::*;
        Self {
            nodes: 10,
            train_length: 5000,
            test_length: 2000,
            edges: planted.iter().map(|e| [e.0, e.1]).collect(),
            lags: planted.iter().map(|e| e.2).collect(),
            couplings: planted.iter().map(|e| e.3).collect(),
            noise: 0.3,
            ar: 0.5,
            seasonal_amplitude: 1.0,
            period: 30.0,
            period_step: 7.0,
            anomalies: vec![
                anomaly(Spike, 0, 150, 8, 2.5),
                anomaly(Drift, 1, 380, 60, 3.0),
                anomaly(Stuck, 2, 600, 50, 0.0),
                anomaly(Spike, 4, 820, 8, 2.5),
                anomaly(Drift, 6, 1040, 60, 3.0),
                anomaly(Stuck, 0, 1260, 50, 0.0),
                anomaly(Spike, 5, 1480, 8, 2.5),
                anomaly(Stuck, 7, 1700, 50, 0.0),
            ],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("synthetic spec: {msg}")));
        if self.nodes < 2 {
            return bad(format!("{} nodes; graph learning needs at least 2", self.nodes));
        }
        if self.train_length == 0 || self.test_length == 0 {
            return bad("train and test lengths must be positive".into());
        }
        if self.lags.len() != self.edges.len() || self.couplings.len() != self.edges.len() {
            return bad(format!(
                "{} edges, {} lags, {} couplings",
                self.edges.len(),
                self.lags.len(),
                self.couplings.len()
            ));
        }
        for (k, &[s, d]) in self.edges.iter().enumerate() {
            if s >= self.nodes || d >= self.nodes || s == d {
                return bad(format!("edge {s}->{d} is out of range or a self-loop"));
            }
            if self.edges[..k].contains(&[s, d]) {
                return bad(format!("duplicate edge {s}->{d}"));
            }
            if self.lags[k] == 0 {
                return bad(format!("edge {s}->{d} has lag 0"));
            }
        }
        let finite = [self.noise, self.ar, self.seasonal_amplitude, self.period, self.period_step];
        if finite.iter().chain(&self.couplings).any(|v| !v.is_finite()) || self.noise < 0.0 || self.period <= 0.0 {
            return bad("noise, periods and couplings must be finite; noise ≥ 0; period > 0".into());
        }
        if self.topological_order().is_none() {
            return bad("planted graph has a cycle".into());
        }
        for a in &self.anomalies {
            if a.node >= self.nodes || a.duration == 0 || a.start + a.duration > self.test_length {
                return bad(format!("anomaly {a:?} outside the test split"));
            }
        }
        Ok(())
    }

    fn topological_order(&self) -> Option<Vec<usize>> {
        let mut indeg = vec![0; self.nodes];
        for &[_, d] in &self.edges {
            indeg[d] += 1;
        }
        let mut ready: Vec<usize> = (0..self.nodes).filter(|&v| indeg[v] == 0).collect();
        let mut order = Vec::with_capacity(self.nodes);
        while let Some(v) = ready.pop() {
            order.push(v);
            for &[s, d] in &self.edges {
                if s == v {
                    indeg[d] -= 1;
                    if indeg[d] == 0 {
                        ready.push(d);
                    }
                }
            }
        }
        (order.len() == self.nodes).then_some(order)
    }

    /// Largest total lag along any path leaving each node (0 for sinks).
    pub fn max_descendant_lag(&self) -> Vec<usize> {
        let order = self.topological_order().expect("validated graph is acyclic");
        let mut reach = vec![0; self.nodes];
        for &v in order.iter().rev() {
            for (k, &[s, d]) in self.edges.iter().enumerate() {
                if s == v {
                    reach[v] = reach[v].max(self.lags[k] + reach[d]);
                }
            }
        }
        reach
    }

    pub fn planted(&self) -> AdjacencySample {
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|&[s, d]| (s, d)).collect();
        AdjacencySample::from_edges(self.nodes, &edges).expect("validated edges")
    }

    pub fn sensor_names(&self) -> Vec<String> {
        (0..self.nodes).map(|j| format!("s{j}")).collect()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(format!("synthetic spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub train: RawSeries,
    /// Labeled test split, continuing the training split in time.
    pub test: RawSeries,
    pub planted: AdjacencySample,
    /// Base signals over the train and test span, `[node][t]`.
    pub base: Vec<Vec<f64>>,
}

pub fn generate_synthetic(spec: &SyntheticSpec, rng: &mut Generator) -> Result<SyntheticData> {
    spec.validate()?;
    let m = spec.nodes;
    let total = BURN_IN + spec.train_length + spec.test_length;

    let phases: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..TAU)).collect();
    let mut base = vec![vec![0.0; total]; m];
    for (j, b) in base.iter_mut().enumerate() {
        let period = spec.period + j as f64 * spec.period_step;
        let mut ar = 0.0;
        for (t, v) in b.iter_mut().enumerate() {
            let eps: f64 = StandardNormal.sample(rng);
            ar = spec.ar * ar + spec.noise * eps;
            *v = spec.seasonal_amplitude * (TAU * t as f64 / period + phases[j]).sin() + ar;
        }
    }

    let offset = BURN_IN + spec.train_length;
    let mut x = vec![vec![0.0; total]; m];
    for t in 0..total {
        for j in 0..m {
            let mut v = base[j][t];
            for (k, &[s, d]) in spec.edges.iter().enumerate() {
                if d == j && t >= spec.lags[k] {
                    v += spec.couplings[k] * x[s][t - spec.lags[k]];
                }
            }
            for a in spec.anomalies.iter().filter(|a| a.node == j) {
                let start = offset + a.start;
                if (start..start + a.duration).contains(&t) {
                    let step = (t - start + 1) as f64;
                    match a.kind {
                        AnomalyKind::Spike => v += a.magnitude,
                        AnomalyKind::Drift => v += a.magnitude * step / a.duration as f64,
                        AnomalyKind::Stuck => v = x[j][start - 1],
                    }
                }
            }
            x[j][t] = v;
        }
    }

    let reach = spec.max_descendant_lag();
    let mut labels = vec![0u8; spec.test_length];
    for a in &spec.anomalies {
        let end = (a.start + a.duration + reach[a.node]).min(spec.test_length);
        labels[a.start..end].fill(1);
    }

    let names = spec.sensor_names();
    let split = |range: std::ops::Range<usize>, labels: Option<Vec<u8>>| {
        RawSeries::new(
            names.clone(),
            range.clone().map(|t| (t - BURN_IN).to_string()).collect(),
            x.iter().map(|v| v[range.clone()].to_vec()).collect(),
            labels,
        )
    };
    Ok(SyntheticData {
        train: split(BURN_IN..offset, None)?,
        test: split(offset..total, Some(labels))?,
        planted: spec.planted(),
        base: base.iter().map(|b| b[BURN_IN..].to_vec()).collect(),
    })
}
