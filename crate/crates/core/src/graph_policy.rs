//! Learnable directed connection policy over `M` sensors.
//!
//! Each ordered pair `(i, j)`, `i ≠ j`, carries two logits whose
//! log-softmax gives `(log π₀, log π₁)`; `π₁` is the probability that
//! information flows from `i` to `j`. Graphs are drawn with the Gumbel-Max
//! trick, relaxed by Gumbel-Softmax for training.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

/// Uniform draws are clamped into `[ε, 1 − ε]` before the double log.
pub const UNIFORM_EPS: f64 = 1e-12;

/// Initial `π₁` of every off-diagonal pair.
pub const P_INIT: f64 = 0.9;

/// Standard Gumbel via inverse transform of a uniform draw.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS);
    -(-u.ln()).ln()
}

pub fn sample_gumbel<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| gumbel_from_uniform(rng.gen::<f64>())).collect();
    Tensor::new(shape, data).expect("gumbel samples are finite")
}

/// Temperature for epoch `epoch` (0-based): `max(0.1, 0.9^epoch)`.
pub fn temperature(epoch: usize) -> f64 {
    0.9f64.powi(epoch as i32).max(0.1)
}

fn off_diagonal_mask(m: usize) -> Tensor {
    let mut t = Tensor::full(&[m, m], 1.0);
    for i in 0..m {
        t.set(&[i, i], 0.0);
    }
    t
}

/// The `M × M × 2` logit table, held in a parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConnectionLogits {
    num_nodes: usize,
    param: ParamId,
}

/// One relaxed draw: the noise used and the differentiable simplex sample.
#[derive(Debug)]
pub struct PolicySample {
    pub noise: Tensor,
    pub soft: Var,
    pub tau: f64,
}

/// A concrete directed graph; entry `(i, j)` is the strength of edge `i → j`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencySample {
    pub weights: Tensor,
    pub hard: bool,
}

impl AdjacencySample {
    pub fn num_nodes(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn complete(m: usize) -> Self {
        Self {
            weights: off_diagonal_mask(m),
            hard: true,
        }
    }

    pub fn empty(m: usize) -> Self {
        Self {
            weights: Tensor::zeros(&[m, m]),
            hard: true,
        }
    }

    pub fn from_edges(m: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut w = Tensor::zeros(&[m, m]);
        for &(s, d) in edges {
            if s >= m || d >= m || s == d {
                return Err(Error::InvalidArgument(format!("edge {s}->{d} for {m} nodes")));
            }
            w.set(&[s, d], 1.0);
        }
        Ok(Self {
            weights: w,
            hard: true,
        })
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let m = self.num_nodes();
        let mut out = Vec::new();
        for s in 0..m {
            for d in 0..m {
                if self.weights.at(&[s, d]) != 0.0 {
                    out.push((s, d));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.weights.data().iter().filter(|&&w| w != 0.0).count()
    }
}

impl ConnectionLogits {
    /// Every off-diagonal pair starts at `π₁ = p_init`.
    pub fn init_complete_graph(store: &mut ParamStore, m: usize, p_init: f64) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidArgument(format!(
                "graph learning needs at least 2 nodes, got {m}"
            )));
        }
        if !(0.0 < p_init && p_init < 1.0) {
            return Err(Error::InvalidArgument(format!("p_init {p_init} not in (0,1)")));
        }
        let pair = [(1.0 - p_init).ln(), p_init.ln()];
        let data = (0..m * m).flat_map(|_| pair).collect();
        let t = Tensor::new(&[m, m, 2], data)?;
        Ok(Self {
            num_nodes: m,
            param: store.add("policy.logits", t),
        })
    }

    /// Rebinds to an existing `policy.logits` entry.
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let param = store
            .id_of("policy.logits")
            .ok_or_else(|| Error::Checkpoint("policy.logits missing".into()))?;
        let shape = store.get(param).shape();
        if shape.len() != 3 || shape[0] != shape[1] || shape[2] != 2 {
            return Err(Error::shape("policy.logits", format!("{shape:?}")));
        }
        Ok(Self {
            num_nodes: shape[0],
            param,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn param(&self) -> ParamId {
        self.param
    }

    /// Normalized `(log π₀, log π₁)` per pair, on the tape.
    pub fn log_probs(&self, tape: &mut Tape) -> Result<Var> {
        let raw = tape.param(self.param);
        tape.log_softmax(raw, 2)
    }

    /// `π₁` for every ordered pair, row-major `M × M` (diagonal included).
    pub fn pi1(&self, store: &ParamStore) -> Vec<f64> {
        store
            .get(self.param)
            .data()
            .chunks(2)
            .map(|c| {
                let m = c[0].max(c[1]);
                let e0 = (c[0] - m).exp();
                let e1 = (c[1] - m).exp();
                e1 / (e0 + e1)
            })
            .collect()
    }

    /// Deterministic graph: edge `i → j` iff `π₁ > threshold`.
    pub fn extract_adjacency(&self, store: &ParamStore, threshold: f64) -> AdjacencySample {
        let m = self.num_nodes;
        let pi1 = self.pi1(store);
        let mut w = Tensor::zeros(&[m, m]);
        for i in 0..m {
            for j in 0..m {
                if i != j && pi1[i * m + j] > threshold {
                    w.set(&[i, j], 1.0);
                }
            }
        }
        AdjacencySample {
            weights: w,
            hard: true,
        }
    }

    pub fn sample<R: Rng>(&self, tape: &mut Tape, tau: f64, rng: &mut R) -> Result<PolicySample> {
        let lp = self.log_probs(tape)?;
        gumbel_softmax_sample(tape, lp, tau, rng)
    }

    /// `L_s = Σ_{i≠j} log π₁^{i,j}`.
    pub fn sparsity_loss(&self, tape: &mut Tape) -> Result<Var> {
        let lp = self.log_probs(tape)?;
        sparsity_loss_from_log_probs(tape, lp)
    }

    /// Edge list `(src, dst, π₁)` of all pairs with `π₁ > threshold`,
    /// sorted by `(src, dst)`.
    pub fn edge_list(&self, store: &ParamStore, threshold: f64) -> Vec<(usize, usize, f64)> {
        let m = self.num_nodes;
        let pi1 = self.pi1(store);
        let mut out = Vec::new();
        for i in 0..m {
            for j in 0..m {
                let p = pi1[i * m + j];
                if i != j && p > threshold {
                    out.push((i, j, p));
                }
            }
        }
        out
    }
}

/// Relaxed sample `z_c = softmax((log π_c + g_c) / τ)` over the last axis of
/// `log_probs[M, M, 2]`. The noise enters as a constant.
pub fn gumbel_softmax_sample<R: Rng>(
    tape: &mut Tape,
    log_probs: Var,
    tau: f64,
    rng: &mut R,
) -> Result<PolicySample> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let shape = tape.shape(log_probs).to_vec();
    let noise = sample_gumbel(rng, &shape);
    let soft = relaxed_with_noise(tape, log_probs, &noise, tau)?;
    Ok(PolicySample { noise, soft, tau })
}

/// The relaxation for given noise; split out so tests can pin `g`.
pub fn relaxed_with_noise(tape: &mut Tape, log_probs: Var, noise: &Tensor, tau: f64) -> Result<Var> {
    let g = tape.constant(noise.clone());
    let perturbed = tape.add(log_probs, g)?;
    let scaled = tape.scale(perturbed, 1.0 / tau);
    let last = tape.shape(scaled).len() - 1;
    tape.softmax(scaled, last)
}

/// Straight-through adjacency: the forward value is the one-hot argmax
/// (`1` where `z₁ > z₀`), the gradient is that of the soft `z₁`. Self-loops
/// are masked out.
pub fn hard_sample(tape: &mut Tape, sample: &PolicySample) -> Result<Var> {
    let masked = soft_adjacency(tape, sample)?;
    let m = tape.shape(masked)[0];
    let z = tape.data(sample.soft);
    let mut hard = Tensor::zeros(&[m, m]);
    for i in 0..m {
        for j in 0..m {
            let k = (i * m + j) * 2;
            if i != j && z[k + 1] > z[k] {
                hard.set(&[i, j], 1.0);
            }
        }
    }
    tape.straight_through(masked, hard)
}

/// `z₁` per pair with a zero diagonal, fully differentiable.
pub fn soft_adjacency(tape: &mut Tape, sample: &PolicySample) -> Result<Var> {
    let shape = tape.shape(sample.soft).to_vec();
    if shape.len() != 3 || shape[0] != shape[1] || shape[2] != 2 {
        return Err(Error::shape("soft_adjacency", format!("{shape:?}")));
    }
    let m = shape[0];
    let z1 = tape.narrow(sample.soft, 2, 1, 1)?;
    let z1 = tape.reshape(z1, &[m, m])?;
    let mask = tape.constant(off_diagonal_mask(m));
    tape.mul(z1, mask)
}

pub fn sparsity_loss_from_log_probs(tape: &mut Tape, log_probs: Var) -> Result<Var> {
    let m = tape.shape(log_probs)[0];
    let lp1 = tape.narrow(log_probs, 2, 1, 1)?;
    let lp1 = tape.reshape(lp1, &[m, m])?;
    let mask = tape.constant(off_diagonal_mask(m));
    let masked = tape.mul(lp1, mask)?;
    Ok(tape.sum(masked))
}

pub fn format_edge_list(edges: &[(usize, usize, f64)]) -> String {
    let mut sorted = edges.to_vec();
    sorted.sort_by_key(|&(s, d, _)| (s, d));
    let mut out = String::new();
    for (s, d, p) in sorted {
        let _ = writeln!(out, "{s},{d},{p}");
    }
    out
}

pub fn parse_edge_list(text: &str) -> Result<Vec<(usize, usize, f64)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::Data(format!("edge list line {}: {line:?}", lineno + 1));
        let mut parts = line.split(',');
        let s = parts.next().and_then(|v| v.trim().parse().ok()).ok_or_else(bad)?;
        let d = parts.next().and_then(|v| v.trim().parse().ok()).ok_or_else(bad)?;
        let p = parts.next().and_then(|v| v.trim().parse().ok()).ok_or_else(bad)?;
        if parts.next().is_some() {
            return Err(bad());
        }
        out.push((s, d, p));
    }
    Ok(out)
}

pub fn write_edge_list(path: &Path, edges: &[(usize, usize, f64)]) -> Result<()> {
    fs::write(path, format_edge_list(edges)).map_err(|e| Error::io(path, e))
}

pub fn read_edge_list(path: &Path) -> Result<Vec<(usize, usize, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_edge_list(&text)
}
