//! Attention variants: scaled dot-product (multi-head), global-learned, the
//! local lightweight convolution branch, and the branch-wise mix of all three.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Generator, ParamId, ParamStore, Tape, Var};

/// Dropout applied inside the stack; `off()` for evaluation and checks.
pub struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut Generator>,
}

impl<'r> Dropout<'r> {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: &'r mut Generator) -> Self {
        Self { rate, rng: Some(rng) }
    }

    pub fn is_active(&self) -> bool {
        self.rate > 0.0 && self.rng.is_some()
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => tape.dropout(x, self.rate, rng),
            _ => Ok(x),
        }
    }
}

/// Flattens leading axes so `x[.., n, d]` becomes `[B, n, d]`.
fn as_batched(tape: &mut Tape, x: Var) -> Result<(Var, Vec<usize>)> {
    let s = tape.shape(x).to_vec();
    if s.len() < 2 {
        return Err(Error::shape("attention", format!("input {s:?}")));
    }
    let r = s.len();
    let b: usize = s[..r - 2].iter().product();
    Ok((tape.reshape(x, &[b, s[r - 2], s[r - 1]])?, s))
}

fn restore(tape: &mut Tape, y: Var, lead: &[usize]) -> Result<Var> {
    let s = tape.shape(y).to_vec();
    let mut shape = lead[..lead.len() - 2].to_vec();
    shape.extend_from_slice(&s[1..]);
    tape.reshape(y, &shape)
}

/// `Softmax(QKᵀ/√d_k)·V` over matching leading axes; `causal` hides keys
/// after each query (requires equal lengths).
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
    attend(tape, q, k, v, causal, &mut Dropout::off())
}

fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, causal: bool, drop: &mut Dropout) -> Result<Var> {
    let (sq, sk, sv) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    let r = sq.len();
    if r < 2
        || sk.len() != r
        || sv.len() != r
        || sq[r - 1] != sk[r - 1]
        || sk[r - 2] != sv[r - 2]
        || sq[..r - 2] != sk[..r - 2]
        || sk[..r - 2] != sv[..r - 2]
        || (causal && sq[r - 2] != sk[r - 2])
    {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!("q {sq:?}, k {sk:?}, v {sv:?}"),
        ));
    }
    let (q, lead) = as_batched(tape, q)?;
    let (k, _) = as_batched(tape, k)?;
    let (v, _) = as_batched(tape, v)?;
    let kt = tape.transpose(k)?;
    let scores = tape.batch_matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (sq[r - 1] as f64).sqrt());
    let weights = if causal {
        tape.causal_softmax(scores)?
    } else {
        tape.softmax(scores, 2)?
    };
    let weights = drop.apply(tape, weights)?;
    let out = tape.batch_matmul(weights, v)?;
    restore(tape, out, &lead)
}

/// `[B, n, h·e] → [B·h, n, e]`.
fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let y = tape.reshape(x, &[b, n, heads, d / heads])?;
    let y = tape.permute(y, &[0, 2, 1, 3])?;
    tape.reshape(y, &[b * heads, n, d / heads])
}

fn merge_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (bh, n, e) = (s[0], s[1], s[2]);
    let y = tape.reshape(x, &[bh / heads, heads, n, e])?;
    let y = tape.permute(y, &[0, 2, 1, 3])?;
    tape.reshape(y, &[bh / heads, n, heads * e])
}

fn check_heads(width: usize, heads: usize) -> Result<()> {
    if heads == 0 || width == 0 || width % heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "{heads} heads do not divide width {width}"
        )));
    }
    Ok(())
}

/// Multi-head dot-product attention. The per-head projections `W_i^Q` are
/// the column blocks of one `d × d` matrix, likewise `W^K`, `W^V`.
#[derive(Clone, Debug)]
pub struct MultiHead {
    width: usize,
    heads: usize,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

impl MultiHead {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, width: usize, heads: usize, rng: &mut R) -> Result<Self> {
        check_heads(width, heads)?;
        let mut p = |s: &str| store.add_uniform(format!("{prefix}.{s}"), &[width, width], width, rng);
        Ok(Self {
            width,
            heads,
            wq: p("wq"),
            wk: p("wk"),
            wv: p("wv"),
            wo: p("wo"),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// `[W^Q, W^K, W^V, W^O]`.
    pub fn params(&self) -> [ParamId; 4] {
        [self.wq, self.wk, self.wv, self.wo]
    }

    /// Self-attention when `queries` and `keys` are the same variable.
    pub fn forward(&self, tape: &mut Tape, queries: Var, keys: Var, causal: bool, drop: &mut Dropout) -> Result<Var> {
        for x in [queries, keys] {
            if tape.shape(x).last() != Some(&self.width) {
                return Err(Error::shape(
                    "multi_head",
                    format!("input {:?} for width {}", tape.shape(x), self.width),
                ));
            }
        }
        let (xq, lead) = as_batched(tape, queries)?;
        let (xk, _) = as_batched(tape, keys)?;
        let proj = |tape: &mut Tape, x: Var, w: ParamId| -> Result<Var> {
            let w = tape.param(w);
            let y = tape.matmul(x, w)?;
            split_heads(tape, y, self.heads)
        };
        let q = proj(tape, xq, self.wq)?;
        let k = proj(tape, xk, self.wk)?;
        let v = proj(tape, xk, self.wv)?;
        let heads = attend(tape, q, k, v, causal, drop)?;
        let merged = merge_heads(tape, heads, self.heads)?;
        let wo = tape.param(self.wo);
        let out = tape.matmul(merged, wo)?;
        restore(tape, out, &lead)
    }
}

/// Global-learned attention: weights are `Softmax(S)` over the top-left
/// `n × n` block of a trained `m × m` matrix per head, independent of the
/// input tokens. Only values are projected.
#[derive(Clone, Debug)]
pub struct GlobalAttention {
    width: usize,
    heads: usize,
    max_len: usize,
    s: ParamId,
    wv: ParamId,
    wo: ParamId,
}

pub const GLOBAL_INIT_STD: f64 = 0.02;

impl GlobalAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        heads: usize,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_heads(width, heads)?;
        if max_len == 0 {
            return Err(Error::InvalidArgument("global attention needs m ≥ 1".into()));
        }
        let s = store.add_normal(format!("{prefix}.s"), &[heads, max_len, max_len], GLOBAL_INIT_STD, rng);
        let wv = store.add_uniform(format!("{prefix}.wv"), &[width, width], width, rng);
        let wo = store.add_uniform(format!("{prefix}.wo"), &[width, width], width, rng);
        Ok(Self {
            width,
            heads,
            max_len,
            s,
            wv,
            wo,
        })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// `[S, W^V, W^O]`.
    pub fn params(&self) -> [ParamId; 3] {
        [self.s, self.wv, self.wo]
    }

    /// Row-stochastic weights `[h, n, n]`.
    pub fn weights(&self, tape: &mut Tape, n: usize, causal: bool) -> Result<Var> {
        if n > self.max_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {n} exceeds global attention size {}",
                self.max_len
            )));
        }
        let s = tape.param(self.s);
        let s = tape.narrow(s, 1, 0, n)?;
        let s = tape.narrow(s, 2, 0, n)?;
        if causal {
            tape.causal_softmax(s)
        } else {
            tape.softmax(s, 2)
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, causal: bool, drop: &mut Dropout) -> Result<Var> {
        if tape.shape(x).last() != Some(&self.width) {
            return Err(Error::shape(
                "global_attention",
                format!("input {:?} for width {}", tape.shape(x), self.width),
            ));
        }
        let (x, lead) = as_batched(tape, x)?;
        let s = tape.shape(x).to_vec();
        let (b, n) = (s[0], s[1]);
        let e = self.width / self.heads;
        let weights = self.weights(tape, n, causal)?;
        let weights = drop.apply(tape, weights)?;
        let wv = tape.param(self.wv);
        let v = tape.matmul(x, wv)?;
        // [B, n, h, e] → [h, n, B·e] so one product per head covers the batch
        let v = tape.reshape(v, &[b, n, self.heads, e])?;
        let v = tape.permute(v, &[2, 1, 0, 3])?;
        let v = tape.reshape(v, &[self.heads, n, b * e])?;
        let y = tape.batch_matmul(weights, v)?;
        let y = tape.reshape(y, &[self.heads, n, b, e])?;
        let y = tape.permute(y, &[2, 1, 0, 3])?;
        let y = tape.reshape(y, &[b, n, self.width])?;
        let wo = tape.param(self.wo);
        let out = tape.matmul(y, wo)?;
        restore(tape, out, &lead)
    }
}

pub const LOCAL_KERNEL_WIDTH: usize = 3;

/// Depthwise lightweight convolution: each channel owns a width-3 kernel,
/// softmax-normalized and shared across positions.
#[derive(Clone, Debug)]
pub struct LocalConv {
    width: usize,
    kernel: ParamId,
}

impl LocalConv {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize) -> Self {
        let kernel = store.add_const(format!("{prefix}.kernel"), &[width, LOCAL_KERNEL_WIDTH], 0.0);
        Self { width, kernel }
    }

    pub fn kernel(&self) -> ParamId {
        self.kernel
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, causal: bool) -> Result<Var> {
        if tape.shape(x).last() != Some(&self.width) {
            return Err(Error::shape(
                "local_conv_branch",
                format!("input {:?} for width {}", tape.shape(x), self.width),
            ));
        }
        let raw = tape.param(self.kernel);
        local_conv_branch(tape, x, raw, causal)
    }
}

/// Softmax-normalizes `raw[groups, 3]` along the window and slides it over
/// the time axis of `x[.., n, d]`.
pub fn local_conv_branch(tape: &mut Tape, x: Var, raw: Var, causal: bool) -> Result<Var> {
    let k = tape.softmax(raw, 1)?;
    tape.local_conv(x, k, causal)
}

/// Embedding split `d = d₁ + d₂ + d_c` across the dot-product, global and
/// convolution branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub d1: usize,
    pub d2: usize,
    pub dc: usize,
}

impl BranchConfig {
    /// Near-equal thirds. `d₂` and `d_c` are rounded down to a multiple of
    /// `heads` and the remainder goes to `d₁`, so every attention branch
    /// splits evenly into heads when `heads` divides `d`.
    pub fn three_way(d: usize, heads: usize) -> Self {
        let third = d / (3 * heads.max(1)) * heads.max(1);
        Self {
            d1: d - 2 * third,
            d2: third,
            dc: third,
        }
    }

    pub fn width(&self) -> usize {
        self.d1 + self.d2 + self.dc
    }
}

#[derive(Clone, Debug)]
pub struct BranchMix {
    cfg: BranchConfig,
    dot: Option<MultiHead>,
    global: Option<GlobalAttention>,
    local: Option<LocalConv>,
}

impl BranchMix {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: BranchConfig,
        heads: usize,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.d1 == 0 {
            return Err(Error::InvalidArgument(format!("branch split {cfg:?} has no dot-product branch")));
        }
        let dot = Some(MultiHead::new(store, &format!("{prefix}.dot"), cfg.d1, heads, rng)?);
        let global = match cfg.d2 {
            0 => None,
            d2 => Some(GlobalAttention::new(store, &format!("{prefix}.global"), d2, heads, max_len, rng)?),
        };
        let local = match cfg.dc {
            0 => None,
            dc => Some(LocalConv::new(store, &format!("{prefix}.local"), dc)),
        };
        Ok(Self { cfg, dot, global, local })
    }

    pub fn config(&self) -> BranchConfig {
        self.cfg
    }

    pub fn dot(&self) -> Option<&MultiHead> {
        self.dot.as_ref()
    }

    pub fn global(&self) -> Option<&GlobalAttention> {
        self.global.as_ref()
    }

    pub fn local(&self) -> Option<&LocalConv> {
        self.local.as_ref()
    }

    /// Splits `x[.., n, d]` column-wise, applies each branch to its slice and
    /// concatenates the results back to width `d`.
    pub fn forward(&self, tape: &mut Tape, x: Var, causal: bool, drop: &mut Dropout) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let axis = s.len() - 1;
        if s.last() != Some(&self.cfg.width()) {
            return Err(Error::shape(
                "branch_mix",
                format!("input {s:?} for split {:?}", self.cfg),
            ));
        }
        let mut parts = Vec::with_capacity(3);
        let mut start = 0;
        if let Some(dot) = &self.dot {
            let xs = tape.narrow(x, axis, start, self.cfg.d1)?;
            parts.push(dot.forward(tape, xs, xs, causal, drop)?);
            start += self.cfg.d1;
        }
        if let Some(global) = &self.global {
            let xs = tape.narrow(x, axis, start, self.cfg.d2)?;
            parts.push(global.forward(tape, xs, causal, drop)?);
            start += self.cfg.d2;
        }
        if let Some(local) = &self.local {
            let xs = tape.narrow(x, axis, start, self.cfg.dc)?;
            parts.push(local.forward(tape, xs, causal)?);
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        tape.concat(&parts, axis)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_way_split() {
        assert_eq!(BranchConfig::three_way(128, 8), BranchConfig { d1: 48, d2: 40, dc: 40 });
        assert_eq!(BranchConfig::three_way(24, 2), BranchConfig { d1: 8, d2: 8, dc: 8 });
        assert_eq!(BranchConfig::three_way(10, 1), BranchConfig { d1: 4, d2: 3, dc: 3 });
        for d in [8, 16, 24, 64, 128] {
            let c = BranchConfig::three_way(d, 4);
            assert_eq!(c.width(), d);
            assert_eq!(c.d1 % 4, 0);
        }
    }
}
