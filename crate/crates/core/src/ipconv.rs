//! Influence-propagation graph convolution.
//!
//! Node `i` aggregates, over its in-neighbours `j` (edges `j → i`), the
//! message `h_Θ(x_i ‖ x_j − x_i ‖ x_i + x_j)` scaled by the edge weight.
//! Node embeddings are the last axis of a `[.., M, T]` tensor; any leading
//! axes (batch, time step) are independent.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Var};

/// Perceptron `3T → T`, rectifier between layers.
#[derive(Clone, Debug)]
pub struct MessageMlp {
    width: usize,
    layers: Vec<(ParamId, ParamId)>,
}

impl MessageMlp {
    /// Two layers with hidden width `width`.
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, width: usize, rng: &mut R) -> Self {
        let w1 = store.add_uniform(format!("{prefix}.w1"), &[3 * width, width], 3 * width, rng);
        let b1 = store.add_uniform(format!("{prefix}.b1"), &[width], 3 * width, rng);
        let w2 = store.add_uniform(format!("{prefix}.w2"), &[width, width], width, rng);
        let b2 = store.add_uniform(format!("{prefix}.b2"), &[width], width, rng);
        Self {
            width,
            layers: vec![(w1, b1), (w2, b2)],
        }
    }

    /// Wraps existing `(weight, bias)` pairs; the first weight must be `3T × H`
    /// and the last layer must emit `T`.
    pub fn from_layers(store: &ParamStore, layers: Vec<(ParamId, ParamId)>) -> Result<Self> {
        let (first, _) = *layers.first().ok_or_else(|| Error::InvalidArgument("empty MLP".into()))?;
        let s = store.get(first).shape();
        if s.len() != 2 || s[0] % 3 != 0 {
            return Err(Error::shape("message_mlp", format!("first weight {s:?}")));
        }
        let width = s[0] / 3;
        let mut fan = s[0];
        for &(w, b) in &layers {
            let ws = store.get(w).shape();
            if ws.len() != 2 || ws[0] != fan || store.get(b).shape() != [ws[1]] {
                return Err(Error::shape("message_mlp", format!("layer {ws:?} after width {fan}")));
            }
            fan = ws[1];
        }
        if fan != width {
            return Err(Error::shape("message_mlp", format!("output {fan}, expected {width}")));
        }
        Ok(Self { width, layers })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Applies the MLP to `[.., 3T]` inputs.
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let mut h = input;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            h = self.layer(tape, h, k, w, b)?;
        }
        Ok(h)
    }

    fn layer(&self, tape: &mut Tape, h: Var, k: usize, w: ParamId, b: ParamId) -> Result<Var> {
        let wv = tape.param(w);
        let bv = tape.param(b);
        let y = tape.matmul(h, wv)?;
        let y = tape.add(y, bv)?;
        Ok(if k + 1 < self.layers.len() { tape.relu(y) } else { y })
    }
}

/// The MLP input `x_i ‖ (x_j − x_i) ‖ (x_i + x_j)`.
pub fn message_input(tape: &mut Tape, x_i: Var, x_j: Var) -> Result<Var> {
    if tape.shape(x_i) != tape.shape(x_j) {
        return Err(Error::shape(
            "ip_message",
            format!("{:?} vs {:?}", tape.shape(x_i), tape.shape(x_j)),
        ));
    }
    let diff = tape.sub(x_j, x_i)?;
    let sum = tape.add(x_i, x_j)?;
    let last = tape.shape(x_i).len() - 1;
    tape.concat(&[x_i, diff, sum], last)
}

/// One message `h_Θ(x_i ‖ x_j − x_i ‖ x_i + x_j)` from `j` to `i`.
pub fn ip_message(tape: &mut Tape, x_i: Var, x_j: Var, mlp: &MessageMlp) -> Result<Var> {
    let width = *tape.shape(x_i).last().unwrap();
    if width != mlp.width {
        return Err(Error::shape("ip_message", format!("embedding {width}, MLP {}", mlp.width)));
    }
    let input = message_input(tape, x_i, x_j)?;
    mlp.forward(tape, input)
}

/// `x′_i = Σ_j adj[j, i] · h_Θ(x_i ‖ x_j − x_i ‖ x_i + x_j)` for
/// `nodes[.., M, T]` and `adj[M, M]`. Nodes without in-edges map to zero.
///
/// The first MLP layer is linear in the concatenation, so it is evaluated
/// once per node as `x_i·(A − B + C) + x_j·(B + C)` where `A, B, C` are the
/// three row blocks of the first weight. The last layer is linear too and
/// commutes with the weighted sum, so it runs once per node on the
/// aggregate, with its bias scaled by the in-degree. Only the hidden
/// activations are formed per pair.
pub fn ip_conv(tape: &mut Tape, nodes: Var, adj: Var, mlp: &MessageMlp) -> Result<Var> {
    let shape = tape.shape(nodes).to_vec();
    let r = shape.len();
    if r < 2 {
        return Err(Error::shape("ip_conv", format!("nodes {shape:?}")));
    }
    let (m, t) = (shape[r - 2], shape[r - 1]);
    if tape.shape(adj) != [m, m] {
        return Err(Error::shape(
            "ip_conv",
            format!("adjacency {:?} for {m} nodes", tape.shape(adj)),
        ));
    }
    if t != mlp.width {
        return Err(Error::shape("ip_conv", format!("embedding {t}, MLP {}", mlp.width)));
    }
    let (w1, b1) = mlp.layers[0];
    let w = tape.param(w1);
    let a = tape.narrow(w, 0, 0, t)?;
    let b = tape.narrow(w, 0, t, t)?;
    let c = tape.narrow(w, 0, 2 * t, t)?;
    let bc = tape.add(b, c)?;
    let self_w = tape.sub(a, b)?;
    let self_w = tape.add(self_w, c)?;
    let p = tape.matmul(nodes, self_w)?;
    let q = tape.matmul(nodes, bc)?;
    let pre = tape.pair_sum(p, q)?;
    let bias = tape.param(b1);
    let mut h = tape.add(pre, bias)?;
    let last = mlp.layers.len() - 1;
    if last == 0 {
        return tape.aggregate(h, adj);
    }
    h = tape.relu(h);
    for (k, &(w, b)) in mlp.layers.iter().enumerate().take(last).skip(1) {
        h = mlp.layer(tape, h, k, w, b)?;
    }
    let agg = tape.aggregate(h, adj)?;
    let (w_out, b_out) = mlp.layers[last];
    let wv = tape.param(w_out);
    let y = tape.matmul(agg, wv)?;
    // Σ_j adj[j, i] · b for every receiving node i
    let adj_t = tape.transpose(adj)?;
    let ones = tape.constant(crate::Tensor::full(&[m, 1], 1.0));
    let degree = tape.matmul(adj_t, ones)?;
    let bv = tape.param(b_out);
    let width = tape.shape(bv)[0];
    let bv = tape.reshape(bv, &[1, width])?;
    let bias_sum = tape.matmul(degree, bv)?;
    tape.add(y, bias_sum)
}
