//! Hierarchical context encoding: per-node dilated convolutions with doubling
//! rates, each level followed by an influence-propagation graph convolution
//! across nodes at every retained time step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ipconv::{ip_conv, MessageMlp};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub levels: usize,
    pub kernel: usize,
    /// Channels after level 1; each later level doubles them.
    pub base_channels: usize,
    /// Per-node width of the context embedding.
    pub node_dim: usize,
    /// Token width after fusing all nodes of one time step.
    pub d_model: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::for_model(128, 3)
    }
}

impl EncoderConfig {
    /// Level 1 lifts to `d_model / 4` channels, doubling per level.
    pub fn for_model(d_model: usize, levels: usize) -> Self {
        Self {
            levels,
            kernel: 2,
            base_channels: (d_model / 4).max(1),
            node_dim: d_model,
            d_model,
        }
    }

    pub fn dilations(&self) -> Vec<usize> {
        (0..self.levels).map(|k| 1 << k).collect()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Input steps seen by one output step; `2^levels` for kernel 2.
    pub fn receptive_field(&self) -> usize {
        1 + self.dilations().iter().map(|d| (self.kernel - 1) * d).sum::<usize>()
    }

    /// Output length for a window of `n` steps.
    pub fn output_len(&self, n: usize) -> Result<usize> {
        let rf = self.receptive_field();
        if n < rf {
            return Err(Error::InvalidArgument(format!(
                "window of {n} steps is shorter than the receptive field {rf}"
            )));
        }
        Ok(n + 1 - rf)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.kernel == 0 || self.base_channels == 0 || self.node_dim == 0 || self.d_model == 0 {
            return Err(Error::Config(format!("encoder sizes must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Level {
    conv_w: ParamId,
    conv_b: ParamId,
    dilation: usize,
    mlp: MessageMlp,
}

#[derive(Clone, Debug)]
pub struct TemporalEncoder {
    cfg: EncoderConfig,
    num_nodes: usize,
    levels: Vec<Level>,
    node_w: ParamId,
    node_b: ParamId,
    fuse_w: ParamId,
    fuse_b: ParamId,
}

impl TemporalEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &EncoderConfig, num_nodes: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut levels = Vec::with_capacity(cfg.levels);
        let mut c_in = 1;
        for (k, dilation) in cfg.dilations().into_iter().enumerate() {
            let c_out = cfg.channels(k);
            let fan = c_in * cfg.kernel;
            let conv_w = store.add_uniform(format!("enc.l{k}.conv.w"), &[c_out, c_in, cfg.kernel], fan, rng);
            let conv_b = store.add_uniform(format!("enc.l{k}.conv.b"), &[c_out], fan, rng);
            let mlp = MessageMlp::new(store, &format!("enc.l{k}.ip"), c_out, rng);
            levels.push(Level {
                conv_w,
                conv_b,
                dilation,
                mlp,
            });
            c_in = c_out;
        }
        let node_w = store.add_uniform("enc.node.w", &[c_in, cfg.node_dim], c_in, rng);
        let node_b = store.add_uniform("enc.node.b", &[cfg.node_dim], c_in, rng);
        let fan = num_nodes * cfg.node_dim;
        let fuse_w = store.add_uniform("enc.fuse.w", &[fan, cfg.d_model], fan, rng);
        let fuse_b = store.add_uniform("enc.fuse.b", &[cfg.d_model], fan, rng);
        Ok(Self {
            cfg: cfg.clone(),
            num_nodes,
            levels,
            node_w,
            node_b,
            fuse_w,
            fuse_b,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn conv_params(&self, level: usize) -> (ParamId, ParamId) {
        (self.levels[level].conv_w, self.levels[level].conv_b)
    }

    pub fn projection_params(&self) -> [(ParamId, ParamId); 2] {
        [(self.node_w, self.node_b), (self.fuse_w, self.fuse_b)]
    }

    /// Per-node context embedding `[B, T′, M, node_dim]` of windows
    /// `[B, M, n]`.
    pub fn node_embeddings(&self, tape: &mut Tape, windows: Var, adj: Var) -> Result<Var> {
        let shape = tape.shape(windows).to_vec();
        if shape.len() != 3 || shape[1] != self.num_nodes {
            return Err(Error::shape(
                "encode_window",
                format!("windows {shape:?} for {} nodes", self.num_nodes),
            ));
        }
        let (b, m, n) = (shape[0], shape[1], shape[2]);
        self.cfg.output_len(n)?;
        let mut h = tape.reshape(windows, &[b * m, 1, n])?;
        let mut nodes_last = None;
        for (k, level) in self.levels.iter().enumerate() {
            let w = tape.param(level.conv_w);
            let bias = tape.param(level.conv_b);
            let conv = tape.conv1d_dilated(h, w, bias, level.dilation)?;
            let c = self.cfg.channels(k);
            let len = tape.shape(conv)[2];
            let conv = tape.reshape(conv, &[b, m, c, len])?;
            // [B, L, M, C]: nodes at each step
            let per_step = tape.permute(conv, &[0, 3, 1, 2])?;
            let msg = ip_conv(tape, per_step, adj, &level.mlp)?;
            let out = tape.add(per_step, msg)?;
            if k + 1 == self.levels.len() {
                nodes_last = Some(out);
            } else {
                let back = tape.permute(out, &[0, 2, 3, 1])?;
                h = tape.reshape(back, &[b * m, c, len])?;
            }
        }
        let nodes = nodes_last.expect("at least one level");
        let w = tape.param(self.node_w);
        let bias = tape.param(self.node_b);
        let proj = tape.matmul(nodes, w)?;
        tape.add(proj, bias)
    }

    /// Flattens the nodes of each step into one `d_model` token: `[B, T′, d_model]`.
    pub fn fuse(&self, tape: &mut Tape, ctx: Var) -> Result<Var> {
        let s = tape.shape(ctx).to_vec();
        let flat = tape.reshape(ctx, &[s[0], s[1], s[2] * s[3]])?;
        let w = tape.param(self.fuse_w);
        let bias = tape.param(self.fuse_b);
        let y = tape.matmul(flat, w)?;
        tape.add(y, bias)
    }

    /// Node embeddings followed by fusion.
    pub fn encode_window(&self, tape: &mut Tape, windows: Var, adj: Var) -> Result<Var> {
        let ctx = self.node_embeddings(tape, windows, adj)?;
        self.fuse(tape, ctx)
    }
}

/// Sinusoidal table: `PE(pos, 2i) = sin(pos / 10000^{2i/d})`,
/// `PE(pos, 2i+1) = cos(pos / 10000^{2i/d})`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, d]);
    for pos in 0..len {
        for c in 0..d {
            let i2 = (c / 2 * 2) as f64;
            let angle = pos as f64 / 10000f64.powf(i2 / d as f64);
            t.set(&[pos, c], if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

/// Adds the sinusoidal table along the second-to-last axis of `x[.., n, d]`.
pub fn positional_encode(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() < 2 {
        return Err(Error::shape("positional_encode", format!("{s:?}")));
    }
    let pe = positional_encoding(s[s.len() - 2], s[s.len() - 1]);
    let pe = tape.constant(pe);
    tape.add(x, pe)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_training_settings() {
        let c = EncoderConfig::default();
        assert_eq!(c.levels, 3);
        assert_eq!(c.kernel, 2);
        assert_eq!(c.dilations(), vec![1, 2, 4]);
        assert_eq!((c.channels(0), c.channels(1), c.channels(2)), (32, 64, 128));
        assert_eq!(c.receptive_field(), 8);
        assert_eq!(c.output_len(60).unwrap(), 53);
    }

    #[test]
    fn output_length_formula() {
        for levels in 1..=5 {
            let c = EncoderConfig::for_model(8, levels);
            assert_eq!(c.receptive_field(), 1 << levels);
            for n in (1 << levels)..(1 << levels) + 10 {
                assert_eq!(c.output_len(n).unwrap(), n - ((1 << levels) - 1));
            }
            assert!(c.output_len((1 << levels) - 1).is_err());
        }
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(5, 4);
        assert_eq!(pe.at(&[0, 0]), 0.0);
        assert_eq!(pe.at(&[0, 1]), 1.0);
        assert!((pe.at(&[3, 0]) - 3f64.sin()).abs() < 1e-15);
        assert!((pe.at(&[3, 3]) - (3.0 / 100.0f64).cos()).abs() < 1e-15);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        // rows differ, so equal embeddings at different positions separate
        assert!(pe.data()[0..4] != pe.data()[4..8]);
    }
}
