use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::{BranchConfig, BranchMix, Dropout, MultiHead};
use crate::encoder::positional_encode;
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecasterConfig {
    pub num_nodes: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ff_width: usize,
    pub dropout: f64,
    /// Size `m` of the global-learned alignment matrix.
    pub max_len: usize,
    /// Observed steps fed to the decoder ahead of the zero target slot.
    pub label_len: usize,
    pub branch: BranchConfig,
}

impl ForecasterConfig {
    pub fn new(num_nodes: usize, d_model: usize, heads: usize) -> Self {
        Self {
            num_nodes,
            d_model,
            heads,
            enc_layers: 3,
            dec_layers: 2,
            ff_width: 128,
            dropout: 0.05,
            max_len: 128,
            label_len: 30,
            branch: BranchConfig::three_way(d_model, heads),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.num_nodes,
            self.d_model,
            self.heads,
            self.enc_layers,
            self.dec_layers,
            self.ff_width,
            self.max_len,
            self.label_len,
        ];
        if positive.contains(&0) {
            return Err(Error::Config(format!("forecaster sizes must be positive: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.branch.width() != self.d_model {
            return Err(Error::Config(format!(
                "branch widths {:?} do not sum to d_model {}",
                self.branch, self.d_model
            )));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide d_model {}",
                self.heads, self.d_model
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize) -> Self {
        Self {
            gain: store.add_const(format!("{prefix}.gain"), &[width], 1.0),
            bias: store.add_const(format!("{prefix}.bias"), &[width], 0.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new<R: Rng>(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            w: store.add_uniform(format!("{prefix}.w"), &[fan_in, fan_out], fan_in, rng),
            b: store.add_uniform(format!("{prefix}.b"), &[fan_out], fan_in, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, ff: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(store, &format!("{prefix}.up"), d, ff, rng),
            down: Linear::new(store, &format!("{prefix}.down"), ff, d, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var, drop: &mut Dropout) -> Result<Var> {
        let h = self.up.forward(tape, x)?;
        let h = tape.relu(h);
        let y = self.down.forward(tape, h)?;
        drop.apply(tape, y)
    }
}

/// Pre-norm block: `x + mix(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    norm1: LayerNorm,
    mix: BranchMix,
    norm2: LayerNorm,
    ff: FeedForward,
}

impl EncoderLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &ForecasterConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{prefix}.ln1"), cfg.d_model),
            mix: BranchMix::new(store, &format!("{prefix}.mix"), cfg.branch, cfg.heads, cfg.max_len, rng)?,
            norm2: LayerNorm::new(store, &format!("{prefix}.ln2"), cfg.d_model),
            ff: FeedForward::new(store, &format!("{prefix}.ff"), cfg.d_model, cfg.ff_width, rng),
        })
    }

    pub fn mix(&self) -> &BranchMix {
        &self.mix
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, drop: &mut Dropout) -> Result<Var> {
        let h = self.norm1.forward(tape, x)?;
        let h = self.mix.forward(tape, h, false, drop)?;
        let x = tape.add(x, h)?;
        let h = self.norm2.forward(tape, x)?;
        let h = self.ff.forward(tape, h, drop)?;
        tape.add(x, h)
    }
}

/// Pre-norm block: masked branch mix, cross-attention to the encoder memory,
/// feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    norm1: LayerNorm,
    mix: BranchMix,
    norm2: LayerNorm,
    cross: MultiHead,
    norm3: LayerNorm,
    ff: FeedForward,
}

impl DecoderLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &ForecasterConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{prefix}.ln1"), cfg.d_model),
            mix: BranchMix::new(store, &format!("{prefix}.mix"), cfg.branch, cfg.heads, cfg.max_len, rng)?,
            norm2: LayerNorm::new(store, &format!("{prefix}.ln2"), cfg.d_model),
            cross: MultiHead::new(store, &format!("{prefix}.cross"), cfg.d_model, cfg.heads, rng)?,
            norm3: LayerNorm::new(store, &format!("{prefix}.ln3"), cfg.d_model),
            ff: FeedForward::new(store, &format!("{prefix}.ff"), cfg.d_model, cfg.ff_width, rng),
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, memory: Var, drop: &mut Dropout) -> Result<Var> {
        let h = self.norm1.forward(tape, x)?;
        let h = self.mix.forward(tape, h, true, drop)?;
        let x = tape.add(x, h)?;
        let h = self.norm2.forward(tape, x)?;
        let h = self.cross.forward(tape, h, memory, false, drop)?;
        let x = tape.add(x, h)?;
        let h = self.norm3.forward(tape, x)?;
        let h = self.ff.forward(tape, h, drop)?;
        tape.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct Forecaster {
    cfg: ForecasterConfig,
    encoder: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    embed: Linear,
    decoder: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
    head: Linear,
}

impl Forecaster {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ForecasterConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let encoder = (0..cfg.enc_layers)
            .map(|k| EncoderLayer::new(store, &format!("fc.enc{k}"), cfg, rng))
            .collect::<Result<_>>()?;
        let enc_norm = LayerNorm::new(store, "fc.enc_norm", cfg.d_model);
        let embed = Linear::new(store, "fc.embed", cfg.num_nodes, cfg.d_model, rng);
        let decoder = (0..cfg.dec_layers)
            .map(|k| DecoderLayer::new(store, &format!("fc.dec{k}"), cfg, rng))
            .collect::<Result<_>>()?;
        let dec_norm = LayerNorm::new(store, "fc.dec_norm", cfg.d_model);
        let head = Linear::new(store, "fc.head", cfg.d_model, cfg.num_nodes, rng);
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            enc_norm,
            embed,
            decoder,
            dec_norm,
            head,
        })
    }

    pub fn config(&self) -> &ForecasterConfig {
        &self.cfg
    }

    pub fn encoder_layers(&self) -> &[EncoderLayer] {
        &self.encoder
    }

    /// Memory `[B, T′, d]` from position-encoded context tokens.
    pub fn encode(&self, tape: &mut Tape, tokens: Var, drop: &mut Dropout) -> Result<Var> {
        let mut x = tokens;
        for layer in &self.encoder {
            x = layer.forward(tape, x, drop)?;
        }
        self.enc_norm.forward(tape, x)
    }

    /// Decoder states `[B, label_len + 1, d]` for raw label rows
    /// `[B, label_len + 1, M]` whose last row is the zero target slot.
    pub fn decode(&self, tape: &mut Tape, labels: Var, memory: Var, drop: &mut Dropout) -> Result<Var> {
        let s = tape.shape(labels).to_vec();
        if s.len() != 3 || s[1] != self.cfg.label_len + 1 || s[2] != self.cfg.num_nodes {
            return Err(Error::shape(
                "forecast",
                format!(
                    "decoder input {s:?}, expected [B, {}, {}]",
                    self.cfg.label_len + 1,
                    self.cfg.num_nodes
                ),
            ));
        }
        let x = self.embed.forward(tape, labels)?;
        let mut x = positional_encode(tape, x)?;
        for layer in &self.decoder {
            x = layer.forward(tape, x, memory, drop)?;
        }
        self.dec_norm.forward(tape, x)
    }

    /// Next-step prediction `[B, M]` read from the target slot.
    pub fn forecast(&self, tape: &mut Tape, tokens: Var, labels: Var, drop: &mut Dropout) -> Result<Var> {
        let memory = self.encode(tape, tokens, drop)?;
        let states = self.decode(tape, labels, memory, drop)?;
        let n = tape.shape(states)[1];
        let last = tape.narrow(states, 1, n - 1, 1)?;
        let y = self.head.forward(tape, last)?;
        let b = tape.shape(y)[0];
        tape.reshape(y, &[b, self.cfg.num_nodes])
    }
}
