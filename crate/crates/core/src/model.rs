//! The full detector network: connection policy, temporal encoder and
//! forecaster over one parameter store, plus checkpoint round trips.

use serde::{Deserialize, Serialize};

use crate::data_io::{Batch, NormalizerStats};
use crate::encoder::{positional_encode, EncoderConfig, TemporalEncoder};
use crate::error::{Error, Result};
use crate::forecaster::{BranchConfig, Dropout, Forecaster, ForecasterConfig};
use crate::graph_policy::{AdjacencySample, ConnectionLogits, P_INIT};
use crate::numerics::{generator, Checkpoint, Generator, ParamStore, Tape, Var};

/// Edge threshold on `π₁` for the deterministic evaluation graph.
pub const EDGE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Encoder window length `n`.
    pub window: usize,
    pub encoder: EncoderConfig,
    pub forecaster: ForecasterConfig,
}

impl ModelConfig {
    /// Paper-scale layout for `num_nodes` sensors: window 60, label 30,
    /// width 128, 8 heads, 3 dilation levels.
    pub fn new(num_nodes: usize) -> Self {
        Self::sized(num_nodes, 60, 30, 128, 8)
    }

    /// Default stack at a custom width; `m` covers both token sequences.
    pub fn sized(num_nodes: usize, window: usize, label_len: usize, d_model: usize, heads: usize) -> Self {
        let encoder = EncoderConfig::for_model(d_model, 3);
        let mut forecaster = ForecasterConfig::new(num_nodes, d_model, heads);
        forecaster.label_len = label_len;
        forecaster.max_len = forecaster.max_len.max(window).max(label_len + 1);
        Self {
            window,
            encoder,
            forecaster,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.forecaster.num_nodes
    }

    pub fn label_len(&self) -> usize {
        self.forecaster.label_len
    }

    /// Number of context tokens the encoder emits per window.
    pub fn tokens(&self) -> Result<usize> {
        self.encoder.output_len(self.window)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.forecaster.validate()?;
        if self.num_nodes() < 2 {
            return Err(Error::Config(format!(
                "graph learning needs at least 2 sensors, got {}",
                self.num_nodes()
            )));
        }
        if self.encoder.d_model != self.forecaster.d_model {
            return Err(Error::Config(format!(
                "encoder width {} differs from forecaster width {}",
                self.encoder.d_model, self.forecaster.d_model
            )));
        }
        if self.label_len() >= self.window {
            return Err(Error::Config(format!(
                "label length {} must be below the window {}",
                self.label_len(),
                self.window
            )));
        }
        let longest = self.tokens()?.max(self.label_len() + 1);
        if self.forecaster.max_len < longest {
            return Err(Error::Config(format!(
                "global attention size {} below sequence length {longest}",
                self.forecaster.max_len
            )));
        }
        Ok(())
    }

    fn hyperparameters(&self) -> Vec<(&'static str, f64)> {
        let (e, f) = (&self.encoder, &self.forecaster);
        [
            ("window", self.window),
            ("num_nodes", f.num_nodes),
            ("levels", e.levels),
            ("kernel", e.kernel),
            ("base_channels", e.base_channels),
            ("node_dim", e.node_dim),
            ("d_model", f.d_model),
            ("heads", f.heads),
            ("enc_layers", f.enc_layers),
            ("dec_layers", f.dec_layers),
            ("ff_width", f.ff_width),
            ("max_len", f.max_len),
            ("label_len", f.label_len),
            ("d1", f.branch.d1),
            ("d2", f.branch.d2),
            ("dc", f.branch.dc),
        ]
        .into_iter()
        .map(|(k, v)| (k, v as f64))
        .chain([("dropout", f.dropout)])
        .collect()
    }

    fn write_to(&self, ck: &mut Checkpoint) {
        for (k, v) in self.hyperparameters() {
            ck.push_scalar(format!("hp.{k}"), v);
        }
    }

    fn read_from(ck: &Checkpoint) -> Result<Self> {
        let int = |k: &str| -> Result<usize> {
            let v = ck.scalar(&format!("hp.{k}"))?;
            if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
                return Err(Error::Checkpoint(format!("hp.{k} = {v} is not a count")));
            }
            Ok(v as usize)
        };
        let cfg = Self {
            window: int("window")?,
            encoder: EncoderConfig {
                levels: int("levels")?,
                kernel: int("kernel")?,
                base_channels: int("base_channels")?,
                node_dim: int("node_dim")?,
                d_model: int("d_model")?,
            },
            forecaster: ForecasterConfig {
                num_nodes: int("num_nodes")?,
                d_model: int("d_model")?,
                heads: int("heads")?,
                enc_layers: int("enc_layers")?,
                dec_layers: int("dec_layers")?,
                ff_width: int("ff_width")?,
                dropout: ck.scalar("hp.dropout")?,
                max_len: int("max_len")?,
                label_len: int("label_len")?,
                branch: BranchConfig {
                    d1: int("d1")?,
                    d2: int("d2")?,
                    dc: int("dc")?,
                },
            },
        };
        cfg.validate().map_err(|e| Error::Checkpoint(format!("stored architecture: {e}")))?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct GtaModel {
    config: ModelConfig,
    store: ParamStore,
    policy: ConnectionLogits,
    encoder: TemporalEncoder,
    forecaster: Forecaster,
}

impl GtaModel {
    /// Fresh weights; the policy starts from the complete graph.
    pub fn new(config: &ModelConfig, rng: &mut Generator) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let policy = ConnectionLogits::init_complete_graph(&mut store, config.num_nodes(), P_INIT)?;
        let encoder = TemporalEncoder::new(&mut store, &config.encoder, config.num_nodes(), rng)?;
        let forecaster = Forecaster::new(&mut store, &config.forecaster, rng)?;
        Ok(Self {
            config: config.clone(),
            store,
            policy,
            encoder,
            forecaster,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn policy(&self) -> &ConnectionLogits {
        &self.policy
    }

    pub fn encoder(&self) -> &TemporalEncoder {
        &self.encoder
    }

    pub fn forecaster(&self) -> &Forecaster {
        &self.forecaster
    }

    /// Deterministic graph `π₁ > 0.5`.
    pub fn adjacency(&self) -> AdjacencySample {
        self.policy.extract_adjacency(&self.store, EDGE_THRESHOLD)
    }

    /// `(src, dst, π₁)` for every kept edge.
    pub fn edge_list(&self) -> Vec<(usize, usize, f64)> {
        self.policy.edge_list(&self.store, EDGE_THRESHOLD)
    }

    /// Next-step predictions `[B, M]` under adjacency `adj[M, M]`.
    pub fn predict(&self, tape: &mut Tape, batch: &Batch, adj: Var, drop: &mut Dropout) -> Result<Var> {
        let windows = tape.constant(batch.encoder.clone());
        let tokens = self.encoder.encode_window(tape, windows, adj)?;
        let tokens = positional_encode(tape, tokens)?;
        let labels = tape.constant(batch.decoder.clone());
        self.forecaster.forecast(tape, tokens, labels, drop)
    }

    /// Predictions with the evaluation graph and dropout off, as plain rows.
    pub fn predict_values(&self, batch: &Batch) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::with_params(&self.store);
        let adj = tape.constant(self.adjacency().weights);
        let y = self.predict(&mut tape, batch, adj, &mut Dropout::off())?;
        let m = self.config.num_nodes();
        Ok(tape.data(y).chunks(m).map(<[f64]>::to_vec).collect())
    }

    /// Hyperparameters, normalization extrema, then every parameter in
    /// creation order.
    pub fn to_checkpoint(&self, norm: &NormalizerStats) -> Result<Checkpoint> {
        let m = self.config.num_nodes();
        if norm.min.len() != m || norm.max.len() != m {
            return Err(Error::Data(format!(
                "normalization covers {} sensors, model has {m}",
                norm.min.len()
            )));
        }
        let mut ck = Checkpoint::new();
        self.config.write_to(&mut ck);
        ck.push("norm.min", crate::Tensor::new(&[m], norm.min.clone())?);
        ck.push("norm.max", crate::Tensor::new(&[m], norm.max.clone())?);
        for (name, t) in self.store.iter() {
            ck.push(name, crate::Tensor::new(t.shape(), t.data().to_vec())?);
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, NormalizerStats)> {
        let config = ModelConfig::read_from(ck)?;
        // weights are overwritten below, so the init stream is irrelevant
        let mut model = Self::new(&config, &mut generator(0))?;
        let params = ck.iter().filter(|(n, _)| !n.starts_with("hp.") && !n.starts_with("norm."));
        model.store.load_from(params)?;
        let m = config.num_nodes();
        let vec_of = |name: &str| -> Result<Vec<f64>> {
            let t = ck.get(name).ok_or_else(|| Error::Checkpoint(format!("missing entry {name}")))?;
            if t.shape() != [m] {
                return Err(Error::Checkpoint(format!("{name} has shape {:?}", t.shape())));
            }
            Ok(t.data().to_vec())
        };
        let norm = NormalizerStats {
            min: vec_of("norm.min")?,
            max: vec_of("norm.max")?,
        };
        Ok((model, norm))
    }
}
