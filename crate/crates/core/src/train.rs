//! Two-phase training (complete-graph warm-up, then joint policy and weight
//! updates) and test-time scoring.

use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data_io::{make_windows, stack_windows, NormalizerStats, RawSeries, Window, WindowConfig};
use crate::detector::{anomaly_score, mse_loss};
use crate::error::{Error, Result};
use crate::forecaster::Dropout;
use crate::graph_policy::{hard_sample, temperature, AdjacencySample};
use crate::model::{GtaModel, ModelConfig};
use crate::numerics::rng::split;
use crate::numerics::{Adam, AdamConfig, Generator, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Joint epochs without a validation improvement before stopping.
    pub patience: usize,
    /// Leading epochs on the complete graph with the policy frozen.
    pub warmup_epochs: usize,
    pub batch_size: usize,
    /// Step between consecutive training window targets.
    pub stride: usize,
    /// Trailing share of training windows held out for validation.
    pub val_fraction: f64,
    pub lr: f64,
    /// Learning rate of the connection logits.
    pub policy_lr: f64,
    /// Weight `λ_s` of the sparsity term.
    pub lambda_s: f64,
    /// `false` keeps the complete graph throughout (no policy learning).
    pub learn_graph: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            patience: 10,
            warmup_epochs: 5,
            batch_size: 32,
            stride: 1,
            val_fraction: 0.1,
            lr: 1e-4,
            policy_lr: 1e-4,
            lambda_s: 0.01,
            learn_graph: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.stride == 0 {
            return Err(Error::Config("epochs, batch size and stride must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("validation fraction {} outside [0, 1)", self.val_fraction)));
        }
        let rates = [self.lr, self.policy_lr];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Config(format!("learning rates must be positive: {rates:?}")));
        }
        if !(self.lambda_s.is_finite() && self.lambda_s >= 0.0) {
            return Err(Error::Config(format!("sparsity weight {} must be ≥ 0", self.lambda_s)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Joint,
    /// Complete graph with the policy switched off.
    Fixed,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Warmup => "warmup",
            Phase::Joint => "joint",
            Phase::Fixed => "fixed",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub phase: Phase,
    /// Gumbel-Softmax temperature; absent when no graph was sampled.
    pub tau: Option<f64>,
    /// Mean over training windows of `(1/M)·‖Y − Ŷ‖²`.
    pub train_mse: f64,
    pub val_mse: Option<f64>,
    /// `L_s` at the end of the epoch.
    pub sparsity: f64,
    /// Edges with `π₁ > 0.5` at the end of the epoch.
    pub edges: usize,
}

pub struct TrainOutcome {
    pub model: GtaModel,
    pub norm: NormalizerStats,
    pub log: Vec<EpochLog>,
    pub stopped_early: bool,
}

/// Fits normalization on `series`, then trains a fresh model. `on_epoch`
/// sees each log row as soon as the epoch ends.
pub fn train(
    series: &RawSeries,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    rng: &mut Generator,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if series.num_sensors() != model_cfg.num_nodes() {
        return Err(Error::Data(format!(
            "series has {} sensors, model expects {}",
            series.num_sensors(),
            model_cfg.num_nodes()
        )));
    }
    let norm = NormalizerStats::fit(series)?;
    let normalized = norm.normalize(series)?;
    let wcfg = WindowConfig {
        window: model_cfg.window,
        label_len: model_cfg.label_len(),
        stride: cfg.stride,
    };
    let mut windows = make_windows(&normalized, &wcfg)?;
    let n_val = (windows.len() as f64 * cfg.val_fraction).floor() as usize;
    let val = windows.split_off(windows.len() - n_val);
    if windows.is_empty() {
        return Err(Error::Data("no training windows left after the validation split".into()));
    }

    let mut model = GtaModel::new(model_cfg, &mut split(rng))?;
    let mut shuffle_rng = split(rng);
    let mut gumbel_rng = split(rng);
    let mut dropout_rng = split(rng);
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let policy = *model.policy();
    let m = model_cfg.num_nodes();
    let complete = AdjacencySample::complete(m);
    let rate = model_cfg.forecaster.dropout;

    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut log = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let phase = match (cfg.learn_graph, epoch < cfg.warmup_epochs) {
            (false, _) => Phase::Fixed,
            (true, true) => Phase::Warmup,
            (true, false) => Phase::Joint,
        };
        let tau = (phase == Phase::Joint).then(|| temperature(epoch - cfg.warmup_epochs));
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let picked: Vec<&Window> = chunk.iter().map(|&i| &windows[i]).collect();
            let batch = stack_windows(&picked, m, &wcfg)?;
            let grads = {
                let mut tape = Tape::with_params(model.store());
                let adj = match tau {
                    Some(tau) => {
                        let sample = policy.sample(&mut tape, tau, &mut gumbel_rng)?;
                        hard_sample(&mut tape, &sample)?
                    }
                    None => tape.constant(complete.weights.clone()),
                };
                let mut drop = Dropout::new(rate, &mut dropout_rng);
                let pred = model.predict(&mut tape, &batch, adj, &mut drop)?;
                let target = tape.constant(batch.target.clone());
                let l_mse = mse_loss(&mut tape, pred, target)?;
                let loss = if tau.is_some() && cfg.lambda_s > 0.0 {
                    let l_s = policy.sparsity_loss(&mut tape)?;
                    let weighted = tape.scale(l_s, cfg.lambda_s);
                    tape.add(l_mse, weighted)?
                } else {
                    l_mse
                };
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss {value} at epoch {}, batch {}",
                        epoch + 1,
                        b + 1
                    )));
                }
                total += tape.value(l_mse).item();
                tape.backward(loss)?
            };
            let store = model.store_mut();
            store.zero_grad();
            grads.accumulate_into(store)?;
            adam.step_with(store, |id| if id == policy.param() { cfg.policy_lr } else { cfg.lr })?;
        }

        let val_mse = if val.is_empty() {
            None
        } else {
            Some(mean_mse(&model, &val, &wcfg, cfg.batch_size)?)
        };
        let sparsity = {
            let mut tape = Tape::with_params(model.store());
            let l_s = policy.sparsity_loss(&mut tape)?;
            tape.value(l_s).item()
        };
        let row = EpochLog {
            epoch: epoch + 1,
            phase,
            tau,
            train_mse: total / windows.len() as f64,
            val_mse,
            sparsity,
            edges: model.adjacency().edge_count(),
        };
        on_epoch(&row);
        log.push(row);

        if let (Some(v), true) = (val_mse, phase != Phase::Warmup) {
            if v < best {
                best = v;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    stopped_early = epoch + 1 < cfg.epochs;
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome {
        model,
        norm,
        log,
        stopped_early,
    })
}

fn mean_mse(model: &GtaModel, windows: &[Window], wcfg: &WindowConfig, batch_size: usize) -> Result<f64> {
    let m = model.config().num_nodes();
    let mut total = 0.0;
    for chunk in windows.chunks(batch_size) {
        let picked: Vec<&Window> = chunk.iter().collect();
        let batch = stack_windows(&picked, m, wcfg)?;
        for (pred, w) in model.predict_values(&batch)?.iter().zip(chunk) {
            total += anomaly_score(pred, &w.target) / m as f64;
        }
    }
    Ok(total / windows.len() as f64)
}

/// Anomaly scores for every test step from `window` onward, in normalized
/// units, under the evaluation graph.
pub fn score_series(model: &GtaModel, norm: &NormalizerStats, test: &RawSeries, batch_size: usize) -> Result<Vec<f64>> {
    let cfg = model.config();
    if test.num_sensors() != cfg.num_nodes() {
        return Err(Error::Data(format!(
            "test series has {} sensors, model expects {}",
            test.num_sensors(),
            cfg.num_nodes()
        )));
    }
    let wcfg = WindowConfig {
        window: cfg.window,
        label_len: cfg.label_len(),
        stride: 1,
    };
    let windows = make_windows(&norm.normalize(test)?, &wcfg)?;
    let mut scores = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(batch_size.max(1)) {
        let picked: Vec<&Window> = chunk.iter().collect();
        let batch = stack_windows(&picked, cfg.num_nodes(), &wcfg)?;
        for (pred, w) in model.predict_values(&batch)?.iter().zip(chunk) {
            let s = anomaly_score(pred, &w.target);
            if !s.is_finite() {
                return Err(Error::NonFinite(format!("anomaly score at test step {}", w.target_index)));
            }
            scores.push(s);
        }
    }
    Ok(scores)
}
