//! Command implementations behind the `gta` binary. Every command takes a
//! resolved [`RunConfig`] and returns a printable report.

pub mod config;

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use gta_core::data_io::{
    edge_recovery_metrics, generate_synthetic, median_downsample, read_scores, read_series, write_scores,
    write_series, RawSeries, ScoreRow,
};
use gta_core::detector::{apply_threshold, threshold_sweep, MetricsReport};
use gta_core::forecaster::{
    complexity_report, AttentionKind, BranchConfig, BranchMix, Dropout, GlobalAttention, MultiHead,
};
use gta_core::graph_policy::{format_edge_list, read_edge_list, AdjacencySample};
use gta_core::model::GtaModel;
use gta_core::numerics::{generator, Checkpoint, ParamStore, Tape};
use gta_core::train::{score_series, train, EpochLog};
use gta_core::{Error, Tensor};
use rand::Rng;

pub use config::{parse_override, RunConfig};

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_) | Error::Detached | Error::NotScalar(_) => CliError::Numeric(e.to_string()),
            Error::Config(_) | Error::InvalidArgument(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn load_series(path: &Path, factor: usize) -> Result<RawSeries, CliError> {
    if !path.is_file() {
        return Err(CliError::Data(format!("{} does not exist", path.display())));
    }
    let x = read_series(path)?;
    Ok(if factor > 1 { median_downsample(&x, factor)? } else { x })
}

pub struct SynthReport {
    pub train_rows: usize,
    pub test_rows: usize,
    pub edges: usize,
    pub anomalous_steps: usize,
}

impl fmt::Display for SynthReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "train rows {}, test rows {} ({} anomalous), planted edges {}",
            self.train_rows, self.test_rows, self.anomalous_steps, self.edges
        )
    }
}

/// Writes `train.csv`, `test.csv` and `graph_true.txt` under `out`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthReport, CliError> {
    let spec = cfg.synthetic_spec()?;
    let data = generate_synthetic(&spec, &mut generator(cfg.seed))?;
    ensure_dir(&cfg.out)?;
    let note = format!("gta synth seed={}", cfg.seed);
    write_series(&cfg.out.join("train.csv"), &data.train, Some(&note))?;
    write_series(&cfg.out.join("test.csv"), &data.test, Some(&note))?;
    let edges: Vec<(usize, usize, f64)> = data.planted.edges().into_iter().map(|(s, d)| (s, d, 1.0)).collect();
    let graph = cfg.out.join("graph_true.txt");
    fs::write(&graph, format!("# {note}\n{}", format_edge_list(&edges))).map_err(|e| io_err(&graph, e))?;
    Ok(SynthReport {
        train_rows: data.train.len(),
        test_rows: data.test.len(),
        edges: edges.len(),
        anomalous_steps: data.test.labels.as_ref().map_or(0, |l| l.iter().filter(|&&v| v == 1).count()),
    })
}

pub const LOG_HEADER: &str = "seed,epoch,phase,tau,train_mse,val_mse,sparsity,edges";

pub fn format_log_row(seed: u64, r: &EpochLog) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    format!(
        "{seed},{},{},{},{},{},{},{}",
        r.epoch,
        r.phase,
        opt(r.tau),
        r.train_mse,
        opt(r.val_mse),
        r.sparsity,
        r.edges
    )
}

pub struct TrainReport {
    pub log: Vec<EpochLog>,
    pub stopped_early: bool,
    pub edges: Vec<(usize, usize, f64)>,
    pub checkpoint_bytes: usize,
}

impl fmt::Display for TrainReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let last = self.log.last();
        write!(
            f,
            "{} epochs{}, final train mse {:.6}, {} edges, checkpoint {} bytes",
            self.log.len(),
            if self.stopped_early { " (early stop)" } else { "" },
            last.map_or(f64::NAN, |r| r.train_mse),
            self.edges.len(),
            self.checkpoint_bytes
        )
    }
}

/// Trains on the training CSV, writes the checkpoint and the learned edge
/// list, and appends one row per epoch to `train_log.csv`.
pub fn cmd_train(cfg: &RunConfig, mut progress: impl FnMut(&EpochLog)) -> Result<TrainReport, CliError> {
    let series = load_series(&cfg.train_path(), cfg.downsample)?;
    let model_cfg = cfg.model_config(series.num_sensors());
    ensure_dir(&cfg.out)?;
    let log_path = cfg.log_path();
    let fresh = !log_path.exists();
    let mut log_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    if fresh {
        writeln!(log_file, "{LOG_HEADER}").map_err(|e| io_err(&log_path, e))?;
    }
    let mut write_failure = None;
    let outcome = train(&series, &model_cfg, &cfg.train_config(), &mut generator(cfg.seed), |row| {
        if let Err(e) = writeln!(log_file, "{}", format_log_row(cfg.seed, row)) {
            write_failure.get_or_insert(e);
        }
        progress(row);
    })?;
    if let Some(e) = write_failure {
        return Err(io_err(&log_path, e));
    }
    let bytes = outcome.model.to_checkpoint(&outcome.norm)?.to_bytes()?;
    let ck_path = cfg.checkpoint_path();
    fs::write(&ck_path, &bytes).map_err(|e| io_err(&ck_path, e))?;
    let edges = outcome.model.edge_list();
    write_graph(&cfg.learned_graph_path(), cfg.seed, &edges)?;
    Ok(TrainReport {
        log: outcome.log,
        stopped_early: outcome.stopped_early,
        edges,
        checkpoint_bytes: bytes.len(),
    })
}

fn write_graph(path: &Path, seed: u64, edges: &[(usize, usize, f64)]) -> Result<(), CliError> {
    let text = format!("# gta seed={seed}\n{}", format_edge_list(edges));
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn load_model(cfg: &RunConfig) -> Result<(GtaModel, gta_core::data_io::NormalizerStats), CliError> {
    let path = cfg.checkpoint_path();
    if !path.is_file() {
        return Err(CliError::Data(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(GtaModel::from_checkpoint(&Checkpoint::load(&path)?)?)
}

/// Names of architecture fields where the checkpoint and `cfg` disagree.
pub fn architecture_mismatch(model: &GtaModel, cfg: &RunConfig) -> Vec<String> {
    let stored = model.config();
    let wanted = cfg.model_config(stored.num_nodes());
    let (s, w) = (&stored.forecaster, &wanted.forecaster);
    let pairs = [
        ("window", stored.window, wanted.window),
        ("label_len", s.label_len, w.label_len),
        ("levels", stored.encoder.levels, wanted.encoder.levels),
        ("d_model", s.d_model, w.d_model),
        ("heads", s.heads, w.heads),
        ("enc_layers", s.enc_layers, w.enc_layers),
        ("dec_layers", s.dec_layers, w.dec_layers),
        ("ff_width", s.ff_width, w.ff_width),
        ("max_len", s.max_len, w.max_len),
    ];
    pairs
        .iter()
        .filter(|(_, a, b)| a != b)
        .map(|(k, a, b)| format!("{k}: checkpoint {a}, config {b}"))
        .collect()
}

pub struct DetectReport {
    pub rows: usize,
    pub threshold: f64,
    pub flagged: usize,
    pub best: Option<MetricsReport>,
}

impl fmt::Display for DetectReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} scored steps, threshold {}, {} flagged", self.rows, self.threshold, self.flagged)?;
        if let Some(b) = &self.best {
            write!(f, "\n{b}")?;
        }
        Ok(())
    }
}

/// Scores every test step after the first window and writes the score CSV.
/// Without a configured threshold the best-F1 threshold on the test labels
/// is used.
pub fn cmd_detect(cfg: &RunConfig) -> Result<DetectReport, CliError> {
    let (model, norm) = load_model(cfg)?;
    let mismatch = architecture_mismatch(&model, cfg);
    if !mismatch.is_empty() {
        return Err(CliError::Usage(format!(
            "checkpoint architecture differs from config: {}",
            mismatch.join("; ")
        )));
    }
    let test = load_series(&cfg.test_path(), cfg.downsample)?;
    let scores = score_series(&model, &norm, &test, cfg.batch_size)?;
    let n = model.config().window;
    let gt = test.labels.as_ref().map(|l| l[n..].to_vec());
    let (threshold, best) = match (cfg.threshold, &gt) {
        (Some(t), _) => (t, None),
        (None, Some(gt)) => {
            let best = threshold_sweep(&scores, gt)?.best_f1();
            (best.threshold, Some(best))
        }
        (None, None) => {
            return Err(CliError::Usage(
                "test series has no labels; pass --threshold to label scores".into(),
            ))
        }
    };
    let preds = apply_threshold(&scores, threshold);
    let rows: Vec<ScoreRow> = scores
        .iter()
        .enumerate()
        .map(|(k, &score)| ScoreRow {
            timestamp: test.timestamps[n + k].clone(),
            score,
            gt_label: gt.as_ref().map(|g| g[k]),
            pred_label: preds[k],
        })
        .collect();
    ensure_dir(&cfg.out)?;
    let note = format!("gta detect seed={} threshold={threshold}", cfg.seed);
    write_scores(&cfg.scores_path(), &rows, Some(&note))?;
    Ok(DetectReport {
        rows: rows.len(),
        threshold,
        flagged: preds.iter().filter(|&&p| p == 1).count(),
        best,
    })
}

pub struct EvalReport {
    pub seed: u64,
    pub best_recall: MetricsReport,
    pub best_f1: MetricsReport,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# gta eval seed={}", self.seed)?;
        writeln!(f, "{}", self.best_recall)?;
        write!(f, "{}", self.best_f1)
    }
}

/// Sweeps every threshold over the score file and reports the best-recall
/// (`*`) and best-F1 (`**`) operating points.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport, CliError> {
    let path = cfg.scores_path();
    if !path.is_file() {
        return Err(CliError::Data(format!("score file {} does not exist", path.display())));
    }
    let rows = read_scores(&path)?;
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let gt = match rows.iter().map(|r| r.gt_label).collect::<Option<Vec<u8>>>() {
        Some(gt) if cfg.labels.is_none() => gt,
        _ => aligned_labels(cfg, &rows)?,
    };
    let sweep = threshold_sweep(&scores, &gt)?;
    Ok(EvalReport {
        seed: cfg.seed,
        best_recall: sweep.best_recall(),
        best_f1: sweep.best_f1(),
    })
}

/// Labels from the configured labeled series, matched to the score rows by
/// timestamp; the scored timestamps must be a contiguous run of the series.
fn aligned_labels(cfg: &RunConfig, rows: &[ScoreRow]) -> Result<Vec<u8>, CliError> {
    let path = cfg.labels.clone().unwrap_or_else(|| cfg.test_path());
    let series = load_series(&path, cfg.downsample)?;
    let labels = series
        .labels
        .ok_or_else(|| CliError::Data(format!("{} has no label column", path.display())))?;
    let first = rows.first().ok_or_else(|| CliError::Data("score file is empty".into()))?;
    let start = series
        .timestamps
        .iter()
        .position(|t| *t == first.timestamp)
        .ok_or_else(|| CliError::Data(format!("timestamp {} not in {}", first.timestamp, path.display())))?;
    if start + rows.len() > series.timestamps.len()
        || rows.iter().zip(&series.timestamps[start..]).any(|(r, t)| r.timestamp != *t)
    {
        return Err(CliError::Data(format!(
            "score rows are not aligned with the timestamps of {}",
            path.display()
        )));
    }
    Ok(labels[start..start + rows.len()].to_vec())
}

pub struct GraphReport {
    pub edges: Vec<(usize, usize, f64)>,
    pub recovery: Option<MetricsReport>,
}

impl fmt::Display for GraphReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", format_edge_list(&self.edges))?;
        write!(f, "{} edges", self.edges.len())?;
        if let Some(r) = &self.recovery {
            write!(
                f,
                "\nrecovery precision={:.4} recall={:.4} f1={:.4} tp={} fp={} fn={}",
                r.precision, r.recall, r.f1, r.tp, r.fp, r.fn_
            )?;
        }
        Ok(())
    }
}

/// Lists the learned edges of the checkpoint; compares them with the
/// planted graph when that file exists.
pub fn cmd_graph_report(cfg: &RunConfig) -> Result<GraphReport, CliError> {
    let (model, _) = load_model(cfg)?;
    let edges = model.edge_list();
    let planted_path = cfg.planted_path();
    let recovery = if planted_path.is_file() {
        let m = model.config().num_nodes();
        let planted: Vec<(usize, usize)> = read_edge_list(&planted_path)?
            .into_iter()
            .filter(|e| e.2 > 0.5)
            .map(|(s, d, _)| (s, d))
            .collect();
        let planted = AdjacencySample::from_edges(m, &planted)?;
        Some(edge_recovery_metrics(&model.adjacency(), &planted)?)
    } else {
        None
    };
    Ok(GraphReport { edges, recovery })
}

pub struct BenchRow {
    pub kind: AttentionKind,
    pub params: u128,
    pub mult_adds: u128,
    pub seconds: f64,
}

pub struct BenchReport {
    pub args: [u64; 6],
    pub rows: Vec<BenchRow>,
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, d, h, m, d1, d2] = self.args;
        writeln!(f, "n={n} d={d} h={h} m={m} d1={d1} d2={d2}")?;
        writeln!(f, "{:<20} {:>14} {:>16} {:>12}", "attention", "params", "mult-adds", "forward_ms")?;
        for (i, r) in self.rows.iter().enumerate() {
            write!(
                f,
                "{:<20} {:>14} {:>16} {:>12.3}",
                r.kind.label(),
                r.params,
                r.mult_adds,
                r.seconds * 1e3
            )?;
            if i + 1 < self.rows.len() {
                writeln!(f)?;
            }
        }
        Ok(())
    }
}

/// Closed-form counts of the three attention types plus the wall-clock time
/// of one forward pass of each on a random `[1, n, d]` input.
pub fn cmd_bench(cfg: &RunConfig) -> Result<BenchReport, CliError> {
    let args = [cfg.bench_n, cfg.bench_d, cfg.bench_h, cfg.bench_m, cfg.bench_d1, cfg.bench_d2];
    let [n, d, h, m, d1, d2] = args;
    if args[..4].contains(&0) {
        return Err(CliError::Usage("bench needs positive n, d, h and m".into()));
    }
    if d1 == 0 || d1 + d2 > d {
        return Err(CliError::Usage(format!("branch widths d1={d1}, d2={d2} do not fit d={d}")));
    }
    if n > m {
        return Err(CliError::Usage(format!("sequence length n={n} exceeds m={m}")));
    }
    let (nu, du, hu, mu) = (n as usize, d as usize, h as usize, m as usize);
    let mut rng = generator(cfg.seed);
    let mut store = ParamStore::new();
    let dot = MultiHead::new(&mut store, "bench.dot", du, hu, &mut rng)?;
    let global = GlobalAttention::new(&mut store, "bench.global", du, hu, mu, &mut rng)?;
    let split = BranchConfig {
        d1: d1 as usize,
        d2: d2 as usize,
        dc: (d - d1 - d2) as usize,
    };
    let mix = BranchMix::new(&mut store, "bench.mix", split, hu, mu, &mut rng)?;
    let data = (0..nu * du).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let input = Tensor::new(&[1, nu, du], data)?;
    let mut rows = Vec::new();
    for kind in AttentionKind::ALL {
        let c = complexity_report(kind, n, d, h, m, d1, d2);
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(input.clone());
        let start = Instant::now();
        let mut off = Dropout::off();
        match kind {
            AttentionKind::DotProduct => dot.forward(&mut tape, x, x, false, &mut off)?,
            AttentionKind::GlobalLearned => global.forward(&mut tape, x, false, &mut off)?,
            AttentionKind::BranchMix => mix.forward(&mut tape, x, false, &mut off)?,
        };
        rows.push(BenchRow {
            kind,
            params: c.params,
            mult_adds: c.mult_adds,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(BenchReport { args, rows })
}
