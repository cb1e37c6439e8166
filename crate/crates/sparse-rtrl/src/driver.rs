//! Orchestration behind the command-line interface: dataset generation,
//! the spiral training loop, the gradient verification sweep, the cost
//! benchmark, and report merging.
//!
//! Everything here is deterministic by construction — batches are sampled
//! by shuffling with a dedicated PRNG stream, batch reductions run in a
//! fixed order even when episodes execute in parallel, and floats are
//! written with shortest-round-trip formatting — so two runs with the same
//! flags produce byte-identical metrics files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cell::{cell_step, CellKind, CellParams, Readout, SurrogateConfig, STREAM_SHUFFLE};
use crate::counter::OpCounter;
use crate::engine::{
    backend_equivalence_check, forward_last_logits, rtrl_episode, Backend, EngineConfig,
    EpisodeResult, GradAccumulator, Sequence,
};
use crate::linalg::BitMask;
use crate::metrics::{
    compute_adjusted_iteration, cost_predict, measured_vs_predicted, savings_factor, CostModel,
    Method, SparsityStats,
};
use crate::optim::{adam_step, AdamState};
use crate::oracle::{bptt_gradient, finite_difference_gradient, rel_linf};
use crate::prng::Prng;
use crate::spiral::{
    generate_dataset, read_dataset, train_val_split, write_dataset, DatasetError, SpiralConfig,
    SpiralSample,
};

/// Anything a subcommand can fail with, split by exit code: usage mistakes
/// (bad flag values, unreadable inputs) exit 2, verification and runtime
/// failures exit 1.
#[derive(Debug)]
pub enum DriverError {
    Usage(String),
    Failed(String),
}

impl DriverError {
    pub fn exit_code(&self) -> u8 {
        match self {
            DriverError::Usage(_) => 2,
            DriverError::Failed(_) => 1,
        }
    }
}

impl std::fmt::Display for DriverError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DriverError::Usage(m) => write!(f, "usage error: {m}"),
            DriverError::Failed(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for DriverError {}

/// Whether the forward pass uses the event-generating threshold cell
/// (`on`) or the dense tanh cell (`off`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activity {
    On,
    Off,
}

impl std::str::FromStr for Activity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "on" => Ok(Activity::On),
            "off" => Ok(Activity::Off),
            other => Err(format!("activity must be `on` or `off`, got `{other}`")),
        }
    }
}

impl std::fmt::Display for Activity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activity::On => "on",
            Activity::Off => "off",
        })
    }
}

/// Influence-matrix backend as named on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendChoice {
    Dense,
    Masked,
    Sparse,
}

impl BackendChoice {
    pub fn to_backend(self) -> Backend {
        match self {
            BackendChoice::Dense => Backend::DenseReference,
            BackendChoice::Masked => Backend::MaskedDense,
            BackendChoice::Sparse => Backend::RowCompressed,
        }
    }
}

impl std::str::FromStr for BackendChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dense" => Ok(BackendChoice::Dense),
            "masked" => Ok(BackendChoice::Masked),
            "sparse" => Ok(BackendChoice::Sparse),
            other => Err(format!(
                "backend must be `dense`, `masked`, or `sparse`, got `{other}`"
            )),
        }
    }
}

impl std::fmt::Display for BackendChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackendChoice::Dense => "dense",
            BackendChoice::Masked => "masked",
            BackendChoice::Sparse => "sparse",
        })
    }
}

/// The full training configuration, embedded verbatim (as one JSON line)
/// in every file a run produces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub n: usize,
    pub n_in: usize,
    pub n_out: usize,
    pub t: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub omega: f64,
    pub activity: Activity,
    pub backend: BackendChoice,
    pub gamma: f64,
    pub epsilon: f64,
    pub lr: f64,
    pub repeats: usize,
    pub data: PathBuf,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n: 16,
            n_in: 2,
            n_out: 2,
            t: 17,
            batch_size: 32,
            iterations: 1700,
            seed: 1,
            omega: 0.0,
            activity: Activity::On,
            backend: BackendChoice::Sparse,
            gamma: 1.0,
            epsilon: 0.5,
            lr: 1e-3,
            repeats: 1,
            data: PathBuf::from("spirals.jsonl"),
            out: PathBuf::from("metrics.csv"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), DriverError> {
        let usage = |m: String| Err(DriverError::Usage(m));
        if self.n == 0 {
            return usage("--n must be at least 1".into());
        }
        if self.n_out < 2 {
            return usage("--n-out must be at least 2 for classification".into());
        }
        if self.t < 2 {
            return usage("--t must be at least 2".into());
        }
        if self.batch_size == 0 || self.iterations == 0 {
            return usage("--batch and --iters must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.omega) {
            return usage(format!("--omega must lie in [0, 1), got {}", self.omega));
        }
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.gamma) || !positive(self.epsilon) {
            return usage("--gamma and --epsilon must be positive".into());
        }
        if !positive(self.lr) {
            return usage(format!("--lr must be positive and finite, got {}", self.lr));
        }
        if self.repeats == 0 {
            return usage("--repeats must be at least 1".into());
        }
        Ok(())
    }

    /// Applies one `key=value` pair from a config file. Keys mirror the
    /// command-line flag names.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), DriverError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, DriverError>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e| {
                DriverError::Usage(format!("config key `{key}`: cannot parse `{value}`: {e}"))
            })
        }
        match key {
            "n" => self.n = parse(key, value)?,
            "n-in" => self.n_in = parse(key, value)?,
            "n-out" => self.n_out = parse(key, value)?,
            "t" => self.t = parse(key, value)?,
            "batch" => self.batch_size = parse(key, value)?,
            "iters" => self.iterations = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "omega" => self.omega = parse(key, value)?,
            "activity" => self.activity = parse(key, value)?,
            "backend" => self.backend = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "epsilon" => self.epsilon = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "repeats" => self.repeats = parse(key, value)?,
            "data" => self.data = PathBuf::from(value),
            "out" => self.out = PathBuf::from(value),
            other => {
                return Err(DriverError::Usage(format!("unknown config key `{other}`")));
            }
        }
        Ok(())
    }

    /// Two runs can be merged into one report when everything except the
    /// seed, repeat count, and file paths matches.
    pub fn compatible_with(&self, other: &RunConfig) -> bool {
        self.n == other.n
            && self.n_in == other.n_in
            && self.n_out == other.n_out
            && self.t == other.t
            && self.batch_size == other.batch_size
            && self.iterations == other.iterations
            && self.omega == other.omega
            && self.activity == other.activity
            && self.backend == other.backend
            && self.gamma == other.gamma
            && self.epsilon == other.epsilon
            && self.lr == other.lr
    }
}

/// Reads a flat `key = value` config file (blank lines and `#` comments
/// ignored); callers apply the pairs before command-line flags so that
/// flags win.
pub fn parse_config_file(path: &Path) -> Result<Vec<(String, String)>, DriverError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        DriverError::Usage(format!("cannot read config file {}: {e}", path.display()))
    })?;
    let mut pairs = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            DriverError::Usage(format!(
                "config file {} line {}: expected key=value",
                path.display(),
                idx + 1
            ))
        })?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// One line of the training time series. Column order is the file format.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
    pub alpha_mean: f64,
    pub beta_mean: f64,
    pub influence_density: f64,
    pub macs_influence: u64,
    pub macs_forward: u64,
    pub savings_factor: f64,
    pub compute_adjusted_iteration: f64,
}

pub const METRICS_HEADER: &str = "iteration,mean_loss,accuracy,alpha_mean,beta_mean,\
influence_density,macs_influence,macs_forward,savings_factor,compute_adjusted_iteration";

impl MetricsRow {
    fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.mean_loss,
            self.accuracy,
            self.alpha_mean,
            self.beta_mean,
            self.influence_density,
            self.macs_influence,
            self.macs_forward,
            self.savings_factor,
            self.compute_adjusted_iteration
        )
    }

    fn from_csv_line(line: &str, lineno: usize) -> Result<Self, DriverError> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(DriverError::Failed(format!(
                "metrics line {lineno}: expected 10 columns, got {}",
                fields.len()
            )));
        }
        fn num<T: std::str::FromStr>(s: &str, lineno: usize) -> Result<T, DriverError>
        where
            T::Err: std::fmt::Display,
        {
            s.parse().map_err(|e| {
                DriverError::Failed(format!("metrics line {lineno}: bad field `{s}`: {e}"))
            })
        }
        Ok(MetricsRow {
            iteration: num(fields[0], lineno)?,
            mean_loss: num(fields[1], lineno)?,
            accuracy: num(fields[2], lineno)?,
            alpha_mean: num(fields[3], lineno)?,
            beta_mean: num(fields[4], lineno)?,
            influence_density: num(fields[5], lineno)?,
            macs_influence: num(fields[6], lineno)?,
            macs_forward: num(fields[7], lineno)?,
            savings_factor: num(fields[8], lineno)?,
            compute_adjusted_iteration: num(fields[9], lineno)?,
        })
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        write!(out, "{b:02x}").unwrap();
    }
    out
}

fn sha256_hex_of_file(path: &Path) -> Result<String, DriverError> {
    let bytes = std::fs::read(path)
        .map_err(|e| DriverError::Usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Sample mean and standard error (sample std over √R); 0 for a single
/// value.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    assert!(!xs.is_empty(), "mean of an empty sample");
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct GenDataOutcome {
    pub path: PathBuf,
    pub sha256: String,
    pub count: usize,
}

pub fn run_gen_data(
    count: usize,
    t: usize,
    seed: u64,
    noise_sigma: f64,
    out: &Path,
) -> Result<GenDataOutcome, DriverError> {
    if count == 0 {
        return Err(DriverError::Usage("--count must be at least 1".into()));
    }
    if t < 2 {
        return Err(DriverError::Usage("--t must be at least 2".into()));
    }
    if noise_sigma < 0.0 {
        return Err(DriverError::Usage(
            "--noise-sigma must be nonnegative".into(),
        ));
    }
    let samples = generate_dataset(count, t, seed, &SpiralConfig { noise_sigma });
    write_dataset(out, &samples)
        .map_err(|e| DriverError::Failed(format!("cannot write {}: {e}", out.display())))?;
    Ok(GenDataOutcome {
        path: out.to_path_buf(),
        sha256: sha256_hex_of_file(out)?,
        count,
    })
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Outcome of one seed's training run.
#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub best_accuracy: f64,
    pub best_accuracy_iteration: usize,
    /// First iteration whose validation accuracy reached 0.90, if any.
    pub converged_iteration: Option<usize>,
    pub final_loss: f64,
    pub final_compute_adjusted_iteration: f64,
    pub total_macs_influence: u64,
    pub total_macs_forward: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AggregateSummary {
    pub best_accuracy_mean: f64,
    pub best_accuracy_stderr: f64,
    pub runs_converged: usize,
    pub converged_iteration_mean: Option<f64>,
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    config: &'a RunConfig,
    dataset_sha256: &'a str,
    runs: &'a [RunSummary],
    aggregate: &'a AggregateSummary,
}

#[derive(Debug)]
pub struct TrainRun {
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    pub summary: RunSummary,
    pub csv_path: PathBuf,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub runs: Vec<TrainRun>,
    pub aggregate: AggregateSummary,
    pub summary_path: PathBuf,
    pub dataset_sha256: String,
}

fn sequence_of(sample: &SpiralSample) -> Sequence {
    let inputs = sample.points.iter().map(|p| vec![p[0], p[1]]).collect();
    Sequence::classification(inputs, sample.label as usize)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn read_training_data(cfg: &RunConfig) -> Result<Vec<SpiralSample>, DriverError> {
    let samples = read_dataset(&cfg.data).map_err(|e| match e {
        DatasetError::Io(io) => {
            DriverError::Usage(format!("cannot read dataset {}: {io}", cfg.data.display()))
        }
        malformed => DriverError::Failed(malformed.to_string()),
    })?;
    if samples.is_empty() {
        return Err(DriverError::Usage(format!(
            "dataset {} is empty",
            cfg.data.display()
        )));
    }
    if let Some(bad) = samples.iter().position(|s| s.points.len() != cfg.t) {
        return Err(DriverError::Usage(format!(
            "dataset sample {bad} has {} timesteps but the run expects --t {}",
            samples[bad].points.len(),
            cfg.t
        )));
    }
    if cfg.n_in != 2 {
        return Err(DriverError::Usage(format!(
            "spiral points are planar; --n-in must be 2, got {}",
            cfg.n_in
        )));
    }
    if let Some(bad) = samples.iter().position(|s| (s.label as usize) >= cfg.n_out) {
        return Err(DriverError::Failed(format!(
            "dataset sample {bad} has label {} outside {} classes",
            samples[bad].label, cfg.n_out
        )));
    }
    Ok(samples)
}

fn train_single(
    cfg: &RunConfig,
    seed: u64,
    train_seqs: &[Sequence],
    val: &[(Vec<Vec<f64>>, usize)],
) -> Result<(Vec<MetricsRow>, RunSummary), DriverError> {
    let mut params = CellParams::init_random(cfg.n, cfg.n_in, cfg.omega, 0.5, seed);
    let mut readout = Readout::init_random(cfg.n_out, cfg.n, seed);
    let p = params.p();
    if params.param_mask.popcount() == 0 {
        return Err(DriverError::Usage(format!(
            "omega {} leaves no unmasked parameters",
            cfg.omega
        )));
    }
    let omega_tilde = params.param_mask.popcount() as f64 / p as f64;
    let kind = match cfg.activity {
        Activity::On => CellKind::Threshold,
        Activity::Off => CellKind::Tanh,
    };
    let surrogate = SurrogateConfig::new(cfg.gamma, cfg.epsilon);
    let engine_cfg = EngineConfig {
        kind,
        surrogate,
        backend: cfg.backend.to_backend(),
    };

    let mut adam_w = AdamState::new(p, cfg.lr);
    let readout_len = cfg.n_out * cfg.n + cfg.n_out;
    let mut adam_r = AdamState::new(readout_len, cfg.lr);
    let readout_mask = BitMask::ones(readout_len);

    let mut shuffle_rng = Prng::derive(seed, STREAM_SHUFFLE);
    let mut order: Vec<usize> = (0..train_seqs.len()).collect();
    let mut cursor = usize::MAX; // forces a shuffle before the first batch

    if cfg.batch_size > train_seqs.len() {
        return Err(DriverError::Usage(format!(
            "batch size {} exceeds the {} training sequences",
            cfg.batch_size,
            train_seqs.len()
        )));
    }

    let mut rows: Vec<MetricsRow> = Vec::with_capacity(cfg.iterations);
    let mut beta_series: Vec<f64> = Vec::with_capacity(cfg.iterations);

    for iter in 1..=cfg.iterations {
        if cursor > train_seqs.len() - cfg.batch_size {
            shuffle_rng.shuffle(&mut order);
            cursor = 0;
        }
        let batch = &order[cursor..cursor + cfg.batch_size];
        cursor += cfg.batch_size;

        let results: Vec<EpisodeResult> = batch
            .par_iter()
            .map(|&i| rtrl_episode(&params, &readout, &train_seqs[i], &engine_cfg))
            .collect();

        // Fixed-order reduction over the batch: gradients and losses are
        // summed in batch position order regardless of which thread ran
        // which episode.
        let mut grad = GradAccumulator::zeros(p, cfg.n_out, cfg.n);
        let mut stats = SparsityStats::new();
        let mut counter = OpCounter::new();
        let mut loss_sum = 0.0;
        for r in &results {
            grad.add(&r.grads);
            stats.merge(&r.stats);
            counter.merge(&r.counter);
            loss_sum += r.loss;
        }
        let scale = 1.0 / cfg.batch_size as f64;
        grad.scale(scale);
        let mean_loss = loss_sum * scale;
        if !mean_loss.is_finite() {
            return Err(DriverError::Failed(format!(
                "training aborted: non-finite loss {mean_loss} at iteration {iter}"
            )));
        }

        let mut w = params.to_flat();
        adam_step(&mut w, &grad.dldw, &params.param_mask, &mut adam_w);
        params.set_from_flat(&w);

        let mut rflat: Vec<f64> = readout.w_out.as_slice().to_vec();
        rflat.extend_from_slice(&readout.b_out);
        let mut rgrad: Vec<f64> = grad.readout_w.as_slice().to_vec();
        rgrad.extend_from_slice(&grad.readout_b);
        adam_step(&mut rflat, &rgrad, &readout_mask, &mut adam_r);
        readout
            .w_out
            .as_mut_slice()
            .copy_from_slice(&rflat[..cfg.n_out * cfg.n]);
        readout.b_out.copy_from_slice(&rflat[cfg.n_out * cfg.n..]);

        let correct = val
            .par_iter()
            .filter(|(inputs, label)| {
                argmax(&forward_last_logits(
                    &params, &readout, inputs, kind, &surrogate,
                )) == *label
            })
            .count();
        let accuracy = if val.is_empty() {
            0.0
        } else {
            correct as f64 / val.len() as f64
        };

        // With the tanh cell every derivative is alive, so the backward
        // sparsity column degenerates to 0 and the savings multiplier to
        // the parameter factor alone.
        let (beta_col, beta_tilde) = match cfg.activity {
            Activity::On => (stats.beta_mean(), stats.beta_tilde_mean()),
            Activity::Off => (0.0, 1.0),
        };
        beta_series.push(beta_tilde);

        rows.push(MetricsRow {
            iteration: iter,
            mean_loss,
            accuracy,
            alpha_mean: stats.alpha_mean(),
            beta_mean: beta_col,
            influence_density: stats.influence_density_mean(cfg.n, p),
            macs_influence: counter.macs_influence,
            macs_forward: counter.macs_forward,
            savings_factor: savings_factor(omega_tilde, beta_tilde),
            compute_adjusted_iteration: 0.0,
        });
    }

    let adjusted = compute_adjusted_iteration(&beta_series, omega_tilde);
    for (row, adj) in rows.iter_mut().zip(&adjusted) {
        row.compute_adjusted_iteration = *adj;
    }

    let mut best_accuracy = f64::NEG_INFINITY;
    let mut best_iter = 0;
    let mut converged = None;
    for row in &rows {
        if row.accuracy > best_accuracy {
            best_accuracy = row.accuracy;
            best_iter = row.iteration;
        }
        if converged.is_none() && row.accuracy >= 0.90 {
            converged = Some(row.iteration);
        }
    }
    let summary = RunSummary {
        seed,
        best_accuracy,
        best_accuracy_iteration: best_iter,
        converged_iteration: converged,
        final_loss: rows.last().unwrap().mean_loss,
        final_compute_adjusted_iteration: rows.last().unwrap().compute_adjusted_iteration,
        total_macs_influence: rows.iter().map(|r| r.macs_influence).sum(),
        total_macs_forward: rows.iter().map(|r| r.macs_forward).sum(),
    };
    Ok((rows, summary))
}

fn write_metrics_csv(
    path: &Path,
    config_json: &str,
    dataset_sha256: &str,
    rows: &[MetricsRow],
) -> Result<(), DriverError> {
    let mut text = String::new();
    writeln!(text, "# config: {config_json}").unwrap();
    writeln!(text, "# dataset_sha256: {dataset_sha256}").unwrap();
    writeln!(text, "{METRICS_HEADER}").unwrap();
    for row in rows {
        writeln!(text, "{}", row.to_csv_line()).unwrap();
    }
    std::fs::write(path, text)
        .map_err(|e| DriverError::Failed(format!("cannot write {}: {e}", path.display())))
}

/// Parses a metrics CSV produced by [`run_train`] back into its embedded
/// config, dataset hash, and rows.
pub fn parse_metrics_csv(path: &Path) -> Result<(RunConfig, String, Vec<MetricsRow>), DriverError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| DriverError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let mut config = None;
    let mut sha = None;
    let mut rows = Vec::new();
    let mut saw_header = false;
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if let Some(json) = line.strip_prefix("# config: ") {
            config = Some(serde_json::from_str::<RunConfig>(json).map_err(|e| {
                DriverError::Failed(format!("{}: bad embedded config: {e}", path.display()))
            })?);
        } else if let Some(h) = line.strip_prefix("# dataset_sha256: ") {
            sha = Some(h.to_string());
        } else if line.starts_with('#') || line.trim().is_empty() {
            continue;
        } else if !saw_header {
            if line != METRICS_HEADER {
                return Err(DriverError::Failed(format!(
                    "{}: unexpected header `{line}`",
                    path.display()
                )));
            }
            saw_header = true;
        } else {
            rows.push(MetricsRow::from_csv_line(line, lineno)?);
        }
    }
    let config = config.ok_or_else(|| {
        DriverError::Failed(format!("{}: missing `# config:` line", path.display()))
    })?;
    let sha = sha.ok_or_else(|| {
        DriverError::Failed(format!(
            "{}: missing `# dataset_sha256:` line",
            path.display()
        ))
    })?;
    Ok((config, sha, rows))
}

fn seed_csv_path(out: &Path, seed: u64) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ext = out
        .extension()
        .map(|e| format!(".{}", e.to_string_lossy()))
        .unwrap_or_default();
    out.with_file_name(format!("{stem}.seed{seed}{ext}"))
}

const AGGREGATE_COLUMNS: [&str; 9] = [
    "mean_loss",
    "accuracy",
    "alpha_mean",
    "beta_mean",
    "influence_density",
    "macs_influence",
    "macs_forward",
    "savings_factor",
    "compute_adjusted_iteration",
];

fn metric_value(row: &MetricsRow, column: &str) -> f64 {
    match column {
        "mean_loss" => row.mean_loss,
        "accuracy" => row.accuracy,
        "alpha_mean" => row.alpha_mean,
        "beta_mean" => row.beta_mean,
        "influence_density" => row.influence_density,
        "macs_influence" => row.macs_influence as f64,
        "macs_forward" => row.macs_forward as f64,
        "savings_factor" => row.savings_factor,
        "compute_adjusted_iteration" => row.compute_adjusted_iteration,
        other => unreachable!("unknown metrics column {other}"),
    }
}

fn write_aggregate_csv(
    path: &Path,
    config_json: &str,
    dataset_sha256: &str,
    runs: &[Vec<MetricsRow>],
) -> Result<(), DriverError> {
    let mut text = String::new();
    writeln!(text, "# config: {config_json}").unwrap();
    writeln!(text, "# dataset_sha256: {dataset_sha256}").unwrap();
    writeln!(text, "# aggregated over {} runs", runs.len()).unwrap();
    let mut header = String::from("iteration");
    for col in AGGREGATE_COLUMNS {
        write!(header, ",{col}_mean,{col}_stderr").unwrap();
    }
    writeln!(text, "{header}").unwrap();
    let iterations = runs[0].len();
    for i in 0..iterations {
        let mut line = format!("{}", runs[0][i].iteration);
        for col in AGGREGATE_COLUMNS {
            let values: Vec<f64> = runs.iter().map(|r| metric_value(&r[i], col)).collect();
            let (mean, stderr) = mean_stderr(&values);
            write!(line, ",{mean},{stderr}").unwrap();
        }
        writeln!(text, "{line}").unwrap();
    }
    std::fs::write(path, text)
        .map_err(|e| DriverError::Failed(format!("cannot write {}: {e}", path.display())))
}

pub fn run_train(cfg: &RunConfig) -> Result<TrainOutcome, DriverError> {
    cfg.validate()?;
    let samples = read_training_data(cfg)?;
    let dataset_sha256 = sha256_hex_of_file(&cfg.data)?;
    let (train_samples, val_samples) = train_val_split(&samples);
    let train_seqs: Vec<Sequence> = train_samples.iter().map(sequence_of).collect();
    let val: Vec<(Vec<Vec<f64>>, usize)> = val_samples
        .iter()
        .map(|s| {
            let inputs = s.points.iter().map(|p| vec![p[0], p[1]]).collect();
            (inputs, s.label as usize)
        })
        .collect();

    if let Some(dir) = cfg.out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| {
                DriverError::Failed(format!("cannot create {}: {e}", dir.display()))
            })?;
        }
    }

    let mut runs = Vec::with_capacity(cfg.repeats);
    let mut all_rows: Vec<Vec<MetricsRow>> = Vec::with_capacity(cfg.repeats);
    for r in 0..cfg.repeats {
        let seed = cfg.seed + r as u64;
        let (rows, summary) = train_single(cfg, seed, &train_seqs, &val)?;
        let csv_path = if cfg.repeats == 1 {
            cfg.out.clone()
        } else {
            seed_csv_path(&cfg.out, seed)
        };
        let mut run_cfg = cfg.clone();
        run_cfg.seed = seed;
        let config_json = serde_json::to_string(&run_cfg).expect("config serializes");
        write_metrics_csv(&csv_path, &config_json, &dataset_sha256, &rows)?;
        runs.push(TrainRun {
            seed,
            rows: rows.clone(),
            summary,
            csv_path,
        });
        all_rows.push(rows);
    }

    if cfg.repeats > 1 {
        let config_json = serde_json::to_string(cfg).expect("config serializes");
        write_aggregate_csv(&cfg.out, &config_json, &dataset_sha256, &all_rows)?;
    }

    let best: Vec<f64> = runs.iter().map(|r| r.summary.best_accuracy).collect();
    let (best_mean, best_stderr) = mean_stderr(&best);
    let converged: Vec<f64> = runs
        .iter()
        .filter_map(|r| r.summary.converged_iteration.map(|i| i as f64))
        .collect();
    let aggregate = AggregateSummary {
        best_accuracy_mean: best_mean,
        best_accuracy_stderr: best_stderr,
        runs_converged: converged.len(),
        converged_iteration_mean: if converged.is_empty() {
            None
        } else {
            Some(converged.iter().sum::<f64>() / converged.len() as f64)
        },
    };

    let summary_path = cfg.out.with_extension("summary.json");
    let summaries: Vec<RunSummary> = runs.iter().map(|r| r.summary.clone()).collect();
    let file = SummaryFile {
        config: cfg,
        dataset_sha256: &dataset_sha256,
        runs: &summaries,
        aggregate: &aggregate,
    };
    let json = serde_json::to_string_pretty(&file).expect("summary serializes");
    std::fs::write(&summary_path, json + "\n").map_err(|e| {
        DriverError::Failed(format!("cannot write {}: {e}", summary_path.display()))
    })?;

    Ok(TrainOutcome {
        runs,
        aggregate,
        summary_path,
        dataset_sha256,
    })
}

// ---------------------------------------------------------------------------
// grad-check
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct GradCheckReport {
    pub equivalence_cases: usize,
    pub bptt_cases: usize,
    pub fd_cases: usize,
    pub zero_grad_cases: usize,
    pub failures: Vec<String>,
}

fn random_sequence(rng: &mut Prng, t: usize, n_in: usize, n_out: usize) -> Sequence {
    let inputs = (0..t)
        .map(|_| (0..n_in).map(|_| rng.uniform(-1.0, 1.0)).collect())
        .collect();
    let label = rng.next_below(n_out as u64) as usize;
    Sequence::classification(inputs, label)
}

fn grad_fields_within(
    reference: &GradAccumulator,
    candidate: &GradAccumulator,
    tol: f64,
) -> Option<(String, f64)> {
    for (name, a, b) in [
        ("dldw", &reference.dldw, &candidate.dldw),
        (
            "readout_w",
            &reference.readout_w.as_slice().to_vec(),
            &candidate.readout_w.as_slice().to_vec(),
        ),
        ("readout_b", &reference.readout_b, &candidate.readout_b),
    ] {
        let err = rel_linf(a, b);
        if err > tol {
            return Some((name.to_string(), err));
        }
    }
    None
}

/// Sweeps (n, T, ω) × seeds and checks, per case: the three backends agree
/// bit-for-bit, reverse-mode replay matches within 1e-8 for both cells, and
/// (for the smallest network, where it is cheap) central differences match
/// the tanh gradient within 1e-5. Also checks that a fully pruned network
/// produces exactly zero gradients.
pub fn run_grad_check(seeds: usize, base_seed: u64) -> GradCheckReport {
    let mut report = GradCheckReport {
        equivalence_cases: 0,
        bptt_cases: 0,
        fd_cases: 0,
        zero_grad_cases: 0,
        failures: Vec::new(),
    };
    let surrogate = SurrogateConfig::default();
    let mut case_rng = Prng::new(base_seed);
    for n in [4usize, 8, 16] {
        for t in [1usize, 5, 17] {
            for omega in [0.0f64, 0.5, 0.9] {
                for _ in 0..seeds {
                    let s = case_rng.next_u64();
                    let ctx = format!("n={n} t={t} omega={omega} seed={s}");
                    let params = CellParams::init_random(n, 2, omega, 0.5, s);
                    let readout = Readout::init_random(2, n, s.wrapping_add(1));
                    let mut data_rng = Prng::derive(s, 7);
                    let seq = random_sequence(&mut data_rng, t, 2, 2);

                    for kind in [CellKind::Threshold, CellKind::Tanh] {
                        report.equivalence_cases += 1;
                        if let Err(e) =
                            backend_equivalence_check(&params, &readout, &seq, kind, &surrogate)
                        {
                            report
                                .failures
                                .push(format!("equivalence {kind:?} {ctx}: {e}"));
                        }

                        report.bptt_cases += 1;
                        let cfg = EngineConfig {
                            kind,
                            surrogate,
                            backend: Backend::RowCompressed,
                        };
                        let forward = rtrl_episode(&params, &readout, &seq, &cfg);
                        let reverse = bptt_gradient(&params, &readout, &seq, kind, &surrogate);
                        if let Some((field, err)) =
                            grad_fields_within(&reverse.grads, &forward.grads, 1e-8)
                        {
                            report.failures.push(format!(
                                "reverse-mode {kind:?} {ctx}: {field} off by {err:.3e}"
                            ));
                        }

                        if kind == CellKind::Tanh && n == 4 {
                            report.fd_cases += 1;
                            let fd =
                                finite_difference_gradient(&params, &readout, &seq, kind, 1e-5)
                                    .expect("tanh supports finite differences");
                            let err = rel_linf(&forward.grads.dldw, &fd);
                            if err > 1e-5 {
                                report.failures.push(format!(
                                    "finite-difference {ctx}: dldw off by {err:.3e}"
                                ));
                            }
                        }
                    }
                }
            }
        }
        // A fully pruned network must produce exactly zero gradients.
        report.zero_grad_cases += 1;
        let params = CellParams::init_random(n, 2, 1.0, 0.5, base_seed);
        let readout = Readout::init_random(2, n, base_seed);
        let mut data_rng = Prng::derive(base_seed, 11);
        let seq = random_sequence(&mut data_rng, 5, 2, 2);
        let cfg = EngineConfig::default();
        let result = rtrl_episode(&params, &readout, &seq, &cfg);
        if result.grads.dldw.iter().any(|&g| g != 0.0) {
            report
                .failures
                .push(format!("fully pruned n={n}: nonzero recurrent gradient"));
        }
    }
    report
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

pub struct BenchConfig {
    pub n: usize,
    pub t: usize,
    pub seed: u64,
    pub episodes: usize,
    /// Wall-clock timing repetitions; the minimum is reported.
    pub wall_repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n: 16,
            t: 17,
            seed: 7,
            episodes: 64,
            wall_repeats: 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub omega: f64,
    pub activity: Activity,
    pub backend: Backend,
    pub epsilon: f64,
    pub alpha_tilde: f64,
    pub beta_tilde: f64,
    pub omega_tilde: f64,
    pub macs_influence: u64,
    pub macs_forward: u64,
    pub peak_stored_entries: u64,
    /// This backend's influence MACs over the dense reference's, same
    /// configuration. Exactly 1.0 for the dense reference itself.
    pub influence_ratio_vs_dense: f64,
    /// Measured influence MACs over the per-step analytic prediction.
    pub measured_vs_predicted: f64,
    /// Analytic per-step influence cost at the measured densities.
    pub predicted_macs_per_step: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct MultiplierRow {
    pub omega_tilde: f64,
    pub beta_tilde: f64,
    pub measured_ratio: f64,
    /// The headline multiplier ω̃²·β̃² at the measured densities.
    pub predicted_ratio: f64,
}

#[derive(Debug)]
pub struct BenchReport {
    pub n: usize,
    pub t: usize,
    pub episodes: usize,
    pub rows: Vec<BenchRow>,
    pub multipliers: Vec<MultiplierRow>,
}

/// Runs the probe episodes once and returns every pre-activation magnitude,
/// for tuning the surrogate support width. The forward trajectory does not
/// depend on ε, so any surrogate config sees the same |v| distribution.
fn collect_abs_preactivations(
    params: &CellParams,
    seqs: &[Sequence],
    surrogate: &SurrogateConfig,
) -> Vec<f64> {
    let mut vs = Vec::new();
    let mut scratch = OpCounter::new();
    for seq in seqs {
        let mut a_prev = vec![0.0; params.n];
        for x in &seq.inputs {
            let state = cell_step(params, &a_prev, x, surrogate, &mut scratch);
            vs.extend(state.v.iter().map(|v| v.abs()));
            a_prev = state.a;
        }
    }
    vs
}

/// Chooses ε so that as close to half of the probe's unit-steps as possible
/// keep a live slope: H′ vanishes at |v| ≥ 2ε, so the cut 2ε is placed
/// between two distinct sorted magnitudes with half the values below it.
/// A plain median fails here because pruning can silence whole units, whose
/// pre-activation is then −θ every step — a tie block that the cut must
/// step around rather than land inside.
fn tune_epsilon_for_half_live(params: &CellParams, seqs: &[Sequence]) -> f64 {
    let mut vs = collect_abs_preactivations(params, seqs, &SurrogateConfig::default());
    assert!(!vs.is_empty(), "probe produced no pre-activations");
    vs.sort_by(|a, b| a.partial_cmp(b).expect("pre-activations are finite"));
    let n = vs.len();
    let target = n as f64 / 2.0;
    // All-live is always achievable: 2ε above the largest magnitude.
    let mut best_cut = vs[n - 1] + 1.0;
    let mut best_err = (n as f64 - target).abs();
    for i in 0..n - 1 {
        if vs[i] < vs[i + 1] {
            let err = ((i + 1) as f64 - target).abs();
            if err < best_err {
                best_err = err;
                best_cut = 0.5 * (vs[i] + vs[i + 1]);
            }
        }
    }
    0.5 * best_cut
}

/// Builds the synthetic benchmark network: the same weight draw as random
/// initialization, but with the kept parameters spread evenly across rows
/// (each row keeps ⌊kept/n⌋ or ⌈kept/n⌉ slots, positions uniform within the
/// row). The closed-form cost multipliers describe a network whose per-unit
/// workload is homogeneous; a fully random mask at heavy pruning hands some
/// rows triple the slots of others, and because a unit's pre-activation
/// spread grows with its slot count, the tuned live set then over-selects
/// the thin rows and drags the measured work below what the model predicts.
fn bench_params(n: usize, n_in: usize, omega: f64, seed: u64) -> CellParams {
    let full = CellParams::init_random(n, n_in, 0.0, 0.0, seed);
    let m = full.m();
    let p = full.p();
    let kept = p - (omega * p as f64).round() as usize;

    let mut mask_rng = Prng::derive(seed, 6);
    let mut extras: Vec<usize> = (0..n).collect();
    mask_rng.shuffle(&mut extras);
    let mut mask = BitMask::zeros(p);
    for k in 0..n {
        let row_kept = kept / n + usize::from(extras[k] < kept % n);
        let mut slots: Vec<usize> = (0..m).collect();
        mask_rng.shuffle(&mut slots);
        for &j in &slots[..row_kept] {
            mask.set(k * m + j, true);
        }
    }
    CellParams::new(full.w_rec, full.w_in, full.bias, vec![0.0; n], mask)
}

pub fn run_bench(cfg: &BenchConfig) -> BenchReport {
    // The probe workload drives the network with i.i.d. per-step inputs,
    // loud enough that units fire and every pre-activation varies from
    // step to step. Smooth or quiet inputs would leave pruned-input units
    // at a constant pre-activation (no ε can split a point mass in half)
    // and would correlate consecutive live sets, which the headline
    // β̃²·ω̃² multiplier does not model.
    let mut data_rng = Prng::derive(cfg.seed, 5);
    let seqs: Vec<Sequence> = (0..cfg.episodes)
        .map(|_| {
            let inputs = (0..cfg.t)
                .map(|_| (0..2).map(|_| data_rng.uniform(-8.0, 8.0)).collect())
                .collect();
            let label = data_rng.next_below(2) as usize;
            Sequence::classification(inputs, label)
        })
        .collect();
    let mut rows = Vec::new();

    for &omega in &[0.0, 0.5, 0.8, 0.9] {
        for activity in [Activity::On, Activity::Off] {
            // θ = 0 puts the firing threshold at the centre of the
            // symmetric pre-activation distribution, so even heavily
            // pruned networks fire roughly half the time and recurrent
            // drive reaches the units whose input weights were masked.
            let params = bench_params(cfg.n, 2, omega, cfg.seed);
            let readout = Readout::init_random(2, cfg.n, cfg.seed);
            let omega_tilde = params.param_mask.popcount() as f64 / params.p() as f64;
            let (kind, epsilon) = match activity {
                Activity::On => (
                    CellKind::Threshold,
                    tune_epsilon_for_half_live(&params, &seqs),
                ),
                Activity::Off => (CellKind::Tanh, SurrogateConfig::default().epsilon),
            };
            let surrogate = SurrogateConfig::new(1.0, epsilon);

            let mut dense_macs = 0u64;
            for backend in [
                Backend::DenseReference,
                Backend::MaskedDense,
                Backend::RowCompressed,
            ] {
                let engine_cfg = EngineConfig {
                    kind,
                    surrogate,
                    backend,
                };
                let mut wall_best = f64::INFINITY;
                let mut results: Vec<EpisodeResult> = Vec::new();
                for _ in 0..cfg.wall_repeats.max(1) {
                    let start = Instant::now();
                    let pass: Vec<EpisodeResult> = seqs
                        .iter()
                        .map(|seq| rtrl_episode(&params, &readout, seq, &engine_cfg))
                        .collect();
                    wall_best = wall_best.min(start.elapsed().as_secs_f64());
                    results = pass;
                }

                let mut counter = OpCounter::new();
                let mut stats = SparsityStats::new();
                let mut measured_sum = 0u64;
                let mut predicted_sum = 0.0;
                for r in &results {
                    counter.merge(&r.counter);
                    stats.merge(&r.stats);
                    let model = CostModel::new(
                        cfg.n,
                        2,
                        params.p(),
                        cfg.t,
                        (1.0 - r.stats.alpha_mean()).max(f64::MIN_POSITIVE),
                        r.stats.beta_tilde_mean().max(f64::MIN_POSITIVE),
                        omega_tilde.max(f64::MIN_POSITIVE),
                    );
                    let mvp = measured_vs_predicted(&r.counter, &r.stats, &model);
                    measured_sum += mvp.measured;
                    predicted_sum += mvp.predicted;
                }

                let alpha_tilde = 1.0 - stats.alpha_mean();
                let beta_tilde = match activity {
                    Activity::On => stats.beta_tilde_mean(),
                    Activity::Off => 1.0,
                };
                let model = CostModel::new(
                    cfg.n,
                    2,
                    params.p(),
                    cfg.t,
                    alpha_tilde.max(f64::MIN_POSITIVE),
                    beta_tilde.max(f64::MIN_POSITIVE),
                    omega_tilde.max(f64::MIN_POSITIVE),
                );
                let predicted_per_step = cost_predict(&model, Method::RtrlBoth).1;

                if backend == Backend::DenseReference {
                    dense_macs = counter.macs_influence;
                }
                let ratio = if dense_macs == 0 {
                    if counter.macs_influence == 0 {
                        1.0
                    } else {
                        f64::INFINITY
                    }
                } else {
                    counter.macs_influence as f64 / dense_macs as f64
                };
                let mvp_ratio = if predicted_sum == 0.0 {
                    if measured_sum == 0 {
                        1.0
                    } else {
                        f64::INFINITY
                    }
                } else {
                    measured_sum as f64 / predicted_sum
                };

                rows.push(BenchRow {
                    omega,
                    activity,
                    backend,
                    epsilon,
                    alpha_tilde,
                    beta_tilde,
                    omega_tilde,
                    macs_influence: counter.macs_influence,
                    macs_forward: counter.macs_forward,
                    peak_stored_entries: counter.peak_stored_influence_entries,
                    influence_ratio_vs_dense: ratio,
                    measured_vs_predicted: mvp_ratio,
                    predicted_macs_per_step: predicted_per_step,
                    wall_seconds: wall_best,
                });
            }
        }
    }

    // The two headline multiplier examples: full parameter density at half
    // backward density, and one-in-five parameter density at half backward
    // density, both read off the compressed backend's measured ratios.
    let mut multipliers = Vec::new();
    for (omega_target, _expected) in [(0.0, 0.25), (0.8, 0.01)] {
        if let Some(row) = rows.iter().find(|r| {
            r.omega == omega_target
                && r.activity == Activity::On
                && r.backend == Backend::RowCompressed
        }) {
            multipliers.push(MultiplierRow {
                omega_tilde: row.omega_tilde,
                beta_tilde: row.beta_tilde,
                measured_ratio: row.influence_ratio_vs_dense,
                predicted_ratio: savings_factor(row.omega_tilde, row.beta_tilde),
            });
        }
    }

    BenchReport {
        n: cfg.n,
        t: cfg.t,
        episodes: cfg.episodes,
        rows,
        multipliers,
    }
}

/// Renders the bench report as a CSV-with-comments text block and, when a
/// path is given, writes it there.
pub fn write_bench_report(report: &BenchReport, out: Option<&Path>) -> Result<String, DriverError> {
    let mut text = String::new();
    writeln!(
        text,
        "# influence-recursion cost accounting: n={} t={} episodes={}",
        report.n, report.t, report.episodes
    )
    .unwrap();
    writeln!(
        text,
        "omega,activity,backend,epsilon,alpha_tilde,beta_tilde,omega_tilde,\
macs_influence,macs_forward,peak_stored_entries,influence_ratio_vs_dense,\
measured_vs_predicted,predicted_macs_per_step,wall_seconds"
    )
    .unwrap();
    for r in &report.rows {
        writeln!(
            text,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.omega,
            r.activity,
            r.backend.name(),
            r.epsilon,
            r.alpha_tilde,
            r.beta_tilde,
            r.omega_tilde,
            r.macs_influence,
            r.macs_forward,
            r.peak_stored_entries,
            r.influence_ratio_vs_dense,
            r.measured_vs_predicted,
            r.predicted_macs_per_step,
            r.wall_seconds
        )
        .unwrap();
    }
    for m in &report.multipliers {
        writeln!(
            text,
            "# multiplier: omega_tilde={:.3} beta_tilde={:.3} measured_ratio={:.5} \
omega_tilde^2*beta_tilde^2={:.5}",
            m.omega_tilde, m.beta_tilde, m.measured_ratio, m.predicted_ratio
        )
        .unwrap();
    }
    if let Some(path) = out {
        std::fs::write(path, &text)
            .map_err(|e| DriverError::Failed(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(text)
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct ReportOutcome {
    pub panels: Vec<PathBuf>,
    pub runs_merged: usize,
}

struct Panel {
    file: &'static str,
    x_header: &'static str,
    y_header: &'static str,
    x: fn(&MetricsRow) -> f64,
    y: fn(&MetricsRow) -> f64,
    /// Averaged x across runs (for the compute-adjusted axis) or taken
    /// from the first run (plain iteration axis).
    x_is_averaged: bool,
}

const PANELS: [Panel; 4] = [
    Panel {
        file: "panel_loss_vs_iteration.csv",
        x_header: "iteration",
        y_header: "mean_loss",
        x: |r| r.iteration as f64,
        y: |r| r.mean_loss,
        x_is_averaged: false,
    },
    Panel {
        file: "panel_loss_vs_compute_adjusted.csv",
        x_header: "compute_adjusted_iteration",
        y_header: "mean_loss",
        x: |r| r.compute_adjusted_iteration,
        y: |r| r.mean_loss,
        x_is_averaged: true,
    },
    Panel {
        file: "panel_alpha_vs_iteration.csv",
        x_header: "iteration",
        y_header: "alpha_mean",
        x: |r| r.iteration as f64,
        y: |r| r.alpha_mean,
        x_is_averaged: false,
    },
    Panel {
        file: "panel_influence_density_vs_iteration.csv",
        x_header: "iteration",
        y_header: "influence_density",
        x: |r| r.iteration as f64,
        y: |r| r.influence_density,
        x_is_averaged: false,
    },
];

/// Merges per-seed metrics files from [`run_train`] into four plot-ready
/// panel CSVs (mean and standard error across runs). All inputs must share
/// a config (up to seed) and the same dataset.
pub fn run_report(inputs: &[PathBuf], out_dir: &Path) -> Result<ReportOutcome, DriverError> {
    if inputs.is_empty() {
        return Err(DriverError::Usage(
            "report needs at least one metrics file".into(),
        ));
    }
    let mut parsed = Vec::with_capacity(inputs.len());
    for path in inputs {
        parsed.push((path, parse_metrics_csv(path)?));
    }
    let (first_path, (first_cfg, first_sha, first_rows)) = (&parsed[0].0, &parsed[0].1);
    for (path, (cfg, sha, rows)) in &parsed[1..] {
        if !cfg.compatible_with(first_cfg) {
            return Err(DriverError::Failed(format!(
                "{} and {} were produced by incompatible configs",
                first_path.display(),
                path.display()
            )));
        }
        if sha != first_sha {
            return Err(DriverError::Failed(format!(
                "{} and {} were trained on different datasets",
                first_path.display(),
                path.display()
            )));
        }
        if rows.len() != first_rows.len() {
            return Err(DriverError::Failed(format!(
                "{} has {} rows but {} has {}",
                first_path.display(),
                first_rows.len(),
                path.display(),
                rows.len()
            )));
        }
    }

    std::fs::create_dir_all(out_dir)
        .map_err(|e| DriverError::Failed(format!("cannot create {}: {e}", out_dir.display())))?;
    let config_json = serde_json::to_string(first_cfg).expect("config serializes");
    let runs: Vec<&Vec<MetricsRow>> = parsed.iter().map(|(_, (_, _, rows))| rows).collect();

    let mut panels = Vec::new();
    for panel in &PANELS {
        let mut text = String::new();
        writeln!(text, "# config: {config_json}").unwrap();
        writeln!(text, "# dataset_sha256: {first_sha}").unwrap();
        writeln!(text, "# aggregated over {} runs", runs.len()).unwrap();
        writeln!(
            text,
            "{},{}_mean,{}_stderr",
            panel.x_header, panel.y_header, panel.y_header
        )
        .unwrap();
        for i in 0..first_rows.len() {
            let x = if panel.x_is_averaged {
                let xs: Vec<f64> = runs.iter().map(|r| (panel.x)(&r[i])).collect();
                mean_stderr(&xs).0
            } else {
                (panel.x)(&runs[0][i])
            };
            let ys: Vec<f64> = runs.iter().map(|r| (panel.y)(&r[i])).collect();
            let (mean, stderr) = mean_stderr(&ys);
            writeln!(text, "{x},{mean},{stderr}").unwrap();
        }
        let path = out_dir.join(panel.file);
        std::fs::write(&path, text)
            .map_err(|e| DriverError::Failed(format!("cannot write {}: {e}", path.display())))?;
        panels.push(path);
    }

    Ok(ReportOutcome {
        panels,
        runs_merged: parsed.len(),
    })
}
