//! Generation, training, evaluation and comparison drivers behind the CLI.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::datagen::{self, augmentation_count, inject_augmentation, normalize, AugmentConfig, Dataset, DatagenError, NormStats, NormalizedSample, SampleRecord};
use crate::exec::Exec;
use crate::model::{default_caps, postprocess, HeadKind, Model, ModelError, QuantilePrediction};
use crate::seed;
use crate::tensor::{Graph, Tensor, TensorError};
use crate::train::{self, EpochLog, TrainConfig, TrainError};
use crate::verify::{self, MetricsReport, ThresholdRow, VerifyError, BAND_EDGES, DEFAULT_SPREADS};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Data(#[from] DatagenError),
    #[error("{0}")]
    Model(#[from] ModelError),
    #[error("{0}")]
    Train(#[from] TrainError),
    #[error("{0}")]
    Verify(#[from] VerifyError),
    #[error("{0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Tensor(#[from] TensorError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("output directory {0} exists and is not empty (use --force)")]
    Exists(PathBuf),
    #[error("missing oracle data: {0}")]
    MissingOracle(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl ExperimentError {
    /// Stable machine-readable category.
    pub fn category(&self) -> &'static str {
        match self {
            ExperimentError::Config(_) | ExperimentError::Invalid(_) => "config",
            ExperimentError::Data(_) => "data",
            ExperimentError::Model(_) | ExperimentError::Tensor(_) => "model",
            ExperimentError::Train(_) => "train",
            ExperimentError::Verify(_) => "verify",
            ExperimentError::Checkpoint(_) => "checkpoint",
            ExperimentError::Shape(_) => "shape",
            ExperimentError::Exists(_) => "exists",
            ExperimentError::MissingOracle(_) => "oracle",
            ExperimentError::Io { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    io(path, fs::write(path, text))
}

fn mkdir(path: &Path) -> Result<()> {
    io(path, fs::create_dir_all(path))
}

/// A contingency threshold: fixed mm/day or a marginal oracle quantile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdSpec {
    Fixed(f64),
    Oracle(f64),
}

impl ThresholdSpec {
    /// `"20"` → 20 mm/day, `"T999"` → marginal quantile at 0.999.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || ExperimentError::Invalid(format!("threshold `{s}` is neither a number nor T<digits>"));
        if let Some(d) = s.strip_prefix('T') {
            if d.is_empty() || !d.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            let level: f64 = format!("0.{d}").parse().map_err(|_| bad())?;
            return Ok(ThresholdSpec::Oracle(level));
        }
        let v: f64 = s.parse().map_err(|_| bad())?;
        if !(v > 0.0) || !v.is_finite() {
            return Err(bad());
        }
        Ok(ThresholdSpec::Fixed(v))
    }

    pub fn resolve(self, data: &Dataset) -> Result<f64> {
        match self {
            ThresholdSpec::Fixed(v) => Ok(v),
            ThresholdSpec::Oracle(level) => data
                .oracle_marginal
                .iter()
                .find(|m| (m.level - level).abs() < 1e-12)
                .map(|m| m.threshold_mm)
                .ok_or_else(|| ExperimentError::MissingOracle(format!("no marginal oracle quantile at level {level}"))),
        }
    }
}

/// Resolves labelled thresholds against `data`.
pub fn resolve_thresholds(labels: &[String], data: &Dataset) -> Result<Vec<(String, f64)>> {
    labels
        .iter()
        .map(|l| Ok((l.clone(), ThresholdSpec::parse(l)?.resolve(data)?)))
        .collect()
}

/// Predictions of many samples stacked row-wise into one field.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled {
    pub pred: QuantilePrediction,
    pub obs: Vec<f64>,
    pub mask: Vec<f64>,
    pub n_samples: usize,
}

fn stack(per_sample: Vec<QuantilePrediction>, obs: Vec<&[f64]>, masks: Vec<&[f64]>) -> Result<Pooled> {
    let n_samples = per_sample.len();
    let first = per_sample
        .first()
        .ok_or_else(|| ExperimentError::Invalid("no samples to evaluate".into()))?;
    let (levels, rows, cols) = (first.levels.clone(), first.rows, first.cols);
    let k = levels.len();
    let mut values = Vec::with_capacity(k * rows * cols * n_samples);
    for j in 0..k {
        for p in &per_sample {
            values.extend_from_slice(p.level(j));
        }
    }
    Ok(Pooled {
        pred: QuantilePrediction::new(levels, rows * n_samples, cols, values)?,
        obs: obs.concat(),
        mask: masks.concat(),
        n_samples,
    })
}

/// Caps per output: the deterministic head uses the lower cap.
pub fn caps_for(model: &Model, levels: &[f64]) -> Vec<f64> {
    if model.head.is_quantile() {
        default_caps(levels)
    } else {
        vec![600.0]
    }
}

/// Eval-mode predictions in mm/day for `records`, stacked.
pub fn predict_pooled(model: &Model, records: &[&SampleRecord], stats: &NormStats, exec: Exec) -> Result<Pooled> {
    let preds = exec
        .map(records, |r| -> Result<QuantilePrediction> {
            let x = stats.normalize_input(&r.coarse)?;
            let q = model.predict_quantiles(&x)?;
            Ok(postprocess(&q, stats, &caps_for(model, &q.levels))?)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    stack(
        preds,
        records.iter().map(|r| r.target.as_slice()).collect(),
        records.iter().map(|r| r.mask.as_slice()).collect(),
    )
}

/// Oracle conditional quantiles of `records` as a prediction.
pub fn oracle_pooled(data: &Dataset, records: &[&SampleRecord]) -> Result<Pooled> {
    let (h, w) = data.config.fine_shape();
    let levels = data.config.oracle_levels.clone();
    let preds = records
        .iter()
        .map(|r| {
            let o = r
                .oracle
                .as_ref()
                .ok_or_else(|| ExperimentError::MissingOracle(format!("sample {} has no oracle quantiles", r.index)))?;
            Ok(QuantilePrediction::new(levels.clone(), h, w, o.clone())?)
        })
        .collect::<Result<Vec<_>>>()?;
    stack(
        preds,
        records.iter().map(|r| r.target.as_slice()).collect(),
        records.iter().map(|r| r.mask.as_slice()).collect(),
    )
}

/// All verification scores for pooled predictions. A single-output
/// (`deterministic`) prediction gets bulk, KL and contingency rows only.
pub fn score(pooled: &Pooled, deterministic: bool, thresholds: &[(String, f64)], run: &RunConfig, label: &str, head: &str, seed: u64) -> Result<MetricsReport> {
    let Pooled { pred, obs, mask, n_samples } = pooled;
    let point = if deterministic {
        pred.level(0)
    } else {
        pred.level_by_tau(0.5)
            .ok_or_else(|| ExperimentError::Invalid("quantile levels must include 0.5".into()))?
    };
    let bulk = verify::bulk(point, obs, mask)?;
    let kl = verify::kl_divergence(point, obs, mask)?;
    let mut rows = Vec::new();
    for (name, t) in thresholds {
        if deterministic {
            rows.push(ThresholdRow::new(name, None, &verify::contingency(point, obs, mask, *t)?));
        } else {
            for (k, &tau) in pred.levels.iter().enumerate() {
                rows.push(ThresholdRow::new(name, Some(tau), &verify::contingency(pred.level(k), obs, mask, *t)?));
            }
        }
    }
    let e = &run.eval;
    let (calibration, interval, crps, sharpness) = if deterministic {
        (None, None, None, None)
    } else {
        let has = |t: f64| pred.level_by_tau(t).is_some();
        (
            Some(verify::calibration(pred, obs, mask, e.wet_threshold_mm)?),
            if has(e.interval_lower) && has(e.interval_upper) {
                Some(verify::interval_coverage(pred, obs, mask, e.interval_lower, e.interval_upper)?)
            } else {
                None
            },
            Some(verify::crps_proxy(pred, obs, mask, &BAND_EDGES)?),
            if DEFAULT_SPREADS.iter().all(|&(u, l)| has(u) && has(l)) {
                Some(verify::sharpness(pred, obs, mask, &BAND_EDGES, &DEFAULT_SPREADS)?)
            } else {
                None
            },
        )
    };
    Ok(MetricsReport {
        label: label.into(),
        head: head.into(),
        seed,
        n_samples: *n_samples,
        n_pixels: mask.iter().filter(|&&m| m > 0.0).count(),
        bulk,
        kl,
        thresholds: rows,
        calibration,
        interval,
        crps,
        sharpness,
        config: serde_json::to_value(run).expect("config serializes"),
    })
}

/// Scores `model` on `records` of `data`.
pub fn evaluate(model: &Model, data: &Dataset, records: &[&SampleRecord], stats: &NormStats, run: &RunConfig, seed: u64, exec: Exec) -> Result<MetricsReport> {
    let thresholds = resolve_thresholds(&run.eval.thresholds, data)?;
    let pooled = predict_pooled(model, records, stats, exec)?;
    score(&pooled, !model.head.is_quantile(), &thresholds, run, model.head.name(), model.head.name(), seed)
}

/// Loads `run.data` or generates the world in memory.
pub fn load_or_generate(run: &RunConfig, exec: Exec) -> Result<Dataset> {
    match &run.data {
        Some(dir) => {
            let d = datagen::read_dataset(dir)?;
            check_shapes(run, &d)?;
            Ok(d)
        }
        None => Ok(datagen::generate_dataset(&run.world, run.n, exec)?),
    }
}

/// Rejects a model config whose input/output shapes do not fit `data`.
pub fn check_shapes(run: &RunConfig, data: &Dataset) -> Result<()> {
    let (h, w) = data.config.coarse_shape;
    let model_in = [run.model.in_channels, h, w];
    let data_in = [data.config.channels, h, w];
    let model_out = run.model.fine_shape((h, w));
    let data_out = data.config.fine_shape();
    if model_in != data_in || model_out != data_out {
        return Err(ExperimentError::Shape(format!(
            "model expects input {model_in:?} -> output {model_out:?}, dataset has input {data_in:?} -> target {data_out:?}"
        )));
    }
    Ok(())
}

/// Training configuration for one seed.
pub fn train_config(run: &RunConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..run.train.clone() }
}

/// A trained model and its provenance.
#[derive(Debug, Clone)]
pub struct Cell {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub n_synthetic: usize,
    pub seed: u64,
    pub ratio: f64,
}

/// Builds and trains `head` on the train split plus `⌈ratio·n⌉` synthetic
/// extremes. Normalization statistics stay those of the real train split.
pub fn train_cell(run: &RunConfig, data: &Dataset, head: HeadKind, ratio: f64, seed: u64, exec: Exec) -> Result<Cell> {
    check_shapes(run, data)?;
    let synthetic = inject_augmentation(
        data,
        &AugmentConfig {
            ratio,
            ..run.augment.clone()
        },
    )?;
    let mut records = data.train();
    records.extend(synthetic.iter());
    let samples = normalize(&records, &data.stats)?;
    let mut model = Model::build(run.model.clone(), head, run.levels.clone(), seed)?;
    let log = train::train(&mut model, &samples, &train_config(run, seed), exec)?;
    Ok(Cell {
        model,
        log,
        n_synthetic: synthetic.len(),
        seed,
        ratio,
    })
}

/// Writes `gen` output. An existing non-empty `out` is rejected unless
/// `force`, in which case previous dataset files are replaced.
pub fn cmd_gen(run: &RunConfig, out: &Path, force: bool, exec: Exec) -> Result<Dataset> {
    if out.is_dir() && io(out, fs::read_dir(out))?.next().is_some() {
        if !force {
            return Err(ExperimentError::Exists(out.to_path_buf()));
        }
        for entry in io(out, fs::read_dir(out))? {
            let p = io(out, entry)?.path();
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            let ours = name == "manifest.json"
                || name == "run.cfg"
                || ((name.starts_with("sample_") || name.starts_with("oracle_")) && name.ends_with(".bin"));
            if ours {
                io(&p, fs::remove_file(&p))?;
            }
        }
    }
    let data = datagen::generate_dataset(&run.world, run.n, exec)?;
    mkdir(out)?;
    datagen::write_dataset(&data, out)?;
    write(&out.join("run.cfg"), &run.to_text())?;
    Ok(data)
}

/// Trains the configured head on the dataset for `run.seeds[0]`; writes
/// `checkpoint.tqc`, `train_log.csv` and `run.cfg` into `out`.
pub fn cmd_train(run: &RunConfig, out: &Path, exec: Exec) -> Result<Cell> {
    if run.data.is_none() {
        return Err(ExperimentError::Invalid("train needs a dataset directory (data = ... or --data)".into()));
    }
    let data = load_or_generate(run, exec)?;
    let seed = run.seeds[0];
    let cell = train_cell(run, &data, run.head, run.augment.ratio, seed, exec)?;
    mkdir(out)?;
    checkpoint::save(&out.join("checkpoint.tqc"), &cell.model, &data.stats, seed, serde_json::to_value(run).expect("config serializes"))?;
    write(&out.join("train_log.csv"), &train::log_csv(&cell.log))?;
    write(&out.join("run.cfg"), &run.to_text())?;
    Ok(cell)
}

/// Scores a checkpoint on a split of a dataset directory; writes
/// `metrics.json` and `metrics.csv` into `out`.
pub fn cmd_eval(run: &RunConfig, checkpoint_path: &Path, data_dir: &Path, split: &str, out: &Path, exec: Exec) -> Result<MetricsReport> {
    let (model, header) = checkpoint::load(checkpoint_path)?;
    let data = datagen::read_dataset(data_dir)?;
    let mut run = run.clone();
    run.model = model.config.clone();
    check_shapes(&run, &data)?;
    let records = match split {
        "test" => data.test(),
        "train" => data.train(),
        other => return Err(ExperimentError::Invalid(format!("unknown split `{other}` (expected train or test)"))),
    };
    let report = evaluate(&model, &data, &records, &header.norm_stats, &run, header.seed, exec)?;
    mkdir(out)?;
    write(&out.join("metrics.json"), &report.to_json())?;
    write(&out.join("metrics.csv"), &report.to_csv())?;
    Ok(report)
}

/// Simple CSV table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

fn num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

/// Summary columns shared by the comparison tables.
pub const SUMMARY_COLUMNS: [&str; 16] = [
    "rmse", "pearson", "kl", "top_threshold", "top_threshold_mm", "pod", "far", "sedi", "hits", "ratio_p50", "ratio_p95", "ratio_p99", "ratio_p999",
    "coverage_50_99", "crps", "n_pixels",
];

/// Headline numbers of a report. Contingency columns use the last
/// configured threshold and the top output level; calibration columns are
/// blank for a deterministic model.
pub fn summarize(r: &MetricsReport) -> Vec<String> {
    let top = r.thresholds.last();
    let top_row = top.and_then(|t| {
        r.thresholds
            .iter()
            .filter(|x| x.label == t.label)
            .max_by(|a, b| a.level.unwrap_or(0.0).total_cmp(&b.level.unwrap_or(0.0)))
    });
    let ratio = |tau: f64| {
        r.calibration
            .as_ref()
            .and_then(|c| c.iter().find(|l| (l.level - tau).abs() < 1e-12))
            .map(|l| num(l.ratio_all))
            .unwrap_or_default()
    };
    vec![
        num(r.bulk.rmse),
        num(r.bulk.pearson),
        num(r.kl),
        top_row.map(|t| t.label.clone()).unwrap_or_default(),
        top_row.map(|t| num(t.threshold_mm)).unwrap_or_default(),
        top_row.map(|t| num(t.pod)).unwrap_or_default(),
        top_row.map(|t| num(t.far)).unwrap_or_default(),
        top_row.map(|t| num(t.sedi)).unwrap_or_default(),
        top_row.map(|t| t.a.to_string()).unwrap_or_default(),
        ratio(0.5),
        ratio(0.95),
        ratio(0.99),
        ratio(0.999),
        r.interval.map(|i| num(i.coverage)).unwrap_or_default(),
        r.crps.as_ref().map(|c| num(c.overall)).unwrap_or_default(),
        r.n_pixels.to_string(),
    ]
}

fn cell_dir(out: &Path, head: HeadKind, ratio: f64, seed: u64) -> PathBuf {
    out.join(format!("{}_f{ratio}_s{seed}", head.name()))
}

fn run_and_record(run: &RunConfig, data: &Dataset, head: HeadKind, ratio: f64, seed: u64, out: &Path, exec: Exec) -> Result<(Cell, MetricsReport)> {
    let cell = train_cell(run, data, head, ratio, seed, exec)?;
    let mut report = evaluate(&cell.model, data, &data.test(), &data.stats, run, seed, exec)?;
    report.label = format!("{}_f{ratio}", head.name());
    let dir = cell_dir(out, head, ratio, seed);
    mkdir(&dir)?;
    write(&dir.join("metrics.json"), &report.to_json())?;
    write(&dir.join("metrics.csv"), &report.to_csv())?;
    write(&dir.join("train_log.csv"), &train::log_csv(&cell.log))?;
    Ok((cell, report))
}

fn quantile_head(run: &RunConfig) -> HeadKind {
    if run.head.is_quantile() {
        run.head
    } else {
        HeadKind::IncrementSeparate
    }
}

/// {deterministic, quantile} × {f = 0, f = augment.ratio} for every seed;
/// writes `factorial.csv`.
pub fn cmd_factorial(run: &RunConfig, out: &Path, exec: Exec) -> Result<Table> {
    let data = load_or_generate(run, exec)?;
    let mut table = Table {
        header: ["model", "head", "aug_ratio", "seed", "n_synthetic"]
            .iter()
            .chain(SUMMARY_COLUMNS.iter())
            .map(|s| s.to_string())
            .collect(),
        rows: vec![],
    };
    for &seed in &run.seeds {
        for (name, head) in [("deterministic", HeadKind::Deterministic), ("quantile", quantile_head(run))] {
            for ratio in [0.0, run.augment.ratio] {
                let (cell, report) = run_and_record(run, &data, head, ratio, seed, out, exec)?;
                let mut row = vec![name.to_string(), head.name().into(), num(ratio), seed.to_string(), cell.n_synthetic.to_string()];
                row.extend(summarize(&report));
                table.rows.push(row);
            }
        }
    }
    mkdir(out)?;
    write(&out.join("factorial.csv"), &table.to_csv())?;
    write(&out.join("run.cfg"), &run.to_text())?;
    Ok(table)
}

/// Gradient-routing diagnostics of a quantile head on one input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Routing {
    /// Distinct per-pixel sort permutations (0 for unsorted heads).
    pub distinct_permutations: usize,
    /// `max |∂loss_k/∂r_j|` over `j > k`, where `loss_k` is the masked
    /// pinball loss of level `k` alone.
    pub max_leakage: f64,
}

pub fn routing(model: &Model, x: &Tensor, target: &[f64], mask: &[f64]) -> Result<Routing> {
    let levels = model.levels.as_slice().to_vec();
    if !model.head.is_quantile() {
        return Err(ExperimentError::Invalid("routing diagnostics need a quantile head".into()));
    }
    let mut distinct = 0;
    let mut leak = 0.0f64;
    for (k, &tau) in levels.iter().enumerate() {
        let mut g = Graph::new();
        let f = model.record(&mut g, x, None)?;
        if k == 0 {
            if let Some(perm) = g.sort_permutation(f.output) {
                let mut seen: Vec<&[u8]> = perm.chunks(levels.len()).collect();
                seen.sort();
                seen.dedup();
                distinct = seen.len();
            }
        }
        let shape = g.shape(f.output).to_vec();
        let plane = shape[1] * shape[2];
        let q = g.channel(f.output, k)?;
        let y = g.constant(Tensor::new(vec![1, shape[1], shape[2]], target.to_vec())?);
        let e = g.sub(y, q)?;
        let rho = g.pinball(e, tau);
        let loss = g.masked_mean(rho, mask)?;
        g.backward(loss)?;
        let gr = g.grad_or_zero(f.raw);
        for j in k + 1..levels.len() {
            leak = gr[j * plane..(j + 1) * plane].iter().fold(leak, |m, v| m.max(v.abs()));
        }
    }
    Ok(Routing {
        distinct_permutations: distinct,
        max_leakage: leak,
    })
}

/// Heads compared by `ablate`, in order.
pub const ABLATION: [HeadKind; 3] = [HeadKind::SharedSorted, HeadKind::IncrementShared, HeadKind::IncrementSeparate];

/// Trains each ablation head with the first seed on the same data; writes
/// `ablation.csv` with metrics and routing diagnostics on a random input.
pub fn cmd_ablate(run: &RunConfig, out: &Path, exec: Exec) -> Result<Table> {
    let data = load_or_generate(run, exec)?;
    let seed = run.seeds[0];
    let (h, w) = data.config.coarse_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(seed, 0x4142_4c54));
    let c = run.model.in_channels;
    let x = Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| StandardNormal.sample(&mut rng)).collect())?;
    let (fh, fw) = data.config.fine_shape();
    let target: Vec<f64> = (0..fh * fw).map(|_| StandardNormal.sample(&mut rng)).collect();
    let ones = vec![1.0; fh * fw];
    let mut table = Table {
        header: ["step", "head", "distinct_permutations", "max_leakage", "crossing_fraction"]
            .iter()
            .chain(SUMMARY_COLUMNS.iter())
            .map(|s| s.to_string())
            .collect(),
        rows: vec![],
    };
    for (i, head) in ABLATION.into_iter().enumerate() {
        let (cell, report) = run_and_record(run, &data, head, run.augment.ratio, seed, out, exec)?;
        let r = routing(&cell.model, &x, &target, &ones)?;
        let crossing = crossing_fraction(&cell.model, &data, exec)?;
        let mut row = vec![
            (i + 1).to_string(),
            head.name().into(),
            r.distinct_permutations.to_string(),
            num(r.max_leakage),
            num(crossing),
        ];
        row.extend(summarize(&report));
        table.rows.push(row);
    }
    mkdir(out)?;
    write(&out.join("ablation.csv"), &table.to_csv())?;
    write(&out.join("run.cfg"), &run.to_text())?;
    Ok(table)
}

/// Fraction of (test pixel, adjacent level pair) with `q̂_k > q̂_{k+1}` in
/// normalized space.
pub fn crossing_fraction(model: &Model, data: &Dataset, exec: Exec) -> Result<f64> {
    let k = model.outputs();
    if k < 2 {
        return Ok(f64::NAN);
    }
    let counts = exec
        .map(&data.test(), |r| -> Result<(usize, usize)> {
            let v = model.predict(&data.stats.normalize_input(&r.coarse)?)?;
            let n = v.len() / k;
            let bad = (1..k).map(|j| (0..n).filter(|&p| v[(j - 1) * n + p] > v[j * n + p]).count()).sum();
            Ok((bad, n * (k - 1)))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let (bad, total) = counts.iter().fold((0, 0), |(a, b), &(x, y)| (a + x, b + y));
    Ok(bad as f64 / total.max(1) as f64)
}

/// One train+eval per ratio for the deterministic and the quantile model
/// with the first seed; writes `aug_sweep.csv`.
pub fn cmd_aug_sweep(run: &RunConfig, ratios: &[f64], out: &Path, exec: Exec) -> Result<Table> {
    if let Some(r) = ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(ExperimentError::Invalid(format!("augmentation ratio {r} must lie in [0, 1)")));
    }
    let data = load_or_generate(run, exec)?;
    let seed = run.seeds[0];
    let n_train = data.split.train.len();
    let mut table = Table {
        header: ["aug_ratio", "model", "head", "seed", "n_synthetic"]
            .iter()
            .chain(SUMMARY_COLUMNS.iter())
            .map(|s| s.to_string())
            .collect(),
        rows: vec![],
    };
    for &ratio in ratios {
        for (name, head) in [("deterministic", HeadKind::Deterministic), ("quantile", quantile_head(run))] {
            let (cell, report) = run_and_record(run, &data, head, ratio, seed, out, exec)?;
            debug_assert_eq!(cell.n_synthetic, augmentation_count(ratio, n_train));
            let mut row = vec![num(ratio), name.into(), head.name().into(), seed.to_string(), cell.n_synthetic.to_string()];
            row.extend(summarize(&report));
            table.rows.push(row);
        }
    }
    mkdir(out)?;
    write(&out.join("aug_sweep.csv"), &table.to_csv())?;
    write(&out.join("run.cfg"), &run.to_text())?;
    Ok(table)
}

/// Collects every `metrics.json` below `dir` (sorted by path) into
/// `report.csv` and `report.md` in `out`.
pub fn cmd_report(dir: &Path, out: &Path) -> Result<Table> {
    let mut files = Vec::new();
    collect_metrics(dir, &mut files)?;
    files.sort();
    if files.is_empty() {
        return Err(ExperimentError::Invalid(format!("no metrics.json found under {}", dir.display())));
    }
    let mut table = Table {
        header: ["path", "label", "head", "seed"]
            .iter()
            .chain(SUMMARY_COLUMNS.iter())
            .map(|s| s.to_string())
            .collect(),
        rows: vec![],
    };
    for f in &files {
        let text = io(f, fs::read_to_string(f))?;
        let r: MetricsReport = serde_json::from_str(&text).map_err(|e| ExperimentError::Invalid(format!("{}: {e}", f.display())))?;
        let rel = f.strip_prefix(dir).unwrap_or(f).display().to_string();
        let mut row = vec![rel, r.label.clone(), r.head.clone(), r.seed.to_string()];
        row.extend(summarize(&r));
        table.rows.push(row);
    }
    mkdir(out)?;
    write(&out.join("report.csv"), &table.to_csv())?;
    let mut md = format!("| {} |\n|{}\n", table.header.join(" | "), "---|".repeat(table.header.len()));
    for r in &table.rows {
        md.push_str(&format!("| {} |\n", r.join(" | ")));
    }
    write(&out.join("report.md"), &md)?;
    Ok(table)
}

fn collect_metrics(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in io(dir, fs::read_dir(dir))? {
        let p = io(dir, entry)?.path();
        if p.is_dir() {
            collect_metrics(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "metrics.json") {
            out.push(p);
        }
    }
    Ok(())
}

/// Normalized training samples of `data` (train split only).
pub fn train_samples(data: &Dataset) -> Result<Vec<NormalizedSample>> {
    Ok(normalize(&data.train(), &data.stats)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_specs() {
        assert_eq!(ThresholdSpec::parse("20").unwrap(), ThresholdSpec::Fixed(20.0));
        assert_eq!(ThresholdSpec::parse("T999").unwrap(), ThresholdSpec::Oracle(0.999));
        assert_eq!(ThresholdSpec::parse("T95").unwrap(), ThresholdSpec::Oracle(0.95));
        for bad in ["T", "Tx", "-3", "0", "abc", "inf"] {
            assert!(ThresholdSpec::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn csv_table() {
        let t = Table {
            header: vec!["a".into(), "b".into()],
            rows: vec![vec!["1".into(), "".into()]],
        };
        assert_eq!(t.to_csv(), "a,b\n1,\n");
        assert_eq!(t.column("b"), Some(1));
    }
}
