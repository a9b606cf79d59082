//! Training runs: configuration, the training loop, metrics, checkpoints,
//! evaluation and density export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, DataSpec, LabeledDataset, Normalization};
use crate::error::{Error, Result};
use crate::kde::{gaussian_kde, BandwidthRule, Density};
use crate::linalg::ProjectionMatrix;
use crate::nn::{load_checkpoint, predict, save_checkpoint, LayerSpec, Mode, Model, SgdMomentum};
use crate::reve::{total_objective, QParams, ReveConfig, ReveStep};
use crate::tensor::{Tape, Tensor};

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.toml";
pub const DENSITY_FILE: &str = "density.txt";

/// Checkpoint entry holding the per-sample input extents.
const INPUT_SHAPE: &str = "data.input_shape";

/// Rows per forward pass when evaluating whole datasets.
const EVAL_CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub lr: f64,
    /// Per-epoch multiplicative learning-rate decay.
    #[serde(default = "one")]
    pub decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn one() -> f64 {
    1.0
}

fn default_momentum() -> f64 {
    0.9
}

fn default_batch_size() -> usize {
    128
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/latest")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Encoder layers; the last one's width is `dim(Y)`.
    pub layers: Vec<LayerSpec>,
}

/// Everything a run depends on. Absent `reve` trains with plain
/// cross-entropy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub data: DataSpec,
    pub model: ModelSpec,
    pub optimizer: OptimizerSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reve: Option<ReveConfig>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.lr.is_finite())
            || !(o.decay > 0.0)
            || !(0.0..1.0).contains(&o.momentum)
            || !(o.weight_decay >= 0.0)
        {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        if self.model.layers.is_empty() {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        if let Some(reve) = &self.reve {
            reve.validate()?;
        }
        Ok(())
    }

    /// The regularizer settings, created with defaults if absent.
    pub fn reve_mut(&mut self) -> &mut ReveConfig {
        self.reve.get_or_insert_with(ReveConfig::default)
    }
}

/// Per-epoch averages over the training batches plus end-of-epoch errors.
/// Regularizer columns are `None` for plain cross-entropy runs.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    /// Parameter updates so far.
    pub step: usize,
    pub cross_entropy: f64,
    pub omega: Option<f64>,
    pub total: f64,
    /// Percent.
    pub train_error: f64,
    pub test_error: f64,
    pub neg_log_q: Option<f64>,
    pub neg_log_r: Option<f64>,
    pub wall_seconds: f64,
}

impl MetricsRow {
    pub const HEADER: &'static str =
        "epoch,step,cross_entropy,omega,total,train_error,test_error,neg_log_q,neg_log_r";

    /// One CSV line without the wall-clock time, which lives in its own file
    /// so that metrics stay byte-reproducible.
    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.cross_entropy,
            opt(self.omega),
            self.total,
            self.train_error,
            self.test_error,
            opt(self.neg_log_q),
            opt(self.neg_log_r),
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{}\n", MetricsRow::HEADER);
    for row in rows {
        out.push_str(&row.csv());
        out.push('\n');
    }
    out
}

fn timing_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("epoch,wall_seconds\n");
    for row in rows {
        let _ = writeln!(out, "{},{:.3}", row.epoch, row.wall_seconds);
    }
    out
}

/// Independent random streams of one run.
#[derive(Clone, Copy)]
enum Stream {
    Init = 0,
    Shuffle = 1,
    Dropout = 2,
    Noise = 3,
    Augment = 4,
}

fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// A trained model with what is needed to evaluate or resume it.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub config: RunConfig,
    pub model: Model,
    pub normalization: Normalization,
    pub metrics: Vec<MetricsRow>,
}

impl TrainOutcome {
    pub fn checkpoint_entries(&self) -> Result<Vec<(String, Tensor)>> {
        let mut entries = self.model.named_params();
        entries.extend(self.normalization.to_entries()?);
        let shape = self
            .model
            .encoder
            .input_shape()
            .iter()
            .map(|&e| e as f64)
            .collect();
        entries.push((INPUT_SHAPE.to_string(), Tensor::vector(shape)?));
        Ok(entries)
    }

    /// Writes metrics, timing, checkpoint and the resolved config to `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(METRICS_FILE), metrics_csv(&self.metrics))?;
        fs::write(dir.join(TIMING_FILE), timing_csv(&self.metrics))?;
        save_checkpoint(dir.join(CHECKPOINT_FILE), &self.checkpoint_entries()?)?;
        fs::write(dir.join(CONFIG_FILE), self.config.to_toml()?)?;
        Ok(())
    }

    pub fn final_metrics(&self) -> Option<&MetricsRow> {
        self.metrics.last()
    }
}

fn build_model(config: &RunConfig, feature_shape: &[usize], classes: usize) -> Result<Model> {
    let mut rng = stream(config.seed, Stream::Init);
    Model::new(feature_shape, &config.model.layers, classes, &mut rng)
}

/// Class predicted for each row of already normalized `inputs`.
pub fn predictions(model: &Model, inputs: &Tensor) -> Result<Vec<usize>> {
    let n = inputs.shape()[0];
    let width: usize = inputs.shape()[1..].iter().product();
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let shape: Vec<usize> = std::iter::once(end - start)
            .chain(inputs.shape()[1..].iter().copied())
            .collect();
        let chunk = Tensor::new(shape, inputs.data()[start * width..end * width].to_vec())?;
        let probs = predict(&model.head, &model.encoder.encode_values(&chunk)?)?;
        for row in probs.data().chunks(model.head.classes()) {
            let mut best = 0;
            for (k, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = k;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Misclassified percentage of a normalized dataset.
pub fn error_rate(model: &Model, dataset: &LabeledDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let predicted = predictions(model, dataset.inputs())?;
    let wrong = predicted
        .iter()
        .zip(dataset.labels())
        .filter(|(p, c)| p != c)
        .count();
    Ok(100.0 * wrong as f64 / dataset.len() as f64)
}

#[derive(Default)]
struct EpochSums {
    rows: usize,
    cross_entropy: f64,
    total: f64,
    omega: f64,
    neg_log_q: f64,
    neg_log_r: f64,
}

pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    train_with(config, |_| {})
}

/// Trains `config`, calling `on_epoch` after each epoch's metrics are known.
pub fn train_with(
    config: &RunConfig,
    mut on_epoch: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    let (train_raw, test_raw) = config.data.load()?;
    let normalization = Normalization::fit(&train_raw)?;
    let train_set = normalization.apply(&train_raw)?;
    let test_set = normalization.apply(&test_raw)?;
    let classes = train_set.classes().max(test_set.classes());

    let mut model = build_model(config, train_set.feature_shape(), classes)?;
    let o = &config.optimizer;
    let mut optimizer = SgdMomentum::new(o.lr, o.decay, o.momentum, o.weight_decay);
    let mut shuffle_rng = stream(config.seed, Stream::Shuffle);
    let mut dropout_rng = stream(config.seed, Stream::Dropout);
    let mut noise_rng = stream(config.seed, Stream::Noise);
    let mut augment_rng = stream(config.seed, Stream::Augment);
    let augmentation = config.data.augmentation();

    let started = Instant::now();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut previous_q: Option<QParams> = None;
    let mut step = 0;
    let mut metrics = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = EpochSums::default();
        for batch in order.chunks(config.batch_size) {
            let (mut x, labels) = train_set.gather(batch)?;
            if let Some(spec) = augmentation {
                let extent = [x.shape()[2], x.shape()[3]];
                x = augment(&x, spec.pad, extent, spec.hflip_prob, &mut augment_rng)?;
            }
            let projection: Option<ProjectionMatrix> = match &config.reve {
                Some(r) => Some(
                    model
                        .head
                        .projection(r.svd_refresh_period, r.rank_tolerance)?
                        .clone(),
                ),
                None => None,
            };

            let tape = Tape::new();
            let bound = model.bind(&tape);
            let reve_step = config
                .reve
                .as_ref()
                .zip(projection.as_ref())
                .map(|(r, p)| ReveStep {
                    config: r,
                    projection: p,
                    previous_q: previous_q.as_ref(),
                    rng: &mut noise_rng,
                });
            let objective = total_objective(
                &model.encoder,
                &bound,
                tape.constant(x),
                &labels,
                Mode::Train(&mut dropout_rng),
                reve_step,
            )?;
            let total = objective.total.item();
            let omega = objective.reve.as_ref().map_or(0.0, |r| r.omega.item());
            if let Some(value) = [total, omega].into_iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    step: step + 1,
                    value,
                });
            }
            let rows = labels.len() as f64;
            sums.rows += labels.len();
            sums.cross_entropy += rows * objective.cross_entropy.item();
            sums.total += rows * total;
            if let Some(r) = &objective.reve {
                sums.omega += rows * r.omega.item();
                sums.neg_log_q += rows * r.neg_log_q;
                sums.neg_log_r += rows * r.neg_log_r;
            }

            let mut grads = tape.backward(objective.total)?;
            optimizer.step(model.updates(&bound, &mut grads), epoch)?;
            model.head.mark_updated();
            if config.reve.as_ref().is_some_and(|r| r.q_ema.is_some()) {
                previous_q = objective.reve.map(|r| r.q);
            }
            step += 1;
        }

        let n = sums.rows as f64;
        let regularized = config.reve.is_some();
        let row = MetricsRow {
            epoch: epoch + 1,
            step,
            cross_entropy: sums.cross_entropy / n,
            omega: regularized.then(|| sums.omega / n),
            total: sums.total / n,
            train_error: error_rate(&model, &train_set)?,
            test_error: error_rate(&model, &test_set)?,
            neg_log_q: regularized.then(|| sums.neg_log_q / n),
            neg_log_r: regularized.then(|| sums.neg_log_r / n),
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&row);
        metrics.push(row);
    }

    Ok(TrainOutcome {
        config: config.clone(),
        model,
        normalization,
        metrics,
    })
}

/// A model restored from a checkpoint and the config saved beside it.
#[derive(Clone, Debug)]
pub struct LoadedRun {
    pub config: RunConfig,
    pub model: Model,
    pub normalization: Normalization,
}

impl LoadedRun {
    /// Reads `checkpoint` and `config.toml` from the same directory.
    pub fn load(checkpoint: impl AsRef<Path>) -> Result<Self> {
        let checkpoint = checkpoint.as_ref();
        let dir = checkpoint.parent().unwrap_or_else(|| Path::new("."));
        let config = RunConfig::load(dir.join(CONFIG_FILE))?;
        let entries = load_checkpoint(checkpoint)?;
        Self::from_entries(config, &entries)
    }

    pub fn from_entries(config: RunConfig, entries: &[(String, Tensor)]) -> Result<Self> {
        let normalization = Normalization::from_entries(entries)?;
        let classes = entries
            .iter()
            .find(|(n, _)| n == crate::nn::DecoderHead::BIAS)
            .map(|(_, t)| t.len())
            .ok_or_else(|| Error::ArchitectureMismatch("checkpoint has no decoder".into()))?;
        let feature_shape: Vec<usize> = entries
            .iter()
            .find(|(n, _)| n == INPUT_SHAPE)
            .map(|(_, t)| t.data().iter().map(|&e| e as usize).collect())
            .ok_or_else(|| Error::Checkpoint(format!("missing `{INPUT_SHAPE}`")))?;
        let mut model = build_model(&config, &feature_shape, classes)
            .map_err(|e| Error::ArchitectureMismatch(e.to_string()))?;
        model.load_named_params(entries)?;
        Ok(Self {
            config,
            model,
            normalization,
        })
    }

    /// Test error (percent) on a raw dataset, normalized with the training
    /// statistics stored in the checkpoint.
    pub fn evaluate(&self, dataset: &LabeledDataset) -> Result<f64> {
        let expected = self.model.encoder.input_shape();
        if dataset.feature_shape() != expected {
            return Err(Error::ArchitectureMismatch(format!(
                "model expects inputs {expected:?}, dataset has {:?}",
                dataset.feature_shape()
            )));
        }
        error_rate(&self.model, &self.normalization.apply(dataset)?)
    }

    /// Deterministic encodings `h` of a raw dataset, `[N, dim(Y)]`.
    pub fn encode(&self, dataset: &LabeledDataset) -> Result<Tensor> {
        let normalized = self.normalization.apply(dataset)?;
        let n = normalized.len();
        let d = self.model.encoder.output_dim();
        let mut data = Vec::with_capacity(n * d);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let rows: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
            let (x, _) = normalized.gather(&rows)?;
            data.extend(self.model.encoder.encode_values(&x)?.into_data());
        }
        Tensor::new([n, d], data)
    }
}

/// Evaluates a checkpoint on a dataset.
pub fn evaluate(checkpoint: impl AsRef<Path>, dataset: &LabeledDataset) -> Result<f64> {
    LoadedRun::load(checkpoint)?.evaluate(dataset)
}

/// KDE of one coordinate of `Y` (the deterministic encoding) and of `Z = P·Y`.
#[derive(Clone, Debug)]
pub struct CoordinateDensity {
    pub coordinate: usize,
    pub y: Density,
    pub z: Density,
}

pub fn export_density(
    run: &LoadedRun,
    dataset: &LabeledDataset,
    coordinates: &[usize],
    rule: BandwidthRule,
) -> Result<Vec<CoordinateDensity>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = run.model.encoder.output_dim();
    if let Some(&bad) = coordinates.iter().find(|&&c| c >= dim) {
        return Err(Error::Config(format!(
            "coordinate {bad} out of range for dim(Y) = {dim}"
        )));
    }
    let tolerance = run
        .config
        .reve
        .as_ref()
        .map_or(crate::linalg::DEFAULT_RANK_TOLERANCE, |r| r.rank_tolerance);
    let mut head = run.model.head.clone();
    let projection = head.refresh(tolerance)?.projection.clone();
    let h = run.encode(dataset)?;
    let z = h.matmul(&projection.to_tensor()?)?;
    let column = |t: &Tensor, i: usize| -> Vec<f64> {
        t.data().iter().skip(i).step_by(dim).copied().collect()
    };
    coordinates
        .iter()
        .map(|&i| {
            Ok(CoordinateDensity {
                coordinate: i,
                y: gaussian_kde(&column(&h, i), rule)?,
                z: gaussian_kde(&column(&z, i), rule)?,
            })
        })
        .collect()
}

/// Whitespace-separated columns `grid_y<i> density_y<i> grid_z<i> density_z<i>`
/// per coordinate, one grid point per line.
pub fn density_table(densities: &[CoordinateDensity]) -> String {
    let mut out = String::new();
    let header: Vec<String> = densities
        .iter()
        .flat_map(|d| {
            let i = d.coordinate;
            [
                format!("grid_y{i}"),
                format!("density_y{i}"),
                format!("grid_z{i}"),
                format!("density_z{i}"),
            ]
        })
        .collect();
    out.push_str(&header.join(" "));
    out.push('\n');
    let points = densities.first().map_or(0, |d| d.y.grid.len());
    for k in 0..points {
        let line: Vec<String> = densities
            .iter()
            .flat_map(|d| {
                [d.y.grid[k], d.y.density[k], d.z.grid[k], d.z.density[k]].map(|v| v.to_string())
            })
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Parses a table written by [`density_table`] back into named columns.
pub fn parse_density_table(text: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data("empty density table".into()))?;
    let mut columns: Vec<(String, Vec<f64>)> = header
        .split_whitespace()
        .map(|h| (h.to_string(), Vec::new()))
        .collect();
    for (n, line) in lines.enumerate() {
        let values: Vec<&str> = line.split_whitespace().collect();
        if values.len() != columns.len() {
            return Err(Error::Data(format!(
                "density line {} has {} fields",
                n + 2,
                values.len()
            )));
        }
        for (col, v) in columns.iter_mut().zip(values) {
            col.1.push(
                v.parse()
                    .map_err(|e| Error::Data(format!("density value `{v}`: {e}")))?,
            );
        }
    }
    Ok(columns)
}
