//! Joint gradient search over weights and thresholds, and retraining of the
//! derived network.
//!
//! The search objective is `CE + λ · ln(R)` with `R` the predicted runtime in
//! milliseconds. One backward pass gives gradients for weights and
//! thresholds, and both are updated on every step.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{toy_dataset, BatchStream, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::latency::{total_runtime, LatencyTable};
use crate::optim::Sgd;
use crate::scalar::Scalar;
use crate::space::{
    derive_architecture, materialize, CompactNetwork, DerivedArchitecture, MacroArchConfig, Supernet, SupernetVars,
};
use crate::superkernel::{decision_string, DecisionTriple, GateMode, Gates, LayerChoice, ParamKind};
use crate::tensor::Tensor;

fn default_momentum() -> f64 {
    0.9
}

fn default_temperature() -> f64 {
    1.0
}

/// Retraining schedule for the derived network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 32, learning_rate: 0.05, momentum: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub arch: MacroArchConfig,
    pub dataset: DatasetSpec,
    /// Seeds the dataset; kept apart from `seed` so that runs with different
    /// seeds see the same task.
    #[serde(default)]
    pub data_seed: u64,
    pub lambda: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Falls back to `learning_rate`.
    #[serde(default)]
    pub threshold_learning_rate: Option<f64>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Seeds weight initialisation (replacing `arch.seed`) and batch order.
    pub seed: u64,
    /// Latency table location, relative to the config file.
    #[serde(default)]
    pub lut_path: Option<String>,
    #[serde(default)]
    pub train: TrainConfig,
}

impl SearchConfig {
    /// Toy search on the channel-mean task.
    pub fn toy(seed: u64) -> Self {
        Self {
            arch: MacroArchConfig::toy(seed),
            dataset: DatasetSpec::channel_mean(8, 8, 2),
            data_seed: 0,
            lambda: 0.1,
            steps: 120,
            batch_size: 32,
            learning_rate: 0.05,
            threshold_learning_rate: None,
            momentum: 0.9,
            temperature: 1.0,
            seed,
            lut_path: None,
            train: TrainConfig::default(),
        }
    }

    /// Search on the default desk-scale space.
    pub fn desk(seed: u64) -> Self {
        Self { arch: MacroArchConfig::desk(seed), dataset: DatasetSpec::channel_mean(28, 28, 1), ..Self::toy(seed) }
    }

    pub fn threshold_lr(&self) -> f64 {
        self.threshold_learning_rate.unwrap_or(self.learning_rate)
    }

    /// The architecture actually searched: `arch` with the run seed.
    pub fn resolved_arch(&self) -> MacroArchConfig {
        MacroArchConfig { seed: self.seed, ..self.arch.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.dataset.validate()?;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.batch_size == 0 || self.batch_size > self.dataset.train_size {
            return bad(format!("batch_size must be in 1..={}", self.dataset.train_size));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive".into());
        }
        if !(self.threshold_lr() >= 0.0 && self.threshold_lr().is_finite()) {
            return bad("threshold_learning_rate must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive".into());
        }
        let a = &self.arch;
        let d = &self.dataset;
        if (a.input_height, a.input_width, a.input_channels) != (d.height, d.width, d.channels) {
            return bad("dataset image shape differs from the architecture input".into());
        }
        if a.num_classes != 2 {
            return bad("the toy datasets have two classes; set num_classes to 2".into());
        }
        self.train.validate(d.train_size)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let config: Self = crate::space::read_json(path)?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::space::write_json(path, self)
    }
}

impl TrainConfig {
    pub fn validate(&self, train_size: usize) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > train_size {
            return Err(Error::InvalidConfig(format!("train.batch_size must be in 1..={train_size}")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("train.learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("train.momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Graph handles of one evaluation of the search objective.
#[derive(Debug, Clone)]
pub struct NasLoss {
    pub loss: Var,
    pub ce: Var,
    pub runtime: Var,
    pub logits: Var,
    pub gates: Vec<Gates>,
}

/// `CE + λ · ln(R)` on one batch.
#[allow(clippy::too_many_arguments)]
pub fn nas_loss<T: Scalar>(
    g: &mut Graph<T>,
    supernet: &Supernet<T>,
    vars: &SupernetVars,
    images: Var,
    labels: &[usize],
    lut: &LatencyTable,
    lambda: T,
    mode: GateMode,
) -> Result<NasLoss> {
    let out = supernet.forward(g, vars, images, mode)?;
    let ce = g.softmax_cross_entropy(out.logits, labels)?;
    let runtime = total_runtime(g, &out.gates, lut)?;
    let r = g.item(runtime);
    if !(r > T::zero()) {
        return Err(Error::NonPositiveRuntime(r.to_f64_lossy()));
    }
    let log_r = g.ln(runtime);
    let penalty = g.affine(log_r, lambda, T::zero());
    let loss = g.add(ce, penalty)?;
    let value = g.item(loss);
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss(value.to_f64_lossy()));
    }
    Ok(NasLoss { loss, ce, runtime, logits: out.logits, gates: out.gates })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub ce: f64,
    pub runtime_ms: f64,
    /// `ce + lambda · ln(runtime_ms)`, recomputed from the two logged values.
    pub loss: f64,
    pub decisions: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SearchMetrics {
    pub lambda: f64,
    pub steps: Vec<StepMetrics>,
    pub wall_clock_s: f64,
}

impl SearchMetrics {
    /// CSV with header `step,ce,runtime_ms,loss,decisions`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.steps {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<StepMetrics>> {
        let mut r = csv::Reader::from_path(path)?;
        Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
    }
}

#[derive(Debug, Clone)]
pub struct SearchOutcome<T> {
    pub supernet: Supernet<T>,
    pub metrics: SearchMetrics,
    pub derived: DerivedArchitecture,
}

fn hard_choices<T: Scalar>(g: &Graph<T>, gates: &[Gates]) -> Vec<LayerChoice> {
    let on = |v: Var| g.item(v) > T::from_f64_lossy(0.5);
    gates.iter().map(|gt| DecisionTriple::from_gates(on(gt.k5), on(gt.e3), on(gt.e6)).choice()).collect()
}

/// Runs the search and derives the architecture from the final state.
/// Deterministic for a given config and table.
pub fn run_search<T: Scalar>(config: &SearchConfig, lut: &LatencyTable) -> Result<SearchOutcome<T>> {
    config.validate()?;
    let arch = config.resolved_arch();
    lut.check_layer_count(arch.searchable_layers())?;
    let (train, _) = toy_dataset::<T>(&config.dataset, config.data_seed)?;
    let mut net = Supernet::<T>::build(&arch)?;
    net.set_temperature(T::from_f64_lossy(config.temperature))?;
    let mut stream = BatchStream::new(train.len(), config.batch_size, config.seed.wrapping_add(1))?;
    let mut opt = Sgd::new(T::from_f64_lossy(config.momentum));
    let lambda = T::from_f64_lossy(config.lambda);
    let (lr_w, lr_t) = (T::from_f64_lossy(config.learning_rate), T::from_f64_lossy(config.threshold_lr()));

    let start = Instant::now();
    let mut metrics = SearchMetrics { lambda: config.lambda, ..Default::default() };
    for step in 0..config.steps {
        let (x, y) = stream.next_batch(&train);
        let mut g = Graph::new();
        let vars = net.bind(&mut g);
        let xv = g.constant(x);
        let out = nas_loss(&mut g, &net, &vars, xv, &y, lut, lambda, GateMode::Ste)?;
        g.backward(out.loss)?;

        let ce = g.item(out.ce).to_f64_lossy();
        let runtime_ms = g.item(out.runtime).to_f64_lossy();
        metrics.steps.push(StepMetrics {
            step,
            ce,
            runtime_ms,
            loss: ce + config.lambda * runtime_ms.ln(),
            decisions: decision_string(&hard_choices(&g, &out.gates)),
        });

        let grads: Vec<Tensor<T>> =
            vars.all().into_iter().map(|v| g.grad(v).cloned().expect("bound parameters receive gradients")).collect();
        opt.step(net.params_mut().into_iter().zip(&grads).map(|((kind, p), gr)| {
            let lr = if kind == ParamKind::Threshold { lr_t } else { lr_w };
            (p, gr, lr)
        }))?;
    }
    metrics.wall_clock_s = start.elapsed().as_secs_f64();
    let derived = derive_architecture(&net, &lut.hash(), config.lambda, config.seed, config.steps)?;
    Ok(SearchOutcome { supernet: net, metrics, derived })
}

/// Index of the largest logit per row; ties go to the lower class.
pub fn predictions<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter().enumerate().fold((0, row[0]), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) }).0
        })
        .collect()
}

fn accuracy_with<T: Scalar>(
    data: &Dataset<T>,
    mut logits_of: impl FnMut(Tensor<T>) -> Result<Tensor<T>>,
) -> Result<f64> {
    let mut correct = 0usize;
    for (x, y) in data.chunks(256) {
        let pred = predictions(&logits_of(x)?);
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Classification accuracy of a compact network.
pub fn compact_accuracy<T: Scalar>(net: &CompactNetwork<T>, data: &Dataset<T>) -> Result<f64> {
    accuracy_with(data, |x| {
        let mut g = Graph::new();
        let vars = net.bind(&mut g);
        let xv = g.constant(x);
        let logits = net.forward(&mut g, &vars, xv)?;
        Ok(g.value(logits).clone())
    })
}

/// Classification accuracy of the supernet under its hard decisions.
pub fn supernet_accuracy<T: Scalar>(net: &Supernet<T>, data: &Dataset<T>) -> Result<f64> {
    accuracy_with(data, |x| {
        let mut g = Graph::new();
        let vars = net.bind(&mut g);
        let xv = g.constant(x);
        let out = net.forward(&mut g, &vars, xv, GateMode::Ste)?;
        Ok(g.value(out.logits).clone())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub initial_accuracy: f64,
    /// Held-out accuracy after the last epoch.
    pub accuracy: f64,
    /// Mean training cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    train_ce: f64,
}

impl TrainReport {
    /// One row per epoch: `epoch,train_ce`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (i, &train_ce) in self.epoch_losses.iter().enumerate() {
            w.serialize(EpochRow { epoch: i + 1, train_ce })?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Plain supervised training of `net` in place; reports held-out accuracy.
pub fn train_derived<T: Scalar>(
    net: &mut CompactNetwork<T>,
    train: &Dataset<T>,
    test: &Dataset<T>,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    config.validate(train.len())?;
    let initial_accuracy = compact_accuracy(net, test)?;
    let mut stream = BatchStream::new(train.len(), config.batch_size, seed)?;
    let mut opt = Sgd::new(T::from_f64_lossy(config.momentum));
    let lr = T::from_f64_lossy(config.learning_rate);
    let per_epoch = train.len() / config.batch_size;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let mut total = 0.0;
        for _ in 0..per_epoch {
            let (x, y) = stream.next_batch(train);
            let mut g = Graph::new();
            let vars = net.bind(&mut g);
            let xv = g.constant(x);
            let logits = net.forward(&mut g, &vars, xv)?;
            let loss = g.softmax_cross_entropy(logits, &y)?;
            g.backward(loss)?;
            total += g.item(loss).to_f64_lossy();
            let grads: Vec<Tensor<T>> = vars
                .all()
                .into_iter()
                .map(|v| g.grad(v).cloned().expect("bound parameters receive gradients"))
                .collect();
            opt.step(net.params_mut().into_iter().zip(&grads).map(|(p, gr)| (p, gr, lr)))?;
        }
        epoch_losses.push(total / per_epoch as f64);
    }
    let accuracy = if config.epochs == 0 { initial_accuracy } else { compact_accuracy(net, test)? };
    Ok(TrainReport { epochs: config.epochs, initial_accuracy, accuracy, epoch_losses })
}

/// Search, materialise and retrain in one go.
#[derive(Debug, Clone)]
pub struct PipelineOutcome<T> {
    pub search: SearchOutcome<T>,
    pub compact: CompactNetwork<T>,
    pub train: TrainReport,
}

pub fn search_and_train<T: Scalar>(config: &SearchConfig, lut: &LatencyTable) -> Result<PipelineOutcome<T>> {
    let search = run_search::<T>(config, lut)?;
    let mut compact = materialize(&search.derived, &search.supernet)?;
    let (train, test) = toy_dataset::<T>(&config.dataset, config.data_seed)?;
    let report = train_derived(&mut compact, &train, &test, &config.train, config.seed)?;
    Ok(PipelineOutcome { search, compact, train: report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub seed: u64,
    /// Predicted runtime of the derived architecture.
    pub runtime_ms: f64,
    /// Held-out accuracy of the supernet under its final hard decisions.
    pub accuracy: f64,
    pub decisions: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub lambda: f64,
    pub median_runtime_ms: f64,
    pub median_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    pub summary: Vec<SweepSummary>,
    /// Cheapest λ whose median accuracy is within `ACCURACY_SLACK` of the best.
    pub recommended_lambda: f64,
}

impl SweepReport {
    /// One row per run: `lambda,seed,runtime_ms,accuracy,decisions`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for p in &self.points {
            w.serialize(p)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Accuracy a recommended λ may give up relative to the best λ of a sweep.
pub const ACCURACY_SLACK: f64 = 0.02;

/// The λ values tried when no list is given.
pub const DEFAULT_SWEEP: [f64; 3] = [0.01, 0.1, 1.0];

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => values[n / 2],
        _ => 0.5 * (values[n / 2 - 1] + values[n / 2]),
    }
}

/// Searches once per `(λ, seed)` pair and summarises by median.
pub fn lambda_sweep<T: Scalar>(
    base: &SearchConfig,
    lut: &LatencyTable,
    lambdas: &[f64],
    seeds: &[u64],
) -> Result<SweepReport> {
    if lambdas.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one lambda and one seed".into()));
    }
    let (_, test) = toy_dataset::<T>(&base.dataset, base.data_seed)?;
    let mut points = Vec::new();
    for &lambda in lambdas {
        for &seed in seeds {
            let config = SearchConfig { lambda, seed, ..base.clone() };
            let out = run_search::<T>(&config, lut)?;
            points.push(SweepPoint {
                lambda,
                seed,
                runtime_ms: lut.predict(&out.derived.layers)?,
                accuracy: supernet_accuracy(&out.supernet, &test)?,
                decisions: out.derived.decision_string(),
            });
        }
    }
    let summary: Vec<SweepSummary> = lambdas
        .iter()
        .map(|&lambda| {
            let of = |f: fn(&SweepPoint) -> f64| {
                let mut v: Vec<f64> = points.iter().filter(|p| p.lambda == lambda).map(f).collect();
                median(&mut v)
            };
            SweepSummary { lambda, median_runtime_ms: of(|p| p.runtime_ms), median_accuracy: of(|p| p.accuracy) }
        })
        .collect();
    let best = summary.iter().map(|s| s.median_accuracy).fold(f64::MIN, f64::max);
    let recommended_lambda = summary
        .iter()
        .filter(|s| s.median_accuracy >= best - ACCURACY_SLACK)
        .min_by(|a, b| a.median_runtime_ms.total_cmp(&b.median_runtime_ms).then(a.lambda.total_cmp(&b.lambda)))
        .map(|s| s.lambda)
        .expect("at least one lambda is within the slack of the best");
    Ok(SweepReport { points, summary, recommended_lambda })
}
