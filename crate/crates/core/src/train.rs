//! Run configuration, the training loop, evaluation, fusion/TMC ablations and
//! embedding export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gaussian::FusionMode;
use crate::io;
use crate::losses::{bce_node, cosine_similarity, LossBreakdown};
use crate::model::{Embeddings, ModelConfig, MultiViewVae};
use crate::mvt1::{Payload, TensorFile};
use crate::optim::{self, Adam, AdamConfig, Parameter};
use crate::parallel::Execution;
use crate::synth::{self, Splits, SynthConfig};
use crate::tensor::Tensor;

/// Where training data comes from: a generated synthetic set or a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub synthetic: Option<SynthConfig>,
    /// Train, validation and test fractions for synthetic data.
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            synthetic: None,
            split: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without a validation-accuracy improvement before stopping.
    pub patience: usize,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    /// Seeds for ablation grids; empty means just `seed`.
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            epochs: 30,
            batch_size: 128,
            patience: 10,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            optimizer: AdamConfig::default(),
            seeds: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().replace('\n', " ")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 for contrastive negatives, got {}",
                self.batch_size
            )));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.data.path.is_some() && self.data.synthetic.is_some() {
            return Err(Error::Config("set at most one of data.path and data.synthetic".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        if let Some(s) = &self.data.synthetic {
            s.validate()?;
        }
        self.model.validate()
    }

    pub fn synth_config(&self) -> SynthConfig {
        self.data.synthetic.clone().unwrap_or_default()
    }

    pub fn grid_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }
}

/// Loaded or generated splits plus their content hash.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub splits: Splits,
    pub hash: String,
}

/// Reads `data.path`, or generates and splits the synthetic configuration.
pub fn prepare_data(config: &RunConfig, exec: Execution) -> Result<PreparedData> {
    match &config.data.path {
        Some(dir) => {
            let (manifest, splits) = io::read_dataset(dir)?;
            Ok(PreparedData {
                splits,
                hash: manifest.content_hash,
            })
        }
        None => {
            let synth = config.synth_config();
            let generated = synth::generate(&synth, exec)?;
            let splits = synth::split(&generated.data, config.data.split, synth.seed)?;
            let hash = io::content_hash(&splits, io::Precision::F64)?;
            Ok(PreparedData { splits, hash })
        }
    }
}

/// Name used in metrics for a fusion mode with or without the contrastive term.
pub fn run_label(fusion: FusionMode, tmc: bool) -> &'static str {
    match (fusion, tmc) {
        (FusionMode::Poe, false) => "mvae",
        (FusionMode::Poe, true) => "mvae+tmc",
        (FusionMode::Moe, false) => "mmvae",
        (FusionMode::Moe, true) => "mmvae+tmc",
        (FusionMode::Mopoe, false) => "mopoe-vae-baseline",
        (FusionMode::Mopoe, true) => "tmc-vae",
    }
}

/// Method name of an ablation cell.
pub fn method_name(fusion: FusionMode, tmc: bool) -> &'static str {
    match (fusion, tmc) {
        (FusionMode::Poe, false) => "MVAE",
        (FusionMode::Poe, true) => "MVAE+TMC",
        (FusionMode::Moe, false) => "MMVAE",
        (FusionMode::Moe, true) => "MMVAE+TMC",
        (FusionMode::Mopoe, false) => "MoPoE-VAE",
        (FusionMode::Mopoe, true) => "TMC-VAE",
    }
}

fn label_of(model: &ModelConfig) -> &'static str {
    run_label(model.fusion, model.effective_beta() > 0.0)
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub run: String,
    pub epoch: usize,
    pub split: String,
    pub loss: LossBreakdown,
    pub accuracy: f64,
    /// Mean cosine between complete and task-related posterior means.
    pub similarity: Option<f64>,
}

pub const METRICS_HEADER: &str = "run,epoch,split,recon,kl,bce,tmc,total,accuracy,similarity";

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        let sim = self.similarity.map(|s| format!("{s:.9}")).unwrap_or_default();
        format!(
            "{},{},{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{}",
            self.run, self.epoch, self.split, l.recon_total, l.kl, l.bce, l.tmc, l.total, self.accuracy, sim
        )
    }
}

/// Accuracy and, with labels, the representation similarity on one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub accuracy: f64,
    pub similarity: Option<f64>,
}

pub fn accuracy(predicted: &[u8], labels: &[u8]) -> f64 {
    let correct = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    correct as f64 / labels.len() as f64
}

/// Mean row-wise cosine similarity of two equal-shaped matrices.
pub fn mean_cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() || a.rank() != 2 {
        return Err(Error::dim(format!("cannot compare {:?} with {:?}", a.shape(), b.shape())));
    }
    let n = a.shape()[0];
    let mut total = 0.0;
    for r in 0..n {
        total += cosine_similarity(a.row(r), b.row(r))?;
    }
    Ok(total / n as f64)
}

pub const EVAL_CHUNK: usize = 256;

pub fn evaluate(model: &MultiViewVae, data: &Dataset, exec: Execution) -> Result<EvalReport> {
    let labels = data.labels()?;
    let predicted = model.predict(data, exec)?;
    let emb = model.embed(data, exec, EVAL_CHUNK)?;
    let similarity = match &emb.task_related {
        Some(t) => Some(mean_cosine(&emb.complete, t)?),
        None => None,
    };
    Ok(EvalReport {
        samples: data.len(),
        accuracy: accuracy(&predicted, labels),
        similarity,
    })
}

/// Batch-averaged loss terms over a whole dataset, from a fixed noise stream.
pub fn evaluate_loss(model: &MultiViewVae, data: &Dataset, batch_size: usize, seed: u64) -> Result<LossBreakdown> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = data.len();
    let mut bounds: Vec<(usize, usize)> = (0..n).step_by(batch_size).map(|s| (s, (s + batch_size).min(n))).collect();
    if bounds.len() > 1 && bounds.last().is_some_and(|(s, e)| e - s < 2) {
        let (_, end) = bounds.pop().expect("checked");
        bounds.last_mut().expect("more than one").1 = end;
    }
    let mut parts = Vec::with_capacity(bounds.len());
    for (s, e) in bounds {
        let pass = model.forward_train(&data.range(s, e)?, &mut rng)?;
        parts.push((e - s, pass.breakdown));
    }
    weighted_mean(&parts)
}

fn weighted_mean(parts: &[(usize, LossBreakdown)]) -> Result<LossBreakdown> {
    let total: usize = parts.iter().map(|(w, _)| w).sum();
    let first = &parts
        .first()
        .ok_or_else(|| Error::contract("no batches to average"))?
        .1;
    let avg = |f: &dyn Fn(&LossBreakdown) -> f64| -> f64 {
        parts.iter().map(|(w, b)| *w as f64 * f(b)).sum::<f64>() / total as f64
    };
    let recon = (0..first.recon.len()).map(|i| avg(&|b| b.recon[i])).collect();
    LossBreakdown::new(recon, avg(&|b| b.kl), avg(&|b| b.bce), avg(&|b| b.tmc), first.alpha, first.beta)
}

/// Result of a completed training run.
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy.
    pub model: MultiViewVae,
    pub best_epoch: usize,
    pub history: Vec<MetricsRecord>,
    /// Wall-clock seconds per epoch.
    pub epoch_seconds: Vec<f64>,
    pub test: EvalReport,
}

impl TrainOutcome {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.history {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("epoch,seconds\n");
        for (i, t) in self.epoch_seconds.iter().enumerate() {
            let _ = writeln!(s, "{},{t:.3}", i + 1);
        }
        s
    }
}

/// Per-epoch progress callback: `(epoch, train record, validation record)`.
pub type Progress<'a> = &'a mut dyn FnMut(usize, &MetricsRecord, &MetricsRecord);

/// Trains on `splits.train` with Adam, keeping the parameters with the best
/// validation accuracy, and evaluates them on `splits.test`.
pub fn train(config: &RunConfig, splits: &Splits, exec: Execution, mut progress: Option<Progress>) -> Result<TrainOutcome> {
    config.validate()?;
    let train = &splits.train;
    let labels = train.labels()?;
    let batch = config.batch_size.min(train.len());
    if batch < 2 {
        return Err(Error::Config("training split needs at least two samples".into()));
    }
    let run = label_of(&config.model).to_string();
    let mut model = MultiViewVae::new(config.model.clone(), config.seed)?;
    let mut adam = Adam::new(config.optimizer);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
    noise_rng.set_stream(2);

    let mut history = Vec::new();
    let mut seconds = Vec::new();
    let mut best: Option<(f64, usize, Vec<Parameter>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut parts = Vec::new();
        let mut correct = 0usize;
        let mut seen = 0usize;
        for (b, idx) in order.chunks_exact(batch).enumerate() {
            let data = train.select(idx)?;
            let pass = model.forward_train(&data, &mut noise_rng)?;
            if !pass.breakdown.total.is_finite() || !pass.tape.value(pass.loss).is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b + 1 });
            }
            let probs = pass.tape.value(pass.prediction).data();
            for (&p, &i) in probs.iter().zip(idx) {
                correct += usize::from((if p >= 0.5 { 0 } else { 1 }) == labels[i]);
            }
            seen += idx.len();
            model.accumulate_gradients(&pass)?;
            adam.step(model.params_mut())?;
            optim::zero_grad(model.params_mut());
            parts.push((idx.len(), pass.breakdown));
        }
        let train_record = MetricsRecord {
            run: run.clone(),
            epoch,
            split: "train".into(),
            loss: weighted_mean(&parts)?,
            accuracy: correct as f64 / seen as f64,
            similarity: None,
        };
        let val_eval = evaluate(&model, &splits.val, exec)?;
        let val_loss = evaluate_loss(&model, &splits.val, batch, config.seed ^ 0x5eed)?;
        let val_record = MetricsRecord {
            run: run.clone(),
            epoch,
            split: "val".into(),
            loss: val_loss,
            accuracy: val_eval.accuracy,
            similarity: val_eval.similarity,
        };
        seconds.push(started.elapsed().as_secs_f64());
        if let Some(cb) = progress.as_mut() {
            cb(epoch, &train_record, &val_record);
        }
        log::info!(
            "{run} epoch {epoch}: train loss {:.4}, val accuracy {:.4}",
            train_record.loss.total,
            val_record.accuracy
        );
        history.push(train_record);
        history.push(val_record);
        let improved = best.as_ref().is_none_or(|(acc, _, _)| val_eval.accuracy > *acc);
        if improved {
            best = Some((val_eval.accuracy, epoch, model.params().to_vec()));
        } else if best.as_ref().is_some_and(|(_, e, _)| epoch - e >= config.patience) {
            log::info!("{run}: stopping early at epoch {epoch}");
            break;
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    model.load_values(params.into_iter().map(|p| (p.name, p.value)).collect())?;
    let test = evaluate(&model, &splits.test, exec)?;
    Ok(TrainOutcome {
        model,
        best_epoch,
        history,
        epoch_seconds: seconds,
        test,
    })
}

/// Writes `metrics.csv`, `timing.csv`, `test.csv` and the best checkpoint under `dir`.
pub fn write_outcome(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("metrics.csv", outcome.metrics_csv())?;
    write("timing.csv", outcome.timing_csv())?;
    let t = &outcome.test;
    write(
        "test.csv",
        format!(
            "run,best_epoch,samples,accuracy,similarity\n{},{},{},{:.9},{}\n",
            label_of(outcome.model.config()),
            outcome.best_epoch,
            t.samples,
            t.accuracy,
            t.similarity.map(|s| format!("{s:.9}")).unwrap_or_default()
        ),
    )?;
    io::save_checkpoint(&dir.join("checkpoint"), &outcome.model)
}

/// Settings of the small MLP fitted on task-related representations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 64,
            epochs: 30,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
        }
    }
}

fn probe_forward(tape: &mut Tape, vars: &[crate::autodiff::Var], x: &Tensor) -> Result<crate::autodiff::Var> {
    let n = x.shape()[0];
    let ones = tape.constant(Tensor::ones(vec![n, 1])?);
    let mut h = tape.constant(x.clone());
    for layer in 0..3 {
        let (w, b) = (vars[2 * layer], vars[2 * layer + 1]);
        let y = tape.matmul(h, w)?;
        let bias = tape.matmul(ones, b)?;
        h = tape.add(y, bias)?;
        if layer < 2 {
            h = tape.relu(h);
        }
    }
    Ok(tape.sigmoid(h))
}

/// Fits a three-layer MLP that predicts the attended position from `train_x`
/// and reports its accuracy on `test_x`.
pub fn probe_accuracy(train_x: &Tensor, train_y: &[u8], test_x: &Tensor, test_y: &[u8], cfg: ProbeConfig) -> Result<f64> {
    use rand_distr::{Distribution, Uniform};
    let d = train_x.shape()[1];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dims = [(d, cfg.hidden), (cfg.hidden, cfg.hidden), (cfg.hidden, 1)];
    let mut params = Vec::new();
    for (i, &(fan_in, out)) in dims.iter().enumerate() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let mut draw = |shape: Vec<usize>| -> Result<Tensor> {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| u.sample(&mut rng)).collect())
        };
        params.push(Parameter::new(format!("probe.{i}.weight"), draw(vec![fan_in, out])?));
        params.push(Parameter::new(format!("probe.{i}.bias"), draw(vec![1, out])?));
    }
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let n = train_x.shape()[0];
    let batch = cfg.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let rows = |x: &Tensor, idx: &[usize]| -> Result<Tensor> {
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(x.row(i));
        }
        Tensor::new(vec![idx.len(), d], data)
    };
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks_exact(batch) {
            let mut tape = Tape::new();
            let vars = optim::bind(&mut tape, &params);
            let p = probe_forward(&mut tape, &vars, &rows(train_x, idx)?)?;
            let targets: Vec<f64> = idx.iter().map(|&i| 1.0 - train_y[i] as f64).collect();
            let loss = bce_node(&mut tape, p, &targets)?;
            let grads = tape.backward(loss)?;
            optim::accumulate(&mut params, &vars, &grads);
            adam.step(&mut params)?;
            optim::zero_grad(&mut params);
        }
    }
    let mut tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|p| tape.constant(p.value.clone())).collect();
    let p = probe_forward(&mut tape, &vars, test_x)?;
    let predicted: Vec<u8> = tape.value(p).data().iter().map(|&v| if v >= 0.5 { 0 } else { 1 }).collect();
    Ok(accuracy(&predicted, test_y))
}

/// Evaluation with the label-aware extras: similarity between complete and
/// task-related means, and a probe trained on task-related means of `train`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticReport {
    pub eval: EvalReport,
    pub similarity: f64,
    pub task_probe_accuracy: f64,
}

pub fn diagnose(model: &MultiViewVae, train: &Dataset, test: &Dataset, exec: Execution, probe: ProbeConfig) -> Result<DiagnosticReport> {
    let eval = evaluate(model, test, exec)?;
    let tr = model.embed(train, exec, EVAL_CHUNK)?;
    let te = model.embed(test, exec, EVAL_CHUNK)?;
    let (Some(tr_t), Some(te_t)) = (tr.task_related, te.task_related.as_ref()) else {
        return Err(Error::contract("diagnostics need labeled data"));
    };
    let task_probe_accuracy = probe_accuracy(&tr_t, train.labels()?, te_t, test.labels()?, probe)?;
    Ok(DiagnosticReport {
        similarity: mean_cosine(&te.complete, te_t)?,
        eval,
        task_probe_accuracy,
    })
}

/// One-tailed p-value for `mean(a) > mean(b)` from the pooled two-sample t statistic.
pub fn one_tailed_t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::contract("t-test needs at least two observations per group"));
    }
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let ss = |x: &[f64], m: f64| x.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    let (ma, mb) = (mean(a), mean(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let df = na + nb - 2.0;
    let pooled = (ss(a, ma) + ss(b, mb)) / df;
    let se = (pooled * (1.0 / na + 1.0 / nb)).sqrt();
    let diff = ma - mb;
    if se == 0.0 {
        return Ok(if diff > 0.0 {
            0.0
        } else if diff < 0.0 {
            1.0
        } else {
            0.5
        });
    }
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(1.0 - dist.cdf(diff / se))
}

/// Test metrics of one ablation cell for one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub fusion: FusionMode,
    pub tmc: bool,
    pub seed: u64,
    pub accuracy: f64,
    pub similarity: f64,
    pub best_epoch: usize,
    pub data_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub fusion: FusionMode,
    pub tmc: bool,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub similarity_mean: f64,
    pub similarity_std: f64,
    /// One-tailed p-value that this cell beats the same fusion without TMC; only on TMC rows.
    pub p_accuracy: Option<f64>,
    pub p_similarity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub runs: Vec<AblationRun>,
    pub cells: Vec<AblationCell>,
    pub data_hash: String,
}

pub const ABLATION_GRID: [(FusionMode, bool); 6] = [
    (FusionMode::Poe, false),
    (FusionMode::Poe, true),
    (FusionMode::Moe, false),
    (FusionMode::Moe, true),
    (FusionMode::Mopoe, false),
    (FusionMode::Mopoe, true),
];

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let var = if x.len() > 1 {
        x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Trains every fusion mode with and without the contrastive term for every seed,
/// all on the same data.
pub fn ablate(base: &RunConfig, data: &PreparedData, exec: Execution) -> Result<AblationResult> {
    let seeds = base.grid_seeds();
    let mut jobs = Vec::new();
    for &seed in &seeds {
        for &(fusion, tmc) in &ABLATION_GRID {
            jobs.push((seed, fusion, tmc));
        }
    }
    let results = exec.map(&jobs, |&(seed, fusion, tmc)| -> Result<AblationRun> {
        let mut config = base.clone();
        config.seed = seed;
        config.model.fusion = fusion;
        config.model.tmc = tmc;
        let outcome = train(&config, &data.splits, Execution::Sequential, None)?;
        Ok(AblationRun {
            fusion,
            tmc,
            seed,
            accuracy: outcome.test.accuracy,
            similarity: outcome.test.similarity.unwrap_or(f64::NAN),
            best_epoch: outcome.best_epoch,
            data_hash: data.hash.clone(),
        })
    });
    let runs: Vec<AblationRun> = results.into_iter().collect::<Result<_>>()?;
    let pick = |fusion: FusionMode, tmc: bool, f: fn(&AblationRun) -> f64| -> Vec<f64> {
        runs.iter().filter(|r| r.fusion == fusion && r.tmc == tmc).map(f).collect()
    };
    let mut cells = Vec::with_capacity(6);
    for &(fusion, tmc) in &ABLATION_GRID {
        let acc = pick(fusion, tmc, |r| r.accuracy);
        let sim = pick(fusion, tmc, |r| r.similarity);
        let (am, asd) = mean_std(&acc);
        let (sm, ssd) = mean_std(&sim);
        let (p_accuracy, p_similarity) = if tmc && seeds.len() >= 2 {
            (
                Some(one_tailed_t_test(&acc, &pick(fusion, false, |r| r.accuracy))?),
                Some(one_tailed_t_test(&sim, &pick(fusion, false, |r| r.similarity))?),
            )
        } else {
            (None, None)
        };
        cells.push(AblationCell {
            fusion,
            tmc,
            accuracy_mean: am,
            accuracy_std: asd,
            similarity_mean: sm,
            similarity_std: ssd,
            p_accuracy,
            p_similarity,
        });
    }
    Ok(AblationResult {
        runs,
        cells,
        data_hash: data.hash.clone(),
    })
}

impl AblationResult {
    pub fn summary_csv(&self, seeds: usize) -> String {
        let mut s = String::from(
            "method,fusion,tmc,seeds,accuracy_mean,accuracy_std,similarity_mean,similarity_std,p_accuracy,p_similarity,data_hash\n",
        );
        let opt = |p: Option<f64>| p.map(|v| format!("{v:.6}")).unwrap_or_default();
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{},{}",
                method_name(c.fusion, c.tmc),
                c.fusion,
                if c.tmc { "on" } else { "off" },
                seeds,
                c.accuracy_mean,
                c.accuracy_std,
                c.similarity_mean,
                c.similarity_std,
                opt(c.p_accuracy),
                opt(c.p_similarity),
                self.data_hash
            );
        }
        s
    }

    pub fn runs_csv(&self) -> String {
        let mut s = String::from("method,fusion,tmc,seed,accuracy,similarity,best_epoch,data_hash\n");
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.9},{:.9},{},{}",
                method_name(r.fusion, r.tmc),
                r.fusion,
                if r.tmc { "on" } else { "off" },
                r.seed,
                r.accuracy,
                r.similarity,
                r.best_epoch,
                r.data_hash
            );
        }
        s
    }
}

/// Writes complete (and, with labels, task-related) posterior means as one MVT1
/// matrix plus a CSV index of `sample_id,kind,label`. Returns the row count.
pub fn export_embeddings(model: &MultiViewVae, data: &Dataset, out: &Path, exec: Execution) -> Result<usize> {
    let Embeddings {
        complete,
        task_related,
        ..
    } = model.embed(data, exec, EVAL_CHUNK)?;
    let d = model.config().latent_dim;
    let mut rows = Vec::new();
    let mut index = String::from("sample_id,kind,label\n");
    for i in 0..data.len() {
        let label = data.labels.as_ref().map(|l| l[i].to_string()).unwrap_or_default();
        rows.extend_from_slice(complete.row(i));
        let _ = writeln!(index, "{},complete,{label}", data.ids[i]);
        if let Some(t) = &task_related {
            rows.extend_from_slice(t.row(i));
            let _ = writeln!(index, "{},task_related,{label}", data.ids[i]);
        }
    }
    let n = rows.len() / d;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    TensorFile::new(vec![n, d], Payload::F64(rows))?.write(&out.join("embeddings.mvt"))?;
    let p = out.join("embeddings.csv");
    fs::write(&p, index).map_err(|e| Error::io(&p, e))?;
    Ok(n)
}
