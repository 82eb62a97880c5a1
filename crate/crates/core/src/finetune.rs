//! Supervised operator training under a labeled-sample budget, and the
//! evaluation metrics: relative L2, generalization gap and rollout error.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nopt_diff::{Adam, ParamId, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{split, ChannelStats, Dataset, Field, FieldData, Trajectory};
use crate::error::{io_err, shape_err, Error, Result};
use crate::fno::{load_checkpoint, CheckpointStage, FnoConfig, FnoModel, Provenance, TimeAdapter};
use crate::runtime::{derive_seed, with_pool};

const STREAM_SHUFFLE: u64 = 31;

pub const RESULTS_HEADER: [&str; 10] = [
    "pde",
    "init",
    "n",
    "seed",
    "train_rl2",
    "test_rl2",
    "gap",
    "rollout_step",
    "rollout_rl2",
    "secs",
];

/// Where the operator's weights start.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "checkpoint", rename_all = "snake_case")]
pub enum InitMode {
    Random,
    Pretrained(PathBuf),
    /// Pretrained encoder kept fixed; only the head trains.
    Frozen(PathBuf),
}

impl InitMode {
    pub fn label(&self) -> &'static str {
        match self {
            InitMode::Random => "random",
            InitMode::Pretrained(_) => "pretrained",
            InitMode::Frozen(_) => "frozen",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub pde: String,
    pub init: InitMode,
    /// Labeled samples drawn from the front of the training split.
    pub n: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Seed of the train/test split, shared by runs that are compared.
    pub split_seed: u64,
    pub test_fraction: f64,
    /// Architecture of randomly initialized models.
    pub config: FnoConfig,
    pub adapter: TimeAdapter,
    /// Rollout horizon for next-step forecasters; `None` uses every
    /// available solution frame.
    pub rollout_steps: Option<usize>,
    pub threads: usize,
}

impl TrainRun {
    pub fn batch(&self) -> usize {
        self.n.clamp(1, 32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub train_rl2: f64,
    pub test_rl2: f64,
    pub gap: f64,
    /// Mean relative L2 at each rollout step (empty for one-shot tasks).
    pub rollout: Vec<f64>,
    pub secs: f64,
    pub seed: u64,
    pub n: usize,
}

impl EvalReport {
    pub fn new(train_rl2: f64, test_rl2: f64, rollout: Vec<f64>, secs: f64, seed: u64, n: usize) -> Self {
        Self {
            train_rl2,
            test_rl2,
            gap: test_rl2 - train_rl2,
            rollout,
            secs,
            seed,
            n,
        }
    }
}

/// Test error minus training error.
pub fn generalization_gap(report: &EvalReport) -> f64 {
    report.test_rl2 - report.train_rl2
}

/// `‖pred − truth‖₂ / ‖truth‖₂` for one sample, accumulated in `f64`.
pub fn relative_l2_field(pred: &Field, truth: &Field) -> Result<f64> {
    if (pred.channels(), pred.h(), pred.w()) != (truth.channels(), truth.h(), truth.w()) {
        return Err(shape_err(
            "prediction",
            format!("{}x{}x{}", truth.channels(), truth.h(), truth.w()),
            format!("{}x{}x{}", pred.channels(), pred.h(), pred.w()),
        ));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let (p, t) = (p as f64, t as f64);
        num += (p - t) * (p - t);
        den += t * t;
    }
    if den == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((num / den).sqrt())
}

/// Per-sample relative L2, averaged over samples.
pub fn relative_l2(pred: &[Field], truth: &[Field]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(shape_err("sample count", truth.len(), pred.len()));
    }
    let mut sum = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        sum += relative_l2_field(p, t)?;
    }
    Ok(sum / pred.len() as f64)
}

/// Operator inputs and targets of the labeled samples of `ds`.
pub fn pairs(ds: &Dataset, adapter: &TimeAdapter) -> Result<(Vec<Field>, Vec<Field>)> {
    let mut xs = Vec::with_capacity(ds.len());
    let mut ys = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        let sol = s.solution.as_ref().ok_or(Error::Unlabeled)?;
        xs.push(adapter.input(&s.input, &ds.grid)?);
        ys.push(adapter.target(sol)?);
    }
    Ok((xs, ys))
}

/// Model outputs for a list of inputs, in order.
pub fn predict_all(model: &FnoModel<f32>, xs: &[Field]) -> Result<Vec<Field>> {
    xs.par_iter().map(|x| model.forward(x)).collect()
}

/// Mean relative L2 of `model` on the labeled samples of `ds`.
pub fn evaluate(model: &FnoModel<f32>, ds: &Dataset, adapter: &TimeAdapter) -> Result<f64> {
    let (xs, ys) = pairs(ds, adapter)?;
    relative_l2(&predict_all(model, &xs)?, &ys)
}

fn sample_grads(model: &FnoModel<f32>, x: &Field, y: &Field) -> Result<(f64, Vec<(ParamId, Tensor<f32>)>)> {
    let input = model.input_tensor(x)?;
    let target = Tensor::from_vec(&[y.channels(), y.h(), y.w()], y.data().to_vec())?;
    let mut tape = Tape::new();
    let xv = tape.constant(input);
    let yv = tape.constant(target);
    let out = model.record_forward(&mut tape, xv)?;
    let loss = tape.relative_l2(out, yv)?;
    let value = tape.value(loss).item() as f64;
    Ok((value, tape.backward(loss)?.into_param_grads()))
}

/// Accumulates the batch-mean relative-L2 gradient and returns the mean loss.
pub fn supervised_step(model: &mut FnoModel<f32>, xs: &[&Field], ys: &[&Field]) -> Result<f64> {
    let m: &FnoModel<f32> = model;
    let results = xs
        .par_iter()
        .zip(ys.par_iter())
        .map(|(x, y)| sample_grads(m, x, y))
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / xs.len() as f32;
    let mut total = 0.0;
    for (l, g) in &results {
        total += l;
        model.store.accumulate_detached(g, scale);
    }
    Ok(total / xs.len() as f64)
}

/// Builds the starting model for `run`; input statistics come from the
/// checkpoint when there is one, else from `train_inputs`.
pub fn init_model(run: &TrainRun, train_inputs: &[Field], train_targets: &[Field]) -> Result<FnoModel<f32>> {
    let out = run.adapter.out_channels();
    let mut model = match &run.init {
        InitMode::Random => {
            let mut cfg = run.config.clone();
            cfg.in_channels = run.adapter.in_channels();
            cfg.out_channels = out;
            FnoModel::new(cfg, run.seed, true, false)?
        }
        InitMode::Pretrained(path) | InitMode::Frozen(path) => {
            let (mut m, _) = load_checkpoint(path)?;
            if m.config().in_channels != run.adapter.in_channels() {
                return Err(shape_err("checkpoint input channels", run.adapter.in_channels(), m.config().in_channels));
            }
            m.discard_decoder();
            m.attach_head(out, run.seed);
            m.unfreeze();
            if matches!(run.init, InitMode::Frozen(_)) {
                m.freeze_encoder();
            }
            m
        }
    };
    if model.input_norm.is_none() {
        let items: Vec<FieldData> = train_inputs.iter().cloned().map(FieldData::from).collect();
        model.input_norm = Some(ChannelStats::of(&items)?);
    }
    let items: Vec<FieldData> = train_targets.iter().cloned().map(FieldData::from).collect();
    model.output_norm = Some(ChannelStats::of(&items)?);
    Ok(model)
}

/// The trained model, its provenance and the evaluation report.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: FnoModel<f32>,
    pub provenance: Provenance,
    pub report: EvalReport,
}

/// Trains on the first `n` samples of the seeded training split and
/// evaluates on the test split.
pub fn train_supervised(ds: &Dataset, run: &TrainRun) -> Result<TrainOutcome> {
    if !ds.is_labeled() {
        return Err(Error::Unlabeled);
    }
    let frac = run.test_fraction;
    let (train_split, _, test) = split(ds, [1.0 - frac, 0.0, frac], run.split_seed)?;
    if run.n == 0 || run.n > train_split.len() {
        return Err(Error::Budget {
            n: run.n,
            available: train_split.len(),
        });
    }
    let train = train_split.subset(&(0..run.n).collect::<Vec<_>>());
    let start = Instant::now();
    let (xs, ys) = pairs(&train, &run.adapter)?;
    let mut model = init_model(run, &xs, &ys)?;
    let adam = Adam::with_lr(run.lr);
    let batch = run.batch();
    let report = with_pool(run.threads, || -> Result<EvalReport> {
        let mut order: Vec<usize> = (0..xs.len()).collect();
        for epoch in 0..run.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(run.seed, STREAM_SHUFFLE, epoch as u64));
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch) {
                let bx: Vec<&Field> = chunk.iter().map(|&i| &xs[i]).collect();
                let by: Vec<&Field> = chunk.iter().map(|&i| &ys[i]).collect();
                supervised_step(&mut model, &bx, &by)?;
                let ids = model.trainable();
                adam.step(&mut model.store, &ids);
            }
        }
        let train_rl2 = relative_l2(&predict_all(&model, &xs)?, &ys)?;
        let test_rl2 = evaluate(&model, &test, &run.adapter)?;
        let rollout = match run.adapter {
            TimeAdapter::NextStep { .. } => rollout_dataset(&model, &test, run.rollout_steps)?,
            _ => Vec::new(),
        };
        Ok(EvalReport::new(
            train_rl2,
            test_rl2,
            rollout,
            start.elapsed().as_secs_f64(),
            run.seed,
            run.n,
        ))
    })?;
    Ok(TrainOutcome {
        model,
        provenance: Provenance {
            stage: CheckpointStage::Finetuned,
            seed: run.seed,
            epochs: run.epochs,
            fingerprint: train.fingerprint(),
            adapter: Some(run.adapter),
        },
        report,
    })
}

/// Autoregressive forecast: each prediction is appended to the window and
/// the oldest frame dropped. Returns the predicted frames and the relative L2
/// against `truth` at every step.
pub fn rollout_with(
    predict: impl Fn(&Trajectory) -> Result<Field>,
    window: &Trajectory,
    truth: &Trajectory,
    steps: usize,
) -> Result<(Trajectory, Vec<f64>)> {
    if truth.len() < steps {
        return Err(Error::RolloutTooLong {
            available: truth.len(),
            steps,
        });
    }
    if steps == 0 {
        return Err(Error::Param("rollout needs at least one step".into()));
    }
    let mut frames = window.frames().to_vec();
    let mut preds = Vec::with_capacity(steps);
    let mut errors = Vec::with_capacity(steps);
    for t in 0..steps {
        let w = Trajectory::new(frames.clone(), window.dt())?;
        let next = predict(&w)?;
        errors.push(relative_l2_field(&next, truth.frame(t))?);
        frames.remove(0);
        frames.push(next.clone());
        preds.push(next);
    }
    Ok((Trajectory::new(preds, window.dt())?, errors))
}

pub fn rollout(model: &FnoModel<f32>, window: &Trajectory, truth: &Trajectory, steps: usize) -> Result<(Trajectory, Vec<f64>)> {
    rollout_with(|w| model.forward(&w.fold()), window, truth, steps)
}

/// Mean per-step rollout error over the samples of `ds`.
pub fn rollout_dataset(model: &FnoModel<f32>, ds: &Dataset, steps: Option<usize>) -> Result<Vec<f64>> {
    let per_sample = ds
        .samples
        .par_iter()
        .map(|s| -> Result<Vec<f64>> {
            let (FieldData::Trajectory(window), Some(FieldData::Trajectory(truth))) = (&s.input, &s.solution) else {
                return Err(shape_err("rollout sample", "input and solution trajectories", "snapshots"));
            };
            Ok(rollout(model, window, truth, steps.unwrap_or(truth.len()))?.1)
        })
        .collect::<Result<Vec<_>>>()?;
    let Some(first) = per_sample.first() else {
        return Ok(Vec::new());
    };
    let mut mean = vec![0.0; first.len()];
    for errs in &per_sample {
        for (m, e) in mean.iter_mut().zip(errs) {
            *m += e;
        }
    }
    Ok(mean.iter().map(|m| m / per_sample.len() as f64).collect())
}

/// Appends report rows to a results CSV, writing the header for a new file.
/// Rollout errors give one row per step; otherwise the step fields are empty.
pub fn append_results(path: impl AsRef<Path>, pde: &str, init: &str, report: &EvalReport) -> Result<()> {
    let path = path.as_ref();
    let fresh = !path.exists() || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(RESULTS_HEADER)?;
    }
    let base = [
        pde.to_string(),
        init.to_string(),
        report.n.to_string(),
        report.seed.to_string(),
        format!("{:e}", report.train_rl2),
        format!("{:e}", report.test_rl2),
        format!("{:e}", report.gap),
    ];
    let secs = format!("{:.3}", report.secs);
    if report.rollout.is_empty() {
        let mut row = base.to_vec();
        row.extend([String::new(), String::new(), secs]);
        w.write_record(&row)?;
    } else {
        for (step, e) in report.rollout.iter().enumerate() {
            let mut row = base.to_vec();
            row.extend([(step + 1).to_string(), format!("{e:e}"), secs.clone()]);
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

#[cfg(test)]
mod tests;
