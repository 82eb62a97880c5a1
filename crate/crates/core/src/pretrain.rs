//! Reconstruction pretraining on unlabeled inputs: random masking followed by
//! a random-width Gaussian blur, with the clean input as the target.

use std::fs::File;
use std::path::Path;

use nopt_diff::{Adam, ParamId, Tape, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{normalize, ChannelStats, Dataset, Field, FieldData};
use crate::error::{io_err, Error, Result};
use crate::fno::{CheckpointStage, FnoModel, Provenance, TimeAdapter};
use crate::runtime::{derive_seed, with_pool};

const STREAM_SHUFFLE: u64 = 21;
const STREAM_STEP: u64 = 22;

/// Spatial unit hidden by the mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Pixel,
    /// Square patches of this side length.
    Patch(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskSpec {
    pub ratio: f64,
    pub granularity: Granularity,
    /// Value written into hidden locations, in normalized units.
    pub fill: f32,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            ratio: 0.0,
            granularity: Granularity::Pixel,
            fill: 0.0,
        }
    }
}

impl MaskSpec {
    pub fn pixel(ratio: f64) -> Self {
        Self {
            ratio,
            ..Self::default()
        }
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::Fraction(self.ratio));
        }
        if let Granularity::Patch(p) = self.granularity {
            if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
                return Err(Error::Param(format!("patch side {p} must divide {h}x{w}")));
            }
        }
        Ok(())
    }

    fn unit(&self) -> usize {
        match self.granularity {
            Granularity::Pixel => 1,
            Granularity::Patch(p) => p,
        }
    }
}

/// Blur widths are drawn uniformly from `[sigma_min, sigma_max]` grid cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurSpec {
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for BlurSpec {
    fn default() -> Self {
        Self {
            sigma_min: 0.0,
            sigma_max: 0.0,
        }
    }
}

impl BlurSpec {
    pub fn new(sigma_min: f64, sigma_max: f64) -> Self {
        Self { sigma_min, sigma_max }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min >= 0.0 && self.sigma_min <= self.sigma_max) {
            return Err(Error::Param(format!(
                "blur range [{}, {}] is invalid",
                self.sigma_min, self.sigma_max
            )));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut impl Rng) -> f64 {
        if self.sigma_max > self.sigma_min {
            rng.random_range(self.sigma_min..=self.sigma_max)
        } else {
            self.sigma_min
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    RelativeL2,
    Mse,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    #[default]
    MaskThenBlur,
    BlurThenMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub mask: MaskSpec,
    pub blur: BlurSpec,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub loss: LossKind,
    pub order: Order,
    pub threads: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mask: MaskSpec::default(),
            blur: BlurSpec::default(),
            epochs: 500,
            batch: 32,
            lr: 1e-3,
            seed: 1,
            loss: LossKind::RelativeL2,
            order: Order::MaskThenBlur,
            threads: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        self.mask.validate(h, w)?;
        self.blur.validate()?;
        if self.batch == 0 {
            return Err(Error::Param("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Hides exactly `round(ratio · units)` spatial units, chosen uniformly
/// without replacement, in every channel not flagged in `skip`. Returns the
/// masked field and the per-pixel mask.
pub fn apply_mask_with(field: &Field, spec: &MaskSpec, seed: u64, skip: &[bool]) -> Result<(Field, Vec<bool>)> {
    let (h, w) = (field.h(), field.w());
    spec.validate(h, w)?;
    let p = spec.unit();
    let (uh, uw) = (h / p, w / p);
    let units = uh * uw;
    let count = (spec.ratio * units as f64).round() as usize;
    let mut mask = vec![false; h * w];
    if count == 0 {
        return Ok((field.clone(), mask));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for u in sample(&mut rng, units, count) {
        let (uy, ux) = (u / uw, u % uw);
        for y in uy * p..(uy + 1) * p {
            mask[y * w + ux * p..y * w + (ux + 1) * p].fill(true);
        }
    }
    let mut out = field.clone();
    for c in 0..field.channels() {
        if skip.get(c).copied().unwrap_or(false) {
            continue;
        }
        for (v, &m) in out.channel_mut(c).iter_mut().zip(&mask) {
            if m {
                *v = spec.fill;
            }
        }
    }
    Ok((out, mask))
}

/// [`apply_mask_with`] over every channel.
pub fn apply_mask(field: &Field, spec: &MaskSpec, seed: u64) -> Result<(Field, Vec<bool>)> {
    apply_mask_with(field, spec, seed, &[])
}

/// Normalized Gaussian taps for offsets `-r..=r`, `r = ⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.iter().map(|t| t / s).collect()
}

fn convolve_periodic(line: &[f64], taps: &[f64], out: &mut [f64]) {
    let n = line.len() as i64;
    let r = (taps.len() / 2) as i64;
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (j, &t) in taps.iter().enumerate() {
            let k = (i as i64 + j as i64 - r).rem_euclid(n);
            acc += t * line[k as usize];
        }
        *o = acc;
    }
}

/// Separable periodic Gaussian blur of one `h×w` plane.
pub fn blur_plane(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let taps = gaussian_kernel(sigma);
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        convolve_periodic(&src[y * w..(y + 1) * w], &taps, &mut tmp[y * w..(y + 1) * w]);
    }
    let mut out = vec![0.0; h * w];
    let mut col = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = tmp[y * w + x];
        }
        convolve_periodic(&col, &taps, &mut col_out);
        for y in 0..h {
            out[y * w + x] = col_out[y];
        }
    }
    out
}

/// [`blur_plane`] on every channel not flagged in `skip`; `sigma = 0` is the
/// identity.
pub fn apply_blur_with(field: &Field, sigma: f64, skip: &[bool]) -> Result<Field> {
    if !(sigma >= 0.0) {
        return Err(Error::Param(format!("blur sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(field.clone());
    }
    let (h, w) = (field.h(), field.w());
    let mut out = field.clone();
    for c in 0..field.channels() {
        if skip.get(c).copied().unwrap_or(false) {
            continue;
        }
        let src: Vec<f64> = field.channel(c).iter().map(|&v| v as f64).collect();
        for (d, v) in out.channel_mut(c).iter_mut().zip(blur_plane(&src, h, w, sigma)) {
            *d = v as f32;
        }
    }
    Ok(out)
}

pub fn apply_blur(field: &Field, sigma: f64) -> Result<Field> {
    apply_blur_with(field, sigma, &[])
}

/// Mask and blur one normalized input for sample seed `seed`.
pub fn corrupt(x: &Field, cfg: &PretrainConfig, skip: &[bool], seed: u64) -> Result<Field> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = cfg.blur.draw(&mut rng);
    let mask_seed: u64 = rng.random();
    Ok(match cfg.order {
        Order::MaskThenBlur => {
            let (m, _) = apply_mask_with(x, &cfg.mask, mask_seed, skip)?;
            apply_blur_with(&m, sigma, skip)?
        }
        Order::BlurThenMask => {
            let b = apply_blur_with(x, sigma, skip)?;
            apply_mask_with(&b, &cfg.mask, mask_seed, skip)?.0
        }
    })
}

fn tensor_of(f: &Field) -> Tensor<f32> {
    Tensor::from_vec(&[f.channels(), f.h(), f.w()], f.data().to_vec()).expect("field layout")
}

/// Loss and parameter gradients of reconstructing `target` from `input`.
fn reconstruction_grads(
    model: &FnoModel<f32>,
    input: &Field,
    target: &Field,
    loss: LossKind,
) -> Result<(f64, Vec<(ParamId, Tensor<f32>)>)> {
    let mut tape = Tape::new();
    let x = tape.constant(tensor_of(input));
    let y = tape.constant(tensor_of(target));
    let latent = model.record_encode(&mut tape, x)?;
    let out = model.record_decode(&mut tape, latent)?;
    let l = match loss {
        LossKind::RelativeL2 => tape.relative_l2(out, y)?,
        LossKind::Mse => tape.mse(out, y)?,
    };
    let value = tape.value(l).item() as f64;
    Ok((value, tape.backward(l)?.into_param_grads()))
}

fn batch_step(model: &mut FnoModel<f32>, pairs: &[(Field, &Field)], loss: LossKind) -> Result<f64> {
    if !model.has_decoder() {
        return Err(Error::DecoderAbsent);
    }
    let m: &FnoModel<f32> = model;
    let results = pairs
        .par_iter()
        .map(|(x, y)| reconstruction_grads(m, x, y, loss))
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / pairs.len() as f32;
    let mut total = 0.0;
    for (l, g) in &results {
        total += l;
        model.store.accumulate_detached(g, scale);
    }
    Ok(total / pairs.len() as f64)
}

/// One reconstruction step over normalized inputs: sample `i` is corrupted
/// with seed `derive_seed(seed, i)` and the batch-mean loss is returned.
/// Gradients are accumulated into the store; the optimizer is not run.
pub fn pretrain_step(
    model: &mut FnoModel<f32>,
    batch: &[Field],
    cfg: &PretrainConfig,
    skip: &[bool],
    seed: u64,
) -> Result<f64> {
    let corrupted = batch
        .par_iter()
        .enumerate()
        .map(|(i, x)| corrupt(x, cfg, skip, derive_seed(seed, STREAM_STEP, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(Field, &Field)> = corrupted.into_iter().zip(batch).collect();
    batch_step(model, &pairs, cfg.loss)
}

/// Plain autoencoding of normalized inputs, for comparison with the
/// unperturbed pretraining step.
pub fn autoencode_step(model: &mut FnoModel<f32>, batch: &[Field], loss: LossKind) -> Result<f64> {
    let pairs: Vec<(Field, &Field)> = batch.iter().map(|x| (x.clone(), x)).collect();
    batch_step(model, &pairs, loss)
}

/// Outcome of a pretraining run.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOutcome {
    pub provenance: Provenance,
    /// Mean training loss per epoch, starting at epoch 1.
    pub losses: Vec<f64>,
}

/// Model inputs of every sample, adapted and normalized with the model's
/// input statistics (set from this data when absent).
pub fn prepare_inputs(ds: &Dataset, model: &mut FnoModel<f32>, adapter: &TimeAdapter) -> Result<Vec<Field>> {
    let raw = ds
        .samples
        .iter()
        .map(|s| adapter.input(&s.input, &ds.grid))
        .collect::<Result<Vec<_>>>()?;
    if model.input_norm.is_none() {
        let items: Vec<FieldData> = raw.iter().cloned().map(FieldData::from).collect();
        model.input_norm = Some(ChannelStats::of(&items)?);
    }
    let stats = model.input_norm.as_ref().expect("input statistics");
    raw.iter().map(|f| normalize(f, stats)).collect()
}

/// Epoch loop with seeded shuffling. Solutions, if any, are ignored.
pub fn train_pretrain(
    ds: &Dataset,
    model: &mut FnoModel<f32>,
    cfg: &PretrainConfig,
    adapter: &TimeAdapter,
) -> Result<PretrainOutcome> {
    cfg.validate(ds.grid.h, ds.grid.w)?;
    if ds.is_empty() {
        return Err(Error::Param("pretraining needs at least one sample".into()));
    }
    if !model.has_decoder() {
        return Err(Error::DecoderAbsent);
    }
    let inputs = prepare_inputs(ds, model, adapter)?;
    let skip = adapter.coordinate_channels();
    let adam = Adam::with_lr(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.epochs);
    with_pool(cfg.threads, || -> Result<()> {
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        for epoch in 0..cfg.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SHUFFLE, epoch as u64));
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            for (b, chunk) in order.chunks(cfg.batch).enumerate() {
                let batch: Vec<Field> = chunk.iter().map(|&i| inputs[i].clone()).collect();
                let step_seed = derive_seed(cfg.seed, epoch as u64, b as u64);
                let l = pretrain_step(model, &batch, cfg, &skip, step_seed)?;
                let ids = model.trainable();
                adam.step(&mut model.store, &ids);
                sum += l * chunk.len() as f64;
            }
            losses.push(sum / inputs.len() as f64);
        }
        Ok(())
    })?;
    Ok(PretrainOutcome {
        provenance: Provenance {
            stage: CheckpointStage::Pretrained,
            seed: cfg.seed,
            epochs: cfg.epochs,
            fingerprint: ds.fingerprint(),
            adapter: Some(*adapter),
        },
        losses,
    })
}

/// Writes an `epoch,loss` curve.
pub fn write_loss_csv(losses: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["epoch", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{l:e}")])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

#[cfg(test)]
mod tests;
