//! Fourier neural operator: pointwise lifting, truncated spectral blocks and a
//! two-layer projection head, with an optional pretraining decoder.

mod adapter;
mod checkpoint;

use nopt_diff::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use adapter::{coordinate_channels, next_step_input, one_shot_input, predict_trajectory, TimeAdapter};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointStage, Provenance, CHECKPOINT_FILE, WEIGHTS_FILE};

use crate::datamodel::{ChannelStats, Field};
use crate::error::{shape_err, Error, Result};
use crate::runtime::derive_seed;

const STREAM_ENCODER: u64 = 11;
const STREAM_HEAD: u64 = 12;
const STREAM_DECODER: u64 = 13;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FnoConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    pub modes1: usize,
    pub modes2: usize,
    pub layers: usize,
    /// Hidden width of the projection head; its activations are the
    /// backbone features.
    pub proj_hidden: usize,
}

impl FnoConfig {
    /// Desk-scale defaults: width 32, 12×12 modes, 4 spectral layers.
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            width: 32,
            modes1: 12,
            modes2: 12,
            layers: 4,
            proj_hidden: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.layers == 0 || self.proj_hidden == 0 {
            return Err(Error::Param(format!("degenerate operator config {self:?}")));
        }
        if self.width < self.in_channels.max(self.out_channels) {
            return Err(Error::Param(format!(
                "width {} is below the channel counts {}/{}",
                self.width, self.in_channels, self.out_channels
            )));
        }
        if self.modes1 == 0 || self.modes2 == 0 {
            return Err(Error::Param("at least one Fourier mode per axis".into()));
        }
        Ok(())
    }

    /// Modes must fit the `h×w` grid being processed.
    pub fn check_grid(&self, h: usize, w: usize) -> Result<()> {
        if self.modes1 > h / 2 || self.modes2 > w / 2 {
            return Err(Error::ModesTooLarge {
                modes1: self.modes1,
                modes2: self.modes2,
                h,
                w,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Pointwise {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Block {
    spectral: ParamId,
    bypass: Pointwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Head {
    fc1: Pointwise,
    fc2: Pointwise,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Decoder {
    blocks: Vec<Block>,
    out: Pointwise,
}

/// Model weights live in one [`ParamStore`]; the structs above hold ids.
#[derive(Clone, Debug, PartialEq)]
pub struct FnoModel<T: Scalar> {
    config: FnoConfig,
    pub store: ParamStore<T>,
    lift: Pointwise,
    blocks: Vec<Block>,
    head: Option<Head>,
    decoder: Option<Decoder>,
    frozen: bool,
    /// Applied to inputs before lifting.
    pub input_norm: Option<ChannelStats>,
    /// Inverted on outputs: the head predicts normalized targets.
    pub output_norm: Option<ChannelStats>,
}

/// Kaiming-uniform bound for `fan_in` inputs.
fn kaiming(rng: &mut ChaCha8Rng, fan_out: usize, fan_in: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..fan_out * fan_in).map(|_| rng.random_range(-bound..bound)).collect()
}

fn tensor<T: Scalar>(shape: &[usize], v: &[f64]) -> Tensor<T> {
    Tensor::from_vec(shape, v.iter().map(|&x| T::lit(x)).collect()).expect("init shape")
}

impl<T: Scalar> FnoModel<T> {
    /// Random initialization: encoder, head and (when `decoder`) the
    /// pretraining decoder, each from its own seed stream.
    pub fn new(config: FnoConfig, seed: u64, head: bool, decoder: bool) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_ENCODER, 0));
        let lift = Self::pointwise(&mut store, &mut rng, "lift", config.width, config.in_channels);
        let blocks = (0..config.layers)
            .map(|l| Self::block(&mut store, &mut rng, &format!("block{l}"), &config))
            .collect();
        let mut model = Self {
            config,
            store,
            lift,
            blocks,
            head: None,
            decoder: None,
            frozen: false,
            input_norm: None,
            output_norm: None,
        };
        if head {
            model.attach_head(model.config.out_channels, seed);
        }
        if decoder {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_DECODER, 0));
            let c = model.config.clone();
            let blocks = (0..c.layers)
                .map(|l| Self::block(&mut model.store, &mut rng, &format!("dec.block{l}"), &c))
                .collect();
            let out = Self::pointwise(&mut model.store, &mut rng, "dec.out", c.in_channels, c.width);
            model.decoder = Some(Decoder { blocks, out });
        }
        Ok(model)
    }

    fn pointwise(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cout: usize, cin: usize) -> Pointwise {
        let w = store.add(format!("{name}.w"), tensor(&[cout, cin], &kaiming(rng, cout, cin)));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Pointwise { w, b }
    }

    fn block(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, c: &FnoConfig) -> Block {
        let shape = [2 * c.modes1, c.modes2, c.width, c.width];
        let std = 1.0 / c.width as f64;
        let vals: Vec<T> = (0..2 * shape.iter().product::<usize>())
            .map(|_| T::lit(std * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let spectral = store.add(
            format!("{name}.spectral"),
            Tensor::from_interleaved(&shape, vals).expect("spectral shape"),
        );
        let bypass = Self::pointwise(store, rng, &format!("{name}.bypass"), c.width, c.width);
        Block { spectral, bypass }
    }

    /// Replaces the projection head with a fresh one mapping the latent width
    /// to `out_channels`.
    pub fn attach_head(&mut self, out_channels: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_HEAD, 0));
        let (hid, width) = (self.config.proj_hidden, self.config.width);
        if self.head.is_some() {
            self.retain(|name| !name.starts_with("head."));
        }
        let fc1 = Self::pointwise(&mut self.store, &mut rng, "head.fc1", hid, width);
        let fc2 = Self::pointwise(&mut self.store, &mut rng, "head.fc2", out_channels, hid);
        self.head = Some(Head { fc1, fc2 });
        self.config.out_channels = out_channels;
        self.output_norm = None;
    }

    /// Drops the pretraining decoder and its weights.
    pub fn discard_decoder(&mut self) {
        if self.decoder.take().is_some() {
            self.retain(|name| !name.starts_with("dec."));
        }
    }

    /// Rebuilds the store keeping parameters whose name passes `keep`, and
    /// remaps every id. Optimizer state is reset.
    fn retain(&mut self, keep: impl Fn(&str) -> bool) {
        let mut fresh = ParamStore::new();
        let mut map = vec![None; self.store.len()];
        for (id, p) in self.store.iter() {
            if keep(&p.name) {
                map[id.0] = Some(fresh.add(p.name.clone(), p.value.clone()));
            }
        }
        let re = |id: ParamId| map[id.0].expect("kept parameter");
        let rp = |p: Pointwise| Pointwise { w: re(p.w), b: re(p.b) };
        let rb = |b: Block| Block {
            spectral: re(b.spectral),
            bypass: rp(b.bypass),
        };
        self.lift = rp(self.lift);
        self.blocks = self.blocks.iter().map(|&b| rb(b)).collect();
        if let Some(h) = self.head {
            if map[h.fc1.w.0].is_some() {
                self.head = Some(Head {
                    fc1: rp(h.fc1),
                    fc2: rp(h.fc2),
                });
            } else {
                self.head = None;
            }
        }
        if let Some(d) = &self.decoder {
            if map[d.out.w.0].is_some() {
                self.decoder = Some(Decoder {
                    blocks: d.blocks.iter().map(|&b| rb(b)).collect(),
                    out: rp(d.out),
                });
            } else {
                self.decoder = None;
            }
        }
        self.store = fresh;
    }

    pub fn config(&self) -> &FnoConfig {
        &self.config
    }

    pub fn has_head(&self) -> bool {
        self.head.is_some()
    }

    pub fn has_decoder(&self) -> bool {
        self.decoder.is_some()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Excludes the lifting map and spectral blocks from optimization.
    pub fn freeze_encoder(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn encoder_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.lift.w, self.lift.b];
        for b in &self.blocks {
            ids.extend([b.spectral, b.bypass.w, b.bypass.b]);
        }
        ids
    }

    /// Parameters the optimizer should update.
    pub fn trainable(&self) -> Vec<ParamId> {
        let enc = self.encoder_ids();
        self.store
            .ids()
            .filter(|id| !(self.frozen && enc.contains(id)))
            .collect()
    }

    /// Checks `x` against the config and the grid, normalizes it and converts
    /// it to a `[C, H, W]` tensor.
    pub fn input_tensor(&self, x: &Field) -> Result<Tensor<T>> {
        if x.channels() != self.config.in_channels {
            return Err(shape_err("input channels", self.config.in_channels, x.channels()));
        }
        self.config.check_grid(x.h(), x.w())?;
        let x = match &self.input_norm {
            Some(st) => crate::datamodel::normalize(x, st)?,
            None => x.clone(),
        };
        Ok(Tensor::from_vec(
            &[x.channels(), x.h(), x.w()],
            x.data().iter().map(|&v| T::from_f32(v).expect("f32 value")).collect(),
        )?)
    }

    fn record_pointwise<'a>(&'a self, tape: &mut Tape<'a, T>, x: Var, p: Pointwise) -> Result<Var> {
        let w = tape.param(p.w, self.store.value(p.w));
        let b = tape.param(p.b, self.store.value(p.b));
        Ok(tape.affine(x, w, Some(b))?)
    }

    /// `σ(W_b·h + b + K(h))` where `K` keeps the corner modes and mixes
    /// channels per mode.
    fn record_block<'a>(&'a self, tape: &mut Tape<'a, T>, h: Var, b: Block) -> Result<Var> {
        let s = self.record_spectral(tape, h, b.spectral)?;
        let p = self.record_pointwise(tape, h, b.bypass)?;
        let sum = tape.add(s, p)?;
        Ok(tape.gelu(sum)?)
    }

    fn record_spectral<'a>(&'a self, tape: &mut Tape<'a, T>, h: Var, r: ParamId) -> Result<Var> {
        let shape = tape.value(h).shape().to_vec();
        let (hh, ww) = (shape[1], shape[2]);
        let z = tape.rfft2(h)?;
        let zt = tape.truncate_modes(z, self.config.modes1, self.config.modes2)?;
        let rv = tape.param(r, self.store.value(r));
        let mixed = tape.spectral_mix(zt, rv)?;
        let padded = tape.pad_modes(mixed, hh, ww / 2 + 1)?;
        Ok(tape.irfft2(padded)?)
    }

    /// Lifting plus the spectral blocks.
    pub fn record_encode<'a>(&'a self, tape: &mut Tape<'a, T>, x: Var) -> Result<Var> {
        let mut h = self.record_pointwise(tape, x, self.lift)?;
        for &b in &self.blocks {
            h = self.record_block(tape, h, b)?;
        }
        Ok(h)
    }

    /// Decoder blocks and the map back to the input channels.
    pub fn record_decode<'a>(&'a self, tape: &mut Tape<'a, T>, latent: Var) -> Result<Var> {
        let dec = self.decoder.as_ref().ok_or(Error::DecoderAbsent)?;
        let mut h = latent;
        for &b in &dec.blocks {
            h = self.record_block(tape, h, b)?;
        }
        self.record_pointwise(tape, h, dec.out)
    }

    /// First head layer and its ReLU: the backbone features.
    pub fn record_features<'a>(&'a self, tape: &mut Tape<'a, T>, latent: Var) -> Result<Var> {
        let head = self.head.ok_or(Error::HeadAbsent)?;
        let h = self.record_pointwise(tape, latent, head.fc1)?;
        Ok(tape.relu(h)?)
    }

    /// Projection head, then output denormalization.
    pub fn record_head<'a>(&'a self, tape: &mut Tape<'a, T>, latent: Var) -> Result<Var> {
        let head = self.head.ok_or(Error::HeadAbsent)?;
        let f = self.record_features(tape, latent)?;
        let out = self.record_pointwise(tape, f, head.fc2)?;
        match &self.output_norm {
            None => Ok(out),
            Some(st) => {
                let c = st.channels();
                let mut w = vec![T::zero(); c * c];
                let mut b = vec![T::zero(); c];
                for i in 0..c {
                    let (s, m) = if st.degenerate[i] { (1.0, 0.0) } else { (st.std[i], st.mean[i]) };
                    w[i * c + i] = T::lit(s);
                    b[i] = T::lit(m);
                }
                let wv = tape.constant(Tensor::from_vec(&[c, c], w)?);
                let bv = tape.constant(Tensor::from_vec(&[c], b)?);
                Ok(tape.affine(out, wv, Some(bv))?)
            }
        }
    }

    pub fn record_forward<'a>(&'a self, tape: &mut Tape<'a, T>, x: Var) -> Result<Var> {
        let latent = self.record_encode(tape, x)?;
        self.record_head(tape, latent)
    }

    fn run(&self, x: &Field, f: impl for<'a> FnOnce(&'a Self, &mut Tape<'a, T>, Var) -> Result<Var>) -> Result<Field> {
        let input = self.input_tensor(x)?;
        let mut tape = Tape::new();
        let xv = tape.constant(input);
        let out = f(self, &mut tape, xv)?;
        to_field(tape.value(out))
    }

    pub fn forward(&self, x: &Field) -> Result<Field> {
        self.run(x, |m, t, v| m.record_forward(t, v))
    }

    pub fn encode(&self, x: &Field) -> Result<Field> {
        self.run(x, |m, t, v| m.record_encode(t, v))
    }

    /// Reconstruction of a (normalized) input from its latent.
    pub fn decode_pretrain(&self, latent: &Field) -> Result<Field> {
        let t = Tensor::from_vec(
            &[latent.channels(), latent.h(), latent.w()],
            latent.data().iter().map(|&v| T::from_f32(v).expect("f32 value")).collect(),
        )?;
        let mut tape = Tape::new();
        let v = tape.constant(t);
        let out = self.record_decode(&mut tape, v)?;
        to_field(tape.value(out))
    }

    /// Activations right before the head's output layer.
    pub fn extract_backbone_features(&self, x: &Field) -> Result<Field> {
        self.run(x, |m, t, v| {
            let latent = m.record_encode(t, v)?;
            m.record_features(t, latent)
        })
    }

    /// The spectral operator of block `layer` alone, applied to `h`
    /// (`width` channels).
    pub fn spectral_conv(&self, layer: usize, h: &Field) -> Result<Field> {
        let r = self.blocks[layer].spectral;
        let t = Tensor::from_vec(
            &[h.channels(), h.h(), h.w()],
            h.data().iter().map(|&v| T::from_f32(v).expect("f32 value")).collect(),
        )?;
        let mut tape = Tape::new();
        let v = tape.constant(t);
        let out = self.record_spectral(&mut tape, v, r)?;
        to_field(tape.value(out))
    }

    /// Spectral weight id of block `layer`.
    pub fn spectral_weight(&self, layer: usize) -> ParamId {
        self.blocks[layer].spectral
    }

    /// Ids of the lifting weight and bias.
    pub fn lift_ids(&self) -> (ParamId, ParamId) {
        (self.lift.w, self.lift.b)
    }

    /// Sets every parameter to zero.
    pub fn zero_weights(&mut self) {
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            self.store.get_mut(id).value.fill_zero();
        }
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }
}

impl FnoModel<f64> {
    /// Central-difference check of every parameter tensor's gradient for
    /// `L = ⟨S₁, forward(x)⟩ + ⟨S₂, decode(encode(x))⟩` with random `S`.
    /// Returns `‖g − g_fd‖ / ‖g_fd‖` per parameter name.
    pub fn gradient_errors(&self, x: &Tensor<f64>, seed: u64) -> Result<Vec<(String, f64)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probe = |m: &Self| -> Result<Vec<Tensor<f64>>> {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let mut outs = Vec::new();
            let latent = m.record_encode(&mut tape, xv)?;
            if m.has_head() {
                outs.push(m.record_head(&mut tape, latent)?);
            }
            if m.has_decoder() {
                outs.push(m.record_decode(&mut tape, latent)?);
            }
            Ok(outs.into_iter().map(|o| tape.value(o).clone()).collect())
        };
        let seeds: Vec<Tensor<f64>> = probe(self)?
            .iter()
            .map(|t| {
                let mut s = t.clone();
                s.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
                s
            })
            .collect();
        let loss_of = |m: &Self| -> Result<f64> {
            Ok(probe(m)?
                .iter()
                .zip(&seeds)
                .map(|(o, s)| o.data().iter().zip(s.data()).map(|(a, b)| a * b).sum::<f64>())
                .sum())
        };
        let grads = {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let latent = self.record_encode(&mut tape, xv)?;
            let mut terms = Vec::new();
            let mut outs = Vec::new();
            if self.has_head() {
                outs.push(self.record_head(&mut tape, latent)?);
            }
            if self.has_decoder() {
                outs.push(self.record_decode(&mut tape, latent)?);
            }
            for (o, s) in outs.into_iter().zip(&seeds) {
                let sv = tape.constant(s.clone());
                let prod = tape.mul(o, sv)?;
                terms.push(tape.sum(prod)?);
            }
            let mut total = terms[0];
            for &t in &terms[1..] {
                total = tape.add(total, t)?;
            }
            tape.backward(total)?.into_param_grads()
        };
        let step = nopt_diff::gradcheck::FD_STEP;
        let mut out = Vec::new();
        for (id, g) in grads {
            let mut probe_model = self.clone();
            let n = g.data().len();
            let mut fd = vec![0.0; n];
            for (j, slot) in fd.iter_mut().enumerate() {
                let orig = self.store.value(id).data()[j];
                probe_model.store.get_mut(id).value.data_mut()[j] = orig + step;
                let lp = loss_of(&probe_model)?;
                probe_model.store.get_mut(id).value.data_mut()[j] = orig - step;
                let lm = loss_of(&probe_model)?;
                probe_model.store.get_mut(id).value.data_mut()[j] = orig;
                *slot = (lp - lm) / (2.0 * step);
            }
            let diff = g.data().iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
            let rel = if norm < 1e-12 { diff } else { diff / norm };
            out.push((self.store.get(id).name.clone(), rel));
        }
        Ok(out)
    }
}

/// Converts a `[C, H, W]` real tensor to an `f32` field.
pub fn to_field<T: Scalar>(t: &Tensor<T>) -> Result<Field> {
    let s = t.shape();
    if s.len() != 3 || t.is_complex() {
        return Err(shape_err("field tensor", "[C, H, W] real", format!("{s:?}")));
    }
    Field::new(
        s[0],
        s[1],
        s[2],
        t.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
    )
}
