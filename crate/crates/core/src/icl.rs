//! In-context inference from demos: every query location takes the mean true
//! solution of the `k` demo locations whose model outputs (or backbone
//! features) are closest in L1.

use std::fs::File;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, Field};
use crate::error::{io_err, shape_err, Error, Result};
use crate::finetune::{pairs, predict_all, relative_l2};
use crate::fno::{FnoModel, TimeAdapter};
use crate::runtime::{derive_seed, with_pool};

const STREAM_DEMOS: u64 = 41;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilaritySource {
    ModelOutput,
    BackboneFeature,
}

impl SimilaritySource {
    pub const ALL: [SimilaritySource; 2] = [SimilaritySource::ModelOutput, SimilaritySource::BackboneFeature];

    pub fn name(self) -> &'static str {
        match self {
            SimilaritySource::ModelOutput => "model_output",
            SimilaritySource::BackboneFeature => "backbone_feature",
        }
    }
}

impl std::str::FromStr for SimilaritySource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model_output" | "output" => Ok(Self::ModelOutput),
            "backbone_feature" | "feature" | "backbone" => Ok(Self::BackboneFeature),
            _ => Err(Error::Param(format!("unknown similarity source {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IclConfig {
    pub k: usize,
    pub source: SimilaritySource,
    /// Query locations per distance block.
    pub chunk: usize,
}

impl IclConfig {
    pub fn new(k: usize, source: SimilaritySource) -> Self {
        Self { k, source, chunk: 256 }
    }
}

/// Demo inputs with their true solutions, both in operator layout. Solutions
/// fold `frames` time steps into channels.
#[derive(Clone, Debug, PartialEq)]
pub struct DemoSet {
    pub inputs: Vec<Field>,
    pub solutions: Vec<Field>,
    pub frames: usize,
    /// How the demos were generated.
    pub provenance: String,
}

impl DemoSet {
    pub fn new(inputs: Vec<Field>, solutions: Vec<Field>, frames: usize, provenance: impl Into<String>) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != solutions.len() {
            return Err(shape_err("demo count", inputs.len().max(1), solutions.len()));
        }
        if frames == 0 || solutions.iter().any(|s| s.channels() % frames != 0) {
            return Err(shape_err("solution channels", format!("a multiple of {frames}"), solutions[0].channels()));
        }
        Ok(Self {
            inputs,
            solutions,
            frames,
            provenance: provenance.into(),
        })
    }

    /// The labeled samples of `ds` as demos.
    pub fn from_dataset(ds: &Dataset, adapter: &TimeAdapter) -> Result<Self> {
        let (xs, ys) = pairs(ds, adapter)?;
        let frames = match adapter {
            TimeAdapter::OneShot { frames, .. } => *frames,
            _ => 1,
        };
        Self::new(xs, ys, frames, format!("{} {:?}", ds.pde, ds.param_ranges))
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Rows of `[L][D]` similarity vectors for a field: with model outputs a
/// location is `(pixel, frame)` and the vector holds that frame's channels;
/// with backbone features a location is a pixel and the vector holds every
/// feature channel.
pub fn similarity_rows(f: &Field, frames: usize, source: SimilaritySource) -> (Vec<f32>, usize) {
    let plane = f.plane();
    match source {
        SimilaritySource::ModelOutput => {
            let c = f.channels() / frames;
            let mut rows = Vec::with_capacity(f.data().len());
            for p in 0..plane {
                for t in 0..frames {
                    rows.extend((0..c).map(|ch| f.channel(t * c + ch)[p]));
                }
            }
            (rows, c)
        }
        SimilaritySource::BackboneFeature => (pixel_major(f), f.channels()),
    }
}

fn pixel_major(f: &Field) -> Vec<f32> {
    let plane = f.plane();
    let mut rows = Vec::with_capacity(f.data().len());
    for p in 0..plane {
        rows.extend((0..f.channels()).map(|ch| f.channel(ch)[p]));
    }
    rows
}

/// Rows of `[L][V]` solution values matching [`similarity_rows`].
pub fn target_rows(y: &Field, frames: usize, source: SimilaritySource) -> (Vec<f32>, usize) {
    match source {
        SimilaritySource::ModelOutput => similarity_rows(y, frames, source),
        SimilaritySource::BackboneFeature => (pixel_major(y), y.channels()),
    }
}

/// Inverse of [`target_rows`].
pub fn field_from_rows(rows: &[f32], channels: usize, h: usize, w: usize, frames: usize, source: SimilaritySource) -> Result<Field> {
    let plane = h * w;
    let mut data = vec![0.0f32; channels * plane];
    let c = channels / frames;
    for p in 0..plane {
        match source {
            SimilaritySource::ModelOutput => {
                for t in 0..frames {
                    for ch in 0..c {
                        data[(t * c + ch) * plane + p] = rows[(p * frames + t) * c + ch];
                    }
                }
            }
            SimilaritySource::BackboneFeature => {
                for ch in 0..channels {
                    data[ch * plane + p] = rows[p * channels + ch];
                }
            }
        }
    }
    Field::new(channels, h, w, data)
}

/// Demo similarity vectors, stored dimension-major (`[D][N]`) so distances
/// to all demo locations vectorize, with the true solution rows `[N][V]`.
/// Location `n = j·L + l` is location `l` of demo `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct DemoBank {
    pub dim: usize,
    pub len: usize,
    pub sims: Vec<f32>,
    pub values: usize,
    pub ys: Vec<f32>,
}

impl DemoBank {
    /// `rows[j]` is `[L][D]`, `ys[j]` is `[L][V]`.
    pub fn from_rows(rows: &[Vec<f32>], dim: usize, ys: &[Vec<f32>], values: usize) -> Result<Self> {
        let len: usize = rows.iter().map(|r| r.len() / dim.max(1)).sum();
        if dim == 0 || values == 0 || rows.len() != ys.len() {
            return Err(shape_err("demo bank", "matching rows", format!("{} vs {}", rows.len(), ys.len())));
        }
        let mut sims = vec![0.0f32; dim * len];
        let mut flat_y = Vec::with_capacity(len * values);
        let mut n = 0;
        for (r, y) in rows.iter().zip(ys) {
            let l = r.len() / dim;
            if r.len() != l * dim || y.len() != l * values {
                return Err(shape_err("demo rows", l * values, y.len()));
            }
            for i in 0..l {
                for d in 0..dim {
                    sims[d * len + n + i] = r[i * dim + d];
                }
            }
            flat_y.extend_from_slice(y);
            n += l;
        }
        Ok(Self {
            dim,
            len,
            sims,
            values,
            ys: flat_y,
        })
    }

    /// Bank of demo outputs (or features) `sims` and solutions `ys`.
    pub fn new(sims: &[&Field], ys: &[&Field], frames: usize, source: SimilaritySource) -> Result<Self> {
        let mut rows = Vec::with_capacity(sims.len());
        let mut dim = 0;
        for s in sims {
            let (r, d) = similarity_rows(s, frames, source);
            dim = d;
            rows.push(r);
        }
        let mut yrows = Vec::with_capacity(ys.len());
        let mut values = 0;
        for y in ys {
            let (r, v) = target_rows(y, frames, source);
            values = v;
            yrows.push(r);
        }
        Self::from_rows(&rows, dim, &yrows, values)
    }
}

/// For every query row, the mean of the `k` bank solution rows nearest in L1,
/// ties broken by ascending bank index. Distances accumulate in `f32` over
/// dimensions in order; the mean sums in `f64` in (distance, index) order.
pub fn knn_mean(query: &[f32], bank: &DemoBank, k: usize, chunk: usize) -> Result<Vec<f32>> {
    let d = bank.dim;
    if k == 0 || k > bank.len {
        return Err(Error::TopK { k, max: bank.len });
    }
    if chunk == 0 {
        return Err(Error::Param("query chunk must be at least 1".into()));
    }
    if !query.len().is_multiple_of(d) {
        return Err(shape_err("query rows", format!("a multiple of {d}"), query.len()));
    }
    let rows = query.len() / d;
    let v = bank.values;
    let mut out = vec![0.0f32; rows * v];
    out.par_chunks_mut(chunk * v)
        .enumerate()
        .for_each(|(ci, block)| {
            let mut dist = vec![0.0f32; bank.len];
            let mut best: Vec<(f32, usize)> = Vec::with_capacity(k + 1);
            for (bi, o) in block.chunks_mut(v).enumerate() {
                let q = &query[(ci * chunk + bi) * d..(ci * chunk + bi + 1) * d];
                dist.fill(0.0);
                for (dd, &qv) in q.iter().enumerate() {
                    let col = &bank.sims[dd * bank.len..(dd + 1) * bank.len];
                    for (acc, &x) in dist.iter_mut().zip(col) {
                        *acc += (qv - x).abs();
                    }
                }
                best.clear();
                for (n, &dn) in dist.iter().enumerate() {
                    if best.len() == k && !(dn < best[k - 1].0) {
                        continue;
                    }
                    let pos = best.partition_point(|&(bd, _)| bd <= dn);
                    best.insert(pos, (dn, n));
                    best.truncate(k);
                }
                let mut acc = vec![0.0f64; v];
                for &(_, n) in &best {
                    for (a, &y) in acc.iter_mut().zip(&bank.ys[n * v..(n + 1) * v]) {
                        *a += y as f64;
                    }
                }
                for (x, a) in o.iter_mut().zip(&acc) {
                    *x = (a / k as f64) as f32;
                }
            }
        });
    Ok(out)
}

/// Demo bank for `model`, with demo predictions computed once.
#[derive(Clone, Debug)]
pub struct PreparedDemos {
    pub bank: DemoBank,
    pub source: SimilaritySource,
    pub frames: usize,
    pub solution_channels: usize,
}

fn similarity_of(model: &FnoModel<f32>, x: &Field, source: SimilaritySource) -> Result<Field> {
    match source {
        SimilaritySource::ModelOutput => model.forward(x),
        SimilaritySource::BackboneFeature => model.extract_backbone_features(x),
    }
}

impl PreparedDemos {
    pub fn new(model: &FnoModel<f32>, demos: &DemoSet, source: SimilaritySource) -> Result<Self> {
        let sims = demos
            .inputs
            .par_iter()
            .map(|x| similarity_of(model, x, source))
            .collect::<Result<Vec<_>>>()?;
        Self::from_similarities(&sims.iter().collect::<Vec<_>>(), &demos.solutions.iter().collect::<Vec<_>>(), demos.frames, source)
    }

    /// From precomputed demo outputs or features.
    pub fn from_similarities(sims: &[&Field], ys: &[&Field], frames: usize, source: SimilaritySource) -> Result<Self> {
        let solution_channels = ys.first().map(|y| y.channels()).unwrap_or(0);
        Ok(Self {
            bank: DemoBank::new(sims, ys, frames, source)?,
            source,
            frames,
            solution_channels,
        })
    }

    /// Aggregates demo solutions for a query given its output or features.
    pub fn predict_from(&self, query_sim: &Field, k: usize, chunk: usize) -> Result<Field> {
        let (rows, dim) = similarity_rows(query_sim, self.frames, self.source);
        if dim != self.bank.dim {
            return Err(shape_err("query similarity channels", self.bank.dim, dim));
        }
        let out = knn_mean(&rows, &self.bank, k, chunk)?;
        field_from_rows(&out, self.solution_channels, query_sim.h(), query_sim.w(), self.frames, self.source)
    }
}

/// Prediction for operator input `x` aggregated from the demos' true
/// solutions.
pub fn predict_with_demos(model: &FnoModel<f32>, x: &Field, demos: &PreparedDemos, cfg: &IclConfig) -> Result<Field> {
    if cfg.source != demos.source {
        return Err(Error::Param("demo bank was built for another similarity source".into()));
    }
    demos.predict_from(&similarity_of(model, x, cfg.source)?, cfg.k, cfg.chunk)
}

/// Least-squares slope of `pred ≈ a·target + b`.
pub fn scale_slope(pred: &[f32], target: &[f32]) -> Result<f64> {
    if pred.len() != target.len() || pred.len() < 2 {
        return Err(shape_err("regression points", "at least 2 paired", pred.len().min(target.len())));
    }
    let n = pred.len() as f64;
    let mp = pred.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mt = target.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (&p, &t) in pred.iter().zip(target) {
        let dt = t as f64 - mt;
        cov += (p as f64 - mp) * dt;
        var += dt * dt;
    }
    if var <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(cov / var)
}

/// MSE after dividing each field by its own largest magnitude.
pub fn shape_error(pred: &[f32], target: &[f32]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(shape_err("field length", target.len(), pred.len()));
    }
    let mp = pred.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
    let mt = target.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
    if mp == 0.0 || mt == 0.0 {
        return Err(Error::AllZero);
    }
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| (p as f64 / mp - t as f64 / mt).powi(2))
        .sum();
    Ok(s / pred.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IclRow {
    pub pde: String,
    #[serde(rename = "J")]
    pub j: usize,
    pub source: String,
    pub seed: u64,
    pub rl2: f64,
    pub scale: f64,
    pub shape: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub k: usize,
    pub demos: Vec<usize>,
    pub seeds: Vec<u64>,
    pub sources: Vec<SimilaritySource>,
    pub chunk: usize,
    pub threads: usize,
}

fn scores(preds: &[Field], truth: &[Field]) -> Result<(f64, f64, f64)> {
    let rl2 = relative_l2(preds, truth)?;
    let mut scale = 0.0;
    let mut shape = 0.0;
    for (p, t) in preds.iter().zip(truth) {
        scale += scale_slope(p.data(), t.data())?;
        shape += shape_error(p.data(), t.data())?;
    }
    let n = preds.len() as f64;
    Ok((rl2, scale / n, shape / n))
}

/// Error against the number of demos. For each seed and `J`, `J` demos are
/// drawn from `pool` without replacement; `J = 0` is the plain model. Pool
/// outputs and features are computed once and shared by every draw.
pub fn icl_sweep(
    model: &FnoModel<f32>,
    ood: &Dataset,
    pool: &Dataset,
    adapter: &TimeAdapter,
    cfg: &SweepConfig,
) -> Result<Vec<IclRow>> {
    let max_j = cfg.demos.iter().copied().max().unwrap_or(0);
    if max_j > pool.len() {
        return Err(Error::PoolExhausted {
            available: pool.len(),
            requested: max_j,
        });
    }
    with_pool(cfg.threads, || {
        let (qx, qy) = pairs(ood, adapter)?;
        let demos = DemoSet::from_dataset(pool, adapter)?;
        let base_preds = predict_all(model, &qx)?;
        let base = scores(&base_preds, &qy)?;
        let mut rows = Vec::new();
        for &source in &cfg.sources {
            let needs_demos = cfg.demos.iter().any(|&j| j > 0);
            let (query_sims, pool_sims) = if needs_demos {
                let q = match source {
                    SimilaritySource::ModelOutput => base_preds.clone(),
                    SimilaritySource::BackboneFeature => qx
                        .par_iter()
                        .map(|x| model.extract_backbone_features(x))
                        .collect::<Result<Vec<_>>>()?,
                };
                let p = demos
                    .inputs
                    .par_iter()
                    .map(|x| similarity_of(model, x, source))
                    .collect::<Result<Vec<_>>>()?;
                (q, p)
            } else {
                (Vec::new(), Vec::new())
            };
            for &seed in &cfg.seeds {
                for &j in &cfg.demos {
                    let (rl2, scale, shape) = if j == 0 {
                        base
                    } else {
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_DEMOS, j as u64));
                        let mut picked = sample(&mut rng, pool.len(), j).into_vec();
                        picked.sort_unstable();
                        let sims: Vec<&Field> = picked.iter().map(|&i| &pool_sims[i]).collect();
                        let ys: Vec<&Field> = picked.iter().map(|&i| &demos.solutions[i]).collect();
                        let prepared = PreparedDemos::from_similarities(&sims, &ys, demos.frames, source)?;
                        let preds = query_sims
                            .iter()
                            .map(|q| prepared.predict_from(q, cfg.k, cfg.chunk))
                            .collect::<Result<Vec<_>>>()?;
                        scores(&preds, &qy)?
                    };
                    rows.push(IclRow {
                        pde: ood.pde.clone(),
                        j,
                        source: source.name().into(),
                        seed,
                        rl2,
                        scale,
                        shape,
                    });
                }
            }
        }
        Ok(rows)
    })
}

/// Writes sweep rows with a `pde,J,source,seed,rl2,scale,shape` header.
pub fn write_icl_csv(rows: &[IclRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["pde", "J", "source", "seed", "rl2", "scale", "shape"])?;
    for r in rows {
        w.write_record([
            r.pde.clone(),
            r.j.to_string(),
            r.source.clone(),
            r.seed.to_string(),
            format!("{:e}", r.rl2),
            format!("{:e}", r.scale),
            format!("{:e}", r.shape),
        ])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

#[cfg(test)]
mod tests;
