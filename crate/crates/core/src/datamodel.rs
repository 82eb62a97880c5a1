//! Fields, samples and the on-disk dataset container.
//!
//! A dataset directory holds `manifest.json` and `payload.f32le`. The payload
//! is sample-major little-endian `f32`; each sample stores its input block and,
//! when labeled, its solution block right after it, both in `T×C×H×W` order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, shape_err, Error, Result};

pub const FORMAT_MAJOR: u32 = 1;
pub const FORMAT_VERSION: &str = "1.0";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "payload.f32le";

/// Uniform grid over a rectangle. Spectral work needs even axes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub h: usize,
    pub w: usize,
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
}

impl Grid2D {
    /// The periodic unit square.
    pub fn new(h: usize, w: usize) -> Result<Self> {
        Self::with_extent(h, w, [0.0, 1.0], [0.0, 1.0])
    }

    pub fn with_extent(h: usize, w: usize, x_range: [f64; 2], y_range: [f64; 2]) -> Result<Self> {
        if h < 8 || w < 8 || !h.is_multiple_of(2) || !w.is_multiple_of(2) {
            return Err(Error::Grid { h, w });
        }
        Ok(Self {
            h,
            w,
            x_range,
            y_range,
        })
    }

    pub fn dx(&self) -> f64 {
        (self.x_range[1] - self.x_range[0]) / self.w as f64
    }

    pub fn dy(&self) -> f64 {
        (self.y_range[1] - self.y_range[0]) / self.h as f64
    }

    /// Node coordinate of column `i` (periodic convention, `x_0` on the edge).
    pub fn x(&self, i: usize) -> f64 {
        self.x_range[0] + i as f64 * self.dx()
    }

    pub fn y(&self, j: usize) -> f64 {
        self.y_range[0] + j as f64 * self.dy()
    }
}

/// `C` channels on an `H×W` raster, indexed `[c][y][x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    channels: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Field {
    pub fn new(channels: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * h * w {
            return Err(shape_err("field values", channels * h * w, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("field"));
        }
        Ok(Self {
            channels,
            h,
            w,
            data,
        })
    }

    pub fn zeros(channels: usize, h: usize, w: usize) -> Self {
        Self {
            channels,
            h,
            w,
            data: vec![0.0; channels * h * w],
        }
    }

    /// Builds a field from `f64` values, rounding to `f32`.
    pub fn from_f64(channels: usize, h: usize, w: usize, data: &[f64]) -> Result<Self> {
        Self::new(channels, h, w, data.iter().map(|&v| v as f32).collect())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.plane()..(c + 1) * self.plane()]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }

    /// Appends `other`'s channels after this field's.
    pub fn concat(&self, other: &Field) -> Result<Field> {
        if (self.h, self.w) != (other.h, other.w) {
            return Err(Error::Resolution(self.h, self.w, other.h, other.w));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Field {
            channels: self.channels + other.channels,
            h: self.h,
            w: self.w,
            data,
        })
    }

    /// Channels `range.start..range.end` as a new field.
    pub fn select(&self, range: std::ops::Range<usize>) -> Field {
        let p = self.plane();
        Field {
            channels: range.len(),
            h: self.h,
            w: self.w,
            data: self.data[range.start * p..range.end * p].to_vec(),
        }
    }

    /// Zero-fills up to `channels` channels; wider fields are returned as-is.
    pub fn pad_channels(&self, channels: usize) -> Field {
        let mut out = self.clone();
        if channels > self.channels {
            out.data.resize(channels * self.plane(), 0.0);
            out.channels = channels;
        }
        out
    }

    /// Circular shift by `(dy, dx)` grid points: `out[y][x] = in[y − dy][x − dx]`.
    pub fn roll(&self, dy: usize, dx: usize) -> Field {
        let (h, w) = (self.h, self.w);
        let mut out = Field::zeros(self.channels, h, w);
        for c in 0..self.channels {
            let src = self.channel(c);
            let dst = out.channel_mut(c);
            for y in 0..h {
                for x in 0..w {
                    dst[((y + dy) % h) * w + (x + dx) % w] = src[y * w + x];
                }
            }
        }
        out
    }
}

/// Equally spaced snapshots with identical shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    frames: Vec<Field>,
    dt: f64,
}

impl Trajectory {
    pub fn new(frames: Vec<Field>, dt: f64) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| shape_err("trajectory length", "at least 1", 0))?;
        let shape = (first.channels, first.h, first.w);
        for f in &frames {
            if (f.channels, f.h, f.w) != shape {
                return Err(shape_err(
                    "trajectory frame",
                    format!("{shape:?}"),
                    format!("{:?}", (f.channels, f.h, f.w)),
                ));
            }
        }
        Ok(Self { frames, dt })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn frames(&self) -> &[Field] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &Field {
        &self.frames[t]
    }

    pub fn channels(&self) -> usize {
        self.frames[0].channels
    }

    /// Folds time into channels, frame-major: channel `t·C + c`.
    pub fn fold(&self) -> Field {
        let f0 = &self.frames[0];
        let mut data = Vec::with_capacity(self.frames.len() * f0.data.len());
        for f in &self.frames {
            data.extend_from_slice(&f.data);
        }
        Field {
            channels: self.frames.len() * f0.channels,
            h: f0.h,
            w: f0.w,
            data,
        }
    }

    /// Inverse of [`Trajectory::fold`] for `t` frames.
    pub fn unfold(field: &Field, t: usize, dt: f64) -> Result<Self> {
        if t == 0 || !field.channels.is_multiple_of(t) {
            return Err(shape_err(
                "folded channels",
                format!("a multiple of {t}"),
                field.channels,
            ));
        }
        let c = field.channels / t;
        let frames = (0..t).map(|i| field.select(i * c..(i + 1) * c)).collect();
        Self::new(frames, dt)
    }
}

/// Sample payload: one snapshot or a time series.
#[derive(Clone, Debug, PartialEq)]
pub enum FieldData {
    Field(Field),
    Trajectory(Trajectory),
}

impl FieldData {
    pub fn t(&self) -> usize {
        match self {
            FieldData::Field(_) => 1,
            FieldData::Trajectory(tr) => tr.len(),
        }
    }

    fn first(&self) -> &Field {
        match self {
            FieldData::Field(f) => f,
            FieldData::Trajectory(tr) => tr.frame(0),
        }
    }

    pub fn channels(&self) -> usize {
        self.first().channels
    }

    pub fn h(&self) -> usize {
        self.first().h
    }

    pub fn w(&self) -> usize {
        self.first().w
    }

    pub fn is_trajectory(&self) -> bool {
        matches!(self, FieldData::Trajectory(_))
    }

    pub fn dt(&self) -> Option<f64> {
        match self {
            FieldData::Field(_) => None,
            FieldData::Trajectory(tr) => Some(tr.dt),
        }
    }

    pub fn frames(&self) -> &[Field] {
        match self {
            FieldData::Field(f) => std::slice::from_ref(f),
            FieldData::Trajectory(tr) => tr.frames(),
        }
    }

    pub fn numel(&self) -> usize {
        self.t() * self.first().data.len()
    }

    /// The snapshot, or the time-folded trajectory.
    pub fn folded(&self) -> Field {
        match self {
            FieldData::Field(f) => f.clone(),
            FieldData::Trajectory(tr) => tr.fold(),
        }
    }

    fn layout(&self) -> BlockLayout {
        BlockLayout {
            t: self.t(),
            c: self.channels(),
            time_axis: self.is_trajectory(),
            dt: self.dt(),
        }
    }

    fn map_frames(&self, f: impl Fn(&Field) -> Field) -> FieldData {
        match self {
            FieldData::Field(x) => FieldData::Field(f(x)),
            FieldData::Trajectory(tr) => FieldData::Trajectory(Trajectory {
                frames: tr.frames.iter().map(f).collect(),
                dt: tr.dt,
            }),
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        for frame in self.frames() {
            for v in &frame.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    fn read_le(bytes: &[u8], layout: &BlockLayout, h: usize, w: usize) -> Result<Self> {
        let per = layout.c * h * w;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if values.len() != layout.t * per {
            return Err(shape_err("sample block", layout.t * per, values.len()));
        }
        let frames = values
            .chunks_exact(per)
            .map(|v| Field::new(layout.c, h, w, v.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        if layout.time_axis {
            Ok(FieldData::Trajectory(Trajectory::new(
                frames,
                layout.dt.unwrap_or(0.0),
            )?))
        } else {
            let mut frames = frames;
            Ok(FieldData::Field(frames.remove(0)))
        }
    }
}

impl From<Field> for FieldData {
    fn from(f: Field) -> Self {
        FieldData::Field(f)
    }
}

impl From<Trajectory> for FieldData {
    fn from(t: Trajectory) -> Self {
        FieldData::Trajectory(t)
    }
}

/// One PDE sample. A missing solution marks unlabeled data.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub input: FieldData,
    pub solution: Option<FieldData>,
    pub params: BTreeMap<String, f64>,
    /// Which dataset or generator the sample came from.
    pub source: String,
}

impl SampleRecord {
    pub fn is_labeled(&self) -> bool {
        self.solution.is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelRole {
    Physical,
    Coordinate,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub name: String,
    pub role: ChannelRole,
}

impl ChannelSpec {
    pub fn physical(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            role: ChannelRole::Physical,
        }
    }

    pub fn coordinate(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            role: ChannelRole::Coordinate,
        }
    }
}

/// Integer parameter range: a closed interval or an explicit set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamRange {
    Interval { lo: i64, hi: i64 },
    Set(Vec<i64>),
}

impl ParamRange {
    pub fn is_empty(&self) -> bool {
        match self {
            ParamRange::Interval { lo, hi } => lo > hi,
            ParamRange::Set(v) => v.is_empty(),
        }
    }

    pub fn contains(&self, x: i64) -> bool {
        match self {
            ParamRange::Interval { lo, hi } => (*lo..=*hi).contains(&x),
            ParamRange::Set(v) => v.contains(&x),
        }
    }

    /// Smallest range of the same kind covering both (sets merge in order).
    pub fn merge(&self, other: &ParamRange) -> ParamRange {
        match (self, other) {
            (ParamRange::Interval { lo: a, hi: b }, ParamRange::Interval { lo: c, hi: d }) => {
                ParamRange::Interval {
                    lo: *a.min(c),
                    hi: *b.max(d),
                }
            }
            _ => {
                let mut out = self.values();
                for v in other.values() {
                    if !out.contains(&v) {
                        out.push(v);
                    }
                }
                ParamRange::Set(out)
            }
        }
    }

    pub fn values(&self) -> Vec<i64> {
        match self {
            ParamRange::Interval { lo, hi } => (*lo..=*hi).collect(),
            ParamRange::Set(v) => v.clone(),
        }
    }
}

/// An in-memory dataset with the metadata its manifest carries.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub pde: String,
    pub grid: Grid2D,
    pub channels: Vec<ChannelSpec>,
    pub solution_channels: Vec<ChannelSpec>,
    pub seed: u64,
    pub param_ranges: BTreeMap<String, ParamRange>,
    pub samples: Vec<SampleRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(SampleRecord::is_labeled)
    }

    /// A copy holding `indices` in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            ..self.shell()
        }
    }

    fn shell(&self) -> Dataset {
        Dataset {
            pde: self.pde.clone(),
            grid: self.grid,
            channels: self.channels.clone(),
            solution_channels: self.solution_channels.clone(),
            seed: self.seed,
            param_ranges: self.param_ranges.clone(),
            samples: Vec::new(),
        }
    }

    fn check_homogeneous(&self) -> Result<(Option<BlockLayout>, Option<BlockLayout>)> {
        let mut input: Option<BlockLayout> = None;
        let mut solution: Option<BlockLayout> = None;
        for s in &self.samples {
            if (s.input.h(), s.input.w()) != (self.grid.h, self.grid.w) {
                return Err(Error::Resolution(self.grid.h, self.grid.w, s.input.h(), s.input.w()));
            }
            if s.params.is_empty() {
                return Err(Error::Param("sample without physical parameters".into()));
            }
            unify(&mut input, s.input.layout(), "input block")?;
            if let Some(sol) = &s.solution {
                if (sol.h(), sol.w()) != (self.grid.h, self.grid.w) {
                    return Err(Error::Resolution(self.grid.h, self.grid.w, sol.h(), sol.w()));
                }
                unify(&mut solution, sol.layout(), "solution block")?;
            }
        }
        if let Some(l) = &input {
            if l.c != self.channels.len() {
                return Err(shape_err("input channel specs", l.c, self.channels.len()));
            }
        }
        if let Some(l) = &solution {
            if l.c != self.solution_channels.len() {
                return Err(shape_err("solution channel specs", l.c, self.solution_channels.len()));
            }
        }
        Ok((input, solution))
    }

    /// All input values in container order, as little-endian bytes.
    pub fn input_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for s in &self.samples {
            s.input.write_le(&mut out);
        }
        out
    }

    /// SHA-256 over the shape header and payload bytes.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(format!("{}:{}x{}:{}", self.pde, self.grid.h, self.grid.w, self.len()).as_bytes());
        let (payload, _) = encode_payload(self);
        hasher.update(&payload);
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn unify(slot: &mut Option<BlockLayout>, got: BlockLayout, what: &'static str) -> Result<()> {
    match slot {
        None => {
            *slot = Some(got);
            Ok(())
        }
        Some(l) if l.t == got.t && l.c == got.c && l.time_axis == got.time_axis => Ok(()),
        Some(l) => Err(shape_err(what, format!("{l:?}"), format!("{got:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockLayout {
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub time_axis: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionSpec {
    #[serde(flatten)]
    pub layout: BlockLayout,
    pub channels: Vec<ChannelSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub params: BTreeMap<String, f64>,
    pub source: String,
    pub labeled: bool,
}

/// The JSON manifest. Unknown keys are ignored on read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub pde: String,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub channels: Vec<ChannelSpec>,
    pub dtype: String,
    pub byte_order: String,
    pub layout: String,
    pub n: usize,
    pub offsets: Vec<u64>,
    pub payload_bytes: u64,
    pub seed: u64,
    pub param_ranges: BTreeMap<String, ParamRange>,
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub time_axis: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default)]
    pub solution: Option<SolutionSpec>,
    pub samples: Vec<SampleMeta>,
}

fn encode_payload(ds: &Dataset) -> (Vec<u8>, Vec<u64>) {
    let mut payload = Vec::new();
    let mut offsets = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        offsets.push(payload.len() as u64);
        s.input.write_le(&mut payload);
        if let Some(sol) = &s.solution {
            sol.write_le(&mut payload);
        }
    }
    (payload, offsets)
}

fn manifest_of(ds: &Dataset, offsets: Vec<u64>, payload_bytes: u64) -> Result<Manifest> {
    let (input, solution) = ds.check_homogeneous()?;
    let input = input.unwrap_or(BlockLayout {
        t: 1,
        c: ds.channels.len(),
        time_axis: false,
        dt: None,
    });
    Ok(Manifest {
        version: FORMAT_VERSION.into(),
        pde: ds.pde.clone(),
        h: ds.grid.h,
        w: ds.grid.w,
        t: input.t,
        c: input.c,
        channels: ds.channels.clone(),
        dtype: "f32le".into(),
        byte_order: "little".into(),
        layout: "TCHW".into(),
        n: ds.len(),
        offsets,
        payload_bytes,
        seed: ds.seed,
        param_ranges: ds.param_ranges.clone(),
        x_range: ds.grid.x_range,
        y_range: ds.grid.y_range,
        time_axis: input.time_axis,
        dt: input.dt,
        solution: solution.map(|layout| SolutionSpec {
            layout,
            channels: ds.solution_channels.clone(),
        }),
        samples: ds
            .samples
            .iter()
            .map(|s| SampleMeta {
                params: s.params.clone(),
                source: s.source.clone(),
                labeled: s.is_labeled(),
            })
            .collect(),
    })
}

/// Writes `ds` under directory `dir` (created if needed). The payload goes
/// first so a readable manifest always describes a complete payload.
pub fn write_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    let (payload, offsets) = encode_payload(ds);
    let manifest = manifest_of(ds, offsets, payload.len() as u64)?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let pp = dir.join(PAYLOAD_FILE);
    fs::write(&pp, &payload).map_err(io_err(&pp))?;
    let mp = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json {
        path: mp.clone(),
        source,
    })?;
    fs::write(&mp, text).map_err(io_err(&mp))?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let mp = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&mp).map_err(io_err(&mp))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: mp.clone(),
        source,
    })?;
    let major = manifest
        .version
        .split('.')
        .next()
        .and_then(|m| m.parse::<u32>().ok());
    if major != Some(FORMAT_MAJOR) {
        return Err(Error::Version {
            found: manifest.version,
            supported: FORMAT_MAJOR,
        });
    }
    if manifest.byte_order != "little" || manifest.dtype != "f32le" {
        return Err(Error::ByteOrder(format!("{}/{}", manifest.byte_order, manifest.dtype)));
    }
    if manifest.layout != "TCHW" {
        return Err(shape_err("layout", "TCHW", &manifest.layout));
    }
    Ok(manifest)
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    let pp = dir.join(PAYLOAD_FILE);
    let payload = fs::read(&pp).map_err(io_err(&pp))?;
    let len = payload.len() as u64;
    if len != m.payload_bytes {
        return Err(Error::Truncated {
            expected: m.payload_bytes,
            found: len,
        });
    }
    if m.offsets.len() != m.n || m.samples.len() != m.n {
        return Err(shape_err("offset table", m.n, m.offsets.len()));
    }
    let grid = Grid2D::with_extent(m.h, m.w, m.x_range, m.y_range)?;
    let input_layout = BlockLayout {
        t: m.t,
        c: m.c,
        time_axis: m.time_axis,
        dt: m.dt,
    };
    let plane_bytes = 4 * (m.h * m.w) as u64;
    let input_bytes = plane_bytes * (m.t * m.c) as u64;
    let solution_bytes = m
        .solution
        .as_ref()
        .map(|s| plane_bytes * (s.layout.t * s.layout.c) as u64)
        .unwrap_or(0);

    let mut samples = Vec::with_capacity(m.n);
    let mut expected = 0u64;
    for (i, (&off, meta)) in m.offsets.iter().zip(&m.samples).enumerate() {
        if off >= len {
            return Err(Error::OffsetOutOfBounds {
                index: i,
                offset: off,
                len,
            });
        }
        if off != expected {
            return Err(Error::Offsets(i));
        }
        let sol_len = if meta.labeled { solution_bytes } else { 0 };
        if meta.labeled && m.solution.is_none() {
            return Err(Error::Offsets(i));
        }
        let end = off + input_bytes + sol_len;
        if end > len {
            return Err(Error::Truncated {
                expected: end,
                found: len,
            });
        }
        let (a, b) = (off as usize, (off + input_bytes) as usize);
        let input = FieldData::read_le(&payload[a..b], &input_layout, m.h, m.w)?;
        let solution = match (&m.solution, meta.labeled) {
            (Some(spec), true) => Some(FieldData::read_le(
                &payload[b..end as usize],
                &spec.layout,
                m.h,
                m.w,
            )?),
            _ => None,
        };
        samples.push(SampleRecord {
            input,
            solution,
            params: meta.params.clone(),
            source: meta.source.clone(),
        });
        expected = end;
    }
    if expected != len {
        return Err(Error::Truncated {
            expected,
            found: len,
        });
    }
    Ok(Dataset {
        pde: m.pde,
        grid,
        channels: m.channels,
        solution_channels: m.solution.map(|s| s.channels).unwrap_or_default(),
        seed: m.seed,
        param_ranges: m.param_ranges,
        samples,
    })
}

/// Tokens of a `/`-joined name, in order of first appearance.
fn merge_names(a: &str, b: &str) -> String {
    let mut out: Vec<&str> = Vec::new();
    for tok in a.split('/').chain(b.split('/')) {
        if !tok.is_empty() && !out.contains(&tok) {
            out.push(tok);
        }
    }
    out.join("/")
}

fn merge_specs(a: &[ChannelSpec], b: &[ChannelSpec]) -> Vec<ChannelSpec> {
    (0..a.len().max(b.len()))
        .map(|i| match (a.get(i), b.get(i)) {
            (Some(x), Some(y)) => ChannelSpec {
                name: merge_names(&x.name, &y.name),
                role: x.role,
            },
            (Some(x), None) | (None, Some(x)) => x.clone(),
            (None, None) => unreachable!(),
        })
        .collect()
}

/// Concatenates datasets of one resolution, zero-padding missing channels.
/// Channel names at a shared index are merged as `a/b`; samples keep their
/// own `source`.
pub fn dataset_union(parts: &[&Dataset]) -> Result<Dataset> {
    let (first, rest) = parts.split_first().ok_or(Error::EmptyUnion)?;
    let mut out = (*first).clone();
    for ds in rest {
        if (ds.grid.h, ds.grid.w) != (out.grid.h, out.grid.w) {
            return Err(Error::Resolution(out.grid.h, out.grid.w, ds.grid.h, ds.grid.w));
        }
        out.pde = merge_names(&out.pde, &ds.pde);
        out.channels = merge_specs(&out.channels, &ds.channels);
        out.solution_channels = merge_specs(&out.solution_channels, &ds.solution_channels);
        for (k, r) in &ds.param_ranges {
            let merged = match out.param_ranges.get(k) {
                Some(existing) => existing.merge(r),
                None => r.clone(),
            };
            out.param_ranges.insert(k.clone(), merged);
        }
        out.samples.extend(ds.samples.iter().cloned());
    }
    let (c, sc) = (out.channels.len(), out.solution_channels.len());
    for s in &mut out.samples {
        s.input = s.input.map_frames(|f| f.pad_channels(c));
        if let Some(sol) = &s.solution {
            s.solution = Some(sol.map_frames(|f| f.pad_channels(sc)));
        }
    }
    out.check_homogeneous()?;
    Ok(out)
}

/// Seeded partition of `0..n` into train/val/test index lists. Train and val
/// sizes are `round(f·n)`; test takes the remainder.
pub fn split_indices(n: usize, fractions: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    for &f in &fractions {
        if !(0.0..=1.0).contains(&f) || f.is_nan() {
            return Err(Error::Fraction(f));
        }
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::FractionSum(sum));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let test = perm.split_off(n_train + n_val);
    let val = perm.split_off(n_train);
    Ok([perm, val, test])
}

pub fn split(ds: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let [a, b, c] = split_indices(ds.len(), fractions, seed)?;
    Ok((ds.subset(&a), ds.subset(&b), ds.subset(&c)))
}

/// Per-channel mean and population standard deviation. Channels whose spread
/// is negligible are flagged and left alone by [`normalize`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub degenerate: Vec<bool>,
}

impl ChannelStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Statistics over every frame of every item, channel by channel.
    pub fn of<'a>(items: impl IntoIterator<Item = &'a FieldData>) -> Result<Self> {
        let mut sums: Vec<f64> = Vec::new();
        let mut counts: Vec<u64> = Vec::new();
        let items: Vec<&FieldData> = items.into_iter().collect();
        for item in &items {
            for f in item.frames() {
                if sums.is_empty() {
                    sums = vec![0.0; f.channels];
                    counts = vec![0; f.channels];
                }
                if f.channels != sums.len() {
                    return Err(shape_err("channels", sums.len(), f.channels));
                }
                for c in 0..f.channels {
                    sums[c] += f.channel(c).iter().map(|&v| v as f64).sum::<f64>();
                    counts[c] += f.plane() as u64;
                }
            }
        }
        let mean: Vec<f64> = sums.iter().zip(&counts).map(|(s, &n)| s / n as f64).collect();
        let mut sq = vec![0.0; mean.len()];
        for item in &items {
            for f in item.frames() {
                for c in 0..f.channels {
                    sq[c] += f
                        .channel(c)
                        .iter()
                        .map(|&v| (v as f64 - mean[c]).powi(2))
                        .sum::<f64>();
                }
            }
        }
        let std: Vec<f64> = sq.iter().zip(&counts).map(|(s, &n)| (s / n as f64).sqrt()).collect();
        let degenerate = std
            .iter()
            .zip(&mean)
            .map(|(&s, &m)| s < 1e-12 || s <= 1e-9 * m.abs())
            .collect();
        Ok(Self {
            mean,
            std,
            degenerate,
        })
    }

    /// Identity statistics for `c` channels.
    pub fn identity(c: usize) -> Self {
        Self {
            mean: vec![0.0; c],
            std: vec![1.0; c],
            degenerate: vec![false; c],
        }
    }
}

/// Input-channel statistics of a dataset.
pub fn channel_stats(ds: &Dataset) -> Result<ChannelStats> {
    ChannelStats::of(ds.samples.iter().map(|s| &s.input))
}

/// Solution-channel statistics of the labeled samples.
pub fn solution_stats(ds: &Dataset) -> Result<ChannelStats> {
    ChannelStats::of(ds.samples.iter().filter_map(|s| s.solution.as_ref()))
}

fn apply_stats(field: &Field, stats: &ChannelStats, forward: bool) -> Result<Field> {
    if field.channels != stats.channels() {
        return Err(shape_err("normalization channels", stats.channels(), field.channels));
    }
    let mut out = field.clone();
    for c in 0..field.channels {
        if stats.degenerate[c] {
            continue;
        }
        let (m, s) = (stats.mean[c], stats.std[c]);
        for v in out.channel_mut(c) {
            let x = *v as f64;
            *v = if forward { (x - m) / s } else { x * s + m } as f32;
        }
    }
    Ok(out)
}

pub fn normalize(field: &Field, stats: &ChannelStats) -> Result<Field> {
    apply_stats(field, stats, true)
}

pub fn denormalize(field: &Field, stats: &ChannelStats) -> Result<Field> {
    apply_stats(field, stats, false)
}

/// Shape of a raw little-endian `f32` snapshot file: `n` samples of `T×C×H×W`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawDescriptor {
    pub n: usize,
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub pde: String,
}

/// Wraps raw snapshots in the container without touching their values. Each
/// sample's only parameter is its index in the file.
pub fn import_raw(path: impl AsRef<Path>, desc: &RawDescriptor) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    let per = desc.t * desc.c * desc.h * desc.w;
    let expected = 4 * (desc.n * per) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::RawLength {
            expected,
            found: bytes.len() as u64,
        });
    }
    let grid = Grid2D::new(desc.h, desc.w)?;
    let layout = BlockLayout {
        t: desc.t,
        c: desc.c,
        time_axis: desc.t > 1,
        dt: (desc.t > 1).then_some(1.0),
    };
    let mut samples = Vec::with_capacity(desc.n);
    for (i, chunk) in bytes.chunks_exact(4 * per.max(1)).take(desc.n).enumerate() {
        samples.push(SampleRecord {
            input: FieldData::read_le(chunk, &layout, desc.h, desc.w)?,
            solution: None,
            params: BTreeMap::from([("snapshot".to_string(), i as f64)]),
            source: desc.pde.clone(),
        });
    }
    Ok(Dataset {
        pde: desc.pde.clone(),
        grid,
        channels: (0..desc.c).map(|c| ChannelSpec::physical(format!("c{c}"))).collect(),
        solution_channels: Vec::new(),
        seed: 0,
        param_ranges: BTreeMap::new(),
        samples,
    })
}

/// Writes every sample's input block back to one raw file.
pub fn export_raw(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ds.input_bytes()).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_field(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Field {
        Field::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(-3.0f32..3.0)).collect()).unwrap()
    }

    pub(crate) fn toy(pde: &str, n: usize, c: usize, labeled: bool, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|i| SampleRecord {
                input: random_field(&mut rng, c, 8, 8).into(),
                solution: labeled.then(|| random_field(&mut rng, 1, 8, 8).into()),
                params: BTreeMap::from([("i".into(), i as f64)]),
                source: pde.into(),
            })
            .collect();
        Dataset {
            pde: pde.into(),
            grid: Grid2D::new(8, 8).unwrap(),
            channels: (0..c).map(|k| ChannelSpec::physical(format!("{pde}{k}"))).collect(),
            solution_channels: if labeled { vec![ChannelSpec::physical("u")] } else { vec![] },
            seed,
            param_ranges: BTreeMap::from([("i".into(), ParamRange::Interval { lo: 0, hi: n as i64 })]),
            samples,
        }
    }

    #[test]
    fn grid_rejects_odd_or_tiny_axes() {
        assert!(Grid2D::new(64, 64).is_ok());
        assert!(matches!(Grid2D::new(7, 8), Err(Error::Grid { .. })));
        assert!(matches!(Grid2D::new(6, 6), Err(Error::Grid { .. })));
    }

    #[test]
    fn field_rejects_bad_length_and_nan() {
        assert!(Field::new(2, 8, 8, vec![0.0; 127]).is_err());
        let mut v = vec![0.0; 64];
        v[3] = f32::NAN;
        assert!(matches!(Field::new(1, 8, 8, v), Err(Error::NonFinite(_))));
    }

    #[test]
    fn fold_unfold_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tr = Trajectory::new((0..5).map(|_| random_field(&mut rng, 2, 8, 8)).collect(), 0.1).unwrap();
        let folded = tr.fold();
        assert_eq!(folded.channels(), 10);
        assert_eq!(Trajectory::unfold(&folded, 5, 0.1).unwrap(), tr);
        assert!(Trajectory::unfold(&folded, 3, 0.1).is_err());
    }

    #[test]
    fn roll_moves_values() {
        let mut f = Field::zeros(1, 8, 8);
        f.data_mut()[0] = 1.0;
        let r = f.roll(2, 3);
        assert_eq!(r.at(0, 2, 3), 1.0);
        assert_eq!(r.data().iter().sum::<f32>(), 1.0);
    }

    #[test]
    fn union_pads_missing_channels() {
        let a = toy("poisson", 10, 4, false, 1);
        let b = toy("helmholtz", 5, 2, false, 2);
        let u = dataset_union(&[&a, &b]).unwrap();
        assert_eq!(u.len(), 15);
        assert_eq!(u.channels.len(), 4);
        for s in &u.samples[10..] {
            let FieldData::Field(f) = &s.input else { panic!() };
            assert!(f.channel(2).iter().chain(f.channel(3)).all(|&v| v == 0.0));
            assert_eq!(s.source, "helmholtz");
        }
        assert_eq!(u.samples[..10], a.samples[..]);
    }

    #[test]
    fn union_with_itself_and_alone() {
        let a = toy("poisson", 4, 4, true, 3);
        assert_eq!(dataset_union(&[&a]).unwrap(), a);
        let d = dataset_union(&[&a, &a]).unwrap();
        assert_eq!(d.len(), 8);
        assert_eq!(d.channels, a.channels);
        assert!(matches!(dataset_union(&[]), Err(Error::EmptyUnion)));
    }

    #[test]
    fn union_rejects_other_resolution() {
        let a = toy("p", 2, 1, false, 1);
        let mut b = toy("p", 2, 1, false, 1);
        b.grid = Grid2D::new(16, 16).unwrap();
        for s in &mut b.samples {
            s.input = Field::zeros(1, 16, 16).into();
        }
        assert!(matches!(dataset_union(&[&a, &b]), Err(Error::Resolution(..))));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let [a, b, c] = split_indices(10, [0.8, 0.1, 0.1], 7).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
        assert_eq!(split_indices(10, [0.8, 0.1, 0.1], 7).unwrap(), [a.clone(), b, c]);
        let other = split_indices(10, [0.8, 0.1, 0.1], 8).unwrap();
        assert_ne!(other[0], a);
        assert_eq!(other[0].len(), 8);
        let all = split_indices(10, [1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!(all[0].len(), 10);
        assert!(matches!(split_indices(10, [1.2, -0.2, 0.0], 1), Err(Error::Fraction(_))));
        assert!(matches!(split_indices(10, [0.5, 0.1, 0.1], 1), Err(Error::FractionSum(_))));
    }

    #[test]
    fn constant_channel_is_flagged_and_passed_through() {
        let mut ds = toy("p", 3, 2, false, 4);
        for s in &mut ds.samples {
            let FieldData::Field(f) = &mut s.input else { panic!() };
            f.channel_mut(1).fill(5.0);
        }
        let st = channel_stats(&ds).unwrap();
        assert_eq!(st.degenerate, vec![false, true]);
        let FieldData::Field(f) = &ds.samples[0].input else { panic!() };
        let n = normalize(f, &st).unwrap();
        assert_eq!(n.channel(1), f.channel(1));
    }

    #[test]
    fn normalized_dataset_has_unit_statistics() {
        let ds = toy("p", 6, 3, false, 5);
        let st = channel_stats(&ds).unwrap();
        let normed: Vec<FieldData> = ds
            .samples
            .iter()
            .map(|s| FieldData::Field(normalize(&s.input.folded(), &st).unwrap()))
            .collect();
        let after = ChannelStats::of(&normed).unwrap();
        for c in 0..3 {
            assert!(after.mean[c].abs() < 1e-5);
            assert!((after.std[c] - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn normalize_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = random_field(&mut rng, 2, 16, 16);
        let st = ChannelStats {
            mean: vec![0.3, -1.5],
            std: vec![2.5, 0.7],
            degenerate: vec![false, false],
        };
        let back = denormalize(&normalize(&f, &st).unwrap(), &st).unwrap();
        let dev = f.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(dev < 1e-6, "{dev}");
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 0usize..200, a in 0.0f64..1.0, b in 0.0f64..1.0, seed: u64) {
            let f0 = a;
            let f1 = (1.0 - a) * b;
            let f2 = 1.0 - f0 - f1;
            let parts = split_indices(n, [f0, f1, f2], seed).unwrap();
            let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn union_is_associative_and_padding_idempotent(na in 1usize..4, nb in 1usize..4, nc in 1usize..4,
                                                      ca in 1usize..4, cb in 1usize..4, cc in 1usize..4) {
            let a = toy("a", na, ca, false, 1);
            let b = toy("b", nb, cb, false, 2);
            let c = toy("c", nc, cc, false, 3);
            let left = dataset_union(&[&dataset_union(&[&a, &b]).unwrap(), &c]).unwrap();
            let right = dataset_union(&[&a, &dataset_union(&[&b, &c]).unwrap()]).unwrap();
            prop_assert_eq!(&left, &right);
            let again = dataset_union(&[&left]).unwrap();
            prop_assert_eq!(&again, &left);
            let padded = dataset_union(&[&left, &left]).unwrap();
            prop_assert_eq!(padded.channels.len(), left.channels.len());
        }
    }
}
