//! Parameter sampling, random sources and the four PDE solvers, plus the
//! dataset generator that drives them in labeled or input-only mode.

mod elliptic;
mod grf;
mod ns;
mod rd;

use std::collections::BTreeMap;
use std::fmt;
use std::f64::consts::PI;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use elliptic::{
    helmholtz_operator, poisson_operator, relative_residual, solve_helmholtz, solve_poisson, PoissonParams,
};
pub use grf::{wavenumber, GrfSpec};
pub use ns::{energy, forcing_field, simulate_ns, NsParams};
pub use rd::{simulate_rd, stability_bound, RdParams};

use crate::datamodel::{ChannelSpec, Dataset, Field, FieldData, Grid2D, ParamRange, SampleRecord, Trajectory};
use crate::error::{Error, Result};
use crate::runtime::{derive_seed, with_pool};

const STREAM_SAMPLE: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;

/// `f64` solver output: `frames[t]` holds `C×H×W` values.
#[derive(Clone, Debug, PartialEq)]
pub struct SimTrajectory {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub dt: f64,
    pub frames: Vec<Vec<f64>>,
}

impl SimTrajectory {
    /// Frames `range` as an `f32` trajectory.
    pub fn to_trajectory(&self, range: std::ops::Range<usize>) -> Result<Trajectory> {
        let frames = self.frames[range]
            .iter()
            .map(|f| Field::from_f64(self.channels, self.h, self.w, f))
            .collect::<Result<Vec<_>>>()?;
        Trajectory::new(frames, self.dt)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pde {
    Poisson,
    Helmholtz,
    Rd,
    Ns,
}

impl Pde {
    pub const ALL: [Pde; 4] = [Pde::Poisson, Pde::Helmholtz, Pde::Rd, Pde::Ns];

    pub fn name(self) -> &'static str {
        match self {
            Pde::Poisson => "poisson",
            Pde::Helmholtz => "helmholtz",
            Pde::Rd => "rd",
            Pde::Ns => "ns",
        }
    }

    /// Parameter range for a stage; `None` for reaction–diffusion, whose
    /// coefficients are fixed.
    pub fn default_range(self, stage: Stage) -> Option<ParamRange> {
        use ParamRange::{Interval, Set};
        Some(match (self, stage) {
            (Pde::Poisson, Stage::Pretrain) => Interval { lo: 1, hi: 20 },
            (Pde::Poisson, Stage::Train) => Interval { lo: 5, hi: 15 },
            (Pde::Poisson, Stage::Ood) => Interval { lo: 15, hi: 50 },
            (Pde::Helmholtz, Stage::Pretrain) => Interval { lo: 1, hi: 20 },
            (Pde::Helmholtz, Stage::Train) => Interval { lo: 5, hi: 15 },
            (Pde::Helmholtz, Stage::Ood) => Interval { lo: 15, hi: 20 },
            (Pde::Ns, Stage::Pretrain) => Set(vec![100, 300, 500, 800, 1000]),
            (Pde::Ns, Stage::Train) => Set(vec![300]),
            (Pde::Ns, Stage::Ood) => Set(vec![10000]),
            (Pde::Rd, _) => return None,
        })
    }

    fn range_key(self) -> &'static str {
        match self {
            Pde::Poisson => "lambda",
            Pde::Helmholtz => "omega",
            Pde::Rd => "",
            Pde::Ns => "Re",
        }
    }

    pub fn input_channels(self) -> Vec<ChannelSpec> {
        let names: &[&str] = match self {
            Pde::Poisson => &["f", "K11", "K22", "K12"],
            Pde::Helmholtz => &["f", "omega"],
            Pde::Rd => &["u", "v"],
            Pde::Ns => &["w"],
        };
        names.iter().map(|n| ChannelSpec::physical(*n)).collect()
    }

    pub fn solution_channels(self) -> Vec<ChannelSpec> {
        let names: &[&str] = match self {
            Pde::Poisson | Pde::Helmholtz => &["u"],
            Pde::Rd => &["u", "v"],
            Pde::Ns => &["w"],
        };
        names.iter().map(|n| ChannelSpec::physical(*n)).collect()
    }
}

impl fmt::Display for Pde {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pde {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pde::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Param(format!("unknown pde {s:?}")))
    }
}

/// The three parameter regimes: unsupervised pretraining, fine-tuning and
/// out-of-distribution inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Train,
    Ood,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum PdeParams {
    Poisson(PoissonParams),
    Helmholtz { omega: i64 },
    Rd { du: f64, dv: f64, k: f64 },
    Ns { re: i64 },
}

impl PdeParams {
    pub fn to_map(&self) -> BTreeMap<String, f64> {
        let pairs: Vec<(&str, f64)> = match *self {
            PdeParams::Poisson(p) => vec![
                ("K11", p.k11),
                ("K22", p.k22),
                ("K12", p.k12),
                ("lambda1", p.eigen[0] as f64),
                ("lambda2", p.eigen[1] as f64),
                ("theta", p.theta),
            ],
            PdeParams::Helmholtz { omega } => vec![("omega", omega as f64)],
            PdeParams::Rd { du, dv, k } => vec![("Du", du), ("Dv", dv), ("k", k)],
            PdeParams::Ns { re } => vec![("Re", re as f64)],
        };
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}

fn draw(range: &ParamRange, rng: &mut impl Rng) -> Result<i64> {
    match range {
        ParamRange::Interval { lo, hi } if lo <= hi => Ok(rng.random_range(*lo..=*hi)),
        ParamRange::Set(v) if !v.is_empty() => Ok(v[rng.random_range(0..v.len())]),
        _ => Err(Error::Param(format!("empty parameter range {range:?}"))),
    }
}

/// Draws physical parameters. Poisson eigenvalues are independent uniform
/// integers and the rotation angle is uniform on `[0, π)`.
pub fn sample_params(pde: Pde, range: Option<&ParamRange>, rd: &RdSettings, rng: &mut impl Rng) -> Result<PdeParams> {
    let need = || range.ok_or_else(|| Error::Param(format!("{pde} needs a parameter range")));
    Ok(match pde {
        Pde::Poisson => {
            let r = need()?;
            let (l1, l2) = (draw(r, rng)?, draw(r, rng)?);
            if l1 < 1 || l2 < 1 {
                return Err(Error::Param("diffusion eigenvalues must be positive".into()));
            }
            PdeParams::Poisson(PoissonParams::from_eigen(l1, l2, rng.random_range(0.0..PI)))
        }
        Pde::Helmholtz => {
            let omega = draw(need()?, rng)?;
            if omega < 1 {
                return Err(Error::Param("omega must be at least 1".into()));
            }
            PdeParams::Helmholtz { omega }
        }
        Pde::Rd => PdeParams::Rd {
            du: rd.du,
            dv: rd.dv,
            k: rd.k,
        },
        Pde::Ns => {
            let re = draw(need()?, rng)?;
            if re < 1 {
                return Err(Error::Param("Reynolds number must be at least 1".into()));
            }
            PdeParams::Ns { re }
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RdSettings {
    pub du: f64,
    pub dv: f64,
    pub k: f64,
    pub t_final: f64,
    pub record_dt: f64,
    /// Frames in a labeled input window; the rest become the solution.
    pub t_in: usize,
}

impl Default for RdSettings {
    fn default() -> Self {
        Self {
            du: 1e-3,
            dv: 5e-3,
            k: 5e-3,
            t_final: 5.0,
            record_dt: 0.05,
            t_in: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NsSettings {
    /// Recorded frames per labeled sample, the initial state included.
    pub frames: usize,
    pub record_dt: f64,
    pub forcing: f64,
    pub dt_max: f64,
    pub cfl_safety: f64,
}

impl Default for NsSettings {
    fn default() -> Self {
        Self {
            frames: 33,
            record_dt: 0.25,
            forcing: 0.1,
            dt_max: 1e-2,
            cfl_safety: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub pde: Pde,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub range: Option<ParamRange>,
    pub labeled: bool,
    pub seed: u64,
    pub grf: GrfSpec,
    pub rd: RdSettings,
    pub ns: NsSettings,
    /// Worker threads; 0 defers to the environment.
    pub threads: usize,
}

impl GenConfig {
    pub fn new(pde: Pde, n: usize, resolution: usize, stage: Stage, labeled: bool, seed: u64) -> Self {
        Self {
            pde,
            n,
            h: resolution,
            w: resolution,
            range: pde.default_range(stage),
            labeled,
            seed,
            grf: GrfSpec::default(),
            rd: RdSettings::default(),
            ns: NsSettings::default(),
            threads: 0,
        }
    }

    fn grid(&self) -> Result<Grid2D> {
        match self.pde {
            Pde::Rd => Grid2D::with_extent(self.h, self.w, [-1.0, 1.0], [-1.0, 1.0]),
            _ => Grid2D::new(self.h, self.w),
        }
    }
}

/// Wall time of one generation run, split into input drawing and solving.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub pde: Pde,
    pub n: usize,
    pub labeled: bool,
    pub input_secs: f64,
    pub solve_secs: f64,
    pub host: String,
}

impl CostReport {
    pub fn total_secs(&self) -> f64 {
        self.input_secs + self.solve_secs
    }
}

/// One row of the cost table: an input-only run against a labeled run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub pde: Pde,
    pub n: usize,
    pub labeled_secs: f64,
    pub unlabeled_secs: f64,
    pub host: String,
}

impl CostRow {
    pub fn new(unlabeled: &CostReport, labeled: &CostReport) -> Self {
        Self {
            pde: labeled.pde,
            n: labeled.n,
            labeled_secs: labeled.total_secs(),
            unlabeled_secs: unlabeled.total_secs(),
            host: labeled.host.clone(),
        }
    }
}

/// `hostname/arch/threads`.
pub fn host_descriptor() -> String {
    let name = std::fs::read_to_string("/etc/hostname")
        .ok()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .or_else(|| std::env::var("HOSTNAME").ok())
        .unwrap_or_else(|| "unknown".into());
    format!("{name}/{}/{}", std::env::consts::ARCH, crate::runtime::worker_count())
}

/// Parameters and random fields of one sample before any solve, in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Draft {
    pub params: PdeParams,
    /// Source (Poisson, Helmholtz), initial `(u, v)` (reaction-diffusion) or
    /// initial vorticity (Navier-Stokes), row-major.
    pub fields: Vec<Vec<f64>>,
}

/// The draws behind sample `index` of [`generate`].
pub fn draft(cfg: &GenConfig, index: usize) -> Result<Draft> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SAMPLE, index as u64));
    let params = sample_params(cfg.pde, cfg.range.as_ref(), &cfg.rd, &mut rng)?;
    let n_fields = if cfg.pde == Pde::Rd { 2 } else { 1 };
    let fields = (0..n_fields)
        .map(|_| cfg.grf.sample(cfg.h, cfg.w, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(Draft { params, fields })
}

fn input_of(cfg: &GenConfig, d: &Draft) -> Result<Field> {
    let (h, w) = (cfg.h, cfg.w);
    let plane = h * w;
    let mut values = d.fields.concat();
    match d.params {
        PdeParams::Poisson(p) => {
            for k in [p.k11, p.k22, p.k12] {
                values.extend(std::iter::repeat_n(k, plane));
            }
        }
        PdeParams::Helmholtz { omega } => values.extend(std::iter::repeat_n(omega as f64, plane)),
        _ => {}
    }
    Field::from_f64(values.len() / plane, h, w, &values)
}

fn solve(cfg: &GenConfig, d: &Draft) -> Result<(FieldData, FieldData)> {
    let (h, w) = (cfg.h, cfg.w);
    Ok(match d.params {
        PdeParams::Poisson(p) => {
            let u = solve_poisson(&p, &d.fields[0], h, w)?;
            (input_of(cfg, d)?.into(), Field::from_f64(1, h, w, &u)?.into())
        }
        PdeParams::Helmholtz { omega } => {
            let u = solve_helmholtz(omega as f64, &d.fields[0], h, w)?;
            (input_of(cfg, d)?.into(), Field::from_f64(1, h, w, &u)?.into())
        }
        PdeParams::Rd { du, dv, k } => {
            let s = &cfg.rd;
            let p = RdParams::for_record(du, dv, k, s.record_dt, 2.0 / h as f64);
            let tr = simulate_rd(&d.fields[0], &d.fields[1], h, &p, s.t_final)?;
            let t = tr.frames.len();
            if s.t_in == 0 || s.t_in >= t {
                return Err(Error::Param(format!("input window {} leaves no target in {t} frames", s.t_in)));
            }
            (tr.to_trajectory(0..s.t_in)?.into(), tr.to_trajectory(s.t_in..t)?.into())
        }
        PdeParams::Ns { re } => {
            let s = &cfg.ns;
            let mut p = NsParams::from_re(re as f64);
            p.forcing = s.forcing;
            p.dt_max = s.dt_max;
            p.cfl_safety = s.cfl_safety;
            let t_final = s.record_dt * s.frames.saturating_sub(1) as f64;
            let tr = simulate_ns(&d.fields[0], h, w, &p, t_final, s.record_dt)?;
            (input_of(cfg, d)?.into(), tr.to_trajectory(0..tr.frames.len())?.into())
        }
    })
}

/// Generates `cfg.n` samples. Sample `i` draws everything from a seed derived
/// from `(cfg.seed, i)`, so the result does not depend on the worker count.
/// Input-only reaction–diffusion and Navier–Stokes snapshots are shuffled with
/// a separate seed stream.
pub fn generate(cfg: &GenConfig) -> Result<(Dataset, CostReport)> {
    let grid = cfg.grid()?;
    cfg.grf.validate()?;
    let t0 = Instant::now();
    let drafts: Vec<Draft> = with_pool(cfg.threads, || {
        (0..cfg.n).into_par_iter().map(|i| draft(cfg, i)).collect::<Result<Vec<_>>>()
    })?;
    let mut samples: Vec<SampleRecord> = Vec::with_capacity(cfg.n);
    let input_secs;
    let solve_secs;
    if cfg.labeled {
        input_secs = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let solved = with_pool(cfg.threads, || {
            drafts.par_iter().map(|d| solve(cfg, d)).collect::<Result<Vec<_>>>()
        })?;
        for (d, (input, solution)) in drafts.iter().zip(solved) {
            samples.push(SampleRecord {
                input,
                solution: Some(solution),
                params: d.params.to_map(),
                source: cfg.pde.name().into(),
            });
        }
        solve_secs = t1.elapsed().as_secs_f64();
    } else {
        for d in &drafts {
            samples.push(SampleRecord {
                input: input_of(cfg, d)?.into(),
                solution: None,
                params: d.params.to_map(),
                source: cfg.pde.name().into(),
            });
        }
        if matches!(cfg.pde, Pde::Rd | Pde::Ns) {
            samples.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SHUFFLE, 0)));
        }
        input_secs = t0.elapsed().as_secs_f64();
        solve_secs = 0.0;
    }
    let mut param_ranges = BTreeMap::new();
    if let Some(r) = &cfg.range {
        if cfg.pde != Pde::Rd {
            param_ranges.insert(cfg.pde.range_key().to_string(), r.clone());
        }
    }
    let ds = Dataset {
        pde: cfg.pde.name().into(),
        grid,
        channels: cfg.pde.input_channels(),
        solution_channels: if cfg.labeled { cfg.pde.solution_channels() } else { Vec::new() },
        seed: cfg.seed,
        param_ranges,
        samples,
    };
    let report = CostReport {
        pde: cfg.pde,
        n: cfg.n,
        labeled: cfg.labeled,
        input_secs,
        solve_secs,
        host: host_descriptor(),
    };
    Ok((ds, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pde_names_round_trip() {
        for p in Pde::ALL {
            assert_eq!(p.name().parse::<Pde>().unwrap(), p);
        }
        assert!("heat".parse::<Pde>().is_err());
    }

    #[test]
    fn stage_ranges() {
        use ParamRange::{Interval, Set};
        assert_eq!(Pde::Poisson.default_range(Stage::Pretrain), Some(Interval { lo: 1, hi: 20 }));
        assert_eq!(Pde::Helmholtz.default_range(Stage::Ood), Some(Interval { lo: 15, hi: 20 }));
        assert_eq!(Pde::Ns.default_range(Stage::Train), Some(Set(vec![300])));
        assert_eq!(Pde::Ns.default_range(Stage::Ood), Some(Set(vec![10000])));
        assert_eq!(Pde::Poisson.default_range(Stage::Ood), Some(Interval { lo: 15, hi: 50 }));
    }

    #[test]
    fn degenerate_range_pins_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = ParamRange::Interval { lo: 5, hi: 5 };
        for _ in 0..20 {
            let PdeParams::Poisson(p) = sample_params(Pde::Poisson, Some(&r), &RdSettings::default(), &mut rng).unwrap()
            else {
                panic!()
            };
            assert_eq!(p.eigen, [5, 5]);
            assert!((p.k11 - 5.0).abs() < 1e-12 && p.k12.abs() < 1e-12);
        }
    }

    #[test]
    fn every_integer_is_reached() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = ParamRange::Interval { lo: 5, hi: 15 };
        let mut seen = [false; 11];
        for _ in 0..10_000 {
            let PdeParams::Helmholtz { omega } =
                sample_params(Pde::Helmholtz, Some(&r), &RdSettings::default(), &mut rng).unwrap()
            else {
                panic!()
            };
            seen[(omega - 5) as usize] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn empty_range_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = ParamRange::Interval { lo: 3, hi: 2 };
        assert!(sample_params(Pde::Poisson, Some(&r), &RdSettings::default(), &mut rng).is_err());
        assert!(sample_params(Pde::Ns, Some(&ParamRange::Set(vec![])), &RdSettings::default(), &mut rng).is_err());
    }

    #[test]
    fn labeled_poisson_layout() {
        let cfg = GenConfig::new(Pde::Poisson, 4, 16, Stage::Train, true, 1);
        let (ds, cost) = generate(&cfg).unwrap();
        assert_eq!(ds.len(), 4);
        assert!(cost.input_secs >= 0.0 && cost.solve_secs >= 0.0);
        for s in &ds.samples {
            assert_eq!(s.input.channels(), 4);
            assert_eq!(s.solution.as_ref().unwrap().channels(), 1);
        }
    }

    #[test]
    fn unlabeled_rd_snapshots() {
        let cfg = GenConfig::new(Pde::Rd, 3, 16, Stage::Pretrain, false, 2);
        let (ds, _) = generate(&cfg).unwrap();
        for s in &ds.samples {
            assert_eq!((s.input.t(), s.input.channels()), (1, 2));
            assert!(s.solution.is_none());
        }
        assert_eq!(ds.grid.x_range, [-1.0, 1.0]);
    }
}
