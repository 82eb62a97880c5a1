//! The stages behind each subcommand. Every stage hashes the settings that
//! determine its output, skips work the ledger already holds (unless forced)
//! and records what it produced.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nopt_core::datamodel::{read_dataset, write_dataset, Dataset};
use nopt_core::finetune::{append_results, evaluate, rollout_dataset, train_supervised, EvalReport, InitMode, TrainRun};
use nopt_core::fno::{load_checkpoint, save_checkpoint, FnoModel, TimeAdapter, CHECKPOINT_FILE, WEIGHTS_FILE};
use nopt_core::icl::{icl_sweep, write_icl_csv, IclRow, SweepConfig};
use nopt_core::pdegen::{generate, CostRow, GenConfig, Pde, Stage};
use nopt_core::pretrain::{train_pretrain, write_loss_csv};
use nopt_core::runtime::derive_seed;
use serde::Serialize;

use crate::config::{bytes_hash, content_hash, ExperimentConfig};
use crate::ledger::{LedgerEntry, RunLedger};
use crate::CliError;

pub const RESULTS_FILE: &str = "results.csv";
pub const ICL_FILE: &str = "icl.csv";
pub const COSTS_FILE: &str = "costs.csv";

/// What a stage did.
#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Ran(PathBuf),
    /// The ledger already held this run; the path is its artifact.
    Skipped(PathBuf),
}

impl Outcome {
    pub fn path(&self) -> &Path {
        match self {
            Outcome::Ran(p) | Outcome::Skipped(p) => p,
        }
    }

    pub fn skipped(&self) -> bool {
        matches!(self, Outcome::Skipped(_))
    }
}

/// Role of a generated dataset; each role draws from its own seed stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DataRole {
    /// Input-only samples for pretraining.
    Pretrain,
    /// Labeled samples for fine-tuning and testing.
    Train,
    /// Labeled out-of-distribution queries.
    Ood,
    /// Labeled out-of-distribution demo pool.
    Demos,
}

impl DataRole {
    pub fn stage(self) -> Stage {
        match self {
            DataRole::Pretrain => Stage::Pretrain,
            DataRole::Train => Stage::Train,
            DataRole::Ood | DataRole::Demos => Stage::Ood,
        }
    }

    fn stream(self) -> u64 {
        match self {
            DataRole::Pretrain => 101,
            DataRole::Train => 102,
            DataRole::Ood => 103,
            DataRole::Demos => 104,
        }
    }

    pub fn labeled(self) -> bool {
        self != DataRole::Pretrain
    }

    pub fn name(self) -> &'static str {
        match self {
            DataRole::Pretrain => "pretrain",
            DataRole::Train => "train",
            DataRole::Ood => "ood",
            DataRole::Demos => "demos",
        }
    }
}

fn short(hash: &str) -> &str {
    &hash[..12]
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

/// Identifies a checkpoint by provenance and weight bytes, independent of
/// where it is stored.
fn checkpoint_id(dir: &Path) -> Result<String, CliError> {
    let (_, prov) = load_checkpoint(dir)?;
    let weights = dir.join(WEIGHTS_FILE);
    let bytes = std::fs::read(&weights).map_err(io(&weights))?;
    Ok(content_hash(&(prov, bytes_hash(&bytes))))
}

fn done(ledger: &RunLedger, hash: &str, force: bool) -> Result<Option<PathBuf>, CliError> {
    if force {
        return Ok(None);
    }
    Ok(ledger.completed(hash)?.and_then(|e| e.artifacts.into_iter().next()))
}

fn record(ledger: &RunLedger, hash: String, stage: &str, artifacts: Vec<PathBuf>, start: Instant) -> Result<(), CliError> {
    ledger.record(&LedgerEntry {
        hash,
        stage: stage.into(),
        artifacts,
        secs: start.elapsed().as_secs_f64(),
    })
}

pub fn adapter(cfg: &ExperimentConfig) -> TimeAdapter {
    TimeAdapter::for_pde(cfg.pde.name, &cfg.pde.rd, &cfg.pde.ns)
}

/// Generator settings for a dataset of `n` samples in `role`.
pub fn gen_config(cfg: &ExperimentConfig, role: DataRole, n: usize, labeled: bool) -> GenConfig {
    let mut g = GenConfig::new(cfg.pde.name, n, cfg.pde.resolution, role.stage(), labeled, 0);
    g.seed = derive_seed(cfg.generation.seed, role.stream(), 0);
    g.range = cfg.range(role.stage());
    g.rd = cfg.pde.rd.clone();
    g.ns = cfg.pde.ns.clone();
    g
}

pub fn default_size(cfg: &ExperimentConfig, role: DataRole) -> usize {
    match role {
        DataRole::Pretrain => cfg.generation.n,
        DataRole::Train => cfg.generation.labeled_n,
        DataRole::Ood => cfg.generation.ood_n,
        DataRole::Demos => cfg.icl.demos.iter().copied().max().unwrap_or(0).max(1),
    }
}

/// Generates (or finds) the dataset for `role`.
pub fn generate_role(
    cfg: &ExperimentConfig,
    ledger: &RunLedger,
    role: DataRole,
    n: usize,
    labeled: bool,
    force: bool,
) -> Result<Outcome, CliError> {
    let g = gen_config(cfg, role, n, labeled);
    let hash = content_hash(&("generate", &g));
    if let Some(p) = done(ledger, &hash, force)? {
        return Ok(Outcome::Skipped(p));
    }
    let start = Instant::now();
    let dir = cfg.output.join("data").join(format!(
        "{}-{}-{}-n{n}-{}",
        cfg.pde.name,
        role.name(),
        if labeled { "labeled" } else { "unlabeled" },
        short(&hash)
    ));
    let (ds, _) = generate(&g)?;
    write_dataset(&ds, &dir)?;
    record(ledger, hash, "generate", vec![dir.clone()], start)?;
    Ok(Outcome::Ran(dir))
}

pub fn load_data(dir: &Path) -> Result<Dataset, CliError> {
    if !dir.exists() {
        return Err(CliError::Missing(format!("dataset {}", dir.display())));
    }
    Ok(read_dataset(dir)?)
}

/// Times input-only against labeled generation of `n` samples and appends
/// the row to the cost table.
pub fn cost(cfg: &ExperimentConfig, n: usize) -> Result<CostRow, CliError> {
    let (_, unlabeled) = generate(&gen_config(cfg, DataRole::Train, n, false))?;
    let (_, labeled) = generate(&gen_config(cfg, DataRole::Train, n, true))?;
    let row = CostRow::new(&unlabeled, &labeled);
    std::fs::create_dir_all(&cfg.output).map_err(io(&cfg.output))?;
    let path = cfg.output.join(COSTS_FILE);
    let fresh = !path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(io(&path))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    w.serialize(&row).map_err(|e| CliError::Io(e.to_string()))?;
    w.flush().map_err(io(&path))?;
    Ok(row)
}

/// Pretrains an encoder-decoder on the dataset in `data`; returns the
/// checkpoint directory.
pub fn pretrain(cfg: &ExperimentConfig, ledger: &RunLedger, data: &Path, force: bool) -> Result<Outcome, CliError> {
    let ds = load_data(data)?;
    let adapter = adapter(cfg);
    let pc = cfg.pretrain_config();
    let fno = cfg.fno(adapter.in_channels(), adapter.out_channels());
    let hash = content_hash(&("pretrain", ds.fingerprint(), &pc, &fno, &adapter));
    if let Some(p) = done(ledger, &hash, force)? {
        return Ok(Outcome::Skipped(p));
    }
    let start = Instant::now();
    let dir = cfg.output.join("pretrain").join(short(&hash));
    let mut model = FnoModel::<f32>::new(fno, pc.seed, false, true)?;
    let out = train_pretrain(&ds, &mut model, &pc, &adapter)?;
    save_checkpoint(&model, &out.provenance, &dir)?;
    let loss = dir.join("loss.csv");
    write_loss_csv(&out.losses, &loss)?;
    record(ledger, hash, "pretrain", vec![dir.clone(), loss], start)?;
    Ok(Outcome::Ran(dir))
}

/// Settings of one fine-tuning run.
pub fn train_run(cfg: &ExperimentConfig, init: InitMode, n: usize, seed: u64) -> TrainRun {
    let adapter = adapter(cfg);
    TrainRun {
        pde: cfg.pde.name.name().into(),
        init,
        n,
        epochs: cfg.finetune.epochs,
        lr: cfg.finetune.lr,
        seed,
        split_seed: cfg.finetune.split_seed,
        test_fraction: cfg.finetune.test_fraction,
        config: cfg.fno(adapter.in_channels(), adapter.out_channels()),
        adapter,
        rollout_steps: cfg.finetune.rollout_steps,
        threads: 0,
    }
}

/// Fine-tunes on `data`, saves the model and appends the report to the
/// results table.
pub fn finetune(
    cfg: &ExperimentConfig,
    ledger: &RunLedger,
    data: &Path,
    run: &TrainRun,
    force: bool,
) -> Result<(Outcome, Option<EvalReport>), CliError> {
    let ds = load_data(data)?;
    let checkpoint_id = match &run.init {
        InitMode::Random => String::new(),
        InitMode::Pretrained(p) | InitMode::Frozen(p) => {
            if !p.join(CHECKPOINT_FILE).exists() {
                return Err(CliError::Missing(format!("checkpoint {}", p.display())));
            }
            checkpoint_id(p)?
        }
    };
    // The checkpoint enters the hash by content, not by location.
    let mut keyed = run.clone();
    keyed.init = match &run.init {
        InitMode::Random => InitMode::Random,
        InitMode::Pretrained(_) => InitMode::Pretrained(PathBuf::new()),
        InitMode::Frozen(_) => InitMode::Frozen(PathBuf::new()),
    };
    let hash = content_hash(&("finetune", ds.fingerprint(), &keyed, checkpoint_id));
    if let Some(p) = done(ledger, &hash, force)? {
        return Ok((Outcome::Skipped(p), None));
    }
    let start = Instant::now();
    let out = train_supervised(&ds, run)?;
    let dir = cfg.output.join("finetune").join(short(&hash));
    save_checkpoint(&out.model, &out.provenance, &dir)?;
    let results = cfg.output.join(RESULTS_FILE);
    append_results(&results, &run.pde, run.init.label(), &out.report)?;
    record(ledger, hash, "finetune", vec![dir.clone()], start)?;
    Ok((Outcome::Ran(dir), Some(out.report)))
}

/// Mean relative L2 of a fine-tuned checkpoint on `data`, with per-step
/// rollout errors for next-step forecasters.
pub fn eval(checkpoint: &Path, data: &Path) -> Result<(f64, Vec<f64>), CliError> {
    let (model, prov) = load_checkpoint(checkpoint)?;
    let adapter = prov
        .adapter
        .ok_or_else(|| CliError::Missing(format!("{} records no time adapter", checkpoint.display())))?;
    let ds = load_data(data)?;
    let rl2 = evaluate(&model, &ds, &adapter)?;
    let rollout = match adapter {
        TimeAdapter::NextStep { .. } => rollout_dataset(&model, &ds, None)?,
        _ => Vec::new(),
    };
    Ok((rl2, rollout))
}

/// In-context sweep of a fine-tuned checkpoint over the OOD queries.
pub fn icl(
    cfg: &ExperimentConfig,
    ledger: &RunLedger,
    checkpoint: &Path,
    ood: &Path,
    demos: &Path,
    force: bool,
) -> Result<(Outcome, Vec<IclRow>), CliError> {
    let (model, prov) = load_checkpoint(checkpoint)?;
    let (q, pool) = (load_data(ood)?, load_data(demos)?);
    let sc = SweepConfig {
        k: cfg.icl.k,
        demos: cfg.icl.demos.clone(),
        seeds: cfg.icl.seeds.clone(),
        sources: cfg.icl.sources.clone(),
        chunk: cfg.icl.chunk,
        threads: 0,
    };
    let hash = content_hash(&("icl", checkpoint_id(checkpoint)?, q.fingerprint(), pool.fingerprint(), &sc));
    let path = cfg.output.join("icl").join(format!("{}.csv", short(&hash)));
    if let Some(p) = done(ledger, &hash, force)? {
        return Ok((Outcome::Skipped(p), Vec::new()));
    }
    let start = Instant::now();
    let adapter = prov.adapter.unwrap_or_else(|| adapter(cfg));
    let rows = icl_sweep(&model, &q, &pool, &adapter, &sc)?;
    std::fs::create_dir_all(path.parent().unwrap_or(Path::new("."))).map_err(io(&path))?;
    write_icl_csv(&rows, &path)?;
    write_icl_csv(&rows, cfg.output.join(ICL_FILE))?;
    record(ledger, hash, "icl", vec![path.clone()], start)?;
    Ok((Outcome::Ran(path), rows))
}

/// A pretraining grid over mask ratios and blur ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub masks: Vec<f64>,
    pub blurs: Vec<(f64, f64)>,
}

impl Grid {
    /// Parses `mask=0,0.3` and `blur=0:0,0:2` terms; a missing knob keeps the
    /// configured value.
    pub fn parse(terms: &[String], cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let mut grid = Grid {
            masks: vec![cfg.pretrain.mask_ratio],
            blurs: vec![(cfg.pretrain.blur_min, cfg.pretrain.blur_max)],
        };
        let bad = |t: &str| CliError::Config(format!("grid term {t:?}: expected mask=a,b,.. or blur=lo:hi,.."));
        for term in terms {
            let (key, values) = term.split_once('=').ok_or_else(|| bad(term))?;
            let items: Vec<&str> = values.split(',').filter(|s| !s.is_empty()).collect();
            if items.is_empty() {
                return Err(bad(term));
            }
            match key.trim() {
                "mask" => {
                    grid.masks = items
                        .iter()
                        .map(|s| s.trim().parse::<f64>().map_err(|_| bad(term)))
                        .collect::<Result<_, _>>()?;
                }
                "blur" => {
                    grid.blurs = items
                        .iter()
                        .map(|s| {
                            let (lo, hi) = s.split_once(':').ok_or_else(|| bad(term))?;
                            Ok((lo.trim().parse().map_err(|_| bad(term))?, hi.trim().parse().map_err(|_| bad(term))?))
                        })
                        .collect::<Result<_, CliError>>()?;
                }
                _ => return Err(bad(term)),
            }
        }
        Ok(grid)
    }

    /// Every `(mask, blur)` combination, mask-major.
    pub fn points(&self) -> Vec<(f64, (f64, f64))> {
        self.masks
            .iter()
            .flat_map(|&m| self.blurs.iter().map(move |&b| (m, b)))
            .collect()
    }

    /// One configuration per grid point.
    pub fn configs(&self, cfg: &ExperimentConfig) -> Vec<ExperimentConfig> {
        self.points()
            .into_iter()
            .map(|(m, (lo, hi))| {
                let mut c = cfg.clone();
                c.pretrain.mask_ratio = m;
                c.pretrain.blur_min = lo;
                c.pretrain.blur_max = hi;
                c
            })
            .collect()
    }
}

/// Summary of a sweep: runs executed, plus stages the ledger already held.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepSummary {
    pub pretrain_runs: usize,
    pub finetune_runs: usize,
    pub icl_runs: usize,
    pub skipped: usize,
}

/// Counts a skipped outcome; returns whether the stage actually ran.
fn tally(s: &mut SweepSummary, o: &Outcome) -> bool {
    if o.skipped() {
        s.skipped += 1;
    }
    !o.skipped()
}

/// Full pipeline: data, one pretraining per grid point, fine-tuning over
/// budgets × seeds × init modes, then the in-context sweep of the first
/// grid point's fine-tuned model at the largest budget.
pub fn sweep(cfg: &ExperimentConfig, grid: &Grid, force: bool) -> Result<SweepSummary, CliError> {
    for c in grid.configs(cfg) {
        c.validate()?;
    }
    let ledger = RunLedger::open(&cfg.output)?;
    let mut s = SweepSummary::default();
    let data = |role: DataRole| generate_role(cfg, &ledger, role, default_size(cfg, role), role.labeled(), force);
    let pre = data(DataRole::Pretrain)?;
    let train = data(DataRole::Train)?;
    tally(&mut s, &pre);
    tally(&mut s, &train);
    let mut icl_model = None;
    for (gi, c) in grid.configs(cfg).into_iter().enumerate() {
        let ckpt = pretrain(&c, &ledger, pre.path(), force)?;
        if tally(&mut s, &ckpt) {
            s.pretrain_runs += 1;
        }
        let needs_checkpoint = c.finetune.inits.iter().any(|m| m != "random");
        for &n in &c.finetune.budgets {
            for init in c.init_modes(ckpt.path()) {
                if gi > 0 && init == InitMode::Random {
                    continue;
                }
                for &seed in &c.finetune.seeds {
                    let (o, _) = finetune(&c, &ledger, train.path(), &train_run(&c, init.clone(), n, seed), force)?;
                    if tally(&mut s, &o) {
                        s.finetune_runs += 1;
                    }
                    let largest = Some(&n) == c.finetune.budgets.iter().max();
                    let wanted = if needs_checkpoint { init != InitMode::Random } else { true };
                    if gi == 0 && largest && wanted && icl_model.is_none() {
                        icl_model = Some(o.path().to_path_buf());
                    }
                }
            }
        }
    }
    if let Some(model) = icl_model {
        if !cfg.icl.demos.is_empty() {
            let ood = data(DataRole::Ood)?;
            let demos = data(DataRole::Demos)?;
            tally(&mut s, &ood);
            tally(&mut s, &demos);
            let (o, _) = icl(cfg, &ledger, &model, ood.path(), demos.path(), force)?;
            if tally(&mut s, &o) {
                s.icl_runs += 1;
            }
        }
    }
    Ok(s)
}

pub fn parse_pde(s: &str) -> Result<Pde, CliError> {
    s.parse().map_err(|_| CliError::Config(format!("--pde: unknown equation {s:?}")))
}
