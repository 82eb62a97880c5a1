use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nopt_cli::commands::{self, DataRole, Grid};
use nopt_cli::config::{load_config, ExperimentConfig};
use nopt_cli::ledger::RunLedger;
use nopt_cli::report::report;
use nopt_cli::CliError;
use nopt_core::finetune::InitMode;

#[derive(Parser)]
#[command(name = "nopt", version, about = "Unsupervised pretraining and in-context inference for neural PDE operators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides the configuration.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Equation when no configuration is given.
    #[arg(long)]
    pde: Option<String>,
    /// Grid side; overrides the configuration.
    #[arg(long)]
    resolution: Option<usize>,
    /// Rerun even when the ledger holds the run.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        labeled: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// pretrain, train, ood or demos; defaults to pretrain for input-only
        /// data and train otherwise.
        #[arg(long)]
        role: Option<String>,
    },
    /// Pretrain an encoder-decoder on input-only data.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mask: Option<f64>,
        /// Blur range `lo:hi` in grid cells.
        #[arg(long)]
        blur: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fine-tune on labeled data.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// random, pretrained or frozen.
        #[arg(long, default_value = "random")]
        init: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Evaluate a fine-tuned checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Sweep the number of in-context demos.
    Icl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        ood: PathBuf,
        #[arg(long)]
        demos: PathBuf,
    },
    /// Time input-only against labeled generation.
    Cost {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: usize,
    },
    /// Run the whole pipeline over a mask/blur grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Terms such as `mask=0,0.3,0.7` and `blur=0:0,0:2`.
        #[arg(long, num_args = 1..)]
        grid: Vec<String>,
        /// Print the planned pretraining runs without running them.
        #[arg(long)]
        dry_run: bool,
    },
    /// Summarize results tables into CSVs and SVG plots.
    Report {
        #[arg(long)]
        output: PathBuf,
    },
}

fn base_config(c: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &c.config {
        Some(path) => load_config(path)?,
        None => {
            let pde = commands::parse_pde(c.pde.as_deref().unwrap_or("poisson"))?;
            ExperimentConfig::new(pde, "runs")
        }
    };
    if let (Some(p), Some(_)) = (&c.pde, &c.config) {
        cfg.pde.name = commands::parse_pde(p)?;
    }
    if let Some(o) = &c.output {
        cfg.output = o.clone();
    }
    if let Some(r) = c.resolution {
        cfg.pde.resolution = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn role(name: &str) -> Result<DataRole, CliError> {
    Ok(match name {
        "pretrain" => DataRole::Pretrain,
        "train" => DataRole::Train,
        "ood" => DataRole::Ood,
        "demos" => DataRole::Demos,
        _ => return Err(CliError::Config(format!("--role: unknown role {name:?}"))),
    })
}

fn report_outcome(what: &str, o: &commands::Outcome) {
    let verb = if o.skipped() { "already done" } else { "wrote" };
    println!("{what}: {verb} {}", o.path().display());
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate {
            common,
            n,
            labeled,
            seed,
            role: r,
        } => {
            let mut cfg = base_config(&common)?;
            if let Some(s) = seed {
                cfg.generation.seed = s;
            }
            let role = match r {
                Some(name) => role(&name)?,
                None if labeled => DataRole::Train,
                None => DataRole::Pretrain,
            };
            let n = n.unwrap_or_else(|| commands::default_size(&cfg, role));
            let ledger = RunLedger::open(&cfg.output)?;
            let o = commands::generate_role(&cfg, &ledger, role, n, labeled, common.force)?;
            report_outcome("generate", &o);
        }
        Command::Pretrain {
            common,
            data,
            mask,
            blur,
            epochs,
            lr,
            seed,
        } => {
            let mut cfg = base_config(&common)?;
            let p = &mut cfg.pretrain;
            p.mask_ratio = mask.unwrap_or(p.mask_ratio);
            p.epochs = epochs.unwrap_or(p.epochs);
            p.lr = lr.unwrap_or(p.lr);
            p.seed = seed.unwrap_or(p.seed);
            if let Some(b) = blur {
                let grid = Grid::parse(&[format!("blur={b}")], &cfg)?;
                (cfg.pretrain.blur_min, cfg.pretrain.blur_max) = grid.blurs[0];
            }
            cfg.validate()?;
            let ledger = RunLedger::open(&cfg.output)?;
            let o = commands::pretrain(&cfg, &ledger, &data, common.force)?;
            report_outcome("pretrain", &o);
        }
        Command::Finetune {
            common,
            data,
            n,
            seed,
            init,
            checkpoint,
            epochs,
            lr,
        } => {
            let mut cfg = base_config(&common)?;
            cfg.finetune.epochs = epochs.unwrap_or(cfg.finetune.epochs);
            cfg.finetune.lr = lr.unwrap_or(cfg.finetune.lr);
            let need = || checkpoint.clone().ok_or_else(|| CliError::Config(format!("--init {init} needs --checkpoint")));
            let mode = match init.as_str() {
                "random" => InitMode::Random,
                "pretrained" => InitMode::Pretrained(need()?),
                "frozen" => InitMode::Frozen(need()?),
                other => return Err(CliError::Config(format!("--init: unknown mode {other:?}"))),
            };
            let ledger = RunLedger::open(&cfg.output)?;
            let run = commands::train_run(&cfg, mode, n, seed);
            let (o, rep) = commands::finetune(&cfg, &ledger, &data, &run, common.force)?;
            report_outcome("finetune", &o);
            if let Some(r) = rep {
                println!("train_rl2 {:.6} test_rl2 {:.6} gap {:.6}", r.train_rl2, r.test_rl2, r.gap);
            }
        }
        Command::Eval { checkpoint, data } => {
            let (rl2, rollout) = commands::eval(&checkpoint, &data)?;
            println!("rl2 {rl2:.6}");
            for (i, e) in rollout.iter().enumerate() {
                println!("step {} rl2 {e:.6}", i + 1);
            }
        }
        Command::Icl {
            common,
            checkpoint,
            ood,
            demos,
        } => {
            let cfg = base_config(&common)?;
            let ledger = RunLedger::open(&cfg.output)?;
            let (o, rows) = commands::icl(&cfg, &ledger, &checkpoint, &ood, &demos, common.force)?;
            report_outcome("icl", &o);
            for r in rows {
                println!("J={} {} seed={} rl2 {:.6}", r.j, r.source, r.seed, r.rl2);
            }
        }
        Command::Cost { common, n } => {
            let cfg = base_config(&common)?;
            let row = commands::cost(&cfg, n)?;
            println!("pde,n,labeled_secs,unlabeled_secs,host");
            println!("{},{},{:.3},{:.3},{}", row.pde, row.n, row.labeled_secs, row.unlabeled_secs, row.host);
        }
        Command::Sweep {
            common,
            grid,
            dry_run,
        } => {
            let cfg = base_config(&common)?;
            let grid = Grid::parse(&grid, &cfg)?;
            if dry_run {
                let points = grid.points();
                println!("{} pretraining runs", points.len());
                for (m, (lo, hi)) in points {
                    println!("mask={m} blur={lo}:{hi}");
                }
                return Ok(());
            }
            let s = commands::sweep(&cfg, &grid, common.force)?;
            println!(
                "pretrain {} finetune {} icl {} (skipped {})",
                s.pretrain_runs, s.finetune_runs, s.icl_runs, s.skipped
            );
        }
        Command::Report { output } => {
            for p in report(&output)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
