//! Aggregates the results tables into summary CSVs and SVG curves.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::commands::{ICL_FILE, RESULTS_FILE};
use crate::plot::{LinePlot, Series};
use crate::CliError;

/// One row of the fine-tuning results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub pde: String,
    pub init: String,
    pub n: usize,
    pub seed: u64,
    pub train_rl2: f64,
    pub test_rl2: f64,
    pub gap: f64,
    pub rollout_step: Option<usize>,
    pub rollout_rl2: Option<f64>,
    pub secs: f64,
}

/// One row of the in-context sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IclCsvRow {
    pub pde: String,
    #[serde(rename = "J")]
    pub j: usize,
    pub source: String,
    pub seed: u64,
    pub rl2: f64,
    pub scale: f64,
    pub shape: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Summary of one (init, budget) cell over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetSummary {
    pub pde: String,
    pub init: String,
    pub n: usize,
    pub runs: usize,
    pub test_mean: f64,
    pub test_std: f64,
    pub gap_mean: f64,
    pub gap_std: f64,
}

/// Collapses rollout rows to one per run (the latest run of a seed wins) and
/// summarizes each (pde, init, budget) cell.
pub fn summarize_results(rows: &[ResultRow]) -> Vec<BudgetSummary> {
    let mut runs: BTreeMap<(String, String, usize), BTreeMap<u64, &ResultRow>> = BTreeMap::new();
    for r in rows {
        runs.entry((r.pde.clone(), r.init.clone(), r.n)).or_default().insert(r.seed, r);
    }
    runs.into_iter()
        .map(|((pde, init, n), seeds)| {
            let test: Vec<f64> = seeds.values().map(|r| r.test_rl2).collect();
            let gap: Vec<f64> = seeds.values().map(|r| r.gap).collect();
            let (test_mean, test_std) = mean_std(&test);
            let (gap_mean, gap_std) = mean_std(&gap);
            BudgetSummary {
                pde,
                init,
                n,
                runs: test.len(),
                test_mean,
                test_std,
                gap_mean,
                gap_std,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoSummary {
    pub pde: String,
    pub source: String,
    #[serde(rename = "J")]
    pub j: usize,
    pub seeds: usize,
    pub rl2_mean: f64,
    pub rl2_std: f64,
    pub scale_mean: f64,
    pub shape_mean: f64,
}

pub fn summarize_icl(rows: &[IclCsvRow]) -> Vec<DemoSummary> {
    let mut cells: BTreeMap<(String, String, usize), Vec<&IclCsvRow>> = BTreeMap::new();
    for r in rows {
        cells.entry((r.pde.clone(), r.source.clone(), r.j)).or_default().push(r);
    }
    cells
        .into_iter()
        .map(|((pde, source, j), rs)| {
            let (rl2_mean, rl2_std) = mean_std(&rs.iter().map(|r| r.rl2).collect::<Vec<_>>());
            DemoSummary {
                pde,
                source,
                j,
                seeds: rs.len(),
                rl2_mean,
                rl2_std,
                scale_mean: mean_std(&rs.iter().map(|r| r.scale).collect::<Vec<_>>()).0,
                shape_mean: mean_std(&rs.iter().map(|r| r.shape).collect::<Vec<_>>()).0,
            }
        })
        .collect()
}

fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_svg(plot: &LinePlot, path: &Path) -> Result<(), CliError> {
    std::fs::write(path, plot.to_svg()).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn budget_plot(summary: &[BudgetSummary], title: &str, y: &str, pick: impl Fn(&BudgetSummary) -> (f64, f64)) -> LinePlot {
    let mut plot = LinePlot::new(title, "labeled samples", y);
    let mut by_init: BTreeMap<&str, Vec<(f64, f64, f64)>> = BTreeMap::new();
    for s in summary {
        let (m, e) = pick(s);
        by_init.entry(&s.init).or_default().push((s.n as f64, m, e));
    }
    for (init, points) in by_init {
        plot.series.push(Series {
            name: init.to_string(),
            points,
        });
    }
    plot
}

/// Writes summary tables and plots for whatever tables exist under `output`
/// into `output/report`; returns the files written.
pub fn report(output: &Path) -> Result<Vec<PathBuf>, CliError> {
    let results = output.join(RESULTS_FILE);
    let icl = output.join(ICL_FILE);
    if !results.exists() && !icl.exists() {
        return Err(CliError::Missing(format!("no {RESULTS_FILE} or {ICL_FILE} under {}", output.display())));
    }
    let dir = output.join("report");
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let mut written = Vec::new();
    let mut emit_csv = |name: &str, f: &dyn Fn(&Path) -> Result<(), CliError>| -> Result<(), CliError> {
        let p = dir.join(name);
        f(&p)?;
        written.push(p);
        Ok(())
    };
    if results.exists() {
        let rows: Vec<ResultRow> = read_rows(&results)?;
        let summary = summarize_results(&rows);
        emit_csv("finetune_summary.csv", &|p| write_csv(&summary, p))?;
        let err = budget_plot(&summary, "Test error against budget", "relative L2", |s| (s.test_mean, s.test_std));
        emit_csv("error_vs_budget.svg", &|p| write_svg(&err, p))?;
        let gap = budget_plot(&summary, "Generalization gap against budget", "test - train", |s| (s.gap_mean, s.gap_std));
        emit_csv("gap_vs_budget.svg", &|p| write_svg(&gap, p))?;
        let mut steps: BTreeMap<(String, usize), BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
        for r in &rows {
            if let (Some(step), Some(e)) = (r.rollout_step, r.rollout_rl2) {
                steps.entry((r.init.clone(), r.n)).or_default().entry(step).or_default().push(e);
            }
        }
        if !steps.is_empty() {
            let mut plot = LinePlot::new("Rollout error per step", "step", "relative L2");
            for ((init, n), per_step) in steps {
                let points = per_step
                    .into_iter()
                    .map(|(s, es)| {
                        let (m, sd) = mean_std(&es);
                        (s as f64, m, sd)
                    })
                    .collect();
                plot.series.push(Series {
                    name: format!("{init} n={n}"),
                    points,
                });
            }
            emit_csv("rollout.svg", &|p| write_svg(&plot, p))?;
        }
    }
    if icl.exists() {
        let rows: Vec<IclCsvRow> = read_rows(&icl)?;
        let summary = summarize_icl(&rows);
        emit_csv("icl_summary.csv", &|p| write_csv(&summary, p))?;
        let mut plot = LinePlot::new("Error against number of demos", "demos J", "relative L2");
        let mut by_source: BTreeMap<&str, Vec<(f64, f64, f64)>> = BTreeMap::new();
        for s in &summary {
            by_source.entry(&s.source).or_default().push((s.j as f64, s.rl2_mean, s.rl2_std));
        }
        for (source, points) in by_source {
            plot.series.push(Series {
                name: source.to_string(),
                points,
            });
        }
        emit_csv("icl_vs_demos.svg", &|p| write_svg(&plot, p))?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_spread() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
        assert!(mean_std(&[]).0.is_nan());
    }

    #[test]
    fn rollout_rows_count_once_per_run() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(RESULTS_FILE);
        use nopt_core::finetune::{append_results, EvalReport};
        append_results(&path, "rd", "random", &EvalReport::new(0.1, 0.3, vec![0.2, 0.4], 1.0, 1, 16)).unwrap();
        append_results(&path, "rd", "random", &EvalReport::new(0.1, 0.5, vec![0.3, 0.6], 1.0, 2, 16)).unwrap();
        let rows: Vec<ResultRow> = read_rows(&path).unwrap();
        assert_eq!(rows.len(), 4);
        let s = summarize_results(&rows);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].runs, 2);
        assert!((s[0].test_mean - 0.4).abs() < 1e-12);
        let files = report(dir.path()).unwrap();
        let names: Vec<String> = files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into()).collect();
        assert!(names.contains(&"rollout.svg".to_string()));
        let back: Vec<BudgetSummary> = read_rows(&dir.path().join("report/finetune_summary.csv")).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn icl_table_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<nopt_core::icl::IclRow> = [(0usize, 1u64, 0.5), (4, 1, 0.4), (4, 2, 0.2)]
            .iter()
            .map(|&(j, seed, rl2)| nopt_core::icl::IclRow {
                pde: "poisson".into(),
                j,
                source: "model_output".into(),
                seed,
                rl2,
                scale: 1.0,
                shape: 0.1,
            })
            .collect();
        nopt_core::icl::write_icl_csv(&rows, dir.path().join(ICL_FILE)).unwrap();
        let back: Vec<IclCsvRow> = read_rows(&dir.path().join(ICL_FILE)).unwrap();
        assert_eq!(back.len(), 3);
        let s = summarize_icl(&back);
        assert_eq!(s.len(), 2);
        assert!((s[1].rl2_mean - 0.3).abs() < 1e-12);
        assert!(report(dir.path()).unwrap().iter().any(|p| p.ends_with("icl_vs_demos.svg")));
        assert!(report(&dir.path().join("nothing")).is_err());
    }
}
