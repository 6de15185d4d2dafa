//! Cross-run tables: one row per run, and metric curves over query levels.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rctcast_core::metrics::{fmt4, markdown_cells, markdown_header, MetricReport, MARKDOWN_COLUMNS};

use crate::error::RunError;
use crate::manifest::Manifest;
use crate::pipeline::REPORT_JSON;

/// Lower is better for the first two columns (RMSE, MAE).
const LOWER_IS_BETTER: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub run_name: String,
    pub mode: Option<String>,
    pub levels: Vec<u8>,
    pub predictor_id: Option<String>,
    pub report: MetricReport,
}

pub fn load_run(dir: &Path) -> Result<RunSummary, RunError> {
    let report_path = dir.join(REPORT_JSON);
    let text = std::fs::read_to_string(&report_path).map_err(|e| RunError::io(&report_path, e))?;
    let report: MetricReport =
        serde_json::from_str(&text).map_err(|e| RunError::Data(format!("{}: {e}", report_path.display())))?;
    let manifest = Manifest::load(dir)?;
    let fallback = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let (run_name, mode, levels) = match &manifest {
        Some(m) => (
            m.run_name.clone(),
            m.config.get("mode").and_then(|v| v.as_str()).map(str::to_string),
            m.config
                .get("levels")
                .and_then(|v| v.as_array())
                .map(|a| a.iter().filter_map(|x| x.as_u64()).map(|x| x as u8).collect())
                .unwrap_or_default(),
        ),
        None => (fallback, None, Vec::new()),
    };
    let predictor_id = report.predictor_ids.first().cloned();
    Ok(RunSummary {
        run_dir: dir.to_path_buf(),
        run_name,
        mode,
        levels,
        predictor_id,
        report,
    })
}

fn round4(x: f64) -> f64 {
    let r = (x * 1e4).round() / 1e4;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

fn levels_label(levels: &[u8]) -> String {
    levels.iter().map(|l| format!("L{l}")).collect::<Vec<_>>().join("+")
}

/// Markdown table of several runs, sorted by run name. With two or more
/// rows the best value in each column is bold.
pub fn compare_markdown(runs: &[RunSummary]) -> String {
    let mut rows: Vec<&RunSummary> = runs.iter().collect();
    rows.sort_by(|a, b| a.run_name.cmp(&b.run_name));
    let cells: Vec<[Option<f64>; 8]> = rows.iter().map(|r| markdown_cells(&r.report)).collect();

    let mut best: [Option<f64>; 8] = [None; 8];
    if rows.len() >= 2 {
        for (col, slot) in best.iter_mut().enumerate() {
            let values = cells.iter().filter_map(|c| c[col]).map(round4);
            *slot = if col < LOWER_IS_BETTER {
                values.reduce(f64::min)
            } else {
                values.reduce(f64::max)
            };
        }
    }

    let modes: Vec<&Option<String>> = rows.iter().map(|r| &r.mode).collect();
    let levels: Vec<&Vec<u8>> = rows.iter().map(|r| &r.levels).collect();
    let mixed_modes = modes.windows(2).any(|w| w[0] != w[1]);
    let mixed_levels = levels.windows(2).any(|w| w[0] != w[1]);

    let mut s = markdown_header("Run");
    s = s.replacen(&format!("{} |\n", MARKDOWN_COLUMNS[7]), &format!("{} | Notes |\n", MARKDOWN_COLUMNS[7]), 1);
    s = s.replacen("---:|\n", "---:|---|\n", 1);
    for (r, c) in rows.iter().zip(&cells) {
        let formatted: Vec<String> = c
            .iter()
            .zip(best.iter())
            .map(|(v, b)| match (v, b) {
                (Some(x), Some(bx)) if round4(*x) == *bx => format!("**{}**", fmt4(Some(*x))),
                _ => fmt4(*v),
            })
            .collect();
        let mut notes = Vec::new();
        if mixed_modes {
            notes.push(format!("mode={}", r.mode.as_deref().unwrap_or("?")));
        }
        if mixed_levels {
            notes.push(format!("levels={}", levels_label(&r.levels)));
        }
        s.push_str(&format!("| {} | {} | {} |\n", r.run_name, formatted.join(" | "), notes.join(", ")));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub level: u8,
    pub run_name: String,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub predictor_id: String,
    /// Levels 0 to 3 in order; `None` where no run covers the level.
    pub points: Vec<Option<CurvePoint>>,
}

/// Groups single-level runs by predictor. Fails when no predictor has runs
/// at two or more levels.
pub fn build_curves(runs: &[RunSummary]) -> Result<Vec<Curve>, RunError> {
    let mut by_predictor: BTreeMap<String, BTreeMap<u8, &RunSummary>> = BTreeMap::new();
    let mut sorted: Vec<&RunSummary> = runs.iter().collect();
    sorted.sort_by(|a, b| a.run_name.cmp(&b.run_name));
    for r in sorted {
        let ([level], Some(pid)) = (r.levels.as_slice(), &r.predictor_id) else {
            continue;
        };
        let slot = by_predictor.entry(pid.clone()).or_default();
        if slot.contains_key(level) {
            return Err(RunError::Data(format!("predictor `{pid}` has more than one run at level {level}")));
        }
        slot.insert(*level, r);
    }
    if !by_predictor.values().any(|m| m.len() >= 2) {
        return Err(RunError::Data("no predictor has single-level runs at two or more levels".into()));
    }
    Ok(by_predictor
        .into_iter()
        .map(|(pid, m)| Curve {
            predictor_id: pid,
            points: (0u8..=3)
                .map(|l| {
                    m.get(&l).map(|r| CurvePoint {
                        level: l,
                        run_name: r.run_name.clone(),
                        metrics: r.report.clone(),
                    })
                })
                .collect(),
        })
        .collect())
}

pub fn curves_csv(curves: &[Curve]) -> String {
    let mut s = String::from("predictor,level,run,rmse,mae,r2,pearson,spearman,direction_acc,econ_acc,stat_sig_f1\n");
    for c in curves {
        for p in c.points.iter().flatten() {
            let cells: Vec<String> = markdown_cells(&p.metrics)
                .iter()
                .map(|v| v.map(|x| round4(x).to_string()).unwrap_or_default())
                .collect();
            s.push_str(&format!("{},{},{},{}\n", c.predictor_id, p.level, p.run_name, cells.join(",")));
        }
    }
    s
}
