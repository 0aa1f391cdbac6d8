//! Metrics emission from persisted run artifacts: token savings versus the
//! from-scratch counterfactual, compression ratios, and the ledger-derived
//! speedup figures. Every number is recomputed from disk, so the tables are
//! reproducible from a run directory alone.

use super::pipeline::{task_dir, LEDGER_FILE, REPORTS_FILE, RUN_RECORD_FILE, TRAJECTORIES_FILE};
use super::{HarnessError, RunRecord};
use crate::aggregate::reports_from_jsonl;
use crate::engine::{para_factor_bound, reuse_factor, total_speedup_estimate, CostLedger};
use crate::model::{from_jsonl, Origin, RegionTag, Trajectory};
use crate::uncertainty::{region_ppl_series, top_uncertainty_steps};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One trajectory's generated cost under partial rollout versus the
/// from-scratch counterfactual (prefix + suffix).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavingsRow {
    pub task_id: String,
    pub trajectory_id: String,
    pub origin: String,
    pub prefix_tokens: usize,
    pub actual_generated: usize,
    pub counterfactual_generated: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavingsSummary {
    pub actual_total: usize,
    pub counterfactual_total: usize,
    /// actual / counterfactual; 1.0 when nothing was reused.
    pub ratio: f64,
    /// 1 - ratio: the generated-token reduction.
    pub reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionRow {
    pub task_id: String,
    pub trajectory_id: String,
    pub context_tokens: usize,
    pub report_tokens: usize,
    pub ratio: f64,
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub reuse_factor: f64,
    /// Amdahl-type bound at full parallelizability (alpha = 1).
    pub para_factor_bound: f64,
    pub total_speedup_estimate: f64,
    /// The unsimplified product, for comparison with the estimate.
    pub reuse_times_para: f64,
    pub parallelism_p: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTables {
    pub savings: Vec<SavingsRow>,
    pub savings_summary: SavingsSummary,
    pub compression: Vec<CompressionRow>,
    pub speedup: Option<SpeedupReport>,
}

fn load_record(run_dir: &Path) -> Result<RunRecord, HarnessError> {
    let path = run_dir.join(RUN_RECORD_FILE);
    if !path.exists() {
        return Err(HarnessError::IncompleteRun(format!("{} missing", path.display())));
    }
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Reads a complete run directory and derives the metrics tables. CSV
/// renderings are written under `<run_dir>/metrics/` (derived outputs,
/// rewritten freely).
pub fn emit_metrics(run_dir: &Path) -> Result<MetricsTables, HarnessError> {
    let record = load_record(run_dir)?;
    let mut savings = Vec::new();
    let mut compression = Vec::new();
    let mut merged = CostLedger::new(crate::backends::CostModel::default());
    let mut cost_set = false;

    for artifact in record.tasks.iter().filter(|a| a.error.is_none()) {
        let dir = task_dir(run_dir, &artifact.task_id);
        let missing = [TRAJECTORIES_FILE, LEDGER_FILE, REPORTS_FILE]
            .iter()
            .find(|f| !dir.join(f).exists());
        if let Some(f) = missing {
            return Err(HarnessError::IncompleteRun(format!(
                "task {:?} lacks {f}",
                artifact.task_id
            )));
        }
        let trajectories = from_jsonl(&std::fs::read_to_string(dir.join(TRAJECTORIES_FILE))?)?;
        let ledger: CostLedger = serde_json::from_str(&std::fs::read_to_string(dir.join(LEDGER_FILE))?)?;
        let reports = reports_from_jsonl(&std::fs::read_to_string(dir.join(REPORTS_FILE))?)?;

        if !cost_set {
            merged.hot_cost_per_token = ledger.hot_cost_per_token;
            merged.cold_cost_per_token = ledger.cold_cost_per_token;
            cost_set = true;
        }
        merged.branches.extend(ledger.branches.iter().cloned());
        merged.prompt_tokens_total += ledger.prompt_tokens_total;

        for row in &ledger.branches {
            let traj = trajectories.iter().find(|t| t.id == row.branch_id);
            let origin = match traj.map(|t| &t.origin) {
                Some(Origin::FromScratch) | None => "from_scratch",
                Some(Origin::Branch { .. }) => "branch",
            };
            let counterfactual = row.prefix_tokens + row.suffix_tokens;
            savings.push(SavingsRow {
                task_id: artifact.task_id.clone(),
                trajectory_id: row.branch_id.clone(),
                origin: origin.into(),
                prefix_tokens: row.prefix_tokens,
                actual_generated: row.suffix_tokens,
                counterfactual_generated: counterfactual,
                ratio: if counterfactual > 0 {
                    row.suffix_tokens as f64 / counterfactual as f64
                } else {
                    1.0
                },
            });
        }

        for report in &reports {
            let Some(traj) = trajectories.iter().find(|t| t.id == report.trajectory_id) else {
                continue;
            };
            let context = traj.context_token_count();
            compression.push(CompressionRow {
                task_id: artifact.task_id.clone(),
                trajectory_id: report.trajectory_id.clone(),
                context_tokens: context,
                report_tokens: report.compressed_token_count,
                ratio: if context > 0 {
                    report.compressed_token_count as f64 / context as f64
                } else {
                    1.0
                },
                degraded: report.degraded,
            });
        }
    }

    let actual_total: usize = savings.iter().map(|r| r.actual_generated).sum();
    let counterfactual_total: usize = savings.iter().map(|r| r.counterfactual_generated).sum();
    let ratio = if counterfactual_total > 0 {
        actual_total as f64 / counterfactual_total as f64
    } else {
        1.0
    };
    let savings_summary = SavingsSummary {
        actual_total,
        counterfactual_total,
        ratio,
        reduction: 1.0 - ratio,
    };

    let p = record.config.run.parallelism_p;
    let speedup = match (reuse_factor(&merged), total_speedup_estimate(&merged, p)) {
        (Ok(reuse), Ok(estimate)) => {
            let para = para_factor_bound(1.0, p);
            Some(SpeedupReport {
                reuse_factor: reuse,
                para_factor_bound: para,
                total_speedup_estimate: estimate,
                reuse_times_para: reuse * para,
                parallelism_p: p,
            })
        }
        _ => None,
    };

    let tables = MetricsTables { savings, savings_summary, compression, speedup };
    write_csvs(run_dir, &tables)?;
    Ok(tables)
}

fn write_csvs(run_dir: &Path, tables: &MetricsTables) -> Result<(), HarnessError> {
    let dir = run_dir.join("metrics");
    std::fs::create_dir_all(&dir)?;
    let to_io = |e: csv::Error| HarnessError::Config(format!("csv: {e}"));

    let mut w = csv::Writer::from_path(dir.join("savings.csv")).map_err(to_io)?;
    for row in &tables.savings {
        w.serialize(row).map_err(to_io)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("compression.csv")).map_err(to_io)?;
    for row in &tables.compression {
        w.serialize(row).map_err(to_io)?;
    }
    w.flush()?;

    if let Some(speedup) = &tables.speedup {
        let mut w = csv::Writer::from_path(dir.join("speedup.csv")).map_err(to_io)?;
        w.serialize(speedup).map_err(to_io)?;
        w.flush()?;
    }
    Ok(())
}

/// Aligned-text rendering of the tables for terminal output.
pub fn render_tables(tables: &MetricsTables) -> String {
    let mut out = String::new();
    out.push_str("token savings vs from-scratch counterfactual\n");
    out.push_str(&format!(
        "{:<14} {:<28} {:<13} {:>8} {:>8} {:>8} {:>7}\n",
        "task", "trajectory", "origin", "prefix", "actual", "cfact", "ratio"
    ));
    for r in &tables.savings {
        out.push_str(&format!(
            "{:<14} {:<28} {:<13} {:>8} {:>8} {:>8} {:>7.3}\n",
            r.task_id, r.trajectory_id, r.origin, r.prefix_tokens, r.actual_generated,
            r.counterfactual_generated, r.ratio
        ));
    }
    out.push_str(&format!(
        "total: {} / {} = {:.4} (reduction {:.1}%)\n\n",
        tables.savings_summary.actual_total,
        tables.savings_summary.counterfactual_total,
        tables.savings_summary.ratio,
        tables.savings_summary.reduction * 100.0
    ));

    out.push_str("context compression\n");
    out.push_str(&format!(
        "{:<14} {:<28} {:>9} {:>8} {:>7} {:>9}\n",
        "task", "trajectory", "context", "report", "ratio", "degraded"
    ));
    for r in &tables.compression {
        out.push_str(&format!(
            "{:<14} {:<28} {:>9} {:>8} {:>7.4} {:>9}\n",
            r.task_id, r.trajectory_id, r.context_tokens, r.report_tokens, r.ratio, r.degraded
        ));
    }
    if let Some(s) = &tables.speedup {
        out.push_str(&format!(
            "\nreuse_factor {:.4}; para_factor_bound(alpha=1, P={}) {:.4}; \
             total_speedup_estimate {:.4}; reuse x para {:.4}\n",
            s.reuse_factor, s.parallelism_p, s.para_factor_bound, s.total_speedup_estimate,
            s.reuse_times_para
        ));
    }
    out
}

/// Step-PPL series as CSV (`trajectory_id, step_index, region, ppl`), with
/// an empty ppl field for undefined entries.
pub fn ppl_csv(trajectories: &[Trajectory], regions: &[RegionTag]) -> String {
    let mut out = String::from("trajectory_id,step_index,region,ppl\n");
    for traj in trajectories {
        for region in regions {
            for entry in region_ppl_series(traj, *region) {
                let ppl = entry.ppl.map(|v| format!("{v}")).unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    entry.trajectory_id, entry.step_index, entry.region, ppl
                ));
            }
        }
    }
    out
}

/// Per-trajectory top-n uncertainty steps as CSV, for external distribution
/// plots.
pub fn top_uncertainty_csv(trajectories: &[Trajectory], region: RegionTag, n: usize) -> String {
    let mut out = String::from("trajectory_id,step_index,region,ppl\n");
    for traj in trajectories {
        let series = region_ppl_series(traj, region);
        for index in top_uncertainty_steps(traj, region, n) {
            let entry = &series[index];
            out.push_str(&format!(
                "{},{},{},{}\n",
                traj.id,
                index,
                region,
                entry.ppl.expect("top steps have defined ppl")
            ));
        }
    }
    out
}
