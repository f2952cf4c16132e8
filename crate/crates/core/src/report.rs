//! Per-layer rollups of attribution ledgers, statistics across runs, and
//! CSV/JSON export.
//!
//! Sums stay signed everywhere in this module; rendering a magnitude is the
//! figure module's concern. Blocks keep the model's own order (network
//! structure, input side first), so every table and chart reads left to
//! right the way the data flows.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attribution::{AttributionReport, RunReport};
use crate::data::ScenarioKind;
use crate::error::{Error, Result};
use crate::model::ParamKind;

/// Per-block rollup of one run's ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAggregate {
    pub block: String,
    pub kind: ParamKind,
    pub n_elements: usize,
    /// Signed sum of the block's per-parameter contributions.
    pub sum: f64,
    /// Magnitude of the signed sum.
    pub abs_sum: f64,
    /// `sum / n_elements`.
    pub mean_per_element: f64,
}

/// Roll one report up to per-block aggregates, in block order.
pub fn aggregate(report: &AttributionReport) -> Vec<LayerAggregate> {
    report
        .blocks
        .iter()
        .map(|b| LayerAggregate {
            block: b.name.clone(),
            kind: b.kind,
            n_elements: b.n_elements,
            sum: b.sum,
            abs_sum: b.sum.abs(),
            mean_per_element: b.sum / b.n_elements as f64,
        })
        .collect()
}

/// Cross-run distribution of one block's aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockStats {
    pub block: String,
    pub kind: ParamKind,
    pub n_elements: usize,
    /// Mean and sample std (n−1) of the signed block sum across runs.
    pub sum_mean: f64,
    pub sum_std: f64,
    /// Mean and sample std of the per-element mean across runs.
    pub per_element_mean: f64,
    pub per_element_std: f64,
}

/// Statistics over a family of runs that differ only in seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiRunStats {
    pub scenario: ScenarioKind,
    pub run_count: usize,
    /// Mean over runs of the measured reference-loss change.
    #[serde(rename = "exact_dL_mean")]
    pub exact_dl_mean: f64,
    /// Mean over runs of the quadrature reconciliation error.
    pub approx_err_mean: f64,
    pub blocks: Vec<BlockStats>,
}

/// Two-pass mean and sample standard deviation. One value has spread zero.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Statistics across ≥2 runs. Use [`run_stats`] if a single run must also be
/// representable (its spreads are zero).
pub fn multi_run(runs: &[RunReport]) -> Result<MultiRunStats> {
    if runs.len() < 2 {
        return Err(Error::InvalidArgument {
            op: "multi_run",
            reason: format!("needs at least 2 runs, got {}", runs.len()),
        });
    }
    run_stats(runs)
}

/// Statistics across ≥1 runs sharing scenario and block inventory.
pub fn run_stats(runs: &[RunReport]) -> Result<MultiRunStats> {
    let first = runs.first().ok_or_else(|| Error::InvalidArgument {
        op: "run_stats",
        reason: "needs at least 1 run".into(),
    })?;
    for (i, run) in runs.iter().enumerate().skip(1) {
        if run.scenario != first.scenario {
            return Err(Error::InvalidArgument {
                op: "run_stats",
                reason: format!("run {i} has a different scenario than run 0"),
            });
        }
        let a = &run.attribution.blocks;
        let b = &first.attribution.blocks;
        let mismatch = a.len() != b.len()
            || a.iter().zip(b).any(|(x, y)| {
                x.name != y.name || x.kind != y.kind || x.n_elements != y.n_elements
            });
        if mismatch {
            return Err(Error::InvalidArgument {
                op: "run_stats",
                reason: format!("run {i} has a different block inventory than run 0"),
            });
        }
    }

    let blocks = first
        .attribution
        .blocks
        .iter()
        .enumerate()
        .map(|(b, block)| {
            let sums: Vec<f64> = runs.iter().map(|r| r.attribution.blocks[b].sum).collect();
            let per_elem: Vec<f64> = sums
                .iter()
                .map(|s| s / block.n_elements as f64)
                .collect();
            let (sum_mean, sum_std) = mean_std(&sums);
            let (per_element_mean, per_element_std) = mean_std(&per_elem);
            BlockStats {
                block: block.name.clone(),
                kind: block.kind,
                n_elements: block.n_elements,
                sum_mean,
                sum_std,
                per_element_mean,
                per_element_std,
            }
        })
        .collect();

    let exact: Vec<f64> = runs.iter().map(|r| r.attribution.exact_delta).collect();
    let errs: Vec<f64> = runs.iter().map(|r| r.attribution.relative_error).collect();
    Ok(MultiRunStats {
        scenario: first.scenario.kind,
        run_count: runs.len(),
        exact_dl_mean: mean_std(&exact).0,
        approx_err_mean: mean_std(&errs).0,
        blocks,
    })
}

pub const CSV_HEADER: &str = "scenario,run_count,block,kind,n_elements,sum_mean,sum_std,\
per_element_mean,per_element_std,exact_dL_mean,approx_err_mean";

/// Render the stats as CSV, one row per block. Floats use Rust's shortest
/// round-trip formatting, so parsing a cell back yields the exact f64.
pub fn to_csv(stats: &MultiRunStats) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for b in &stats.blocks {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            stats.scenario,
            stats.run_count,
            b.block,
            b.kind,
            b.n_elements,
            b.sum_mean,
            b.sum_std,
            b.per_element_mean,
            b.per_element_std,
            stats.exact_dl_mean,
            stats.approx_err_mean,
        ));
    }
    out
}

pub fn export_csv(stats: &MultiRunStats, path: &Path) -> Result<()> {
    fs::write(path, to_csv(stats)).map_err(|e| Error::io(path, e))
}

/// Render the stats as pretty JSON mirroring the CSV schema, full precision.
pub fn to_json(stats: &MultiRunStats) -> Result<String> {
    let mut s = serde_json::to_string_pretty(stats)?;
    s.push('\n');
    Ok(s)
}

pub fn export_json(stats: &MultiRunStats, path: &Path) -> Result<()> {
    fs::write(path, to_json(stats)?).map_err(|e| Error::io(path, e))
}

/// Which aggregate a figure renders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FigureMode {
    /// Block signed sums (rendered as magnitudes).
    Sum,
    /// Per-element means (rendered as magnitudes).
    Mean,
}

impl fmt::Display for FigureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FigureMode::Sum => "sum",
            FigureMode::Mean => "mean",
        })
    }
}

impl FromStr for FigureMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sum" => Ok(FigureMode::Sum),
            "mean" => Ok(FigureMode::Mean),
            other => Err(format!("unknown figure mode {other:?}; expected sum or mean")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::{BlockAttribution, PathIntegralConfig};
    use crate::data::ScenarioSpec;

    fn report_with(blocks: Vec<BlockAttribution>) -> AttributionReport {
        let approx_delta = blocks.iter().map(|b| b.sum).sum();
        AttributionReport {
            config: PathIntegralConfig::default(),
            head: 0,
            eval_set_size: 8,
            eval_fingerprint: 0,
            steps_recorded: 1,
            loss_start: 1.0,
            loss_end: 1.0 + approx_delta,
            exact_delta: approx_delta,
            approx_delta,
            relative_error: 0.0,
            blocks,
        }
    }

    fn block(name: &str, kind: ParamKind, values: Vec<f64>) -> BlockAttribution {
        BlockAttribution {
            name: name.into(),
            kind,
            head: None,
            n_elements: values.len(),
            sum: values.iter().sum(),
            values,
        }
    }

    fn run_with(sums: &[(&str, ParamKind, Vec<f64>)], scenario: ScenarioKind) -> RunReport {
        let blocks = sums
            .iter()
            .map(|(n, k, v)| block(n, *k, v.clone()))
            .collect();
        RunReport {
            scenario: ScenarioSpec::new(scenario, 0),
            seed: 0,
            train: crate::attribution::TrainConfig::default(),
            task_names: vec!["a".into(), "b".into()],
            attribution: report_with(blocks),
        }
    }

    #[test]
    fn aggregate_rolls_blocks_up() {
        let report = report_with(vec![
            block("conv1.weight", ParamKind::Weight, vec![1.0, -2.0]),
            block("conv1.bias", ParamKind::Bias, vec![0.5]),
        ]);
        let aggs = aggregate(&report);
        assert_eq!(aggs.len(), 2);
        assert_eq!(aggs[0].sum, -1.0);
        assert_eq!(aggs[0].abs_sum, 1.0);
        assert_eq!(aggs[0].mean_per_element, -0.5);
        assert_eq!(aggs[1].sum, 0.5);
        assert_eq!(aggs[1].mean_per_element, 0.5);
        // mean · count reproduces the sum.
        for a in &aggs {
            let back = a.mean_per_element * a.n_elements as f64;
            assert!((back - a.sum).abs() <= 1e-12 * a.sum.abs().max(1.0));
        }
    }

    #[test]
    fn aggregate_of_zero_ledger_is_zero() {
        let report = report_with(vec![block("b", ParamKind::Bias, vec![0.0, 0.0, 0.0])]);
        let aggs = aggregate(&report);
        assert_eq!(aggs[0].sum, 0.0);
        assert_eq!(aggs[0].abs_sum, 0.0);
        assert_eq!(aggs[0].mean_per_element, 0.0);
    }

    #[test]
    fn aggregate_sums_conserve_the_total() {
        let report = report_with(vec![
            block("w1", ParamKind::Weight, vec![0.1, 0.2, -0.05]),
            block("b1", ParamKind::Bias, vec![-0.02]),
            block("w2", ParamKind::Weight, vec![0.7, -0.9]),
        ]);
        let total: f64 = aggregate(&report).iter().map(|a| a.sum).sum();
        assert!((total - report.approx_delta).abs() <= 1e-12 * report.approx_delta.abs().max(1.0));
    }

    #[test]
    fn two_point_stats_match_the_closed_form() {
        let runs = [
            run_with(&[("w", ParamKind::Weight, vec![1.0])], ScenarioKind::Icl),
            run_with(&[("w", ParamKind::Weight, vec![3.0])], ScenarioKind::Icl),
        ];
        let stats = multi_run(&runs).unwrap();
        assert_eq!(stats.run_count, 2);
        let b = &stats.blocks[0];
        assert_eq!(b.sum_mean, 2.0);
        assert!((b.sum_std - 2f64.sqrt()).abs() <= 1e-12);
        assert_eq!(b.per_element_mean, 2.0);
        assert!((b.per_element_std - 2f64.sqrt()).abs() <= 1e-12);
    }

    #[test]
    fn identical_runs_have_zero_spread() {
        let run = run_with(
            &[("w", ParamKind::Weight, vec![0.25, -0.75])],
            ScenarioKind::Itl,
        );
        let stats = multi_run(&[run.clone(), run.clone(), run]).unwrap();
        assert_eq!(stats.blocks[0].sum_std, 0.0);
        assert_eq!(stats.blocks[0].per_element_std, 0.0);
    }

    #[test]
    fn stats_match_an_independent_two_pass_reference() {
        let sums = [0.93, -1.4, 0.27, 2.1, -0.08];
        let runs: Vec<RunReport> = sums
            .iter()
            .map(|&s| {
                run_with(
                    &[("w", ParamKind::Weight, vec![s / 2.0, s / 2.0])],
                    ScenarioKind::IdlInvert,
                )
            })
            .collect();
        let stats = multi_run(&runs).unwrap();
        let n = sums.len() as f64;
        let mean: f64 = sums.iter().sum::<f64>() / n;
        let var: f64 = sums.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
        assert!((stats.blocks[0].sum_mean - mean).abs() <= 1e-12);
        assert!((stats.blocks[0].sum_std - var.sqrt()).abs() <= 1e-12);
    }

    #[test]
    fn mismatched_inventories_are_rejected() {
        let a = run_with(&[("w", ParamKind::Weight, vec![1.0])], ScenarioKind::Icl);
        let b = run_with(&[("v", ParamKind::Weight, vec![1.0])], ScenarioKind::Icl);
        assert!(matches!(
            multi_run(&[a.clone(), b]).unwrap_err(),
            Error::InvalidArgument { .. }
        ));
        let c = run_with(&[("w", ParamKind::Weight, vec![1.0])], ScenarioKind::Itl);
        assert!(multi_run(&[a, c]).is_err());
    }

    #[test]
    fn single_run_stats_are_supported_with_zero_spread() {
        let run = run_with(&[("w", ParamKind::Weight, vec![4.0])], ScenarioKind::Icl);
        assert!(multi_run(&[run.clone()]).is_err());
        let stats = run_stats(&[run]).unwrap();
        assert_eq!(stats.run_count, 1);
        assert_eq!(stats.blocks[0].sum_mean, 4.0);
        assert_eq!(stats.blocks[0].sum_std, 0.0);
    }

    #[test]
    fn csv_round_trips_through_full_precision() {
        let run = run_with(
            &[
                ("conv1.weight", ParamKind::Weight, vec![0.1, 0.2, 0.3]),
                ("conv1.bias", ParamKind::Bias, vec![-1e-17]),
            ],
            ScenarioKind::IdlPermute,
        );
        let stats = run_stats(&[run]).unwrap();
        let csv = to_csv(&stats);
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines.len(), 3); // header + 2 blocks
        let expected_columns = [
            "scenario", "run_count", "block", "kind", "n_elements", "sum_mean", "sum_std",
            "per_element_mean", "per_element_std", "exact_dL_mean", "approx_err_mean",
        ];
        assert_eq!(lines[0], expected_columns.join(","));
        let row: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(row.len(), 11);
        assert_eq!(row[0], "idl-permute");
        assert_eq!(row[1], "1");
        assert_eq!(row[2], "conv1.weight");
        assert_eq!(row[3], "weight");
        assert_eq!(row[4], "3");
        // Shortest round-trip formatting: parsing returns the exact bits.
        assert_eq!(row[5].parse::<f64>().unwrap(), stats.blocks[0].sum_mean);
        let bias_row: Vec<&str> = lines[2].split(',').collect();
        assert_eq!(bias_row[5].parse::<f64>().unwrap(), -1e-17);
    }

    #[test]
    fn json_round_trips_exactly() {
        let run = run_with(
            &[("dense1.weight", ParamKind::Weight, vec![0.1 + 0.2])],
            ScenarioKind::Icl,
        );
        let stats = run_stats(&[run]).unwrap();
        let json = to_json(&stats).unwrap();
        assert!(json.ends_with('\n'));
        assert!(json.contains("\"exact_dL_mean\""));
        let back: MultiRunStats = serde_json::from_str(&json).unwrap();
        assert_eq!(back, stats);
    }

    #[test]
    fn figure_mode_parses_and_prints() {
        assert_eq!("sum".parse::<FigureMode>().unwrap(), FigureMode::Sum);
        assert_eq!("mean".parse::<FigureMode>().unwrap(), FigureMode::Mean);
        assert_eq!(FigureMode::Mean.to_string(), "mean");
        assert!("median".parse::<FigureMode>().is_err());
    }
}
