//! Tables rendered from run results: CSV for machines, Markdown for people.

use std::fmt::Write as _;

use crate::annotations::{CategoryCounts, CategoryId};
use crate::orchestrator::{RoundState, StopReason, ThresholdStudyRow};
use crate::selection::{format_threshold, SweepTable};

const CATS: &str = "cat1,cat2,cat3,cat4";

fn counts_csv(c: &CategoryCounts) -> String {
    c.0.map(|n| n.to_string()).join(",")
}

fn percent(s: Option<f64>) -> String {
    s.map_or_else(|| "n/a".into(), |v| format!("{:.2}", v * 100.0))
}

fn md_header(out: &mut String, cols: &[&str]) {
    let _ = writeln!(out, "| {} |", cols.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(cols.len()));
}

/// Pseudo-label counts per model, one row per `(label, counts)`.
pub fn ugt_counts_csv(rows: &[(&str, CategoryCounts)]) -> String {
    let mut out = format!("model,{CATS}\n");
    for (label, c) in rows {
        let _ = writeln!(out, "{label},{}", counts_csv(c));
    }
    out
}

pub fn ugt_counts_markdown(rows: &[(&str, CategoryCounts)]) -> String {
    let mut out = String::new();
    md_header(&mut out, &["model", "cat1", "cat2", "cat3", "cat4", "total"]);
    for (label, c) in rows {
        let _ = writeln!(out, "| {label} | {} | {} |", c.0.map(|n| n.to_string()).join(" | "), c.total());
    }
    out
}

pub fn sweep_markdown(table: &SweepTable) -> String {
    let mut out = String::new();
    md_header(&mut out, &["P", "cat1", "cat2", "cat3", "cat4"]);
    for r in &table.rows {
        let _ = writeln!(
            out,
            "| {} | {} |",
            format_threshold(r.p),
            r.counts.0.map(|n| n.to_string()).join(" | ")
        );
    }
    out
}

/// Sensitivity in percent, one row per labelled result.
pub fn sensitivity_csv(rows: &[(String, [Option<f64>; 4])]) -> String {
    let mut out = format!("label,{CATS}\n");
    for (label, s) in rows {
        let _ = writeln!(out, "{label},{}", s.map(percent).join(","));
    }
    out
}

pub fn rounds_csv(rounds: &[RoundState]) -> String {
    let mut out = String::from(
        "round,P,L_X,x_cat1,x_cat2,x_cat3,x_cat4,dstar_cat1,dstar_cat2,dstar_cat3,dstar_cat4,sens_cat1,sens_cat2,sens_cat3,sens_cat4\n",
    );
    for r in rounds {
        let sens = r.eval_summary.as_ref().map(|t| t.sensitivities()).unwrap_or([None; 4]);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.round_index,
            format_threshold(r.p_used),
            r.l_x,
            counts_csv(&r.x_counts),
            counts_csv(&r.dstar_counts),
            sens.map(percent).join(",")
        );
    }
    out
}

pub fn rounds_markdown(rounds: &[RoundState], stop: Option<StopReason>) -> String {
    let mut out = String::from("# Pseudo-labeling rounds\n\n");
    md_header(
        &mut out,
        &["round", "P", "L(X)", "X per category", "D* per category", "sensitivity % (val)", "X precision"],
    );
    for r in rounds {
        let sens = r
            .eval_summary
            .as_ref()
            .map_or_else(|| "n/a".into(), |t| t.sensitivities().map(percent).join(" / "));
        let prec = r.x_precision.map_or_else(|| "n/a".into(), |p| format!("{:.3}", p));
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} |",
            r.round_index,
            format_threshold(r.p_used),
            r.l_x,
            r.x_counts.0.map(|n| n.to_string()).join(" / "),
            r.dstar_counts.0.map(|n| n.to_string()).join(" / "),
            sens,
            prec
        );
    }
    if let Some(stop) = stop {
        let why = match stop {
            StopReason::Converged => "a round accepted at most M labels",
            StopReason::RoundCap => "the round cap was reached",
        };
        let _ = writeln!(out, "\nStopped after round {}: {why}.", rounds.len());
    }
    if let Some(last) = rounds.last() {
        let _ = writeln!(out, "\n## Final pseudo labels\n");
        out.push_str(&ugt_counts_markdown(&[("final", last.dstar_pseudo_counts)]));
    }
    out
}

pub fn threshold_study_csv(rows: &[ThresholdStudyRow]) -> String {
    let mut out = format!("P,x_cat1,x_cat2,x_cat3,x_cat4,x_precision,{}\n", "sens_cat1,sens_cat2,sens_cat3,sens_cat4");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            format_threshold(r.p),
            counts_csv(&r.x_counts),
            r.x_precision.map_or_else(|| "n/a".into(), |p| format!("{p:.4}")),
            r.sensitivity.sensitivities().map(percent).join(",")
        );
    }
    out
}

/// Category mean of available sensitivities.
pub fn mean_sensitivity(s: &[Option<f64>; 4]) -> Option<f64> {
    let vals: Vec<f64> = CategoryId::ALL.iter().filter_map(|c| s[c.index()]).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selection::SweepRow;

    #[test]
    fn ugt_table_layout() {
        let csv = ugt_counts_csv(&[("F", CategoryCounts([1043, 632, 612, 417]))]);
        assert_eq!(csv, "model,cat1,cat2,cat3,cat4\nF,1043,632,612,417\n");
    }

    #[test]
    fn sensitivity_rows_in_percent() {
        let csv = sensitivity_csv(&[("r1".into(), [Some(0.5), Some(1.0), None, Some(0.12345)])]);
        assert_eq!(csv.lines().nth(1).unwrap(), "r1,50.00,100.00,n/a,12.35");
    }

    #[test]
    fn sweep_markdown_rows() {
        let t = SweepTable {
            rows: vec![SweepRow { p: 0.30000000000000004, counts: CategoryCounts([805, 431, 490, 303]) }],
        };
        assert!(sweep_markdown(&t).contains("| 0.3 | 805 | 431 | 490 | 303 |"));
    }

    #[test]
    fn mean_skips_missing() {
        assert_eq!(mean_sensitivity(&[Some(0.5), None, Some(1.0), None]), Some(0.75));
        assert_eq!(mean_sensitivity(&[None; 4]), None);
    }
}
