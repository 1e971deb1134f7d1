//! CSV and markdown writers for command outputs.

use std::fmt::Write as _;

use segbench_core::cost::{ComparisonTable, FLOPS_CONVENTION};
use segbench_core::evaluation::MetricReport;

/// Version tag embedded in every report.
pub fn version() -> &'static str {
    concat!(env!("CARGO_PKG_VERSION"), "+", env!("SEGBENCH_GIT_DESCRIBE"))
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(String::new, |v| format!("{v:.digits$}"))
}

/// A grid entry that could not be built or costed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedModel {
    pub model: String,
    pub reason: String,
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub const COMPARISON_HEADER: &str =
    "model,source,gflops,gmacs,params,ratio_to_smallest,resolution,flops_convention,version,note";

pub fn comparison_csv(table: &ComparisonTable, skipped: &[SkippedModel]) -> String {
    let res = format!("{}x{}", table.resolution.0, table.resolution.1);
    let mut out = String::from(COMPARISON_HEADER);
    out.push('\n');
    for r in &table.rows {
        let source = if r.external { "reference" } else { "computed" };
        let _ = writeln!(
            out,
            "{},{source},{},{},{},{},{res},{},{},",
            csv_escape(&r.model),
            opt(r.gflops, 4),
            opt(r.gmacs, 4),
            r.params.map_or_else(String::new, |p| p.to_string()),
            opt(r.ratio_to_smallest, 3),
            table.convention,
            version(),
        );
    }
    for s in skipped {
        let _ = writeln!(
            out,
            "{},failed,,,,,{res},{},{},{}",
            csv_escape(&s.model),
            table.convention,
            version(),
            csv_escape(&s.reason)
        );
    }
    out
}

pub fn comparison_markdown(table: &ComparisonTable, skipped: &[SkippedModel]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Cost comparison at {}x{}\n", table.resolution.0, table.resolution.1);
    let _ = writeln!(out, "FLOPs convention: `{}`. Version: `{}`.\n", table.convention, version());
    out.push_str("| Model | GFLOPs | GMACs | Params | x smallest | Source |\n");
    out.push_str("|---|---:|---:|---:|---:|---|\n");
    for r in &table.rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} |",
            r.model,
            opt(r.gflops, 2),
            opt(r.gmacs, 2),
            r.params.map_or_else(String::new, |p| p.to_string()),
            opt(r.ratio_to_smallest, 1),
            if r.external { "reference" } else { "computed" }
        );
    }
    if !skipped.is_empty() {
        out.push_str("\n## Skipped\n\n");
        for s in skipped {
            let _ = writeln!(out, "- {}: {}", s.model, s.reason);
        }
    }
    out
}

/// One model's summary across cost, accuracy and timing.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub model: String,
    pub resolution: (usize, usize),
    pub gflops: f64,
    pub params: u64,
    /// Absent for cost-only runs.
    pub metrics: Option<MetricReport>,
    pub ms_per_frame: Option<f64>,
}

impl ResultRow {
    pub fn fps(&self) -> Option<f64> {
        self.ms_per_frame.map(|ms| 1000.0 / ms)
    }

    pub fn csv_header() -> &'static str {
        "model,resolution,gflops,params,miou,category_miou,ms_per_frame,fps,flops_convention,version"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{}x{},{:.4},{},{},{},{},{},{},{}",
            csv_escape(&self.model),
            self.resolution.0,
            self.resolution.1,
            self.gflops,
            self.params,
            opt(self.metrics.as_ref().map(|m| m.miou), 6),
            opt(self.metrics.as_ref().map(|m| m.category_miou), 6),
            opt(self.ms_per_frame, 3),
            opt(self.fps(), 3),
            FLOPS_CONVENTION,
            version()
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::csv_header(), self.csv_row())
    }
}
