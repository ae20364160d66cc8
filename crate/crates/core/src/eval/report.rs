use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::runner::{ExperimentConfig, Method, RerankMode};
use super::{EvalError, MetricSummary, QueryResult, TransitionMatrix};
use crate::llm::ExtractedAspects;

/// Recorded in every formatted report.
pub const MARGIN_NOTE: &str =
    "Margins are 95% normal-approximation intervals: 1.96 * sample stddev / sqrt(n).";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStage {
    Stage1,
    Stage2,
}

/// Results of one (method, K_R) combination.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub method: Method,
    pub k_r: usize,
    /// Set when any query of the cell failed; metrics are then empty.
    pub failure: Option<String>,
    pub stage1: Vec<MetricSummary>,
    pub stage2: Vec<MetricSummary>,
    pub transitions: Option<TransitionMatrix>,
    pub warnings: Vec<String>,
    pub endpoint_exhausted: bool,
    #[serde(skip)]
    pub results: Vec<QueryResult>,
}

impl Cell {
    pub(super) fn empty(method: Method, k_r: usize) -> Self {
        Self {
            method,
            k_r,
            failure: None,
            stage1: Vec::new(),
            stage2: Vec::new(),
            transitions: None,
            warnings: Vec::new(),
            endpoint_exhausted: false,
            results: Vec::new(),
        }
    }

    /// Looks up a summary by name prefix, e.g. `MAP` or `Re`.
    pub fn metric(&self, stage: CellStage, prefix: &str) -> Option<&MetricSummary> {
        let list = match stage {
            CellStage::Stage1 => &self.stage1,
            CellStage::Stage2 => &self.stage2,
        };
        list.iter().find(|m| {
            m.name == prefix
                || m.name
                    .strip_prefix(prefix)
                    .is_some_and(|rest| rest.starts_with('@'))
        })
    }

    pub fn map(&self) -> Option<f64> {
        self.metric(CellStage::Stage1, "MAP").map(|m| m.mean)
    }

    pub fn recall(&self) -> Option<f64> {
        self.metric(CellStage::Stage1, "Re").map(|m| m.mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub n_queries: usize,
    pub cells: Vec<Cell>,
    pub extractions: BTreeMap<String, ExtractedAspects>,
}

fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}

/// A compact `.56 (.04)` rendering of mean and margin.
fn short(m: &MetricSummary) -> String {
    let trim = |x: f64| {
        let s = format!("{x:.2}");
        match s.strip_prefix('0') {
            Some(rest) => rest.to_string(),
            None => s,
        }
    };
    format!("{} ({})", trim(m.mean), trim(m.margin95))
}

impl ExperimentReport {
    pub fn cell(&self, method: Method, k_r: usize) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.k_r == k_r)
    }

    pub fn any_failed(&self) -> bool {
        self.cells.iter().any(|c| c.failure.is_some())
    }

    pub fn endpoint_exhausted(&self) -> bool {
        self.cells.iter().any(|c| c.endpoint_exhausted)
    }

    fn stages(&self) -> Vec<(CellStage, String)> {
        let mut out = vec![(CellStage::Stage1, String::new())];
        if self.config.rerank != RerankMode::None {
            out.push((
                CellStage::Stage2,
                format!("+{}", self.config.rerank.as_str()),
            ));
        }
        out
    }

    /// Long-format CSV: one row per cell, stage and metric.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "dataset",
            "method",
            "aggregator",
            "K_R",
            "K_I",
            "metric",
            "mean",
            "margin",
            "n",
        ])?;
        let k = self.config.metric_k();
        let k_i = self.config.k_i.to_string();
        for cell in &self.cells {
            let agg = cell.method.aggregator().map_or("none", |a| a.as_str());
            let k_r = cell.k_r.to_string();
            for (stage, suffix) in self.stages() {
                let method = format!("{}{suffix}", cell.method.family());
                let metrics = match stage {
                    CellStage::Stage1 => &cell.stage1,
                    CellStage::Stage2 => &cell.stage2,
                };
                if cell.failure.is_some() {
                    for name in [format!("MAP@{k}"), format!("Re@{k}")] {
                        w.write_record([
                            &self.config.dataset,
                            &method,
                            agg,
                            &k_r,
                            &k_i,
                            &name,
                            "NA",
                            "NA",
                            "0",
                        ])?;
                    }
                    continue;
                }
                for m in metrics {
                    w.write_record([
                        self.config.dataset.as_str(),
                        &method,
                        agg,
                        &k_r,
                        &k_i,
                        &m.name,
                        &fmt6(m.mean),
                        &fmt6(m.margin95),
                        &m.n.to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String, EvalError> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    /// Nonzero transition counts of every reranked cell.
    pub fn write_transitions<W: Write>(&self, out: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "dataset",
            "method",
            "aggregator",
            "K_R",
            "stage1_rank",
            "stage2_rank",
            "count",
        ])?;
        for cell in &self.cells {
            let Some(t) = &cell.transitions else { continue };
            let method = format!("{}+{}", cell.method.family(), self.config.rerank.as_str());
            let agg = cell.method.aggregator().map_or("none", |a| a.as_str());
            for (i, row) in t.counts.iter().enumerate() {
                for (j, &count) in row.iter().enumerate() {
                    if count > 0 {
                        w.write_record([
                            self.config.dataset.as_str(),
                            &method,
                            agg,
                            &cell.k_r.to_string(),
                            &(i + 1).to_string(),
                            &(j + 1).to_string(),
                            &count.to_string(),
                        ])?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// A table with one row per method and a MAP/Re column pair per K_R.
    pub fn to_markdown(&self) -> String {
        let k = self.config.metric_k();
        let k_rs: Vec<usize> = {
            let mut seen = Vec::new();
            for c in &self.cells {
                if !seen.contains(&c.k_r) {
                    seen.push(c.k_r);
                }
            }
            seen
        };
        let mut methods: Vec<Method> = Vec::new();
        for c in &self.cells {
            if !methods.contains(&c.method) {
                methods.push(c.method);
            }
        }
        let mut md = String::new();
        let _ = writeln!(
            md,
            "# {} (K_I = {}, {} queries, aspects: {:?})\n",
            self.config.dataset, self.config.k_i, self.n_queries, self.config.aspect_source
        );
        for (stage, suffix) in self.stages() {
            let title = match stage {
                CellStage::Stage1 => "Stage 1".to_string(),
                CellStage::Stage2 => format!("Stage 2 ({})", &suffix[1..]),
            };
            let _ = writeln!(md, "## {title}\n");
            md.push_str("| Method |");
            for k_r in &k_rs {
                let _ = write!(md, " K_R={k_r} MAP@{k} | K_R={k_r} Re@{k} |");
            }
            md.push_str("\n|---|");
            md.push_str(&"---|".repeat(2 * k_rs.len()));
            md.push('\n');
            for &m in &methods {
                let _ = write!(md, "| {} |", m.label());
                for &k_r in &k_rs {
                    let cell = self.cell(m, k_r);
                    for prefix in ["MAP", "Re"] {
                        let v = cell
                            .filter(|c| c.failure.is_none())
                            .and_then(|c| c.metric(stage, prefix))
                            .map_or_else(|| "NA".to_string(), short);
                        let _ = write!(md, " {v} |");
                    }
                }
                md.push('\n');
            }
            md.push('\n');
        }
        let reranked: Vec<&Cell> = self
            .cells
            .iter()
            .filter(|c| c.transitions.is_some())
            .collect();
        if !reranked.is_empty() {
            md.push_str("## Rank transitions\n\n| Method | K_R | counted | center of mass | improved |\n|---|---|---|---|---|\n");
            for c in reranked {
                let t = c.transitions.as_ref().expect("filtered above");
                let com = t
                    .center_of_mass
                    .map_or("NA".to_string(), |(a, b)| format!("({a:.2}, {b:.2})"));
                let imp = t
                    .improvement_fraction
                    .map_or("NA".to_string(), |f| format!("{f:.3}"));
                let _ = writeln!(
                    md,
                    "| {} | {} | {} | {com} | {imp} |",
                    c.method.label(),
                    c.k_r,
                    t.total
                );
            }
            md.push('\n');
        }
        let failed: Vec<&Cell> = self.cells.iter().filter(|c| c.failure.is_some()).collect();
        if !failed.is_empty() {
            md.push_str("## Failed cells\n\n");
            for c in failed {
                let _ = writeln!(
                    md,
                    "- {} K_R={}: {}",
                    c.method.label(),
                    c.k_r,
                    c.failure.as_deref().unwrap_or("")
                );
            }
            md.push('\n');
        }
        md.push_str(MARGIN_NOTE);
        md.push('\n');
        md
    }

    /// Writes `report.csv`, `report.md` and, when reranking ran,
    /// `transitions.csv` into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<(), EvalError> {
        fs::create_dir_all(dir)?;
        self.write_csv(fs::File::create(dir.join("report.csv"))?)?;
        fs::write(dir.join("report.md"), self.to_markdown())?;
        if self.config.rerank != RerankMode::None {
            self.write_transitions(fs::File::create(dir.join("transitions.csv"))?)?;
        }
        Ok(())
    }
}
