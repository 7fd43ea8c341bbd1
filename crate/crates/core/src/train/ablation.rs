//! Ablation matrices: several training cells over one shared dataset,
//! compared sample by sample.
//!
//! A matrix file holds base keys followed by one `[cell]` section per run:
//!
//! ```text
//! steps = 200
//! seed = 3
//!
//! [mtrans]
//! variant = mtrans
//!
//! [early]
//! variant = early_fusion
//! ```
//!
//! Cells must agree on every key in [`DATA_KEYS`], so sample `i` is the same
//! image in every cell and per-sample metric differences are meaningful.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::kv::{read_kv, KvDocument};
use crate::io::write_atomic;
use crate::metrics::{paired_t_test, MetricSummary, TTest};
use crate::train::config::{TrainConfig, DATA_KEYS};
use crate::train::{run_training, TrainReport};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub name: String,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationMatrix {
    pub cells: Vec<AblationCell>,
}

impl AblationMatrix {
    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_document(&read_kv(path)?, path)
    }

    pub fn from_document(doc: &KvDocument, origin: &Path) -> Result<Self> {
        if doc.sections.is_empty() {
            return Err(Error::format(origin, "ablation matrix has no [cell] sections"));
        }
        let mut cells = Vec::with_capacity(doc.sections.len());
        for (name, entries) in &doc.sections {
            if !name.chars().all(|c| c.is_ascii_alphanumeric() || "_-.".contains(c)) || name.starts_with('.') {
                return Err(Error::format(
                    origin,
                    format!("cell name {name:?} may only use letters, digits, '_', '-' and '.'"),
                ));
            }
            let mut config = TrainConfig::default();
            config.apply(&doc.base, origin)?;
            config.apply(entries, origin)?;
            config
                .validate()
                .map_err(|e| Error::format(origin, format!("cell [{name}]: {e}")))?;
            cells.push(AblationCell {
                name: name.clone(),
                config,
            });
        }
        let first = &cells[0];
        for cell in &cells[1..] {
            for key in DATA_KEYS {
                let (a, b) = (first.config.value_of(key), cell.config.value_of(key));
                if a != b {
                    return Err(Error::format(
                        origin,
                        format!(
                            "cells [{}] and [{}] disagree on data key {key} ({} vs {})",
                            first.name,
                            cell.name,
                            a.unwrap_or_default(),
                            b.unwrap_or_default()
                        ),
                    ));
                }
            }
        }
        Ok(AblationMatrix { cells })
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CellSummary {
    pub name: String,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub eval: MetricSummary,
}

/// Paired comparison `a − b` of one metric over the held-out samples.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub metric: String,
    pub differences: Vec<f64>,
    pub test: TTest,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AblationReport {
    pub cells: Vec<CellSummary>,
    pub comparisons: Vec<Comparison>,
}

impl AblationReport {
    pub fn from_reports(reports: &[(String, TrainReport)]) -> Result<Self> {
        let cells: Vec<CellSummary> = reports
            .iter()
            .map(|(name, r)| CellSummary {
                name: name.clone(),
                initial_loss: r.initial_loss,
                final_loss: r.final_loss,
                eval: r.eval.model.clone(),
            })
            .collect();
        let mut comparisons = Vec::new();
        for i in 0..cells.len() {
            for j in i + 1..cells.len() {
                let (a, b) = (&cells[i].eval, &cells[j].eval);
                for (metric, va, vb) in [
                    ("psnr", &a.psnr.values, &b.psnr.values),
                    ("ssim", &a.ssim.values, &b.ssim.values),
                    ("nmse", &a.nmse.values, &b.nmse.values),
                ] {
                    let differences = va.iter().zip(vb).map(|(x, y)| x - y).collect();
                    comparisons.push(Comparison {
                        a: cells[i].name.clone(),
                        b: cells[j].name.clone(),
                        metric: metric.to_string(),
                        differences,
                        test: paired_t_test(va, vb)?,
                    });
                }
            }
        }
        Ok(AblationReport { cells, comparisons })
    }

    /// Human-readable table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<24} {:>12} {:>12} {:>10} {:>10} {:>12}",
            "cell", "psnr_mean", "psnr_std", "ssim_mean", "nmse_mean", "final_loss"
        );
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{:<24} {:>12.4} {:>12.4} {:>10.4} {:>10.5} {:>12.6}",
                c.name, c.eval.psnr.mean, c.eval.psnr.std, c.eval.ssim.mean, c.eval.nmse.mean, c.final_loss
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<32} {:<6} {:>12} {:>10} {:>10}",
            "pair (a - b)", "metric", "mean_diff", "t", "p"
        );
        for c in &self.comparisons {
            let flag = if c.test.degenerate { " (degenerate)" } else { "" };
            let _ = writeln!(
                s,
                "{:<32} {:<6} {:>12.5} {:>10.3} {:>10.4}{flag}",
                format!("{} - {}", c.a, c.b),
                c.metric,
                c.test.mean_diff,
                c.test.t,
                c.test.p
            );
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map(|mut s| {
                s.push('\n');
                s
            })
            .map_err(|e| Error::invalid(e.to_string()))
    }
}

/// Trains every cell in order. With `out`, each cell writes its outputs to
/// `out/<cell>/` and the comparison goes to `out/ablation.json` and
/// `out/ablation.txt`.
pub fn run_ablation(matrix: &AblationMatrix, out: Option<&Path>) -> Result<AblationReport> {
    let mut reports = Vec::with_capacity(matrix.cells.len());
    for cell in &matrix.cells {
        log::info!("training cell [{}]", cell.name);
        let dir = out.map(|o| o.join(&cell.name));
        let (report, elapsed) = run_training(&cell.config, dir.as_deref())?;
        log::info!("cell [{}] done in {:.1}s", cell.name, elapsed.as_secs_f64());
        reports.push((cell.name.clone(), report));
    }
    let report = AblationReport::from_reports(&reports)?;
    if let Some(dir) = out {
        write_atomic(&dir.join("ablation.json"), report.to_json()?.as_bytes())?;
        write_atomic(&dir.join("ablation.txt"), report.to_text().as_bytes())?;
    }
    Ok(report)
}
