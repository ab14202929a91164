//! Report emission: a plain-text table and a machine-readable CSV.
//!
//! Table layout follows `Model | PLCC [95% CI] | SROCC [95% CI] | MSE [95% CI]`
//! with significance stars from paired p-values (`*` p < .001, `**` p < .01).

use std::path::{Path, PathBuf};

use crate::error::{AqaError, Result};

use super::MetricReport;

#[derive(Debug, Clone)]
pub struct ModelEval {
    pub name: String,
    pub reports: Vec<MetricReport>,
    /// Paired p-value against the reference model, when computed.
    pub p_vs_reference: Option<f64>,
}

pub fn stars(p: f64) -> &'static str {
    if p < 0.001 {
        "*"
    } else if p < 0.01 {
        "**"
    } else {
        ""
    }
}

fn cell(report: &MetricReport, starred: &str) -> String {
    format!(
        "{:.3}{} [{:.3}, {:.3}]",
        report.estimate, starred, report.ci_low, report.ci_high
    )
}

/// Render the text table. `footers` are appended verbatim, one per line.
pub fn render_table(title: &str, evals: &[ModelEval], footers: &[String]) -> String {
    let mut columns = vec!["Model".to_string()];
    if let Some(first) = evals.first() {
        for r in &first.reports {
            columns.push(format!("{} [95% CI]", r.metric));
        }
    }
    let mut rows: Vec<Vec<String>> = Vec::new();
    for e in evals {
        let starred = e.p_vs_reference.map(stars).unwrap_or("");
        let mut row = vec![e.name.clone()];
        for r in &e.reports {
            row.push(cell(r, starred));
        }
        rows.push(row);
    }
    let mut widths: Vec<usize> = columns.iter().map(|c| c.len()).collect();
    for row in &rows {
        for (i, c) in row.iter().enumerate() {
            widths[i] = widths[i].max(c.len());
        }
    }
    let mut out = String::new();
    out.push_str(title);
    out.push('\n');
    let fmt_row = |cells: &[String], widths: &[usize]| -> String {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{:<width$}", c, width = widths[i]))
            .collect::<Vec<_>>()
            .join(" | ")
    };
    out.push_str(&fmt_row(&columns, &widths));
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 3 * (widths.len() - 1)));
    out.push('\n');
    for row in &rows {
        out.push_str(&fmt_row(row, &widths));
        out.push('\n');
    }
    for f in footers {
        out.push_str(f);
        out.push('\n');
    }
    out
}

pub fn render_csv(evals: &[ModelEval]) -> String {
    let mut out = String::from("model,metric,estimate,ci_low,ci_high,n,resamples,seed,p_vs_reference\n");
    for e in evals {
        for r in &e.reports {
            let p = e
                .p_vs_reference
                .map(|v| v.to_string())
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                e.name, r.metric, r.estimate, r.ci_low, r.ci_high, r.n, r.resamples, r.seed, p
            ));
        }
    }
    out
}

/// Standard footers attached to every emitted report.
pub fn default_footers() -> Vec<String> {
    vec![
        "* p < .001, ** p < .01 (paired bootstrap vs. reference model)".to_string(),
        "note: lowest-error subsets rank samples by each evaluated model's own \
         absolute error unless a reference model is given (--reference)."
            .to_string(),
    ]
}

/// Write `<stem>.txt` and `<stem>.csv` under `dir`; returns the paths.
pub fn emit_report(
    dir: &Path,
    stem: &str,
    title: &str,
    evals: &[ModelEval],
    footers: &[String],
) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| AqaError::io(dir, e))?;
    let txt_path = dir.join(format!("{stem}.txt"));
    let csv_path = dir.join(format!("{stem}.csv"));
    std::fs::write(&txt_path, render_table(title, evals, footers))
        .map_err(|e| AqaError::io(&txt_path, e))?;
    std::fs::write(&csv_path, render_csv(evals)).map_err(|e| AqaError::io(&csv_path, e))?;
    Ok((txt_path, csv_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalstats::Metric;

    fn fake_report(metric: Metric, estimate: f64) -> MetricReport {
        MetricReport {
            metric,
            estimate,
            ci_low: estimate - 0.01,
            ci_high: estimate + 0.01,
            n: 100,
            resamples: 1000,
            seed: 0,
            redraws: 0,
            ci_flag: false,
        }
    }

    #[test]
    fn empty_model_map_gives_header_only() {
        let table = render_table("results", &[], &[]);
        assert!(table.starts_with("results\nModel\n"));
        let csv = render_csv(&[]);
        assert_eq!(csv.lines().count(), 1);
    }

    #[test]
    fn table_has_published_column_layout() {
        let evals = vec![ModelEval {
            name: "AestheticNet".into(),
            reports: vec![
                fake_report(Metric::Plcc, 0.747),
                fake_report(Metric::Srocc, 0.740),
                fake_report(Metric::Mse, 0.261),
            ],
            p_vs_reference: None,
        }];
        let table = render_table("results", &evals, &[]);
        assert!(
            table.contains("Model")
                && table.contains("PLCC [95% CI]")
                && table.contains("SROCC [95% CI]")
                && table.contains("MSE [95% CI]"),
            "{table}"
        );
        assert!(table.contains("0.747 [0.737, 0.757]"));
    }

    #[test]
    fn stars_follow_threshold_convention() {
        assert_eq!(stars(0.0005), "*");
        assert_eq!(stars(0.005), "**");
        assert_eq!(stars(0.5), "");
    }

    #[test]
    fn emission_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let evals = vec![ModelEval {
            name: "m".into(),
            reports: vec![fake_report(Metric::Plcc, 0.5)],
            p_vs_reference: Some(0.0004),
        }];
        let (t1, c1) = emit_report(dir.path(), "r1", "t", &evals, &default_footers()).unwrap();
        let (t2, c2) = emit_report(dir.path(), "r2", "t", &evals, &default_footers()).unwrap();
        assert_eq!(std::fs::read(&t1).unwrap(), std::fs::read(&t2).unwrap());
        assert_eq!(std::fs::read(&c1).unwrap(), std::fs::read(&c2).unwrap());
        assert!(String::from_utf8(std::fs::read(&t1).unwrap())
            .unwrap()
            .contains("0.500* ["));
    }
}
