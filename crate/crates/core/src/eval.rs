//! Metrics, the similarity heatmap and report tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::MAX_SCORE;
use crate::error::{Error, Result};

pub const DEFAULT_HEATMAP_BINS: usize = 6;

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "accuracy",
            left: vec![preds.len()],
            right: vec![labels.len()],
        });
    }
    if preds.is_empty() {
        return Err(Error::invalid("accuracy of zero examples"));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Sample Pearson correlation. Constant inputs are an error, never NaN.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch {
            op: "pearson",
            left: vec![x.len()],
            right: vec![y.len()],
        });
    }
    if x.len() < 2 {
        return Err(Error::invalid("pearson needs at least 2 points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(Error::UndefinedCorrelation("x"));
    }
    if syy == 0.0 {
        return Err(Error::UndefinedCorrelation("y"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Equal-width bin index over `[0, 5]`; the top edge falls in the last bin.
fn bin_of(v: f64, bins: usize) -> usize {
    let clamped = v.clamp(0.0, MAX_SCORE);
    ((clamped / MAX_SCORE * bins as f64) as usize).min(bins - 1)
}

fn check_bins(bins: usize) -> Result<()> {
    if bins == 0 {
        return Err(Error::invalid("need at least one bin"));
    }
    Ok(())
}

pub fn bin_edges(bins: usize) -> Vec<f64> {
    (0..=bins).map(|i| MAX_SCORE * i as f64 / bins as f64).collect()
}

pub fn histogram(values: &[f64], bins: usize) -> Result<Vec<usize>> {
    check_bins(bins)?;
    let mut out = vec![0; bins];
    for &v in values {
        out[bin_of(v, bins)] += 1;
    }
    Ok(out)
}

/// Joint counts of (true, predicted) scores; rows index the true bin.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub edges: Vec<f64>,
    pub counts: Vec<Vec<usize>>,
}

impl Heatmap {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn row_marginal(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_marginal(&self) -> Vec<usize> {
        let bins = self.counts.len();
        (0..bins).map(|j| self.counts.iter().map(|r| r[j]).sum()).collect()
    }

    /// Header row holds predicted-bin ranges, first column true-bin ranges.
    pub fn to_csv(&self) -> String {
        let label = |i: usize| format!("[{:.4},{:.4})", self.edges[i], self.edges[i + 1]);
        let bins = self.counts.len();
        let mut out = String::from("true\\pred");
        for j in 0..bins {
            let _ = write!(out, ",\"{}\"", label(j));
        }
        out.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            let _ = write!(out, "\"{}\"", label(i));
            for c in row {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn similarity_heatmap(truth: &[f64], pred: &[f64], bins: usize) -> Result<Heatmap> {
    check_bins(bins)?;
    if truth.len() != pred.len() {
        return Err(Error::ShapeMismatch {
            op: "similarity_heatmap",
            left: vec![truth.len()],
            right: vec![pred.len()],
        });
    }
    let outside = truth
        .iter()
        .chain(pred)
        .filter(|v| !(0.0..=MAX_SCORE).contains(*v))
        .count();
    if outside > 0 {
        log::warn!("{outside} heatmap scores fell outside [0, 5] and were clamped");
    }
    let mut counts = vec![vec![0; bins]; bins];
    for (&t, &p) in truth.iter().zip(pred) {
        counts[bin_of(t, bins)][bin_of(p, bins)] += 1;
    }
    Ok(Heatmap {
        edges: bin_edges(bins),
        counts,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Pearson,
    /// Plain mean of a model's task metrics.
    Mean,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Pearson => "pearson",
            Metric::Mean => "mean",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [Metric::Accuracy, Metric::Pearson, Metric::Mean]
            .into_iter()
            .find(|m| m.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub task: String,
    pub metric: Metric,
    pub value: f64,
    pub n: usize,
}

impl MetricReport {
    pub fn new(model: impl Into<String>, task: impl Into<String>, metric: Metric, value: f64, n: usize) -> Self {
        MetricReport {
            model: model.into(),
            task: task.into(),
            metric,
            value,
            n,
        }
    }
}

pub const OVERALL_TASK: &str = "overall";

/// Appends, per model, the plain mean of its task metrics.
pub fn with_overall(reports: &[MetricReport]) -> Vec<MetricReport> {
    let mut out = reports.to_vec();
    let mut models: Vec<&str> = Vec::new();
    for r in reports {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
    }
    for m in models {
        let rows: Vec<&MetricReport> = reports
            .iter()
            .filter(|r| r.model == m && r.metric != Metric::Mean)
            .collect();
        if rows.len() > 1 {
            let mean = rows.iter().map(|r| r.value).sum::<f64>() / rows.len() as f64;
            let n = rows.iter().map(|r| r.n).sum();
            out.push(MetricReport::new(m, OVERALL_TASK, Metric::Mean, mean, n));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Tsv,
    Pretty,
}

pub const REPORT_COLUMNS: [&str; 5] = ["model", "task", "metric", "value", "n"];

/// One line per report, plus per-model overall means.
pub fn emit_report(reports: &[MetricReport], format: ReportFormat) -> String {
    let rows = with_overall(reports);
    match format {
        ReportFormat::Tsv => {
            let mut out = REPORT_COLUMNS.join("\t");
            out.push('\n');
            for r in &rows {
                let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", r.model, r.task, r.metric.name(), r.value, r.n);
            }
            out
        }
        ReportFormat::Pretty => {
            let cells: Vec<[String; 5]> = rows
                .iter()
                .map(|r| {
                    [
                        r.model.clone(),
                        r.task.clone(),
                        r.metric.name().to_string(),
                        format!("{:.4}", r.value),
                        r.n.to_string(),
                    ]
                })
                .collect();
            let mut width = REPORT_COLUMNS.map(str::len);
            for row in &cells {
                for (w, c) in width.iter_mut().zip(row) {
                    *w = (*w).max(c.chars().count());
                }
            }
            let line = |row: [&str; 5]| {
                let mut s = String::new();
                for (k, (c, w)) in row.iter().zip(width).enumerate() {
                    if k > 0 {
                        s.push_str("  ");
                    }
                    if k >= 3 {
                        let _ = write!(s, "{c:>w$}");
                    } else {
                        let _ = write!(s, "{c:<w$}");
                    }
                }
                s.trim_end().to_string() + "\n"
            };
            let mut out = line(REPORT_COLUMNS);
            for row in &cells {
                out.push_str(&line([&row[0], &row[1], &row[2], &row[3], &row[4]]));
            }
            out
        }
    }
}

/// Parses TSV written by [`emit_report`], overall rows included.
pub fn parse_report_tsv(text: &str) -> Result<Vec<MetricReport>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split('\t').collect();
    if header != REPORT_COLUMNS {
        return Err(Error::invalid(format!("unexpected report header {header:?}")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let bad = || Error::invalid(format!("malformed report line {}: {l:?}", i + 2));
            let c: Vec<&str> = l.split('\t').collect();
            if c.len() != 5 {
                return Err(bad());
            }
            Ok(MetricReport {
                model: c[0].into(),
                task: c[1].into(),
                metric: Metric::parse(c[2]).ok_or_else(bad)?,
                value: c[3].parse().map_err(|_| bad())?,
                n: c[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
