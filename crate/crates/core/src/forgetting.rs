//! Forgetting analysis over the per-task score matrix and table emission.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricScores;

/// Scores of every seen task after training one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task_trained: usize,
    /// Eval-task index (as a decimal string) → scores ×100.
    pub scores: BTreeMap<String, MetricScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub method: String,
    #[serde(default)]
    pub task_names: Vec<String>,
    pub runs: Vec<RunRecord>,
}

/// Metric name → eval task → after-task → score.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricMatrix {
    pub task_names: Vec<String>,
    pub entries: BTreeMap<(String, usize, usize), f64>,
    pub num_tasks: usize,
}

impl MetricMatrix {
    pub fn from_results(results: &ResultsFile) -> Result<Self> {
        let mut m = MetricMatrix { task_names: results.task_names.clone(), ..Default::default() };
        for run in &results.runs {
            m.num_tasks = m.num_tasks.max(run.task_trained + 1);
            for (key, scores) in &run.scores {
                let eval: usize = key.parse().map_err(|_| Error::IncompleteMatrix(format!("bad eval task key {key:?}")))?;
                if eval > run.task_trained {
                    return Err(Error::IncompleteMatrix(format!("task {eval} scored before it was trained")));
                }
                for name in crate::metrics::METRIC_NAMES {
                    if let Some(v) = scores.get(name) {
                        m.entries.insert((name.to_string(), eval, run.task_trained), v);
                    }
                }
            }
        }
        if m.task_names.len() < m.num_tasks {
            for i in m.task_names.len()..m.num_tasks {
                m.task_names.push(format!("task{i}"));
            }
        }
        Ok(m)
    }

    pub fn get(&self, metric: &str, eval: usize, after: usize) -> Option<f64> {
        self.entries.get(&(metric.to_string(), eval, after)).copied()
    }

    /// Diagonal and final-row cells that are absent for `metric`.
    pub fn missing(&self, metric: &str) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        if self.num_tasks == 0 {
            return out;
        }
        let last = self.num_tasks - 1;
        for t in 0..self.num_tasks {
            for cell in [(t, t), (t, last)] {
                if self.get(metric, cell.0, cell.1).is_none() && !out.contains(&cell) {
                    out.push(cell);
                }
            }
        }
        out
    }

    fn require(&self, metric: &str) -> Result<()> {
        let miss = self.missing(metric);
        if miss.is_empty() {
            return Ok(());
        }
        let cells: Vec<String> = miss.iter().map(|(e, a)| format!("{metric}[eval {e}, after {a}]")).collect();
        Err(Error::IncompleteMatrix(cells.join(", ")))
    }
}

/// `100 · (after_all − after_first) / after_first`.
pub fn forgetting_pct(after_all: f64, after_first: f64) -> Result<f64> {
    if after_first == 0.0 {
        return Err(Error::UndefinedForgetting);
    }
    Ok(100.0 * (after_all - after_first) / after_first)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForgettingSummary {
    pub metric: String,
    /// One entry per task except the last; `None` where undefined.
    pub per_task: Vec<Option<f64>>,
    pub mean: Option<f64>,
    /// Number of tasks left out because their forgetting is undefined.
    pub undefined: usize,
}

/// Mean forgetting over every task but the final one.
pub fn average_forgetting(matrix: &MetricMatrix, metric: &str) -> Result<ForgettingSummary> {
    if matrix.num_tasks < 2 {
        return Err(Error::IncompleteMatrix("forgetting needs at least two tasks".into()));
    }
    matrix.require(metric)?;
    let last = matrix.num_tasks - 1;
    let per_task: Vec<Option<f64>> = (0..last)
        .map(|t| {
            let first = matrix.get(metric, t, t).unwrap_or(0.0);
            let all = matrix.get(metric, t, last).unwrap_or(0.0);
            forgetting_pct(all, first).ok()
        })
        .collect();
    let defined: Vec<f64> = per_task.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(ForgettingSummary { metric: metric.to_string(), undefined: per_task.len() - defined.len(), per_task, mean })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportStyle {
    ContcapTable,
    RattTable,
    ForgettingTable,
}

impl ReportStyle {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "contcap_table" => Some(Self::ContcapTable),
            "ratt_table" => Some(Self::RattTable),
            "forgetting_table" => Some(Self::ForgettingTable),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub text: String,
    pub csv: String,
}

/// Metrics shown in result tables, with display labels.
pub const TABLE_METRICS: [(&str, &str); 6] = [
    ("bleu1", "BLEU-1"),
    ("bleu4", "BLEU-4"),
    ("rougeL", "ROUGE-L"),
    ("meteor_lite", "METEOR-lite"),
    ("cider", "CIDEr"),
    ("clip_score", "CLIPScore"),
];

fn fmt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.2}"),
        None => "N/A".to_string(),
    }
}

fn fmt_delta(v: Option<f64>) -> String {
    match v {
        Some(x) if x >= 0.0 => format!("+{x:.2}"),
        Some(x) => format!("{x:.2}"),
        None => "N/A".to_string(),
    }
}

fn csv_cell(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn render(rows: &[Vec<String>]) -> Report {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols).map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0)).collect();
    let mut text = String::new();
    let mut csv = String::new();
    for (i, r) in rows.iter().enumerate() {
        let mut line = String::new();
        for (c, cell) in r.iter().enumerate() {
            if c > 0 {
                line.push_str("  ");
            }
            let pad = widths[c] - cell.chars().count();
            if c == 0 {
                line.push_str(cell);
                line.extend(core::iter::repeat(' ').take(pad));
            } else {
                line.extend(core::iter::repeat(' ').take(pad));
                line.push_str(cell);
            }
        }
        let _ = writeln!(text, "{}", line.trim_end());
        if i == 0 {
            let total: usize = widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1);
            let _ = writeln!(text, "{}", "-".repeat(total));
        }
        let cells: Vec<String> = r.iter().map(|s| csv_cell(s)).collect();
        let _ = writeln!(csv, "{}", cells.join(","));
    }
    Report { text, csv }
}

/// Mean over eval tasks of the scores after the final task.
fn final_mean(m: &MetricMatrix, metric: &str) -> Option<f64> {
    let last = m.num_tasks.checked_sub(1)?;
    let vals: Option<Vec<f64>> = (0..m.num_tasks).map(|t| m.get(metric, t, last)).collect();
    vals.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Builds the requested table from one results file per method.
///
/// * `contcap_table`: final mean score per metric and method, plus the last
///   method's improvement over each other method.
/// * `ratt_table`: final score per task for the first two methods and their
///   difference (second − first).
/// * `forgetting_table`: mean forgetting per metric and method with mean and
///   sum aggregates across metrics.
pub fn emit_report(methods: &[ResultsFile], style: ReportStyle) -> Result<Report> {
    if methods.is_empty() {
        return Err(Error::Empty("results"));
    }
    let matrices = methods.iter().map(MetricMatrix::from_results).collect::<Result<Vec<_>>>()?;
    let metrics: Vec<(&str, &str)> = TABLE_METRICS
        .iter()
        .copied()
        .filter(|(k, _)| matrices.iter().all(|m| m.entries.keys().any(|(n, _, _)| n == k)))
        .collect();
    if metrics.is_empty() {
        return Err(Error::IncompleteMatrix("no metric present in every results file".into()));
    }
    match style {
        ReportStyle::ContcapTable => {
            let ours = methods.len() - 1;
            let mut header = alloc::vec!["Metric".to_string()];
            header.extend(methods.iter().map(|m| m.method.clone()));
            header.extend(methods[..ours].iter().map(|m| format!("Improvement ({})", m.method)));
            let mut rows = alloc::vec![header];
            for (k, label) in &metrics {
                for m in &matrices {
                    m.require(k)?;
                }
                let vals: Vec<Option<f64>> = matrices.iter().map(|m| final_mean(m, k)).collect();
                let mut row = alloc::vec![label.to_string()];
                row.extend(vals.iter().map(|v| fmt(*v)));
                for v in &vals[..ours] {
                    row.push(fmt_delta(vals[ours].zip(*v).map(|(a, b)| a - b)));
                }
                rows.push(row);
            }
            Ok(render(&rows))
        }
        ReportStyle::RattTable => {
            if methods.len() != 2 {
                return Err(Error::Config("ratt_table compares exactly two methods".into()));
            }
            let (a, b) = (&matrices[0], &matrices[1]);
            if a.num_tasks != b.num_tasks {
                return Err(Error::IncompleteMatrix("methods cover different task counts".into()));
            }
            let mut header = alloc::vec!["Metric".to_string()];
            for name in &b.task_names {
                header.push(format!("{name} {}", methods[0].method));
                header.push(format!("{name} {}", methods[1].method));
                header.push(format!("{name} Δ"));
            }
            let mut rows = alloc::vec![header];
            let last = a.num_tasks.saturating_sub(1);
            for (k, label) in &metrics {
                a.require(k)?;
                b.require(k)?;
                let mut row = alloc::vec![label.to_string()];
                for t in 0..a.num_tasks {
                    let (x, y) = (a.get(k, t, last), b.get(k, t, last));
                    row.push(fmt(x));
                    row.push(fmt(y));
                    row.push(fmt_delta(y.zip(x).map(|(p, q)| p - q)));
                }
                rows.push(row);
            }
            Ok(render(&rows))
        }
        ReportStyle::ForgettingTable => {
            let mut header = alloc::vec!["Method".to_string()];
            header.extend(metrics.iter().map(|(_, l)| l.to_string()));
            header.push("Mean".into());
            header.push("Sum".into());
            header.push("Undefined".into());
            let mut rows = alloc::vec![header];
            for (res, m) in methods.iter().zip(&matrices) {
                let mut row = alloc::vec![res.method.clone()];
                let mut vals = Vec::new();
                let mut undefined = 0;
                for (k, _) in &metrics {
                    let s = average_forgetting(m, k)?;
                    undefined += s.undefined;
                    row.push(fmt(s.mean));
                    vals.extend(s.mean);
                }
                let sum: f64 = vals.iter().sum();
                let mean = (!vals.is_empty()).then(|| sum / vals.len() as f64);
                row.push(fmt(mean));
                row.push(fmt((!vals.is_empty()).then_some(sum)));
                row.push(undefined.to_string());
                rows.push(row);
            }
            Ok(render(&rows))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn scores(v: f64) -> MetricScores {
        MetricScores { bleu1: v, bleu4: v / 2.0, rouge_l: v, meteor_lite: v, cider: v, clip_score: None }
    }

    /// Two tasks; task 0 drops from 10 to 9 in every metric.
    fn two_task(method: &str) -> ResultsFile {
        ResultsFile {
            method: method.into(),
            task_names: vec!["a".into(), "b".into()],
            runs: vec![
                RunRecord { task_trained: 0, scores: [("0".to_string(), scores(10.0))].into_iter().collect() },
                RunRecord {
                    task_trained: 1,
                    scores: [("0".to_string(), scores(9.0)), ("1".to_string(), scores(20.0))].into_iter().collect(),
                },
            ],
        }
    }

    #[test]
    fn pct_examples() {
        assert_eq!(forgetting_pct(9.0, 10.0).unwrap(), -10.0);
        assert_eq!(forgetting_pct(12.0, 10.0).unwrap(), 20.0);
        assert_eq!(forgetting_pct(3.5, 3.5).unwrap(), 0.0);
        assert!(matches!(forgetting_pct(1.0, 0.0), Err(Error::UndefinedForgetting)));
    }

    #[test]
    fn average_over_non_final_tasks() {
        let m = MetricMatrix::from_results(&two_task("x")).unwrap();
        let s = average_forgetting(&m, "bleu1").unwrap();
        assert_eq!(s.mean, Some(-10.0));
        assert_eq!(s.per_task, vec![Some(-10.0)]);
    }

    #[test]
    fn single_task_is_undefined() {
        let r = ResultsFile { method: "x".into(), task_names: vec![], runs: vec![two_task("x").runs[0].clone()] };
        assert!(average_forgetting(&MetricMatrix::from_results(&r).unwrap(), "bleu1").is_err());
    }

    #[test]
    fn missing_cells_are_listed() {
        let mut r = two_task("x");
        r.runs[1].scores.remove("0");
        let err = average_forgetting(&MetricMatrix::from_results(&r).unwrap(), "bleu1").unwrap_err();
        assert!(matches!(err, Error::IncompleteMatrix(ref s) if s.contains("eval 0, after 1")));
    }

    #[test]
    fn zero_diagonal_is_reported_not_zeroed() {
        let mut r = two_task("x");
        r.runs[0].scores.get_mut("0").unwrap().bleu4 = 0.0;
        let s = average_forgetting(&MetricMatrix::from_results(&r).unwrap(), "bleu4").unwrap();
        assert_eq!(s.mean, None);
        assert_eq!(s.undefined, 1);
        let rep = emit_report(&[r], ReportStyle::ForgettingTable).unwrap();
        assert!(rep.text.contains("N/A"));
    }

    #[test]
    fn reports_are_stable_and_consistent() {
        let both = [two_task("base"), two_task("ours")];
        for style in [ReportStyle::ContcapTable, ReportStyle::RattTable, ReportStyle::ForgettingTable] {
            let a = emit_report(&both, style).unwrap();
            assert_eq!(a, emit_report(&both, style).unwrap());
            assert_eq!(a.csv.lines().count(), a.text.lines().count() - 1);
        }
        let f = emit_report(&both, ReportStyle::ForgettingTable).unwrap();
        let row = f.csv.lines().nth(1).unwrap();
        assert_eq!(row, "base,-10.00,-10.00,-10.00,-10.00,-10.00,-10.00,-50.00,0");
        let r = emit_report(&both, ReportStyle::RattTable).unwrap();
        assert!(r.csv.lines().next().unwrap().contains("a base,a ours,a Δ,b base"));
    }
}
