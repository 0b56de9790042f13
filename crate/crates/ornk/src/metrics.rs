//! Confusion matrices and the derived evaluation block: accuracy,
//! specificity against class 0, and per-positive-class sensitivity,
//! precision and F1. Values stay at full precision internally; rendering
//! rounds half-up to two decimals.

use crate::{Error, Result};

/// Row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {n}")));
        }
        Ok(ConfusionMatrix { n, counts: vec![0; n * n] })
    }

    pub fn from_labels(n: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Shape(format!(
                "{} true labels vs {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut cm = ConfusionMatrix::new(n)?;
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.n || predicted >= self.n {
            return Err(Error::Config(format!(
                "label pair ({truth},{predicted}) out of range for {} classes",
                self.n
            )));
        }
        self.counts[truth * self.n + predicted] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.n
    }

    pub fn count(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.n + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_total(&self, truth: usize) -> u64 {
        self.counts[truth * self.n..(truth + 1) * self.n].iter().sum()
    }

    pub fn col_total(&self, predicted: usize) -> u64 {
        (0..self.n).map(|t| self.counts[t * self.n + predicted]).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n).map(|i| self.counts[i * self.n + i]).sum()
    }

    /// N x N CSV, one row per true class.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for t in 0..self.n {
            let row: Vec<String> =
                (0..self.n).map(|p| self.counts[t * self.n + p].to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Sensitivity, precision and F1 for one positive class, as percentages.
/// `None` marks an undefined ratio (empty denominator), rendered as "-".
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveMetrics {
    pub name: String,
    pub se: Option<f64>,
    pub pr: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub method: String,
    pub region: String,
    pub total: u64,
    pub acc: Option<f64>,
    pub sp: Option<f64>,
    pub positives: Vec<PositiveMetrics>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(100.0 * num as f64 / den as f64)
    }
}

/// Harmonic mean of two percentages.
pub fn f1_percent(se: f64, pr: f64) -> Option<f64> {
    if se + pr == 0.0 {
        None
    } else {
        Some(2.0 * se * pr / (se + pr))
    }
}

/// The metric block for one evaluated run. Classes 1..N are the positive
/// classes, named by `positive_names` (e.g. ["S","G"]); class 0 is the
/// negative class that defines specificity.
pub fn metrics(
    cm: &ConfusionMatrix,
    positive_names: &[&str],
    method: &str,
    region: &str,
) -> Result<MetricsReport> {
    let n = cm.classes();
    if positive_names.len() != n - 1 {
        return Err(Error::Config(format!(
            "{} positive names for {} classes (need {})",
            positive_names.len(),
            n,
            n - 1
        )));
    }
    let total = cm.total();
    if total == 0 {
        return Err(Error::Config("empty confusion matrix".into()));
    }
    let acc = ratio(cm.trace(), total);
    let sp = ratio(cm.count(0, 0), cm.row_total(0));
    let mut positives = Vec::new();
    for (i, name) in positive_names.iter().enumerate() {
        let c = i + 1;
        let se = ratio(cm.count(c, c), cm.row_total(c));
        let pr = ratio(cm.count(c, c), cm.col_total(c));
        let f1 = match (se, pr) {
            (Some(s), Some(p)) => f1_percent(s, p),
            _ => None,
        };
        positives.push(PositiveMetrics { name: name.to_string(), se, pr, f1 });
    }
    Ok(MetricsReport { method: method.to_string(), region: region.to_string(), total, acc, sp, positives })
}

/// Half-up rounding to two decimals, for non-negative percentages.
pub fn round2(v: f64) -> f64 {
    (v * 100.0 + 0.5).floor() / 100.0
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.2}", round2(x)),
        None => "-".to_string(),
    }
}

/// Renders reports as an aligned text table and a CSV with identical
/// values. Columns: method, region, acc, sp, then se/pr/f1 per positive
/// class in first-appearance order across the reports.
pub fn render_report(reports: &[MetricsReport]) -> (String, String) {
    let mut names: Vec<String> = Vec::new();
    for r in reports {
        for p in &r.positives {
            if !names.contains(&p.name) {
                names.push(p.name.clone());
            }
        }
    }
    let mut header = vec!["method".to_string(), "region".to_string(), "acc".to_string(), "sp".to_string()];
    for metric in ["se", "pr", "f1"] {
        for name in &names {
            header.push(format!("{metric}_{name}"));
        }
    }
    let mut rows = vec![header];
    for r in reports {
        let find = |name: &str| r.positives.iter().find(|p| p.name == name);
        let mut row = vec![r.method.clone(), r.region.clone(), cell(r.acc), cell(r.sp)];
        for name in &names {
            row.push(cell(find(name).and_then(|p| p.se)));
        }
        for name in &names {
            row.push(cell(find(name).and_then(|p| p.pr)));
        }
        for name in &names {
            row.push(cell(find(name).and_then(|p| p.f1)));
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut table = String::new();
    for row in &rows {
        let padded: Vec<String> =
            row.iter().zip(&widths).map(|(v, &w)| format!("{v:<w$}")).collect();
        table.push_str(padded.join("  ").trim_end());
        table.push('\n');
    }
    let mut csv = String::new();
    for row in &rows {
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    (table, csv)
}
