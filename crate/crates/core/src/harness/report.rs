//! Experiment reports: per-seed values, aggregates, and their files.
//!
//! Every aggregate is recomputed from the stored per-seed cells, and the
//! cells themselves can be recomputed from the stored per-batch records, so
//! `report` can rebuild `summary.csv` and the plots without rerunning.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::ttg::BatchRecord;

pub const CELLS_FILE: &str = "cells.jsonl";
pub const BATCHES_FILE: &str = "batches.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const REPORT_FILE: &str = "report.json";
pub const PLOT_DIR: &str = "report";

pub type Labels = BTreeMap<String, String>;

pub fn labels(pairs: &[(&str, &str)]) -> Labels {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

/// One measured value for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub labels: Labels,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

/// One per-batch record of a strategy run, tagged with its cell labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchLine {
    pub labels: Labels,
    pub seed: u64,
    #[serde(flatten)]
    pub record: BatchRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub labels: Labels,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    /// Hash of the base training config (variants hash their own configs into labels).
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub cells: Vec<Cell>,
    #[serde(skip)]
    pub batches: Vec<BatchLine>,
    #[serde(default)]
    pub artifacts: Vec<PathBuf>,
}

fn matches(l: &Labels, filter: &[(&str, &str)]) -> bool {
    filter.iter().all(|(k, v)| l.get(*k).is_some_and(|x| x == v))
}

impl ExperimentReport {
    pub fn new(experiment: impl Into<String>, config_hash: impl Into<String>) -> Self {
        Self {
            experiment: experiment.into(),
            config_hash: config_hash.into(),
            seeds: Vec::new(),
            cells: Vec::new(),
            batches: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn push(&mut self, labels: Labels, seed: u64, metric: &str, value: f64) {
        if !self.seeds.contains(&seed) {
            self.seeds.push(seed);
        }
        self.cells.push(Cell { labels, seed, metric: metric.into(), value });
    }

    pub fn push_batches(&mut self, labels: &Labels, seed: u64, records: &[BatchRecord]) {
        self.batches
            .extend(records.iter().map(|r| BatchLine { labels: labels.clone(), seed, record: r.clone() }));
    }

    /// Values of `metric` over cells whose labels contain every filter pair, in insertion order.
    pub fn values(&self, filter: &[(&str, &str)], metric: &str) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.metric == metric && matches(&c.labels, filter))
            .map(|c| c.value)
            .collect()
    }

    /// Per-seed means over the matching cells, keyed by seed.
    pub fn per_seed(&self, filter: &[(&str, &str)], metric: &str) -> BTreeMap<u64, f64> {
        let mut acc: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
        for c in self.cells.iter().filter(|c| c.metric == metric && matches(&c.labels, filter)) {
            let e = acc.entry(c.seed).or_default();
            e.0 += c.value;
            e.1 += 1;
        }
        acc.into_iter().map(|(s, (v, n))| (s, v / n as f64)).collect()
    }

    /// Mean over seeds of the per-seed means; `None` when nothing matches.
    pub fn mean(&self, filter: &[(&str, &str)], metric: &str) -> Option<f64> {
        let v: Vec<f64> = self.per_seed(filter, metric).into_values().collect();
        (!v.is_empty()).then(|| mean_std(&v).0)
    }

    pub fn summaries(&self) -> Vec<Summary> {
        let mut groups: BTreeMap<(String, Labels), Vec<f64>> = BTreeMap::new();
        for c in &self.cells {
            groups.entry((c.metric.clone(), c.labels.clone())).or_default().push(c.value);
        }
        groups
            .into_iter()
            .map(|((metric, labels), v)| {
                let (mean, std) = mean_std(&v);
                Summary { labels, metric, n: v.len(), mean, std }
            })
            .collect()
    }

    pub fn summary_csv(&self) -> String {
        let mut keys: Vec<String> = self.cells.iter().flat_map(|c| c.labels.keys().cloned()).collect();
        keys.sort();
        keys.dedup();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["experiment".to_string(), "config_hash".to_string()];
        header.extend(keys.iter().cloned());
        header.extend(["metric", "n", "mean", "std"].map(String::from));
        w.write_record(&header).expect("in-memory write");
        for s in self.summaries() {
            let mut row = vec![self.experiment.clone(), self.config_hash.clone()];
            row.extend(keys.iter().map(|k| s.labels.get(k).cloned().unwrap_or_default()));
            row.extend([s.metric, s.n.to_string(), s.mean.to_string(), s.std.to_string()]);
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush to memory")).expect("utf-8 fields")
    }

    /// Writes `report.json`, `cells.jsonl`, `batches.jsonl`, `summary.csv`
    /// and one SVG per metric under `report/`. Plot errors are reported on
    /// the log and otherwise ignored.
    pub fn write(&mut self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_jsonl(&dir.join(CELLS_FILE), &self.cells)?;
        write_jsonl(&dir.join(BATCHES_FILE), &self.batches)?;
        fs::write(dir.join(SUMMARY_FILE), self.summary_csv())?;
        self.artifacts = vec![dir.join(CELLS_FILE), dir.join(BATCHES_FILE), dir.join(SUMMARY_FILE)];
        match self.write_plots(&dir.join(PLOT_DIR)) {
            Ok(paths) => self.artifacts.extend(paths),
            Err(e) => log::warn!("plotting failed for {}: {e}", self.experiment),
        }
        self.artifacts.push(dir.join(REPORT_FILE));
        fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Reads a report back; cells and batches come from their JSONL files.
    pub fn read(dir: &Path) -> Result<Self> {
        let mut r: ExperimentReport = serde_json::from_str(&fs::read_to_string(dir.join(REPORT_FILE))?)?;
        r.cells = read_jsonl(&dir.join(CELLS_FILE))?;
        let batches = dir.join(BATCHES_FILE);
        r.batches = if batches.exists() { read_jsonl(&batches)? } else { Vec::new() };
        Ok(r)
    }

    pub fn write_plots(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut by_metric: BTreeMap<String, Vec<Summary>> = BTreeMap::new();
        for s in self.summaries() {
            by_metric.entry(s.metric.clone()).or_default().push(s);
        }
        let mut out = Vec::new();
        for (metric, rows) in by_metric {
            let path = dir.join(format!("{}_{}.svg", self.experiment, sanitize(&metric)));
            fs::write(&path, bar_chart(&format!("{} / {metric}", self.experiment), &rows))?;
            out.push(path);
        }
        Ok(out)
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| invalid(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Horizontal bars of mean with a ±std whisker, one row per label set.
pub fn bar_chart(title: &str, rows: &[Summary]) -> String {
    let row_h = 18.0;
    let left = 260.0;
    let width = 640.0;
    let plot_w = width - left - 60.0;
    let height = 40.0 + row_h * rows.len() as f64 + 20.0;
    let hi = rows
        .iter()
        .map(|r| r.mean + r.std.max(0.0))
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max);
    let lo = rows.iter().map(|r| r.mean).filter(|v| v.is_finite()).fold(0.0f64, f64::min);
    let span = if hi - lo > 0.0 { hi - lo } else { 1.0 };
    let x = |v: f64| left + (v - lo) / span * plot_w;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="10" y="18" font-size="13">{}</text>"#, escape(title));
    for (i, r) in rows.iter().enumerate() {
        let y = 32.0 + row_h * i as f64;
        let name: Vec<String> = r.labels.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(s, r#"<text x="10" y="{:.1}">{}</text>"#, y + 12.0, escape(&name.join(" ")));
        if !r.mean.is_finite() {
            continue;
        }
        let (x0, x1) = (x(0.0f64.max(lo)), x(r.mean));
        let _ = writeln!(
            s,
            r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#4a7ab0"/>"##,
            x0.min(x1),
            y + 2.0,
            (x1 - x0).abs(),
            row_h - 5.0
        );
        if r.std > 0.0 {
            let _ = writeln!(
                s,
                r#"<line x1="{:.1}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="black"/>"#,
                x(r.mean - r.std),
                x(r.mean + r.std),
                y + row_h / 2.0,
                y + row_h / 2.0
            );
        }
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{:.4}</text>"#, x1.max(x0) + 4.0, y + 12.0, r.mean);
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ExperimentReport {
        let mut r = ExperimentReport::new("demo", "abc");
        for seed in 0..3u64 {
            for (k, base) in [("erm", 0.5), ("tent", 0.6)] {
                r.push(labels(&[("strategy", k)]), seed, "accuracy", base + 0.01 * seed as f64);
            }
        }
        r
    }

    #[test]
    fn mean_std_matches_hand_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn summaries_recompute_from_cells() {
        let r = sample();
        let s = r.summaries();
        assert_eq!(s.len(), 2);
        let erm = s.iter().find(|x| x.labels["strategy"] == "erm").unwrap();
        assert_eq!(erm.n, 3);
        assert!((erm.mean - 0.51).abs() < 1e-12);
        assert_eq!(r.mean(&[("strategy", "tent")], "accuracy").unwrap(), mean_std(&r.values(&[("strategy", "tent")], "accuracy")).0);
        assert!(r.mean(&[("strategy", "gf")], "accuracy").is_none());
    }

    #[test]
    fn files_round_trip() {
        let mut r = sample();
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path()).unwrap();
        let back = ExperimentReport::read(dir.path()).unwrap();
        assert_eq!(back.cells, r.cells);
        assert_eq!(back.summary_csv(), fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap());
        assert!(dir.path().join(PLOT_DIR).join("demo_accuracy.svg").exists());
        let csv = back.summary_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("experiment,config_hash,strategy,metric,n,mean,std"));
    }
}
