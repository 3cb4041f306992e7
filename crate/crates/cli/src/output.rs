//! Metrics files, run summaries and the optional accuracy plot.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use noisyfl::sim::RoundRecord;

use crate::config::OutputFormat;

pub const METRICS_HEADER: [&str; 9] = [
    "seed",
    "round",
    "train_loss",
    "test_accuracy",
    "range_w",
    "mean_range_dw",
    "max_range_dw",
    "ber_down",
    "ber_up",
];

/// One metrics row. Floats are written in shortest round-trip form.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub round: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub range_w: f64,
    pub mean_range_dw: f64,
    pub max_range_dw: f64,
    pub ber_down: f64,
    /// Mean over clients.
    pub ber_up: f64,
}

impl MetricsRow {
    pub fn new(seed: u64, r: &RoundRecord) -> Self {
        Self {
            seed,
            round: r.round,
            train_loss: r.train_loss,
            test_accuracy: r.test_accuracy,
            range_w: r.range_w,
            mean_range_dw: r.mean_range_dw(),
            max_range_dw: r.max_range_dw(),
            ber_down: r.ber_down,
            ber_up: r.mean_ber_up(),
        }
    }
}

pub fn metrics_file_name(format: OutputFormat) -> &'static str {
    match format {
        OutputFormat::Csv => "metrics.csv",
        OutputFormat::Jsonl => "metrics.jsonl",
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow], format: OutputFormat) -> Result<()> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    match format {
        OutputFormat::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
            w.write_record(METRICS_HEADER)?;
            for row in rows {
                w.serialize(row)?;
            }
            w.flush()?;
        }
        OutputFormat::Jsonl => {
            let mut w = BufWriter::new(file);
            for row in rows {
                serde_json::to_writer(&mut w, row)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub final_accuracy: f64,
    pub final_train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub runs: Vec<SeedResult>,
    pub mean_accuracy: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std_accuracy: f64,
}

impl Summary {
    pub fn new(runs: Vec<SeedResult>) -> Self {
        let n = runs.len() as f64;
        let mean = runs.iter().map(|r| r.final_accuracy).sum::<f64>() / n;
        let std = if runs.len() > 1 {
            let ss: f64 = runs.iter().map(|r| (r.final_accuracy - mean).powi(2)).sum();
            (ss / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            runs,
            mean_accuracy: mean,
            std_accuracy: std,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
    }
}

/// Line chart of test accuracy against round, one polyline per seed.
pub fn accuracy_svg(series: &[(u64, Vec<f64>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 48.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
    let rounds = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(2);
    let x = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / (rounds - 1) as f64;
    let y = |a: f64| H - PAD - (H - 2.0 * PAD) * a.clamp(0.0, 1.0);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    out += &format!(
        "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n<path d=\"M{PAD} {PAD} V{} H{}\" stroke=\"black\" fill=\"none\"/>\n",
        H - PAD,
        W - PAD
    );
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        out += &format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{tick}</text>\n",
            PAD - 6.0,
            y(tick) + 4.0
        );
    }
    out += &format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">round</text>\n",
        W / 2.0,
        H - 12.0
    );
    for (k, (seed, acc)) in series.iter().enumerate() {
        let points: Vec<String> = acc.iter().enumerate().map(|(i, &a)| format!("{:.1},{:.1}", x(i), y(a))).collect();
        let color = COLORS[k % COLORS.len()];
        out += &format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"><title>seed {seed}</title></polyline>\n",
            points.join(" ")
        );
    }
    out + "</svg>\n"
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(round: usize) -> RoundRecord {
        RoundRecord {
            round,
            train_loss: 0.1 + round as f64,
            test_accuracy: 0.3,
            range_w: 2.0,
            range_dw: vec![0.5, 1.5],
            ber_down: 1e-4,
            ber_up: vec![0.1, 0.3],
            grad_norm_sq: None,
        }
    }

    #[test]
    fn csv_has_header_and_round_trip_floats() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![MetricsRow::new(4, &record(0)), MetricsRow::new(4, &record(1))];
        write_metrics(&path, &rows, OutputFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), METRICS_HEADER.join(","));
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first[0], "4");
        assert_eq!(first[5].parse::<f64>().unwrap(), 1.0);
        assert_eq!(first[6].parse::<f64>().unwrap(), 1.5);
        assert_eq!(first[7].parse::<f64>().unwrap(), 1e-4);
        assert_eq!(first[8].parse::<f64>().unwrap(), 0.2);
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn jsonl_has_one_object_per_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        write_metrics(&path, &[MetricsRow::new(1, &record(0))], OutputFormat::Jsonl).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(v["round"], 0);
        assert_eq!(v["ber_up"], 0.2);
    }

    #[test]
    fn summary_statistics() {
        let s = Summary::new(vec![
            SeedResult {
                seed: 0,
                final_accuracy: 0.9,
                final_train_loss: 0.0,
            },
            SeedResult {
                seed: 1,
                final_accuracy: 0.8,
                final_train_loss: 0.0,
            },
        ]);
        assert!((s.mean_accuracy - 0.85).abs() < 1e-15);
        assert!((s.std_accuracy - 0.1 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn svg_has_one_line_per_seed() {
        let svg = accuracy_svg(&[(0, vec![0.1, 0.5, 0.9]), (1, vec![0.2, 0.4])]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.starts_with("<svg"));
    }
}
