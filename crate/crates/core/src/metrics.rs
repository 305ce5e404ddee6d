//! Metric streams: per-step CSV and JSONL files, paired comparison tables and
//! EMA smoothing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;
use crate::trainer::MetricsRecord;

/// `y_0 = x_0`, `y_t = alpha * x_t + (1 - alpha) * y_{t-1}`.
pub fn ema_smooth(series: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(series.len());
    for (t, &x) in series.iter().enumerate() {
        out.push(if t == 0 { x } else { alpha * x + (1.0 - alpha) * out[t - 1] });
    }
    out
}

/// Appends one CSV row and one JSON line per step, flushing both each time.
pub struct MetricsWriter {
    csv: BufWriter<File>,
    jsonl: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut csv = BufWriter::new(File::create(dir.join("metrics.csv"))?);
        writeln!(csv, "{}", MetricsRecord::CSV_HEADER)?;
        csv.flush()?;
        let jsonl = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
        Ok(Self { csv, jsonl })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        writeln!(self.csv, "{}", record.csv_row())?;
        self.csv.flush()?;
        writeln!(self.jsonl, "{}", serde_json::to_string(record).map_err(std::io::Error::other)?)?;
        self.jsonl.flush()?;
        Ok(())
    }
}

type Column = (&'static str, fn(&MetricsRecord) -> f64);

const COMPARE_COLUMNS: [Column; 6] = [
    ("reward", |m| m.mean_reward),
    ("entropy", |m| m.mean_entropy),
    ("grad_norm", |m| m.grad_norm),
    ("kl", |m| m.mean_kl),
    ("length", |m| m.mean_length),
    ("accuracy", |m| m.accuracy),
];

/// Joined table with `<metric>_grpo, <metric>_erpo` column pairs and, when
/// `alpha` is given, the matching `_ema` columns.
pub fn comparison_table(grpo: &[MetricsRecord], erpo: &[MetricsRecord], alpha: Option<f64>) -> String {
    let steps = grpo.len().min(erpo.len());
    let mut header = vec!["step".to_string()];
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for (name, get) in COMPARE_COLUMNS {
        for (mode, series) in [("grpo", grpo), ("erpo", erpo)] {
            header.push(format!("{name}_{mode}"));
            columns.push(series[..steps].iter().map(get).collect());
        }
    }
    if let Some(a) = alpha {
        let raw = columns.clone();
        for (name, col) in header[1..].to_vec().into_iter().zip(raw) {
            header.push(format!("{name}_ema"));
            columns.push(ema_smooth(&col, a));
        }
    }
    let mut out = header.join(",");
    out.push('\n');
    for t in 0..steps {
        out.push_str(&grpo[t].step.to_string());
        for col in &columns {
            out.push(',');
            out.push_str(&col[t].to_string());
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(step: usize, x: f64) -> MetricsRecord {
        MetricsRecord {
            step,
            mean_reward: x,
            mean_entropy: x,
            grad_norm: x,
            mean_kl: x,
            mean_length: 17.0,
            accuracy: x,
        }
    }

    #[test]
    fn ema_reference_values() {
        assert_eq!(ema_smooth(&[0.0, 1.0], 0.5), vec![0.0, 0.5]);
        let xs = [3.0, -1.0, 4.0, 1.5];
        assert_eq!(ema_smooth(&xs, 1.0), xs.to_vec());
        assert!(ema_smooth(&[2.5; 50], 0.12).iter().all(|&y| (y - 2.5).abs() < 1e-12));
        assert!(ema_smooth(&[], 0.3).is_empty());
    }

    #[test]
    fn comparison_table_layout() {
        let g = vec![record(0, 0.0), record(1, 1.0)];
        let e = vec![record(0, 1.0), record(1, 1.0)];
        let table = comparison_table(&g, &e, Some(0.5));
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        let header: Vec<&str> = lines[0].split(',').collect();
        assert_eq!(&header[..3], &["step", "reward_grpo", "reward_erpo"]);
        assert_eq!(header.len(), 1 + 12 + 12);
        let idx = header.iter().position(|&h| h == "reward_grpo_ema").unwrap();
        let row: Vec<&str> = lines[2].split(',').collect();
        assert_eq!(row[idx], "0.5");
        assert_eq!(comparison_table(&g, &e, None).lines().next().unwrap().split(',').count(), 13);
    }

    #[test]
    fn writer_emits_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = MetricsWriter::create(dir.path()).unwrap();
        w.append(&record(0, 0.25)).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv, format!("{}\n0,0.25,0.25,0.25,0.25,17,0.25\n", MetricsRecord::CSV_HEADER));
        let json = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        let back: MetricsRecord = serde_json::from_str(json.trim()).unwrap();
        assert_eq!(back, record(0, 0.25));
    }
}
