//! Per-replication CSV and summary JSON.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::experiment::{summarize, CellSummary, ExperimentConfig, ExperimentReport, Load, RepRow};
use crate::files::{policy_json, NetworkFile};

pub const VERSION: &str = concat!("netsim ", env!("CARGO_PKG_VERSION"));

pub const CSV_HEADER: [&str; 8] = ["load", "estimator", "rep", "point", "beta", "s2", "ci_lo", "ci_hi"];

/// Writes one line per (load, estimator, rep). Floats use the shortest
/// representation that parses back to the same value.
pub fn write_csv<W: Write>(rows: &[RepRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(CSV_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> csv::Result<Vec<RepRow>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub network: NetworkFile,
    pub policy: serde_json::Value,
    pub estimators: Vec<String>,
    pub steps: u64,
    pub batches: usize,
    pub reps: usize,
    pub seed: u64,
    pub loads: Vec<Load>,
    pub zero_mask: bool,
}

impl ConfigEcho {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            network: NetworkFile::from_spec(&cfg.network),
            policy: serde_json::from_str(&policy_json(&cfg.policy)).expect("policy JSON"),
            estimators: cfg.estimator_list().iter().map(|k| k.label().to_string()).collect(),
            steps: cfg.steps,
            batches: cfg.batches,
            reps: cfg.reps,
            seed: cfg.seed,
            loads: cfg.loads.clone(),
            zero_mask: cfg.zero_mask,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub version: String,
    pub config: ConfigEcho,
    /// Replication `r` used RNG stream `(seed, r)`.
    pub seeds: Vec<(u64, u64)>,
    pub cells: Vec<CellSummary>,
}

pub fn summary(cfg: &ExperimentConfig, report: &ExperimentReport) -> Summary {
    Summary {
        version: VERSION.to_string(),
        config: ConfigEcho::new(cfg),
        seeds: (0..cfg.reps as u64).map(|r| (cfg.seed, r)).collect(),
        cells: report.cells.clone(),
    }
}

/// Writes `reps.csv` and `summary.json` into `dir`.
pub fn emit(cfg: &ExperimentConfig, report: &ExperimentReport, dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    write_csv(&report.rows, std::fs::File::create(dir.join("reps.csv"))?)?;
    let json = serde_json::to_string_pretty(&summary(cfg, report))?;
    std::fs::write(dir.join("summary.json"), json + "\n")?;
    Ok(())
}

/// Recomputes cell summaries from a CSV written by [`write_csv`].
pub fn resummarize<R: Read>(input: R) -> csv::Result<Vec<CellSummary>> {
    Ok(summarize(&read_csv(input)?))
}

/// Fixed-width text table of the cells.
pub fn format_cells(cells: &[CellSummary]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4e}"));
    let mut s = format!(
        "{:>6}  {:<9}  {:>4}  {:>11}  {:>11}  {:>11}  {:>11}  {:>9}\n",
        "load", "estimator", "reps", "mean", "variance", "mean S2", "mean beta", "reduction"
    );
    for c in cells {
        s += &format!(
            "{:>6}  {:<9}  {:>4}  {:>11}  {:>11}  {:>11}  {:>11}  {:>9}",
            c.load,
            c.estimator.label(),
            c.reps,
            opt(c.mean),
            opt(c.variance),
            opt(c.mean_s2),
            opt(c.mean_beta),
            c.reduction.map_or_else(|| "-".to_string(), |x| format!("{x:.3}")),
        );
        if let Some(n) = &c.note {
            s += &format!("  [{n}]");
        }
        if let Some(e) = &c.error {
            s += &format!("  error: {e}");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use netsim_core::EstimatorKind;

    fn row(load: f64, estimator: EstimatorKind, rep: usize, point: f64) -> RepRow {
        RepRow {
            load,
            estimator,
            rep,
            point,
            beta: 0.1 + point / 3.0,
            s2: point * 1e-3 / 7.0,
            ci_lo: point - 0.1,
            ci_hi: point + 0.1,
        }
    }

    #[test]
    fn empty_report_writes_header_only() {
        let mut buf = Vec::new();
        write_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "load,estimator,rep,point,beta,s2,ci_lo,ci_hi\n");
        assert!(read_csv(&b"load,estimator,rep,point,beta,s2,ci_lo,ci_hi\n"[..]).unwrap().is_empty());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut rows = Vec::new();
        for rep in 0..5 {
            let x = 0.48 + rep as f64 / 997.0;
            rows.push(row(0.2, EstimatorKind::Standard, rep, x));
            rows.push(row(0.2, EstimatorKind::Quadratic, rep, x / 3.0 + 1e-17));
            rows.push(row(0.9, EstimatorKind::Standard, rep, 14.0 + x));
        }
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("load,estimator,rep,point,beta,s2,ci_lo,ci_hi\n0.2,standard,0,"));
        assert_eq!(read_csv(&buf[..]).unwrap(), rows);
        assert_eq!(resummarize(&buf[..]).unwrap(), summarize(&rows));
    }
}
