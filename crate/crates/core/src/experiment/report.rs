use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::sde::Band;

/// Metrics at one grid time. `None` marks a quantity with an empty index set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub t: f64,
    pub coverage: Option<f64>,
    pub coverage_se: Option<f64>,
    pub avg_bias: Option<f64>,
    pub true_zero_prop: Option<f64>,
    pub false_zero_prop: Option<f64>,
    pub excess_risk_of_average: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepTrajectory {
    pub rep: usize,
    /// `[grid][coordinate]`.
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DivergenceCounts {
    pub reps_total: usize,
    pub reps_diverged: usize,
    pub band_paths_total: usize,
    pub band_paths_diverged: usize,
}

/// Measured against predicted long-run RDA bias on one active coordinate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RdaBiasEntry {
    pub coord: usize,
    pub w_star: f64,
    pub sigma_sq: f64,
    /// `c0/σ²`, or `|w*|` when the coordinate is thresholded to 0.
    pub predicted: f64,
    /// Long-run mean minus `w*`.
    pub signed_bias: f64,
    pub measured: f64,
    pub rel_error: Option<f64>,
    /// `|w*| ≤ c0/σ²`: the limit is 0 rather than a shifted value.
    pub thresholded: bool,
    pub direction_ok: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Summary {
    pub n_active: usize,
    pub n_inactive: usize,
    pub terminal_bias: Option<f64>,
    pub terminal_coverage: Option<f64>,
    pub mean_coverage: Option<f64>,
    pub coverage_excluding_sign_changes: Option<f64>,
    pub terminal_true_zero_prop: Option<f64>,
    pub terminal_false_zero_prop: Option<f64>,
    pub terminal_excess_risk_of_average: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub config: ExperimentConfig,
    pub version: String,
    pub grid: Vec<f64>,
    /// True parameter (`w*` or stacked `U*`).
    pub truth: Vec<f64>,
    /// Mean path `[grid][coordinate]`.
    pub mean_path: Vec<Vec<f64>>,
    pub metrics: Vec<MetricRow>,
    pub band: Option<Band>,
    pub trajectories: Vec<RepTrajectory>,
    pub divergence: DivergenceCounts,
    pub summary: Summary,
    pub rda_bias: Option<Vec<RdaBiasEntry>>,
}

#[derive(Serialize)]
struct JsonReport<'a> {
    version: &'a str,
    config: &'a ExperimentConfig,
    divergence: &'a DivergenceCounts,
    summary: &'a Summary,
    rda_bias: &'a Option<Vec<RdaBiasEntry>>,
    truth: &'a [f64],
    excess_risk_of_average: Vec<[f64; 2]>,
}

impl Report {
    /// Metric column by name, aligned with `grid`.
    pub fn column(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let pick: fn(&MetricRow) -> Option<f64> = match name {
            "coverage" => |r| r.coverage,
            "coverage_se" => |r| r.coverage_se,
            "avg_bias" => |r| r.avg_bias,
            "true_zero_prop" => |r| r.true_zero_prop,
            "false_zero_prop" => |r| r.false_zero_prop,
            "excess_risk_of_average" => |r| r.excess_risk_of_average,
            _ => return None,
        };
        Some(self.metrics.iter().map(pick).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        let risk = self
            .metrics
            .iter()
            .filter_map(|r| r.excess_risk_of_average.map(|v| [r.t, v]))
            .collect();
        let doc = JsonReport {
            version: &self.version,
            config: &self.config,
            divergence: &self.divergence,
            summary: &self.summary,
            rda_bias: &self.rda_bias,
            truth: &self.truth,
            excess_risk_of_average: risk,
        };
        let mut s = serde_json::to_string_pretty(&doc)?;
        s.push('\n');
        Ok(s)
    }
}

/// `%.9g`-style formatting; non-finite values print as `nan`, `inf`, `-inf`.
pub fn format_sig(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let (mant, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if !(-4..9).contains(&exp) {
        let mant = trim_zeros(mant);
        format!("{mant}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    } else {
        trim_zeros(&format!("{:.*}", (8 - exp) as usize, x)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn opt(x: Option<f64>) -> String {
    format_sig(x.unwrap_or(f64::NAN))
}

pub const TRAJECTORIES_HEADER: &str = "rep,t,coord,w";
pub const BAND_HEADER: &str = "t,coord,mean,lower,upper";
pub const METRICS_HEADER: &str = "t,coverage,coverage_se,avg_bias,true_zero_prop,false_zero_prop";

fn write_file(dir: &Path, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    body(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))
}

/// Writes `trajectories.csv`, `band.csv`, `metrics.csv` and `report.json` into `dir`.
pub fn emit_report(report: &Report, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(dir, "trajectories.csv", |w| {
        writeln!(w, "{TRAJECTORIES_HEADER}")?;
        for tr in &report.trajectories {
            for (t, row) in report.grid.iter().zip(&tr.values) {
                let t = format_sig(*t);
                for (j, x) in row.iter().enumerate() {
                    writeln!(w, "{},{t},{j},{}", tr.rep, format_sig(*x))?;
                }
            }
        }
        Ok(())
    })?;
    write_file(dir, "band.csv", |w| {
        writeln!(w, "{BAND_HEADER}")?;
        if let Some(b) = &report.band {
            for (m, t) in b.grid.iter().enumerate() {
                let t = format_sig(*t);
                for j in 0..b.center[m].len() {
                    writeln!(
                        w,
                        "{t},{j},{},{},{}",
                        format_sig(b.center[m][j]),
                        format_sig(b.lower[m][j]),
                        format_sig(b.upper[m][j])
                    )?;
                }
            }
        }
        Ok(())
    })?;
    write_file(dir, "metrics.csv", |w| {
        writeln!(w, "{METRICS_HEADER}")?;
        for r in &report.metrics {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                format_sig(r.t),
                opt(r.coverage),
                opt(r.coverage_se),
                opt(r.avg_bias),
                opt(r.true_zero_prop),
                opt(r.false_zero_prop)
            )?;
        }
        Ok(())
    })?;
    let json = report.to_json()?;
    write_file(dir, "report.json", |w| w.write_all(json.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig_formatting() {
        assert_eq!(format_sig(0.0), "0");
        assert_eq!(format_sig(1.0), "1");
        assert_eq!(format_sig(-0.5), "-0.5");
        assert_eq!(format_sig(0.1), "0.1");
        assert_eq!(format_sig(1.0 / 3.0), "0.333333333");
        assert_eq!(format_sig(123456789.4), "123456789");
        assert_eq!(format_sig(1234567890.0), "1.23456789e+09");
        assert_eq!(format_sig(9.9999999999), "10");
        assert_eq!(format_sig(1.5e-7), "1.5e-07");
        assert_eq!(format_sig(2e-5), "2e-05");
        assert_eq!(format_sig(2e-4), "0.0002");
        assert_eq!(format_sig(1e-4), "0.0001");
        assert_eq!(format_sig(f64::NAN), "nan");
        assert_eq!(format_sig(f64::NEG_INFINITY), "-inf");
    }

    #[test]
    fn sig_formatting_keeps_nine_digits() {
        let mut x = 0.000_123_456_789_123;
        for _ in 0..20 {
            let back: f64 = format_sig(x).parse().unwrap();
            assert!(((back - x) / x).abs() <= 5e-9, "{x} -> {}", format_sig(x));
            x *= -7.3;
        }
    }
}
