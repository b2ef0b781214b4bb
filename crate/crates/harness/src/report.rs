//! Serializable evaluation reports and their text renderings.
//!
//! Wall-clock timing is carried alongside the results for display but is
//! excluded from serialization and equality, so the same protocol always
//! produces byte-identical CSV and JSON no matter the machine or thread
//! count.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::HarnessError;

/// Results for one rotation-magnitude column of the protocol.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportCell {
    /// Upper bound of the sampled Euler angles, degrees.
    pub max_angle_deg: f64,
    /// Fraction of instances within 5 degrees and 0.2 translation.
    pub recall: f64,
    pub median_rot_err_deg: f64,
    pub median_trans_err: f64,
    pub instances: usize,
    /// Measured on this run only; never serialized or compared.
    #[serde(skip)]
    pub seconds_per_instance: f64,
}

impl PartialEq for ReportCell {
    fn eq(&self, other: &ReportCell) -> bool {
        self.max_angle_deg == other.max_angle_deg
            && self.recall == other.recall
            && self.median_rot_err_deg == other.median_rot_err_deg
            && self.median_trans_err == other.median_trans_err
            && self.instances == other.instances
    }
}

/// A full evaluation: the protocol identity plus one cell per angle bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub scenario: String,
    pub stage: String,
    pub points_per_cloud: usize,
    pub seed: u64,
    pub cells: Vec<ReportCell>,
}

/// Output encodings understood by the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Table,
}

impl FromStr for ReportFormat {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<ReportFormat, HarnessError> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "table" => Ok(ReportFormat::Table),
            other => Err(HarnessError::Config(format!("unknown report format '{other}'"))),
        }
    }
}

impl RecallReport {
    pub fn to_json(&self) -> Result<String, HarnessError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<RecallReport, HarnessError> {
        Ok(serde_json::from_str(text)?)
    }

    fn to_csv(&self) -> String {
        let mut out = String::from(
            "scenario,stage,points,seed,max_angle_deg,recall,median_rot_err_deg,median_trans_err,instances\n",
        );
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                self.scenario,
                self.stage,
                self.points_per_cloud,
                self.seed,
                c.max_angle_deg,
                c.recall,
                c.median_rot_err_deg,
                c.median_trans_err,
                c.instances
            );
        }
        out
    }

    /// One column per angle range, labeled `[0,max]`, with one row per
    /// metric.
    fn to_table(&self) -> String {
        const LABEL: usize = 12;
        const COL: usize = 12;
        let mut out = format!(
            "scenario={} stage={} points={} seed={}\n",
            self.scenario, self.stage, self.points_per_cloud, self.seed
        );
        let mut header = format!("{:<LABEL$}", "");
        for c in &self.cells {
            let _ = write!(header, " {:>COL$}", format!("[0,{}]", c.max_angle_deg));
        }
        out.push_str(header.trim_end());
        out.push('\n');
        let rows: [(&str, Box<dyn Fn(&ReportCell) -> String>); 4] = [
            ("recall", Box::new(|c| format!("{:.4}", c.recall))),
            ("med_rot_deg", Box::new(|c| format!("{:.3e}", c.median_rot_err_deg))),
            ("med_trans", Box::new(|c| format!("{:.3e}", c.median_trans_err))),
            ("instances", Box::new(|c| format!("{}", c.instances))),
        ];
        for (label, render) in rows {
            let mut line = format!("{label:<LABEL$}");
            for c in &self.cells {
                let _ = write!(line, " {:>COL$}", render(c));
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }

    /// Renders to the requested encoding. All encodings are deterministic
    /// functions of the results alone.
    pub fn render(&self, format: ReportFormat) -> Result<String, HarnessError> {
        match format {
            ReportFormat::Csv => Ok(self.to_csv()),
            ReportFormat::Json => self.to_json(),
            ReportFormat::Table => Ok(self.to_table()),
        }
    }

    /// One human-facing timing line for stderr; the only place the measured
    /// wall clock appears.
    pub fn timing_summary(&self) -> String {
        let parts: Vec<String> = self
            .cells
            .iter()
            .map(|c| format!("{}deg {:.1}ms", c.max_angle_deg, c.seconds_per_instance * 1e3))
            .collect();
        format!("per-instance wall clock: {}", parts.join(", "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RecallReport {
        RecallReport {
            scenario: "clean".into(),
            stage: "coarse".into(),
            points_per_cloud: 128,
            seed: 7,
            cells: vec![
                ReportCell {
                    max_angle_deg: 45.0,
                    recall: 1.0,
                    median_rot_err_deg: 1.25e-6,
                    median_trans_err: 3.0e-8,
                    instances: 200,
                    seconds_per_instance: 0.0123,
                },
                ReportCell {
                    max_angle_deg: 180.0,
                    recall: 0.995,
                    median_rot_err_deg: 2.5e-6,
                    median_trans_err: 4.0e-8,
                    instances: 200,
                    seconds_per_instance: 0.0456,
                },
            ],
        }
    }

    #[test]
    fn json_round_trip_drops_timing_but_keeps_results() {
        let report = sample();
        let text = report.to_json().unwrap();
        assert!(!text.contains("seconds_per_instance"));
        let back = RecallReport::from_json(&text).unwrap();
        assert_eq!(back, report, "equality ignores the timing field");
        assert_eq!(back.cells[0].seconds_per_instance, 0.0);
    }

    #[test]
    fn timing_differences_do_not_affect_equality_or_rendering() {
        let a = sample();
        let mut b = sample();
        b.cells[0].seconds_per_instance = 99.0;
        assert_eq!(a, b);
        for format in [ReportFormat::Csv, ReportFormat::Json, ReportFormat::Table] {
            assert_eq!(a.render(format).unwrap(), b.render(format).unwrap());
        }
    }

    #[test]
    fn csv_has_a_header_and_one_row_per_cell() {
        let text = sample().render(ReportFormat::Csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("scenario,stage,points,seed,max_angle_deg"));
        assert!(lines[1].starts_with("clean,coarse,128,7,45,1,"));
        assert!(lines[2].starts_with("clean,coarse,128,7,180,0.995,"));
    }

    #[test]
    fn table_has_one_labeled_column_per_angle_range() {
        let text = sample().render(ReportFormat::Table).unwrap();
        for needle in [
            "scenario=clean",
            "stage=coarse",
            "points=128",
            "seed=7",
            "[0,45]",
            "[0,180]",
            "recall",
            "med_rot_deg",
            "med_trans",
            "instances",
        ] {
            assert!(text.contains(needle), "missing '{needle}' in:\n{text}");
        }
        let recall_row = text.lines().find(|l| l.starts_with("recall")).unwrap();
        assert!(recall_row.contains("1.0000") && recall_row.contains("0.9950"));
    }

    #[test]
    fn empty_reports_render_as_headers_only() {
        let report = RecallReport {
            scenario: "clean".into(),
            stage: "coarse".into(),
            points_per_cloud: 64,
            seed: 0,
            cells: vec![],
        };
        let csv = report.render(ReportFormat::Csv).unwrap();
        assert_eq!(csv.lines().count(), 1, "header line only:\n{csv}");
        let table = report.render(ReportFormat::Table).unwrap();
        assert!(table.contains("scenario=clean"));
        let back = RecallReport::from_json(&report.to_json().unwrap()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn format_names_parse() {
        assert_eq!("csv".parse::<ReportFormat>().unwrap(), ReportFormat::Csv);
        assert_eq!("json".parse::<ReportFormat>().unwrap(), ReportFormat::Json);
        assert_eq!("table".parse::<ReportFormat>().unwrap(), ReportFormat::Table);
        assert!("xml".parse::<ReportFormat>().is_err());
    }
}
