//! Evaluation reports: `results.csv` (one row per run) and `report.md`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::mtl::{average_score, delta_mtl, round_half_up, MetricVector};

pub const CSV_HEADER: [&str; 10] = [
    "run",
    "mAP",
    "AP50",
    "AP75",
    "mIoU (SS)",
    "mIoU (DA)",
    "IoU (LD)",
    "Avg.",
    "dMTL(%)",
    "config_hash",
];

/// Placeholder written where no baseline was supplied.
pub const NO_BASELINE: &str = "n/a";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run: String,
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub miou_sem: f64,
    pub miou_driv: f64,
    pub iou_lane: f64,
    pub avg: f64,
    pub delta_mtl: Option<f64>,
    pub baseline: Option<MetricVector>,
    pub config_hash: String,
}

impl EvalReport {
    pub fn new(
        run: &str,
        map: (f64, f64, f64),
        miou_sem: f64,
        miou_driv: f64,
        iou_lane: f64,
        baseline: Option<MetricVector>,
        config_hash: &str,
    ) -> Result<Self> {
        let v = MetricVector::new(map.0, miou_sem, miou_driv, iou_lane);
        v.validate()?;
        let delta = baseline.map(|b| delta_mtl(&v.0, &b.0)).transpose()?;
        Ok(EvalReport {
            run: run.to_string(),
            map: map.0,
            ap50: map.1,
            ap75: map.2,
            miou_sem,
            miou_driv,
            iou_lane,
            avg: average_score(&v.0),
            delta_mtl: delta,
            baseline,
            config_hash: config_hash.to_string(),
        })
    }

    pub fn metrics(&self) -> MetricVector {
        MetricVector::new(self.map, self.miou_sem, self.miou_driv, self.iou_lane)
    }

    fn csv_row(&self) -> Vec<String> {
        let f1 = |x: f64| format!("{:.1}", round_half_up(x, 1));
        vec![
            self.run.clone(),
            f1(self.map),
            f1(self.ap50),
            f1(self.ap75),
            f1(self.miou_sem),
            f1(self.miou_driv),
            f1(self.iou_lane),
            f1(self.avg),
            self.delta_mtl
                .map(|d| format!("{:+.2}", round_half_up(d, 2)))
                .unwrap_or_else(|| NO_BASELINE.to_string()),
            self.config_hash.clone(),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
    Both,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            "both" => Ok(ReportFormat::Both),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

pub fn to_csv(reports: &[EvalReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)
        .map_err(|e| Error::Invalid(e.to_string()))?;
    for r in reports {
        w.write_record(r.csv_row())
            .map_err(|e| Error::Invalid(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Parse a CSV written by [`to_csv`]. Values come back at stored precision
/// and `baseline` is not stored.
pub fn from_csv(text: &str) -> Result<Vec<EvalReport>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            line: i + 2,
            msg: e.to_string(),
        })?;
        let num = |j: usize| -> Result<f64> {
            rec.get(j)
                .unwrap_or_default()
                .parse::<f64>()
                .map_err(|e| Error::Parse {
                    line: i + 2,
                    msg: format!("column {}: {e}", CSV_HEADER[j]),
                })
        };
        let delta = match rec.get(8) {
            Some(NO_BASELINE) => None,
            _ => Some(num(8)?),
        };
        out.push(EvalReport {
            run: rec.get(0).unwrap_or_default().to_string(),
            map: num(1)?,
            ap50: num(2)?,
            ap75: num(3)?,
            miou_sem: num(4)?,
            miou_driv: num(5)?,
            iou_lane: num(6)?,
            avg: num(7)?,
            delta_mtl: delta,
            baseline: None,
            config_hash: rec.get(9).unwrap_or_default().to_string(),
        });
    }
    Ok(out)
}

pub fn to_markdown(reports: &[EvalReport]) -> String {
    let mut s = String::from("| ");
    s.push_str(&CSV_HEADER[..9].join(" | "));
    s.push_str(" |\n|");
    s.push_str(&"---|".repeat(9));
    s.push('\n');
    for r in reports {
        let row = r.csv_row();
        s.push_str("| ");
        s.push_str(&row[..9].join(" | "));
        s.push_str(" |\n");
    }
    if let Some(b) = reports.iter().find_map(|r| r.baseline) {
        s.push_str(&format!(
            "\nBaseline (det, sem, driv, lane): {:.1}, {:.1}, {:.1}, {:.1}\n",
            b.0[0], b.0[1], b.0[2], b.0[3]
        ));
    }
    s
}

/// Write `results.csv` and/or `report.md` into `dir`.
pub fn emit_report(reports: &[EvalReport], dir: &Path, format: ReportFormat) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    if matches!(format, ReportFormat::Csv | ReportFormat::Both) {
        std::fs::write(dir.join("results.csv"), to_csv(reports)?)?;
    }
    if matches!(format, ReportFormat::Markdown | ReportFormat::Both) {
        std::fs::write(dir.join("report.md"), to_markdown(reports))?;
    }
    Ok(())
}
