//! Recompute Avg. and ΔMTL for the bundled published result rows and diff them
//! against the printed values.

use serde::Deserialize;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::metrics::mtl::{average_score, delta_mtl, round_half_up};

pub const BUNDLED_TABLES: &str = include_str!("../../data/published_tables.json");

/// Allowed absolute difference after rounding to the printed precision.
pub const TABLE_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, Copy, Deserialize)]
pub struct Baseline {
    pub det: f64,
    pub sem: f64,
    pub driv: f64,
    pub lane: f64,
}

impl Baseline {
    pub fn vector(&self) -> [f64; 4] {
        [self.det, self.sem, self.driv, self.lane]
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct PublishedRow {
    pub table: String,
    pub setting: String,
    pub method: String,
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub sem: f64,
    pub driv: f64,
    pub lane: f64,
    pub avg: f64,
    pub delta: f64,
}

impl PublishedRow {
    pub fn metrics(&self) -> [f64; 4] {
        [self.map, self.sem, self.driv, self.lane]
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct PublishedTables {
    pub baselines: BTreeMap<String, Baseline>,
    pub rows: Vec<PublishedRow>,
}

impl PublishedTables {
    pub fn bundled() -> Self {
        serde_json::from_str(BUNDLED_TABLES).expect("bundled tables parse")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone)]
pub struct RowCheck {
    pub row: PublishedRow,
    pub avg: f64,
    pub delta: f64,
    pub avg_ok: bool,
    pub delta_ok: bool,
}

impl RowCheck {
    pub fn ok(&self) -> bool {
        self.avg_ok && self.delta_ok
    }

    pub fn line(&self) -> String {
        format!(
            "[{}] {:<9} {:<17} {:<20} Avg {:>5.1} (printed {:>5.1})  dMTL {:>+7.2} (printed {:>+7.2})",
            if self.ok() { "PASS" } else { "FAIL" },
            self.row.table,
            self.row.setting,
            self.row.method,
            round_half_up(self.avg, 1),
            self.row.avg,
            round_half_up(self.delta, 2),
            self.row.delta,
        )
    }
}

/// Check every row. Avg. is compared at its printed one-decimal precision and
/// ΔMTL at two decimals, both within [`TABLE_TOLERANCE`].
pub fn check_tables(tables: &PublishedTables) -> Result<Vec<RowCheck>> {
    tables
        .rows
        .iter()
        .map(|row| {
            let base = tables.baselines.get(&row.setting).ok_or_else(|| {
                Error::Config(format!("no baseline for setting `{}`", row.setting))
            })?;
            let m = row.metrics();
            let avg = average_score(&m);
            let delta = delta_mtl(&m, &base.vector())?;
            Ok(RowCheck {
                avg_ok: (round_half_up(avg, 1) - row.avg).abs() <= TABLE_TOLERANCE + 1e-9,
                delta_ok: (round_half_up(delta, 2) - row.delta).abs() <= TABLE_TOLERANCE + 1e-9,
                row: row.clone(),
                avg,
                delta,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn find<'a>(checks: &'a [RowCheck], setting: &str, method: &str) -> &'a RowCheck {
        checks
            .iter()
            .find(|c| c.row.setting == setting && c.row.method == method)
            .unwrap()
    }

    #[test]
    fn anchors() {
        let checks = check_tables(&PublishedTables::bundled()).unwrap();
        assert_eq!(
            round_half_up(find(&checks, "full", "VE-Prompt").delta, 2),
            1.52
        );
        assert_eq!(
            round_half_up(find(&checks, "disjoint-normal", "VE-Prompt").delta, 2),
            3.95
        );
        assert_eq!(
            round_half_up(find(&checks, "disjoint-balance", "VE-Prompt").delta, 2),
            4.72
        );
        assert_eq!(
            round_half_up(find(&checks, "disjoint-normal", "VE-Prompt").avg, 1),
            52.0
        );
        assert_eq!(
            round_half_up(find(&checks, "full", "GradNorm").delta, 2),
            -46.24
        );
    }

    #[test]
    fn row_count() {
        assert_eq!(PublishedTables::bundled().rows.len(), 38);
    }
}
