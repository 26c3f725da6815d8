//! Market-data ingestion: pillar grids, curve/spread panels, constituent
//! histories, date alignment, weekly sampling, and synthetic panel generation.
//!
//! Panels are indexed by business date and time-to-maturity pillar. Rate
//! panels must be dense; spread panels may carry structurally missing cells
//! (sparse short-end vertices).

use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{self, SimConfig, SimInit};
use crate::volarch::BlockVolSpec;

#[derive(Debug, Error)]
pub enum MarketDataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("no data rows")]
    NoDataRows,
    #[error("row {row}: {msg}")]
    BadRow { row: usize, msg: String },
    #[error("duplicate date {0}")]
    DuplicateDate(NaiveDate),
    #[error("dates not strictly increasing at {0}")]
    NonMonotoneDates(NaiveDate),
    #[error("missing cell in rate panel at {date} tenor {tenor}")]
    MissingRateCell { date: NaiveDate, tenor: f64 },
    #[error("pillar grid invalid: {0}")]
    InvalidGrid(String),
    #[error("need >=2 panels to align")]
    NeedTwoPanels,
    #[error("empty date intersection across panels")]
    EmptyIntersection,
    #[error("panel constraint violated: {0}")]
    Invalid(String),
    #[error("synthetic history of {0} weeks is too short for calibration round-trip (need >= 30)")]
    TooShort(usize),
    #[error("simulation failed: {0}")]
    Sim(#[from] crate::sim::SimError),
}

/// Time-to-maturity pillars in years, strictly increasing and positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PillarGrid {
    tenors: Vec<f64>,
}

impl PillarGrid {
    pub fn new(tenors: Vec<f64>) -> Result<Self, MarketDataError> {
        if tenors.is_empty() {
            return Err(MarketDataError::InvalidGrid("no tenors".into()));
        }
        for (i, &t) in tenors.iter().enumerate() {
            if !t.is_finite() || t <= 0.0 {
                return Err(MarketDataError::InvalidGrid(format!(
                    "tenor {t} at position {i} must be positive and finite"
                )));
            }
            if i > 0 && t <= tenors[i - 1] {
                return Err(MarketDataError::InvalidGrid(format!(
                    "tenors must be strictly increasing; {t} follows {}",
                    tenors[i - 1]
                )));
            }
        }
        Ok(Self { tenors })
    }

    /// The paper-standard rate pillars {0.25, 0.5, 1, 2, 3, 5, 7, 10} years.
    pub fn standard_rate_pillars() -> Self {
        Self::new(vec![0.25, 0.5, 1.0, 2.0, 3.0, 5.0, 7.0, 10.0]).expect("static grid")
    }

    /// The spread vertices {1, 2, 3, 5} years.
    pub fn standard_spread_vertices() -> Self {
        Self::new(vec![1.0, 2.0, 3.0, 5.0]).expect("static grid")
    }

    pub fn tenors(&self) -> &[f64] {
        &self.tenors
    }

    pub fn len(&self) -> usize {
        self.tenors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tenors.is_empty()
    }

    pub fn max_tenor(&self) -> f64 {
        *self.tenors.last().expect("non-empty grid")
    }

    pub fn min_spacing(&self) -> f64 {
        self.tenors
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }
}

impl TryFrom<Vec<f64>> for PillarGrid {
    type Error = MarketDataError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<PillarGrid> for Vec<f64> {
    fn from(g: PillarGrid) -> Self {
        g.tenors
    }
}

/// Which series a panel carries. Rates are decimal p.a. continuous
/// compounding; spreads are decimal p.a. over the respective base curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesKind {
    NominalFwd,
    RealFwd,
    CdiSpread,
    IpcaSpread,
}

impl SeriesKind {
    /// Spread panels may carry structurally missing cells; rate panels reject them.
    pub fn allows_missing(self) -> bool {
        matches!(self, SeriesKind::CdiSpread | SeriesKind::IpcaSpread)
    }
}

impl std::fmt::Display for SeriesKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SeriesKind::NominalFwd => "nominal_fwd",
            SeriesKind::RealFwd => "real_fwd",
            SeriesKind::CdiSpread => "cdi_spread",
            SeriesKind::IpcaSpread => "ipca_spread",
        };
        f.write_str(s)
    }
}

/// Aligned date x pillar history of one series.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePanel {
    dates: Vec<NaiveDate>,
    grid: PillarGrid,
    /// Row-major dates x tenors; `None` marks a structurally missing spread cell.
    values: Vec<Option<f64>>,
    kind: SeriesKind,
}

impl CurvePanel {
    pub fn new(
        dates: Vec<NaiveDate>,
        grid: PillarGrid,
        values: Vec<Option<f64>>,
        kind: SeriesKind,
    ) -> Result<Self, MarketDataError> {
        if dates.is_empty() {
            return Err(MarketDataError::NoDataRows);
        }
        if values.len() != dates.len() * grid.len() {
            return Err(MarketDataError::Invalid(format!(
                "values length {} != dates {} x tenors {}",
                values.len(),
                dates.len(),
                grid.len()
            )));
        }
        for w in dates.windows(2) {
            if w[1] == w[0] {
                return Err(MarketDataError::DuplicateDate(w[1]));
            }
            if w[1] < w[0] {
                return Err(MarketDataError::NonMonotoneDates(w[1]));
            }
        }
        if !kind.allows_missing() {
            for (r, date) in dates.iter().enumerate() {
                for (c, &tenor) in grid.tenors().iter().enumerate() {
                    if values[r * grid.len() + c].is_none() {
                        return Err(MarketDataError::MissingRateCell { date: *date, tenor });
                    }
                }
            }
        }
        Ok(Self {
            dates,
            grid,
            values,
            kind,
        })
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn grid(&self) -> &PillarGrid {
        &self.grid
    }

    pub fn kind(&self) -> SeriesKind {
        self.kind
    }

    pub fn n_rows(&self) -> usize {
        self.dates.len()
    }

    pub fn value(&self, row: usize, col: usize) -> Option<f64> {
        self.values[row * self.grid.len() + col]
    }

    pub fn row(&self, row: usize) -> &[Option<f64>] {
        let n = self.grid.len();
        &self.values[row * n..(row + 1) * n]
    }

    /// Restrict the panel to the given dates (must be a subset, in order).
    fn restrict_to(&self, dates: &[NaiveDate]) -> Self {
        let n = self.grid.len();
        let mut values = Vec::with_capacity(dates.len() * n);
        let mut rows = Vec::with_capacity(dates.len());
        let mut i = 0;
        for &d in dates {
            while self.dates[i] != d {
                i += 1;
            }
            rows.push(d);
            values.extend_from_slice(self.row(i));
        }
        Self {
            dates: rows,
            grid: self.grid.clone(),
            values,
            kind: self.kind,
        }
    }

    /// Restrict to rows with `from <= date <= to`.
    pub fn window(&self, from: NaiveDate, to: NaiveDate) -> Result<Self, MarketDataError> {
        let dates: Vec<NaiveDate> = self
            .dates
            .iter()
            .copied()
            .filter(|d| *d >= from && *d <= to)
            .collect();
        if dates.is_empty() {
            return Err(MarketDataError::NoDataRows);
        }
        Ok(self.restrict_to(&dates))
    }

    /// Drop pillars, keeping those in `keep` (by tenor value).
    pub fn select_pillars(&self, keep: &[f64]) -> Result<Self, MarketDataError> {
        let idx: Vec<usize> = self
            .grid
            .tenors()
            .iter()
            .enumerate()
            .filter(|(_, t)| keep.iter().any(|k| (*k - **t).abs() < 1e-12))
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            return Err(MarketDataError::Invalid("no pillars selected".into()));
        }
        let grid = PillarGrid::new(idx.iter().map(|&i| self.grid.tenors()[i]).collect())?;
        let mut values = Vec::with_capacity(self.dates.len() * idx.len());
        for r in 0..self.dates.len() {
            for &c in &idx {
                values.push(self.value(r, c));
            }
        }
        Self::new(self.dates.clone(), grid, values, self.kind)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), MarketDataError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["date".to_string()];
        header.extend(self.grid.tenors().iter().map(|t| format!("{t}")));
        w.write_record(&header)?;
        for (r, d) in self.dates.iter().enumerate() {
            let mut rec = vec![d.format("%Y-%m-%d").to_string()];
            for c in 0..self.grid.len() {
                rec.push(match self.value(r, c) {
                    Some(v) => format!("{v:.12e}"),
                    None => String::new(),
                });
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Load a curve/spread panel from CSV with header `date,<tenor>,...` where
/// tenor columns are decimal years, strictly increasing. Dates are ISO-8601.
/// Empty cells are missing markers, permitted only for spread kinds.
pub fn load_curve_panel(path: &Path, kind: SeriesKind) -> Result<CurvePanel, MarketDataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_path(path)?;
    let header = rdr.headers()?.clone();
    if header.len() < 2 || header.get(0) != Some("date") {
        return Err(MarketDataError::MalformedHeader(
            "expected `date,<tenor>,...`".into(),
        ));
    }
    let mut tenors = Vec::with_capacity(header.len() - 1);
    for fld in header.iter().skip(1) {
        let t: f64 = fld.trim().parse().map_err(|_| {
            MarketDataError::MalformedHeader(format!("tenor column `{fld}` is not a number"))
        })?;
        tenors.push(t);
    }
    let grid = PillarGrid::new(tenors)
        .map_err(|e| MarketDataError::MalformedHeader(format!("tenor columns: {e}")))?;

    let mut dates = Vec::new();
    let mut values: Vec<Option<f64>> = Vec::new();
    for (row_idx, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != grid.len() + 1 {
            return Err(MarketDataError::BadRow {
                row: row_idx + 1,
                msg: format!("expected {} fields, got {}", grid.len() + 1, rec.len()),
            });
        }
        let date = NaiveDate::parse_from_str(rec.get(0).unwrap_or(""), "%Y-%m-%d").map_err(
            |_| MarketDataError::BadRow {
                row: row_idx + 1,
                msg: format!("unparseable date `{}`", rec.get(0).unwrap_or("")),
            },
        )?;
        dates.push(date);
        for (c, fld) in rec.iter().skip(1).enumerate() {
            let fld = fld.trim();
            if fld.is_empty() {
                values.push(None);
            } else {
                let v: f64 = fld.parse().map_err(|_| MarketDataError::BadRow {
                    row: row_idx + 1,
                    msg: format!("unparseable value `{fld}` in tenor column {c}"),
                })?;
                values.push(Some(v));
            }
        }
    }
    if dates.is_empty() {
        return Err(MarketDataError::NoDataRows);
    }
    CurvePanel::new(dates, grid, values, kind)
}

/// Restrict all panels to their common business dates, preserving order.
pub fn align_panels(panels: &[CurvePanel]) -> Result<Vec<CurvePanel>, MarketDataError> {
    if panels.len() < 2 {
        return Err(MarketDataError::NeedTwoPanels);
    }
    let mut common: Vec<NaiveDate> = panels[0].dates().to_vec();
    for p in &panels[1..] {
        let set: std::collections::HashSet<NaiveDate> = p.dates().iter().copied().collect();
        common.retain(|d| set.contains(d));
    }
    if common.is_empty() {
        return Err(MarketDataError::EmptyIntersection);
    }
    Ok(panels.iter().map(|p| p.restrict_to(&common)).collect())
}

/// Keep the last observation on or before each weekly anchor (default Friday).
pub fn to_weekly(panel: &CurvePanel, anchor: Weekday) -> CurvePanel {
    let anchor_num = anchor.num_days_from_monday() as i64;
    // Anchor date of the week a given date belongs to: the next `anchor`
    // weekday on or after it.
    let anchor_of = |d: NaiveDate| {
        let wd = d.weekday().num_days_from_monday() as i64;
        d + Duration::days((anchor_num - wd).rem_euclid(7))
    };
    let mut keep: Vec<NaiveDate> = Vec::new();
    let mut current_anchor: Option<NaiveDate> = None;
    for &d in panel.dates() {
        let a = anchor_of(d);
        match current_anchor {
            Some(ca) if ca == a => {
                *keep.last_mut().expect("non-empty") = d;
            }
            _ => {
                keep.push(d);
                current_anchor = Some(a);
            }
        }
    }
    panel.restrict_to(&keep)
}

/// Constituent family within the corporate universe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Family {
    Cdi,
    Ipca,
}

impl std::str::FromStr for Family {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "CDI" => Ok(Family::Cdi),
            "IPCA" => Ok(Family::Ipca),
            other => Err(format!("unknown family `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstituentRow {
    pub date: NaiveDate,
    pub family: Family,
    pub issuer_id: String,
    pub ticker: String,
    /// Quoted spread, decimal p.a.
    pub spread: f64,
    /// Modified duration, years.
    pub duration: f64,
    pub weight: f64,
}

/// Per-date constituent records for both families.
#[derive(Debug, Clone, Default)]
pub struct ConstituentPanel {
    rows: Vec<ConstituentRow>,
}

impl ConstituentPanel {
    pub fn new(rows: Vec<ConstituentRow>) -> Result<Self, MarketDataError> {
        let mut seen = std::collections::HashSet::new();
        for (i, r) in rows.iter().enumerate() {
            if r.weight < 0.0 {
                return Err(MarketDataError::BadRow {
                    row: i,
                    msg: format!("negative weight {}", r.weight),
                });
            }
            if r.duration <= 0.0 {
                return Err(MarketDataError::BadRow {
                    row: i,
                    msg: format!("non-positive duration {}", r.duration),
                });
            }
            if !seen.insert((r.date, r.family, r.ticker.clone())) {
                return Err(MarketDataError::BadRow {
                    row: i,
                    msg: format!(
                        "duplicate (date, family, ticker) = ({}, {:?}, {})",
                        r.date, r.family, r.ticker
                    ),
                });
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[ConstituentRow] {
        &self.rows
    }
}

/// CSV schema: `date,family,issuer,ticker,spread,duration,weight`.
pub fn load_constituent_panel(path: &Path) -> Result<ConstituentPanel, MarketDataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_path(path)?;
    let header = rdr.headers()?.clone();
    let expected = ["date", "family", "issuer", "ticker", "spread", "duration", "weight"];
    let actual: Vec<&str> = header.iter().collect();
    if actual != expected {
        return Err(MarketDataError::MalformedHeader(format!(
            "expected `{}`",
            expected.join(",")
        )));
    }
    let mut rows = Vec::new();
    for (row_idx, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |msg: String| MarketDataError::BadRow {
            row: row_idx + 1,
            msg,
        };
        let date = NaiveDate::parse_from_str(rec.get(0).unwrap_or(""), "%Y-%m-%d")
            .map_err(|_| bad(format!("unparseable date `{}`", rec.get(0).unwrap_or(""))))?;
        let family: Family = rec.get(1).unwrap_or("").parse().map_err(bad)?;
        let parse_f = |i: usize, name: &str| -> Result<f64, MarketDataError> {
            rec.get(i)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|_| MarketDataError::BadRow {
                    row: row_idx + 1,
                    msg: format!("unparseable {name} `{}`", rec.get(i).unwrap_or("")),
                })
        };
        rows.push(ConstituentRow {
            date,
            family,
            issuer_id: rec.get(2).unwrap_or("").to_string(),
            ticker: rec.get(3).unwrap_or("").to_string(),
            spread: parse_f(4, "spread")?,
            duration: parse_f(5, "duration")?,
            weight: parse_f(6, "weight")?,
        });
    }
    if rows.is_empty() {
        return Err(MarketDataError::NoDataRows);
    }
    ConstituentPanel::new(rows)
}

/// The four synthetic histories produced by one simulated path.
#[derive(Debug, Clone)]
pub struct SyntheticPanels {
    pub nominal: CurvePanel,
    pub real: CurvePanel,
    pub cdi_spread: CurvePanel,
    pub ipca_spread: CurvePanel,
}

impl SyntheticPanels {
    pub fn as_vec(&self) -> Vec<&CurvePanel> {
        vec![&self.nominal, &self.real, &self.cdi_spread, &self.ipca_spread]
    }
}

/// Synthetic weekly histories from a known volatility spec: one simulated
/// path at weekly steps, pillar values recorded as panels. Deterministic per
/// seed. The panel dates are synthetic Fridays.
pub fn generate_synthetic_panel(
    spec: &BlockVolSpec,
    init: &SimInit,
    n_weeks: usize,
    seed: u64,
) -> Result<SyntheticPanels, MarketDataError> {
    if n_weeks < 30 {
        return Err(MarketDataError::TooShort(n_weeks));
    }
    let dt = 1.0 / 52.0;
    let cfg = SimConfig {
        dt,
        horizon: (n_weeks - 1) as f64 * dt,
        n_paths: 1,
        seed,
        pillar_grid: init.f_n.grid().clone(),
        antithetic: false,
        record_every: 1,
    };
    let out = sim::run_paths(init, spec, &cfg)?;
    let epoch = NaiveDate::from_ymd_opt(2021, 1, 8).expect("valid date");
    let dates: Vec<NaiveDate> = (0..n_weeks)
        .map(|k| epoch + Duration::days(7 * k as i64))
        .collect();
    let grid = cfg.pillar_grid.clone();
    let n_pillars = grid.len();
    let build = |extract: &dyn Fn(usize, usize) -> f64, kind: SeriesKind| {
        let mut values = Vec::with_capacity(n_weeks * n_pillars);
        for rec in 0..n_weeks {
            for p in 0..n_pillars {
                values.push(Some(extract(rec, p)));
            }
        }
        CurvePanel::new(dates.clone(), grid.clone(), values, kind)
    };
    Ok(SyntheticPanels {
        nominal: build(&|r, p| out.f_n(0, r, p), SeriesKind::NominalFwd)?,
        real: build(&|r, p| out.f_r(0, r, p), SeriesKind::RealFwd)?,
        cdi_spread: build(&|r, p| out.s_cdi(0, r, p), SeriesKind::CdiSpread)?,
        ipca_spread: build(&|r, p| out.s_ipca(0, r, p), SeriesKind::IpcaSpread)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().expect("tmp");
        f.write_all(content.as_bytes()).expect("write");
        f
    }

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").expect("date")
    }

    #[test]
    fn grid_rejects_unsorted_and_nonpositive() {
        assert!(PillarGrid::new(vec![1.0, 0.5]).is_err());
        assert!(PillarGrid::new(vec![0.0, 1.0]).is_err());
        assert!(PillarGrid::new(vec![1.0, 1.0]).is_err());
        assert!(PillarGrid::new(vec![0.25, 0.5, 1.0]).is_ok());
    }

    #[test]
    fn load_basic_panel() {
        let f = write_tmp(
            "date,0.25,0.5,1\n2021-01-04,0.02,0.03,0.04\n2021-01-05,0.021,0.031,0.041\n",
        );
        let p = load_curve_panel(f.path(), SeriesKind::NominalFwd).expect("load");
        assert_eq!(p.n_rows(), 2);
        assert_eq!(p.grid().len(), 3);
        assert_eq!(p.value(1, 2), Some(0.041));
    }

    #[test]
    fn load_rejects_empty_file() {
        let f = write_tmp("date,1,2\n");
        let err = load_curve_panel(f.path(), SeriesKind::NominalFwd).unwrap_err();
        assert!(matches!(err, MarketDataError::NoDataRows));
    }

    #[test]
    fn load_rejects_duplicate_date_naming_it() {
        let f = write_tmp("date,1\n2021-01-04,0.1\n2021-01-04,0.2\n");
        let err = load_curve_panel(f.path(), SeriesKind::NominalFwd).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2021-01-04"), "error should name the date: {msg}");
    }

    #[test]
    fn load_rejects_unparseable_date_with_row_index() {
        let f = write_tmp("date,1\n2021-01-04,0.1\nnot-a-date,0.2\n");
        let err = load_curve_panel(f.path(), SeriesKind::NominalFwd).unwrap_err();
        assert!(matches!(err, MarketDataError::BadRow { row: 2, .. }));
    }

    #[test]
    fn load_rejects_nonincreasing_tenor_header() {
        let f = write_tmp("date,1,0.5\n2021-01-04,0.1,0.2\n");
        assert!(load_curve_panel(f.path(), SeriesKind::NominalFwd).is_err());
    }

    #[test]
    fn missing_cells_rejected_for_rates_allowed_for_spreads() {
        let f = write_tmp("date,1,2\n2021-01-04,,0.02\n");
        assert!(load_curve_panel(f.path(), SeriesKind::NominalFwd).is_err());
        let p = load_curve_panel(f.path(), SeriesKind::IpcaSpread).expect("spread ok");
        assert_eq!(p.value(0, 0), None);
        assert_eq!(p.value(0, 1), Some(0.02));
    }

    #[test]
    fn align_restricts_to_intersection() {
        let mk = |dates: &[&str]| {
            CurvePanel::new(
                dates.iter().map(|s| d(s)).collect(),
                PillarGrid::new(vec![1.0]).unwrap(),
                vec![Some(0.1); dates.len()],
                SeriesKind::NominalFwd,
            )
            .unwrap()
        };
        let a = mk(&["2021-01-04", "2021-01-05", "2021-01-06"]);
        let b = mk(&["2021-01-05", "2021-01-06", "2021-01-07"]);
        let out = align_panels(&[a, b]).expect("align");
        assert_eq!(out[0].dates(), &[d("2021-01-05"), d("2021-01-06")]);
        assert_eq!(out[0].dates(), out[1].dates());
    }

    #[test]
    fn align_requires_two_panels() {
        let p = CurvePanel::new(
            vec![d("2021-01-04")],
            PillarGrid::new(vec![1.0]).unwrap(),
            vec![Some(0.1)],
            SeriesKind::NominalFwd,
        )
        .unwrap();
        assert!(matches!(
            align_panels(&[p]).unwrap_err(),
            MarketDataError::NeedTwoPanels
        ));
    }

    #[test]
    fn align_is_idempotent() {
        let mk = |dates: &[&str]| {
            CurvePanel::new(
                dates.iter().map(|s| d(s)).collect(),
                PillarGrid::new(vec![1.0]).unwrap(),
                (0..dates.len()).map(|i| Some(i as f64)).collect(),
                SeriesKind::NominalFwd,
            )
            .unwrap()
        };
        let a = mk(&["2021-01-04", "2021-01-05"]);
        let b = mk(&["2021-01-04", "2021-01-05"]);
        let once = align_panels(&[a, b]).unwrap();
        let twice = align_panels(&once).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn weekly_keeps_friday_from_full_week() {
        let dates = ["2021-01-04", "2021-01-05", "2021-01-06", "2021-01-07", "2021-01-08"];
        let p = CurvePanel::new(
            dates.iter().map(|s| d(s)).collect(),
            PillarGrid::new(vec![1.0]).unwrap(),
            (0..5).map(|i| Some(i as f64)).collect(),
            SeriesKind::NominalFwd,
        )
        .unwrap();
        let w = to_weekly(&p, Weekday::Fri);
        assert_eq!(w.dates(), &[d("2021-01-08")]);
        assert_eq!(w.value(0, 0), Some(4.0));
    }

    #[test]
    fn weekly_takes_last_obs_before_missing_friday() {
        // Friday 2021-01-08 absent: Thursday close is kept for that week.
        let dates = ["2021-01-04", "2021-01-07", "2021-01-11", "2021-01-15"];
        let p = CurvePanel::new(
            dates.iter().map(|s| d(s)).collect(),
            PillarGrid::new(vec![1.0]).unwrap(),
            (0..4).map(|i| Some(i as f64)).collect(),
            SeriesKind::NominalFwd,
        )
        .unwrap();
        let w = to_weekly(&p, Weekday::Fri);
        assert_eq!(w.dates(), &[d("2021-01-07"), d("2021-01-15")]);
    }

    #[test]
    fn constituents_reject_duplicate_key() {
        let row = ConstituentRow {
            date: d("2021-01-04"),
            family: Family::Cdi,
            issuer_id: "X".into(),
            ticker: "X11".into(),
            spread: 0.02,
            duration: 3.0,
            weight: 1.0,
        };
        assert!(ConstituentPanel::new(vec![row.clone(), row]).is_err());
    }

    #[test]
    fn constituent_csv_roundtrip() {
        let f = write_tmp(
            "date,family,issuer,ticker,spread,duration,weight\n\
             2021-01-04,CDI,AlphaCo,ALP11,0.0182,2.9,1.5\n\
             2021-01-04,IPCA,AlphaCo,ALP21,0.0024,4.1,0.7\n",
        );
        let p = load_constituent_panel(f.path()).expect("load");
        assert_eq!(p.rows().len(), 2);
        assert_eq!(p.rows()[1].family, Family::Ipca);
        assert!((p.rows()[0].spread - 0.0182).abs() < 1e-15);
    }
}
