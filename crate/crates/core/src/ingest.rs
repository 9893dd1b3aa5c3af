//! Event CSV parsing, inclusion filters, and aggregation into annual
//! per-cell counts of terrorist attacks (T) and conventional war acts (C).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::hmm::ObservationSequence;

/// Which kind of event dataset a record comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    /// Conventional, state-based war acts (GED-like). Counted in C.
    Ged,
    /// Terrorist attacks (GTD-like). Counted in T.
    Gtd,
}

impl Source {
    pub fn parse(raw: &str) -> Option<Source> {
        match normalize(raw).as_str() {
            "ged" | "ged like" | "conventional" | "c" => Some(Source::Ged),
            "gtd" | "gtd like" | "terror" | "terrorism" | "t" => Some(Source::Gtd),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Source::Ged => "ged",
            Source::Gtd => "gtd",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub lon: f64,
    pub lat: f64,
    pub year: i32,
    pub source: Source,
    /// Source-specific violence category (GED-like records).
    pub category: String,
    /// Target type (GTD-like records).
    pub target_type: String,
    /// 1 = exact location; larger values are coarser.
    pub geo_precision: u32,
}

/// Maps logical fields to CSV header names. `category`, `target_type` and
/// `geo_precision` may be absent from the file; they then default to empty
/// strings and precision 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schema {
    pub lon: String,
    pub lat: String,
    pub year: String,
    pub source: String,
    pub category: String,
    pub target_type: String,
    pub geo_precision: String,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            lon: "lon".into(),
            lat: "lat".into(),
            year: "year".into(),
            source: "source".into(),
            category: "category".into(),
            target_type: "target_type".into(),
            geo_precision: "geo_precision".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    /// 1-based data row, header excluded.
    pub row: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseReport {
    pub rows_read: usize,
    pub errors: Vec<RowError>,
}

pub fn parse_events(path: &Path, schema: &Schema) -> Result<(Vec<EventRecord>, ParseReport)> {
    let file = std::fs::File::open(path)?;
    parse_events_from(file, schema)
}

pub fn parse_events_from<R: Read>(reader: R, schema: &Schema) -> Result<(Vec<EventRecord>, ParseReport)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let required = |name: &str| find(name).ok_or_else(|| Error::MissingColumn(name.to_string()));

    let lon_i = required(&schema.lon)?;
    let lat_i = required(&schema.lat)?;
    let year_i = required(&schema.year)?;
    let source_i = required(&schema.source)?;
    let category_i = find(&schema.category);
    let target_i = find(&schema.target_type);
    let precision_i = find(&schema.geo_precision);

    let mut events = Vec::new();
    let mut report = ParseReport::default();
    for (n, row) in rdr.records().enumerate() {
        let row_no = n + 1;
        report.rows_read += 1;
        let record = match row {
            Ok(r) => r,
            Err(e) => {
                report.errors.push(RowError { row: row_no, message: e.to_string() });
                continue;
            }
        };
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let parsed = (|| -> std::result::Result<EventRecord, String> {
            let lon: f64 = field(lon_i)
                .parse()
                .map_err(|_| format!("unparseable longitude {:?}", field(lon_i)))?;
            let lat: f64 = field(lat_i)
                .parse()
                .map_err(|_| format!("unparseable latitude {:?}", field(lat_i)))?;
            if !lon.is_finite() || !lat.is_finite() {
                return Err(format!("non-finite coordinate ({lon}, {lat})"));
            }
            let year: i32 = field(year_i)
                .parse()
                .map_err(|_| format!("unparseable year {:?}", field(year_i)))?;
            let source = Source::parse(field(source_i))
                .ok_or_else(|| format!("unknown source {:?}", field(source_i)))?;
            // A blank precision means the location quality is unknown: treat as coarsest.
            let geo_precision = match precision_i.map(field) {
                None => 1,
                Some("") => u32::MAX,
                Some(raw) => raw
                    .parse()
                    .map_err(|_| format!("unparseable geo_precision {raw:?}"))?,
            };
            Ok(EventRecord {
                lon,
                lat,
                year,
                source,
                category: category_i.map(field).unwrap_or("").to_string(),
                target_type: target_i.map(field).unwrap_or("").to_string(),
                geo_precision,
            })
        })();
        match parsed {
            Ok(ev) => events.push(ev),
            Err(message) => report.errors.push(RowError { row: row_no, message }),
        }
    }
    Ok((events, report))
}

/// Inclusion rules. The default keeps events located to the second-order
/// administrative region or better, drops GED-like one-sided violence against
/// civilians and non-state conflicts, and drops GTD-like attacks on military
/// targets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterPolicy {
    /// Largest accepted `geo_precision`; `None` accepts everything.
    pub max_precision: Option<u32>,
    pub ged_excluded_categories: Vec<String>,
    pub gtd_excluded_target_types: Vec<String>,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        FilterPolicy {
            max_precision: Some(3),
            ged_excluded_categories: vec!["violence against civilians".into(), "non-state".into()],
            gtd_excluded_target_types: vec!["military".into()],
        }
    }
}

impl FilterPolicy {
    /// Accepts every event.
    pub fn none() -> Self {
        FilterPolicy {
            max_precision: None,
            ged_excluded_categories: Vec::new(),
            gtd_excluded_target_types: Vec::new(),
        }
    }

    pub fn accepts(&self, ev: &EventRecord) -> bool {
        if let Some(max) = self.max_precision {
            if ev.geo_precision > max {
                return false;
            }
        }
        match ev.source {
            Source::Ged => !contains_normalized(&self.ged_excluded_categories, &ev.category),
            Source::Gtd => !contains_normalized(&self.gtd_excluded_target_types, &ev.target_type),
        }
    }
}

fn normalize(s: &str) -> String {
    s.trim()
        .to_lowercase()
        .replace(['-', '_'], " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn contains_normalized(list: &[String], value: &str) -> bool {
    let v = normalize(value);
    list.iter().any(|x| normalize(x) == v)
}

pub fn filter_events(events: &[EventRecord], policy: &FilterPolicy) -> Vec<EventRecord> {
    events.iter().filter(|e| policy.accepts(e)).cloned().collect()
}

/// Inclusive range of calendar years.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct YearRange {
    pub first: i32,
    pub last: i32,
}

impl YearRange {
    pub fn new(first: i32, last: i32) -> Result<Self> {
        if last < first {
            return Err(Error::param("years", format!("last year {last} precedes first year {first}")));
        }
        Ok(YearRange { first, last })
    }

    pub fn len(&self) -> usize {
        (self.last - self.first + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index_of(&self, year: i32) -> Option<usize> {
        (self.first..=self.last)
            .contains(&year)
            .then(|| (year - self.first) as usize)
    }

    pub fn year(&self, index: usize) -> i32 {
        self.first + index as i32
    }
}

/// Events dropped during aggregation, split by source.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SkipReport {
    pub outside_grid_gtd: usize,
    pub outside_grid_ged: usize,
    pub outside_years_gtd: usize,
    pub outside_years_ged: usize,
}

impl SkipReport {
    pub fn gtd(&self) -> usize {
        self.outside_grid_gtd + self.outside_years_gtd
    }

    pub fn ged(&self) -> usize {
        self.outside_grid_ged + self.outside_years_ged
    }
}

/// Dense `(cell, year)` table of T and C counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountPanel {
    n_cells: usize,
    years: YearRange,
    t: Vec<u32>,
    c: Vec<u32>,
}

impl CountPanel {
    pub fn zeros(n_cells: usize, years: YearRange) -> Self {
        let n = n_cells * years.len();
        CountPanel {
            n_cells,
            years,
            t: vec![0; n],
            c: vec![0; n],
        }
    }

    /// Builds a panel from cell-major vectors.
    pub fn from_counts(n_cells: usize, years: YearRange, t: Vec<u32>, c: Vec<u32>) -> Result<Self> {
        let n = n_cells * years.len();
        if t.len() != n || c.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "expected {n} cell-years, got t={} c={}",
                t.len(),
                c.len()
            )));
        }
        Ok(CountPanel { n_cells, years, t, c })
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn years(&self) -> YearRange {
        self.years
    }

    pub fn n_years(&self) -> usize {
        self.years.len()
    }

    #[inline]
    fn at(&self, cell: usize, year_index: usize) -> usize {
        cell * self.years.len() + year_index
    }

    #[inline]
    pub fn t(&self, cell: usize, year_index: usize) -> u32 {
        self.t[self.at(cell, year_index)]
    }

    #[inline]
    pub fn c(&self, cell: usize, year_index: usize) -> u32 {
        self.c[self.at(cell, year_index)]
    }

    pub fn add(&mut self, cell: usize, year_index: usize, source: Source, n: u32) {
        let i = self.at(cell, year_index);
        match source {
            Source::Gtd => self.t[i] += n,
            Source::Ged => self.c[i] += n,
        }
    }

    pub fn total_t(&self) -> u64 {
        self.t.iter().map(|&x| x as u64).sum()
    }

    pub fn total_c(&self) -> u64 {
        self.c.iter().map(|&x| x as u64).sum()
    }

    pub fn sequence(&self, cell: usize) -> ObservationSequence {
        let range = self.at(cell, 0)..self.at(cell, 0) + self.years.len();
        ObservationSequence::new(self.t[range.clone()].to_vec(), self.c[range].to_vec())
            .expect("panel rows have equal, nonzero length")
    }

    pub fn sequences(&self) -> Vec<ObservationSequence> {
        (0..self.n_cells).map(|c| self.sequence(c)).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["cell_id", "year", "t_count", "c_count"])?;
        for cell in 0..self.n_cells {
            for y in 0..self.years.len() {
                w.write_record([
                    cell.to_string(),
                    self.years.year(y).to_string(),
                    self.t(cell, y).to_string(),
                    self.c(cell, y).to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Reads a panel written by [`CountPanel::write_csv`]. Dimensions are
    /// inferred; every `(cell, year)` pair must appear exactly once.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(file).map_err(|e| match e {
            Error::Malformed { reason, .. } => Error::malformed(path, reason),
            other => other,
        })
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut rows = Vec::new();
        for (n, rec) in rdr.deserialize::<(usize, i32, u32, u32)>().enumerate() {
            let row = rec.map_err(|e| Error::malformed("<panel>", format!("row {}: {e}", n + 1)))?;
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Empty("count panel has no rows".into()));
        }
        let n_cells = rows.iter().map(|r| r.0).max().unwrap() + 1;
        let first = rows.iter().map(|r| r.1).min().unwrap();
        let last = rows.iter().map(|r| r.1).max().unwrap();
        let years = YearRange::new(first, last)?;
        let mut panel = CountPanel::zeros(n_cells, years);
        let mut seen = vec![false; n_cells * years.len()];
        for (cell, year, t, c) in rows {
            let i = panel.at(cell, years.index_of(year).unwrap());
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::malformed("<panel>", format!("duplicate row for cell {cell}, year {year}")));
            }
            panel.t[i] = t;
            panel.c[i] = c;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::malformed(
                "<panel>",
                format!(
                    "missing row for cell {}, year {}",
                    i / years.len(),
                    years.year(i % years.len())
                ),
            ));
        }
        Ok(panel)
    }
}

/// Counts filtered events per cell-year. Events outside the grid or the year
/// window are tallied in the skip report rather than dropped silently.
pub fn aggregate(events: &[EventRecord], grid: &Grid, years: YearRange) -> (CountPanel, SkipReport) {
    let mut panel = CountPanel::zeros(grid.n_cells(), years);
    let mut skips = SkipReport::default();
    for ev in events {
        let Some(yi) = years.index_of(ev.year) else {
            match ev.source {
                Source::Gtd => skips.outside_years_gtd += 1,
                Source::Ged => skips.outside_years_ged += 1,
            }
            continue;
        };
        match grid.locate(ev.lon, ev.lat) {
            Ok(Some(cell)) => panel.add(cell.index(), yi, ev.source, 1),
            _ => match ev.source {
                Source::Gtd => skips.outside_grid_gtd += 1,
                Source::Ged => skips.outside_grid_ged += 1,
            },
        }
    }
    (panel, skips)
}
