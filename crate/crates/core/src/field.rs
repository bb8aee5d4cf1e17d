//! Gridded daily fields of TMAX and PRCP.

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variable {
    Tmax,
    Prcp,
}

impl Variable {
    pub const ALL: [Variable; 2] = [Variable::Tmax, Variable::Prcp];

    pub fn name(self) -> &'static str {
        match self {
            Variable::Tmax => "TMAX",
            Variable::Prcp => "PRCP",
        }
    }
}

/// Where a field comes from. `Model` rows carry indicator 0, `Observed`
/// rows indicator 1. `Calibrated` marks corrected output written back to disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Model,
    Observed,
    Calibrated,
}

impl Source {
    pub fn indicator(self) -> f64 {
        match self {
            Source::Model => 0.0,
            Source::Observed | Source::Calibrated => 1.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Source::Model => "model",
            Source::Observed => "observed",
            Source::Calibrated => "calibrated",
        }
    }

    pub fn parse(s: &str) -> Option<Source> {
        match s {
            "model" => Some(Source::Model),
            "observed" => Some(Source::Observed),
            "calibrated" => Some(Source::Calibrated),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub id: String,
    pub x: f64,
    pub y: f64,
}

/// Values are stored location-major: `values[l * n_days + t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    locations: Vec<Location>,
    dates: Vec<NaiveDate>,
    source: Source,
    tmax: Vec<f64>,
    prcp: Vec<f64>,
}

impl GridField {
    pub fn new(
        locations: Vec<Location>,
        dates: Vec<NaiveDate>,
        source: Source,
        tmax: Vec<f64>,
        prcp: Vec<f64>,
    ) -> Result<Self> {
        let n = locations.len() * dates.len();
        if locations.is_empty() || dates.is_empty() {
            return Err(Error::InvalidInput("field needs at least one location and one day".into()));
        }
        for v in [&tmax, &prcp] {
            if v.len() != n {
                return Err(Error::Shape {
                    expected: n,
                    got: v.len(),
                });
            }
        }
        for w in dates.windows(2) {
            if w[0].succ_opt() != Some(w[1]) {
                return Err(Error::InvalidInput(format!(
                    "calendar is not consecutive daily: {} followed by {}",
                    w[0], w[1]
                )));
            }
        }
        if let Some(i) = tmax.iter().chain(&prcp).position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite value at flat index {i}")));
        }
        if let Some(i) = prcp.iter().position(|&p| p < 0.0) {
            return Err(Error::InvalidInput(format!(
                "negative PRCP {} at location {} day {}",
                prcp[i],
                locations[i / dates.len()].id,
                dates[i % dates.len()]
            )));
        }
        let mut ids: Vec<&str> = locations.iter().map(|l| l.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput("duplicate location ids".into()));
        }
        Ok(GridField {
            locations,
            dates,
            source,
            tmax,
            prcp,
        })
    }

    pub fn locations(&self) -> &[Location] {
        &self.locations
    }

    pub fn coords(&self) -> Vec<[f64; 2]> {
        self.locations.iter().map(|l| [l.x, l.y]).collect()
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn with_source(mut self, source: Source) -> Self {
        self.source = source;
        self
    }

    pub fn n_locations(&self) -> usize {
        self.locations.len()
    }

    pub fn n_days(&self) -> usize {
        self.dates.len()
    }

    /// Calendar month (1..=12) of day `t`.
    pub fn month(&self, t: usize) -> u32 {
        self.dates[t].month()
    }

    fn data(&self, v: Variable) -> &[f64] {
        match v {
            Variable::Tmax => &self.tmax,
            Variable::Prcp => &self.prcp,
        }
    }

    fn data_mut(&mut self, v: Variable) -> &mut [f64] {
        match v {
            Variable::Tmax => &mut self.tmax,
            Variable::Prcp => &mut self.prcp,
        }
    }

    pub fn get(&self, v: Variable, l: usize, t: usize) -> f64 {
        self.data(v)[l * self.dates.len() + t]
    }

    pub fn set(&mut self, v: Variable, l: usize, t: usize, value: f64) {
        let nd = self.dates.len();
        self.data_mut(v)[l * nd + t] = value;
    }

    /// Chronological series of one variable at one location.
    pub fn series(&self, v: Variable, l: usize) -> &[f64] {
        let nd = self.dates.len();
        &self.data(v)[l * nd..(l + 1) * nd]
    }

    pub fn series_mut(&mut self, v: Variable, l: usize) -> &mut [f64] {
        let nd = self.dates.len();
        &mut self.data_mut(v)[l * nd..(l + 1) * nd]
    }

    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        let first = *self.dates.first()?;
        let off = (date - first).num_days();
        (off >= 0 && (off as usize) < self.dates.len()).then_some(off as usize)
    }

    /// Days `start..=end` (inclusive dates) as a new field.
    pub fn slice_dates(&self, start: NaiveDate, end: NaiveDate) -> Result<GridField> {
        let (a, b) = match (self.index_of(start), self.index_of(end)) {
            (Some(a), Some(b)) if a <= b => (a, b),
            _ => {
                return Err(Error::Alignment(format!(
                    "span {start}..{end} not inside {}..{}",
                    self.dates[0],
                    self.dates[self.dates.len() - 1]
                )))
            }
        };
        self.slice_days(a, b + 1)
    }

    /// Days with index in `start..end`.
    pub fn slice_days(&self, start: usize, end: usize) -> Result<GridField> {
        if start >= end || end > self.n_days() {
            return Err(Error::Alignment(format!(
                "day range {start}..{end} outside 0..{}",
                self.n_days()
            )));
        }
        let pick = |v: &[f64]| -> Vec<f64> {
            (0..self.n_locations())
                .flat_map(|l| v[l * self.n_days() + start..l * self.n_days() + end].iter().copied())
                .collect()
        };
        GridField::new(
            self.locations.clone(),
            self.dates[start..end].to_vec(),
            self.source,
            pick(&self.tmax),
            pick(&self.prcp),
        )
    }

    /// Same locations (ids and coordinates) in the same order.
    pub fn check_same_grid(&self, other: &GridField) -> Result<()> {
        if self.locations != other.locations {
            return Err(Error::Alignment("fields are on different grids".into()));
        }
        Ok(())
    }

    /// Same grid and identical calendar.
    pub fn check_aligned(&self, other: &GridField) -> Result<()> {
        self.check_same_grid(other)?;
        if self.dates != other.dates {
            return Err(Error::Alignment(format!(
                "calendars differ: {}..{} ({} days) vs {}..{} ({} days)",
                self.dates[0],
                self.dates[self.n_days() - 1],
                self.n_days(),
                other.dates[0],
                other.dates[other.n_days() - 1],
                other.n_days()
            )));
        }
        Ok(())
    }

    /// Day indices whose calendar month is `month`.
    pub fn days_in_month(&self, month: u32) -> Vec<usize> {
        (0..self.n_days()).filter(|&t| self.month(t) == month).collect()
    }

    /// SHA-256 over grid, calendar, source and the exact value bits.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for l in &self.locations {
            h.update(l.id.as_bytes());
            h.update([0]);
            h.update(l.x.to_le_bytes());
            h.update(l.y.to_le_bytes());
        }
        h.update(self.dates[0].to_string().as_bytes());
        h.update((self.dates.len() as u64).to_le_bytes());
        h.update(self.source.label().as_bytes());
        for v in self.tmax.iter().chain(&self.prcp) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}
