//! Long-format CSV exchange: `date,location,x,y,tmax,prcp,source`.
//!
//! Dates are ISO `YYYY-MM-DD`, TMAX is in degrees C, PRCP in mm/day, and
//! `source` is `observed`, `model` or `calibrated`. Every source present in a
//! file must cover every location on every day of its calendar span. Values
//! are written in shortest round-trip form, so a write/read cycle is exact.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;

use crate::error::{Error, Result};
use crate::field::{GridField, Location, Source, Variable};

/// (location, date) -> (tmax, prcp, line).
type CellMap = HashMap<(usize, NaiveDate), (f64, f64, usize)>;

pub const HEADER: [&str; 7] = ["date", "location", "x", "y", "tmax", "prcp", "source"];

/// Fields found in one file, by source.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub observed: Option<GridField>,
    pub model: Option<GridField>,
    pub calibrated: Option<GridField>,
}

impl Dataset {
    pub fn get(&self, s: Source) -> Option<&GridField> {
        match s {
            Source::Observed => self.observed.as_ref(),
            Source::Model => self.model.as_ref(),
            Source::Calibrated => self.calibrated.as_ref(),
        }
    }

    pub fn require(&self, s: Source) -> Result<&GridField> {
        self.get(s)
            .ok_or_else(|| Error::Completeness(format!("no rows with source {}", s.label())))
    }

    fn slot(&mut self, s: Source) -> &mut Option<GridField> {
        match s {
            Source::Observed => &mut self.observed,
            Source::Model => &mut self.model,
            Source::Calibrated => &mut self.calibrated,
        }
    }
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    read_dataset_from(std::fs::File::open(path)?)
}

pub fn read_dataset_from<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header {}, got {}", HEADER.join(","), header.join(",")),
        });
    }

    let mut locations: Vec<Location> = Vec::new();
    let mut loc_index: HashMap<String, usize> = HashMap::new();
    let mut cells: BTreeMap<Source, CellMap> = BTreeMap::new();

    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| rec.get(i).unwrap_or("");
        let parse_f = |i: usize| -> Result<f64> {
            field(i).parse::<f64>().map_err(|_| Error::Parse {
                line,
                msg: format!("column {} is not a number: {:?}", HEADER[i], field(i)),
            })
        };
        if rec.len() != HEADER.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} columns, got {}", HEADER.len(), rec.len()),
            });
        }
        let date = NaiveDate::parse_from_str(field(0), "%Y-%m-%d").map_err(|_| Error::Parse {
            line,
            msg: format!("malformed date {:?}", field(0)),
        })?;
        let id = field(1).to_string();
        if id.is_empty() {
            return Err(Error::Validation {
                line,
                msg: "empty location id".into(),
            });
        }
        let (x, y, tmax, prcp) = (parse_f(2)?, parse_f(3)?, parse_f(4)?, parse_f(5)?);
        let source = Source::parse(field(6)).ok_or_else(|| Error::Validation {
            line,
            msg: format!("unknown source {:?}", field(6)),
        })?;
        if ![x, y, tmax, prcp].iter().all(|v| v.is_finite()) {
            return Err(Error::Validation {
                line,
                msg: "non-finite value".into(),
            });
        }
        if prcp < 0.0 {
            return Err(Error::Validation {
                line,
                msg: format!("negative PRCP {prcp}"),
            });
        }
        let l = match loc_index.get(&id) {
            Some(&l) => {
                if locations[l].x != x || locations[l].y != y {
                    return Err(Error::Validation {
                        line,
                        msg: format!("location {id} has inconsistent coordinates"),
                    });
                }
                l
            }
            None => {
                locations.push(Location { id: id.clone(), x, y });
                loc_index.insert(id, locations.len() - 1);
                locations.len() - 1
            }
        };
        if let Some(prev) = cells.entry(source).or_default().insert((l, date), (tmax, prcp, line)) {
            return Err(Error::Validation {
                line,
                msg: format!(
                    "duplicate row for {} {} {} (first at line {})",
                    source.label(),
                    locations[l].id,
                    date,
                    prev.2
                ),
            });
        }
    }

    if cells.is_empty() {
        return Err(Error::Completeness("file has no data rows".into()));
    }

    let mut out = Dataset::default();
    for (source, map) in cells {
        let first = map.keys().map(|k| k.1).min().unwrap();
        let last = map.keys().map(|k| k.1).max().unwrap();
        let dates: Vec<NaiveDate> = first.iter_days().take_while(|d| *d <= last).collect();
        let nd = dates.len();
        let mut tmax = Vec::with_capacity(locations.len() * nd);
        let mut prcp = Vec::with_capacity(locations.len() * nd);
        let mut missing = Vec::new();
        for (l, loc) in locations.iter().enumerate() {
            for d in &dates {
                match map.get(&(l, *d)) {
                    Some(&(t, p, _)) => {
                        tmax.push(t);
                        prcp.push(p);
                    }
                    None => {
                        missing.push(format!("{} {}", loc.id, d));
                        tmax.push(0.0);
                        prcp.push(0.0);
                    }
                }
            }
        }
        if !missing.is_empty() {
            let shown: Vec<&str> = missing.iter().take(10).map(String::as_str).collect();
            return Err(Error::Completeness(format!(
                "source {} is missing {} (location, day) cells: {}{}",
                source.label(),
                missing.len(),
                shown.join(", "),
                if missing.len() > shown.len() { ", ..." } else { "" }
            )));
        }
        *out.slot(source) = Some(GridField::new(locations.clone(), dates, source, tmax, prcp)?);
    }
    Ok(out)
}

pub fn write_fields(path: &Path, fields: &[&GridField]) -> Result<()> {
    write_fields_to(std::fs::File::create(path)?, fields)
}

/// Rows are written field by field, date-major.
pub fn write_fields_to<W: Write>(writer: W, fields: &[&GridField]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(HEADER)?;
    for f in fields {
        for (t, date) in f.dates().iter().enumerate() {
            let ds = date.format("%Y-%m-%d").to_string();
            for (l, loc) in f.locations().iter().enumerate() {
                w.write_record([
                    ds.clone(),
                    loc.id.clone(),
                    loc.x.to_string(),
                    loc.y.to_string(),
                    f.get(Variable::Tmax, l, t).to_string(),
                    f.get(Variable::Prcp, l, t).to_string(),
                    f.source().label().to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "date,location,x,y,tmax,prcp,source
2001-01-01,a,0,0,1.5,0,observed
2001-01-01,b,1,0,2.5,0.3,observed
2001-01-02,a,0,0,1.25,1.1,observed
2001-01-02,b,1,0,3,0,observed
2001-01-01,a,0,0,0.1,0.2,model
2001-01-01,b,1,0,0.2,0,model
2001-01-02,a,0,0,0.3,0,model
2001-01-02,b,1,0,0.4,5,model
";

    #[test]
    fn reads_both_sources() {
        let d = read_dataset_from(SAMPLE.as_bytes()).unwrap();
        let o = d.require(Source::Observed).unwrap();
        let m = d.require(Source::Model).unwrap();
        assert!(d.calibrated.is_none());
        o.check_aligned(m).unwrap();
        assert_eq!(o.get(Variable::Tmax, 0, 1), 1.25);
        assert_eq!(m.get(Variable::Prcp, 1, 1), 5.0);
        assert_eq!(o.locations()[1].id, "b");
    }

    #[test]
    fn round_trip_is_exact() {
        let d = read_dataset_from(SAMPLE.as_bytes()).unwrap();
        let mut o = d.observed.clone().unwrap();
        o.set(Variable::Tmax, 0, 0, 0.1 + 0.2);
        o.set(Variable::Prcp, 1, 1, 1.0 / 3.0);
        let m = d.model.clone().unwrap();
        let mut buf = Vec::new();
        write_fields_to(&mut buf, &[&o, &m]).unwrap();
        let back = read_dataset_from(buf.as_slice()).unwrap();
        assert_eq!(back.observed.unwrap(), o);
        assert_eq!(back.model.unwrap(), m);
    }

    #[test]
    fn rejects_bad_input() {
        let neg = SAMPLE.replace("2001-01-02,b,1,0,3,0,observed", "2001-01-02,b,1,0,3,-1,observed");
        match read_dataset_from(neg.as_bytes()) {
            Err(Error::Validation { line, msg }) => {
                assert_eq!(line, 5);
                assert!(msg.contains("negative"));
            }
            r => panic!("unexpected {r:?}"),
        }

        let bad_date = SAMPLE.replace("2001-01-02,a,0,0,1.25", "2001-13-02,a,0,0,1.25");
        assert!(matches!(read_dataset_from(bad_date.as_bytes()), Err(Error::Parse { line: 4, .. })));

        let gap: String = SAMPLE.lines().filter(|l| !l.starts_with("2001-01-02,b,1,0,0.4")).map(|l| format!("{l}\n")).collect();
        match read_dataset_from(gap.as_bytes()) {
            Err(Error::Completeness(msg)) => assert!(msg.contains("b 2001-01-02"), "{msg}"),
            r => panic!("unexpected {r:?}"),
        }

        let dup = format!("{SAMPLE}2001-01-01,a,0,0,9,0,model\n");
        assert!(matches!(read_dataset_from(dup.as_bytes()), Err(Error::Validation { .. })));

        let moved = SAMPLE.replace("2001-01-02,a,0,0,1.25", "2001-01-02,a,5,0,1.25");
        assert!(matches!(read_dataset_from(moved.as_bytes()), Err(Error::Validation { .. })));

        let header = SAMPLE.replace("tmax,prcp", "prcp,tmax");
        assert!(matches!(read_dataset_from(header.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }
}
