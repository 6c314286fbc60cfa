use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MINUTE_US: i64 = 60_000_000;

/// Floors a timestamp to the start of its minute.
pub fn minute_of(timestamp_us: i64) -> i64 {
    timestamp_us.div_euclid(MINUTE_US) * MINUTE_US
}

/// Parses an ISO-8601 timestamp. Offsets are honoured; a timestamp without
/// one is taken as UTC.
pub fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.timestamp_micros());
    }
    [
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ]
    .iter()
    .find_map(|fmt| NaiveDateTime::parse_from_str(s, fmt).ok())
    .map(|t| t.and_utc().timestamp_micros())
}

pub fn format_timestamp(timestamp_us: i64) -> String {
    DateTime::<Utc>::from_timestamp_micros(timestamp_us)
        .map(|t| t.to_rfc3339_opts(SecondsFormat::AutoSi, true))
        .unwrap_or_else(|| timestamp_us.to_string())
}

/// One minute of scintillometer output, m^(-2/3).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScintRecord {
    pub minute_timestamp: i64,
    pub cn2_min: f64,
    pub cn2_max: f64,
    pub cn2: f64,
    pub cn2_std: f64,
}

impl ScintRecord {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.cn2_min, self.cn2_max, self.cn2];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Validation(format!(
                "minute {}: Cn2 values must be > 0 (min {}, max {}, cn2 {})",
                format_timestamp(self.minute_timestamp),
                self.cn2_min,
                self.cn2_max,
                self.cn2
            )));
        }
        // A one-sample minute has zero spread.
        if !(self.cn2_std.is_finite() && self.cn2_std >= 0.0) {
            return Err(Error::Validation(format!(
                "cn2_std must be >= 0, got {}",
                self.cn2_std
            )));
        }
        if self.cn2_min > self.cn2_max {
            return Err(Error::Validation(format!(
                "minute {}: cn2_min {} > cn2_max {}",
                format_timestamp(self.minute_timestamp),
                self.cn2_min,
                self.cn2_max
            )));
        }
        if self.cn2 < self.cn2_min || self.cn2 > self.cn2_max {
            return Err(Error::Validation(format!(
                "minute {}: cn2 {} outside [{}, {}]",
                format_timestamp(self.minute_timestamp),
                self.cn2,
                self.cn2_min,
                self.cn2_max
            )));
        }
        Ok(())
    }
}

const HEADER: [&str; 5] = ["timestamp", "cn2_min", "cn2_max", "cn2", "cn2_std"];

pub fn load_scint_csv(path: &Path) -> Result<Vec<ScintRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_scint_csv(file)
}

/// Parses the scintillometer CSV. Records come back minute-aligned and
/// sorted; for a repeated minute the last row wins.
pub fn parse_scint_csv(reader: impl Read) -> Result<Vec<ScintRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if headers.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "expected header '{}', found '{}'",
                HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut by_minute: BTreeMap<i64, ScintRecord> = BTreeMap::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let ts = parse_timestamp(&row[0]).ok_or_else(|| Error::Parse {
            line,
            message: format!("bad timestamp '{}'", &row[0]),
        })?;
        let num = |k: usize| {
            row[k].parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("bad {} value '{}'", HEADER[k], &row[k]),
            })
        };
        let rec = ScintRecord {
            minute_timestamp: minute_of(ts),
            cn2_min: num(1)?,
            cn2_max: num(2)?,
            cn2: num(3)?,
            cn2_std: num(4)?,
        };
        rec.validate().map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("line {line}: {m}")),
            other => other,
        })?;
        if by_minute.insert(rec.minute_timestamp, rec).is_some() {
            log::warn!(
                "line {line}: duplicate minute {}; keeping the later row",
                format_timestamp(rec.minute_timestamp)
            );
        }
    }
    Ok(by_minute.into_values().collect())
}

pub fn write_scint_csv(path: &Path, records: &[ScintRecord]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record([
            format_timestamp(r.minute_timestamp),
            format!("{:e}", r.cn2_min),
            format!("{:e}", r.cn2_max),
            format!("{:e}", r.cn2),
            format!("{:e}", r.cn2_std),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
