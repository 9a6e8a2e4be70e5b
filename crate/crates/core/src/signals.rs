//! Time-series ingestion and sampling.
//!
//! A [`Trace`] backs every time-varying input of a scenario: carbon
//! intensity, irradiance, wind speed, node utilization and pre-generated
//! power profiles. [`ForecastSet`] replays historical forecasts so that a
//! consumer only ever sees the issue that was available at the query time.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Value at the latest timestamp not after the query.
    #[default]
    #[serde(alias = "hold", alias = "previous-value-hold")]
    Previous,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Unit {
    #[serde(rename = "W")]
    Watts,
    #[serde(rename = "W/m2")]
    WattsPerSquareMeter,
    #[serde(rename = "m/s")]
    MetersPerSecond,
    #[serde(rename = "fraction")]
    Fraction,
    #[serde(rename = "gCO2/kWh")]
    GramsPerKwh,
    #[default]
    #[serde(rename = "1")]
    Dimensionless,
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Unit::Watts => "W",
            Unit::WattsPerSquareMeter => "W/m2",
            Unit::MetersPerSecond => "m/s",
            Unit::Fraction => "fraction",
            Unit::GramsPerKwh => "gCO2/kWh",
            Unit::Dimensionless => "1",
        })
    }
}

/// A sampled value. `stale` is set when the query lies past the end of a
/// non-repeating trace and the last value is being held.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub value: f64,
    pub stale: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    name: String,
    times: Vec<Timestamp>,
    values: Vec<f64>,
    interpolation: Interpolation,
    scale: f64,
    repeat: bool,
    unit: Unit,
}

impl Trace {
    pub fn new(points: Vec<(Timestamp, f64)>, interpolation: Interpolation) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::input("trace needs at least one point"));
        }
        for (i, w) in points.windows(2).enumerate() {
            if w[1].0 <= w[0].0 {
                return Err(Error::input(format!(
                    "trace timestamps must be strictly increasing (point {})",
                    i + 2
                )));
            }
        }
        if let Some((t, v)) = points.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::input(format!("non-finite trace value {v} at {t}")));
        }
        let (times, values) = points.into_iter().unzip();
        Ok(Trace {
            name: "trace".to_string(),
            times,
            values,
            interpolation,
            scale: 1.0,
            repeat: false,
            unit: Unit::Dimensionless,
        })
    }

    /// A single-point trace that holds `value` forever.
    pub fn constant(value: f64) -> Result<Self> {
        Ok(Trace::new(vec![(Timestamp::from_epoch(0), value)], Interpolation::Previous)?.repeating(true))
    }

    pub fn scaled(mut self, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(Error::input(format!("trace scale must be >= 0, got {scale}")));
        }
        self.scale = scale;
        Ok(self)
    }

    pub fn repeating(mut self, repeat: bool) -> Self {
        self.repeat = repeat;
        self
    }

    pub fn with_unit(mut self, unit: Unit) -> Self {
        self.unit = unit;
        self
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interpolation
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn first_time(&self) -> Timestamp {
        self.times[0]
    }

    pub fn last_time(&self) -> Timestamp {
        self.times[self.times.len() - 1]
    }

    /// Raw (unscaled) points.
    pub fn points(&self) -> impl Iterator<Item = (Timestamp, f64)> + '_ {
        self.times.iter().copied().zip(self.values.iter().copied())
    }

    /// Cycle length for repeating traces: the covered span plus one more
    /// interval of the final spacing, so an hourly day repeats every 24 h.
    fn period(&self) -> i64 {
        let n = self.times.len();
        let span = self.times[n - 1] - self.times[0];
        span + (self.times[n - 1] - self.times[n - 2])
    }

    pub fn sample(&self, t: Timestamp) -> Result<Sample> {
        let first = self.first_time();
        let last = self.last_time();

        if self.repeat {
            if self.times.len() == 1 {
                return Ok(self.fresh(self.values[0]));
            }
            let period = self.period();
            let local = first + (t - first).rem_euclid(period);
            if local <= last {
                return Ok(self.fresh(self.interpolate(local)));
            }
            // Between the last point and the first point of the next cycle.
            let last_value = self.values[self.values.len() - 1];
            let value = match self.interpolation {
                Interpolation::Previous => last_value,
                Interpolation::Linear => {
                    let frac = (local - last) as f64 / ((first + period) - last) as f64;
                    last_value + (self.values[0] - last_value) * frac
                }
            };
            return Ok(self.fresh(value));
        }

        if t < first {
            return Err(Error::OutOfRange { requested: t, first });
        }
        if t > last {
            return Ok(Sample {
                value: self.values[self.values.len() - 1] * self.scale,
                stale: true,
            });
        }
        Ok(self.fresh(self.interpolate(t)))
    }

    /// Scaled value, ignoring the staleness flag.
    pub fn value_at(&self, t: Timestamp) -> Result<f64> {
        self.sample(t).map(|s| s.value)
    }

    fn fresh(&self, raw: f64) -> Sample {
        Sample {
            value: raw * self.scale,
            stale: false,
        }
    }

    // `t` must lie within [first, last].
    fn interpolate(&self, t: Timestamp) -> f64 {
        match self.times.binary_search(&t) {
            Ok(i) => self.values[i],
            Err(i) => {
                let (t0, v0) = (self.times[i - 1], self.values[i - 1]);
                match self.interpolation {
                    Interpolation::Previous => v0,
                    Interpolation::Linear => {
                        let (t1, v1) = (self.times[i], self.values[i]);
                        v0 + (v1 - v0) * ((t - t0) as f64 / (t1 - t0) as f64)
                    }
                }
            }
        }
    }
}

/// Selects a CSV column by header name or zero-based index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Column {
    Index(usize),
    Name(String),
}

impl Column {
    fn resolve(&self, headers: &csv::StringRecord, path: &str) -> Result<usize> {
        match self {
            Column::Index(i) if *i < headers.len() => Ok(*i),
            Column::Index(i) => Err(Error::ingestion(
                path,
                0,
                format!("column index {i} out of range ({} columns)", headers.len()),
            )),
            Column::Name(name) => headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::ingestion(path, 0, format!("no column named `{name}`"))),
        }
    }
}

impl fmt::Display for Column {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Column::Index(i) => write!(f, "#{i}"),
            Column::Name(n) => f.write_str(n),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceOptions {
    pub time_column: Column,
    pub value_column: Column,
    pub unit: Unit,
    pub interpolation: Interpolation,
    pub scale: f64,
    pub repeat: bool,
}

impl Default for TraceOptions {
    fn default() -> Self {
        TraceOptions {
            time_column: Column::Index(0),
            value_column: Column::Index(1),
            unit: Unit::Dimensionless,
            interpolation: Interpolation::Previous,
            scale: 1.0,
            repeat: false,
        }
    }
}

/// Reads a trace from a CSV file with a header row.
///
/// Data rows are numbered from 1 in error messages. The time column holds
/// ISO-8601 UTC timestamps or integer epoch seconds.
pub fn load_trace(path: impl AsRef<Path>, opts: &TraceOptions) -> Result<Trace> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::ingestion(&shown, 0, e.to_string()))?;
    let points = read_points(&mut reader, opts, &shown)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| shown.clone());
    Ok(Trace::new(points, opts.interpolation)?
        .scaled(opts.scale)?
        .repeating(opts.repeat)
        .with_unit(opts.unit)
        .named(name))
}

fn read_points<R: std::io::Read>(
    reader: &mut csv::Reader<R>,
    opts: &TraceOptions,
    path: &str,
) -> Result<Vec<(Timestamp, f64)>> {
    let headers = reader
        .headers()
        .map_err(|e| Error::ingestion(path, 0, e.to_string()))?
        .clone();
    let time_idx = opts.time_column.resolve(&headers, path)?;
    let value_idx = opts.value_column.resolve(&headers, path)?;

    let mut points: Vec<(Timestamp, f64)> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::ingestion(path, row, e.to_string()))?;
        let raw_time = record.get(time_idx).unwrap_or("");
        let raw_value = record.get(value_idx).unwrap_or("");
        let t = Timestamp::parse(raw_time)
            .ok_or_else(|| Error::ingestion(path, row, format!("unparseable timestamp `{raw_time}`")))?;
        let v: f64 = raw_value
            .parse()
            .map_err(|_| Error::ingestion(path, row, format!("unparseable value `{raw_value}`")))?;
        if !v.is_finite() {
            return Err(Error::ingestion(path, row, format!("non-finite value `{raw_value}`")));
        }
        if let Some(&(prev, _)) = points.last() {
            if t <= prev {
                return Err(Error::ingestion(
                    path,
                    row,
                    format!("timestamp {t} does not follow {prev}"),
                ));
            }
        }
        points.push((t, v));
    }
    if points.is_empty() {
        return Err(Error::ingestion(path, 1, "no data rows"));
    }
    Ok(points)
}

/// Forecast values for target times after the request, as issued at
/// `issue_time`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForecastWindow {
    pub issue_time: Timestamp,
    pub points: Vec<(Timestamp, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSet {
    issues: Vec<(Timestamp, Trace)>,
}

impl ForecastSet {
    pub fn new(mut issues: Vec<(Timestamp, Trace)>) -> Result<Self> {
        if issues.is_empty() {
            return Err(Error::input("forecast set needs at least one issue"));
        }
        issues.sort_by_key(|(t, _)| *t);
        for w in issues.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::input(format!("duplicate forecast issue time {}", w[0].0)));
            }
        }
        for (issued, trace) in &issues {
            if trace.first_time() < *issued {
                return Err(Error::input(format!(
                    "forecast issued at {issued} targets earlier time {}",
                    trace.first_time()
                )));
            }
        }
        Ok(ForecastSet { issues })
    }

    pub fn issue_times(&self) -> impl Iterator<Item = Timestamp> + '_ {
        self.issues.iter().map(|(t, _)| *t)
    }

    /// Latest issue at or before `request_time`, truncated to target times in
    /// `(request_time, request_time + horizon_s]`.
    pub fn forecast(&self, request_time: Timestamp, horizon_s: u64) -> Result<ForecastWindow> {
        let n = self.issues.partition_point(|(t, _)| *t <= request_time);
        if n == 0 {
            return Err(Error::NoForecast(request_time));
        }
        let (issue_time, trace) = &self.issues[n - 1];
        let end = request_time + horizon_s as i64;
        let points = trace
            .points()
            .filter(|(t, _)| *t > request_time && *t <= end)
            .map(|(t, v)| (t, v * trace.scale()))
            .collect();
        Ok(ForecastWindow {
            issue_time: *issue_time,
            points,
        })
    }

    /// Loads every `forecast_<ISO8601>.csv` in `dir`. Other files are ignored.
    pub fn load_dir(dir: impl AsRef<Path>, opts: &TraceOptions) -> Result<Self> {
        let dir = dir.as_ref();
        let mut issues = Vec::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            let Some(issue_time) = forecast_issue_time(&path) else {
                continue;
            };
            issues.push((issue_time, load_trace(&path, opts)?));
        }
        if issues.is_empty() {
            return Err(Error::ingestion(
                dir.display().to_string(),
                0,
                "no forecast_<ISO8601>.csv files found",
            ));
        }
        ForecastSet::new(issues)
    }
}

/// Issue time embedded in a `forecast_<ISO8601>.csv` filename.
pub fn forecast_issue_time(path: &Path) -> Option<Timestamp> {
    if path.extension()? != "csv" {
        return None;
    }
    let stem = path.file_stem()?.to_str()?;
    Timestamp::parse(stem.strip_prefix("forecast_")?)
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;

    fn ts(s: i64) -> Timestamp {
        Timestamp::from_epoch(s)
    }

    fn two_points(interp: Interpolation) -> Trace {
        Trace::new(vec![(ts(0), 100.0), (ts(3600), 200.0)], interp).unwrap()
    }

    #[test]
    fn linear_midpoint() {
        assert_eq!(two_points(Interpolation::Linear).value_at(ts(1800)).unwrap(), 150.0);
    }

    #[test]
    fn previous_value_hold() {
        assert_eq!(two_points(Interpolation::Previous).value_at(ts(1800)).unwrap(), 100.0);
    }

    #[test]
    fn scale_multiplies() {
        let t = Trace::new(vec![(ts(0), 100.0)], Interpolation::Previous)
            .unwrap()
            .scaled(2.5)
            .unwrap();
        assert_eq!(t.value_at(ts(0)).unwrap(), 250.0);
    }

    #[test]
    fn before_first_is_out_of_range() {
        let t = Trace::new(vec![(ts(100), 1.0)], Interpolation::Linear).unwrap();
        assert!(matches!(t.sample(ts(99)), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn past_end_holds_and_flags_stale() {
        let t = two_points(Interpolation::Linear);
        let s = t.sample(ts(3600)).unwrap();
        assert_eq!(s, Sample { value: 200.0, stale: false });
        let s = t.sample(ts(7200)).unwrap();
        assert_eq!(s, Sample { value: 200.0, stale: true });
    }

    #[test]
    fn repeat_wraps_cyclically() {
        let t = Trace::new(
            vec![(ts(0), 1.0), (ts(60), 2.0), (ts(120), 3.0)],
            Interpolation::Previous,
        )
        .unwrap()
        .repeating(true);
        // period is 180 s
        assert_eq!(t.value_at(ts(180)).unwrap(), 1.0);
        assert_eq!(t.value_at(ts(250)).unwrap(), 2.0);
        assert_eq!(t.value_at(ts(-10)).unwrap(), 3.0);
        assert!(!t.sample(ts(10_000)).unwrap().stale);

        let lin = Trace::new(vec![(ts(0), 0.0), (ts(60), 60.0)], Interpolation::Linear)
            .unwrap()
            .repeating(true);
        // wrap segment runs from 60 back down to 0 at t=120
        assert_eq!(lin.value_at(ts(90)).unwrap(), 30.0);
        assert_eq!(lin.value_at(ts(120)).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(Trace::new(vec![], Interpolation::Linear).is_err());
        assert!(Trace::new(vec![(ts(5), 1.0), (ts(5), 2.0)], Interpolation::Linear).is_err());
        assert!(Trace::new(vec![(ts(5), f64::NAN)], Interpolation::Linear).is_err());
        assert!(Trace::constant(1.0).unwrap().scaled(-1.0).is_err());
    }

    fn write_csv(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn load_two_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_csv(dir.path(), "a.csv", "t,v\n0,1\n60,2\n");
        let trace = load_trace(&p, &TraceOptions::default()).unwrap();
        assert_eq!(trace.len(), 2);
        assert_eq!(trace.name(), "a");
    }

    #[test]
    fn load_by_column_name_with_iso_times() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_csv(
            dir.path(),
            "ci.csv",
            "value,time\n300,2023-06-01T00:00:00Z\n250,2023-06-01T01:00:00Z\n",
        );
        let opts = TraceOptions {
            time_column: Column::Name("time".into()),
            value_column: Column::Name("value".into()),
            ..TraceOptions::default()
        };
        let trace = load_trace(&p, &opts).unwrap();
        let t = Timestamp::parse("2023-06-01T00:30:00Z").unwrap();
        assert_eq!(trace.value_at(t).unwrap(), 300.0);
    }

    #[test]
    fn load_rejects_out_of_order_at_row_two() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_csv(dir.path(), "a.csv", "t,v\n60,1\n0,2\n");
        match load_trace(&p, &TraceOptions::default()) {
            Err(Error::Ingestion { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_nan_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_csv(dir.path(), "a.csv", "t,v\n0,1\n60,NaN\n");
        assert!(matches!(
            load_trace(&p, &TraceOptions::default()),
            Err(Error::Ingestion { row: 2, .. })
        ));
        let p = write_csv(dir.path(), "b.csv", "t,v\n");
        assert!(matches!(
            load_trace(&p, &TraceOptions::default()),
            Err(Error::Ingestion { .. })
        ));
        let p = write_csv(dir.path(), "c.csv", "t,v\n0,abc\n");
        assert!(matches!(
            load_trace(&p, &TraceOptions::default()),
            Err(Error::Ingestion { row: 1, .. })
        ));
    }

    fn hourly_issue(issue: i64, values: &[f64]) -> (Timestamp, Trace) {
        let pts = values
            .iter()
            .enumerate()
            .map(|(i, v)| (ts(issue + 3600 * (i as i64 + 1)), *v))
            .collect();
        (ts(issue), Trace::new(pts, Interpolation::Previous).unwrap())
    }

    #[test]
    fn forecast_floor_to_issue() {
        let nine = 9 * 3600;
        let ten = 10 * 3600;
        let set = ForecastSet::new(vec![hourly_issue(nine, &[1.0, 2.0]), hourly_issue(ten, &[3.0, 4.0])])
            .unwrap();
        assert_eq!(set.forecast(ts(ten + 1800), 7200).unwrap().issue_time, ts(ten));
        assert_eq!(set.forecast(ts(ten), 3600).unwrap().issue_time, ts(ten));
        assert!(matches!(set.forecast(ts(nine - 60), 3600), Err(Error::NoForecast(_))));
    }

    #[test]
    fn forecast_truncates_to_horizon() {
        let set = ForecastSet::new(vec![hourly_issue(0, &[1.0, 2.0, 3.0, 4.0])]).unwrap();
        let w = set.forecast(ts(0), 7200).unwrap();
        assert_eq!(w.points, vec![(ts(3600), 1.0), (ts(7200), 2.0)]);
        let w = set.forecast(ts(3600), 3600).unwrap();
        assert_eq!(w.points, vec![(ts(7200), 2.0)]);
    }

    #[test]
    fn forecast_rejects_targets_before_issue() {
        let trace = Trace::new(vec![(ts(0), 1.0)], Interpolation::Previous).unwrap();
        assert!(ForecastSet::new(vec![(ts(10), trace)]).is_err());
    }

    #[test]
    fn forecast_dir_from_filenames() {
        let dir = tempfile::tempdir().unwrap();
        write_csv(
            dir.path(),
            "forecast_2023-06-01T09:00:00Z.csv",
            "target,value\n2023-06-01T10:00:00Z,300\n2023-06-01T11:00:00Z,280\n",
        );
        write_csv(
            dir.path(),
            "forecast_2023-06-01T10:00:00Z.csv",
            "target,value\n2023-06-01T11:00:00Z,250\n",
        );
        write_csv(dir.path(), "notes.txt", "ignored");
        let set = ForecastSet::load_dir(dir.path(), &TraceOptions::default()).unwrap();
        assert_eq!(set.issue_times().count(), 2);
        let req = Timestamp::parse("2023-06-01T10:30:00Z").unwrap();
        let w = set.forecast(req, 3600).unwrap();
        assert_eq!(w.issue_time, Timestamp::parse("2023-06-01T10:00:00Z").unwrap());
        assert_eq!(w.points.len(), 1);
        assert_eq!(w.points[0].1, 250.0);
    }
}
