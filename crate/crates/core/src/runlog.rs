//! Run log output and end-of-run summary.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::sim::StepRecord;

pub const CSV_HEADER: [&str; 9] = [
    "time",
    "production_w",
    "consumption_w",
    "battery_power_w",
    "battery_soc_kwh",
    "grid_power_w",
    "carbon_intensity_gpkwh",
    "step_carbon_g",
    "deadline_missed",
];

/// Streams step records as CSV, one row per step.
pub struct CsvLog<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> CsvLog<W> {
    pub fn new(inner: W) -> Result<Self> {
        let mut writer = csv::Writer::from_writer(inner);
        writer.write_record(CSV_HEADER)?;
        Ok(CsvLog { writer })
    }

    pub fn write(&mut self, r: &StepRecord) -> Result<()> {
        self.writer.write_record([
            r.time.iso8601(),
            r.production_w.to_string(),
            r.consumption_w.to_string(),
            r.battery_power_w.to_string(),
            r.battery_soc_kwh.to_string(),
            r.grid_power_w.to_string(),
            r.carbon_intensity_gpkwh.to_string(),
            r.step_carbon_g.to_string(),
            r.deadline_missed.to_string(),
        ])?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> Result<W> {
        self.writer
            .into_inner()
            .map_err(|e| crate::error::Error::Io(e.into_error()))
    }
}

pub fn write_csv(path: &Path, records: &[StepRecord]) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut log = CsvLog::new(file)?;
    for r in records {
        log.write(r)?;
    }
    log.flush()
}

pub fn to_csv_string(records: &[StepRecord]) -> Result<String> {
    let mut log = CsvLog::new(Vec::new())?;
    for r in records {
        log.write(r)?;
    }
    let bytes = log.into_inner()?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct RunSummary {
    pub steps_executed: u64,
    pub deadlines_missed: u64,
    pub total_production_kwh: f64,
    pub total_consumption_kwh: f64,
    pub total_grid_import_kwh: f64,
    pub total_grid_export_kwh: f64,
    pub battery_charged_kwh: f64,
    pub battery_discharged_kwh: f64,
    pub battery_loss_kwh: f64,
    pub initial_soc_kwh: f64,
    pub final_soc_kwh: f64,
    pub total_carbon_g: f64,
    pub stale_samples: u64,
    pub directives_applied: u64,
}

/// One `key=value` per line.
impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "steps_executed={}", self.steps_executed)?;
        writeln!(f, "deadlines_missed={}", self.deadlines_missed)?;
        writeln!(f, "total_production_kwh={}", self.total_production_kwh)?;
        writeln!(f, "total_consumption_kwh={}", self.total_consumption_kwh)?;
        writeln!(f, "total_grid_import_kwh={}", self.total_grid_import_kwh)?;
        writeln!(f, "total_grid_export_kwh={}", self.total_grid_export_kwh)?;
        writeln!(f, "battery_charged_kwh={}", self.battery_charged_kwh)?;
        writeln!(f, "battery_discharged_kwh={}", self.battery_discharged_kwh)?;
        writeln!(f, "battery_loss_kwh={}", self.battery_loss_kwh)?;
        writeln!(f, "initial_soc_kwh={}", self.initial_soc_kwh)?;
        writeln!(f, "final_soc_kwh={}", self.final_soc_kwh)?;
        writeln!(f, "total_carbon_g={}", self.total_carbon_g)?;
        writeln!(f, "stale_samples={}", self.stale_samples)?;
        write!(f, "directives_applied={}", self.directives_applied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::Timestamp;

    #[test]
    fn csv_round_trips_floats() {
        let r = StepRecord {
            time: Timestamp::from_epoch(1_700_000_000),
            production_w: 0.1 + 0.2,
            consumption_w: 500.0,
            battery_power_w: -1e-300,
            battery_soc_kwh: 5.9,
            grid_power_w: 199.99999999999997,
            carbon_intensity_gpkwh: 250.0,
            step_carbon_g: 0.8333333333333334,
            deadline_missed: true,
        };
        let s = to_csv_string(std::slice::from_ref(&r)).unwrap();
        let mut rdr = csv::Reader::from_reader(s.as_bytes());
        assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), CSV_HEADER);
        let row = rdr.records().next().unwrap().unwrap();
        assert_eq!(&row[0], "2023-11-14T22:13:20Z");
        assert_eq!(row[1].parse::<f64>().unwrap(), r.production_w);
        assert_eq!(row[3].parse::<f64>().unwrap(), r.battery_power_w);
        assert_eq!(row[5].parse::<f64>().unwrap(), r.grid_power_w);
        assert_eq!(&row[8], "true");
    }

    #[test]
    fn summary_lines() {
        let s = RunSummary { steps_executed: 3, ..Default::default() }.to_string();
        assert!(s.starts_with("steps_executed=3\n"));
        assert_eq!(s.lines().count(), 14);
    }
}
